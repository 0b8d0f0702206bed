//! Synthetic scenes, captions and benchmark generation, plus the
//! LLM-driven triplet pipeline with mock and HTTP backends.

mod benchmark;
mod edit;
mod llm;
mod scene;
mod triplets;

pub use benchmark::{
    make_benchmark, BenchmarkConfig, BenchmarkSummary, GalleryRecord, QueryRecord, CORPUS_FILE,
    GALLERY_FILE, QUERY_FILE, SUMMARY_FILE, TRAIN_FILE,
};
pub use edit::{
    applicable_edits, apply_edit, apply_edits, composite_instruction, edit_to_instruction, sample_edit,
    sample_edits, EditKind, EditOp,
};
pub use llm::{
    build_llm_prompt, caption_from_prompt, parse_llm_reply, HttpBackend, HttpBackendConfig, LlmBackend,
    LlmReply, MockBackend, MockPlan,
};
pub use scene::{
    caption, cell_name, parse_caption, render, sample_scene, Background, Color, SceneObject, SceneSpec,
    Shape, CELLS, GRID, IMAGE_SIZE, MAX_OBJECTS,
};
pub use triplets::{
    generate_triplets, generate_triplets_file, read_jsonl, read_triplets, write_jsonl, CaptionRecord,
    GenerateOptions, GenerationStats, Source, TripletRecord,
};
