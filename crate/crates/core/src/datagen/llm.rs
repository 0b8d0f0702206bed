//! LLM prompt construction, reply parsing and the backends that answer it.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::edit::{apply_edits, composite_instruction, sample_edits, EditOp};
use super::scene::{caption, parse_caption, SceneSpec};
use crate::error::{Error, Result};

const TEMPLATE: &str = "I have an image. Carefully generate an informative instruction to edit this image and generate a description of the edited image. I will put my image content beginning with \u{201c}image_content:\u{201d}. The instruction you generate should begin with \u{201c}instruction:\u{201d}. The edited description you generate should begin with \u{201c}edited_description:\u{201d}. The instruction you generate includes one or two modifications (each with a 50% probability), which can cover various semantic aspects, including cardinality, addition, negation, direct addressing, compare&change, comparative, conjunction, spatial relations&background, viewpoint. Don't just use basic terms like remove, add, or replace in the instruction; try to be a little more diverse. The edited description need to be as simple as possible. The instruction does not need to explicitly indicate which type it is. Avoid adding imaginary things. Each time generate one instruction and one edited description only. The output should be in json format. An example, image_content: a group of puppies is sitting on a field of dry grass. Your output should strictly follow the format below: {\u{201c}instruction\u{201d}: \u{201c}make them sit on the wooden floor with towels\u{201d}, \u{201c}edited_description\u{201d}: \u{201c}some puppies is sitting on a wooden floor covered with towels\u{201d}}.";

const CONTENT_MARKER: &str = "image_content:";

/// The triplet-generation prompt with `caption` as the image content.
pub fn build_llm_prompt(caption: &str) -> Result<String> {
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(Error::EmptyInput("caption for the LLM prompt".into()));
    }
    Ok(format!("{TEMPLATE}\n{CONTENT_MARKER} {caption}"))
}

/// The caption substituted into a prompt built by [`build_llm_prompt`].
pub fn caption_from_prompt(prompt: &str) -> Option<&str> {
    let (_, tail) = prompt.rsplit_once(&format!("\n{CONTENT_MARKER}"))?;
    Some(tail.trim())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmReply {
    pub instruction: String,
    pub edited_description: String,
}

/// Byte range of the first balanced `{...}` in `text`, skipping braces
/// inside string literals.
fn first_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

fn extract(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    let obj = first_object(text)?;
    serde_json::from_str(obj).ok()
}

/// Pulls `instruction` and `edited_description` out of a free-form reply.
/// Typographic quotes are accepted.
pub fn parse_llm_reply(text: &str) -> Result<LlmReply> {
    let map = extract(text)
        .or_else(|| extract(&text.replace(['\u{201c}', '\u{201d}'], "\"")))
        .ok_or_else(|| Error::Parse(format!("no JSON object in reply {text:?}")))?;
    let field = |key: &str| -> Result<String> {
        let value = map
            .get(key)
            .or_else(|| map.get(&key.replace('_', " ")))
            .and_then(|v| v.as_str())
            .map(str::trim)
            .unwrap_or_default();
        if value.is_empty() {
            return Err(Error::Parse(format!("reply lacks a non-empty {key:?}")));
        }
        Ok(value.to_string())
    };
    Ok(LlmReply {
        instruction: field("instruction")?,
        edited_description: field("edited_description")?,
    })
}

/// A text-completion service.
pub trait LlmBackend: Sync {
    fn generate(&self, prompt: &str) -> Result<String>;

    /// `"mock"` or `"llm"`, recorded on each triplet.
    fn source(&self) -> super::triplets::Source;
}

/// Deterministic stand-in for an LLM on synthetic captions: it parses the
/// caption back into a scene, applies one or two sampled edits and
/// describes the result with the caption grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockBackend {
    pub seed: u64,
}

/// What the mock decided for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MockPlan {
    pub scene: SceneSpec,
    pub edits: Vec<EditOp>,
    pub instruction: String,
    pub edited: SceneSpec,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn rng_for(&self, prompt: &str) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update(self.seed.to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    pub fn plan(&self, prompt: &str) -> Result<MockPlan> {
        let text = caption_from_prompt(prompt)
            .ok_or_else(|| Error::Backend("prompt has no image_content".into()))?;
        let scene = parse_caption(text, self.seed)
            .map_err(|_| Error::Backend(format!("mock backend cannot read caption {text:?}")))?;
        let mut rng = self.rng_for(prompt);
        let count = if rng.gen_bool(0.5) { 1 } else { 2 };
        let edits = sample_edits(&scene, count, &mut rng);
        let instruction = composite_instruction(&scene, &edits, rng.gen())?;
        let edited = apply_edits(&scene, &edits)?;
        Ok(MockPlan {
            scene,
            edits,
            instruction,
            edited,
        })
    }
}

impl LlmBackend for MockBackend {
    fn generate(&self, prompt: &str) -> Result<String> {
        let plan = self.plan(prompt)?;
        let reply = serde_json::json!({
            "instruction": plan.instruction,
            "edited_description": caption(&plan.edited)?,
        });
        Ok(reply.to_string())
    }

    fn source(&self) -> super::triplets::Source {
        super::triplets::Source::Mock
    }
}

/// Settings of a chat-completion style HTTP endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_token_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrent: usize,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "llama-3-8b-instruct".into(),
            auth_token_env: "MOTADUAL_LLM_TOKEN".into(),
            timeout_secs: 60,
            max_retries: 2,
            max_concurrent: 4,
        }
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    token: String,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    /// Fails before any request when the token variable is unset.
    pub fn new(config: HttpBackendConfig) -> Result<Self> {
        let token = std::env::var(&config.auth_token_env).map_err(|_| {
            Error::Config(format!(
                "environment variable {} with the LLM auth token is not set",
                config.auth_token_env
            ))
        })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Backend(format!("http client: {e}")))?;
        Ok(Self { config, token, client })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }
}

impl LlmBackend for HttpBackend {
    fn generate(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "stream": false,
        });
        let resp = self
            .client
            .post(&self.config.endpoint)
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .map_err(|e| Error::Backend(format!("request failed: {e}")))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Backend(format!("endpoint answered {status}")));
        }
        let value: serde_json::Value = resp
            .json()
            .map_err(|e| Error::Backend(format!("response is not JSON: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .or_else(|| value["choices"][0]["text"].as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Backend("response has no completion text".into()))
    }

    fn source(&self) -> super::triplets::Source {
        super::triplets::Source::Llm
    }
}
