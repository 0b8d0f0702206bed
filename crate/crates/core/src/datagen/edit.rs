//! Scene edits and their natural-language instructions.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{cell_name, Background, Color, SceneObject, SceneSpec, Shape, MAX_OBJECTS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EditOp {
    Recolor { cell: usize, to: Color },
    Add { shape: Shape, color: Color, cell: usize },
    Remove { cell: usize },
    Move { from: usize, to: usize },
    ChangeBackground { to: Background },
    ChangeShape { cell: usize, to: Shape },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditKind {
    Recolor,
    Add,
    Remove,
    Move,
    ChangeBackground,
    ChangeShape,
}

impl EditKind {
    pub const ALL: [EditKind; 6] = [
        EditKind::Recolor,
        EditKind::Add,
        EditKind::Remove,
        EditKind::Move,
        EditKind::ChangeBackground,
        EditKind::ChangeShape,
    ];
}

impl EditOp {
    pub fn kind(&self) -> EditKind {
        match self {
            EditOp::Recolor { .. } => EditKind::Recolor,
            EditOp::Add { .. } => EditKind::Add,
            EditOp::Remove { .. } => EditKind::Remove,
            EditOp::Move { .. } => EditKind::Move,
            EditOp::ChangeBackground { .. } => EditKind::ChangeBackground,
            EditOp::ChangeShape { .. } => EditKind::ChangeShape,
        }
    }
}

fn inapplicable(edit: &EditOp, why: &str) -> Error {
    Error::Contract(format!("edit {edit:?} is not applicable: {why}"))
}

/// Applies one edit. The result may hold no objects (a removal that a
/// later addition compensates); [`apply_edits`] validates final scenes.
pub fn apply_edit(scene: &SceneSpec, edit: &EditOp) -> Result<SceneSpec> {
    let mut out = scene.clone();
    let find = |cell: usize| {
        scene
            .objects
            .iter()
            .position(|o| o.cell == cell)
            .ok_or_else(|| inapplicable(edit, "no object in that cell"))
    };
    match *edit {
        EditOp::Recolor { cell, to } => {
            let i = find(cell)?;
            if out.objects[i].color == to {
                return Err(inapplicable(edit, "object already has that color"));
            }
            out.objects[i].color = to;
        }
        EditOp::Add { shape, color, cell } => {
            if scene.objects.len() >= MAX_OBJECTS {
                return Err(inapplicable(edit, "scene is full"));
            }
            if scene.object_at(cell).is_some() {
                return Err(inapplicable(edit, "cell is occupied"));
            }
            out.objects.push(SceneObject { shape, color, cell });
        }
        EditOp::Remove { cell } => {
            let i = find(cell)?;
            out.objects.remove(i);
        }
        EditOp::Move { from, to } => {
            let i = find(from)?;
            if from == to || scene.object_at(to).is_some() {
                return Err(inapplicable(edit, "destination is occupied"));
            }
            out.objects[i].cell = to;
        }
        EditOp::ChangeBackground { to } => {
            if scene.background == to {
                return Err(inapplicable(edit, "background already has that color"));
            }
            out.background = to;
        }
        EditOp::ChangeShape { cell, to } => {
            let i = find(cell)?;
            if out.objects[i].shape == to {
                return Err(inapplicable(edit, "object already has that shape"));
            }
            out.objects[i].shape = to;
        }
    }
    out.normalize();
    out.check_layout().map_err(|e| inapplicable(edit, &e.to_string()))?;
    Ok(out)
}

/// Applies edits in order; the final scene must be valid and differ from
/// the source.
pub fn apply_edits(scene: &SceneSpec, edits: &[EditOp]) -> Result<SceneSpec> {
    let mut cur = scene.clone();
    for e in edits {
        cur = apply_edit(&cur, e)?;
    }
    cur.validate()?;
    if cur.same_content(scene) {
        return Err(Error::Contract("edit sequence leaves the scene unchanged".into()));
    }
    Ok(cur)
}

fn pick(templates: &[&'static str], variant: u64) -> &'static str {
    // splitmix64 finalizer, so consecutive seeds do not walk the pool in order
    let mut z = variant.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    templates[(z % templates.len() as u64) as usize]
}

const RECOLOR: [&str; 4] = [
    "turn the {obj} {color}",
    "make the {obj} {color}",
    "change the color of the {obj} to {color}",
    "paint the {obj} {color}",
];
const ADD: [&str; 4] = [
    "add a {new} in the {pos}",
    "put a {new} in the {pos}",
    "include a {new} at the {pos}",
    "place a {new} in the {pos}",
];
const REMOVE: [&str; 4] = [
    "remove the {obj}",
    "take away the {obj}",
    "get rid of the {obj}",
    "erase the {obj}",
];
const MOVE: [&str; 3] = [
    "move the {obj} to the {pos}",
    "shift the {obj} to the {pos}",
    "slide the {obj} to the {pos}",
];
const BACKGROUND: [&str; 4] = [
    "change the background to {bg}",
    "make the background {bg}",
    "set it against a {bg} background",
    "switch to a {bg} background",
];
const RESHAPE: [&str; 4] = [
    "turn the {obj} into a {shape}",
    "change the {obj} to a {shape}",
    "make the {obj} a {shape}",
    "replace the {obj} with a {color} {shape}",
];

/// Instruction for `edit` applied to `scene`; `variant` selects the
/// phrasing deterministically.
pub fn edit_to_instruction(edit: &EditOp, scene: &SceneSpec, variant: u64) -> Result<String> {
    let label = |cell: usize| {
        scene
            .object_at(cell)
            .map(SceneObject::label)
            .ok_or_else(|| inapplicable(edit, "no object in that cell"))
    };
    let text = match *edit {
        EditOp::Recolor { cell, to } => pick(&RECOLOR, variant)
            .replace("{obj}", &label(cell)?)
            .replace("{color}", to.name()),
        EditOp::Add { shape, color, cell } => pick(&ADD, variant)
            .replace("{new}", &format!("{} {}", color.name(), shape.name()))
            .replace("{pos}", cell_name(cell)),
        EditOp::Remove { cell } => pick(&REMOVE, variant).replace("{obj}", &label(cell)?),
        EditOp::Move { from, to } => pick(&MOVE, variant)
            .replace("{obj}", &label(from)?)
            .replace("{pos}", cell_name(to)),
        EditOp::ChangeBackground { to } => pick(&BACKGROUND, variant).replace("{bg}", to.name()),
        EditOp::ChangeShape { cell, to } => {
            let color = scene.object_at(cell).map(|o| o.color.name()).unwrap_or_default();
            pick(&RESHAPE, variant)
                .replace("{obj}", &label(cell)?)
                .replace("{color}", color)
                .replace("{shape}", to.name())
        }
    };
    Ok(text)
}

/// Instructions for an edit sequence, each phrased against the scene it
/// applies to, joined with `" and "`.
pub fn composite_instruction(scene: &SceneSpec, edits: &[EditOp], variant: u64) -> Result<String> {
    let mut cur = scene.clone();
    let mut parts = Vec::with_capacity(edits.len());
    for (i, e) in edits.iter().enumerate() {
        parts.push(edit_to_instruction(e, &cur, variant.wrapping_add(i as u64 * 7919))?);
        cur = apply_edit(&cur, e)?;
    }
    Ok(parts.join(" and "))
}

/// Every edit of `kind` applicable to `scene` that keeps it valid.
pub fn applicable_edits(scene: &SceneSpec, kind: EditKind) -> Vec<EditOp> {
    let mut out = Vec::new();
    let n = scene.objects.len();
    match kind {
        EditKind::Recolor => {
            for o in &scene.objects {
                for c in Color::ALL {
                    if c != o.color && !scene.has_kind(o.shape, c) {
                        out.push(EditOp::Recolor { cell: o.cell, to: c });
                    }
                }
            }
        }
        EditKind::Add if n < MAX_OBJECTS => {
            for cell in scene.free_cells() {
                for s in Shape::ALL {
                    for c in Color::ALL {
                        if !scene.has_kind(s, c) {
                            out.push(EditOp::Add { shape: s, color: c, cell });
                        }
                    }
                }
            }
        }
        EditKind::Remove if n > 1 => {
            out.extend(scene.objects.iter().map(|o| EditOp::Remove { cell: o.cell }));
        }
        EditKind::Move => {
            for o in &scene.objects {
                for to in scene.free_cells() {
                    out.push(EditOp::Move { from: o.cell, to });
                }
            }
        }
        EditKind::ChangeBackground => {
            out.extend(
                Background::ALL
                    .into_iter()
                    .filter(|&b| b != scene.background)
                    .map(|to| EditOp::ChangeBackground { to }),
            );
        }
        EditKind::ChangeShape => {
            for o in &scene.objects {
                for s in Shape::ALL {
                    if s != o.shape && !scene.has_kind(s, o.color) {
                        out.push(EditOp::ChangeShape { cell: o.cell, to: s });
                    }
                }
            }
        }
        _ => {}
    }
    out
}

/// Uniform over kinds that have an applicable edit, then uniform within.
pub fn sample_edit<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R) -> EditOp {
    let options: Vec<Vec<EditOp>> = EditKind::ALL
        .iter()
        .map(|&k| applicable_edits(scene, k))
        .filter(|v| !v.is_empty())
        .collect();
    let kind = options.choose(rng).expect("background changes always apply");
    *kind.choose(rng).expect("non-empty")
}

/// One or two edits whose combined effect changes the scene.
pub fn sample_edits<R: Rng + ?Sized>(scene: &SceneSpec, count: usize, rng: &mut R) -> Vec<EditOp> {
    loop {
        let mut cur = scene.clone();
        let mut edits = Vec::with_capacity(count);
        for _ in 0..count {
            let e = sample_edit(&cur, rng);
            cur = apply_edit(&cur, &e).expect("sampled edits apply");
            edits.push(e);
        }
        if !cur.same_content(scene) {
            return edits;
        }
    }
}
