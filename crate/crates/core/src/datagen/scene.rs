//! Procedural scenes: up to three coloured shapes on a 3×3 grid over a
//! plain background, rendered to 32×32 images and captioned by a fixed
//! grammar.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::ImageTensor;
use crate::error::{Error, Result};

pub const GRID: usize = 3;
pub const CELLS: usize = GRID * GRID;
pub const IMAGE_SIZE: usize = 32;
pub const MAX_OBJECTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    White,
    Black,
    Gray,
    Pink,
    Brown,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [235, 215, 40],
            Color::Purple => [140, 60, 190],
        }
    }
}

impl Background {
    pub const ALL: [Background; 5] = [
        Background::White,
        Background::Black,
        Background::Gray,
        Background::Pink,
        Background::Brown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Background::White => "white",
            Background::Black => "black",
            Background::Gray => "gray",
            Background::Pink => "pink",
            Background::Brown => "brown",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Background::White => [250, 250, 250],
            Background::Black => [15, 15, 15],
            Background::Gray => [128, 128, 128],
            Background::Pink => [245, 170, 200],
            Background::Brown => [115, 75, 40],
        }
    }
}

/// Phrase for a grid cell, e.g. `"top left"`.
pub fn cell_name(cell: usize) -> &'static str {
    const NAMES: [&str; CELLS] = [
        "top left", "top", "top right", "left", "center", "right", "bottom left", "bottom", "bottom right",
    ];
    NAMES[cell]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    /// Row-major grid cell, `0..9`.
    pub cell: usize,
}

impl SceneObject {
    /// `"red circle"`.
    pub fn label(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

/// A scene. Objects are kept sorted by cell; no two share a cell or the
/// same (shape, color) pair, so every object can be named unambiguously.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<SceneObject>,
    pub background: Background,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(mut objects: Vec<SceneObject>, background: Background, seed: u64) -> Result<Self> {
        objects.sort_by_key(|o| o.cell);
        let scene = Self {
            objects,
            background,
            seed,
        };
        scene.validate()?;
        Ok(scene)
    }

    /// Structural checks that hold for any intermediate scene.
    pub(crate) fn check_layout(&self) -> Result<()> {
        for (i, a) in self.objects.iter().enumerate() {
            if a.cell >= CELLS {
                return Err(Error::Contract(format!("cell {} outside the 3×3 grid", a.cell)));
            }
            for b in &self.objects[i + 1..] {
                if a.cell == b.cell {
                    return Err(Error::Contract(format!("two objects share cell {}", a.cell)));
                }
                if a.shape == b.shape && a.color == b.color {
                    return Err(Error::Contract(format!("two {} objects", a.label())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(Error::Contract(format!(
                "scene holds {} objects, expected 1 to {MAX_OBJECTS}",
                self.objects.len()
            )));
        }
        self.check_layout()
    }

    /// Same objects and background, ignoring the provenance seed.
    pub fn same_content(&self, other: &SceneSpec) -> bool {
        self.objects == other.objects && self.background == other.background
    }

    pub fn object_at(&self, cell: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<usize> {
        (0..CELLS).filter(|&c| self.object_at(c).is_none()).collect()
    }

    pub fn has_kind(&self, shape: Shape, color: Color) -> bool {
        self.objects.iter().any(|o| o.shape == shape && o.color == color)
    }

    pub(crate) fn normalize(&mut self) {
        self.objects.sort_by_key(|o| o.cell);
    }
}

/// Draws a valid random scene; `seed` is recorded for provenance.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, seed: u64) -> SceneSpec {
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<usize> = (0..CELLS).collect();
    cells.shuffle(rng);
    let mut kinds: Vec<(Shape, Color)> = Shape::ALL
        .iter()
        .flat_map(|&s| Color::ALL.iter().map(move |&c| (s, c)))
        .collect();
    kinds.shuffle(rng);
    let objects = (0..count)
        .map(|i| SceneObject {
            shape: kinds[i].0,
            color: kinds[i].1,
            cell: cells[i],
        })
        .collect();
    let background = *Background::ALL.choose(rng).expect("non-empty");
    SceneSpec::new(objects, background, seed).expect("sampled scenes are valid")
}

/// `"a red circle and a blue square on a white background"`; objects are
/// listed in shape-then-color order, independent of position.
pub fn caption(scene: &SceneSpec) -> Result<String> {
    scene.validate()?;
    let mut objs: Vec<&SceneObject> = scene.objects.iter().collect();
    objs.sort_by_key(|o| (o.shape, o.color));
    let parts: Vec<String> = objs.iter().map(|o| format!("a {}", o.label())).collect();
    Ok(format!("{} on a {} background", parts.join(" and "), scene.background.name()))
}

/// Inverse of [`caption`]: objects are placed in cells `0, 1, 2` since
/// captions carry no positions.
pub fn parse_caption(text: &str, seed: u64) -> Result<SceneSpec> {
    let bad = || Error::Parse(format!("not a scene caption: {text:?}"));
    let text = text.trim().trim_end_matches('.').to_lowercase();
    let (objs, bg) = text.rsplit_once(" on a ").ok_or_else(bad)?;
    let bg = bg.strip_suffix(" background").ok_or_else(bad)?;
    let background = Background::ALL
        .into_iter()
        .find(|b| b.name() == bg)
        .ok_or_else(bad)?;
    let mut objects = Vec::new();
    for (cell, part) in objs.split(" and ").enumerate() {
        let words: Vec<&str> = part.split_whitespace().collect();
        let [article, color, shape] = words.as_slice() else {
            return Err(bad());
        };
        if !matches!(*article, "a" | "an") {
            return Err(bad());
        }
        let color = Color::ALL.into_iter().find(|c| c.name() == *color).ok_or_else(bad)?;
        let shape = Shape::ALL.into_iter().find(|s| s.name() == *shape).ok_or_else(bad)?;
        objects.push(SceneObject { shape, color, cell });
    }
    SceneSpec::new(objects, background, seed).map_err(|_| bad())
}

const CELL_PX: usize = 10;
const ORIGIN: usize = 1;

fn inside(shape: Shape, x: usize, y: usize) -> bool {
    // coordinates inside a 10×10 cell; shapes keep a one-pixel margin
    let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
    match shape {
        Shape::Circle => (fx - 5.0).powi(2) + (fy - 5.0).powi(2) <= 4.0f64.powi(2),
        Shape::Square => (1..9).contains(&x) && (1..9).contains(&y),
        Shape::Triangle => {
            if !(1..9).contains(&y) {
                return false;
            }
            let half = (fy - 1.0) / 2.0;
            (fx - 5.0).abs() <= half
        }
    }
}

/// Rasterizes the scene into a 32×32 image.
pub fn render(scene: &SceneSpec) -> Result<ImageTensor> {
    scene.validate()?;
    let bg = scene.background.rgb();
    let mut rgb = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
        rgb.extend_from_slice(&bg);
    }
    for o in &scene.objects {
        let (row, col) = (o.cell / GRID, o.cell % GRID);
        let (y0, x0) = (ORIGIN + row * CELL_PX, ORIGIN + col * CELL_PX);
        let c = o.color.rgb();
        for y in 0..CELL_PX {
            for x in 0..CELL_PX {
                if inside(o.shape, x, y) {
                    let p = ((y0 + y) * IMAGE_SIZE + x0 + x) * 3;
                    rgb[p..p + 3].copy_from_slice(&c);
                }
            }
        }
    }
    ImageTensor::from_rgb8(IMAGE_SIZE, IMAGE_SIZE, &rgb)
}
