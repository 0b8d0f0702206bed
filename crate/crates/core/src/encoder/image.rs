//! Images as `3 × H × W` channel-major floats in `[0, 1]`, stored on disk as
//! binary PPM.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{io_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Builds an image from channel-major values, clamping into `[0, 1]`.
    pub fn new(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::Contract(format!(
                "{} values for a 3×{height}×{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::Contract("image holds NaN".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Contract(format!(
                "{} bytes for a {height}×{width} RGB image",
                rgb.len()
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * plane);
        for p in 0..plane {
            for c in 0..3 {
                out.push((self.data[c * plane + p] * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, channel: usize, y: usize, x: usize, value: f32) {
        self.data[(channel * self.height + y) * self.width + x] = value.clamp(0.0, 1.0);
    }

    /// Non-overlapping `patch × patch` tiles in row-major tile order, each
    /// flattened channel-major.
    pub fn patches(&self, patch: usize) -> Result<Vec<f32>> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Contract(format!(
                "{}×{} image does not tile into {patch}-pixel patches",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity(self.data.len());
        for ty in 0..self.height / patch {
            for tx in 0..self.width / patch {
                for c in 0..3 {
                    for y in 0..patch {
                        for x in 0..patch {
                            out.push(self.get(c, ty * patch + y, tx * patch + x));
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.to_rgb8());
        std::fs::write(path, bytes).map_err(io_err(path))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut reader = BufReader::new(file);
        let bad = |msg: &str| Error::Ingestion {
            path: path.to_path_buf(),
            line: 1,
            message: msg.to_string(),
        };
        let mut header = Vec::new();
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
                return Err(bad("truncated PPM header"));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_string));
        }
        if header[0] != "P6" || header[3] != "255" {
            return Err(bad("expected a binary 8-bit PPM (P6, maxval 255)"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM dimensions"));
        let (width, height) = (parse(&header[1])?, parse(&header[2])?);
        let mut rgb = vec![0u8; 3 * width * height];
        reader.read_exact(&mut rgb).map_err(|_| bad("truncated PPM pixel data"))?;
        Self::from_rgb8(height, width, &rgb)
    }
}
