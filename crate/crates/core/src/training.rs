//! Pieces shared by the training loops: batch sampling and loss curves.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub points: Vec<LossPoint>,
}

impl LossCurve {
    pub fn push(&mut self, step: u64, loss: f64, lr: f64) {
        self.points.push(LossPoint { step, loss, lr });
    }

    pub fn first(&self) -> Option<&LossPoint> {
        self.points.first()
    }

    pub fn last(&self) -> Option<&LossPoint> {
        self.points.last()
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().all(|p| p.loss.is_finite())
    }

    /// Mean loss over the first and last `window` logged points.
    pub fn head_tail_means(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.points.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[LossPoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.points[..w]), mean(&self.points[n - w..])))
    }

    /// Writes `step,loss,lr` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        let mut out = String::from("step,loss,lr\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.lr));
        }
        f.write_all(out.as_bytes()).map_err(io_err(path))
    }
}

/// Draws mini-batches by walking through shuffled epochs.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    pub fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, rng: &mut R, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch && !self.order.is_empty() {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let idx = self.order[self.cursor];
            self.cursor += 1;
            if !out.contains(&idx) {
                out.push(idx);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sampler_covers_epoch_without_repeats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = EpochSampler::new(10);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(&mut rng, 2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let b = s.next_batch(&mut rng, 10);
        let mut u = b.clone();
        u.dedup();
        assert_eq!(b.len(), 10);
    }
}
