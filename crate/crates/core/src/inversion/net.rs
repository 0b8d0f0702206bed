use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{expect_entries, load_checkpoint, save_checkpoint, truncated_normal, CheckpointManifest};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NumericsError, ParamSet, Real, Tensor, Var};

pub const INVERSION_KIND: &str = "inversion_net";
const ENTRIES: [&str; 6] = [
    "fc1_weight", "fc1_bias", "fc2_weight", "fc2_bias", "fc3_weight", "fc3_bias",
];

/// Shape of φ: `d_out → hidden → hidden → d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionShape {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
}

/// The textual inversion MLP, mapping a feature to a token embedding.
#[derive(Debug, Clone)]
pub struct InversionNet<T: Real> {
    shape: InversionShape,
    params: ParamSet<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct InversionVars([Var; 6]);

impl InversionVars {
    pub fn all(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> InversionNet<T> {
    /// `feature_dim` is the encoder's `d_out`, `embed_dim` its `d`; the
    /// hidden width is `4·embed_dim`. Weights start at `N(0, 1/fan_in)`
    /// (truncated), biases at zero.
    pub fn init<R: Rng + ?Sized>(feature_dim: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        let shape = InversionShape {
            d_in: feature_dim,
            hidden: 4 * embed_dim,
            d_out: embed_dim,
        };
        if feature_dim == 0 || embed_dim == 0 {
            return Err(Error::Contract("inversion net needs positive widths".into()));
        }
        let dims = [(shape.d_in, shape.hidden), (shape.hidden, shape.hidden), (shape.hidden, shape.d_out)];
        let mut params = ParamSet::new();
        for (i, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let std = 1.0 / (fan_in as f64).sqrt();
            params.push(ENTRIES[2 * i], truncated_normal(rng, &[fan_in, fan_out], std));
            params.push(ENTRIES[2 * i + 1], Tensor::zeros(&[fan_out]));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> InversionShape {
        self.shape
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> InversionNet<U> {
        InversionNet {
            shape: self.shape,
            params: self.params.cast(),
        }
    }

    pub fn from_params(shape: InversionShape, params: ParamSet<T>) -> Result<Self> {
        let dims = [(shape.d_in, shape.hidden), (shape.hidden, shape.hidden), (shape.hidden, shape.d_out)];
        if params.names() != ENTRIES {
            return Err(Error::Checkpoint(format!("inversion entries {:?}", params.names())));
        }
        for (i, (a, b)) in dims.into_iter().enumerate() {
            if params.get(2 * i).shape() != [a, b] || params.get(2 * i + 1).shape() != [b] {
                return Err(Error::Checkpoint(format!("inversion layer {} has the wrong shape", i + 1)));
            }
        }
        Ok(Self { shape, params })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> InversionVars {
        InversionVars(std::array::from_fn(|i| g.leaf(self.params.get(i).clone(), trainable)))
    }

    /// Maps `B × d_in` features to `B × d_out` token embeddings.
    pub fn forward(&self, g: &mut Graph<T>, vars: &InversionVars, x: Var) -> Result<Var> {
        let v = vars.0;
        let h = g.matmul(x, v[0])?;
        let h = g.add_row(h, v[1])?;
        let h = g.gelu(h);
        let h = g.matmul(h, v[2])?;
        let h = g.add_row(h, v[3])?;
        let h = g.gelu(h);
        let h = g.matmul(h, v[4])?;
        Ok(g.add_row(h, v[5])?)
    }

    /// Pseudo-token embeddings for a batch of features.
    pub fn invert_batch(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        if !features.all_finite() {
            return Err(NumericsError::NonFinite {
                name: "inversion input".into(),
            }
            .into());
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let out = self.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    pub fn invert(&self, feature: &[T]) -> Result<Vec<T>> {
        let f = Tensor::new(&[1, feature.len()], feature.to_vec())?;
        Ok(self.invert_batch(&f)?.into_vec())
    }

    pub fn save(&self, stem: &Path, seed: Option<u64>) -> Result<CheckpointManifest> {
        save_checkpoint(stem, INVERSION_KIND, &self.params, serde_json::to_value(self.shape)?, seed)
    }
}

impl InversionNet<f32> {
    pub fn load(stem: &Path) -> Result<Self> {
        let loaded = load_checkpoint(stem, INVERSION_KIND)?;
        expect_entries(&loaded.params, &ENTRIES)?;
        let shape: InversionShape = serde_json::from_value(loaded.manifest.config.clone())
            .map_err(|e| Error::Checkpoint(format!("inversion config snapshot: {e}")))?;
        Self::from_params(shape, loaded.params)
    }
}
