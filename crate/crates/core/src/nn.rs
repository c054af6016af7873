//! Small building blocks shared by the attention layers and models.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ParamStore, Tensor};

/// `x · W (+ b)` applied over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Registers `name` (weight, Glorot-uniform) and `name.bias` (zeros).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Linear> {
        let weight = store.glorot(name, fan_in, fan_out, rng)?;
        let bias = if bias {
            Some(store.zeros(format!("{name}.bias"), &[fan_out])?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

/// Element-wise gain and shift after [`Tensor::layer_norm`].
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: store.ones(format!("{name}.gain"), &[width])?,
            shift: store.zeros(format!("{name}.shift"), &[width])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(self.eps).mul(&self.gain)?.add(&self.shift)
    }
}

/// Inverted dropout: zeroes entries with probability `p` and rescales the
/// survivors by `1/(1-p)`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.uniform(0.0, 1.0) < p { 0.0 } else { keep })
        .collect();
    x.mul(&Tensor::from_vec(x.shape(), mask)?)
}
