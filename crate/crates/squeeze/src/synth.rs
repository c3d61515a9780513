//! Seeded synthetic model stacks and calibration inputs for the harness.
//!
//! All draws come from a ChaCha stream keyed by the seed, so the same seed
//! reproduces the same bytes on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{LayerSpec, ModelSpec, Nonlinearity, Tensor, TensorContainer};

/// Shape of a synthetic stack: `layers` square linear layers of width `dim`
/// calibrated on `tokens` input rows.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub layers: usize,
    pub dim: usize,
    pub tokens: usize,
    pub relu: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layers: 12,
            dim: 16,
            tokens: 32,
            relu: false,
        }
    }
}

/// Generate weights `w0..w{L-1}` (entries ~ N(0, 1/√dim), keeping layer
/// outputs roughly unit scale), a matching model spec, and a calibration
/// tensor named `calib` (entries ~ N(0, 1)).
pub fn synth_stack(seed: u64, spec: &SynthSpec) -> Result<(TensorContainer, ModelSpec, Tensor)> {
    assert!(spec.layers > 0 && spec.dim > 0 && spec.tokens > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight_dist = Normal::new(0.0, 1.0 / (spec.dim as f64).sqrt()).expect("valid sigma");
    let input_dist = Normal::new(0.0, 1.0).expect("valid sigma");

    let mut container = TensorContainer::new();
    let mut model = ModelSpec::default();
    for i in 0..spec.layers {
        let name = format!("w{i}");
        let data: Vec<f32> = (0..spec.dim * spec.dim)
            .map(|_| weight_dist.sample(&mut rng) as f32)
            .collect();
        container.insert(Tensor::new(&name, spec.dim, spec.dim, data)?)?;
        model.layers.push(LayerSpec {
            weight: name,
            nonlinearity: if spec.relu {
                Nonlinearity::Relu
            } else {
                Nonlinearity::Identity
            },
        });
    }
    let calib: Vec<f32> = (0..spec.tokens * spec.dim)
        .map(|_| input_dist.sample(&mut rng) as f32)
        .collect();
    let calib = Tensor::new("calib", spec.tokens, spec.dim, calib)?;
    Ok((container, model, calib))
}
