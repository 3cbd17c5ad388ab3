//! Whole-network gradient verification in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelParams, Network, NetworkConfig};
use crate::error::Result;
use crate::tensor::{
    finite_diff_check, GradCheckOptions, GradCheckReport, Graph, NormMode, Tensor, Var,
};

pub const PROBE_SIDE: usize = 16;

/// A default-configured network at a generic point: random weights, nonzero
/// biases and running statistics, random input and a random projection that
/// turns the fused map into a scalar.
pub struct GradientProbe {
    pub network: Network<f64>,
    pub params: ModelParams<f64>,
    pub input: Tensor<f64>,
    pub projection: Tensor<f64>,
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

impl GradientProbe {
    pub fn new(seed: u64, side: usize) -> Result<Self> {
        let network = Network::<f64>::new(NetworkConfig::default())?;
        let mut params = network.init_params(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for (name, t) in params.named_mut() {
            if name.contains("running_mean") {
                *t = uniform(t.shape(), -0.2, 0.2, &mut rng);
            } else if name.contains("running_var") {
                *t = uniform(t.shape(), 0.05, 0.5, &mut rng);
            } else if t.requires_grad() && t.data().iter().all(|&v| v == 0.0) {
                *t = uniform(t.shape(), -0.1, 0.1, &mut rng).with_requires_grad(true);
            }
        }
        let input = uniform(&[1, 2, side, side], 0.0, 1.0, &mut rng);
        let projection = uniform(&[1, 1, side, side], -1.0, 1.0, &mut rng);
        Ok(Self {
            network,
            params,
            input,
            projection,
        })
    }

    /// `sum((F - 1/2) * r)` in inference normalization.
    pub fn loss(&self, g: &mut Graph<f64>, params: &ModelParams<f64>) -> Result<Var<f64>> {
        let x = g.constant(self.input.clone());
        let out = self.network.forward(g, params, &x, NormMode::Infer)?;
        let centered = g.add_scalar(&out.fused, -0.5);
        let r = g.constant(self.projection.clone());
        let prod = g.mul(&centered, &r)?;
        Ok(g.sum(&prod))
    }

    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        finite_diff_check(|g, p| self.loss(g, p), &self.params, opts)
    }
}
