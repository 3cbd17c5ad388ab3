//! Mini-batch training: seeded shuffles, Adam with cosine annealing, and a
//! per-step loss trace.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::ImagePair;
use super::optim::{cosine_lr, TrainState};
use super::resize::resize_bilinear;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::network::{ModelParams, Network};
use crate::tensor::{Graph, NormMode, ParamSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    /// Square side every pair is resized to.
    pub patch: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Stops after this many optimizer steps, continuing across epochs as needed.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch: 32,
            lr: 1e-3,
            lr_min: 0.0,
            patch: 224,
            seed: 0,
            weights: LossWeights::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Small patches and batches for a handful of 64x64 pairs on a CPU.
    pub fn desk() -> Self {
        Self {
            epochs: 100,
            batch: 4,
            patch: 64,
            ..Self::default()
        }
    }

    pub fn steps_per_epoch(&self, pairs: usize) -> usize {
        pairs.div_ceil(self.batch.max(1))
    }

    pub fn total_steps(&self, pairs: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(pairs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 {
            return Err(Error::Config("batch and patch must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Loss of the batch before this step's update.
    pub loss: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub trace: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f64> {
        self.trace.first().map(|r| r.loss.total)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|r| r.loss.total)
    }
}

/// Shuffle order for one epoch; the epoch counter is mixed into the seed.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mixed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mixed));
    order
}

fn batch_input(pairs: &[&(Image, Image)]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let irs: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
    let vis: Vec<&Image> = pairs.iter().map(|p| &p.1).collect();
    let ir = Image::batch_tensor::<f32>(&irs)?;
    let vi = Image::batch_tensor::<f32>(&vis)?;
    let (n, _, h, w) = ir.dims4()?;
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * n * plane);
    for i in 0..n {
        data.extend_from_slice(&ir.data()[i * plane..(i + 1) * plane]);
        data.extend_from_slice(&vi.data()[i * plane..(i + 1) * plane]);
    }
    Ok((Tensor::new(&[n, 2, h, w], data)?, ir, vi))
}

/// Trains a copy of `init`; the input parameters are left untouched.
pub fn train_loop(
    net: &Network<f32>,
    init: &ModelParams<f32>,
    data: &[ImagePair],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    net.check_params(init)?;
    let patches = data
        .iter()
        .map(|p| {
            Ok((
                resize_bilinear(&p.ir, cfg.patch, cfg.patch)?,
                resize_bilinear(&p.vi, cfg.patch, cfg.patch)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let total = cfg.total_steps(data.len());
    let mut params = init.clone();
    let mut state = TrainState::new(&params);
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let order = epoch_order(cfg.seed, epoch, patches.len());
        for chunk in order.chunks(cfg.batch) {
            if step >= total {
                break;
            }
            let batch: Vec<&(Image, Image)> = chunk.iter().map(|&i| &patches[i]).collect();
            let (input, ir, vi) = batch_input(&batch)?;
            let lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)?;

            let mut g = Graph::new();
            let x = g.constant(input);
            let out = net.forward(&mut g, &params, &x, NormMode::Train)?;
            let vi = g.constant(vi);
            let ir = g.constant(ir);
            let terms = total_loss(&mut g, &out.fused, &vi, &ir, &cfg.weights)?;
            g.backward(&terms.total)?;

            params.zero_grads();
            g.accumulate_into(&mut params)?;
            state.adam_step(&mut params, lr)?;
            if let Some(bn) = &out.bn_update {
                params.set_bn_state(bn);
            }
            trace.push(StepRecord {
                step,
                epoch,
                lr,
                loss: terms.report(),
            });
            step += 1;
        }
        epoch += 1;
    }
    params.zero_grads();
    Ok(TrainOutcome { params, trace })
}

pub const TRACE_HEADER: &str = "step,epoch,lr,pixel,texture,ssim,total";

/// One row per step; floats use the shortest exact representation so equal
/// traces produce equal files.
pub fn write_trace<W: Write>(trace: &[StepRecord], mut out: W) -> Result<()> {
    writeln!(out, "{TRACE_HEADER}")?;
    for r in trace {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{:e}",
            r.step, r.epoch, r.lr, r.loss.pixel, r.loss.texture, r.loss.ssim, r.loss.total
        )?;
    }
    Ok(())
}
