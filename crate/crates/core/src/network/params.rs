use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::structure::Components;
use super::NetworkConfig;
use crate::fsam::FsamParams;
use crate::itm::{uniform, ItmParams};
use crate::tensor::{BatchNormState, ParamSet, Real, Tensor};

/// Two 3x3 convolutions with a batch norm between them.
#[derive(Debug, Clone, PartialEq)]
pub struct ShallowParams<T> {
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    /// Running statistics; never trained by gradient.
    pub bn_running_mean: Tensor<T>,
    pub bn_running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub itm: Option<ItmParams<T>>,
    pub fsam: Option<FsamParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub shallow: ShallowParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub recon_w: Tensor<T>,
    pub recon_b: Tensor<T>,
}

fn trainable<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).with_requires_grad(true)
}

impl<T: Real> ModelParams<T> {
    /// Every weight and bias zero, batch-norm and layer-norm at identity.
    pub fn zeros(config: &NetworkConfig, parts: Components) -> Self {
        let (c, cin) = (config.channels, config.in_channels);
        let shallow = ShallowParams {
            conv1_w: trainable(&[c, cin, 3, 3]),
            conv1_b: trainable(&[c]),
            conv2_w: trainable(&[c, c, 3, 3]),
            conv2_b: trainable(&[c]),
            bn_gamma: Tensor::full(&[c], T::one()).with_requires_grad(true),
            bn_beta: trainable(&[c]),
            bn_running_mean: Tensor::zeros(&[c]),
            bn_running_var: Tensor::full(&[c], T::one()),
        };
        let blocks = (0..config.n_fsat)
            .map(|_| BlockParams {
                itm: parts.itm.then(|| ItmParams::zeros(c, config.pre_norm)),
                fsam: parts.fsam.then(|| FsamParams::zeros(c)),
            })
            .collect();
        Self {
            shallow,
            blocks,
            recon_w: trainable(&[1, c, 1, 1]),
            recon_b: trainable(&[1]),
        }
    }

    /// Fan-in scaled uniform weights in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`,
    /// zero biases, identity norms. Reproducible per seed.
    pub fn init(config: &NetworkConfig, parts: Components, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, cin) = (config.channels, config.in_channels);
        let mut p = Self::zeros(config, parts);
        p.shallow.conv1_w = uniform(&[c, cin, 3, 3], cin * 9, &mut rng);
        p.shallow.conv2_w = uniform(&[c, c, 3, 3], c * 9, &mut rng);
        for block in &mut p.blocks {
            if block.itm.is_some() {
                block.itm = Some(ItmParams::init(c, config.pre_norm, &mut rng));
            }
            if block.fsam.is_some() {
                block.fsam = Some(FsamParams::init(c, &mut rng));
            }
        }
        p.recon_w = uniform(&[1, c, 1, 1], c, &mut rng);
        p
    }

    pub fn bn_state(&self) -> BatchNormState<T> {
        BatchNormState {
            mean: self.shallow.bn_running_mean.data().to_vec(),
            var: self.shallow.bn_running_var.data().to_vec(),
        }
    }

    pub fn set_bn_state(&mut self, state: &BatchNormState<T>) {
        self.shallow
            .bn_running_mean
            .data_mut()
            .copy_from_slice(&state.mean);
        self.shallow
            .bn_running_var
            .data_mut()
            .copy_from_slice(&state.var);
    }

    /// Every tensor with its stable name, in file order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let s = &self.shallow;
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("shallow.conv1.weight".into(), &s.conv1_w),
            ("shallow.conv1.bias".into(), &s.conv1_b),
            ("shallow.conv2.weight".into(), &s.conv2_w),
            ("shallow.conv2.bias".into(), &s.conv2_b),
            ("shallow.bn.gamma".into(), &s.bn_gamma),
            ("shallow.bn.beta".into(), &s.bn_beta),
            ("shallow.bn.running_mean".into(), &s.bn_running_mean),
            ("shallow.bn.running_var".into(), &s.bn_running_var),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(itm) = &b.itm {
                out.extend(
                    itm.fields()
                        .into_iter()
                        .map(|(n, t)| (format!("{}.{n}", itm_prefix(i)), t)),
                );
            }
            if let Some(fsam) = &b.fsam {
                out.extend(
                    fsam.fields()
                        .into_iter()
                        .map(|(n, t)| (format!("{}.{n}", fsam_prefix(i)), t)),
                );
            }
        }
        out.push(("recon.weight".into(), &self.recon_w));
        out.push(("recon.bias".into(), &self.recon_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let s = &mut self.shallow;
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![
            ("shallow.conv1.weight".into(), &mut s.conv1_w),
            ("shallow.conv1.bias".into(), &mut s.conv1_b),
            ("shallow.conv2.weight".into(), &mut s.conv2_w),
            ("shallow.conv2.bias".into(), &mut s.conv2_b),
            ("shallow.bn.gamma".into(), &mut s.bn_gamma),
            ("shallow.bn.beta".into(), &mut s.bn_beta),
            ("shallow.bn.running_mean".into(), &mut s.bn_running_mean),
            ("shallow.bn.running_var".into(), &mut s.bn_running_var),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(itm) = &mut b.itm {
                out.extend(
                    itm.fields_mut()
                        .into_iter()
                        .map(|(n, t)| (format!("{}.{n}", itm_prefix(i)), t)),
                );
            }
            if let Some(fsam) = &mut b.fsam {
                out.extend(
                    fsam.fields_mut()
                        .into_iter()
                        .map(|(n, t)| (format!("{}.{n}", fsam_prefix(i)), t)),
                );
            }
        }
        out.push(("recon.weight".into(), &mut self.recon_w));
        out.push(("recon.bias".into(), &mut self.recon_b));
        out
    }

    /// Number of gradient-trained scalars.
    pub fn num_trainable(&self) -> usize {
        self.named()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            shallow: ShallowParams {
                conv1_w: self.shallow.conv1_w.cast(),
                conv1_b: self.shallow.conv1_b.cast(),
                conv2_w: self.shallow.conv2_w.cast(),
                conv2_b: self.shallow.conv2_b.cast(),
                bn_gamma: self.shallow.bn_gamma.cast(),
                bn_beta: self.shallow.bn_beta.cast(),
                bn_running_mean: self.shallow.bn_running_mean.cast(),
                bn_running_var: self.shallow.bn_running_var.cast(),
            },
            blocks: Vec::with_capacity(self.blocks.len()),
            recon_w: self.recon_w.cast(),
            recon_b: self.recon_b.cast(),
        };
        for b in &self.blocks {
            out.blocks.push(BlockParams {
                itm: b.itm.as_ref().map(|p| {
                    let mut q = ItmParams::<U>::zeros(p.wq.shape()[0], p.norm1.is_some());
                    for ((_, dst), (_, src)) in q.fields_mut().into_iter().zip(p.fields()) {
                        *dst = src.cast();
                    }
                    q
                }),
                fsam: b.fsam.as_ref().map(|p| FsamParams {
                    fc_w: p.fc_w.cast(),
                    fc_b: p.fc_b.cast(),
                    sconv_w: p.sconv_w.cast(),
                    sconv_b: p.sconv_b.cast(),
                }),
            });
        }
        out
    }
}

pub(crate) fn itm_prefix(block: usize) -> String {
    format!("fsat.{block}.itm")
}

pub(crate) fn fsam_prefix(block: usize) -> String {
    format!("fsat.{block}.fsam")
}

impl<T: Real> ParamSet<T> for ModelParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, t) in self.named() {
            f(&name, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.named_mut() {
            f(&name, t);
        }
    }
}
