//! End-to-end fusion network: concatenated IR/VI input, shallow
//! convolutional features, a stack of FSAT blocks and a 1x1 reconstruction
//! head squashed into `[0, 1]`.

mod model_file;
mod params;
mod structure;
pub mod verify;

use std::sync::Arc;

pub use model_file::{read_model, write_model, FORMAT_VERSION, MAGIC};
pub use params::{BlockParams, ModelParams, ShallowParams};
pub use structure::{
    BlockContext, BlockStructure, BlockVars, Components, Full, NoFsam, NoItm, Reverse,
    StructureRegistry,
};

use crate::error::{Error, Result};
use crate::fsam::GroupSpec;
use crate::image::Image;
use crate::tensor::{BatchNormState, Graph, NormMode, PadMode, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Stacked input planes; always 2 (IR, VI).
    pub in_channels: usize,
    pub n_fsat: usize,
    /// Attention window edge `M`.
    pub window: usize,
    /// Frequency groups in the channel attention.
    pub groups: usize,
    /// Registered block structure name.
    pub structure: String,
    /// Per-token layer norm before attention and MLP.
    pub pre_norm: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            in_channels: 2,
            n_fsat: 2,
            window: 8,
            groups: 16,
            structure: "full".to_string(),
            pre_norm: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels != 2 {
            return fail(format!(
                "input channels must be 2, got {}",
                self.in_channels
            ));
        }
        if self.channels == 0 {
            return fail("feature width must be positive".into());
        }
        if self.n_fsat == 0 {
            return fail("need at least one FSAT block".into());
        }
        if self.window == 0 {
            return fail("window size must be >= 1".into());
        }
        if self.groups == 0 || !self.channels.is_multiple_of(self.groups) {
            return fail(format!(
                "{} frequency groups do not divide {} channels",
                self.groups, self.channels
            ));
        }
        Ok(())
    }
}

/// Shallow-stage parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct ShallowVars<T> {
    pub conv1_w: Var<T>,
    pub conv1_b: Var<T>,
    pub conv2_w: Var<T>,
    pub conv2_b: Var<T>,
    pub bn_gamma: Var<T>,
    pub bn_beta: Var<T>,
}

pub struct ForwardOutput<T> {
    /// `N x 1 x H x W` in `[0, 1]`.
    pub fused: Var<T>,
    /// Updated batch-norm running statistics (train mode only).
    pub bn_update: Option<BatchNormState<T>>,
}

/// Stacks IR (channel 0) and VI (channel 1) into `1 x 2 x H x W`.
pub fn concat_inputs<T: Real>(ir: &Image, vi: &Image) -> Result<Tensor<T>> {
    ir.require_same_dims(vi)?;
    let (a, b) = (ir.to_tensor::<T>()?, vi.to_tensor::<T>()?);
    let (w, h) = ir.dims();
    let mut data = a.into_data();
    data.extend(b.into_data());
    Tensor::new(&[1, 2, h, w], data)
}

/// `relu(BN(conv2(relu(conv1(x)))))`, both convolutions 3x3 with zero padding.
pub fn shallow_extract<T: Real>(
    g: &mut Graph<T>,
    x: &Var<T>,
    p: &ShallowVars<T>,
    running: &BatchNormState<T>,
    mode: NormMode,
) -> Result<(Var<T>, Option<BatchNormState<T>>)> {
    let c1 = g.conv2d(x, &p.conv1_w, Some(&p.conv1_b), PadMode::Zero)?;
    let a1 = g.relu(&c1);
    let c2 = g.conv2d(&a1, &p.conv2_w, Some(&p.conv2_b), PadMode::Zero)?;
    let (bn, update) = g.batchnorm2d(&c2, &p.bn_gamma, &p.bn_beta, running, mode)?;
    Ok((g.relu(&bn), update))
}

/// `(tanh(conv1x1(x)) + 1) / 2`.
pub fn reconstruct<T: Real>(
    g: &mut Graph<T>,
    x: &Var<T>,
    w: &Var<T>,
    b: &Var<T>,
) -> Result<Var<T>> {
    let c = g.conv2d(x, w, Some(b), PadMode::Zero)?;
    let t = g.tanh(&c);
    let shifted = g.add_scalar(&t, T::one());
    Ok(g.scale(&shifted, T::lit(0.5)))
}

/// A configured network: the block structure is resolved once, parameters
/// are passed per call so one network can drive many parameter sets.
#[derive(Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    structure: Arc<dyn BlockStructure<T>>,
    context: BlockContext,
}

impl<T: Real> std::fmt::Debug for Network<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .finish()
    }
}

impl<T: Real> Network<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        Self::with_registry(config, &StructureRegistry::with_defaults())
    }

    pub fn with_registry(config: NetworkConfig, registry: &StructureRegistry<T>) -> Result<Self> {
        config.validate()?;
        let structure = registry.get(&config.structure)?;
        let context = BlockContext {
            window: config.window,
            groups: GroupSpec::zigzag(config.groups),
        };
        Ok(Self {
            config,
            structure,
            context,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn structure(&self) -> &dyn BlockStructure<T> {
        self.structure.as_ref()
    }

    pub fn components(&self) -> Components {
        self.structure.components()
    }

    pub fn init_params(&self, seed: u64) -> ModelParams<T> {
        ModelParams::init(&self.config, self.components(), seed)
    }

    pub fn zero_params(&self) -> ModelParams<T> {
        ModelParams::zeros(&self.config, self.components())
    }

    /// Checks that `params` has exactly the tensors this network expects.
    pub fn check_params(&self, params: &ModelParams<T>) -> Result<()> {
        let expected = self.zero_params();
        let want = expected.named();
        let have = params.named();
        for (name, t) in &want {
            match have.iter().find(|(n, _)| n == name) {
                Some((_, found)) if found.shape() == t.shape() => {}
                Some((_, found)) => {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        found: format!("{:?}", found.shape()),
                        expected: format!("{:?}", t.shape()),
                    })
                }
                None => {
                    return Err(Error::ParamShape {
                        name: name.clone(),
                        found: "no such tensor".into(),
                        expected: format!("{:?}", t.shape()),
                    })
                }
            }
        }
        if let Some((name, t)) = have.iter().find(|(n, _)| !want.iter().any(|(w, _)| w == n)) {
            return Err(Error::ParamShape {
                name: name.clone(),
                found: format!("{:?}", t.shape()),
                expected: "no such tensor".into(),
            });
        }
        Ok(())
    }

    pub fn bind_shallow(&self, g: &mut Graph<T>, p: &ModelParams<T>) -> ShallowVars<T> {
        let s = &p.shallow;
        ShallowVars {
            conv1_w: g.param("shallow.conv1.weight", &s.conv1_w),
            conv1_b: g.param("shallow.conv1.bias", &s.conv1_b),
            conv2_w: g.param("shallow.conv2.weight", &s.conv2_w),
            conv2_b: g.param("shallow.conv2.bias", &s.conv2_b),
            bn_gamma: g.param("shallow.bn.gamma", &s.bn_gamma),
            bn_beta: g.param("shallow.bn.beta", &s.bn_beta),
        }
    }

    pub fn bind_block(
        &self,
        g: &mut Graph<T>,
        p: &ModelParams<T>,
        index: usize,
    ) -> Result<BlockVars<T>> {
        let b = p
            .blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("no parameters for FSAT block {index}")))?;
        Ok(BlockVars {
            itm: b
                .itm
                .as_ref()
                .map(|q| q.bind(g, &params::itm_prefix(index))),
            fsam: b
                .fsam
                .as_ref()
                .map(|q| q.bind(g, &params::fsam_prefix(index))),
        })
    }

    /// One FSAT block on `x` (the residual is part of the structure).
    pub fn fsat_forward(
        &self,
        g: &mut Graph<T>,
        x: &Var<T>,
        block: &BlockVars<T>,
    ) -> Result<Var<T>> {
        self.structure.forward(g, x, block, &self.context)
    }

    /// Full pass on an `N x 2 x H x W` input.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        params: &ModelParams<T>,
        input: &Var<T>,
        mode: NormMode,
    ) -> Result<ForwardOutput<T>> {
        let (_, cin, _, _) = input.value().dims4()?;
        if cin != self.config.in_channels {
            return Err(Error::shape(
                "network input",
                input.shape(),
                &[0, self.config.in_channels, 0, 0],
            ));
        }
        if params.blocks.len() != self.config.n_fsat {
            return Err(Error::Config(format!(
                "parameters hold {} FSAT blocks, config wants {}",
                params.blocks.len(),
                self.config.n_fsat
            )));
        }
        let shallow = self.bind_shallow(g, params);
        let (mut feat, bn_update) = shallow_extract(g, input, &shallow, &params.bn_state(), mode)?;
        for i in 0..self.config.n_fsat {
            let block = self.bind_block(g, params, i)?;
            feat = self.fsat_forward(g, &feat, &block)?;
        }
        let w = g.param("recon.weight", &params.recon_w);
        let b = g.param("recon.bias", &params.recon_b);
        let fused = reconstruct(g, &feat, &w, &b)?;
        Ok(ForwardOutput { fused, bn_update })
    }

    /// Inference on a single registered gray pair.
    pub fn fuse(&self, params: &ModelParams<T>, ir: &Image, vi: &Image) -> Result<Image> {
        let input = concat_inputs::<T>(ir, vi)?;
        let mut g = Graph::inference();
        let x = g.constant(input);
        let out = self.forward(&mut g, params, &x, NormMode::Infer)?;
        Image::from_tensor_plane(out.fused.value(), 0)
    }
}
