//! Frequency-spatial attention: DCT-weighted channel gating followed by a
//! max/std pooled spatial gate.

use std::rc::Rc;

use rand::Rng;

use crate::dct::{frequency_index_set, DctBasisCache, FrequencyIndex};
use crate::error::{Error, Result};
use crate::itm::{qualified, uniform};
use crate::tensor::{ChannelReduce, Graph, PadMode, ParamSet, Real, Tensor, Var};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct FsamParams<T> {
    /// `C x C`, applied as `descriptor * fc_w + fc_b`.
    pub fc_w: Tensor<T>,
    pub fc_b: Tensor<T>,
    /// `1 x 2 x 7 x 7` over the stacked (max, std) channel pools.
    pub sconv_w: Tensor<T>,
    pub sconv_b: Tensor<T>,
}

impl<T: Real> FsamParams<T> {
    pub fn zeros(channels: usize) -> Self {
        let z = |shape: &[usize]| Tensor::zeros(shape).with_requires_grad(true);
        Self {
            fc_w: z(&[channels, channels]),
            fc_b: z(&[channels]),
            sconv_w: z(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
            sconv_b: z(&[1]),
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let k = SPATIAL_KERNEL;
        Self {
            fc_w: uniform(&[channels, channels], channels, rng),
            sconv_w: uniform(&[1, 2, k, k], 2 * k * k, rng),
            ..Self::zeros(channels)
        }
    }

    pub fn fields(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("fc_w", &self.fc_w),
            ("fc_b", &self.fc_b),
            ("sconv_w", &self.sconv_w),
            ("sconv_b", &self.sconv_b),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        vec![
            ("fc_w", &mut self.fc_w),
            ("fc_b", &mut self.fc_b),
            ("sconv_w", &mut self.sconv_w),
            ("sconv_b", &mut self.sconv_b),
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> FsamVars<T> {
        let mut p = |name: &str, t: &Tensor<T>| g.param(&qualified(prefix, name), t);
        FsamVars {
            fc_w: p("fc_w", &self.fc_w),
            fc_b: p("fc_b", &self.fc_b),
            sconv_w: p("sconv_w", &self.sconv_w),
            sconv_b: p("sconv_b", &self.sconv_b),
        }
    }
}

impl<T: Real> ParamSet<T> for FsamParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, t) in self.fields() {
            f(name, t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, t) in self.fields_mut() {
            f(name, t);
        }
    }
}

#[derive(Debug, Clone)]
pub struct FsamVars<T> {
    pub fc_w: Var<T>,
    pub fc_b: Var<T>,
    pub sconv_w: Var<T>,
    pub sconv_b: Var<T>,
}

/// Splits `C` channels into `groups` contiguous blocks, each projected onto
/// its own DCT frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub groups: usize,
    /// Explicit per-group frequencies. `None` selects the first `groups`
    /// frequencies in zigzag order for whatever map size is seen.
    pub frequencies: Option<Vec<FrequencyIndex>>,
}

impl GroupSpec {
    pub fn zigzag(groups: usize) -> Self {
        Self {
            groups,
            frequencies: None,
        }
    }

    pub fn with_frequencies(frequencies: Vec<FrequencyIndex>) -> Self {
        Self {
            groups: frequencies.len(),
            frequencies: Some(frequencies),
        }
    }

    pub fn channel_width(&self, channels: usize) -> Result<usize> {
        if self.groups == 0 || !channels.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "{} frequency groups do not divide {channels} channels",
                self.groups
            )));
        }
        Ok(channels / self.groups)
    }

    pub fn frequencies_for(&self, h: usize, w: usize) -> Result<Vec<FrequencyIndex>> {
        match &self.frequencies {
            Some(list) => {
                for f in list {
                    f.validate(h, w)?;
                }
                Ok(list.clone())
            }
            None => frequency_index_set(self.groups, h, w),
        }
    }

    /// `C x H x W` projection weights: channel `c` carries the normalized
    /// basis grid of its group's frequency.
    pub fn projection_weights<T: Real>(
        &self,
        channels: usize,
        h: usize,
        w: usize,
    ) -> Result<Tensor<T>> {
        let width = self.channel_width(channels)?;
        let freqs = self.frequencies_for(h, w)?;
        let cache = DctBasisCache::global();
        let mut data = Vec::with_capacity(channels * h * w);
        for c in 0..channels {
            let grid = cache.weights(h, w, freqs[c / width])?;
            data.extend(grid.iter().map(|&v| T::lit(v)));
        }
        Tensor::new(&[channels, h, w], data)
    }
}

/// Per-channel DCT coefficient of the channel's group frequency: `[N, C]`.
pub fn frequency_descriptor<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    spec: &GroupSpec,
) -> Result<Var<T>> {
    let (_, c, h, w) = f.value().dims4()?;
    let weights = spec.projection_weights(c, h, w)?;
    g.channel_project(f, Rc::new(weights))
}

/// Returns `(att[N,C], F * att)` with `att = sigmoid(fc(descriptor))`.
pub fn frequency_attention<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    p: &FsamVars<T>,
    spec: &GroupSpec,
) -> Result<(Var<T>, Var<T>)> {
    let desc = frequency_descriptor(g, f, spec)?;
    let logits = g.linear(&desc, &p.fc_w, Some(&p.fc_b))?;
    let att = g.sigmoid(&logits);
    let out = g.scale_channels(f, &att)?;
    Ok((att, out))
}

/// Returns `(att[N,1,H,W], F * att)` with
/// `att = sigmoid(conv7x7(concat(max_c F, std_c F)))`.
pub fn spatial_attention<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    p: &FsamVars<T>,
) -> Result<(Var<T>, Var<T>)> {
    let pooled = spatial_pool(g, f)?;
    let logits = g.conv2d(&pooled, &p.sconv_w, Some(&p.sconv_b), PadMode::Zero)?;
    let att = g.sigmoid(&logits);
    let out = g.scale_pixels(f, &att)?;
    Ok((att, out))
}

/// `[N,2,H,W]` stack of channel max and channel standard deviation.
pub fn spatial_pool<T: Real>(g: &mut Graph<T>, f: &Var<T>) -> Result<Var<T>> {
    let mx = g.channel_reduce(f, ChannelReduce::Max)?;
    let sd = g.channel_reduce(f, ChannelReduce::Std)?;
    g.concat_channels(&[&mx, &sd])
}

/// Frequency gate first, then spatial gate.
pub fn fsam_forward<T: Real>(
    g: &mut Graph<T>,
    f: &Var<T>,
    p: &FsamVars<T>,
    spec: &GroupSpec,
) -> Result<Var<T>> {
    let (_, ff) = frequency_attention(g, f, p, spec)?;
    let (_, fs) = spatial_attention(g, &ff, p)?;
    Ok(fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_spec_validation() {
        assert_eq!(GroupSpec::zigzag(4).channel_width(16).unwrap(), 4);
        assert!(GroupSpec::zigzag(3).channel_width(16).is_err());
        assert!(GroupSpec::zigzag(0).channel_width(16).is_err());
        let spec = GroupSpec::with_frequencies(vec![FrequencyIndex::new(5, 0)]);
        assert!(spec.frequencies_for(4, 4).is_err());
    }

    #[test]
    fn degenerate_one_pixel_descriptor_returns_values() {
        let mut g = Graph::<f64>::inference();
        let f = g.constant(Tensor::new(&[1, 2, 1, 1], vec![0.3, -0.7]).unwrap());
        let d = frequency_descriptor(&mut g, &f, &GroupSpec::zigzag(1)).unwrap();
        assert!((d.data()[0] - 0.3).abs() < 1e-15);
        assert!((d.data()[1] + 0.7).abs() < 1e-15);
        // two groups need two distinct frequencies, a 1x1 map has one
        assert!(frequency_descriptor(&mut g, &f, &GroupSpec::zigzag(2)).is_err());
    }
}
