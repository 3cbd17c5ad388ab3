use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamSet, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Steps retried, in order, for a coordinate whose error at `step` is
    /// not below `tolerance`. The best agreement is kept. A kink (ReLU, max)
    /// within one step of the probe point or rounding noise on a tiny
    /// gradient spoils a single step; a wrong derivative disagrees at all
    /// of them.
    pub fallback_steps: Vec<f64>,
    pub tolerance: f64,
    /// Coordinates checked per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fallback_steps: vec![1e-4, 1e-6, 1e-3],
            tolerance: 1e-5,
            samples_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step that produced `numeric`.
    pub step: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error < tolerance)
    }
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences `(f(p+h) - f(p-h)) / 2h` on a seeded sample of coordinates of
/// every tensor in `params` that requires a gradient.
///
/// `f` must bind its inputs through [`Graph::param`] so gradients can be
/// looked up by name.
pub fn finite_diff_check<P, F>(f: F, params: &P, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    P: ParamSet<f64> + Clone,
    F: Fn(&mut Graph<f64>, &P) -> Result<Var<f64>>,
{
    let mut graph = Graph::new();
    let loss = f(&mut graph, params)?;
    graph.backward(&loss)?;

    let mut targets: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, t| {
        if t.requires_grad() {
            targets.push((name.to_string(), t.numel()));
        }
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();

    for (name, len) in targets {
        let analytic = graph
            .grad_by_name(&name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; len]);
        let indices: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, opts.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = TensorCheck {
            name: name.clone(),
            checked: indices.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            step: opts.step,
        };
        for &i in &indices {
            let original = read(&probe, &name, i);
            let mut best = (f64::INFINITY, f64::NAN, opts.step);
            for &h in std::iter::once(&opts.step).chain(&opts.fallback_steps) {
                write(&mut probe, &name, i, original + h);
                let plus = evaluate(&f, &probe)?;
                write(&mut probe, &name, i, original - h);
                let minus = evaluate(&f, &probe)?;
                write(&mut probe, &name, i, original);
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(analytic[i], numeric);
                let err = if err.is_finite() { err } else { f64::INFINITY };
                if err < best.0 || best.1.is_nan() {
                    best = (err, numeric, h);
                }
                if best.0 < opts.tolerance {
                    break;
                }
            }
            let (err, numeric, h) = best;
            if err > check.max_rel_error || i == indices[0] {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
                check.step = h;
            }
        }
        report.tensors.push(check);
    }
    Ok(report)
}

fn evaluate<P, F>(f: &F, params: &P) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &P) -> Result<Var<f64>>,
{
    let mut g = Graph::inference();
    Ok(f(&mut g, params)?.value().item())
}

fn read<P: ParamSet<f64>>(params: &P, name: &str, i: usize) -> f64 {
    let mut v = 0.0;
    params.visit(&mut |n, t: &Tensor<f64>| {
        if n == name {
            v = t.data()[i];
        }
    });
    v
}

fn write<P: ParamSet<f64>>(params: &mut P, name: &str, i: usize, value: f64) {
    params.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[i] = value;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::NamedTensors;

    #[test]
    fn quadratic_at_three() {
        let params = NamedTensors(vec![(
            "p".to_string(),
            Tensor::full(&[1], 3.0).with_requires_grad(true),
        )]);
        let report = finite_diff_check(
            |g, p: &NamedTensors<f64>| {
                let x = g.param("p", p.get("p").unwrap());
                let sq = g.mul(&x, &x)?;
                Ok(g.sum(&sq))
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        let t = &report.tensors[0];
        assert_eq!(t.checked, 1);
        assert!((t.analytic - 6.0).abs() < 1e-12);
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Treating x as a constant in one factor halves the analytic gradient.
        let params = NamedTensors(vec![(
            "p".to_string(),
            Tensor::full(&[1], 3.0).with_requires_grad(true),
        )]);
        let report = finite_diff_check(
            |g, p: &NamedTensors<f64>| {
                let x = g.param("p", p.get("p").unwrap());
                let c = g.constant(x.to_tensor());
                let sq = g.mul(&x, &c)?;
                Ok(g.sum(&sq))
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() > 0.4);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
