//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub h: f64,
    /// Tensors with more coordinates than this are checked on a random
    /// subsample.
    pub full_limit: usize,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            h: 1e-5,
            full_limit: 10_000,
            subsample: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradSample {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub samples: Vec<GradSample>,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
}

impl GradReport {
    pub fn max_abs_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

impl ParamReport {
    fn push(&mut self, s: GradSample) {
        self.max_abs_error = self.max_abs_error.max((s.analytic - s.numeric).abs());
        self.max_rel_error = self.max_rel_error.max(rel_error(s.analytic, s.numeric));
        self.samples.push(s);
    }
}

fn indices(n: usize, opts: &CheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= opts.full_limit {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, opts.subsample.min(n)).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares a known gradient of `f` at `x` with central differences.
pub fn check_function<F>(mut f: F, x: &[f64], analytic: &[f64], opts: &CheckOptions) -> Result<GradReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradient values for {} parameters", analytic.len(), x.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = ParamReport::default();
    let mut probe = x.to_vec();
    for i in indices(x.len(), opts, &mut rng) {
        probe[i] = x[i] + opts.h;
        let fp = f(&probe);
        probe[i] = x[i] - opts.h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("f at probe of coordinate {i}")));
        }
        report.push(GradSample {
            index: i,
            analytic: analytic[i],
            numeric: (fp - fm) / (2.0 * opts.h),
        });
    }
    Ok(GradReport {
        params: vec![report],
    })
}

/// Checks the graph gradient of a scalar function of several parameter
/// tensors. `build` adds the computation to a fresh graph given the
/// parameter leaves and returns the scalar output.
pub fn grad_check<F>(build: F, params: &[Tensor], opts: &CheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe: Vec<Tensor> = params.to_vec();
    let mut report = GradReport::default();
    for (k, p) in params.iter().enumerate() {
        let mut pr = ParamReport::default();
        for i in indices(p.len(), opts, &mut rng) {
            let x = p.data()[i];
            probe[k].data_mut()[i] = x + opts.h;
            let fp = eval(&probe)?;
            probe[k].data_mut()[i] = x - opts.h;
            let fm = eval(&probe)?;
            probe[k].data_mut()[i] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "f at probe of parameter {k} coordinate {i}"
                )));
            }
            pr.push(GradSample {
                index: i,
                analytic: analytic[k][i],
                numeric: (fp - fm) / (2.0 * opts.h),
            });
        }
        report.params.push(pr);
    }
    Ok(report)
}
