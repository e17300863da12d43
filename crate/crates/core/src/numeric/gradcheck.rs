//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Difference formula used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error O(h^2).
    ThreePoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, truncation error O(h^4).
    FivePoint,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub stencil: Stencil,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 2e-4,
            stencil: Stencil::ThreePoint,
            coords_per_param: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose difference stencil straddles a relu/hinge kink.
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares autodiff gradients of `f` against central differences on a
/// seeded subset of coordinates.
///
/// `f` receives a fresh graph and one leaf per entry of `params`, and must
/// return a scalar node. It has to be deterministic.
pub fn grad_check<F>(f: F, params: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::Precondition(format!(
            "grad_check eps {} outside [1e-6, 1e-3]",
            cfg.eps
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.kink_signature().to_vec()))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = f(&mut g, &vars)?;
    let base_sig = g.kink_signature().to_vec();
    let mut grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads
            .take(vars[pi])
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        let n = p.len();
        let coords: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for c in coords {
            let orig = p.data()[c];
            let steps: &[f64] = match cfg.stencil {
                Stencil::ThreePoint => &[1.0, -1.0],
                Stencil::FivePoint => &[2.0, 1.0, -1.0, -2.0],
            };
            let mut vals = [0.0; 4];
            let mut kinked = false;
            for (k, &step) in steps.iter().enumerate() {
                work[pi].data_mut()[c] = orig + step * cfg.eps;
                let (v, sig) = eval(&work)?;
                kinked |= sig != base_sig;
                vals[k] = v;
            }
            work[pi].data_mut()[c] = orig;
            if kinked {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = match cfg.stencil {
                Stencil::ThreePoint => (vals[0] - vals[1]) / (2.0 * cfg.eps),
                Stencil::FivePoint => {
                    (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * cfg.eps)
                }
            };
            let err = relative_error(analytic.data()[c], numeric);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}
