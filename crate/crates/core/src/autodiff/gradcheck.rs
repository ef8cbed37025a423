//! Central-difference verification of analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Tape, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum acceptable relative error.
    pub tolerance: f64,
    /// Absolute-agreement escape: a coordinate also passes when
    /// `|analytic - numeric| <= absolute_tolerance`. Zero keeps the strict
    /// relative criterion. Deep graphs need a small positive value here:
    /// where the true gradient is near zero, the central difference cannot
    /// beat the `|loss| * eps / (2h)` rounding floor of f64 no matter how
    /// correct the analytic gradient is.
    pub absolute_tolerance: f64,
    /// Cap on coordinates probed per tensor; `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    /// Retries at a randomly offset point, to step off ReLU/maxpool kinks.
    pub retries: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            absolute_tolerance: 0.0,
            max_coords_per_tensor: None,
            retries: 2,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
    pub pass: bool,
    pub step: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    libm::fabs(a - n) / libm::fabs(a).max(libm::fabs(n)).max(1e-8)
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences, coordinate by coordinate.
///
/// `build` receives a fresh tape plus one leaf per entry of `params` (same
/// order) and must return the scalar loss. It is called many times and must
/// be a pure function of the leaf values.
pub fn gradcheck<F>(mut build: F, params: &[(String, Tensor)], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, analytic) = eval_with_grads(&mut build, &values)?;

    let mut pick = rng::rng_for(cfg.seed, 0x6e0c);
    let mut reports = Vec::with_capacity(params.len());
    let mut pass = true;

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(cap) if tensor.numel() > cap => {
                (0..cap).map(|_| pick.gen_range(0..tensor.numel())).collect()
            }
            _ => (0..tensor.numel()).collect(),
        };
        let coord_ok = |a: f64, n: f64| rel_err(a, n) <= cfg.tolerance || libm::fabs(a - n) <= cfg.absolute_tolerance;
        let mut worst = 0.0f64;
        for &ci in &coords {
            let numeric = central_diff(&mut build, &values, pi, ci, cfg.step)?;
            let mut a = analytic[pi].data()[ci];
            let mut n = numeric;
            if !coord_ok(a, n) {
                // possibly a kink: retry at a nearby random offset
                for _ in 0..cfg.retries {
                    let mut shifted = values.clone();
                    let delta = (pick.gen::<f64>() - 0.5) * 6.0 * cfg.step
                        + if pick.gen::<bool>() { 3.0 * cfg.step } else { -3.0 * cfg.step };
                    shifted[pi].data_mut()[ci] += delta;
                    let (_, re_analytic) = eval_with_grads(&mut build, &shifted)?;
                    let re_numeric = central_diff(&mut build, &shifted, pi, ci, cfg.step)?;
                    let (ra, rn) = (re_analytic[pi].data()[ci], re_numeric);
                    if coord_ok(ra, rn) || rel_err(ra, rn) < rel_err(a, n) {
                        a = ra;
                        n = rn;
                    }
                    if coord_ok(a, n) {
                        break;
                    }
                }
            }
            if !coord_ok(a, n) {
                pass = false;
            }
            worst = worst.max(rel_err(a, n));
        }
        reports.push(ParamReport { name: name.clone(), max_rel_err: worst, coords_checked: coords.len() });
    }

    Ok(GradCheckReport { params: reports, pass, step: cfg.step, tolerance: cfg.tolerance })
}

fn eval_with_grads<F>(build: &mut F, values: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let loss_value = tape.value(loss).scalar_value()?;
    let grads = tape.backward(loss)?;
    let per_param = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    Ok((loss_value, per_param))
}

fn eval_loss<F>(build: &mut F, values: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.value(loss).scalar_value()
}

/// Fourth-order central difference: the five-point stencil keeps the
/// truncation error at `O(h^4 f''''')`, so the comparison is limited only
/// by the `|f| * eps / h` rounding floor.
fn central_diff<F>(build: &mut F, values: &[Tensor], pi: usize, ci: usize, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut at = |delta: f64| -> Result<f64> {
        let mut shifted = values.to_vec();
        shifted[pi].data_mut()[ci] += delta;
        eval_loss(build, &shifted)
    };
    let fp1 = at(h)?;
    let fm1 = at(-h)?;
    let fp2 = at(2.0 * h)?;
    let fm2 = at(-2.0 * h)?;
    Ok((8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * h))
}
