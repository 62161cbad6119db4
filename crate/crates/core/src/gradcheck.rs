//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tol: f64,
    /// Check at most this many coordinates of each input (sampled by `seed`).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tol: 1e-4,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

/// Coordinate `index` of input `input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coord>,
    pub checked: usize,
    /// Coordinates sitting on a nondifferentiable point (ReLU kink, pooling tie).
    pub excluded: Vec<Coord>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteValue(what.to_string()))
    }
}

/// Checks `f: Tensor -> scalar` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        epsilon,
        tol,
        ..GradCheckConfig::default()
    };
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &cfg)
}

/// Checks a scalar function of several tensors against central differences.
///
/// A coordinate is excluded, rather than checked, when `x ± epsilon` select a
/// different branch of some piecewise op (compared by
/// [`Tape::branch_signature`]) than `x` itself.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if cfg.epsilon <= 0.0 {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let eval = |xs: &[Tensor]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NotScalarLoss(v.shape().to_vec()));
        }
        Ok((finite(v.values()[0], "function value")?, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    finite(
        tape.value(out).values().first().copied().unwrap_or(f64::NAN),
        "function value",
    )?;
    let sig0 = tape.branch_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        tol: cfg.tol,
    };
    for input in 0..inputs.len() {
        let len = inputs[input].len();
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < len => {
                let mut picked = index::sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };
        for index in coords {
            let orig = inputs[input].values()[index];
            let at = |delta: f64, work: &mut Vec<Tensor>| -> Result<(f64, u64)> {
                work[input].values_mut()[index] = orig + delta;
                let v = eval(work);
                work[input].values_mut()[index] = orig;
                v
            };
            let h = cfg.epsilon;
            let (fp, sp) = at(h, &mut work)?;
            let (fm, sm) = at(-h, &mut work)?;
            let coord = Coord { input, index };
            if sp != sig0 || sm != sig0 {
                // The stencil straddles a kink: the difference quotient mixes
                // two smooth pieces and says nothing about the derivative.
                report.excluded.push(coord);
                continue;
            }
            let numeric = finite((fp - fm) / (2.0 * h), "finite difference")?;
            let a = analytic[input][index];
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}
