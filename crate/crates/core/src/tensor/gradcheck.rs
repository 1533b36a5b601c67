//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::graph::{Graph, Var};
use super::nn::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(1, |a|, |n|)` over every checked coordinate.
    pub max_rel_error: f64,
    /// `(tensor index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
    /// Coordinates whose stencil straddled a kink at the requested step and
    /// were re-measured with a smaller one.
    pub refined: usize,
}

/// Knobs for [`grad_check_params`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter (sampled with `seed`).
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Smaller steps tried when the one-sided slopes disagree.
const REFINEMENTS: u32 = 2;
/// One-sided slopes further apart than this (relative) mark a kink inside
/// the stencil. A smooth function differs by about `h·f''`.
const KINK_TOLERANCE: f64 = 1e-3;

/// Central difference at one coordinate; `at(δ)` evaluates the loss with
/// the coordinate moved by `δ`. When the forward and backward slopes
/// disagree, a max/argmin switch or similar kink lies within the step, so
/// the step shrinks tenfold (at most [`REFINEMENTS`] times). Returns the
/// estimate and whether the step was shrunk.
fn central_difference(base: f64, step: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<(f64, bool)> {
    let mut h = step;
    for round in 0..=REFINEMENTS {
        let plus = at(h)?;
        let minus = at(-h)?;
        let fwd = (plus - base) / h;
        let bwd = (base - minus) / h;
        if round == REFINEMENTS || rel_err(fwd, bwd) <= KINK_TOLERANCE {
            return Ok(((plus - minus) / (2.0 * h), round > 0));
        }
        h /= 10.0;
    }
    unreachable!()
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&g, &vars)?;
    g.check_finite()?;
    scalar_of(out)
}

fn scalar_of(out: Var<'_>) -> Result<f64> {
    let v = out.value();
    if v.len() != 1 {
        return Err(Error::Harness(format!(
            "closure must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.iter().copied().next().unwrap())
}

/// Compares tape gradients of `f` at `inputs` against central differences.
///
/// The closure is evaluated twice at the base point first; differing bits
/// mean it is not deterministic and the check is refused.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let base = eval_scalar(&f, inputs)?;
    if eval_scalar(&f, inputs)?.to_bits() != base.to_bits() {
        return Err(Error::Harness("closure is not deterministic".into()));
    }
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&g, &vars)?;
        let grads = g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .wrt(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.raw_dim()))
            })
            .collect()
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        refined: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for ti in 0..inputs.len() {
        for k in 0..inputs[ti].len() {
            let orig = inputs[ti].as_slice_memory_order().unwrap()[k];
            let (numeric, refined) = central_difference(base, step, |delta| {
                work[ti].as_slice_memory_order_mut().unwrap()[k] = orig + delta;
                let v = eval_scalar(&f, &work);
                work[ti].as_slice_memory_order_mut().unwrap()[k] = orig;
                v
            })?;
            report.refined += usize::from(refined);
            let a = analytic[ti].as_slice_memory_order().unwrap()[k];
            let e = rel_err(a, numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (ti, k);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Gradient check over the parameters of `store`. `f` builds the scalar
/// loss on a graph bound to the store. `only` restricts the check to the
/// listed parameters (all when empty).
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    only: &[ParamId],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph) -> Result<Var<'_>>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::with_params(store);
        let out = f(&g)?;
        g.check_finite()?;
        scalar_of(out)
    };
    let base = eval(store)?;
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::Harness("loss closure is not deterministic".into()));
    }
    let ids: Vec<ParamId> = if only.is_empty() {
        store.iter().map(|(id, _)| id).collect()
    } else {
        only.to_vec()
    };
    let analytic = {
        let g = Graph::with_params(store);
        let out = f(&g)?;
        let grads = g.backward(out)?;
        ids.iter()
            .map(|&id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).raw_dim()))
            })
            .collect::<Vec<_>>()
    };
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
        refined: 0,
    };
    for (ti, &id) in ids.iter().enumerate() {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for k in coords {
            let orig = store.get(id).as_slice_memory_order().unwrap()[k];
            let (numeric, refined) = central_difference(base, opts.step, |delta| {
                store.get_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig + delta;
                let v = eval(store);
                store.get_mut(id).as_slice_memory_order_mut().unwrap()[k] = orig;
                v
            })?;
            report.refined += usize::from(refined);
            let a = analytic[ti].as_slice_memory_order().unwrap()[k];
            let e = rel_err(a, numeric);
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (ti, k);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use std::cell::Cell;

    #[test]
    fn quadratic_at_three() {
        let x = ArrayD::from_elem(IxDyn(&[1]), 3.0);
        let r = grad_check(|_, v| Ok(v[0].square().sum()), &[x], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 1);
    }

    #[test]
    fn kink_inside_the_stencil_is_stepped_around() {
        // |x| at 5e-5: the 1e-4 stencil crosses 0 and the plain central
        // difference reads 0.5
        let x = ArrayD::from_elem(IxDyn(&[1]), 5e-5);
        let r = grad_check(|_, v| Ok(v[0].abs().sum()), &[x], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.refined, 1);
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach hides the x dependence from the tape but not from the numerics
        let x = ArrayD::from_elem(IxDyn(&[1]), 3.0);
        let r = grad_check(|_, v| Ok(v[0].detach().square().sum()), &[x], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error > 0.5);
    }

    #[test]
    fn refuses_nondeterministic_closure() {
        let calls = Cell::new(0.0);
        let x = ArrayD::from_elem(IxDyn(&[1]), 1.0);
        let err = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                Ok(v[0].add(g.scalar(calls.get())).sum())
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Harness(_)));
    }
}
