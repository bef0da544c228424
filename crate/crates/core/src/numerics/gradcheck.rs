//! Central finite-difference oracle for tape gradients.

use super::array::{Precision, Real};
use super::params::ParamStore;
use super::rng::Rng;
use super::tape::{grad, Graph, Var};
use crate::error::{Error, Result};

/// One probed coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Coordinates to probe, as `(parameter name, flat index)`.
#[derive(Debug, Clone, Default)]
pub struct ProbePlan {
    pub coords: Vec<(String, usize)>,
}

impl ProbePlan {
    /// Samples up to `per_param` distinct coordinates from every trainable
    /// parameter, in store order.
    pub fn sample<T: Real>(params: &ParamStore<T>, per_param: usize, rng: &mut Rng) -> Self {
        let mut coords = Vec::new();
        for (name, p) in params.iter() {
            if p.frozen {
                continue;
            }
            let n = p.value.len();
            if n <= per_param {
                coords.extend((0..n).map(|i| (name.to_string(), i)));
                continue;
            }
            let mut picked: Vec<usize> = Vec::with_capacity(per_param);
            while picked.len() < per_param {
                let i = rng.below(n);
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            coords.extend(picked.into_iter().map(|i| (name.to_string(), i)));
        }
        Self { coords }
    }
}

/// Relative error with an absolute floor so that coordinates whose true
/// gradient is near zero are judged on absolute agreement.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Default denominator floor for [`relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// at every coordinate of `plan`. Double precision only.
pub fn finite_diff_check<T, F>(
    loss_fn: F,
    params: &ParamStore<T>,
    plan: &ProbePlan,
    epsilon: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if T::PRECISION != Precision::Double {
        return Err(Error::Precision(
            "finite-difference oracle requires double precision".into(),
        ));
    }
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let mut graph = Graph::new();
    let loss = loss_fn(&mut graph, params)?;
    let grads = grad(&graph, loss, params)?;

    let eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, p)?;
        Ok(g.value(l).data()[0].as_f64())
    };

    let mut work = params.clone();
    let mut checks = Vec::with_capacity(plan.coords.len());
    for (name, index) in &plan.coords {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no gradient for `{name}`")))?;
        let analytic: f64 = match g.data().get(*index) {
            Some(v) => v.as_f64(),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "`{name}`[{index}] out of range"
                )))
            }
        };
        let original = work.require(name)?.data()[*index];
        let h = T::from_f64(epsilon);

        work.get_mut(name).expect("present").data_mut()[*index] = original + h;
        let plus = eval(&work)?;
        work.get_mut(name).expect("present").data_mut()[*index] = original - h;
        let minus = eval(&work)?;
        work.get_mut(name).expect("present").data_mut()[*index] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        checks.push(CoordCheck {
            name: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, REL_ERROR_FLOOR),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(FdReport {
        checks,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseArray;

    fn quadratic_store<T: Real>() -> ParamStore<T> {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            DenseArray::from_rows(&[&[0.3, -1.2, 2.0], &[0.7, 0.1, -0.4]]),
            false,
        )
        .unwrap();
        s
    }

    fn quadratic<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>) -> Result<Var> {
        let w = g.param(p, "w")?;
        let sq = g.mul(w, w)?;
        let s = g.sum_all(sq);
        Ok(g.scale(s, T::from_f64(0.5)))
    }

    #[test]
    fn quadratic_is_exact() {
        let p = quadratic_store::<f64>();
        let plan = ProbePlan::sample(&p, 10, &mut Rng::new(0));
        let r = finite_diff_check(quadratic, &p, &plan, 1e-5, 1e-8).unwrap();
        assert!(r.passed, "{:?}", r.worst());
        assert_eq!(r.checks.len(), 6);
    }

    #[test]
    fn single_precision_refused() {
        let p = quadratic_store::<f32>();
        let plan = ProbePlan::sample(&p, 10, &mut Rng::new(0));
        let err = finite_diff_check(quadratic, &p, &plan, 1e-5, 1e-8).unwrap_err();
        assert!(matches!(err, Error::Precision(_)));
    }

    #[test]
    fn epsilon_out_of_range_refused() {
        let p = quadratic_store::<f64>();
        let plan = ProbePlan::sample(&p, 1, &mut Rng::new(0));
        assert!(finite_diff_check(quadratic, &p, &plan, 1e-2, 1e-8).is_err());
    }
}
