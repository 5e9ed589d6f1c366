use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::GradMap;

/// One evaluation of the function under test.
pub struct Probe<T> {
    pub value: T,
    /// Piecewise-linear branch fingerprint, see [`Graph::branch_signature`].
    /// Smooth functions can return 0.
    ///
    /// [`Graph::branch_signature`]: crate::tensor::Graph::branch_signature
    pub signature: u64,
    /// Analytic gradient, filled when requested.
    pub grads: Option<GradMap<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords: usize,
    /// Coordinates that needed a smaller step to stay on one smooth piece.
    pub refined: usize,
    /// Coordinates where every step straddled a relu/maxpool kink.
    pub skipped: usize,
}

const REFINEMENTS: usize = 3;
/// Target relative rounding noise of a difference quotient before the step
/// is widened.
const NOISE_TARGET: f64 = 1e-6;
const MAX_STEP: f64 = 0.1;
const WIDEN_HALVINGS: usize = 12;

/// Central finite-difference check of every scalar coordinate in `point`.
///
/// The relative error at a coordinate is `|a − n| / max(|a|, |n|, 1e-12)`.
/// When `f(w ± eps)` lands on a different piecewise-linear branch than `f(w)`
/// the step shrinks tenfold (up to three times); if it still straddles a kink
/// the coordinate is counted in `skipped` instead of scored.
///
/// A nonzero quotient small enough that rounding in `f` dominates it is
/// recomputed with a wider step (same branch required) and Richardson
/// extrapolation over `h` and `h/2`.
pub fn grad_check<T, F>(mut f: F, point: &ParamSet<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&ParamSet<T>, bool) -> Result<Probe<T>>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("grad_check eps must be > 0, got {eps}")));
    }
    let base = f(point, true)?;
    check_finite(base.value)?;
    let analytic = base
        .grads
        .ok_or_else(|| Error::Contract("function did not return gradients".into()))?;
    let f_scale = base.value.as_f64().abs().max(1.0);

    let mut report = GradCheckReport::default();
    let mut work = point.clone();
    let names: Vec<String> = point.names().map(str::to_string).collect();
    for name in names {
        let ga = analytic.get(&name);
        let n = point.get(&name)?.numel();
        for i in 0..n {
            report.coords += 1;
            let a = ga.map_or(0.0, |g| g.data()[i].as_f64());
            let orig = point.get(&name)?.data()[i];
            let mut quotient = |step: f64| -> Result<Option<f64>> {
                let h = T::from_f64_lossy(step);
                work.get_mut(&name)?.data_mut()[i] = orig + h;
                let plus = f(&work, false);
                work.get_mut(&name)?.data_mut()[i] = orig - h;
                let minus = f(&work, false);
                work.get_mut(&name)?.data_mut()[i] = orig;
                let (plus, minus) = (plus?, minus?);
                check_finite(plus.value)?;
                check_finite(minus.value)?;
                if plus.signature != base.signature || minus.signature != base.signature {
                    return Ok(None);
                }
                // divide by the step actually representable in T
                let hp = (orig + h).as_f64() - (orig - h).as_f64();
                Ok(Some((plus.value.as_f64() - minus.value.as_f64()) / hp))
            };

            let mut step = eps;
            let mut numeric = None;
            for attempt in 0..=REFINEMENTS {
                if let Some(q) = quotient(step)? {
                    numeric = Some(q);
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    break;
                }
                step /= 10.0;
            }
            let Some(mut num) = numeric else {
                report.skipped += 1;
                continue;
            };

            let noise = f64::EPSILON * f_scale / step;
            if num != 0.0 && noise > NOISE_TARGET * num.abs() {
                let mut wide = (4.0 * noise * step / (NOISE_TARGET * num.abs())).min(MAX_STEP);
                for _ in 0..WIDEN_HALVINGS {
                    if wide <= step {
                        break;
                    }
                    if let (Some(d1), Some(d2)) = (quotient(wide)?, quotient(wide / 2.0)?) {
                        num = (4.0 * d2 - d1) / 3.0;
                        break;
                    }
                    wide /= 2.0;
                }
            }

            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-12);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn check_finite<T: Scalar>(v: T) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric("non-finite function value during gradient check".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(w));
        p
    }

    fn probe(value: f64, grad: f64, want: bool) -> Probe<f64> {
        let grads = want.then(|| {
            let mut g = GradMap::new();
            g.insert("w".to_string(), Tensor::scalar(grad));
            g
        });
        Probe {
            value,
            signature: 0,
            grads,
        }
    }

    #[test]
    fn quadratic_at_three() {
        let r = grad_check(
            |p, want| {
                let w = p.get("w")?.item()?;
                Ok(probe(w * w, 2.0 * w, want))
            },
            &single(3.0),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn linear_is_machine_precision() {
        let r = grad_check(
            |p, want| {
                let w = p.get("w")?.item()?;
                Ok(probe(4.0 * w - 1.0, 4.0, want))
            },
            &single(0.5),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let r = grad_check(
            |p, want| {
                let w = p.get("w")?.item()?;
                Ok(probe(w * w, w, want))
            },
            &single(3.0),
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.4);
    }

    #[test]
    fn rejects_bad_eps_and_nan() {
        let f = |p: &ParamSet<f64>, want| {
            let w = p.get("w")?.item()?;
            Ok(probe(w, 1.0, want))
        };
        assert!(matches!(grad_check(f, &single(1.0), 0.0), Err(Error::Config(_))));
        let g = |_: &ParamSet<f64>, want| Ok(probe(f64::NAN, 1.0, want));
        assert!(matches!(grad_check(g, &single(1.0), 1e-6), Err(Error::Numeric(_))));
    }
}
