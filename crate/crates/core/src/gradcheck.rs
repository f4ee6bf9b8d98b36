//! Central-difference gradient checking against the tape.

use std::fmt;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Step shrinks tried before an element is declared to sit on a kink.
pub const KINK_RETRIES: usize = 2;

/// Rounding error budget, in units of epsilon times |f|, of one evaluation.
pub const ROUNDING_ULPS: f64 = 64.0;

/// At most one element in this many may be skipped as a kink.
pub const KINK_BUDGET: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Elements whose one-sided differences disagreed at every step size.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
    pub passed: bool,
    /// Set when evaluation itself failed (non-finite value, shape error).
    pub failure: Option<String>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(msg) = &self.failure {
            return write!(f, "FAIL ({msg})");
        }
        write!(
            f,
            "{} max_rel_err={:.3e} tol={:.1e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tol
        )?;
        for (i, r) in self.inputs.iter().enumerate() {
            write!(
                f,
                " [input {i}: {:.3e} at {} (tape {:.6e} vs fd {:.6e})",
                r.max_rel_error, r.worst_index, r.analytic, r.numeric
            )?;
            if r.skipped > 0 {
                write!(f, " kinks {}", r.skipped)?;
            }
            write!(f, "]")?;
        }
        Ok(())
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR)
}

/// True when each tenfold step shrink cut the one-sided gap, net of rounding
/// noise, at least fivefold.
fn smooth(gaps: &[f64]) -> bool {
    gaps.windows(2)
        .all(|w| w[1].max(0.0) <= w[0].max(0.0) / 5.0)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, String>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).map_err(|e| e.to_string())?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(format!(
            "function returned shape {:?}, expected a scalar",
            v.shape()
        ));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err("function value is not finite".into());
    }
    Ok(y)
}

/// Compare the tape gradient of scalar `f` against `(f(x+eps) - f(x-eps)) / 2eps`
/// for every element of every input.
///
/// When the forward and backward differences of an element disagree by more
/// than `tol`, the step shrinks tenfold, up to `KINK_RETRIES` times. A gap
/// that shrinks with the step, or drops to rounding noise, is curvature and the first central difference
/// is used. A gap that does not shrink marks a non-differentiable point
/// inside the interval and the element is skipped. More than one skip per
/// `KINK_BUDGET` elements fails the check.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> GradcheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let fail = |msg: String| GradcheckReport {
        inputs: Vec::new(),
        tol,
        passed: false,
        failure: Some(msg),
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = match f(&mut tape, &vars) {
        Ok(v) => v,
        Err(e) => return fail(format!("forward failed: {e}")),
    };
    let grads = match tape.backward(out) {
        Ok(g) => g,
        Err(e) => return fail(format!("backward failed: {e}")),
    };
    let center = match evaluate(&f, inputs) {
        Ok(y) => y,
        Err(e) => return fail(format!("unperturbed input: {e}")),
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut rep = InputReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            skipped: 0,
        };
        for i in 0..input.numel() {
            let orig = input.data()[i];
            let mut h = eps;
            let mut first = None;
            let mut gaps = Vec::with_capacity(KINK_RETRIES + 1);
            let mut numeric = None;
            for _ in 0..=KINK_RETRIES {
                work[k].data_mut()[i] = orig + h;
                let plus = evaluate(&f, &work);
                work[k].data_mut()[i] = orig - h;
                let minus = evaluate(&f, &work);
                work[k].data_mut()[i] = orig;
                let (plus, minus) = match (plus, minus) {
                    (Ok(p), Ok(m)) => (p, m),
                    (Err(e), _) | (_, Err(e)) => {
                        return fail(format!("input {k} element {i}: {e}"));
                    }
                };
                let central = (plus - minus) / (2.0 * h);
                first.get_or_insert(central);
                let (fwd, bwd) = ((plus - center) / h, (center - minus) / h);
                let gap = relative_error(fwd, bwd);
                if gap <= tol {
                    numeric = Some(central);
                    break;
                }
                let scale = plus.abs().max(center.abs()).max(minus.abs());
                let noise = ROUNDING_ULPS * f64::EPSILON * scale / h;
                gaps.push(gap - noise / fwd.abs().max(bwd.abs()).max(RELATIVE_FLOOR));
                h /= 10.0;
            }
            if numeric.is_none() && smooth(&gaps) {
                numeric = first;
            }
            let Some(numeric) = numeric else {
                rep.skipped += 1;
                continue;
            };
            let a = analytic.data()[i];
            let err = relative_error(a, numeric);
            if err > rep.max_rel_error || i == 0 {
                rep = InputReport {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                    skipped: rep.skipped,
                };
            }
        }
        reports.push(rep);
    }
    let passed = reports
        .iter()
        .zip(inputs)
        .all(|(r, x)| r.max_rel_error <= tol && r.skipped * KINK_BUDGET <= x.numel());
    GradcheckReport {
        inputs: reports,
        tol,
        passed,
        failure: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_vec(vec![4], vec![0.3, -1.2, 2.5, 0.01]).unwrap();
        let rep = gradcheck(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[x],
            1e-5,
            1e-8,
        );
        assert!(rep.passed, "{rep}");
        assert!(rep.max_rel_error() <= 1e-8);
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let x = Tensor::from_vec(vec![3], vec![0.5, 1.5, -0.7]).unwrap();
        let rep = gradcheck(
            |t, v| {
                let val = t.value(v[0]).map(|a| a * a);
                // claims d(x^2)/dx = x instead of 2x
                let y = t.custom(
                    &[v[0]],
                    val,
                    Box::new(|ins, _out, g| vec![ins[0].zip_map(g, |a, b| a * b).unwrap()]),
                )?;
                t.sum(y)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(!rep.passed);
        assert!(rep.max_rel_error() > 0.4, "{rep}");
    }

    #[test]
    fn non_finite_output_fails_with_location() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 1e-7]).unwrap();
        let rep = gradcheck(
            |t, v| {
                let l = t.log(v[0])?;
                t.sum(l)
            },
            &[x],
            1e-5,
            1e-4,
        );
        assert!(!rep.passed);
        let msg = rep.failure.expect("failure message");
        assert!(msg.contains("element 1"), "{msg}");
    }

    fn relu_sum(t: &mut Tape<f64>, v: &[Var]) -> Result<Var> {
        let y = t.leaky_relu(v[0], 0.0)?;
        t.sum(y)
    }

    #[test]
    fn kink_inside_step_is_resolved_by_shrinking() {
        let mut data = vec![0.5; 60];
        data[7] = 4e-7;
        let x = Tensor::from_vec(vec![60], data).unwrap();
        let rep = gradcheck(relu_sum, &[x], 1e-6, 1e-4);
        assert!(rep.passed, "{rep}");
        assert_eq!(rep.inputs[0].skipped, 0);
    }

    #[test]
    fn kinks_are_skipped_within_budget() {
        let mut data = vec![0.5; 60];
        data[3] = 1e-9;
        let x = Tensor::from_vec(vec![60], data.clone()).unwrap();
        let rep = gradcheck(relu_sum, &[x], 1e-6, 1e-4);
        assert!(rep.passed, "{rep}");
        assert_eq!(rep.inputs[0].skipped, 1);

        data[4] = -1e-9;
        let x = Tensor::from_vec(vec![60], data).unwrap();
        let rep = gradcheck(relu_sum, &[x], 1e-6, 1e-4);
        assert!(!rep.passed, "{rep}");
        assert_eq!(rep.inputs[0].skipped, 2);
    }
}
