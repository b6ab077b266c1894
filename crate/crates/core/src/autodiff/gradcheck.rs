use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients below this magnitude are compared absolutely rather than relatively.
const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over comparable coordinates.
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    /// Coordinates where a ±h perturbation flips a ReLU or clamp; the
    /// one-sided slopes disagree there and no comparison is meaningful.
    pub non_comparable: Vec<usize>,
    /// `f` produced a non-finite value or an error somewhere.
    pub nan_detected: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        !self.nan_detected && self.max_rel_err < tol
    }
}

fn evaluate<F>(f: &F, x: &Tensor) -> Option<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let out = f(&mut tape, xv).ok()?;
    let v = tape.scalar(out);
    v.is_finite().then(|| (v, tape.kink_pattern()))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x+h·e) − f(x−h·e)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        non_comparable: Vec::new(),
        nan_detected: false,
        analytic: vec![f64::NAN; x.len()],
        numeric: vec![f64::NAN; x.len()],
    };

    let mut tape = Tape::new();
    let param = x.clone().with_grad();
    let xv = tape.leaf(&param);
    let base_pattern = match f(&mut tape, xv).and_then(|out| {
        tape.backward(out)?;
        Ok(tape.scalar(out))
    }) {
        Ok(v) if v.is_finite() => tape.kink_pattern(),
        _ => {
            report.nan_detected = true;
            report.max_rel_err = f64::NAN;
            return report;
        }
    };
    match tape.grad(xv) {
        Some(g) => report.analytic.copy_from_slice(g),
        None => report.analytic.iter_mut().for_each(|v| *v = 0.0),
    }

    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = evaluate(&f, &probe);
        probe.data_mut()[i] = orig - h;
        let minus = evaluate(&f, &probe);
        probe.data_mut()[i] = orig;

        let (Some((fp, pat_p)), Some((fm, pat_m))) = (plus, minus) else {
            report.nan_detected = true;
            continue;
        };
        let numeric = (fp - fm) / (2.0 * h);
        report.numeric[i] = numeric;
        if pat_p != base_pattern || pat_m != base_pattern {
            report.non_comparable.push(i);
            continue;
        }
        let analytic = report.analytic[i];
        if !analytic.is_finite() {
            report.nan_detected = true;
            continue;
        }
        let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        if report.worst_index.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(&[0.3, -1.2, 4.0]);
        let r = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert!(r.non_comparable.is_empty());
    }

    #[test]
    fn relu_kink_is_flagged() {
        let x = Tensor::vector(&[0.0, 1.0, -1.0]);
        let r = grad_check(
            |t, v| {
                let y = t.relu(v)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        );
        assert_eq!(r.non_comparable, vec![0]);
        assert!(r.passes(1e-6));
    }

    #[test]
    fn failing_function_is_reported() {
        let x = Tensor::vector(&[-1.0]);
        let r = grad_check(
            |t, v| {
                let y = t.log(v)?;
                Ok(t.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(r.nan_detected);
        assert!(!r.passes(1.0));
    }
}
