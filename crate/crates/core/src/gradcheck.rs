//! Central finite-difference verification of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-input outcome of [`finite_diff_check_many`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().fold(0.0, |a, &b| a.max(b))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_of(v: &Var<'_>) -> Result<f64> {
    if v.value().is_scalar() {
        Ok(v.value().item())
    } else {
        Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )))
    }
}

/// Compares the tape gradient of scalar `f` at `at` with central
/// differences of step `h`; returns the worst relative error.
pub fn finite_diff_check<F>(f: F, at: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>>,
{
    let r = finite_diff_check_many(|xs| f(&xs[0]), std::slice::from_ref(at), h)?;
    Ok(r.worst())
}

/// Multi-input form of [`finite_diff_check`].
pub fn finite_diff_check_many<F>(f: F, at: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0 && h <= 1e-2) {
        return Err(Error::Contract(format!("finite-difference step {h} outside (0, 1e-2]")));
    }
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = at.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&leaves)?;
    scalar_of(&out)?;
    let grads = tape.backward(&out)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|v| grads.wrt(v)).collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        scalar_of(&f(&vs)?)
    };

    let mut report = GradCheckReport { max_rel_error: Vec::with_capacity(at.len()) };
    let mut point: Vec<Tensor> = at.to_vec();
    for (k, base) in at.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..base.numel() {
            let mut plus = base.to_vec();
            let mut minus = base.to_vec();
            plus[i] += h;
            minus[i] -= h;
            point[k] = Tensor::new(base.shape().to_vec(), plus)?;
            let fp = eval(&point)?;
            point[k] = Tensor::new(base.shape().to_vec(), minus)?;
            let fm = eval(&point)?;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
        point[k] = base.clone();
        report.max_rel_error.push(worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(vec![3, 4], |i| i[0] as f64 * 0.3 - i[1] as f64);
        let e = finite_diff_check(|v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert!(e < 1e-10, "{e}");
    }

    #[test]
    fn softmax_pick_first() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        let e = finite_diff_check(|v| v.softmax().narrow(0, 0, 1).map(|p| p.sum()), &x, 1e-5).unwrap();
        assert!(e < 1e-6, "{e}");
    }

    #[test]
    fn rejects_bad_step_and_non_scalar() {
        let x = Tensor::ones(vec![2]);
        assert!(matches!(finite_diff_check(|v| Ok(v.sum()), &x, 0.1), Err(Error::Contract(_))));
        assert!(matches!(finite_diff_check(|v| Ok(v.scale(1.0)), &x, 1e-5), Err(Error::Contract(_))));
    }
}
