use super::param::{Grads, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Magnitudes below this are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the tape gradient of `loss_fn` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every parameter entry.
pub fn grad_check<F>(params: &mut ParamStore<f64>, loss_fn: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var>,
{
    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = loss_fn(&mut tape)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };
    let analytic: Grads<f64> = {
        let mut tape = Tape::new(&*params);
        let loss = loss_fn(&mut tape)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {v}")));
        }
        tape.backward(loss)
    };

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, tol };
    let ids: Vec<_> = (0..params.len()).map(super::param::ParamId).collect();
    for id in ids {
        let n = params.get(id).value.data().len();
        for k in 0..n {
            let orig = params.get(id).value.data()[k];
            params.get_mut(id).value.data_mut()[k] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).value.data_mut()[k] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).value.data_mut()[k] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.entry(id, k);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((params.get(id).name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, OrthoMode};

    #[test]
    fn quadratic_form_matches_closed_form() {
        // loss = ½‖Wx‖², dL/dW = W x xᵀ.
        let mut ps = ParamStore::<f64>::new();
        let w = ps.add("w", Matrix::from_rows(&[vec![0.3, -1.2, 0.7], vec![2.0, 0.1, -0.4]]).unwrap());
        let x = Matrix::from_rows(&[vec![1.5], vec![-0.5], vec![2.0]]).unwrap();
        let f = |t: &mut Tape<'_, f64>| -> Result<Var> {
            let wv = t.param(w);
            let xv = t.input(x.clone());
            let y = t.matmul(wv, xv);
            let yy = t.mul(y, y);
            let ones = t.input(Matrix::filled(1, 2, 0.5));
            Ok(t.matmul(ones, yy))
        };
        let wx = ps.value(w).matmul(&x).unwrap();
        let closed = wx.matmul(&x.transpose()).unwrap();
        let tape_grad = {
            let mut t = Tape::new(&ps);
            let l = f(&mut t).unwrap();
            t.backward(l)
        };
        for (a, b) in tape_grad.get(w).unwrap().data().iter().zip(closed.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let report = grad_check(&mut ps, f, 1e-4, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        let (_, _, a, n) = report.worst.clone().unwrap();
        assert!((a - n).abs() < 1e-6);
    }

    #[test]
    fn constant_parameter_has_zero_gradient() {
        let mut ps = ParamStore::<f64>::new();
        let used = ps.add("used", Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let unused = ps.add("unused", Matrix::from_rows(&[vec![3.0]]).unwrap());
        let f = |t: &mut Tape<'_, f64>| -> Result<Var> {
            let u = t.param(used);
            let s = t.sigmoid(u);
            let o = t.input(Matrix::filled(2, 1, 1.0));
            Ok(t.matmul(s, o))
        };
        let g = {
            let mut t = Tape::new(&ps);
            let l = f(&mut t).unwrap();
            t.backward(l)
        };
        assert_eq!(g.entry(unused, 0), 0.0);
        let orig = ps.value(unused).data()[0];
        let h = 1e-4;
        let eval = |ps: &ParamStore<f64>| {
            let mut t = Tape::new(ps);
            let l = f(&mut t).unwrap();
            t.value(l).item()
        };
        ps.get_mut(unused).value.data_mut()[0] = orig + h;
        let up = eval(&ps);
        ps.get_mut(unused).value.data_mut()[0] = orig - h;
        let down = eval(&ps);
        assert!(((up - down) / (2.0 * h)).abs() < 1e-8);
        assert!(grad_check(&mut ps, f, 1e-4, 1e-4).unwrap().passed());
    }

    #[test]
    fn every_primitive_passes() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Matrix::from_rows(&[vec![0.3, -0.8, 0.5], vec![1.1, 0.2, -0.6]]).unwrap());
        let b = ps.add("b", Matrix::from_rows(&[vec![0.4, 0.9, -0.3], vec![-1.0, 0.5, 0.8]]).unwrap());
        let gain = ps.add("gain", Matrix::from_rows(&[vec![1.2, 0.7, -0.4]]).unwrap());
        let bias = ps.add("bias", Matrix::from_rows(&[vec![0.1, -0.2, 0.3]]).unwrap());
        let table = ps.add(
            "table",
            Matrix::from_rows(&[vec![0.2, -0.1, 0.4], vec![0.9, 0.3, -0.5], vec![-0.7, 0.6, 0.1]]).unwrap(),
        );
        let f = |t: &mut Tape<'_, f64>| -> Result<Var> {
            let (av, bv) = (t.param(a), t.param(b));
            let e = t.gather(table, &[2, 0, 2]);
            let s = t.matmul_bt(av, e);
            let s = t.softmax_rows(s);
            let h = t.matmul(s, e);
            let h = t.add(h, bv);
            let (g, bi) = (t.param(gain), t.param(bias));
            let n = t.layer_norm_rows(h, g, bi);
            let r0 = t.rows(n, 0, 1);
            let r1 = t.rows(n, 1, 1);
            let sg = t.sigmoid(r1);
            let m = t.mul(r0, sg);
            let c = t.concat_rows(&[m, r1, r0]);
            let c = t.select_rows(c, &[2, 0, 1, 0]);
            let o = t.ortho(c, OrthoMode::Frobenius)?;
            let oc = t.ortho(c, OrthoMode::Cosine)?;
            let mean = t.mean_rows(c);
            let cc = t.concat_cols(&[mean, bi]);
            let cc = t.scale(cc, 0.5);
            let row = t.rows(cc, 0, 1);
            let sum_in = t.input(Matrix::filled(6, 2, 0.3));
            let logits = t.matmul(row, sum_in);
            let pb = t.input(Matrix::from_rows(&[vec![0.1, -0.3]]).unwrap());
            let logits = t.add_row(logits, pb);
            let bce = t.bce_pair(logits, 1.0);
            Ok(t.sum(&[o, oc, bce]))
        };
        let report = grad_check(&mut ps, f, 1e-4, 1e-4).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, ps.num_scalars());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut ps = ParamStore::<f64>::new();
        let a = ps.add("a", Matrix::from_rows(&[vec![f64::NAN]]).unwrap());
        let err = grad_check(&mut ps, |t| Ok(t.param(a)), 1e-4, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
