//! Forward Kalman recursion and backward recursion in the dual (MBF)
//! parametrization, with posterior means and variances of inputs and
//! outputs.
//!
//! Inputs carry independent Gaussian priors per component (diagonal
//! covariance). Output components without a prior at a given step are simply
//! unobserved, so each step uses only its "active" rows of `C_k`. The only
//! matrix inverted in the sweep is the `H_act x H_act` gain `G_k`, plus the
//! `N x N` terminal sum when a terminal condition is given.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lssm::{BoundaryCond, Lssm};

/// Gaussian prior parameters for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPriors {
    pub input_mean: DVector<f64>,
    pub input_var: DVector<f64>,
    /// Output rows carrying a prior at this step.
    pub out_rows: Vec<usize>,
    /// Backward message mean per active row (before subtracting `d_k`).
    pub out_mean: DVector<f64>,
    pub out_var: DVector<f64>,
}

impl StepPriors {
    /// Input prior only, no observed outputs.
    pub fn inputs(mean: DVector<f64>, var: DVector<f64>) -> Self {
        StepPriors {
            input_mean: mean,
            input_var: var,
            out_rows: Vec::new(),
            out_mean: DVector::zeros(0),
            out_var: DVector::zeros(0),
        }
    }

    pub fn with_output(mut self, row: usize, mean: f64, var: f64) -> Self {
        let n = self.out_rows.len();
        self.out_rows.push(row);
        self.out_mean = self.out_mean.insert_row(n, mean);
        self.out_var = self.out_var.insert_row(n, var);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PosteriorRequest {
    pub input_var: bool,
    pub output_var: bool,
}

impl PosteriorRequest {
    pub fn all() -> Self {
        PosteriorRequest { input_var: true, output_var: true }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardState {
    /// `m_fwd(X_k')` and `V_fwd(X_k')`: predicted state before step `k`'s outputs.
    pub pred_mean: Vec<DVector<f64>>,
    pub pred_cov: Vec<DMatrix<f64>>,
    /// `m_fwd(X_k)` and `V_fwd(X_k)`: filtered state.
    pub filt_mean: Vec<DVector<f64>>,
    pub filt_cov: Vec<DMatrix<f64>>,
    pub e: Vec<DVector<f64>>,
    pub f: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    /// Active rows of `C_k`.
    pub c_act: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct BackwardState {
    /// Dual mean and precision at `X_k` (after the output node).
    pub xi: Vec<DVector<f64>>,
    pub w: Vec<DMatrix<f64>>,
    /// Dual mean and precision at `X_k'` (before the output node).
    pub xi_pred: Vec<DVector<f64>>,
    pub w_pred: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothResult {
    pub u_mean: Vec<DVector<f64>>,
    /// Marginal input variances (diagonal of `V_U`), when requested.
    pub u_var: Option<Vec<DVector<f64>>>,
    /// Posterior means of all output components, including `d_k`.
    pub y_mean: Vec<DVector<f64>>,
    /// Marginal output variances (diagonal of `V_Y`), when requested.
    pub y_var: Option<Vec<DVector<f64>>>,
    /// Posterior state means `X_k`, `k = 1..=K`.
    pub x_mean: Vec<DVector<f64>>,
}

fn symmetrize(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn check_priors(m: &Lssm, priors: &[StepPriors]) -> Result<()> {
    if priors.len() != m.horizon() {
        return Err(Error::contract("need one StepPriors per model step"));
    }
    let (l, h) = (m.input_dim(), m.output_dim());
    for (k, p) in priors.iter().enumerate() {
        if p.input_mean.len() != l || p.input_var.len() != l {
            return Err(Error::contract(format!("input prior at step {} has wrong length", k + 1)));
        }
        if p.input_var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::contract(format!("input prior variance at step {} not positive", k + 1)));
        }
        let na = p.out_rows.len();
        if p.out_mean.len() != na || p.out_var.len() != na || p.out_rows.iter().any(|&r| r >= h) {
            return Err(Error::contract(format!("output prior at step {} inconsistent", k + 1)));
        }
        if p.out_var.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::contract(format!("output prior variance at step {} negative", k + 1)));
        }
    }
    Ok(())
}

pub fn forward_pass(m: &Lssm, bc: &BoundaryCond, priors: &[StepPriors]) -> Result<ForwardState> {
    check_priors(m, priors)?;
    let kk = m.horizon();
    let n = m.state_dim();
    let mut st = ForwardState {
        pred_mean: Vec::with_capacity(kk),
        pred_cov: Vec::with_capacity(kk),
        filt_mean: Vec::with_capacity(kk),
        filt_cov: Vec::with_capacity(kk),
        e: Vec::with_capacity(kk),
        f: Vec::with_capacity(kk),
        g: Vec::with_capacity(kk),
        c_act: Vec::with_capacity(kk),
    };
    let mut mx = bc.x0_mean.clone();
    let mut vx = bc.x0_cov.clone();
    for k in 0..kk {
        let p = &priors[k];
        let a = &m.a[k];
        let b = &m.b[k];
        // F.1, F.2
        let mp = a * &mx + b * &p.input_mean + &m.state_offset[k];
        let mut bv = b.clone();
        for (mut col, &v) in bv.column_iter_mut().zip(p.input_var.iter()) {
            col *= v;
        }
        let mut vp = (a * &vx) * a.transpose() + &bv * b.transpose();
        symmetrize(&mut vp);

        let na = p.out_rows.len();
        let mut c_act = DMatrix::zeros(na, n);
        let mut y_eff = DVector::zeros(na);
        for (i, &r) in p.out_rows.iter().enumerate() {
            c_act.set_row(i, &m.c[k].row(r));
            y_eff[i] = p.out_mean[i] - m.output_offset[k][r];
        }
        let (e, f, g) = if na == 0 {
            (DVector::zeros(n), DMatrix::identity(n, n), DMatrix::zeros(0, 0))
        } else {
            // F.3: G = (V_bwd(Y) + C V C^T)^-1
            let mut s = &c_act * &vp * c_act.transpose() + DMatrix::from_diagonal(&p.out_var);
            symmetrize(&mut s);
            let chol = Cholesky::new(s).ok_or(Error::Singular { step: k + 1, what: "output gain matrix" })?;
            let mut g = chol.inverse();
            symmetrize(&mut g);
            // F.4, F.5
            let e = c_act.tr_mul(&(&g * (&y_eff - &c_act * &mp)));
            let f = DMatrix::identity(n, n) - (&vp * c_act.transpose()) * (&g * &c_act);
            (e, f, g)
        };
        // F.6, F.7
        mx = &mp + &vp * &e;
        vx = &f * &vp;
        symmetrize(&mut vx);

        st.pred_mean.push(mp);
        st.pred_cov.push(vp);
        st.filt_mean.push(mx.clone());
        st.filt_cov.push(vx.clone());
        st.e.push(e);
        st.f.push(f);
        st.g.push(g);
        st.c_act.push(c_act);
    }
    Ok(st)
}

pub fn backward_pass(fwd: &ForwardState, m: &Lssm, bc: &BoundaryCond) -> Result<BackwardState> {
    let kk = m.horizon();
    let n = m.state_dim();
    // B.1, B.2
    let (mut xi, mut w) = match &bc.terminal {
        None => (DVector::zeros(n), DMatrix::zeros(n, n)),
        Some(t) => {
            let mut s = &fwd.filt_cov[kk - 1] + &t.cov;
            symmetrize(&mut s);
            let chol = Cholesky::new(s).ok_or(Error::Singular { step: kk, what: "terminal covariance sum" })?;
            let mut w = chol.inverse();
            symmetrize(&mut w);
            let xi = &w * (&fwd.filt_mean[kk - 1] - &t.mean);
            (xi, w)
        }
    };
    let mut out = BackwardState {
        xi: vec![DVector::zeros(0); kk],
        w: vec![DMatrix::zeros(0, 0); kk],
        xi_pred: vec![DVector::zeros(0); kk],
        w_pred: vec![DMatrix::zeros(0, 0); kk],
    };
    for k in (0..kk).rev() {
        let f = &fwd.f[k];
        let c = &fwd.c_act[k];
        // B.3, B.4
        let xi_p = f.tr_mul(&xi) - &fwd.e[k];
        let mut w_p = f.tr_mul(&(&w * f)) + c.tr_mul(&(&fwd.g[k] * c));
        symmetrize(&mut w_p);
        out.xi[k] = xi;
        out.w[k] = w;
        // B.5, B.6
        xi = m.a[k].tr_mul(&xi_p);
        w = m.a[k].tr_mul(&(&w_p * &m.a[k]));
        symmetrize(&mut w);
        out.xi_pred[k] = xi_p;
        out.w_pred[k] = w_p;
    }
    Ok(out)
}

pub fn posterior_io(
    fwd: &ForwardState,
    bwd: &BackwardState,
    m: &Lssm,
    priors: &[StepPriors],
    req: PosteriorRequest,
) -> SmoothResult {
    let kk = m.horizon();
    let mut res = SmoothResult {
        u_mean: Vec::with_capacity(kk),
        u_var: req.input_var.then(|| Vec::with_capacity(kk)),
        y_mean: Vec::with_capacity(kk),
        y_var: req.output_var.then(|| Vec::with_capacity(kk)),
        x_mean: Vec::with_capacity(kk),
    };
    for k in 0..kk {
        let p = &priors[k];
        let b = &m.b[k];
        let c = &m.c[k];
        // P.1
        let bt_xi = b.tr_mul(&bwd.xi_pred[k]);
        res.u_mean.push(&p.input_mean - p.input_var.component_mul(&bt_xi));
        if let Some(uv) = res.u_var.as_mut() {
            // P.2, diagonal only
            let bwb = b.tr_mul(&(&bwd.w_pred[k] * b));
            let v = DVector::from_fn(p.input_var.len(), |i, _| {
                p.input_var[i] - p.input_var[i] * bwb[(i, i)] * p.input_var[i]
            });
            uv.push(v);
        }
        // P.3
        let vx = &fwd.filt_cov[k];
        let x = &fwd.filt_mean[k] - vx * &bwd.xi[k];
        res.y_mean.push(c * &x + &m.output_offset[k]);
        if let Some(yv) = res.y_var.as_mut() {
            // P.4, diagonal only
            let post = vx - vx * (&bwd.w[k] * vx);
            let cv = c * post;
            yv.push(DVector::from_fn(c.nrows(), |i, _| cv.row(i).dot(&c.row(i))));
        }
        res.x_mean.push(x);
    }
    res
}

pub fn smooth(m: &Lssm, bc: &BoundaryCond, priors: &[StepPriors], req: PosteriorRequest) -> Result<SmoothResult> {
    let fwd = forward_pass(m, bc, priors)?;
    let bwd = backward_pass(&fwd, m, bc)?;
    Ok(posterior_io(&fwd, &bwd, m, priors, req))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn k1() -> (Lssm, BoundaryCond, Vec<StepPriors>) {
        let m = Lssm::constant(1, dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let bc = BoundaryCond::free_end(DVector::zeros(1), DMatrix::zeros(1, 1));
        let p = vec![StepPriors::inputs(DVector::zeros(1), DVector::from_element(1, 1.0)).with_output(0, 1.0, 1.0)];
        (m, bc, p)
    }

    #[test]
    fn hand_evaluated_single_step() {
        let (m, bc, p) = k1();
        let fwd = forward_pass(&m, &bc, &p).unwrap();
        assert_relative_eq!(fwd.pred_mean[0][0], 0.0);
        assert_relative_eq!(fwd.pred_cov[0][(0, 0)], 1.0);
        assert_relative_eq!(fwd.g[0][(0, 0)], 0.5);
        assert_relative_eq!(fwd.e[0][0], 0.5);
        assert_relative_eq!(fwd.f[0][(0, 0)], 0.5);
        assert_relative_eq!(fwd.filt_mean[0][0], 0.5);
        let bwd = backward_pass(&fwd, &m, &bc).unwrap();
        assert_eq!(bwd.xi[0][0], 0.0);
        assert_relative_eq!(bwd.xi_pred[0][0], -0.5);
        assert_relative_eq!(bwd.w_pred[0][(0, 0)], 0.5);
        let r = posterior_io(&fwd, &bwd, &m, &p, PosteriorRequest::all());
        assert_relative_eq!(r.u_mean[0][0], 0.5);
        assert_relative_eq!(r.u_var.unwrap()[0][0], 0.5);
        assert_relative_eq!(r.y_mean[0][0], 0.5);
    }

    #[test]
    fn free_running_without_information() {
        let a = dmatrix![0.9, 0.1; 0.0, 0.8];
        let m = Lssm::constant(5, a.clone(), dmatrix![1.0; 0.0], dmatrix![1.0, 0.0]).unwrap();
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let bc = BoundaryCond::pinned_start(x0.clone());
        let p: Vec<_> = (0..5)
            .map(|_| StepPriors::inputs(DVector::zeros(1), DVector::from_element(1, 1e-12)).with_output(0, 7.0, 1e12))
            .collect();
        let fwd = forward_pass(&m, &bc, &p).unwrap();
        let mut x = x0;
        for k in 0..5 {
            x = &a * &x;
            assert_relative_eq!(fwd.filt_mean[k], x, epsilon = 1e-9);
        }
    }

    #[test]
    fn no_information_keeps_prior_variance() {
        let (m, bc, _) = k1();
        let p = vec![StepPriors::inputs(DVector::zeros(1), DVector::from_element(1, 2.0)).with_output(0, 1.0, 1e20)];
        let r = smooth(&m, &bc, &p, PosteriorRequest::all()).unwrap();
        assert_relative_eq!(r.u_var.unwrap()[0][0], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn pinned_terminal_state_is_reached() {
        let m = Lssm::constant(4, dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let bc = BoundaryCond::pinned_start(DVector::zeros(1))
            .with_terminal(DVector::from_element(1, 3.0), DMatrix::identity(1, 1) * 1e-14);
        let p: Vec<_> = (0..4)
            .map(|_| StepPriors::inputs(DVector::zeros(1), DVector::from_element(1, 1.0)))
            .collect();
        let r = smooth(&m, &bc, &p, PosteriorRequest::default()).unwrap();
        assert_relative_eq!(r.x_mean[3][0], 3.0, epsilon = 1e-9);
        for u in &r.u_mean {
            assert_relative_eq!(u[0], 0.75, epsilon = 1e-9);
        }
    }

    #[test]
    fn singular_gain_is_reported() {
        let m = Lssm::constant(2, dmatrix![1.0], dmatrix![0.0], dmatrix![1.0]).unwrap();
        let bc = BoundaryCond::free_end(DVector::zeros(1), DMatrix::zeros(1, 1));
        let p: Vec<_> = (0..2)
            .map(|_| StepPriors::inputs(DVector::zeros(1), DVector::from_element(1, 1.0)).with_output(0, 0.0, 0.0))
            .collect();
        assert!(matches!(smooth(&m, &bc, &p, PosteriorRequest::default()), Err(Error::Singular { step: 1, .. })));
    }
}
