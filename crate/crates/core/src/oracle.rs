//! Dense joint-Gaussian reference for the smoother.
//!
//! Stacks the initial state and all inputs into one vector `z`, writes every
//! state as an affine function of `z`, and conditions on all output priors
//! (and the terminal condition) at once in covariance form. Cubic in the
//! horizon; meant for small test problems only.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::lssm::{BoundaryCond, Lssm};
use crate::mbf::{SmoothResult, StepPriors};

pub fn dense_smooth(m: &Lssm, bc: &BoundaryCond, priors: &[StepPriors]) -> Result<SmoothResult> {
    let (kk, n, l) = (m.horizon(), m.state_dim(), m.input_dim());
    if priors.len() != kk {
        return Err(Error::contract("need one StepPriors per model step"));
    }
    let dim = n + kk * l;
    let mut mean = DVector::zeros(dim);
    let mut cov = DMatrix::zeros(dim, dim);
    mean.rows_mut(0, n).copy_from(&bc.x0_mean);
    cov.view_mut((0, 0), (n, n)).copy_from(&bc.x0_cov);
    for (k, p) in priors.iter().enumerate() {
        for i in 0..l {
            mean[n + k * l + i] = p.input_mean[i];
            cov[(n + k * l + i, n + k * l + i)] = p.input_var[i];
        }
    }

    // x_k = phi[k] z + off[k]
    let mut phi = Vec::with_capacity(kk);
    let mut off = Vec::with_capacity(kk);
    let mut cur_phi = DMatrix::zeros(n, dim);
    cur_phi.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut cur_off = DVector::zeros(n);
    for k in 0..kk {
        cur_phi = &m.a[k] * &cur_phi;
        cur_phi.view_mut((0, n + k * l), (n, l)).copy_from(&m.b[k]);
        cur_off = &m.a[k] * &cur_off + &m.state_offset[k];
        phi.push(cur_phi.clone());
        off.push(cur_off.clone());
    }

    // observation rows: obs = H z + h0 + noise(R)
    let mut rows_h: Vec<DVector<f64>> = Vec::new();
    let mut rows_h0 = Vec::new();
    let mut obs = Vec::new();
    let mut noise = Vec::new();
    for (k, p) in priors.iter().enumerate() {
        for (i, &r) in p.out_rows.iter().enumerate() {
            let c = m.c[k].row(r);
            rows_h.push((c * &phi[k]).transpose());
            rows_h0.push((c * &off[k])[0] + m.output_offset[k][r]);
            obs.push(p.out_mean[i]);
            noise.push(p.out_var[i]);
        }
    }
    let n_obs = rows_h.len();
    let t_dim = if bc.terminal.is_some() { n } else { 0 };
    let mut h = DMatrix::zeros(n_obs + t_dim, dim);
    let mut resid = DVector::zeros(n_obs + t_dim);
    let mut r = DMatrix::zeros(n_obs + t_dim, n_obs + t_dim);
    for i in 0..n_obs {
        h.set_row(i, &rows_h[i].transpose());
        resid[i] = obs[i] - rows_h0[i];
        r[(i, i)] = noise[i];
    }
    if let Some(t) = &bc.terminal {
        h.view_mut((n_obs, 0), (n, dim)).copy_from(&phi[kk - 1]);
        resid.rows_mut(n_obs, n).copy_from(&(&t.mean - &off[kk - 1]));
        r.view_mut((n_obs, n_obs), (n, n)).copy_from(&t.cov);
    }

    let (post_mean, post_cov) = if h.nrows() == 0 {
        (mean, cov)
    } else {
        let s = &h * &cov * h.transpose() + r;
        let chol = Cholesky::new(s).ok_or_else(|| Error::Oracle("innovation covariance not positive definite".into()))?;
        let ch = &cov * h.transpose();
        let innov = resid - &h * &mean;
        let pm = &mean + &ch * chol.solve(&innov);
        let pc = &cov - &ch * chol.solve(&ch.transpose());
        (pm, pc)
    };

    let mut res = SmoothResult {
        u_mean: Vec::with_capacity(kk),
        u_var: Some(Vec::with_capacity(kk)),
        y_mean: Vec::with_capacity(kk),
        y_var: Some(Vec::with_capacity(kk)),
        x_mean: Vec::with_capacity(kk),
    };
    for k in 0..kk {
        let s = n + k * l;
        res.u_mean.push(post_mean.rows(s, l).into_owned());
        res.u_var.as_mut().unwrap().push(DVector::from_fn(l, |i, _| post_cov[(s + i, s + i)]));
        let x = &phi[k] * &post_mean + &off[k];
        let cphi = &m.c[k] * &phi[k];
        let yv = &cphi * &post_cov * cphi.transpose();
        res.y_mean.push(&m.c[k] * &x + &m.output_offset[k]);
        res.y_var.as_mut().unwrap().push(yv.diagonal());
        res.x_mean.push(x);
    }
    Ok(res)
}

/// Largest relative deviation between two smoother results over all
/// posterior means and (when both present) marginal variances. Each entry is
/// compared relative to `max(|reference|, floor)`.
pub fn max_relative_deviation(got: &SmoothResult, reference: &SmoothResult, floor: f64) -> f64 {
    fn fam(a: &[DVector<f64>], b: &[DVector<f64>], floor: f64) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(move |(p, q)| (p - q).abs() / q.abs().max(floor)))
            .fold(0.0, f64::max)
    }
    let mut worst = fam(&got.u_mean, &reference.u_mean, floor).max(fam(&got.y_mean, &reference.y_mean, floor));
    if let (Some(a), Some(b)) = (&got.u_var, &reference.u_var) {
        worst = worst.max(fam(a, b, floor));
    }
    if let (Some(a), Some(b)) = (&got.y_var, &reference.y_var) {
        worst = worst.max(fam(a, b, floor));
    }
    worst
}

/// Random well-conditioned smoothing problem: `A` scaled to spectral norm at
/// most 0.98, standard normal `B`, `C` and offsets, input variances in
/// `[0.5, 2]`, output variances in `[0.1, 1]` on a random subset of rows,
/// and a terminal condition half of the time.
pub fn random_instance<R: Rng>(
    rng: &mut R,
    max_k: usize,
    max_n: usize,
    max_l: usize,
    max_h: usize,
) -> (Lssm, BoundaryCond, Vec<StepPriors>) {
    let kk = rng.random_range(1..=max_k);
    let n = rng.random_range(1..=max_n);
    let l = rng.random_range(1..=max_l);
    let h = rng.random_range(1..=max_h);
    fn normal<R: Rng>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }
    let mut a = normal(rng, n, n);
    let norm = a.clone().svd(false, false).singular_values.max();
    if norm > 0.98 {
        a *= 0.98 / norm;
    }
    let b = normal(rng, n, l);
    let c = normal(rng, h, n);
    let so: Vec<DVector<f64>> = (0..kk).map(|_| normal(rng, n, 1).column(0).into_owned() * 0.1).collect();
    let oo: Vec<DVector<f64>> = (0..kk).map(|_| normal(rng, h, 1).column(0).into_owned() * 0.1).collect();
    let m = Lssm::new(vec![a; kk], vec![b; kk], vec![c; kk], so, oo).expect("consistent shapes");
    let x0 = normal(rng, n, 1).column(0).into_owned();
    let g = normal(rng, n, n);
    let mut bc = BoundaryCond::free_end(x0, &g * g.transpose() * 0.1 + DMatrix::identity(n, n) * 0.01);
    if rng.random_bool(0.5) {
        let t = normal(rng, n, 1).column(0).into_owned();
        let gt = normal(rng, n, n);
        bc = bc.with_terminal(t, &gt * gt.transpose() * 0.1 + DMatrix::identity(n, n) * 0.05);
    }
    let priors = (0..kk)
        .map(|_| {
            let mean = DVector::from_fn(l, |_, _| StandardNormal.sample(rng));
            let var = DVector::from_fn(l, |_, _| rng.random_range(0.5..2.0));
            let mut p = StepPriors::inputs(mean, var);
            for row in 0..h {
                if rng.random_bool(0.7) {
                    let y: f64 = StandardNormal.sample(rng);
                    p = p.with_output(row, y, rng.random_range(0.1..1.0));
                }
            }
            p
        })
        .collect();
    (m, bc, priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    #[test]
    fn conjugate_scalar_case() {
        let m = Lssm::constant(1, dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap();
        let bc = BoundaryCond::free_end(DVector::zeros(1), DMatrix::zeros(1, 1));
        let p = vec![StepPriors::inputs(DVector::zeros(1), DVector::from_element(1, 1.0)).with_output(0, 1.0, 1.0)];
        let r = dense_smooth(&m, &bc, &p).unwrap();
        assert_relative_eq!(r.u_mean[0][0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(r.u_var.unwrap()[0][0], 0.5, epsilon = 1e-14);
    }
}
