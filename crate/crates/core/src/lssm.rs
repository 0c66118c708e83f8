//! Affine time-varying state-space models
//!
//! ```text
//! x_k = A_k x_{k-1} + B_k u_k + c_k
//! y_k = C_k x_k + d_k
//! ```
//!
//! for `k = 1..=K`, stored zero-based (`a[0]` is `A_1`). Also holds the
//! boundary conditions, the prior attachments on scalar input/output
//! components, model augmentations, and Euler linearization of nonlinear
//! stages.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::{MLevelExpansion, NuvSpec, PriorParams};

/// Variance used for "known" quantities (pinned states, fixed-zero inputs).
pub const TINY_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Lssm {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub state_offset: Vec<DVector<f64>>,
    pub output_offset: Vec<DVector<f64>>,
}

impl Lssm {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        state_offset: Vec<DVector<f64>>,
        output_offset: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let m = Lssm { a, b, c, state_offset, output_offset };
        m.validate()?;
        Ok(m)
    }

    /// Time-invariant model without offsets.
    pub fn constant(horizon: usize, a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        let (n, h) = (a.nrows(), c.nrows());
        Lssm::new(
            vec![a; horizon],
            vec![b; horizon],
            vec![c; horizon],
            vec![DVector::zeros(n); horizon],
            vec![DVector::zeros(h); horizon],
        )
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c[0].nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.a.len();
        if k == 0 {
            return Err(Error::contract("model horizon must be at least 1"));
        }
        if [self.b.len(), self.c.len(), self.state_offset.len(), self.output_offset.len()]
            .iter()
            .any(|&len| len != k)
        {
            return Err(Error::contract("per-step sequences must all have length K"));
        }
        let n = self.a[0].nrows();
        let l = self.b[0].ncols();
        let h = self.c[0].nrows();
        if n == 0 || l == 0 || h == 0 {
            return Err(Error::contract("model dimensions must be positive"));
        }
        for i in 0..k {
            if self.a[i].shape() != (n, n)
                || self.b[i].shape() != (n, l)
                || self.c[i].shape() != (h, n)
                || self.state_offset[i].len() != n
                || self.output_offset[i].len() != h
            {
                return Err(Error::contract(format!("inconsistent matrix shapes at step {}", i + 1)));
            }
        }
        Ok(())
    }

    /// Runs the model forward from `x0` with inputs `u[k]` (length L each).
    /// Returns `(states, outputs)`, both of length K.
    pub fn simulate(&self, x0: &DVector<f64>, u: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let mut x = x0.clone();
        let mut xs = Vec::with_capacity(self.horizon());
        let mut ys = Vec::with_capacity(self.horizon());
        for k in 0..self.horizon() {
            x = &self.a[k] * &x + &self.b[k] * &u[k] + &self.state_offset[k];
            ys.push(&self.c[k] * &x + &self.output_offset[k]);
            xs.push(x.clone());
        }
        (xs, ys)
    }

    /// Returns a copy with the steps `start..start+len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Lssm> {
        if len == 0 || start + len > self.horizon() {
            return Err(Error::contract("window outside model horizon"));
        }
        let r = start..start + len;
        Ok(Lssm {
            a: self.a[r.clone()].to_vec(),
            b: self.b[r.clone()].to_vec(),
            c: self.c[r.clone()].to_vec(),
            state_offset: self.state_offset[r.clone()].to_vec(),
            output_offset: self.output_offset[r].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalCond {
    #[serde(with = "crate::serde_la::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::serde_la::matrix")]
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCond {
    #[serde(with = "crate::serde_la::vector")]
    pub x0_mean: DVector<f64>,
    #[serde(with = "crate::serde_la::matrix")]
    pub x0_cov: DMatrix<f64>,
    /// Backward message on the final state; `None` leaves it free.
    #[serde(default)]
    pub terminal: Option<TerminalCond>,
}

impl BoundaryCond {
    pub fn free_end(x0_mean: DVector<f64>, x0_cov: DMatrix<f64>) -> Self {
        BoundaryCond { x0_mean, x0_cov, terminal: None }
    }

    /// Known initial state.
    pub fn pinned_start(x0: DVector<f64>) -> Self {
        let n = x0.len();
        BoundaryCond::free_end(x0, DMatrix::identity(n, n) * TINY_VARIANCE)
    }

    pub fn with_terminal(mut self, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        self.terminal = Some(TerminalCond { mean, cov });
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let sym_psd = |m: &DMatrix<f64>| {
            (m - m.transpose()).amax() <= 1e-9 * (1.0 + m.amax())
                && m.clone().symmetric_eigenvalues().iter().all(|&e| e >= -1e-9 * (1.0 + m.amax()))
        };
        if self.x0_mean.len() != n || self.x0_cov.shape() != (n, n) {
            return Err(Error::contract("initial state has wrong dimension"));
        }
        if !sym_psd(&self.x0_cov) {
            return Err(Error::contract("initial covariance must be symmetric PSD"));
        }
        if let Some(t) = &self.terminal {
            if t.mean.len() != n || t.cov.shape() != (n, n) {
                return Err(Error::contract("terminal state has wrong dimension"));
            }
            if !sym_psd(&t.cov) {
                return Err(Error::contract("terminal covariance must be symmetric PSD"));
            }
        }
        Ok(())
    }
}

/// Scalar model variable a prior is attached to (zero-based indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Target {
    Input { k: usize, l: usize },
    Output { k: usize, h: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PriorKind {
    Nuv { spec: NuvSpec },
    Fixed { mean: f64, variance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorAttachment {
    pub target: Target,
    pub prior: PriorKind,
    /// Overrides the default initial parameters of a NUV prior.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PriorParams>,
}

impl PriorAttachment {
    pub fn nuv(target: Target, spec: NuvSpec) -> Self {
        PriorAttachment { target, prior: PriorKind::Nuv { spec }, init: None }
    }

    pub fn fixed(target: Target, mean: f64, variance: f64) -> Self {
        PriorAttachment { target, prior: PriorKind::Fixed { mean, variance }, init: None }
    }

    pub fn with_init(mut self, init: PriorParams) -> Self {
        self.init = Some(init);
        self
    }

    pub fn initial_params(&self) -> PriorParams {
        match (self.prior, self.init) {
            (_, Some(p)) => p,
            (PriorKind::Fixed { mean, variance }, None) => PriorParams::new(mean, variance),
            (PriorKind::Nuv { spec }, None) => spec.initial_params(),
        }
    }

    pub fn shifted(mut self, dk: isize) -> Option<Self> {
        let shift = |k: usize| usize::try_from(k as isize + dk).ok();
        self.target = match self.target {
            Target::Input { k, l } => Target::Input { k: shift(k)?, l },
            Target::Output { k, h } => Target::Output { k: shift(k)?, h },
        };
        Some(self)
    }
}

/// A model together with its boundary conditions and prior attachments.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub model: Lssm,
    pub bc: BoundaryCond,
    pub attachments: Vec<PriorAttachment>,
}

impl Problem {
    /// Checks shapes, attachment indices, uniqueness, and that every input
    /// component carries a prior (an input without one would have an
    /// improper flat prior).
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let (k_max, n, l_max, h_max) = (
            self.model.horizon(),
            self.model.state_dim(),
            self.model.input_dim(),
            self.model.output_dim(),
        );
        self.bc.validate(n)?;
        let mut seen = HashSet::new();
        for att in &self.attachments {
            match att.target {
                Target::Input { k, l } if k >= k_max || l >= l_max => {
                    return Err(Error::contract(format!("input attachment ({k}, {l}) out of range")))
                }
                Target::Output { k, h } if k >= k_max || h >= h_max => {
                    return Err(Error::contract(format!("output attachment ({k}, {h}) out of range")))
                }
                _ => {}
            }
            if !seen.insert(att.target) {
                return Err(Error::contract(format!("duplicate attachment on {:?}", att.target)));
            }
            match att.prior {
                PriorKind::Nuv { spec } => spec.validate()?,
                PriorKind::Fixed { mean, variance } => {
                    if !mean.is_finite() || !(variance > 0.0) || !variance.is_finite() {
                        return Err(Error::contract("fixed prior needs finite mean and positive variance"));
                    }
                }
            }
            if let Some(p) = att.init {
                if !p.is_finite() || !(p.fwd_variance > 0.0) {
                    return Err(Error::contract("initial prior parameters must be finite, variance positive"));
                }
            }
        }
        for k in 0..k_max {
            for l in 0..l_max {
                if !seen.contains(&Target::Input { k, l }) {
                    return Err(Error::contract(format!("input component ({k}, {l}) has no prior")));
                }
            }
        }
        Ok(())
    }
}

/// Replaces the input by its increment: the new state is `[u_{k-1}; x]`
/// with `A' = [[1, 0], [B, A]]`, `B' = [1; 0]`, `C' = [0, C]`.
///
/// Note that the original state is driven by the previous input, so the
/// augmented model reproduces the original one with the input delayed by a
/// step.
pub fn augment_derivative_input(m: &Lssm) -> Result<Lssm> {
    if m.input_dim() != 1 {
        return Err(Error::contract("augment_derivative_input requires a scalar input"));
    }
    let n = m.state_dim();
    let h = m.output_dim();
    let mut out = Lssm { a: vec![], b: vec![], c: vec![], state_offset: vec![], output_offset: vec![] };
    for k in 0..m.horizon() {
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a[(0, 0)] = 1.0;
        a.view_mut((1, 0), (n, 1)).copy_from(&m.b[k]);
        a.view_mut((1, 1), (n, n)).copy_from(&m.a[k]);
        let mut b = DMatrix::zeros(n + 1, 1);
        b[(0, 0)] = 1.0;
        let mut c = DMatrix::zeros(h, n + 1);
        c.view_mut((0, 1), (h, n)).copy_from(&m.c[k]);
        let mut so = DVector::zeros(n + 1);
        so.rows_mut(1, n).copy_from(&m.state_offset[k]);
        out.a.push(a);
        out.b.push(b);
        out.c.push(c);
        out.state_offset.push(so);
        out.output_offset.push(m.output_offset[k].clone());
    }
    Ok(out)
}

/// Lifts a boundary condition to the derivative-augmented state `[u; x]`.
pub fn augment_derivative_bc(bc: &BoundaryCond, u0_mean: f64, u0_var: f64) -> BoundaryCond {
    let lift = |mean: &DVector<f64>, cov: &DMatrix<f64>, um: f64, uv: f64| {
        let n = mean.len();
        let mut m = DVector::zeros(n + 1);
        m[0] = um;
        m.rows_mut(1, n).copy_from(mean);
        let mut v = DMatrix::zeros(n + 1, n + 1);
        v[(0, 0)] = uv;
        v.view_mut((1, 1), (n, n)).copy_from(cov);
        (m, v)
    };
    let (m0, v0) = lift(&bc.x0_mean, &bc.x0_cov, u0_mean, u0_var);
    BoundaryCond {
        x0_mean: m0,
        x0_cov: v0,
        terminal: bc.terminal.as_ref().map(|t| {
            // the final input is left free
            let (mean, cov) = lift(&t.mean, &t.cov, 0.0, 1e12);
            TerminalCond { mean, cov }
        }),
    }
}

/// Adds an auxiliary selector `S_k` that enters only a new output row
/// `y~_k = C_k[row] x_k + d_k[row] + S_k`.
///
/// The selector is realized as an extra state component with a zero row in
/// `A` and its own input column. Returns the augmented model (one more
/// state, input, and output) and attachments for every selector input:
/// binarizing over `{0, d_k}` at the listed steps and fixed at zero
/// elsewhere or where `d_k = 0`.
pub fn augment_output_selector(
    m: &Lssm,
    row: usize,
    slits: &[(usize, f64)],
) -> Result<(Lssm, Vec<PriorAttachment>)> {
    let (kk, n, l, h) = (m.horizon(), m.state_dim(), m.input_dim(), m.output_dim());
    if row >= h {
        return Err(Error::contract("selector output row out of range"));
    }
    let mut d = vec![0.0; kk];
    for &(k, dk) in slits {
        if k >= kk {
            return Err(Error::contract(format!("selector index {k} beyond horizon {kk}")));
        }
        if !dk.is_finite() {
            return Err(Error::contract("selector separation must be finite"));
        }
        d[k] = dk;
    }
    let mut out = Lssm { a: vec![], b: vec![], c: vec![], state_offset: vec![], output_offset: vec![] };
    for k in 0..kk {
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(&m.a[k]);
        let mut b = DMatrix::zeros(n + 1, l + 1);
        b.view_mut((0, 0), (n, l)).copy_from(&m.b[k]);
        b[(n, l)] = 1.0;
        let mut c = DMatrix::zeros(h + 1, n + 1);
        c.view_mut((0, 0), (h, n)).copy_from(&m.c[k]);
        c.view_mut((h, 0), (1, n)).copy_from(&m.c[k].row(row));
        c[(h, n)] = 1.0;
        let so = m.state_offset[k].clone().insert_row(n, 0.0);
        let oo = m.output_offset[k].clone().insert_row(h, m.output_offset[k][row]);
        out.a.push(a);
        out.b.push(b);
        out.c.push(c);
        out.state_offset.push(so);
        out.output_offset.push(oo);
    }
    let atts = (0..kk)
        .map(|k| {
            let target = Target::Input { k, l };
            if d[k] != 0.0 {
                let (lo, hi) = if d[k] > 0.0 { (0.0, d[k]) } else { (d[k], 0.0) };
                PriorAttachment::nuv(target, NuvSpec::binarizing_em(lo, hi))
            } else {
                PriorAttachment::fixed(target, 0.0, TINY_VARIANCE)
            }
        })
        .collect();
    Ok((out, atts))
}

/// Extends a boundary condition by one trailing component (for the selector
/// state).
pub fn append_state_bc(bc: &BoundaryCond, mean: f64, var: f64) -> BoundaryCond {
    let grow = |m: &DVector<f64>, v: &DMatrix<f64>, var: f64| {
        let n = m.len();
        let mm = m.clone().insert_row(n, mean);
        let mut vv = DMatrix::zeros(n + 1, n + 1);
        vv.view_mut((0, 0), (n, n)).copy_from(v);
        vv[(n, n)] = var;
        (mm, vv)
    };
    let (m0, v0) = grow(&bc.x0_mean, &bc.x0_cov, var);
    BoundaryCond {
        x0_mean: m0,
        x0_cov: v0,
        terminal: bc.terminal.as_ref().map(|t| {
            let (mean, cov) = grow(&t.mean, &t.cov, 1e12);
            TerminalCond { mean, cov }
        }),
    }
}

/// The two output intervals admitted by a selector box: `y + s` in `[a, b]`
/// with `s in {0, d}`.
pub fn selector_feasible_bands(a: f64, b: f64, d: f64) -> [(f64, f64); 2] {
    [(a, b), (a - d, b - d)]
}

/// Replaces input column `l` by the binary variables of an M-level
/// expansion: `u = offset + sum_j coeffs[j] s_j`. The new binary columns are
/// appended after the remaining original columns.
pub fn expand_input_levels(m: &Lssm, l: usize, exp: &MLevelExpansion) -> Result<Lssm> {
    let (n, l_old) = (m.state_dim(), m.input_dim());
    if l >= l_old {
        return Err(Error::contract("input column out of range"));
    }
    let j = exp.num_binaries();
    let mut out = m.clone();
    for k in 0..m.horizon() {
        let col = m.b[k].column(l).clone_owned();
        let mut b = DMatrix::zeros(n, l_old - 1 + j);
        let mut dst = 0;
        for src in (0..l_old).filter(|&s| s != l) {
            b.set_column(dst, &m.b[k].column(src));
            dst += 1;
        }
        for (i, beta) in exp.coeffs.iter().enumerate() {
            b.set_column(dst + i, &(&col * *beta));
        }
        out.b[k] = b;
        out.state_offset[k] += &col * exp.offset;
    }
    Ok(out)
}

/// Nonlinear continuous-time dynamics `dx/dt = f(x, u)` with output
/// `y = f_o(x)`, discretized with the Euler method at linearization time.
///
/// Jacobians default to central finite differences with step
/// `1e-6 (1 + |x_i|)`.
pub trait NonlinearStage {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn output(&self, k: usize, x: &DVector<f64>) -> DVector<f64>;

    /// `(df/dx, df/du)`.
    fn dynamics_jacobian(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let jx = finite_difference_jacobian(|xp| self.dynamics(k, xp, u), x);
        let ju = finite_difference_jacobian(|up| self.dynamics(k, x, up), u);
        (jx, ju)
    }

    fn output_jacobian(&self, k: usize, x: &DVector<f64>) -> DMatrix<f64> {
        finite_difference_jacobian(|xp| self.output(k, xp), x)
    }
}

pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut j = DMatrix::zeros(m, x.len());
    for i in 0..x.len() {
        let h = 1e-6 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += h;
        xm[i] -= h;
        j.set_column(i, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub state_offset: DVector<f64>,
    pub output_offset: DVector<f64>,
}

/// Euler linearization of one stage around `(x_star, u_star)`:
/// `A = I + T f_x`, `B = T f_u`, `c = x* + T f(x*, u*) - A x* - B u*`,
/// `C = f_o'(x*)`, `d = f_o(x*) - C x*`.
///
/// The output part is linearized at `y_star_state` which is the state at the
/// same step (the state after the transition).
pub fn linearize_stage<S: NonlinearStage + ?Sized>(
    stage: &S,
    k: usize,
    x_prev: &DVector<f64>,
    u_star: &DVector<f64>,
    x_out: &DVector<f64>,
    step: f64,
) -> Result<AffineStep> {
    let fail = |what: String| Error::Linearization { stage: k, outer: 0, what };
    if !(step > 0.0) {
        return Err(Error::contract("linearization step must be positive"));
    }
    let n = stage.state_dim();
    let f = stage.dynamics(k, x_prev, u_star);
    let (fx, fu) = stage.dynamics_jacobian(k, x_prev, u_star);
    if !f.iter().chain(fx.iter()).chain(fu.iter()).all(|v| v.is_finite()) {
        return Err(fail("non-finite dynamics or jacobian".into()));
    }
    let a = DMatrix::identity(n, n) + fx * step;
    let b = fu * step;
    let state_offset = x_prev + &f * step - &a * x_prev - &b * u_star;

    let y = stage.output(k, x_out);
    let c = stage.output_jacobian(k, x_out);
    if !y.iter().chain(c.iter()).all(|v| v.is_finite()) {
        return Err(fail("non-finite output or output jacobian".into()));
    }
    let output_offset = y - &c * x_out;
    Ok(AffineStep { a, b, c, state_offset, output_offset })
}

/// Linearizes every stage along a trajectory. `xs[k]` is the state after
/// step `k` and `x0` the initial state.
pub fn linearize_trajectory<S: NonlinearStage + ?Sized>(
    stage: &S,
    x0: &DVector<f64>,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    step: f64,
) -> Result<Lssm> {
    let kk = xs.len();
    if us.len() != kk || kk == 0 {
        return Err(Error::contract("trajectory lengths must match and be positive"));
    }
    let mut out = Lssm { a: vec![], b: vec![], c: vec![], state_offset: vec![], output_offset: vec![] };
    for k in 0..kk {
        let prev = if k == 0 { x0 } else { &xs[k - 1] };
        let s = linearize_stage(stage, k, prev, &us[k], &xs[k], step)?;
        out.a.push(s.a);
        out.b.push(s.b);
        out.c.push(s.c);
        out.state_offset.push(s.state_offset);
        out.output_offset.push(s.output_offset);
    }
    out.validate()?;
    Ok(out)
}

/// Forward Euler simulation of a nonlinear stage.
pub fn euler_rollout<S: NonlinearStage + ?Sized>(
    stage: &S,
    x0: &DVector<f64>,
    us: &[DVector<f64>],
    step: f64,
) -> Vec<DVector<f64>> {
    let mut x = x0.clone();
    us.iter()
        .enumerate()
        .map(|(k, u)| {
            x = &x + stage.dynamics(k, &x, u) * step;
            x.clone()
        })
        .collect()
}

/// Per-step matrices in a model document: either one shared block or one
/// block per step, each stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSeq {
    #[serde(default)]
    pub constant: bool,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Vec<f64>>,
}

impl MatrixSeq {
    fn from_mats(mats: &[DMatrix<f64>]) -> Self {
        let (rows, cols) = mats[0].shape();
        let flat = |m: &DMatrix<f64>| m.transpose().iter().copied().collect::<Vec<_>>();
        let constant = mats.iter().all(|m| m == &mats[0]);
        let data = if constant { vec![flat(&mats[0])] } else { mats.iter().map(flat).collect() };
        MatrixSeq { constant, rows, cols, data }
    }

    fn to_mats(&self, horizon: usize, name: &str) -> Result<Vec<DMatrix<f64>>> {
        let expected = if self.constant { 1 } else { horizon };
        if self.data.len() != expected {
            return Err(Error::contract(format!("{name}: expected {expected} blocks, found {}", self.data.len())));
        }
        let mats = self
            .data
            .iter()
            .map(|d| {
                if d.len() != self.rows * self.cols {
                    return Err(Error::contract(format!("{name}: block has wrong number of entries")));
                }
                Ok(DMatrix::from_row_slice(self.rows, self.cols, d))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(if self.constant { vec![mats[0].clone(); horizon] } else { mats })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub horizon: usize,
    pub n: usize,
    pub l: usize,
    pub h: usize,
}

/// JSON interchange format for a [`Problem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub dims: ModelDims,
    pub a: MatrixSeq,
    pub b: MatrixSeq,
    pub c: MatrixSeq,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_offset: Option<MatrixSeq>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_offset: Option<MatrixSeq>,
    pub boundary: BoundaryCond,
    pub attachments: Vec<PriorAttachment>,
}

impl ModelDocument {
    pub fn from_problem(p: &Problem) -> Self {
        let m = &p.model;
        let vec_seq = |v: &[DVector<f64>]| {
            let mats: Vec<DMatrix<f64>> = v.iter().map(|x| DMatrix::from_column_slice(x.len(), 1, x.as_slice())).collect();
            MatrixSeq::from_mats(&mats)
        };
        ModelDocument {
            dims: ModelDims {
                horizon: m.horizon(),
                n: m.state_dim(),
                l: m.input_dim(),
                h: m.output_dim(),
            },
            a: MatrixSeq::from_mats(&m.a),
            b: MatrixSeq::from_mats(&m.b),
            c: MatrixSeq::from_mats(&m.c),
            state_offset: Some(vec_seq(&m.state_offset)),
            output_offset: Some(vec_seq(&m.output_offset)),
            boundary: p.bc.clone(),
            attachments: p.attachments.clone(),
        }
    }

    pub fn into_problem(self) -> Result<Problem> {
        let d = &self.dims;
        let k = d.horizon;
        let a = self.a.to_mats(k, "a")?;
        let b = self.b.to_mats(k, "b")?;
        let c = self.c.to_mats(k, "c")?;
        let vecs = |seq: &Option<MatrixSeq>, len: usize, name: &str| -> Result<Vec<DVector<f64>>> {
            match seq {
                None => Ok(vec![DVector::zeros(len); k]),
                Some(s) => Ok(s.to_mats(k, name)?.into_iter().map(|m| DVector::from_column_slice(m.as_slice())).collect()),
            }
        };
        let so = vecs(&self.state_offset, d.n, "state_offset")?;
        let oo = vecs(&self.output_offset, d.h, "output_offset")?;
        let model = Lssm::new(a, b, c, so, oo)?;
        if (model.state_dim(), model.input_dim(), model.output_dim()) != (d.n, d.l, d.h) {
            return Err(Error::contract("dims do not match matrix shapes"));
        }
        let p = Problem { model, bc: self.boundary, attachments: self.attachments };
        p.validate()?;
        Ok(p)
    }

    pub fn from_json(s: &str) -> Result<Problem> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        doc.into_problem()
    }

    pub fn to_json(p: &Problem) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from_problem(p))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn scalar_model(k: usize) -> Lssm {
        Lssm::constant(k, dmatrix![1.0], dmatrix![1.0], dmatrix![1.0]).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        let r = Lssm::new(
            vec![DMatrix::identity(2, 2)],
            vec![DMatrix::zeros(3, 1)],
            vec![DMatrix::zeros(1, 2)],
            vec![DVector::zeros(2)],
            vec![DVector::zeros(1)],
        );
        assert!(r.is_err());
        assert!(Lssm::new(vec![], vec![], vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn derivative_augmentation_scalar() {
        let m = augment_derivative_input(&scalar_model(3)).unwrap();
        assert_eq!(m.a[0], dmatrix![1.0, 0.0; 1.0, 1.0]);
        assert_eq!(m.b[0], dmatrix![1.0; 0.0]);
        assert_eq!(m.c[0], dmatrix![0.0, 1.0]);
        let twice = augment_derivative_input(&m).unwrap();
        assert_eq!(twice.state_dim(), 3);
        assert_eq!(twice.input_dim(), 1);
        let two_in = Lssm::constant(2, dmatrix![1.0], dmatrix![1.0, 1.0], dmatrix![1.0]).unwrap();
        assert!(augment_derivative_input(&two_in).is_err());
    }

    #[test]
    fn selector_bands() {
        let bands = selector_feasible_bands(1.0, 1.5, 2.0);
        assert_eq!(bands, [(1.0, 1.5), (-1.0, -0.5)]);
    }

    #[test]
    fn selector_augmentation_shapes() {
        let m = scalar_model(20);
        let (aug, atts) = augment_output_selector(&m, 0, &[(3, 2.0), (10, 2.0), (15, 0.0)]).unwrap();
        assert_eq!((aug.state_dim(), aug.input_dim(), aug.output_dim()), (2, 2, 2));
        let binaries = atts
            .iter()
            .filter(|a| matches!(a.prior, PriorKind::Nuv { .. }))
            .count();
        assert_eq!(binaries, 2);
        assert!(augment_output_selector(&m, 0, &[(20, 1.0)]).is_err());
        // the selector only shows up in the new output row
        let x0 = DVector::zeros(2);
        let u: Vec<_> = (0..20).map(|_| DVector::from_vec(vec![0.1, 2.0])).collect();
        let (_, ys) = aug.simulate(&x0, &u);
        let (_, y_orig) = m.simulate(&DVector::zeros(1), &u.iter().map(|v| DVector::from_element(1, v[0])).collect::<Vec<_>>());
        for k in 0..20 {
            assert_relative_eq!(ys[k][0], y_orig[k][0], epsilon = 1e-12);
            assert_relative_eq!(ys[k][1], y_orig[k][0] + 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn level_expansion_reproduces_input() {
        let m = scalar_model(4);
        let exp = crate::priors::expand_m_level(&[-1.0, 0.0, 1.0], true).unwrap();
        let em = expand_input_levels(&m, 0, &exp).unwrap();
        assert_eq!(em.input_dim(), 2);
        let bits = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let u_bits: Vec<_> = bits.iter().map(|b| DVector::from_row_slice(b)).collect();
        let u: Vec<_> = bits.iter().map(|b| DVector::from_element(1, exp.combine(b))).collect();
        let (_, y1) = em.simulate(&DVector::zeros(1), &u_bits);
        let (_, y2) = m.simulate(&DVector::zeros(1), &u);
        for k in 0..4 {
            assert_relative_eq!(y1[k][0], y2[k][0], epsilon = 1e-12);
        }
    }

    struct Linear;
    impl NonlinearStage for Linear {
        fn state_dim(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn dynamics(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[1] + 3.0, -0.5 * x[0] + 2.0 * u[0]])
        }
        fn output(&self, _k: usize, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, x[0] - x[1] + 1.0)
        }
    }

    #[test]
    fn linearizing_affine_stage_is_exact() {
        let x = DVector::from_vec(vec![0.3, -1.0]);
        let u = DVector::from_element(1, 0.7);
        let s = linearize_stage(&Linear, 0, &x, &u, &x, 0.1).unwrap();
        assert_relative_eq!(s.a, dmatrix![1.0, 0.1; -0.05, 1.0], epsilon = 1e-8);
        let x2 = DVector::from_vec(vec![5.0, 2.0]);
        let u2 = DVector::from_element(1, -3.0);
        let next = &s.a * &x2 + &s.b * &u2 + &s.state_offset;
        let exact = &x2 + Linear.dynamics(0, &x2, &u2) * 0.1;
        assert_relative_eq!(next, exact, epsilon = 1e-8);
        assert!(linearize_stage(&Linear, 0, &x, &u, &x, 0.0).is_err());
    }

    #[test]
    fn document_round_trip() {
        let model = scalar_model(3);
        let p = Problem {
            model,
            bc: BoundaryCond::pinned_start(DVector::zeros(1)),
            attachments: (0..3)
                .map(|k| PriorAttachment::fixed(Target::Input { k, l: 0 }, 0.0, 1.0))
                .chain([PriorAttachment::nuv(Target::Output { k: 2, h: 0 }, NuvSpec::box_prior(0.0, 1.0, 2.0))])
                .collect(),
        };
        let json = ModelDocument::to_json(&p).unwrap();
        assert!(json.contains("\"constant\": true"));
        let back = ModelDocument::from_json(&json).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn problem_requires_input_priors() {
        let p = Problem {
            model: scalar_model(2),
            bc: BoundaryCond::pinned_start(DVector::zeros(1)),
            attachments: vec![PriorAttachment::fixed(Target::Input { k: 0, l: 0 }, 0.0, 1.0)],
        };
        assert!(matches!(p.validate(), Err(Error::Contract(_))));
    }
}
