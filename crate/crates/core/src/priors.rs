//! Closed-form NUV parameter updates.
//!
//! Every prior is described by a [`NuvSpec`] attached to one scalar model
//! variable `X`. Given the current posterior statistics of `X` (mean `m_X`,
//! variance `V_X`), the update rules return the forward Gaussian message
//! `N(x; m_fwd, V_fwd)` that stands in for the prior during the next
//! smoothing pass. All functions here are pure.
//!
//! The rules are singular where `m_X` hits a level or bound (a division by
//! `|m_X - a|` or by a vanishing variance). Those denominators are clamped
//! below by [`NuvSpec::eps`], so every returned variance is positive and
//! finite and a converged variable sits at a near-degenerate prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative perturbation between the initial variances of consecutive
/// binary variables in an M-level expansion.
pub const SYMMETRY_BREAKING: f64 = 1e-3;

/// Base of the denominator clamp, scaled by `max(1, |a|, |b|)`.
pub const EPS_BASE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NuvKind {
    L1,
    Lp,
    SmoothedL1Huber,
    PlainNuv,
    SmoothedPlainNuv,
    /// `x >= a`
    HalfSpaceLower,
    /// `x <= a`
    HalfSpaceUpper,
    /// `a <= x <= b`
    Box,
    /// `x in {a, b}`, variances by joint MAP (alternating maximization).
    BinarizingAM,
    /// `x in {a, b}`, variances by type-II MAP (expectation maximization).
    BinarizingEM,
}

fn default_p() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Declarative description of a prior on one scalar variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuvSpec {
    pub kind: NuvKind,
    /// Slope parameter of the L1-type cost terms.
    #[serde(default)]
    pub gamma: f64,
    /// Exponent of the Lp prior.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Variance floor of the smoothed priors.
    #[serde(default)]
    pub r2: f64,
    /// Lower level or bound (the bound itself for half-space priors).
    #[serde(default)]
    pub a: f64,
    /// Upper level or bound.
    #[serde(default)]
    pub b: f64,
    /// Selects `max{r2, V_X + m_X^2}` over `max{r2, m_X^2}` for the smoothed
    /// plain NUV.
    #[serde(default = "default_true")]
    pub use_posterior_variance: bool,
}

impl NuvSpec {
    fn with_kind(kind: NuvKind) -> Self {
        NuvSpec {
            kind,
            gamma: 0.0,
            p: 1.0,
            r2: 0.0,
            a: 0.0,
            b: 0.0,
            use_posterior_variance: true,
        }
    }

    pub fn l1(gamma: f64) -> Self {
        NuvSpec { gamma, ..Self::with_kind(NuvKind::L1) }
    }

    pub fn lp(gamma: f64, p: f64) -> Self {
        NuvSpec { gamma, p, ..Self::with_kind(NuvKind::Lp) }
    }

    pub fn huber(gamma: f64, r2: f64) -> Self {
        NuvSpec { gamma, r2, ..Self::with_kind(NuvKind::SmoothedL1Huber) }
    }

    pub fn plain() -> Self {
        Self::with_kind(NuvKind::PlainNuv)
    }

    pub fn smoothed_plain(r2: f64, use_posterior_variance: bool) -> Self {
        NuvSpec {
            r2,
            use_posterior_variance,
            ..Self::with_kind(NuvKind::SmoothedPlainNuv)
        }
    }

    pub fn half_space_lower(a: f64, gamma: f64) -> Self {
        NuvSpec { a, gamma, ..Self::with_kind(NuvKind::HalfSpaceLower) }
    }

    pub fn half_space_upper(a: f64, gamma: f64) -> Self {
        NuvSpec { a, gamma, ..Self::with_kind(NuvKind::HalfSpaceUpper) }
    }

    pub fn box_prior(a: f64, b: f64, gamma: f64) -> Self {
        NuvSpec { a, b, gamma, ..Self::with_kind(NuvKind::Box) }
    }

    pub fn binarizing_am(a: f64, b: f64) -> Self {
        NuvSpec { a, b, ..Self::with_kind(NuvKind::BinarizingAM) }
    }

    pub fn binarizing_em(a: f64, b: f64) -> Self {
        NuvSpec { a, b, ..Self::with_kind(NuvKind::BinarizingEM) }
    }

    /// Clamp floor for absolute differences and variances in denominators.
    pub fn eps(&self) -> f64 {
        let scale = match self.kind {
            NuvKind::HalfSpaceLower | NuvKind::HalfSpaceUpper => self.a.abs(),
            NuvKind::Box | NuvKind::BinarizingAM | NuvKind::BinarizingEM => {
                self.a.abs().max(self.b.abs())
            }
            _ => 0.0,
        };
        EPS_BASE * scale.max(1.0)
    }

    /// Whether the update rule reads the posterior variance `V_X`.
    pub fn needs_posterior_variance(&self) -> bool {
        match self.kind {
            NuvKind::PlainNuv | NuvKind::BinarizingEM => true,
            NuvKind::SmoothedPlainNuv => self.use_posterior_variance,
            _ => false,
        }
    }

    pub fn is_basic(&self) -> bool {
        matches!(
            self.kind,
            NuvKind::L1
                | NuvKind::Lp
                | NuvKind::SmoothedL1Huber
                | NuvKind::PlainNuv
                | NuvKind::SmoothedPlainNuv
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.gamma, self.p, self.r2, self.a, self.b]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::contract(format!("{:?}: non-finite parameter", self.kind)));
        }
        let needs_gamma = matches!(
            self.kind,
            NuvKind::L1
                | NuvKind::Lp
                | NuvKind::SmoothedL1Huber
                | NuvKind::HalfSpaceLower
                | NuvKind::HalfSpaceUpper
                | NuvKind::Box
        );
        if needs_gamma && self.gamma <= 0.0 {
            return Err(Error::contract(format!(
                "{:?}: gamma must be positive, got {}",
                self.kind, self.gamma
            )));
        }
        if self.kind == NuvKind::Lp && !(self.p > 0.0 && self.p <= 2.0) {
            return Err(Error::contract(format!("Lp: p must lie in (0, 2], got {}", self.p)));
        }
        if self.r2 < 0.0 {
            return Err(Error::contract(format!("{:?}: r2 must be nonnegative", self.kind)));
        }
        let two_sided = matches!(
            self.kind,
            NuvKind::Box | NuvKind::BinarizingAM | NuvKind::BinarizingEM
        );
        if two_sided && self.a >= self.b {
            return Err(Error::contract(format!(
                "{:?}: requires a < b, got a = {}, b = {}",
                self.kind, self.a, self.b
            )));
        }
        Ok(())
    }

    /// Initial forward message for the IAKE loop: zero mean and unit
    /// variance, except binarizing priors which start at the level midpoint.
    pub fn initial_params(&self) -> PriorParams {
        match self.kind {
            NuvKind::BinarizingAM | NuvKind::BinarizingEM => {
                PriorParams::from_level_variances(self.a, self.b, 2.0, 2.0)
            }
            _ => PriorParams::new(0.0, 1.0),
        }
    }
}

/// Posterior statistics of a scalar variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    pub fn new(mean: f64, variance: f64) -> Self {
        Posterior { mean, variance }
    }

    /// Point estimate without variance, as used by the AM-type rules.
    pub fn point(mean: f64) -> Self {
        Posterior { mean, variance: 0.0 }
    }
}

/// Forward Gaussian message parameters `(m_fwd, V_fwd)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub fwd_mean: f64,
    pub fwd_variance: f64,
}

impl PriorParams {
    pub fn new(fwd_mean: f64, fwd_variance: f64) -> Self {
        PriorParams { fwd_mean, fwd_variance }
    }

    /// Product `N(x; a, var_a) N(x; b, var_b)` written as a single Gaussian in `x`.
    pub fn from_level_variances(a: f64, b: f64, var_a: f64, var_b: f64) -> Self {
        let wa = 1.0 / var_a;
        let wb = 1.0 / var_b;
        let v = 1.0 / (wa + wb);
        PriorParams::new(v * (a * wa + b * wb), v)
    }

    pub fn is_finite(&self) -> bool {
        self.fwd_mean.is_finite() && self.fwd_variance.is_finite()
    }

    /// Largest absolute change in either parameter.
    pub fn max_abs_diff(&self, other: &PriorParams) -> f64 {
        (self.fwd_mean - other.fwd_mean)
            .abs()
            .max((self.fwd_variance - other.fwd_variance).abs())
    }

    /// Largest change in either parameter, relative to the parameter's
    /// magnitude once that exceeds one.
    pub fn scaled_diff(&self, other: &PriorParams) -> f64 {
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        rel(self.fwd_mean, other.fwd_mean).max(rel(self.fwd_variance, other.fwd_variance))
    }
}

/// Dispatches to the update rule matching `spec.kind`.
pub fn update(spec: &NuvSpec, post: Posterior) -> Result<PriorParams> {
    match spec.kind {
        NuvKind::L1
        | NuvKind::Lp
        | NuvKind::SmoothedL1Huber
        | NuvKind::PlainNuv
        | NuvKind::SmoothedPlainNuv => update_basic(spec, post),
        NuvKind::Box => update_box(spec, post.mean),
        NuvKind::HalfSpaceLower | NuvKind::HalfSpaceUpper => update_half_space(spec, post.mean),
        NuvKind::BinarizingAM => update_binarizing_am(spec, post.mean),
        NuvKind::BinarizingEM => update_binarizing_em(spec, post),
    }
}

/// Zero-mean basic priors: L1, Lp, Huber, plain and smoothed plain NUV.
pub fn update_basic(spec: &NuvSpec, post: Posterior) -> Result<PriorParams> {
    if !spec.is_basic() {
        return Err(Error::contract(format!("update_basic: unsupported kind {:?}", spec.kind)));
    }
    spec.validate()?;
    let eps = spec.eps();
    let m = post.mean;
    let abs_m = m.abs().max(eps);
    let second_moment = post.variance.max(0.0) + m * m;
    let v = match spec.kind {
        NuvKind::L1 => abs_m / spec.gamma,
        NuvKind::Lp => abs_m.powf(2.0 - spec.p) / (spec.gamma * spec.p),
        NuvKind::SmoothedL1Huber => spec.r2.max(abs_m / spec.gamma),
        NuvKind::PlainNuv => second_moment,
        NuvKind::SmoothedPlainNuv if spec.use_posterior_variance => spec.r2.max(second_moment),
        NuvKind::SmoothedPlainNuv => spec.r2.max(m * m),
        _ => unreachable!(),
    };
    Ok(PriorParams::new(0.0, v.max(eps)))
}

/// Box prior `a <= x <= b`.
pub fn update_box(spec: &NuvSpec, m_x: f64) -> Result<PriorParams> {
    if spec.kind != NuvKind::Box {
        return Err(Error::contract(format!("update_box: unsupported kind {:?}", spec.kind)));
    }
    spec.validate()?;
    let eps = spec.eps();
    let wa = spec.gamma / (m_x - spec.a).abs().max(eps);
    let wb = spec.gamma / (m_x - spec.b).abs().max(eps);
    let v = 1.0 / (wa + wb);
    Ok(PriorParams::new(v * (wa * spec.a + wb * spec.b), v.max(eps)))
}

/// Half-space priors `x >= a` (lower) and `x <= a` (upper).
pub fn update_half_space(spec: &NuvSpec, m_x: f64) -> Result<PriorParams> {
    let dist = (m_x - spec.a).abs();
    let mean = match spec.kind {
        NuvKind::HalfSpaceLower => spec.a + dist,
        NuvKind::HalfSpaceUpper => spec.a - dist,
        other => {
            return Err(Error::contract(format!(
                "update_half_space: unsupported kind {other:?}"
            )))
        }
    };
    spec.validate()?;
    let eps = spec.eps();
    Ok(PriorParams::new(mean, (dist.max(eps) / spec.gamma).max(eps)))
}

fn binarizing(spec: &NuvSpec, m_x: f64, v_x: f64) -> PriorParams {
    let eps = spec.eps();
    let var_a = (v_x + (m_x - spec.a).powi(2)).max(eps);
    let var_b = (v_x + (m_x - spec.b).powi(2)).max(eps);
    let p = PriorParams::from_level_variances(spec.a, spec.b, var_a, var_b);
    PriorParams::new(p.fwd_mean, p.fwd_variance.max(eps))
}

/// Binarizing prior with variances estimated by expectation maximization.
pub fn update_binarizing_em(spec: &NuvSpec, post: Posterior) -> Result<PriorParams> {
    if spec.kind != NuvKind::BinarizingEM {
        return Err(Error::contract(format!(
            "update_binarizing_em: unsupported kind {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    Ok(binarizing(spec, post.mean, post.variance.max(0.0)))
}

/// Binarizing prior with variances estimated by joint MAP.
pub fn update_binarizing_am(spec: &NuvSpec, m_x: f64) -> Result<PriorParams> {
    if spec.kind != NuvKind::BinarizingAM {
        return Err(Error::contract(format!(
            "update_binarizing_am: unsupported kind {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    Ok(binarizing(spec, m_x, 0.0))
}

/// Representation of an M-level variable as `X = offset + sum_j coeffs[j] * X_j`
/// with every `X_j` binarized to `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLevelExpansion {
    pub coeffs: Vec<f64>,
    pub offset: f64,
    pub levels: Vec<f64>,
    /// Initial `(var_a, var_b)` of each binary; pairwise slightly unequal.
    pub init_variances: Vec<(f64, f64)>,
}

impl MLevelExpansion {
    pub fn num_binaries(&self) -> usize {
        self.coeffs.len()
    }

    /// Binarizing EM prior on `{0, 1}` used for every auxiliary binary.
    pub fn binary_spec(&self) -> NuvSpec {
        NuvSpec::binarizing_em(0.0, 1.0)
    }

    /// Initial forward message of binary `j`.
    pub fn initial_params(&self, j: usize) -> PriorParams {
        let (va, vb) = self.init_variances[j];
        PriorParams::from_level_variances(0.0, 1.0, va, vb)
    }

    /// Value of `X` for the given binary values.
    pub fn combine(&self, binaries: &[f64]) -> f64 {
        self.offset
            + self
                .coeffs
                .iter()
                .zip(binaries)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }
}

/// Builds the binary expansion of `levels` (sorted ascending, at least two).
///
/// With `equal_coeffs` the levels must be equidistant and every binary gets
/// the level spacing as coefficient. Otherwise the coefficients are the
/// consecutive level increments; every level is then reachable, but for
/// non-equidistant levels so are some partial sums in between.
pub fn expand_m_level(levels: &[f64], equal_coeffs: bool) -> Result<MLevelExpansion> {
    if levels.len() < 2 {
        return Err(Error::contract("expand_m_level: need at least two levels"));
    }
    if levels.iter().any(|l| !l.is_finite()) {
        return Err(Error::contract("expand_m_level: non-finite level"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("expand_m_level: levels must be strictly increasing"));
    }
    let increments: Vec<f64> = levels.windows(2).map(|w| w[1] - w[0]).collect();
    let coeffs = if equal_coeffs {
        let spacing = increments[0];
        let span = levels[levels.len() - 1] - levels[0];
        let tol = 1e-9 * span.max(1.0);
        if increments.iter().any(|d| (d - spacing).abs() > tol) {
            return Err(Error::contract(
                "expand_m_level: equal coefficients require equidistant levels",
            ));
        }
        vec![spacing; increments.len()]
    } else {
        increments
    };
    let init_variances = (0..coeffs.len())
        .map(|j| {
            let v = 2.0 * (1.0 + j as f64 * SYMMETRY_BREAKING);
            (v, v)
        })
        .collect();
    Ok(MLevelExpansion {
        coeffs,
        offset: levels[0],
        levels: levels.to_vec(),
        init_variances,
    })
}
