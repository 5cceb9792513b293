//! Orthogonal polynomial bases evaluated by three-term recurrence.
//!
//! Five families — Chebyshev, Jacobi, Laguerre, Meixner, Krawtchouk — under
//! the standard hypergeometric normalizations, each with its spectral
//! domain mapping. Every family satisfies
//!
//! ```text
//! P_{k+1}(x) = (a_k x + b_k) P_k(x) - c_k P_{k-1}(x),    P_0 = 1
//! ```
//!
//! and the module exposes three routes through that relation:
//!
//! - scalar evaluation ([`eval_scalar`]) for response analysis and oracles,
//! - operator evaluation ([`apply_poly_stack`]) where `x` becomes a mapped
//!   Laplacian acting on a feature block, recorded on the tape so gradients
//!   reach the shape parameters through every recurrence step,
//! - coefficient inspection ([`coefficient_growth_profile`]) reporting both
//!   the normalized `(a_k, b_k, c_k)` and the raw multipliers of the
//!   family's textbook form, since growth claims depend on which one is
//!   read.
//!
//! Trainable shape parameters live in unconstrained space and are squashed
//! into their legal open interval by a smooth bounded sigmoid map
//! ([`ParamBounds`]), so gradient steps can never leave the domain.

use crate::autograd::{Tape, Var};
use crate::graph::{CsrMatrix, DomainMapping};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

/// Lower margin for open-interval constraints (`alpha > -1` becomes
/// `alpha >= -1 + EPS_MARGIN` under the smooth map).
pub const EPS_MARGIN: f64 = 1e-3;
/// Upper clamp for the unbounded shape parameters (Jacobi and Laguerre
/// alpha/beta, Meixner beta); keeps low-degree denominators conditioned.
pub const UPPER_CLAMP: f64 = 5.0;
/// Denominators closer to zero than this reject the recurrence step.
pub const DENOM_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BasisError {
    #[error("invalid {family} parameter {name} = {value}: requires {constraint}")]
    InvalidParam {
        family: &'static str,
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("recurrence denominator {denom:e} within {DENOM_TOL:e} of zero at degree {k}")]
    DegenerateRecurrence { k: usize, denom: f64 },
    #[error("krawtchouk degree {k} reaches past fixed order N = {n}")]
    KrawtchoukDegree { k: usize, n: usize },
    #[error("non-finite stack term at degree {degree}")]
    NonFiniteStack {
        degree: usize,
        /// Max-abs per completed degree, the collapse telemetry.
        telemetry: Vec<f64>,
    },
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
}

/// Family tag plus its constrained shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyParams {
    Chebyshev,
    Jacobi { alpha: f64, beta: f64 },
    Laguerre { alpha: f64 },
    Meixner { beta: f64, c: f64 },
    Krawtchouk { p: f64, n: u32 },
}

impl FamilyParams {
    pub fn family_name(&self) -> &'static str {
        match self {
            FamilyParams::Chebyshev => "chebyshev",
            FamilyParams::Jacobi { .. } => "jacobi",
            FamilyParams::Laguerre { .. } => "laguerre",
            FamilyParams::Meixner { .. } => "meixner",
            FamilyParams::Krawtchouk { .. } => "krawtchouk",
        }
    }

    /// Names of the parameters that may be trainable, in storage order.
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            FamilyParams::Chebyshev => &[],
            FamilyParams::Jacobi { .. } => &["alpha", "beta"],
            FamilyParams::Laguerre { .. } => &["alpha"],
            FamilyParams::Meixner { .. } => &["beta", "c"],
            FamilyParams::Krawtchouk { .. } => &["p"],
        }
    }

    /// Constrained values matching `param_names()`.
    pub fn param_values(&self) -> Vec<f64> {
        match *self {
            FamilyParams::Chebyshev => vec![],
            FamilyParams::Jacobi { alpha, beta } => vec![alpha, beta],
            FamilyParams::Laguerre { alpha } => vec![alpha],
            FamilyParams::Meixner { beta, c } => vec![beta, c],
            FamilyParams::Krawtchouk { p, .. } => vec![p],
        }
    }

    /// Rebuilds the params with new constrained values (same order as
    /// `param_names()`).
    pub fn with_param_values(&self, values: &[f64]) -> Self {
        match *self {
            FamilyParams::Chebyshev => FamilyParams::Chebyshev,
            FamilyParams::Jacobi { .. } => FamilyParams::Jacobi {
                alpha: values[0],
                beta: values[1],
            },
            FamilyParams::Laguerre { .. } => FamilyParams::Laguerre { alpha: values[0] },
            FamilyParams::Meixner { .. } => FamilyParams::Meixner {
                beta: values[0],
                c: values[1],
            },
            FamilyParams::Krawtchouk { n, .. } => FamilyParams::Krawtchouk { p: values[0], n },
        }
    }

    /// Legal open interval for each trainable parameter, with the margins
    /// the smooth squashing map enforces.
    pub fn param_bounds(&self, index: usize) -> ParamBounds {
        match self {
            FamilyParams::Chebyshev => unreachable!("chebyshev has no shape parameters"),
            FamilyParams::Jacobi { .. } | FamilyParams::Laguerre { .. } => ParamBounds {
                lo: -1.0 + EPS_MARGIN,
                hi: UPPER_CLAMP,
            },
            FamilyParams::Meixner { .. } => {
                if index == 0 {
                    // beta > 0
                    ParamBounds {
                        lo: EPS_MARGIN,
                        hi: UPPER_CLAMP,
                    }
                } else {
                    // c in (0, 1)
                    ParamBounds {
                        lo: EPS_MARGIN,
                        hi: 1.0 - EPS_MARGIN,
                    }
                }
            }
            FamilyParams::Krawtchouk { .. } => ParamBounds {
                lo: EPS_MARGIN,
                hi: 1.0 - EPS_MARGIN,
            },
        }
    }
}

/// Bounded reparameterization `v = lo + (hi - lo) * sigmoid(u)`.
///
/// The map is smooth everywhere, so gradients stay alive even near the
/// bounds; a hard clamp would zero them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ParamBounds {
    pub fn constrain(&self, u: f64) -> f64 {
        self.lo + (self.hi - self.lo) * stable_sigmoid(u)
    }

    pub fn unconstrain(&self, v: f64) -> f64 {
        let z = ((v - self.lo) / (self.hi - self.lo)).clamp(1e-12, 1.0 - 1e-12);
        (z / (1.0 - z)).ln()
    }

    /// Applies the map on the tape: `constant(lo) + (hi-lo) * sigmoid(u)`.
    pub fn constrain_var(&self, tape: &mut Tape, u: Var) -> Var {
        let s = tape.sigmoid(u);
        let scaled = tape.scale(s, self.hi - self.lo);
        tape.add_const(scaled, self.lo)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Which polynomial family a filter uses, with parameter values,
/// per-parameter trainability, and the spectral mapping it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub params: FamilyParams,
    /// Trainability flags matching `params.param_names()`.
    pub trainable: Vec<bool>,
    pub mapping: DomainMapping,
}

impl BasisSpec {
    pub fn chebyshev() -> Self {
        Self {
            params: FamilyParams::Chebyshev,
            trainable: vec![],
            mapping: DomainMapping::finite_shift(),
        }
    }

    pub fn jacobi(alpha: f64, beta: f64, trainable: bool) -> Self {
        Self {
            params: FamilyParams::Jacobi { alpha, beta },
            trainable: vec![trainable; 2],
            mapping: DomainMapping::finite_shift(),
        }
    }

    pub fn laguerre(alpha: f64, trainable: bool) -> Self {
        Self {
            params: FamilyParams::Laguerre { alpha },
            trainable: vec![trainable],
            mapping: DomainMapping::semi_infinite_scale(),
        }
    }

    pub fn meixner(beta: f64, c: f64, trainable: bool) -> Self {
        Self {
            params: FamilyParams::Meixner { beta, c },
            trainable: vec![trainable; 2],
            mapping: DomainMapping::semi_infinite_scale(),
        }
    }

    pub fn krawtchouk(p: f64, n: u32, trainable: bool) -> Self {
        Self {
            params: FamilyParams::Krawtchouk { p, n },
            trainable: vec![trainable],
            mapping: DomainMapping::semi_infinite_scale(),
        }
    }

    pub fn has_trainable_params(&self) -> bool {
        self.trainable.iter().any(|&t| t)
    }

    /// Checks the family's hard parameter ranges.
    pub fn validate(&self) -> Result<(), BasisError> {
        let bad = |name, value, constraint| {
            Err(BasisError::InvalidParam {
                family: self.params.family_name(),
                name,
                value,
                constraint,
            })
        };
        match self.params {
            FamilyParams::Chebyshev => {}
            FamilyParams::Jacobi { alpha, beta } => {
                if !(alpha > -1.0) || !alpha.is_finite() {
                    return bad("alpha", alpha, "alpha > -1");
                }
                if !(beta > -1.0) || !beta.is_finite() {
                    return bad("beta", beta, "beta > -1");
                }
            }
            FamilyParams::Laguerre { alpha } => {
                if !(alpha > -1.0) || !alpha.is_finite() {
                    return bad("alpha", alpha, "alpha > -1");
                }
            }
            FamilyParams::Meixner { beta, c } => {
                if !(beta > 0.0) || !beta.is_finite() {
                    return bad("beta", beta, "beta > 0");
                }
                if !(c > 0.0 && c < 1.0) {
                    return bad("c", c, "0 < c < 1");
                }
            }
            FamilyParams::Krawtchouk { p, n } => {
                if !(p > 0.0 && p < 1.0) {
                    return bad("p", p, "0 < p < 1");
                }
                if n == 0 {
                    return bad("N", 0.0, "N >= 1");
                }
            }
        }
        Ok(())
    }
}

/// Normalized step coefficients: `P_{k+1} = (a x + b) P_k - c P_{k-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrenceCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

/// Raw multipliers of the family's textbook three-term form,
/// `lead * P_{k+1} = (ax * x + b) * P_k - c * P_{k-1}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawCoeffs {
    pub lead: f64,
    pub ax: f64,
    pub b: f64,
    pub c: f64,
}

/// Degree-1 seed `P_1(x) = sx * x + s1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeedCoeffs {
    pub sx: f64,
    pub s1: f64,
}

/// Raw multipliers of the textbook form at degree `k >= 1`.
pub fn raw_coeffs(params: &FamilyParams, k: usize) -> Result<RawCoeffs, BasisError> {
    let kf = k as f64;
    match *params {
        FamilyParams::Chebyshev => Ok(RawCoeffs {
            lead: 1.0,
            ax: 2.0,
            b: 0.0,
            c: 1.0,
        }),
        FamilyParams::Jacobi { alpha, beta } => {
            let s = alpha + beta;
            let t = 2.0 * kf + s;
            let k1 = s + (kf + 1.0);
            let lead = (k1 * t) * (2.0 * (kf + 1.0));
            let tp1 = t + 1.0;
            let tp2 = t + 2.0;
            let ax = (tp1 * tp2) * t;
            let b = (tp1 * (alpha - beta)) * s;
            let c = ((alpha + kf) * (beta + kf)) * tp2 * 2.0;
            Ok(RawCoeffs { lead, ax, b, c })
        }
        FamilyParams::Laguerre { alpha } => Ok(RawCoeffs {
            lead: kf + 1.0,
            ax: -1.0,
            b: alpha + (2.0 * kf + 1.0),
            c: alpha + kf,
        }),
        FamilyParams::Meixner { beta, c } => {
            let kb = beta + kf;
            Ok(RawCoeffs {
                lead: c * kb,
                ax: c - 1.0,
                b: kb * c + kf,
                c: kf,
            })
        }
        FamilyParams::Krawtchouk { p, n } => {
            if k >= n as usize {
                return Err(BasisError::KrawtchoukDegree { k, n: n as usize });
            }
            let lead = p * (n as f64 - kf);
            let one_minus_p = p * (-1.0) + 1.0;
            let kq = one_minus_p * kf;
            Ok(RawCoeffs {
                lead,
                ax: -1.0,
                b: lead + kq,
                c: kq,
            })
        }
    }
}

/// Normalized step coefficients at degree `k >= 1`; rejects near-zero
/// denominators, which parameter clamping keeps unreachable for the
/// trainable configurations.
pub fn recurrence_coeffs(params: &FamilyParams, k: usize) -> Result<RecurrenceCoeffs, BasisError> {
    assert!(k >= 1, "three-term step is defined for k >= 1");
    let raw = raw_coeffs(params, k)?;
    if raw.lead.abs() < DENOM_TOL {
        return Err(BasisError::DegenerateRecurrence { k, denom: raw.lead });
    }
    Ok(RecurrenceCoeffs {
        a: raw.ax / raw.lead,
        b: raw.b / raw.lead,
        c: raw.c / raw.lead,
    })
}

/// Degree-1 seed coefficients.
pub fn seed_coeffs(params: &FamilyParams) -> Result<SeedCoeffs, BasisError> {
    match *params {
        FamilyParams::Chebyshev => Ok(SeedCoeffs { sx: 1.0, s1: 0.0 }),
        FamilyParams::Jacobi { alpha, beta } => Ok(SeedCoeffs {
            sx: ((alpha + beta) + 2.0) * 0.5,
            s1: (alpha - beta) * 0.5,
        }),
        FamilyParams::Laguerre { alpha } => Ok(SeedCoeffs {
            sx: -1.0,
            s1: alpha + 1.0,
        }),
        FamilyParams::Meixner { beta, c } => {
            let denom = beta * c;
            if denom.abs() < DENOM_TOL {
                return Err(BasisError::DegenerateRecurrence { k: 0, denom });
            }
            Ok(SeedCoeffs {
                sx: (c + (-1.0)) / denom,
                s1: 1.0,
            })
        }
        FamilyParams::Krawtchouk { p, n } => {
            let denom = p * n as f64;
            if denom.abs() < DENOM_TOL {
                return Err(BasisError::DegenerateRecurrence { k: 0, denom });
            }
            Ok(SeedCoeffs {
                sx: -1.0 / denom,
                s1: 1.0,
            })
        }
    }
}

/// Values `[P_0(x) .. P_{k_max}(x)]` by the recurrence; truncates at the
/// first non-finite degree and reports it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarEval {
    pub values: Vec<f64>,
    pub overflow_at: Option<usize>,
}

/// Evaluates all degrees up to `k_max` at a scalar point. Points outside
/// the mapped domain are allowed; growth profiling probes there on purpose.
pub fn eval_scalar(spec: &BasisSpec, k_max: usize, x: f64) -> Result<ScalarEval, BasisError> {
    spec.validate()?;
    let mut values = Vec::with_capacity(k_max + 1);
    values.push(1.0);
    if k_max == 0 {
        return Ok(ScalarEval {
            values,
            overflow_at: None,
        });
    }
    let seed = seed_coeffs(&spec.params)?;
    let p1 = seed.sx * x + seed.s1;
    if !p1.is_finite() {
        return Ok(ScalarEval {
            values,
            overflow_at: Some(1),
        });
    }
    values.push(p1);
    let (mut prev, mut cur) = (1.0f64, p1);
    for k in 1..k_max {
        let rc = recurrence_coeffs(&spec.params, k)?;
        let next = (rc.a * x + rc.b) * cur - rc.c * prev;
        if !next.is_finite() {
            return Ok(ScalarEval {
                values,
                overflow_at: Some(k + 1),
            });
        }
        values.push(next);
        prev = cur;
        cur = next;
    }
    Ok(ScalarEval {
        values,
        overflow_at: None,
    })
}

/// One row of the coefficient growth report.
#[derive(Debug, Clone, Copy)]
pub struct CoeffProfileRow {
    pub k: usize,
    /// Normalized |a_k|, |b_k|, |c_k|.
    pub a_abs: f64,
    pub b_abs: f64,
    pub c_abs: f64,
    /// Raw textbook-form magnitudes |lead|, |ax|, |b|, |c|.
    pub raw_lead: f64,
    pub raw_ax: f64,
    pub raw_b: f64,
    pub raw_c: f64,
}

/// Per-degree coefficient magnitudes for growth plots. Reports both the
/// normalized and the raw view; growth claims differ depending on which
/// form a reader has in mind, so both are on the table.
pub fn coefficient_growth_profile(
    spec: &BasisSpec,
    k_max: usize,
) -> Result<Vec<CoeffProfileRow>, BasisError> {
    spec.validate()?;
    let mut rows = Vec::new();
    for k in 1..=k_max {
        let raw = raw_coeffs(&spec.params, k)?;
        let norm = recurrence_coeffs(&spec.params, k)?;
        rows.push(CoeffProfileRow {
            k,
            a_abs: norm.a.abs(),
            b_abs: norm.b.abs(),
            c_abs: norm.c.abs(),
            raw_lead: raw.lead.abs(),
            raw_ax: raw.ax.abs(),
            raw_b: raw.b.abs(),
            raw_c: raw.c.abs(),
        });
    }
    Ok(rows)
}

/// Shape parameters as scalars on a tape. Trainable configurations feed
/// reparameterized leaves through here; static ones feed constants. Either
/// way the recurrence coefficients become tape values, so the same stack
/// code serves both.
#[derive(Debug, Clone)]
pub enum ShapeVars {
    Chebyshev,
    Jacobi { alpha: Var, beta: Var },
    Laguerre { alpha: Var },
    Meixner { beta: Var, c: Var },
    Krawtchouk { p: Var, n: u32 },
}

impl ShapeVars {
    /// Constants from a static spec.
    pub fn constants(tape: &mut Tape, params: &FamilyParams) -> Self {
        match *params {
            FamilyParams::Chebyshev => ShapeVars::Chebyshev,
            FamilyParams::Jacobi { alpha, beta } => ShapeVars::Jacobi {
                alpha: tape.constant(alpha),
                beta: tape.constant(beta),
            },
            FamilyParams::Laguerre { alpha } => ShapeVars::Laguerre {
                alpha: tape.constant(alpha),
            },
            FamilyParams::Meixner { beta, c } => ShapeVars::Meixner {
                beta: tape.constant(beta),
                c: tape.constant(c),
            },
            FamilyParams::Krawtchouk { p, n } => ShapeVars::Krawtchouk {
                p: tape.constant(p),
                n,
            },
        }
    }

    /// Current constrained values in `param_names()` order.
    pub fn values(&self, tape: &Tape) -> Vec<f64> {
        match self {
            ShapeVars::Chebyshev => vec![],
            ShapeVars::Jacobi { alpha, beta } => {
                vec![tape.value(*alpha).item(), tape.value(*beta).item()]
            }
            ShapeVars::Laguerre { alpha } => vec![tape.value(*alpha).item()],
            ShapeVars::Meixner { beta, c } => {
                vec![tape.value(*beta).item(), tape.value(*c).item()]
            }
            ShapeVars::Krawtchouk { p, .. } => vec![tape.value(*p).item()],
        }
    }
}

/// Tape versions of [`seed_coeffs`]: `P_1 = sx * x + s1` as scalar vars.
/// Mirrors the f64 arithmetic operation for operation so both routes agree
/// bitwise.
pub fn seed_vars(tape: &mut Tape, shape: &ShapeVars) -> Result<(Var, Var), BasisError> {
    match shape {
        ShapeVars::Chebyshev => Ok((tape.constant(1.0), tape.constant(0.0))),
        ShapeVars::Jacobi { alpha, beta } => {
            let s = tape.add(*alpha, *beta)?;
            let sp2 = tape.add_const(s, 2.0);
            let sx = tape.scale(sp2, 0.5);
            let diff = tape.sub(*alpha, *beta)?;
            let s1 = tape.scale(diff, 0.5);
            Ok((sx, s1))
        }
        ShapeVars::Laguerre { alpha } => {
            let sx = tape.constant(-1.0);
            let s1 = tape.add_const(*alpha, 1.0);
            Ok((sx, s1))
        }
        ShapeVars::Meixner { beta, c } => {
            let denom = tape.mul(*beta, *c)?;
            check_denom(tape, denom, 0)?;
            let num = tape.add_const(*c, -1.0);
            let sx = tape.div(num, denom)?;
            Ok((sx, tape.constant(1.0)))
        }
        ShapeVars::Krawtchouk { p, n } => {
            let denom = tape.scale(*p, *n as f64);
            check_denom(tape, denom, 0)?;
            let neg_one = tape.constant(-1.0);
            let sx = tape.div(neg_one, denom)?;
            Ok((sx, tape.constant(1.0)))
        }
    }
}

/// Tape versions of [`recurrence_coeffs`] at degree `k >= 1`.
pub fn coeff_vars(tape: &mut Tape, shape: &ShapeVars, k: usize) -> Result<(Var, Var, Var), BasisError> {
    assert!(k >= 1);
    let kf = k as f64;
    match shape {
        ShapeVars::Chebyshev => Ok((
            tape.constant(2.0),
            tape.constant(0.0),
            tape.constant(1.0),
        )),
        ShapeVars::Jacobi { alpha, beta } => {
            let s = tape.add(*alpha, *beta)?;
            let t = tape.add_const(s, 2.0 * kf);
            let k1 = tape.add_const(s, kf + 1.0);
            let k1t = tape.mul(k1, t)?;
            let lead = tape.scale(k1t, 2.0 * (kf + 1.0));
            check_denom(tape, lead, k)?;
            let tp1 = tape.add_const(t, 1.0);
            let tp2 = tape.add_const(t, 2.0);
            let t12 = tape.mul(tp1, tp2)?;
            let ax = tape.mul(t12, t)?;
            let a = tape.div(ax, lead)?;
            let diff = tape.sub(*alpha, *beta)?;
            let t1d = tape.mul(tp1, diff)?;
            let bn = tape.mul(t1d, s)?;
            let b = tape.div(bn, lead)?;
            let ka = tape.add_const(*alpha, kf);
            let kb = tape.add_const(*beta, kf);
            let kab = tape.mul(ka, kb)?;
            let kab2 = tape.mul(kab, tp2)?;
            let cn = tape.scale(kab2, 2.0);
            let c = tape.div(cn, lead)?;
            Ok((a, b, c))
        }
        ShapeVars::Laguerre { alpha } => {
            let lead = tape.constant(kf + 1.0);
            let neg_one = tape.constant(-1.0);
            let a = tape.div(neg_one, lead)?;
            let bn = tape.add_const(*alpha, 2.0 * kf + 1.0);
            let b = tape.div(bn, lead)?;
            let cn = tape.add_const(*alpha, kf);
            let c = tape.div(cn, lead)?;
            Ok((a, b, c))
        }
        ShapeVars::Meixner { beta, c } => {
            let kb = tape.add_const(*beta, kf);
            let lead = tape.mul(*c, kb)?;
            check_denom(tape, lead, k)?;
            let an = tape.add_const(*c, -1.0);
            let a = tape.div(an, lead)?;
            let kbc = tape.mul(kb, *c)?;
            let bn = tape.add_const(kbc, kf);
            let b = tape.div(bn, lead)?;
            let cn = tape.constant(kf);
            let ck = tape.div(cn, lead)?;
            Ok((a, b, ck))
        }
        ShapeVars::Krawtchouk { p, n } => {
            if k >= *n as usize {
                return Err(BasisError::KrawtchoukDegree { k, n: *n as usize });
            }
            let lead = tape.scale(*p, *n as f64 - kf);
            check_denom(tape, lead, k)?;
            let neg_one = tape.constant(-1.0);
            let a = tape.div(neg_one, lead)?;
            let neg_p = tape.scale(*p, -1.0);
            let omp = tape.add_const(neg_p, 1.0);
            let kq = tape.scale(omp, kf);
            let bn = tape.add(lead, kq)?;
            let b = tape.div(bn, lead)?;
            let ck = tape.div(kq, lead)?;
            Ok((a, b, ck))
        }
    }
}

fn check_denom(tape: &Tape, denom: Var, k: usize) -> Result<(), BasisError> {
    let v = tape.value(denom).item();
    if v.abs() < DENOM_TOL {
        return Err(BasisError::DegenerateRecurrence { k, denom: v });
    }
    Ok(())
}

/// Note: the raw b for Meixner is `kb * c + kf` while the f64 route computes
/// the same product-sum order; keep these in sync with `raw_coeffs`.
///
/// Polynomial stack `[P_0(L) X .. P_K(L) X]` with per-degree max-abs
/// telemetry of every term.
#[derive(Debug)]
pub struct PolyStack {
    pub terms: Vec<Var>,
    /// Max-abs of each term before any normalization; the collapse signal.
    pub max_abs: Vec<f64>,
}

/// Applies the operator polynomial stack on the tape.
///
/// `operator` must already be mapped into the family's domain. `x` is the
/// `n x f` feature block. The recurrence is
/// `H_{k+1} = a_k (L H_k) + b_k H_k - c_k H_{k-1}` with the family seed for
/// `H_1`, all recorded, so gradients reach the shape parameters.
///
/// Non-finite entries abort with the per-degree telemetry gathered so far.
pub fn apply_poly_stack(
    tape: &mut Tape,
    shape: &ShapeVars,
    operator: &Arc<CsrMatrix>,
    x: Var,
    k_max: usize,
) -> Result<PolyStack, BasisError> {
    let mut terms = Vec::with_capacity(k_max + 1);
    let mut max_abs = Vec::with_capacity(k_max + 1);
    let push_term = |tape: &Tape,
                     terms: &mut Vec<Var>,
                     max_abs: &mut Vec<f64>,
                     term: Var|
     -> Result<(), BasisError> {
        let value = tape.value(term);
        let m = value.max_abs();
        if !value.all_finite() {
            return Err(BasisError::NonFiniteStack {
                degree: terms.len(),
                telemetry: max_abs.clone(),
            });
        }
        terms.push(term);
        max_abs.push(m);
        Ok(())
    };

    push_term(tape, &mut terms, &mut max_abs, x)?;
    if k_max == 0 {
        return Ok(PolyStack { terms, max_abs });
    }

    let (sx, s1) = seed_vars(tape, shape)?;
    let lx = tape.spmm(operator, x)?;
    let sx_lx = tape.scalar_mul(sx, lx)?;
    let s1_x = tape.scalar_mul(s1, x)?;
    let h1 = tape.add(sx_lx, s1_x)?;
    push_term(tape, &mut terms, &mut max_abs, h1)?;

    for k in 1..k_max {
        let (a, b, c) = coeff_vars(tape, shape, k)?;
        let h_k = terms[k];
        let h_km1 = terms[k - 1];
        let lh = tape.spmm(operator, h_k)?;
        let a_lh = tape.scalar_mul(a, lh)?;
        let b_h = tape.scalar_mul(b, h_k)?;
        let c_h = tape.scalar_mul(c, h_km1)?;
        let sum = tape.add(a_lh, b_h)?;
        let next = tape.sub(sum, c_h)?;
        push_term(tape, &mut terms, &mut max_abs, next)?;
    }
    Ok(PolyStack { terms, max_abs })
}

/// Per-degree factor linking the Jacobi(-1/2, -1/2) and Chebyshev
/// normalizations: `T_k = ratio_k * P_k^{(-1/2,-1/2)}` with
/// `ratio_k = 4^k (k!)^2 / (2k)! = prod_{j<=k} 2j/(2j-1)`.
pub fn chebyshev_jacobi_ratio(k: usize) -> f64 {
    (1..=k).map(|j| (2 * j) as f64 / (2 * j - 1) as f64).product()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::graph::{csr_from_edge_list, sym_normalized_laplacian, apply_domain_mapping};
    use crate::oracles::{
        binomial_shifted, chebyshev_trig, jacobi_series, krawtchouk_series, laguerre_series,
        meixner_series, rel_err, sym_eigen,
    };

    #[test]
    fn chebyshev_recurrence_hits_trig_point() {
        // T_2(0.5) = cos(2 pi / 3) = -0.5
        let spec = BasisSpec::chebyshev();
        let eval = eval_scalar(&spec, 2, 0.5).unwrap();
        assert!((eval.values[2] + 0.5).abs() < 1e-15);
        assert!(eval.overflow_at.is_none());
    }

    #[test]
    fn chebyshev_matches_trig_oracle_to_degree_30() {
        let spec = BasisSpec::chebyshev();
        for i in 0..32 {
            let theta = std::f64::consts::PI * (i as f64 + 0.5) / 32.0;
            let x = theta.cos();
            let eval = eval_scalar(&spec, 30, x).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = chebyshev_trig(k, x);
                assert!(
                    (v - want).abs() < 1e-10,
                    "T_{k}({x}) = {v}, oracle {want}"
                );
            }
        }
    }

    #[test]
    fn jacobi_endpoint_identity() {
        // P_k^{(a,b)}(1) = C(k + a, k)
        for &(alpha, beta) in &[(0.0, 0.0), (-0.5, -0.5), (1.3, 0.4), (-0.9, 2.0)] {
            let spec = BasisSpec::jacobi(alpha, beta, false);
            let eval = eval_scalar(&spec, 10, 1.0).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = binomial_shifted(alpha, k);
                assert!(
                    rel_err(*v, want, 1.0) < 1e-10,
                    "P_{k}(1) = {v}, want {want} at alpha={alpha}"
                );
            }
        }
    }

    #[test]
    fn legendre_second_degree() {
        let spec = BasisSpec::jacobi(0.0, 0.0, false);
        let eval = eval_scalar(&spec, 2, 1.0).unwrap();
        assert!((eval.values[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_matches_series_on_grid() {
        for &(alpha, beta) in &[(0.7, -0.3), (-0.5, -0.5), (2.1, 1.4)] {
            let spec = BasisSpec::jacobi(alpha, beta, false);
            for i in 0..16 {
                let x = -1.0 + (2.0 * i as f64 + 1.0) / 16.0;
                let eval = eval_scalar(&spec, 10, x).unwrap();
                for (k, v) in eval.values.iter().enumerate() {
                    let want = jacobi_series(k, alpha, beta, x);
                    // The alternating series sheds ~1e-9 to cancellation near
                    // x = -1; the recurrence route is the stabler one.
                    assert!(
                        rel_err(*v, want, 1.0) < 1e-8,
                        "jacobi({alpha},{beta}) k={k} x={x}: {v} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn laguerre_at_zero_is_binomial() {
        for &alpha in &[0.0, 0.8, 2.5] {
            let spec = BasisSpec::laguerre(alpha, false);
            let eval = eval_scalar(&spec, 12, 0.0).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = binomial_shifted(alpha, k);
                assert!(rel_err(*v, want, 1.0) < 1e-12);
            }
        }
    }

    #[test]
    fn laguerre_matches_series_on_grid() {
        let spec = BasisSpec::laguerre(0.5, false);
        for i in 0..16 {
            let x = (i as f64 + 0.5) / 16.0;
            let eval = eval_scalar(&spec, 10, x).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = laguerre_series(k, 0.5, x);
                assert!(rel_err(*v, want, 1.0) < 1e-10);
            }
        }
    }

    #[test]
    fn meixner_matches_series_at_small_integers() {
        let spec = BasisSpec::meixner(1.0, 0.5, false);
        for x in 0..6 {
            let eval = eval_scalar(&spec, 6, x as f64).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = meixner_series(k, 1.0, 0.5, x as f64);
                assert!(
                    rel_err(*v, want, 1.0) < 1e-9,
                    "meixner k={k} x={x}: {v} vs {want}"
                );
            }
        }
    }

    #[test]
    fn meixner_matches_series_on_real_grid() {
        let spec = BasisSpec::meixner(1.7, 0.3, false);
        for i in 0..16 {
            let x = (i as f64 + 0.5) / 16.0;
            let eval = eval_scalar(&spec, 10, x).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = meixner_series(k, 1.7, 0.3, x);
                assert!(rel_err(*v, want, 1.0) < 1e-9);
            }
        }
    }

    #[test]
    fn krawtchouk_matches_series() {
        let spec = BasisSpec::krawtchouk(0.4, 12, false);
        for i in 0..16 {
            let x = (i as f64 + 0.5) / 16.0;
            let eval = eval_scalar(&spec, 10, x).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let want = krawtchouk_series(k, 0.4, 12, x);
                assert!(
                    rel_err(*v, want, 1.0) < 1e-9,
                    "krawtchouk k={k} x={x}: {v} vs {want}"
                );
            }
        }
    }

    #[test]
    fn krawtchouk_rejects_degrees_past_order() {
        let spec = BasisSpec::krawtchouk(0.5, 4, false);
        assert!(eval_scalar(&spec, 4, 0.3).is_ok());
        assert!(matches!(
            eval_scalar(&spec, 5, 0.3),
            Err(BasisError::KrawtchoukDegree { k: 4, n: 4 })
        ));
    }

    #[test]
    fn jacobi_half_negative_is_scaled_chebyshev() {
        let spec = BasisSpec::jacobi(-0.5, -0.5, false);
        for i in 0..16 {
            let x = -1.0 + (2.0 * i as f64 + 1.0) / 16.0;
            let eval = eval_scalar(&spec, 15, x).unwrap();
            for (k, v) in eval.values.iter().enumerate() {
                let t = chebyshev_trig(k, x);
                let got = v * chebyshev_jacobi_ratio(k);
                assert!(
                    rel_err(got, t, 1.0) < 1e-8,
                    "k={k} x={x}: scaled {got} vs T {t}"
                );
            }
        }
    }

    #[test]
    fn growth_profile_chebyshev_is_flat() {
        let rows = coefficient_growth_profile(&BasisSpec::chebyshev(), 20).unwrap();
        for row in rows {
            assert_eq!((row.a_abs, row.b_abs, row.c_abs), (2.0, 0.0, 1.0));
            assert_eq!((row.raw_lead, row.raw_ax, row.raw_c), (1.0, 2.0, 1.0));
        }
    }

    #[test]
    fn growth_profile_laguerre_raw_b_is_linear() {
        let rows = coefficient_growth_profile(&BasisSpec::laguerre(0.0, false), 20).unwrap();
        for row in &rows {
            assert_eq!(row.raw_b, 2.0 * row.k as f64 + 1.0);
        }
        // Normalized b tends to 2 from above; raw grows without bound.
        assert!(rows.last().unwrap().raw_b > 40.0);
        assert!(rows.last().unwrap().b_abs < 2.5);
    }

    #[test]
    fn growth_profile_krawtchouk_bounded_by_order() {
        let n = 30u32;
        let rows =
            coefficient_growth_profile(&BasisSpec::krawtchouk(0.5, n, false), n as usize - 1)
                .unwrap();
        let bound = n as f64;
        for row in rows {
            assert!(row.raw_lead <= bound && row.raw_b <= bound && row.raw_c <= bound);
        }
    }

    #[test]
    fn validate_rejects_out_of_range_params() {
        assert!(BasisSpec::jacobi(-1.0, 0.0, false).validate().is_err());
        assert!(BasisSpec::laguerre(-1.5, false).validate().is_err());
        assert!(BasisSpec::meixner(0.0, 0.5, false).validate().is_err());
        assert!(BasisSpec::meixner(1.0, 1.0, false).validate().is_err());
        assert!(BasisSpec::krawtchouk(0.0, 5, false).validate().is_err());
        assert!(BasisSpec::jacobi(-0.99, 3.0, false).validate().is_ok());
    }

    #[test]
    fn param_bounds_round_trip() {
        let b = ParamBounds { lo: -0.999, hi: 5.0 };
        for &v in &[-0.5, 0.0, 2.0, 4.9] {
            let u = b.unconstrain(v);
            assert!((b.constrain(u) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn coeff_vars_match_f64_route_bitwise() {
        let specs = vec![
            BasisSpec::chebyshev(),
            BasisSpec::jacobi(-0.5, -0.5, false),
            BasisSpec::jacobi(0.7, -0.2, false),
            BasisSpec::laguerre(0.3, false),
            BasisSpec::meixner(1.2, 0.4, false),
            BasisSpec::krawtchouk(0.35, 16, false),
        ];
        for spec in specs {
            let mut tape = Tape::new(0);
            let shape = ShapeVars::constants(&mut tape, &spec.params);
            let seed_f = seed_coeffs(&spec.params).unwrap();
            let (sx, s1) = seed_vars(&mut tape, &shape).unwrap();
            assert_eq!(tape.value(sx).item(), seed_f.sx, "{}", spec.params.family_name());
            assert_eq!(tape.value(s1).item(), seed_f.s1);
            for k in 1..10 {
                let rc = recurrence_coeffs(&spec.params, k).unwrap();
                let (a, b, c) = coeff_vars(&mut tape, &shape, k).unwrap();
                assert_eq!(tape.value(a).item(), rc.a, "a k={k}");
                assert_eq!(tape.value(b).item(), rc.b, "b k={k}");
                assert_eq!(tape.value(c).item(), rc.c, "c k={k}");
            }
        }
    }

    /// Operator stack against the dense eigendecomposition oracle.
    #[test]
    fn stack_matches_eigen_oracle_on_path_graph() {
        let a = csr_from_edge_list(&[(0, 1), (1, 2), (2, 3)], 4, false).unwrap();
        let l = sym_normalized_laplacian(&a).unwrap();
        for spec in [
            BasisSpec::chebyshev(),
            BasisSpec::jacobi(0.3, -0.4, false),
            BasisSpec::laguerre(0.0, false),
            BasisSpec::meixner(1.0, 0.5, false),
            BasisSpec::krawtchouk(0.5, 12, false),
        ] {
            let mapped = Arc::new(apply_domain_mapping(&l, &spec.mapping));
            let n = 4;
            let f = 2;
            let x: Vec<f64> = (0..n * f).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect();

            let mut tape = Tape::new(0);
            let shape = ShapeVars::constants(&mut tape, &spec.params);
            let xv = tape.leaf(Tensor::matrix(n, f, x.clone()), false);
            let stack = apply_poly_stack(&mut tape, &shape, &mapped, xv, 8).unwrap();

            // Oracle: U diag(P_k(lambda)) U^T X via the scalar recurrence on
            // the mapped eigenvalues.
            let (eig, u) = sym_eigen(n, &mapped.to_dense());
            // Project X onto the eigenbasis: coeffs = U^T X.
            let mut utx = vec![0.0; n * f];
            for e in 0..n {
                for j in 0..f {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += u[i * n + e] * x[i * f + j];
                    }
                    utx[e * f + j] = s;
                }
            }
            for (k, term) in stack.terms.iter().enumerate() {
                let got = tape.value(*term).data();
                for i in 0..n {
                    for j in 0..f {
                        let mut want = 0.0;
                        for e in 0..n {
                            let pk = eval_scalar(&spec, k, eig[e]).unwrap().values[k];
                            want += u[i * n + e] * pk * utx[e * f + j];
                        }
                        assert!(
                            (got[i * f + j] - want).abs() < 1e-8,
                            "{} k={k} entry ({i},{j}): {} vs {want}",
                            spec.params.family_name(),
                            got[i * f + j]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn stack_k0_is_input() {
        let a = csr_from_edge_list(&[(0, 1)], 2, false).unwrap();
        let l = Arc::new(sym_normalized_laplacian(&a).unwrap());
        let mut tape = Tape::new(0);
        let shape = ShapeVars::Chebyshev;
        let x = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]), false);
        let stack = apply_poly_stack(&mut tape, &shape, &l, x, 0).unwrap();
        assert_eq!(stack.terms.len(), 1);
        assert_eq!(tape.value(stack.terms[0]).data(), &[1.0, 2.0]);
    }

    #[test]
    fn stack_chebyshev_triangle_one_hot() {
        // H_1 = (L - I) e0 under the finite shift of the triangle Laplacian:
        // diagonal drops to 0, so H_1 = [0, -0.5, -0.5].
        let a = csr_from_edge_list(&[(0, 1), (1, 2), (2, 0)], 3, false).unwrap();
        let l = sym_normalized_laplacian(&a).unwrap();
        let mapped = Arc::new(apply_domain_mapping(&l, &DomainMapping::finite_shift()));
        let mut tape = Tape::new(0);
        let x = tape.leaf(Tensor::matrix(3, 1, vec![1.0, 0.0, 0.0]), false);
        let stack = apply_poly_stack(&mut tape, &ShapeVars::Chebyshev, &mapped, x, 1).unwrap();
        let h1 = tape.value(stack.terms[1]).data();
        assert!((h1[0]).abs() < 1e-15);
        assert!((h1[1] + 0.5).abs() < 1e-15);
        assert!((h1[2] + 0.5).abs() < 1e-15);
    }

    /// Gradient of the stack with respect to alpha against central
    /// differences, through K recurrence steps.
    #[test]
    fn stack_alpha_gradient_matches_finite_differences() {
        let a = csr_from_edge_list(&[(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)], 4, false).unwrap();
        let l = sym_normalized_laplacian(&a).unwrap();
        for k_max in [2usize, 5, 10] {
            for family in ["jacobi", "laguerre"] {
                let mapping = if family == "jacobi" {
                    DomainMapping::finite_shift()
                } else {
                    DomainMapping::semi_infinite_scale()
                };
                let mapped = Arc::new(apply_domain_mapping(&l, &mapping));
                let x0: Vec<f64> = (0..8).map(|i| 0.25 * (i as f64) - 0.8).collect();

                let loss_at = |alpha: f64| -> f64 {
                    let mut tape = Tape::new(0);
                    let shape = match family {
                        "jacobi" => ShapeVars::Jacobi {
                            alpha: tape.leaf(Tensor::scalar(alpha), false),
                            beta: tape.constant(-0.2),
                        },
                        _ => ShapeVars::Laguerre {
                            alpha: tape.leaf(Tensor::scalar(alpha), false),
                        },
                    };
                    let x = tape.leaf(Tensor::matrix(4, 2, x0.clone()), false);
                    let stack = apply_poly_stack(&mut tape, &shape, &mapped, x, k_max).unwrap();
                    let top = *stack.terms.last().unwrap();
                    let s = tape.sum(top);
                    tape.value(s).item()
                };

                let mut tape = Tape::new(0);
                let alpha_leaf = tape.leaf(Tensor::scalar(0.3), true);
                let shape = match family {
                    "jacobi" => ShapeVars::Jacobi {
                        alpha: alpha_leaf,
                        beta: tape.constant(-0.2),
                    },
                    _ => ShapeVars::Laguerre { alpha: alpha_leaf },
                };
                let x = tape.leaf(Tensor::matrix(4, 2, x0.clone()), false);
                let stack = apply_poly_stack(&mut tape, &shape, &mapped, x, k_max).unwrap();
                let top = *stack.terms.last().unwrap();
                let s = tape.sum(top);
                tape.backward(s).unwrap();
                let got = tape.grad(alpha_leaf).unwrap()[0];

                let h = 1e-5;
                let fd = (loss_at(0.3 + h) - loss_at(0.3 - h)) / (2.0 * h);
                assert!(
                    rel_err(got, fd, 1e-6) < 1e-4,
                    "{family} K={k_max}: ad {got} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn scalar_overflow_is_marked_not_fatal() {
        // Far outside the domain the Jacobi values blow past f64 range.
        let spec = BasisSpec::jacobi(4.0, 4.0, false);
        let eval = eval_scalar(&spec, 3000, 1e12).unwrap();
        assert!(eval.overflow_at.is_some());
        let last = *eval.values.last().unwrap();
        assert!(last.is_finite());
    }
}
