//! Convex function catalog: values, proximal maps, and conjugates.
//!
//! Every entry carries its function value (extended real: `f64::INFINITY`
//! outside the domain), its proximal operator `prox(sigma, z) = argmin_x
//! 0.5*|x-z|^2 + sigma*f(x)`, and its strong-convexity constant `mu`. Closed
//! forms are unit-tested against a numerical-minimization oracle, so the
//! algebra here is not load-bearing on faith alone.

pub mod fgp;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use fgp::tv_prox_fgp;

/// Mutable state a prox may thread between calls (warm starts).
///
/// Owned by a single solver run; catalog entries themselves stay immutable.
#[derive(Clone, Debug, Default)]
pub enum ProxWarmState {
    #[default]
    Empty,
    /// Dual variables of the FGP TV prox, one per gradient direction.
    FgpDual { p: Vec<f64>, q: Vec<f64> },
}

/// A convex function with value, prox, and strong-convexity modulus.
pub trait ProxFn: Send + Sync {
    /// Extended-real function value; `INFINITY` outside the domain.
    fn value(&self, z: &[f64]) -> f64;

    /// `argmin_x 0.5*|x-z|^2 + sigma*f(x)`; never leaves the closed domain.
    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64>;

    /// Warm-started prox; entries without reusable state ignore `warm`.
    fn prox_warm(&self, sigma: f64, z: &[f64], warm: &mut ProxWarmState) -> Vec<f64> {
        let _ = warm;
        self.prox(sigma, z)
    }

    /// Strong-convexity constant (0 when merely convex).
    fn mu(&self) -> f64 {
        0.0
    }

    /// Human-readable domain description.
    fn domain(&self) -> String;
}

pub type ProxFunction = Arc<dyn ProxFn>;

/// A function together with its Fenchel conjugate.
#[derive(Clone)]
pub struct ConjugatePair {
    pub primal: ProxFunction,
    pub conjugate: ProxFunction,
}

fn require(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::invalid(msg))
    }
}

// ---------------------------------------------------------------------------
// Squared L2 data fit
// ---------------------------------------------------------------------------

struct SqL2DataFit {
    b: Vec<f64>,
    alpha: f64,
}

impl ProxFn for SqL2DataFit {
    fn value(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.b.len());
        z.iter()
            .zip(&self.b)
            .map(|(zi, bi)| (zi - bi) * (zi - bi))
            .sum::<f64>()
            / (2.0 * self.alpha)
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.b)
            .map(|(zi, bi)| (self.alpha * zi + sigma * bi) / (self.alpha + sigma))
            .collect()
    }

    fn mu(&self) -> f64 {
        1.0 / self.alpha
    }

    fn domain(&self) -> String {
        "all of R^d".into()
    }
}

struct SqL2DataFitConj {
    b: Vec<f64>,
    alpha: f64,
}

impl ProxFn for SqL2DataFitConj {
    fn value(&self, y: &[f64]) -> f64 {
        debug_assert_eq!(y.len(), self.b.len());
        y.iter()
            .zip(&self.b)
            .map(|(yi, bi)| yi * bi + self.alpha / 2.0 * yi * yi)
            .sum()
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.b)
            .map(|(zi, bi)| (zi - sigma * bi) / (1.0 + sigma * self.alpha))
            .collect()
    }

    fn mu(&self) -> f64 {
        self.alpha
    }

    fn domain(&self) -> String {
        "all of R^d".into()
    }
}

/// `1/(2 alpha) * |x - b|^2` and its conjugate `<y,b> + alpha/2 |y|^2`.
pub fn sq_l2_datafit(b: Vec<f64>, alpha: f64) -> Result<ConjugatePair> {
    require(alpha > 0.0 && alpha.is_finite(), "sq_l2_datafit: alpha > 0")?;
    require(b.iter().all(|v| v.is_finite()), "sq_l2_datafit: finite b")?;
    Ok(ConjugatePair {
        primal: Arc::new(SqL2DataFit {
            b: b.clone(),
            alpha,
        }),
        conjugate: Arc::new(SqL2DataFitConj { b, alpha }),
    })
}

// ---------------------------------------------------------------------------
// L1 norm
// ---------------------------------------------------------------------------

struct L1Norm {
    alpha: f64,
}

impl ProxFn for L1Norm {
    fn value(&self, z: &[f64]) -> f64 {
        self.alpha * z.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        let t = self.alpha * sigma;
        z.iter()
            .map(|&v| {
                if v > t {
                    v - t
                } else if v < -t {
                    v + t
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn domain(&self) -> String {
        "all of R^d".into()
    }
}

struct LinfBall {
    alpha: f64,
}

impl ProxFn for LinfBall {
    fn value(&self, z: &[f64]) -> f64 {
        if z.iter().all(|v| v.abs() <= self.alpha) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    fn prox(&self, _sigma: f64, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v.clamp(-self.alpha, self.alpha)).collect()
    }

    fn domain(&self) -> String {
        format!("max-norm ball of radius {}", self.alpha)
    }
}

/// `alpha * |x|_1` and its conjugate, the indicator of `[-alpha, alpha]^d`.
pub fn l1_norm(alpha: f64) -> Result<ConjugatePair> {
    require(alpha > 0.0 && alpha.is_finite(), "l1_norm: alpha > 0")?;
    Ok(ConjugatePair {
        primal: Arc::new(L1Norm { alpha }),
        conjugate: Arc::new(LinfBall { alpha }),
    })
}

// ---------------------------------------------------------------------------
// Box indicator
// ---------------------------------------------------------------------------

struct BoxIndicator {
    lo: f64,
    hi: f64,
}

impl ProxFn for BoxIndicator {
    fn value(&self, z: &[f64]) -> f64 {
        if z.iter().all(|&v| v >= self.lo && v <= self.hi) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    fn prox(&self, _sigma: f64, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v.clamp(self.lo, self.hi)).collect()
    }

    fn domain(&self) -> String {
        format!("box [{}, {}]^d", self.lo, self.hi)
    }
}

/// Indicator of the box `[lo, hi]^d`; prox is the componentwise clamp.
pub fn box_indicator(lo: f64, hi: f64) -> Result<ProxFunction> {
    require(lo < hi, "box_indicator: lo < hi")?;
    require(!lo.is_nan() && !hi.is_nan(), "box_indicator: NaN bound")?;
    Ok(Arc::new(BoxIndicator { lo, hi }))
}

/// The zero function; prox is the identity.
pub fn zero() -> ProxFunction {
    struct ZeroFn;
    impl ProxFn for ZeroFn {
        fn value(&self, _z: &[f64]) -> f64 {
            0.0
        }
        fn prox(&self, _sigma: f64, z: &[f64]) -> Vec<f64> {
            z.to_vec()
        }
        fn domain(&self) -> String {
            "all of R^d".into()
        }
    }
    Arc::new(ZeroFn)
}

// ---------------------------------------------------------------------------
// Poisson (KL) data terms
// ---------------------------------------------------------------------------

fn validate_counts(b: &[f64], r: &[f64], strict: bool, what: &str) -> Result<()> {
    require(b.len() == r.len(), &format!("{what}: b and r same length"))?;
    require(!b.is_empty(), &format!("{what}: nonempty data"))?;
    let ok = |v: f64| v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
    require(
        b.iter().chain(r.iter()).all(|&v| ok(v)),
        &format!(
            "{what}: b and r must be {}",
            if strict { "positive" } else { "nonnegative" }
        ),
    )
}

struct KlConjugate {
    b: Vec<f64>,
    r: Vec<f64>,
}

impl ProxFn for KlConjugate {
    fn value(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.b.len());
        let mut acc = 0.0;
        for ((&zj, &bj), &rj) in z.iter().zip(&self.b).zip(&self.r) {
            if bj > 0.0 {
                if zj >= 1.0 {
                    return f64::INFINITY;
                }
                acc += -zj * rj - bj * (1.0 - zj).ln();
            } else {
                if zj > 1.0 {
                    return f64::INFINITY;
                }
                acc += -zj * rj;
            }
        }
        acc
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.b)
            .zip(&self.r)
            .map(|((&zj, &bj), &rj)| {
                let s = zj + sigma * rj;
                let w = 0.5 * (s + 1.0 - ((s - 1.0) * (s - 1.0) + 4.0 * sigma * bj).sqrt());
                // exact arithmetic gives w < 1 when b > 0; clamp guards the
                // strict-feasibility invariant against rounding
                if bj > 0.0 {
                    w.min(1.0f64.next_down())
                } else {
                    w.min(1.0)
                }
            })
            .collect()
    }

    fn domain(&self) -> String {
        "z <= 1 componentwise (strict where b > 0)".into()
    }
}

/// Conjugate of the Poisson log-likelihood data term with counts `b` and
/// background `r`.
pub fn kl_conjugate(b: Vec<f64>, r: Vec<f64>) -> Result<ProxFunction> {
    validate_counts(&b, &r, false, "kl_conjugate")?;
    Ok(Arc::new(KlConjugate { b, r }))
}

/// Poisson data-fit value at `y` (extended real).
pub fn kl_value(b: &[f64], r: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(b.len(), r.len());
    debug_assert_eq!(b.len(), y.len());
    let mut acc = 0.0;
    for ((&bj, &rj), &yj) in b.iter().zip(r).zip(y) {
        let lam = yj + rj;
        if bj > 0.0 {
            if lam <= 0.0 {
                return f64::INFINITY;
            }
            acc += lam - bj + bj * (bj / lam).ln();
        } else {
            if lam < 0.0 {
                return f64::INFINITY;
            }
            acc += lam;
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Smoothed KL (quadratic extension below zero)
// ---------------------------------------------------------------------------

struct SmoothedKlConjugate {
    b: Vec<f64>,
    r: Vec<f64>,
    mu: f64,
}

impl ProxFn for SmoothedKlConjugate {
    fn value(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.b.len());
        let mut acc = 0.0;
        for ((&zj, &bj), &rj) in z.iter().zip(&self.b).zip(&self.r) {
            let zstar = 1.0 - bj / rj;
            if zj < zstar {
                acc += rj * rj / (2.0 * bj) * zj * zj + (rj - rj * rj / bj) * zj
                    + rj * rj / (2.0 * bj)
                    + 1.5 * bj
                    - 2.0 * rj
                    - bj * (bj / rj).ln();
            } else if zj < 1.0 {
                acc += -rj * zj - bj * (1.0 - zj).ln();
            } else {
                return f64::INFINITY;
            }
        }
        acc
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.b)
            .zip(&self.r)
            .map(|((&zj, &bj), &rj)| {
                if zj < 1.0 - bj / rj {
                    (bj * zj - sigma * rj * bj + sigma * rj * rj) / (bj + sigma * rj * rj)
                } else {
                    let s = zj + sigma * rj;
                    let w = 0.5 * (s + 1.0 - ((s - 1.0) * (s - 1.0) + 4.0 * sigma * bj).sqrt());
                    w.min(1.0f64.next_down())
                }
            })
            .collect()
    }

    fn mu(&self) -> f64 {
        self.mu
    }

    fn domain(&self) -> String {
        "z < 1 componentwise".into()
    }
}

/// Conjugate of the smoothed Poisson data term (quadratic below zero);
/// strongly convex with modulus `min_j r_j^2 / b_j`.
pub fn smoothed_kl_conjugate(b: Vec<f64>, r: Vec<f64>) -> Result<ProxFunction> {
    validate_counts(&b, &r, true, "smoothed_kl_conjugate")?;
    let mu = b
        .iter()
        .zip(&r)
        .map(|(&bj, &rj)| rj * rj / bj)
        .fold(f64::INFINITY, f64::min);
    Ok(Arc::new(SmoothedKlConjugate { b, r, mu }))
}

/// Smoothed Poisson data-fit value at `y` (finite for all real `y`).
pub fn smoothed_kl_value(b: &[f64], r: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(b.len(), r.len());
    debug_assert_eq!(b.len(), y.len());
    let mut acc = 0.0;
    for ((&bj, &rj), &yj) in b.iter().zip(r).zip(y) {
        if yj >= 0.0 {
            acc += yj + rj - bj + bj * (bj / (yj + rj)).ln();
        } else {
            acc += bj / (2.0 * rj * rj) * yj * yj + (1.0 - bj / rj) * yj + rj - bj
                + bj * (bj / rj).ln();
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Huberized absolute value
// ---------------------------------------------------------------------------

struct HuberConjugate {
    alpha: f64,
    eta: f64,
}

impl ProxFn for HuberConjugate {
    fn value(&self, z: &[f64]) -> f64 {
        if z.iter().any(|v| v.abs() > self.alpha) {
            return f64::INFINITY;
        }
        self.eta / (2.0 * self.alpha) * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        let shrink = 1.0 + sigma * self.eta / self.alpha;
        z.iter()
            .map(|&v| (v / shrink).clamp(-self.alpha, self.alpha))
            .collect()
    }

    fn mu(&self) -> f64 {
        self.eta / self.alpha
    }

    fn domain(&self) -> String {
        format!("max-norm ball of radius {}", self.alpha)
    }
}

/// Conjugate of the Huberized L1 penalty `alpha * sum_j h_eta(t_j)`; strongly
/// convex with modulus `eta / alpha`.
pub fn huber_conjugate(alpha: f64, eta: f64) -> Result<ProxFunction> {
    require(alpha > 0.0 && alpha.is_finite(), "huber_conjugate: alpha > 0")?;
    require(eta > 0.0 && eta.is_finite(), "huber_conjugate: eta > 0")?;
    Ok(Arc::new(HuberConjugate { alpha, eta }))
}

/// Huberized L1 value `alpha * sum_j h_eta(t_j)` with the quadratic cap
/// `h_eta(t) = t^2/(2 eta) + eta/2` for `|t| <= eta` and `|t|` outside.
pub fn huber_value(alpha: f64, eta: f64, z: &[f64]) -> f64 {
    alpha
        * z.iter()
            .map(|&t| {
                if t.abs() <= eta {
                    t * t / (2.0 * eta) + eta / 2.0
                } else {
                    t.abs()
                }
            })
            .sum::<f64>()
}

// ---------------------------------------------------------------------------
// Additive quadratic wrapper
// ---------------------------------------------------------------------------

struct AddSqL2 {
    base: ProxFunction,
    mu_add: f64,
}

impl ProxFn for AddSqL2 {
    fn value(&self, z: &[f64]) -> f64 {
        self.base.value(z) + self.mu_add / 2.0 * z.iter().map(|v| v * v).sum::<f64>()
    }

    fn prox(&self, sigma: f64, z: &[f64]) -> Vec<f64> {
        let shrink = 1.0 + sigma * self.mu_add;
        let scaled: Vec<f64> = z.iter().map(|v| v / shrink).collect();
        self.base.prox(sigma / shrink, &scaled)
    }

    fn prox_warm(&self, sigma: f64, z: &[f64], warm: &mut ProxWarmState) -> Vec<f64> {
        let shrink = 1.0 + sigma * self.mu_add;
        let scaled: Vec<f64> = z.iter().map(|v| v / shrink).collect();
        self.base.prox_warm(sigma / shrink, &scaled, warm)
    }

    fn mu(&self) -> f64 {
        self.base.mu() + self.mu_add
    }

    fn domain(&self) -> String {
        self.base.domain()
    }
}

/// `base + (mu/2)|x|^2`; the prox reduces to a shrunken call of the base prox.
pub fn add_sq_l2(base: ProxFunction, mu: f64) -> Result<ProxFunction> {
    require(mu > 0.0 && mu.is_finite(), "add_sq_l2: mu > 0")?;
    Ok(Arc::new(AddSqL2 { base, mu_add: mu }))
}

/// Prox of the conjugate from the prox of the primal:
/// `prox_{sigma f*}(z) = z - sigma * prox_{f/sigma}(z / sigma)`.
pub fn moreau_conjugate_prox(pair: &ConjugatePair, sigma: f64, z: &[f64]) -> Vec<f64> {
    debug_assert!(sigma > 0.0);
    let scaled: Vec<f64> = z.iter().map(|v| v / sigma).collect();
    let p = pair.primal.prox(1.0 / sigma, &scaled);
    z.iter().zip(&p).map(|(zi, pi)| zi - sigma * pi).collect()
}
