//! Conway-Maxwell-Poisson distribution: normalizer, pmf, moments and sampling.
//!
//! The pmf is `P(Y = y) = lambda^y / ((y!)^nu * zeta(lambda, nu))` with the
//! normalizing series `zeta(lambda, nu) = sum_s lambda^s / (s!)^nu`. Special
//! cases: geometric at `nu = 0` (requires `lambda < 1`), Poisson at `nu = 1`.
//! All series run in log space with an adaptive tail-bounded stopping rule so
//! large `lambda` / small `nu` combinations do not overflow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A (lambda, nu) parameter pair. `nu > 0` needs `lambda > 0`; the geometric
/// branch `nu = 0` needs `0 < lambda < 1` for the series to converge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmpParams {
    lambda: f64,
    nu: f64,
}

impl CmpParams {
    pub fn new(lambda: f64, nu: f64) -> Result<Self> {
        if !lambda.is_finite() || !nu.is_finite() || nu < 0.0 {
            return Err(Error::Domain(format!(
                "CMP parameters must be finite with nu >= 0, got lambda={lambda}, nu={nu}"
            )));
        }
        if nu == 0.0 {
            if !(lambda > 0.0 && lambda < 1.0) {
                return Err(Error::Domain(format!(
                    "geometric branch (nu=0) requires 0 < lambda < 1, got lambda={lambda}"
                )));
            }
        } else if lambda <= 0.0 {
            return Err(Error::Domain(format!(
                "lambda must be positive, got lambda={lambda}"
            )));
        }
        Ok(Self { lambda, nu })
    }

    /// Build from the linear predictors `ln lambda = eta1`, `ln nu = eta2`.
    pub fn from_log_link(eta1: f64, eta2: f64) -> Result<Self> {
        Self::new(eta1.exp(), eta2.exp())
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub(crate) fn ln_lambda(&self) -> f64 {
        self.lambda.ln()
    }
}

/// Stopping rule for the infinite series: stop once the bounded remaining tail
/// falls below `rel_tol` relative to the partial sum, or fail at `max_terms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationPolicy {
    pub rel_tol: f64,
    pub max_terms: usize,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_terms: 100_000,
        }
    }
}

impl TruncationPolicy {
    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) || self.max_terms < 10 {
            return Err(Error::Domain(format!(
                "truncation policy requires 0 < rel_tol < 1 and max_terms >= 10, got rel_tol={}, max_terms={}",
                self.rel_tol, self.max_terms
            )));
        }
        Ok(())
    }
}

/// The four moments the IRLS updates need.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmpMoments {
    /// E[Y]
    pub mean: f64,
    /// V[Y]
    pub variance: f64,
    /// E[ln Y!]
    pub mean_lnfact: f64,
    /// V[ln Y!]
    pub var_lnfact: f64,
}

/// Moments plus the cross moment and normalizer, used internally for standard
/// errors and likelihood evaluation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct MomentsExt {
    pub mean: f64,
    pub variance: f64,
    pub mean_lnfact: f64,
    pub var_lnfact: f64,
    /// Cov(Y, ln Y!)
    pub cov_y_lnfact: f64,
}

/// ln(s!) for s up to the default max_terms, built once.
fn lnfact_table() -> &'static [f64] {
    use std::sync::OnceLock;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=100_000u64)
            .map(|s| statrs::function::gamma::ln_gamma(s as f64 + 1.0))
            .collect()
    })
}

#[inline]
fn lnfact(table: &[f64], s: usize) -> f64 {
    if s < table.len() {
        table[s]
    } else {
        statrs::function::gamma::ln_gamma(s as f64 + 1.0)
    }
}

/// Single-pass evaluation of the normalizing series in max-shifted linear
/// space: terms are scaled by the (estimated) mode exponent so nothing
/// overflows, and the moment sums ride along in the same pass. Stops when the
/// geometric tail bound falls below the policy tolerance.
fn series_core<const MOMENTS: bool>(
    ln_lambda: f64,
    nu: f64,
    policy: &TruncationPolicy,
) -> Result<(f64, usize, [f64; 6])> {
    policy.validate()?;
    if nu == 0.0 && ln_lambda >= 0.0 {
        // geometric series with ratio >= 1 diverges
        return Err(Error::Domain(format!(
            "geometric branch (nu=0) requires lambda < 1, got ln lambda = {ln_lambda}"
        )));
    }
    let table = lnfact_table();
    // Mode of the terms: s* ~ lambda^(1/nu); the shift only needs to be near
    // the maximum exponent.
    let s_star = if nu == 0.0 {
        0
    } else {
        let est = (ln_lambda / nu).exp();
        if est.is_finite() {
            (est as usize).min(policy.max_terms)
        } else {
            policy.max_terms
        }
    };
    let shift = s_star as f64 * ln_lambda - nu * lnfact(table, s_star);

    let mut z = 0.0f64;
    // z-weighted sums of s, s^2, ln s!, (ln s!)^2, s ln s!; the last slot
    // carries z itself back to the caller.
    let mut sums = [0.0f64; 6];
    let mut prev_q = 0.0f64;
    let weighted_tol = 1e-4 * policy.rel_tol;
    let mut s = 0usize;
    let s_stop = loop {
        let sf = s as f64;
        let lf = lnfact(table, s);
        let q = (sf * ln_lambda - nu * lf - shift).exp();
        z += q;
        if MOMENTS {
            sums[0] += sf * q;
            sums[1] += sf * sf * q;
            sums[2] += lf * q;
            sums[3] += lf * lf * q;
            sums[4] += sf * lf * q;
        }
        if s > 0 && s >= s_star && q < prev_q {
            let r = q / prev_q;
            let tail = q * r / (1.0 - r);
            let plain_ok = tail < policy.rel_tol * z;
            if plain_ok {
                if !MOMENTS {
                    break s;
                }
                let w = 1.0 + sf * sf + lf * lf;
                if tail * w < weighted_tol * z || s >= 2 * policy.max_terms {
                    break s;
                }
            }
            if !plain_ok && s >= policy.max_terms {
                return Err(Error::NonConvergent {
                    lambda: ln_lambda.exp(),
                    nu,
                    max_terms: policy.max_terms,
                });
            }
        } else if s >= policy.max_terms {
            return Err(Error::NonConvergent {
                lambda: ln_lambda.exp(),
                nu,
                max_terms: policy.max_terms,
            });
        }
        prev_q = q;
        s += 1;
    };
    sums[5] = z;
    Ok((shift + z.ln(), s_stop, sums))
}

/// ln zeta plus the index at which the series was truncated.
pub(crate) fn log_zeta_bound(
    ln_lambda: f64,
    nu: f64,
    policy: &TruncationPolicy,
) -> Result<(f64, usize)> {
    series_core::<false>(ln_lambda, nu, policy).map(|(lnz, s, _)| (lnz, s))
}

/// Natural log of the normalizing constant `zeta(lambda, nu)`.
pub fn log_zeta(params: CmpParams, policy: &TruncationPolicy) -> Result<f64> {
    log_zeta_bound(params.ln_lambda(), params.nu(), policy).map(|(v, _)| v)
}

/// Log pmf at a count `y`: `y ln lambda - nu ln(y!) - ln zeta`.
pub fn log_pmf(y: u64, params: CmpParams, policy: &TruncationPolicy) -> Result<f64> {
    let lnz = log_zeta(params, policy)?;
    let lf = statrs::function::gamma::ln_gamma(y as f64 + 1.0);
    Ok(y as f64 * params.ln_lambda() - params.nu() * lf - lnz)
}

pub(crate) fn moments_ext_ln(
    ln_lambda: f64,
    nu: f64,
    policy: &TruncationPolicy,
) -> Result<MomentsExt> {
    let (_, _, sums) = series_core::<true>(ln_lambda, nu, policy)?;
    let z = sums[5];
    let m1 = sums[0] / z;
    let m2 = sums[1] / z;
    let l1 = sums[2] / z;
    let l2 = sums[3] / z;
    let x11 = sums[4] / z;
    Ok(MomentsExt {
        mean: m1,
        variance: (m2 - m1 * m1).max(f64::MIN_POSITIVE),
        mean_lnfact: l1,
        var_lnfact: (l2 - l1 * l1).max(0.0),
        cov_y_lnfact: x11 - m1 * l1,
    })
}

/// E[Y], V[Y], E[ln Y!], V[ln Y!] by probability-weighted summation under the
/// same truncation as [`log_zeta`].
pub fn moments(params: CmpParams, policy: &TruncationPolicy) -> Result<CmpMoments> {
    let ext = moments_ext_ln(params.ln_lambda(), params.nu(), policy)?;
    Ok(CmpMoments {
        mean: ext.mean,
        variance: ext.variance,
        mean_lnfact: ext.mean_lnfact,
        var_lnfact: ext.var_lnfact,
    })
}

/// Inversion sampler over the truncated support.
pub struct CmpSampler {
    cumulative: Vec<f64>,
}

impl CmpSampler {
    pub fn new(params: CmpParams, policy: &TruncationPolicy) -> Result<Self> {
        let (lnz, s_max) = log_zeta_bound(params.ln_lambda(), params.nu(), policy)?;
        let ln_lambda = params.ln_lambda();
        let nu = params.nu();
        let table = lnfact_table();
        let mut cumulative = Vec::with_capacity(s_max + 1);
        let mut acc = 0.0f64;
        for s in 0..=s_max {
            let sf = s as f64;
            acc += (sf * ln_lambda - nu * lnfact(table, s) - lnz).exp();
            cumulative.push(acc);
        }
        Ok(Self { cumulative })
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.gen();
        let idx = self.cumulative.partition_point(|&c| c < u);
        idx.min(self.cumulative.len() - 1) as u64
    }
}

/// `count` i.i.d. draws by inversion of the truncated CDF, deterministic in `seed`.
pub fn sample(
    params: CmpParams,
    count: usize,
    seed: u64,
    policy: &TruncationPolicy,
) -> Result<Vec<u64>> {
    let sampler = CmpSampler::new(params, policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| sampler.draw(&mut rng)).collect())
}
