//! Coefficient-constancy (M-fluctuation) tests for split-variable selection.
//!
//! Continuous and ordinal moderators use the supLM statistic of the
//! decorrelated cumulative score process over the trimmed interior
//! `t in [0.1, 0.9]`; its p-value comes from Monte Carlo simulation of the
//! limiting Brownian-bridge functional with a fixed seed (cached per score
//! dimension). Categorical moderators use a chi-square statistic on per-level
//! score sums.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Trimmed interior for the supLM statistic.
pub const TRIM: (f64, f64) = (0.1, 0.9);

/// Grid size for the simulated limiting process.
const NULL_GRID: usize = 1000;

/// Relative eigenvalue floor when decorrelating the score columns.
const EIG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ModeratorKind {
    Continuous,
    Ordinal,
    Categorical,
}

#[derive(Debug, Clone, Copy)]
pub struct FluctuationResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Test constancy of one parameter block's scores along a moderator.
///
/// A moderator with fewer than two distinct values is degenerate and yields
/// `statistic = 0, p_value = 1`, as does an all-zero score matrix.
pub fn fluctuation_test(
    scores: &DMatrix<f64>,
    moderator: &[f64],
    kind: ModeratorKind,
    n_sim: usize,
    seed: u64,
) -> FluctuationResult {
    let n = scores.nrows();
    assert_eq!(n, moderator.len(), "scores and moderator length differ");
    let degenerate = FluctuationResult {
        statistic: 0.0,
        p_value: 1.0,
    };
    if n < 2 {
        return degenerate;
    }
    let mut distinct: Vec<f64> = moderator.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return degenerate;
    }

    // Decorrelate: keep eigen-directions of J = (1/n) S'S above the floor.
    let whitened = match whiten(scores) {
        Some(w) => w,
        None => return degenerate,
    };
    let k_eff = whitened.ncols();

    match kind {
        ModeratorKind::Continuous | ModeratorKind::Ordinal => {
            let stat = sup_lm_statistic(&whitened, moderator);
            let null = null_distribution(k_eff, n_sim, seed);
            let exceed = null.len() - null.partition_point(|&v| v < stat);
            let p = (1 + exceed) as f64 / (null.len() + 1) as f64;
            FluctuationResult {
                statistic: stat,
                p_value: p,
            }
        }
        ModeratorKind::Categorical => {
            let (stat, df) = categorical_statistic(&whitened, moderator, &distinct);
            let p = if df == 0 {
                1.0
            } else {
                let chi = ChiSquared::new(df as f64).expect("positive df");
                1.0 - chi.cdf(stat)
            };
            FluctuationResult {
                statistic: stat,
                p_value: p,
            }
        }
    }
}

/// Scores column-centered (ties the cumulative process to zero at t = 1,
/// i.e. a bridge) and decorrelated by J^{-1/2}; rank-deficient directions are
/// dropped. Returns None when every column is numerically zero.
fn whiten(scores: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = scores.nrows();
    let k = scores.ncols();
    let mut centered = scores.clone();
    for c in 0..k {
        let mean = centered.column(c).sum() / n as f64;
        for i in 0..n {
            centered[(i, c)] -= mean;
        }
    }
    let scores = &centered;
    let mut j = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        for a in 0..k {
            for b in a..k {
                j[(a, b)] += scores[(i, a)] * scores[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            j[(a, b)] = j[(b, a)];
        }
    }
    j /= n as f64;
    let eig = j.symmetric_eigen();
    let max_e = eig.eigenvalues.amax();
    if !(max_e > 0.0) {
        return None;
    }
    // J^{-1/2} restricted to well-conditioned directions
    let keep: Vec<usize> = (0..k)
        .filter(|&a| eig.eigenvalues[a] > EIG_FLOOR * max_e)
        .collect();
    if keep.is_empty() {
        return None;
    }
    let mut proj = DMatrix::<f64>::zeros(k, keep.len());
    for (c, &a) in keep.iter().enumerate() {
        let scale = 1.0 / eig.eigenvalues[a].sqrt();
        for r in 0..k {
            proj[(r, c)] = eig.eigenvectors[(r, a)] * scale;
        }
    }
    Some(scores * proj)

}

/// supLM over realizable split fractions in the trimmed interior.
fn sup_lm_statistic(whitened: &DMatrix<f64>, moderator: &[f64]) -> f64 {
    let n = whitened.nrows();
    let k = whitened.ncols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        moderator[a]
            .partial_cmp(&moderator[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut cum = DVector::<f64>::zeros(k);
    let sqrt_n = (n as f64).sqrt();
    let mut best: f64 = 0.0;
    for (pos, &row) in order.iter().enumerate() {
        for c in 0..k {
            cum[c] += whitened[(row, c)];
        }
        let j = pos + 1;
        if j >= n {
            break;
        }
        // splits inside a tie run are not realizable
        if moderator[order[pos]] == moderator[order[pos + 1]] {
            continue;
        }
        let t = j as f64 / n as f64;
        if t < TRIM.0 || t > TRIM.1 {
            continue;
        }
        let mut norm2 = 0.0;
        for c in 0..k {
            let w = cum[c] / sqrt_n;
            norm2 += w * w;
        }
        best = best.max(norm2 / (t * (1.0 - t)));
    }
    best
}

/// Chi-square statistic over per-level score sums; df = k (levels - 1).
fn categorical_statistic(
    whitened: &DMatrix<f64>,
    moderator: &[f64],
    levels: &[f64],
) -> (f64, usize) {
    let n = whitened.nrows();
    let k = whitened.ncols();
    let mut stat = 0.0;
    for &level in levels {
        let mut sum = vec![0.0; k];
        let mut count = 0usize;
        for i in 0..n {
            if moderator[i] == level {
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += whitened[(i, c)];
                }
                count += 1;
            }
        }
        if count == 0 {
            continue;
        }
        let norm2: f64 = sum.iter().map(|v| v * v).sum();
        stat += norm2 / count as f64;
    }
    (stat, k * (levels.len() - 1))
}

/// Sorted Monte Carlo null distribution of the supLM limiting functional,
/// cached per (k, n_sim, seed).
fn null_distribution(k: usize, n_sim: usize, seed: u64) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, u64), Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(found) = cache.lock().unwrap().get(&(k, n_sim, seed)) {
        return Arc::clone(found);
    }
    let computed = Arc::new(simulate_null(k, n_sim, seed));
    cache
        .lock()
        .unwrap()
        .insert((k, n_sim, seed), Arc::clone(&computed));
    computed
}

fn simulate_null(k: usize, n_sim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let m = NULL_GRID;
    let step_sd = (1.0 / (m + 1) as f64).sqrt();
    let mut stats = Vec::with_capacity(n_sim);
    let mut walk = vec![0.0f64; m * k];
    for _ in 0..n_sim {
        // k independent random walks on the grid; the final step closes the
        // bridge at t = 1
        let mut ends = vec![0.0f64; k];
        for c in 0..k {
            let mut acc = 0.0;
            for i in 0..m {
                acc += step_sd * normal_draw(&mut rng);
                walk[c * m + i] = acc;
            }
            ends[c] = acc + step_sd * normal_draw(&mut rng);
        }
        let mut best: f64 = 0.0;
        for i in 0..m {
            let t = (i + 1) as f64 / (m + 1) as f64;
            if t < TRIM.0 || t > TRIM.1 {
                continue;
            }
            let mut norm2 = 0.0;
            for c in 0..k {
                let bridge = walk[c * m + i] - t * ends[c];
                norm2 += bridge * bridge;
            }
            best = best.max(norm2 / (t * (1.0 - t)));
        }
        stats.push(best);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    stats
}

fn normal_draw<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; only the cosine branch, deterministic per rng state.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
