//! Gaussian GLR change-point statistics on per-observation scores.
//!
//! For scores ordered by a moderator, `D_{k,n} = n ln s2_pool - k ln s2_L -
//! (n-k) ln s2_R` tests a simultaneous mean-and-variance change after the
//! k-th ordered observation. Split-point candidates are drawn from the top of
//! these statistics instead of scanning every threshold.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Segments shorter than this are not tested.
pub const MIN_SEGMENT: usize = 10;

/// Variance floor guarding the logs against constant segments.
pub const VAR_FLOOR: f64 = 1e-12;

/// GLR statistics for every admissible split index, per score column.
#[derive(Debug, Clone)]
pub struct GlrStats {
    /// Left-segment sizes k (shared across columns), ascending.
    pub k: Vec<usize>,
    /// One statistic vector per score column, aligned with `k`.
    pub d: Vec<Vec<f64>>,
}

impl GlrStats {
    /// For one column, the k maximizing D (ties toward smaller k).
    pub fn argmax_k(&self, column: usize) -> usize {
        let d = &self.d[column];
        let mut best = 0usize;
        for i in 1..d.len() {
            if d[i] > d[best] {
                best = i;
            }
        }
        self.k[best]
    }
}

/// Compute `D_{k,n}` for each score column with the rows sorted by the
/// moderator. Ties in the moderator are kept in input order; realizability of
/// a split between tied values is the caller's concern.
pub fn glr_change_stats(scores: &DMatrix<f64>, moderator: &[f64]) -> Result<GlrStats> {
    let n = scores.nrows();
    if n != moderator.len() {
        return Err(Error::Shape(format!(
            "{n} score rows vs {} moderator values",
            moderator.len()
        )));
    }
    if n < 2 * MIN_SEGMENT {
        return Err(Error::Shape(format!(
            "need at least {} observations, got {n}",
            2 * MIN_SEGMENT
        )));
    }
    let mut distinct: Vec<f64> = moderator.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateModerator);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        moderator[a]
            .partial_cmp(&moderator[b])
            .unwrap()
            .then(a.cmp(&b))
    });

    let ks: Vec<usize> = (MIN_SEGMENT..=n - MIN_SEGMENT).collect();
    let nf = n as f64;
    let mut all = Vec::with_capacity(scores.ncols());
    for col in 0..scores.ncols() {
        // prefix sums over the sorted order
        let mut c1 = Vec::with_capacity(n);
        let mut c2 = Vec::with_capacity(n);
        let mut a1 = 0.0f64;
        let mut a2 = 0.0f64;
        for &row in &order {
            let v = scores[(row, col)];
            a1 += v;
            a2 += v * v;
            c1.push(a1);
            c2.push(a2);
        }
        let tot1 = c1[n - 1];
        let tot2 = c2[n - 1];
        let pool_var = (tot2 / nf - (tot1 / nf).powi(2)).max(VAR_FLOOR);
        let base = nf * pool_var.ln();
        let mut d = Vec::with_capacity(ks.len());
        for &k in &ks {
            let kf = k as f64;
            let rf = nf - kf;
            let m_l = c1[k - 1] / kf;
            let v_l = (c2[k - 1] / kf - m_l * m_l).max(VAR_FLOOR);
            let m_r = (tot1 - c1[k - 1]) / rf;
            let v_r = ((tot2 - c2[k - 1]) / rf - m_r * m_r).max(VAR_FLOOR);
            d.push(base - kf * v_l.ln() - rf * v_r.ln());
        }
        all.push(d);
    }
    Ok(GlrStats { k: ks, d: all })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    #[test]
    fn rejects_degenerate_moderator() {
        let scores = DMatrix::from_element(50, 1, 1.0);
        let z = vec![0.5; 50];
        assert!(matches!(
            glr_change_stats(&scores, &z),
            Err(Error::DegenerateModerator)
        ));
    }

    #[test]
    fn localizes_injected_mean_shift() {
        // 2-sigma mean shift at k = n/2: argmax within n/20 of n/2 in
        // at least 95% of replications.
        let n = 400;
        let reps = 500;
        let mut hits = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..reps {
            let z: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
            let mut scores = DMatrix::zeros(n, 1);
            for i in 0..n {
                scores[(i, 0)] = normal(&mut rng) + if i >= n / 2 { 2.0 } else { 0.0 };
            }
            let stats = glr_change_stats(&scores, &z).unwrap();
            let k_hat = stats.argmax_k(0);
            if (k_hat as i64 - (n / 2) as i64).unsigned_abs() as usize <= n / 20 {
                hits += 1;
            }
        }
        let rate = hits as f64 / reps as f64;
        assert!(rate >= 0.95, "localization rate {rate}");
    }

    #[test]
    fn variance_shift_is_also_visible() {
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let mut scores = DMatrix::zeros(n, 1);
        for i in 0..n {
            scores[(i, 0)] = normal(&mut rng) * if i >= n / 2 { 3.0 } else { 1.0 };
        }
        let stats = glr_change_stats(&scores, &z).unwrap();
        let k_hat = stats.argmax_k(0);
        assert!(
            (k_hat as i64 - (n / 2) as i64).unsigned_abs() as usize <= n / 10,
            "k_hat = {k_hat}"
        );
    }

    #[test]
    fn null_statistics_stay_flat() {
        // i.i.d. scores: the peak should not be dramatically above the bulk.
        let n = 500;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let scores = DMatrix::from_fn(n, 1, |_, _| normal(&mut rng));
        let stats = glr_change_stats(&scores, &z).unwrap();
        let d = &stats.d[0];
        let max = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // Gaussian GLR null max is O(log n); anything huge signals a bug.
        assert!(max < 40.0, "null max D = {max}");
        assert!(max > 0.0);
    }

    #[test]
    fn k_range_respects_min_segment() {
        let n = 100;
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let scores = DMatrix::from_fn(n, 2, |_, _| normal(&mut rng));
        let stats = glr_change_stats(&scores, &z).unwrap();
        assert_eq!(*stats.k.first().unwrap(), MIN_SEGMENT);
        assert_eq!(*stats.k.last().unwrap(), n - MIN_SEGMENT);
        assert_eq!(stats.d.len(), 2);
        assert_eq!(stats.d[0].len(), stats.k.len());
    }
}
