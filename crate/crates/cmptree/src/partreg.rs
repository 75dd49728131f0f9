//! PartReg: breadth-first varying-coefficient regression trees, the base
//! learner for boosting.
//!
//! Leaves hold weighted least-squares coefficients of the target on the
//! varying design; growth repeatedly takes the (leaf, variable, threshold)
//! triple with the largest weighted-SSE reduction until the leaf budget or
//! admissibility runs out.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Splits below this relative SSE improvement are noise, not structure.
const MIN_GAIN_REL: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct PartRegControl {
    pub max_leaves: usize,
    pub min_node_size: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaseSplit {
    pub var: usize,
    /// Left child takes rows with value <= point.
    pub point: f64,
    pub delta_sse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseNode {
    pub coef: Vec<f64>,
    pub split: Option<BaseSplit>,
    pub children: Option<Box<(BaseNode, BaseNode)>>,
}

impl BaseNode {
    fn leaf(coef: Vec<f64>) -> Self {
        Self {
            coef,
            split: None,
            children: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaseTree {
    pub root: BaseNode,
    pub n_leaves: usize,
    /// Splits in growth order (for variable importance).
    pub split_log: Vec<BaseSplit>,
}

impl BaseTree {
    /// Leaf coefficients for one moderator row.
    pub fn leaf_coef(&self, z: &[f64]) -> &[f64] {
        let mut node = &self.root;
        while let (Some(s), Some(kids)) = (&node.split, &node.children) {
            node = if z[s.var] <= s.point {
                &kids.0
            } else {
                &kids.1
            };
        }
        &node.coef
    }

    /// x' coef at the routed leaf.
    pub fn predict_row(&self, x: &[f64], z: &[f64]) -> f64 {
        let coef = self.leaf_coef(z);
        x.iter().zip(coef).map(|(a, b)| a * b).sum()
    }

    pub fn predict(&self, design: &DMatrix<f64>, moderators: &DMatrix<f64>) -> DVector<f64> {
        let n = design.nrows();
        let mut out = DVector::zeros(n);
        let mut xrow = vec![0.0; design.ncols()];
        let mut zrow = vec![0.0; moderators.ncols()];
        for i in 0..n {
            for j in 0..design.ncols() {
                xrow[j] = design[(i, j)];
            }
            for j in 0..moderators.ncols() {
                zrow[j] = moderators[(i, j)];
            }
            out[i] = self.predict_row(&xrow, &zrow);
        }
        out
    }
}

/// Weighted LS on a row subset: returns (coef, sse). Singular systems give
/// None.
fn leaf_fit(
    rows: &[usize],
    target: &DVector<f64>,
    weights: &DVector<f64>,
    design: &DMatrix<f64>,
) -> Option<(Vec<f64>, f64)> {
    let k = design.ncols();
    let mut m = DMatrix::<f64>::zeros(k, k);
    let mut r = DVector::<f64>::zeros(k);
    let mut swt2 = 0.0;
    for &i in rows {
        let w = weights[i];
        let t = target[i];
        swt2 += w * t * t;
        for a in 0..k {
            let xa = design[(i, a)];
            r[a] += w * xa * t;
            for b in a..k {
                m[(a, b)] += w * xa * design[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    let chol = m.cholesky()?;
    let coef = chol.solve(&r);
    let sse = swt2 - coef.dot(&r);
    Some((coef.iter().copied().collect(), sse))
}

struct LeafState {
    rows: Vec<usize>,
    coef: Vec<f64>,
    sse: f64,
    /// Best admissible split of this leaf, if any.
    best: Option<BaseSplit>,
}

/// Scan all (variable, threshold) pairs of one leaf with incremental
/// cross-products; returns the split maximizing the SSE reduction.
fn best_split(
    leaf: &LeafState,
    target: &DVector<f64>,
    weights: &DVector<f64>,
    design: &DMatrix<f64>,
    moderators: &DMatrix<f64>,
    control: &PartRegControl,
) -> Option<BaseSplit> {
    let k = design.ncols();
    let n = leaf.rows.len();
    if n < 2 * control.min_node_size {
        return None;
    }
    // parent totals
    let mut m_tot = DMatrix::<f64>::zeros(k, k);
    let mut r_tot = DVector::<f64>::zeros(k);
    let mut swt2_tot = 0.0;
    for &i in &leaf.rows {
        let w = weights[i];
        let t = target[i];
        swt2_tot += w * t * t;
        for a in 0..k {
            let xa = design[(i, a)];
            r_tot[a] += w * xa * t;
            for b in a..k {
                m_tot[(a, b)] += w * xa * design[(i, b)];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            m_tot[(a, b)] = m_tot[(b, a)];
        }
    }

    let mut best: Option<BaseSplit> = None;
    let mut order = leaf.rows.clone();
    for var in 0..moderators.ncols() {
        order.sort_by(|&a, &b| {
            moderators[(a, var)]
                .partial_cmp(&moderators[(b, var)])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut m_l = DMatrix::<f64>::zeros(k, k);
        let mut r_l = DVector::<f64>::zeros(k);
        let mut swt2_l = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            let w = weights[i];
            let t = target[i];
            swt2_l += w * t * t;
            for a in 0..k {
                let xa = design[(i, a)];
                r_l[a] += w * xa * t;
                for b in a..k {
                    m_l[(a, b)] += w * xa * design[(i, b)];
                }
            }
            let left = pos + 1;
            let right = n - left;
            if left < control.min_node_size || right < control.min_node_size {
                continue;
            }
            let v = moderators[(i, var)];
            let next = moderators[(order[pos + 1], var)];
            if v == next {
                continue; // not a boundary
            }
            // symmetrize the left block lazily
            let mut ml = m_l.clone();
            for a in 0..k {
                for b in 0..a {
                    ml[(a, b)] = ml[(b, a)];
                }
            }
            let Some(chol_l) = ml.clone().cholesky() else {
                continue;
            };
            let coef_l = chol_l.solve(&r_l);
            let sse_l = swt2_l - coef_l.dot(&r_l);
            let mr = &m_tot - &ml;
            let Some(chol_r) = mr.cholesky() else {
                continue;
            };
            let r_r = &r_tot - &r_l;
            let coef_r = chol_r.solve(&r_r);
            let sse_r = (swt2_tot - swt2_l) - coef_r.dot(&r_r);
            let gain = leaf.sse - sse_l - sse_r;
            let admissible = gain > MIN_GAIN_REL * (1.0 + leaf.sse.abs());
            if admissible {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        gain > b.delta_sse
                            || (gain == b.delta_sse && (var, v) < (b.var, b.point))
                    }
                };
                if better {
                    best = Some(BaseSplit {
                        var,
                        point: v,
                        delta_sse: gain,
                    });
                }
            }
        }
    }
    best
}

/// Grow a PartReg tree on the weighted residual target.
///
/// A zero-variance target (or an inadmissible first split) yields a
/// single-leaf tree.
pub fn fit_partreg(
    target: &DVector<f64>,
    weights: &DVector<f64>,
    design: &DMatrix<f64>,
    moderators: &DMatrix<f64>,
    control: &PartRegControl,
) -> BaseTree {
    let n = target.len();
    let rows: Vec<usize> = (0..n).collect();
    let (coef, sse) = leaf_fit(&rows, target, weights, design)
        .unwrap_or_else(|| (vec![0.0; design.ncols()], 0.0));

    // arena-backed growth: leaves carry their arena slot
    enum Slot {
        Leaf { coef: Vec<f64> },
        Internal { split: BaseSplit, coef: Vec<f64>, left: usize, right: usize },
    }
    let mut arena: Vec<Slot> = vec![Slot::Leaf { coef: coef.clone() }];

    struct Pending {
        slot: usize,
        state: LeafState,
    }
    let mut first = Pending {
        slot: 0,
        state: LeafState {
            rows,
            coef,
            sse,
            best: None,
        },
    };
    first.state.best = best_split(&first.state, target, weights, design, moderators, control);
    let mut leaves = vec![first];

    let mut split_log = Vec::new();
    let mut n_leaves = 1usize;
    while n_leaves < control.max_leaves {
        let mut pick: Option<(usize, BaseSplit)> = None;
        for (idx, leaf) in leaves.iter().enumerate() {
            if let Some(s) = leaf.state.best {
                let better = match &pick {
                    None => true,
                    Some((_, b)) => {
                        s.delta_sse > b.delta_sse
                            || (s.delta_sse == b.delta_sse && (s.var, s.point) < (b.var, b.point))
                    }
                };
                if better {
                    pick = Some((idx, s));
                }
            }
        }
        let Some((idx, split)) = pick else {
            break;
        };
        let leaf = leaves.swap_remove(idx);
        let (mut lrows, mut rrows) = (Vec::new(), Vec::new());
        for &i in &leaf.state.rows {
            if moderators[(i, split.var)] <= split.point {
                lrows.push(i);
            } else {
                rrows.push(i);
            }
        }
        split_log.push(split);
        let mut child_slots = [0usize; 2];
        for (c, rows) in [lrows, rrows].into_iter().enumerate() {
            let (coef, sse) = leaf_fit(&rows, target, weights, design)
                .unwrap_or_else(|| (leaf.state.coef.clone(), 0.0));
            let slot = arena.len();
            arena.push(Slot::Leaf { coef: coef.clone() });
            child_slots[c] = slot;
            let mut state = LeafState {
                rows,
                coef,
                sse,
                best: None,
            };
            state.best = best_split(&state, target, weights, design, moderators, control);
            leaves.push(Pending { slot, state });
        }
        arena[leaf.slot] = Slot::Internal {
            split,
            coef: leaf.state.coef,
            left: child_slots[0],
            right: child_slots[1],
        };
        n_leaves += 1;
    }

    fn assemble(arena: &[Slot], id: usize) -> BaseNode {
        match &arena[id] {
            Slot::Leaf { coef } => BaseNode::leaf(coef.clone()),
            Slot::Internal {
                split,
                coef,
                left,
                right,
            } => BaseNode {
                coef: coef.clone(),
                split: Some(*split),
                children: Some(Box::new((
                    assemble(arena, *left),
                    assemble(arena, *right),
                ))),
            },
        }
    }
    let root = assemble(&arena, 0);
    BaseTree {
        root,
        n_leaves,
        split_log,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CONTROL: PartRegControl = PartRegControl {
        max_leaves: 2,
        min_node_size: 5,
    };

    fn uniform_matrix(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, k, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn step_target_splits_at_the_gap() {
        let n = 200;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = uniform_matrix(n, 3, &mut rng);
        let design = DMatrix::from_element(n, 1, 1.0);
        let target = DVector::from_fn(n, |i, _| if z[(i, 0)] > 0.5 { 1.0 } else { 0.0 });
        let weights = DVector::from_element(n, 1.0);
        let tree = fit_partreg(&target, &weights, &design, &z, &CONTROL);
        assert_eq!(tree.n_leaves, 2);
        let s = tree.split_log[0];
        assert_eq!(s.var, 0);
        // threshold is the largest observed value below the 0.5 gap
        let below: f64 = (0..n)
            .map(|i| z[(i, 0)])
            .filter(|&v| v <= 0.5)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((s.point - below).abs() < 1e-12, "point {}", s.point);
        let kids = tree.root.children.as_ref().unwrap();
        assert!(kids.0.coef[0].abs() < 1e-9);
        assert!((kids.1.coef[0] - 1.0).abs() < 1e-9);
    }

    /// Brute force: all (var, threshold) pairs with direct per-side LS.
    fn brute_force_best(
        target: &DVector<f64>,
        weights: &DVector<f64>,
        design: &DMatrix<f64>,
        z: &DMatrix<f64>,
        min_node: usize,
    ) -> Option<(usize, f64, f64)> {
        let n = target.len();
        let all: Vec<usize> = (0..n).collect();
        let (_, sse0) = leaf_fit(&all, target, weights, design)?;
        let mut best: Option<(usize, f64, f64)> = None;
        for var in 0..z.ncols() {
            let mut vals: Vec<f64> = (0..n).map(|i| z[(i, var)]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals.dedup();
            for &point in &vals {
                let l: Vec<usize> = (0..n).filter(|&i| z[(i, var)] <= point).collect();
                let r: Vec<usize> = (0..n).filter(|&i| z[(i, var)] > point).collect();
                if l.len() < min_node || r.len() < min_node {
                    continue;
                }
                let Some((_, sl)) = leaf_fit(&l, target, weights, design) else {
                    continue;
                };
                let Some((_, sr)) = leaf_fit(&r, target, weights, design) else {
                    continue;
                };
                let gain = sse0 - sl - sr;
                let better = match best {
                    None => true,
                    Some((bv, bp, bg)) => {
                        gain > bg + 1e-12 || ((gain - bg).abs() <= 1e-12 && (var, point) < (bv, bp))
                    }
                };
                if better {
                    best = Some((var, point, gain));
                }
            }
        }
        best
    }

    #[test]
    fn depth_one_split_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..20 {
            let n = 80;
            let z = uniform_matrix(n, 4, &mut rng);
            let mut design = DMatrix::from_element(n, 2, 1.0);
            for i in 0..n {
                design[(i, 1)] = rng.gen::<f64>();
            }
            let target = DVector::from_fn(n, |i, _| {
                design[(i, 1)] * z[(i, 2)] + 0.3 * rng.gen::<f64>()
            });
            let weights = DVector::from_fn(n, |i, _| 0.5 + z[(i, 0)] + (i % 3) as f64);
            let tree = fit_partreg(&target, &weights, &design, &z, &CONTROL);
            let oracle = brute_force_best(&target, &weights, &design, &z, CONTROL.min_node_size);
            match (tree.split_log.first(), oracle) {
                (Some(s), Some((bv, bp, bg))) => {
                    assert_eq!(s.var, bv, "trial {trial}");
                    assert!((s.point - bp).abs() < 1e-12, "trial {trial}");
                    assert!(
                        (s.delta_sse - bg).abs() < 1e-8 * (1.0 + bg.abs()),
                        "trial {trial}: {} vs {bg}",
                        s.delta_sse
                    );
                }
                (None, None) => {}
                other => panic!("trial {trial}: {other:?}"),
            }
        }
    }

    #[test]
    fn weight_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 120;
        let z = uniform_matrix(n, 3, &mut rng);
        let design = DMatrix::from_element(n, 1, 1.0);
        let target = DVector::from_fn(n, |i, _| z[(i, 1)] + 0.1 * rng.gen::<f64>());
        let w1 = DVector::from_element(n, 1.0);
        let w2 = DVector::from_element(n, 2.0);
        let c = PartRegControl {
            max_leaves: 4,
            min_node_size: 10,
        };
        let t1 = fit_partreg(&target, &w1, &design, &z, &c);
        let t2 = fit_partreg(&target, &w2, &design, &z, &c);
        assert_eq!(t1.n_leaves, t2.n_leaves);
        for (a, b) in t1.split_log.iter().zip(&t2.split_log) {
            assert_eq!(a.var, b.var);
            assert_eq!(a.point, b.point);
        }
        let p1 = t1.predict(&design, &z);
        let p2 = t2.predict(&design, &z);
        assert!((p1 - p2).amax() < 1e-9);
    }

    #[test]
    fn zero_variance_target_stays_single_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100;
        let z = uniform_matrix(n, 2, &mut rng);
        let design = DMatrix::from_element(n, 1, 1.0);
        let target = DVector::from_element(n, 3.25);
        let weights = DVector::from_element(n, 1.0);
        let tree = fit_partreg(&target, &weights, &design, &z, &CONTROL);
        assert_eq!(tree.n_leaves, 1);
        assert!((tree.root.coef[0] - 3.25).abs() < 1e-12);
    }

    #[test]
    fn leaf_budget_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let z = uniform_matrix(n, 5, &mut rng);
        let design = DMatrix::from_element(n, 1, 1.0);
        let target = DVector::from_fn(n, |i, _| {
            (6.0 * z[(i, 0)]).sin() + rng.gen::<f64>() * 0.1
        });
        let weights = DVector::from_element(n, 1.0);
        let c = PartRegControl {
            max_leaves: 7,
            min_node_size: 20,
        };
        let tree = fit_partreg(&target, &weights, &design, &z, &c);
        assert!(tree.n_leaves <= 7);
        assert_eq!(tree.split_log.len(), tree.n_leaves - 1);
    }
}
