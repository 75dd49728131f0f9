//! CMPMOB: recursive partitioning of CMP regressions on moderator variables.
//!
//! A global model supplies fixed-effect offsets (parametric globals plus
//! penalized smooths); each node refits the varying terms with those offsets,
//! tests coefficient constancy along every moderator, and splits where the
//! Bonferroni-adjusted minimum p-value is significant. Split points come from
//! an exhaustive scan of thresholds or from change-point candidate sets, and
//! the global effects are re-estimated once with the fitted tree as an offset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::changepoint::{glr_change_stats, MIN_SEGMENT};
use crate::cmp::moments_ext_ln;
use crate::design::DesignBlock;
use crate::error::{Error, Result};
use crate::fluctuation::{fluctuation_test, ModeratorKind};
use crate::irls::{fit_cmp_glm_warm, GlmControl, GlmFit};
use crate::spline::{FittedSmooth, SmoothData};

/// Relative tolerance treating two split objectives as tied; ties go to the
/// smaller threshold.
const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMethod {
    Exhaustive,
    CpExact,
    CpTopPercent,
}

impl std::fmt::Display for SplitMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitMethod::Exhaustive => write!(f, "exhaustive"),
            SplitMethod::CpExact => write!(f, "cp-exact"),
            SplitMethod::CpTopPercent => write!(f, "cp-top-percent"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Correction {
    Bonferroni,
}

/// Which linear predictor's score block triggered the split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictorBlock {
    Lambda,
    Nu,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MobControl {
    pub alpha: f64,
    pub correction: Correction,
    pub min_node_size: usize,
    pub max_depth: usize,
    pub split_method: SplitMethod,
    pub cp_percent: f64,
    pub quantile_thin_threshold: usize,
    pub inner_refit_iters: usize,
    /// Monte Carlo replicates for the fluctuation-test p-values.
    pub n_sim: usize,
    /// Seed for the fluctuation-test null simulation.
    pub seed: u64,
    /// Global re-estimation passes after growing the tree.
    pub backfit_passes: usize,
    pub glm: GlmControl,
}

impl Default for MobControl {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            correction: Correction::Bonferroni,
            min_node_size: 50,
            max_depth: 5,
            split_method: SplitMethod::Exhaustive,
            cp_percent: 0.10,
            quantile_thin_threshold: 500,
            inner_refit_iters: 2,
            n_sim: 5000,
            seed: 42,
            backfit_passes: 1,
            glm: GlmControl::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub variable: String,
    pub var_index: usize,
    /// Threshold; left child takes rows with value <= point.
    pub point: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub method: SplitMethod,
    pub block: PredictorBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MobNode {
    pub id: usize,
    pub depth: usize,
    pub n_obs: usize,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub split: Option<SplitRecord>,
    pub children: Option<Box<(MobNode, MobNode)>>,
    pub neg2loglik_local: f64,
    pub warning: Option<String>,
}

impl MobNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }

    pub fn n_leaves(&self) -> usize {
        match &self.children {
            None => 1,
            Some(kids) => kids.0.n_leaves() + kids.1.n_leaves(),
        }
    }

    fn leaf_neg2ll_sum(&self) -> f64 {
        match &self.children {
            None => self.neg2loglik_local,
            Some(kids) => kids.0.leaf_neg2ll_sum() + kids.1.leaf_neg2ll_sum(),
        }
    }

    /// Splits in pre-order.
    pub fn collect_splits<'a>(&'a self, out: &mut Vec<&'a SplitRecord>) {
        if let Some(s) = &self.split {
            out.push(s);
        }
        if let Some(kids) = &self.children {
            kids.0.collect_splits(out);
            kids.1.collect_splits(out);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MobTree {
    pub root: MobNode,
    /// Re-estimated global parametric coefficients (lambda side).
    pub phi1: Vec<f64>,
    /// Re-estimated global parametric coefficients (nu side).
    pub phi2: Vec<f64>,
    pub smooths_lambda: Vec<FittedSmooth>,
    pub smooths_nu: Vec<FittedSmooth>,
    pub total_local_neg2ll: f64,
    pub global_neg2ll: f64,
    pub settings: MobControl,
    pub x1_names: Vec<String>,
    pub x2_names: Vec<String>,
    pub w1_names: Vec<String>,
    pub w2_names: Vec<String>,
    pub moderator_names: Vec<String>,
}

impl MobTree {
    pub fn n_leaves(&self) -> usize {
        self.root.n_leaves()
    }

    pub fn splits(&self) -> Vec<&SplitRecord> {
        let mut out = Vec::new();
        self.root.collect_splits(&mut out);
        out
    }

    /// Indented text rendering of the tree.
    pub fn render(&self) -> String {
        let mut out = String::new();
        render_node(&self.root, 0, &mut out);
        out
    }
}

fn render_node(node: &MobNode, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    match (&node.split, &node.children) {
        (Some(s), Some(kids)) => {
            out.push_str(&format!(
                "{pad}[{}] {} <= {:.6} (stat={:.3}, p={:.4}, n={})\n",
                node.id, s.variable, s.point, s.statistic, s.p_value, node.n_obs
            ));
            render_node(&kids.0, indent + 1, out);
            render_node(&kids.1, indent + 1, out);
        }
        _ => {
            out.push_str(&format!(
                "{pad}[{}] leaf (n={}): beta={:?} gamma={:?} -2ll={:.2}\n",
                node.id,
                node.n_obs,
                node.beta.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
                node.gamma.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
                node.neg2loglik_local
            ));
        }
    }
}

/// Moderator matrix with names and kinds.
#[derive(Debug, Clone)]
pub struct Moderators {
    pub values: DMatrix<f64>,
    pub names: Vec<String>,
    pub kinds: Vec<ModeratorKind>,
}

impl Moderators {
    pub fn continuous(values: DMatrix<f64>, names: Vec<String>) -> Self {
        let kinds = vec![ModeratorKind::Continuous; values.ncols()];
        Self {
            values,
            names,
            kinds,
        }
    }
}

/// Everything the tree fitter needs.
pub struct MobInput<'a> {
    pub y: &'a [u64],
    /// Varying lambda-side design (per-node coefficients).
    pub x1: &'a DesignBlock,
    /// Global parametric lambda-side design.
    pub x2: Option<&'a DesignBlock>,
    pub smooths_lambda: &'a [SmoothData],
    /// Varying nu-side design.
    pub w1: &'a DesignBlock,
    pub w2: Option<&'a DesignBlock>,
    pub smooths_nu: &'a [SmoothData],
    pub moderators: &'a Moderators,
}

/// Result of a split-point search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSearch {
    pub point: f64,
    pub objective: f64,
    pub n_candidates: usize,
}

/// Node-level data handed to the split searches: designs carry the global
/// offsets, `warm` is the node model to start candidate refits from.
pub struct NodeData<'a> {
    pub y: &'a [u64],
    pub x1: &'a DesignBlock,
    pub w1: &'a DesignBlock,
    pub warm_beta: &'a DVector<f64>,
    pub warm_gamma: &'a DVector<f64>,
}

fn scan_control(control: &MobControl) -> GlmControl {
    GlmControl {
        max_iter: control.inner_refit_iters,
        step_halving: false,
        ..control.glm.clone()
    }
}

/// Admissible candidate thresholds: unique moderator values whose split
/// leaves both children at least `min_node_size` rows, thinned to equally
/// spaced quantiles when there are more than `quantile_thin_threshold`.
fn candidate_universe(moderator: &[f64], control: &MobControl) -> Vec<f64> {
    let n = moderator.len();
    let mut sorted = moderator.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut universe = Vec::new();
    let mut i = 0;
    while i < n {
        let v = sorted[i];
        // last index with this value = count of rows <= v
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == v {
            j += 1;
        }
        let left = j + 1;
        let right = n - left;
        if left >= control.min_node_size && right >= control.min_node_size {
            universe.push(v);
        }
        i = j + 1;
    }
    if universe.len() > control.quantile_thin_threshold && control.quantile_thin_threshold >= 2 {
        let m = universe.len();
        let t = control.quantile_thin_threshold;
        let mut thinned = Vec::with_capacity(t);
        for j in 0..t {
            let idx = (j as f64 * (m - 1) as f64 / (t - 1) as f64).round() as usize;
            thinned.push(universe[idx]);
        }
        thinned.dedup();
        universe = thinned;
    }
    universe
}

/// Evaluate the summed children -2ll for one threshold.
fn split_objective(
    data: &NodeData,
    moderator: &[f64],
    point: f64,
    control: &MobControl,
) -> Result<f64> {
    let n = data.y.len();
    let mut left_rows = Vec::new();
    let mut right_rows = Vec::new();
    for i in 0..n {
        if moderator[i] <= point {
            left_rows.push(i);
        } else {
            right_rows.push(i);
        }
    }
    if left_rows.len() < control.min_node_size || right_rows.len() < control.min_node_size {
        return Err(Error::NoValidSplit);
    }
    let ctrl = scan_control(control);
    let mut total = 0.0;
    for rows in [&left_rows, &right_rows] {
        let y: Vec<u64> = rows.iter().map(|&r| data.y[r]).collect();
        let x = data.x1.select_rows(rows);
        let w = data.w1.select_rows(rows);
        let fit = fit_cmp_glm_warm(
            &y,
            &x,
            &w,
            &[],
            &[],
            &ctrl,
            Some((data.warm_beta, data.warm_gamma)),
        )?;
        total += fit.neg2loglik;
    }
    Ok(total)
}

fn best_of(
    data: &NodeData,
    moderator: &[f64],
    candidates: &[f64],
    control: &MobControl,
) -> Result<SplitSearch> {
    let mut best: Option<(f64, f64)> = None;
    for &point in candidates {
        let Ok(obj) = split_objective(data, moderator, point, control) else {
            continue;
        };
        best = match best {
            None => Some((point, obj)),
            Some((bp, bo)) => {
                // ties go to the smaller threshold; candidates are ascending
                if obj < bo - TIE_TOL * (1.0 + bo.abs()) {
                    Some((point, obj))
                } else {
                    Some((bp, bo))
                }
            }
        };
    }
    match best {
        Some((point, objective)) => Ok(SplitSearch {
            point,
            objective,
            n_candidates: candidates.len(),
        }),
        None => Err(Error::NoValidSplit),
    }
}

/// Scan every admissible threshold with warm-started fixed-iteration refits.
pub fn exhaustive_split(
    data: &NodeData,
    moderator: &[f64],
    control: &MobControl,
) -> Result<SplitSearch> {
    let universe = candidate_universe(moderator, control);
    if universe.len() < 2 {
        return Err(Error::NoValidSplit);
    }
    best_of(data, moderator, &universe, control)
}

/// Change-point candidate sets from the GLR statistics of the stacked score
/// columns: the per-column argmax (`CpExact`) or the union of each column's
/// top `cp_percent` share of the universe (`CpTopPercent`).
pub fn changepoint_split(
    data: &NodeData,
    moderator: &[f64],
    scores: &DMatrix<f64>,
    control: &MobControl,
) -> Result<SplitSearch> {
    let universe = candidate_universe(moderator, control);
    if universe.len() < 2 {
        return Err(Error::NoValidSplit);
    }
    let stats = glr_change_stats(scores, moderator)?;
    let n = moderator.len();
    let mut sorted = moderator.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // k(t) = #rows <= t; D index = k - MIN_SEGMENT when admissible
    let mut with_d: Vec<(f64, usize)> = Vec::new(); // (threshold, D row index)
    for &t in &universe {
        let k = sorted.partition_point(|&v| v <= t);
        if k >= MIN_SEGMENT && k <= n - MIN_SEGMENT {
            with_d.push((t, k - MIN_SEGMENT));
        }
    }
    if with_d.is_empty() {
        return Err(Error::NoValidSplit);
    }
    let mut chosen: Vec<f64> = Vec::new();
    match control.split_method {
        SplitMethod::CpExact => {
            for col in 0..scores.ncols() {
                let d = &stats.d[col];
                let mut best = with_d[0];
                for &(t, idx) in &with_d {
                    if d[idx] > d[best.1] {
                        best = (t, idx);
                    }
                }
                chosen.push(best.0);
            }
        }
        _ => {
            // top cp_percent share of the universe, per column
            let m_top = ((control.cp_percent * with_d.len() as f64).ceil() as usize)
                .clamp(1, with_d.len());
            for col in 0..scores.ncols() {
                let d = &stats.d[col];
                let mut ranked: Vec<(f64, usize)> = with_d.clone();
                ranked.sort_by(|a, b| {
                    d[b.1]
                        .partial_cmp(&d[a.1])
                        .unwrap()
                        .then(a.0.partial_cmp(&b.0).unwrap())
                });
                for &(t, _) in ranked.iter().take(m_top) {
                    chosen.push(t);
                }
            }
        }
    }
    chosen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    chosen.dedup();
    best_of(data, moderator, &chosen, control)
}

/// Fluctuation tests for every (moderator, block) pair; the winning pair if
/// its Bonferroni-adjusted p-value is below alpha.
#[allow(clippy::type_complexity)]
pub fn select_split_variable(
    scores1: &DMatrix<f64>,
    scores2: &DMatrix<f64>,
    moderators: &Moderators,
    rows: Option<&[usize]>,
    control: &MobControl,
) -> Option<(usize, PredictorBlock, f64, f64)> {
    let l = moderators.names.len();
    let mut best: Option<(usize, PredictorBlock, f64, f64)> = None;
    for m in 0..l {
        let col: Vec<f64> = match rows {
            Some(rs) => rs.iter().map(|&r| moderators.values[(r, m)]).collect(),
            None => (0..moderators.values.nrows())
                .map(|i| moderators.values[(i, m)])
                .collect(),
        };
        for (block, scores) in [
            (PredictorBlock::Lambda, scores1),
            (PredictorBlock::Nu, scores2),
        ] {
            if scores.ncols() == 0 {
                continue;
            }
            let r = fluctuation_test(scores, &col, moderators.kinds[m], control.n_sim, control.seed);
            let better = match &best {
                None => true,
                Some((_, _, _, bp)) => r.p_value < *bp,
            };
            if better {
                best = Some((m, block, r.statistic, r.p_value));
            }
        }
    }
    let (m, block, stat, p) = best?;
    let n_tests = (2 * l) as f64;
    let adjusted = (p * n_tests).min(1.0);
    if adjusted < control.alpha {
        Some((m, block, stat, p))
    } else {
        None
    }
}

struct TreeGrower<'a> {
    input: &'a MobInput<'a>,
    control: &'a MobControl,
    offset1: DVector<f64>,
    offset2: DVector<f64>,
    next_id: usize,
}

impl<'a> TreeGrower<'a> {
    fn node_fit(
        &self,
        rows: &[usize],
        warm: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<GlmFit> {
        let y: Vec<u64> = rows.iter().map(|&r| self.input.y[r]).collect();
        let mut x = self.input.x1.select_rows(rows);
        let mut w = self.input.w1.select_rows(rows);
        x.offset = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.offset1[r]));
        w.offset = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.offset2[r]));
        fit_cmp_glm_warm(&y, &x, &w, &[], &[], &self.control.glm, warm)
    }

    fn grow(
        &mut self,
        rows: Vec<usize>,
        depth: usize,
        warm: Option<(&DVector<f64>, &DVector<f64>)>,
    ) -> Result<MobNode> {
        let id = self.next_id;
        self.next_id += 1;
        let fit = match self.node_fit(&rows, warm) {
            Ok(f) => f,
            Err(e) => {
                // a failed refit becomes an empty leaf with a warning
                return Ok(MobNode {
                    id,
                    depth,
                    n_obs: rows.len(),
                    beta: warm.map(|(b, _)| b.iter().copied().collect()).unwrap_or_default(),
                    gamma: warm.map(|(_, g)| g.iter().copied().collect()).unwrap_or_default(),
                    split: None,
                    children: None,
                    neg2loglik_local: f64::NAN,
                    warning: Some(format!("node refit failed: {e}")),
                });
            }
        };
        let mut node = MobNode {
            id,
            depth,
            n_obs: rows.len(),
            beta: fit.beta.iter().copied().collect(),
            gamma: fit.gamma.iter().copied().collect(),
            split: None,
            children: None,
            neg2loglik_local: fit.neg2loglik,
            warning: None,
        };
        if depth >= self.control.max_depth || rows.len() < 2 * self.control.min_node_size {
            return Ok(node);
        }
        let Some((m_idx, block, stat, p)) = select_split_variable(
            &fit.scores1,
            &fit.scores2,
            self.input.moderators,
            Some(&rows),
            self.control,
        ) else {
            return Ok(node);
        };

        let moderator: Vec<f64> = rows
            .iter()
            .map(|&r| self.input.moderators.values[(r, m_idx)])
            .collect();
        let mut x = self.input.x1.select_rows(&rows);
        let mut w = self.input.w1.select_rows(&rows);
        x.offset = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.offset1[r]));
        w.offset = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.offset2[r]));
        let y: Vec<u64> = rows.iter().map(|&r| self.input.y[r]).collect();
        let data = NodeData {
            y: &y,
            x1: &x,
            w1: &w,
            warm_beta: &fit.beta,
            warm_gamma: &fit.gamma,
        };
        let search = match self.control.split_method {
            SplitMethod::Exhaustive => exhaustive_split(&data, &moderator, self.control),
            _ => {
                let mut stacked =
                    DMatrix::zeros(rows.len(), fit.scores1.ncols() + fit.scores2.ncols());
                stacked
                    .view_mut((0, 0), (rows.len(), fit.scores1.ncols()))
                    .copy_from(&fit.scores1);
                stacked
                    .view_mut((0, fit.scores1.ncols()), (rows.len(), fit.scores2.ncols()))
                    .copy_from(&fit.scores2);
                changepoint_split(&data, &moderator, &stacked, self.control)
            }
        };
        let Ok(search) = search else {
            return Ok(node); // NoValidSplit: stay a leaf
        };

        let mut left_rows = Vec::new();
        let mut right_rows = Vec::new();
        for (local, &r) in rows.iter().enumerate() {
            if moderator[local] <= search.point {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        node.split = Some(SplitRecord {
            variable: self.input.moderators.names[m_idx].clone(),
            var_index: m_idx,
            point: search.point,
            statistic: stat,
            p_value: p,
            method: self.control.split_method,
            block,
        });
        let left = self.grow(left_rows, depth + 1, Some((&fit.beta, &fit.gamma)))?;
        let right = self.grow(right_rows, depth + 1, Some((&fit.beta, &fit.gamma)))?;
        node.children = Some(Box::new((left, right)));
        Ok(node)
    }
}

/// Fit the full CMPMOB model: global fit, tree growth with the global terms
/// as offsets, then one (or more) global re-estimation passes with the tree
/// as an offset.
pub fn fit_cmpmob(input: &MobInput, control: &MobControl) -> Result<MobTree> {
    let n = input.y.len();
    let p1 = input.x1.ncols();
    let q1 = input.w1.ncols();

    // global model: [x1 | x2] and [w1 | w2] plus smooths
    let x_glob = concat_blocks(input.x1, input.x2)?;
    let w_glob = concat_blocks(input.w1, input.w2)?;
    let global = fit_cmp_glm_warm(
        input.y,
        &x_glob,
        &w_glob,
        input.smooths_lambda,
        input.smooths_nu,
        &control.glm,
        None,
    )?;
    let global_neg2ll = global.neg2loglik;

    // fixed-effect offsets = fitted eta minus the varying part
    let mut offset1 = global.eta1.clone();
    let mut offset2 = global.eta2.clone();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..p1 {
            acc += input.x1.matrix[(i, j)] * global.beta[j];
        }
        offset1[i] -= acc;
        let mut acc = 0.0;
        for j in 0..q1 {
            acc += input.w1.matrix[(i, j)] * global.gamma[j];
        }
        offset2[i] -= acc;
    }

    let root_warm_b = DVector::from_iterator(p1, (0..p1).map(|j| global.beta[j]));
    let root_warm_g = DVector::from_iterator(q1, (0..q1).map(|j| global.gamma[j]));

    let mut phi1: Vec<f64> = (p1..global.beta.len()).map(|j| global.beta[j]).collect();
    let mut phi2: Vec<f64> = (q1..global.gamma.len()).map(|j| global.gamma[j]).collect();
    let mut smooths_lambda = global.smooths_lambda.clone();
    let mut smooths_nu = global.smooths_nu.clone();

    let mut root = None;
    for pass in 0..control.backfit_passes.max(1) {
        let mut grower = TreeGrower {
            input,
            control,
            offset1: offset1.clone(),
            offset2: offset2.clone(),
            next_id: 1,
        };
        let tree_root = grower.grow((0..n).collect(), 0, Some((&root_warm_b, &root_warm_g)))?;

        // re-estimate the global effects with the tree as an offset
        let has_globals = input.x2.map(|b| b.ncols()).unwrap_or(0)
            + input.w2.map(|b| b.ncols()).unwrap_or(0)
            + input.smooths_lambda.len()
            + input.smooths_nu.len()
            > 0;
        if has_globals {
            let (tree_off1, tree_off2) = tree_offsets(&tree_root, input, n);
            let x2 = match input.x2 {
                Some(b) => b.replacing_offset(tree_off1)?,
                None => DesignBlock::with_offset(
                    DMatrix::zeros(n, 0),
                    vec![],
                    tree_off1,
                )?,
            };
            let w2 = match input.w2 {
                Some(b) => b.replacing_offset(tree_off2)?,
                None => DesignBlock::with_offset(
                    DMatrix::zeros(n, 0),
                    vec![],
                    tree_off2,
                )?,
            };
            let refit = fit_cmp_glm_warm(
                input.y,
                &x2,
                &w2,
                input.smooths_lambda,
                input.smooths_nu,
                &control.glm,
                None,
            )?;
            phi1 = refit.beta.iter().copied().collect();
            phi2 = refit.gamma.iter().copied().collect();
            smooths_lambda = refit.smooths_lambda.clone();
            smooths_nu = refit.smooths_nu.clone();
            if pass + 1 < control.backfit_passes {
                // refresh the node offsets for another growth pass
                let (t1, t2) = tree_offsets(&tree_root, input, n);
                offset1 = refit.eta1.clone() - t1;
                offset2 = refit.eta2.clone() - t2;
            }
        }
        root = Some(tree_root);
    }
    let root = root.expect("at least one growth pass");

    let total_local_neg2ll = root.leaf_neg2ll_sum();
    Ok(MobTree {
        root,
        phi1,
        phi2,
        smooths_lambda,
        smooths_nu,
        total_local_neg2ll,
        global_neg2ll,
        settings: control.clone(),
        x1_names: input.x1.column_names.clone(),
        x2_names: input
            .x2
            .map(|b| b.column_names.clone())
            .unwrap_or_default(),
        w1_names: input.w1.column_names.clone(),
        w2_names: input
            .w2
            .map(|b| b.column_names.clone())
            .unwrap_or_default(),
        moderator_names: input.moderators.names.clone(),
    })
}

/// Per-row varying-part predictors from the fitted tree.
fn tree_offsets(root: &MobNode, input: &MobInput, n: usize) -> (DVector<f64>, DVector<f64>) {
    let mut o1 = DVector::zeros(n);
    let mut o2 = DVector::zeros(n);
    for i in 0..n {
        let leaf = route_row(root, |m| input.moderators.values[(i, m)]);
        let mut acc = 0.0;
        for j in 0..input.x1.ncols() {
            acc += input.x1.matrix[(i, j)] * leaf.beta[j];
        }
        o1[i] = acc;
        let mut acc = 0.0;
        for j in 0..input.w1.ncols() {
            acc += input.w1.matrix[(i, j)] * leaf.gamma[j];
        }
        o2[i] = acc;
    }
    (o1, o2)
}

fn route_row<'t>(node: &'t MobNode, moderator_value: impl Fn(usize) -> f64 + Copy) -> &'t MobNode {
    match (&node.split, &node.children) {
        (Some(s), Some(kids)) => {
            if moderator_value(s.var_index) <= s.point {
                route_row(&kids.0, moderator_value)
            } else {
                route_row(&kids.1, moderator_value)
            }
        }
        _ => node,
    }
}

fn concat_blocks(a: &DesignBlock, b: Option<&DesignBlock>) -> Result<DesignBlock> {
    match b {
        None => Ok(a.clone()),
        Some(b) => {
            let n = a.nrows();
            if b.nrows() != n {
                return Err(Error::Shape("design blocks differ in rows".into()));
            }
            let mut m = DMatrix::zeros(n, a.ncols() + b.ncols());
            m.view_mut((0, 0), (n, a.ncols())).copy_from(&a.matrix);
            m.view_mut((0, a.ncols()), (n, b.ncols())).copy_from(&b.matrix);
            let mut names = a.column_names.clone();
            names.extend(b.column_names.iter().cloned());
            DesignBlock::new(m, names)
        }
    }
}

/// Per-row predictions from a fitted tree.
#[derive(Debug, Clone, Copy)]
pub struct MobPrediction {
    pub lambda: f64,
    pub nu: f64,
    pub mean: f64,
    pub eta1: f64,
    pub eta2: f64,
}

/// Inputs for prediction; smooth value vectors are aligned with the tree's
/// fitted smooth lists.
pub struct MobPredictInput<'a> {
    pub x1: &'a DMatrix<f64>,
    pub x2: Option<&'a DMatrix<f64>>,
    pub smooth_lambda_values: Vec<&'a DVector<f64>>,
    pub w1: &'a DMatrix<f64>,
    pub w2: Option<&'a DMatrix<f64>>,
    pub smooth_nu_values: Vec<&'a DVector<f64>>,
    pub moderators: &'a DMatrix<f64>,
}

pub fn predict_mob(
    tree: &MobTree,
    input: &MobPredictInput,
    policy: &crate::cmp::TruncationPolicy,
) -> Result<Vec<MobPrediction>> {
    let n = input.x1.nrows();
    if input.smooth_lambda_values.len() != tree.smooths_lambda.len()
        || input.smooth_nu_values.len() != tree.smooths_nu.len()
    {
        return Err(Error::Shape("smooth value vectors do not match the fit".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let leaf = route_row(&tree.root, |m| input.moderators[(i, m)]);
        let mut eta1 = 0.0;
        for j in 0..input.x1.ncols() {
            eta1 += input.x1[(i, j)] * leaf.beta[j];
        }
        if let Some(x2) = input.x2 {
            for j in 0..x2.ncols() {
                eta1 += x2[(i, j)] * tree.phi1[j];
            }
        }
        for (s, vals) in tree.smooths_lambda.iter().zip(&input.smooth_lambda_values) {
            eta1 += s.eval(vals[i]);
        }
        let mut eta2 = 0.0;
        for j in 0..input.w1.ncols() {
            eta2 += input.w1[(i, j)] * leaf.gamma[j];
        }
        if let Some(w2) = input.w2 {
            for j in 0..w2.ncols() {
                eta2 += w2[(i, j)] * tree.phi2[j];
            }
        }
        for (s, vals) in tree.smooths_nu.iter().zip(&input.smooth_nu_values) {
            eta2 += s.eval(vals[i]);
        }
        let nu = eta2.clamp(-crate::irls::LN_NU_CLAMP, crate::irls::LN_NU_CLAMP).exp();
        let m = moments_ext_ln(eta1, nu, policy)?;
        out.push(MobPrediction {
            lambda: eta1.exp(),
            nu,
            mean: m.mean,
            eta1,
            eta2,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmp::{CmpParams, CmpSampler, TruncationPolicy};
    use crate::sim::{generate, Sim1Parts, SimDesign, Study};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fast_control(method: SplitMethod) -> MobControl {
        MobControl {
            split_method: method,
            ..Default::default()
        }
    }

    /// identical data blocks per moderator level, Poisson with fixed nu
    fn tied_blocks() -> (Vec<u64>, DesignBlock, DesignBlock, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let policy = TruncationPolicy::default();
        let block: Vec<u64> = {
            let s = CmpSampler::new(CmpParams::new(3.0, 1.0).unwrap(), &policy).unwrap();
            (0..60).map(|_| s.draw(&mut rng)).collect()
        };
        let levels = 9usize;
        let mut y = Vec::new();
        let mut z = Vec::new();
        for l in 0..levels {
            y.extend(block.iter().copied());
            z.extend(std::iter::repeat(0.1 * (l + 1) as f64).take(block.len()));
        }
        let n = y.len();
        (y, DesignBlock::intercept(n), DesignBlock::intercept(n), z)
    }

    #[test]
    fn flat_objective_ties_break_to_smallest_threshold() {
        let (y, x, w, z) = tied_blocks();
        let mut control = fast_control(SplitMethod::Exhaustive);
        control.glm.fix_nu = Some(1.0);
        let warm_b = nalgebra::DVector::from_element(1, 3.0f64.ln());
        let warm_g = nalgebra::DVector::zeros(1);
        let data = NodeData {
            y: &y,
            x1: &x,
            w1: &w,
            warm_beta: &warm_b,
            warm_gamma: &warm_g,
        };
        let s = exhaustive_split(&data, &z, &control).unwrap();
        // the smallest admissible threshold (60 rows per level, min size 50)
        assert!((s.point - 0.1).abs() < 1e-12, "point {}", s.point);
    }

    #[test]
    fn cp_top_100_percent_matches_exhaustive() {
        let design = SimDesign {
            study: Study::Sim1SameModerators,
            n: 500,
            seed: 32,
        };
        let data = generate(&design).unwrap();
        let parts = Sim1Parts::from_data(&data).unwrap();
        // plain node data: no offsets, warm from a quick fit
        let control = fast_control(SplitMethod::Exhaustive);
        let fit = crate::irls::fit_cmp_glm(
            &data.y,
            &parts.x1,
            &parts.w1,
            &[],
            &[],
            &control.glm,
        )
        .unwrap();
        let z1: Vec<f64> = data.column("z1").to_vec();
        let node = NodeData {
            y: &data.y,
            x1: &parts.x1,
            w1: &parts.w1,
            warm_beta: &fit.beta,
            warm_gamma: &fit.gamma,
        };
        let exh = exhaustive_split(&node, &z1, &control).unwrap();

        let mut stacked = DMatrix::zeros(data.n(), 5);
        stacked
            .view_mut((0, 0), (data.n(), 3))
            .copy_from(&fit.scores1);
        stacked
            .view_mut((0, 3), (data.n(), 2))
            .copy_from(&fit.scores2);
        let mut top_control = fast_control(SplitMethod::CpTopPercent);
        top_control.cp_percent = 1.0;
        let top = changepoint_split(&node, &z1, &stacked, &top_control).unwrap();
        assert_eq!(exh.point, top.point);
        assert!((exh.objective - top.objective).abs() < 1e-9);

        // ordering: exhaustive <= top% <= exact, up to slack
        let mut exact_control = fast_control(SplitMethod::CpExact);
        exact_control.cp_percent = 0.10;
        let exact = changepoint_split(&node, &z1, &stacked, &exact_control).unwrap();
        let mut top10_control = fast_control(SplitMethod::CpTopPercent);
        top10_control.cp_percent = 0.10;
        let top10 = changepoint_split(&node, &z1, &stacked, &top10_control).unwrap();
        assert!(exh.objective <= top10.objective + 1e-6);
        assert!(top10.objective <= exact.objective + 1e-6);
    }

    #[test]
    fn two_segment_poisson_jump_is_recovered() {
        // ln lambda jumps at z = 0.5; oracle = full-convergence refits over
        // the same thresholds
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let policy = TruncationPolicy::default();
        let n = 600;
        let z: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 50.0).round() / 50.0).collect();
        let mut y = Vec::with_capacity(n);
        for &zi in &z {
            let lam = if zi <= 0.5 { 2.0f64 } else { 6.0 };
            let s = CmpSampler::new(CmpParams::new(lam, 1.0).unwrap(), &policy).unwrap();
            y.push(s.draw(&mut rng));
        }
        let x = DesignBlock::intercept(n);
        let w = DesignBlock::intercept(n);
        let mut control = fast_control(SplitMethod::Exhaustive);
        control.glm.fix_nu = Some(1.0);
        let fit = crate::irls::fit_cmp_glm(&y, &x, &w, &[], &[], &control.glm).unwrap();
        let node = NodeData {
            y: &y,
            x1: &x,
            w1: &w,
            warm_beta: &fit.beta,
            warm_gamma: &fit.gamma,
        };
        let s = exhaustive_split(&node, &z, &control).unwrap();
        assert!(
            (s.point - 0.5).abs() <= 0.02 + 1e-12,
            "recovered {} (expected near 0.5)",
            s.point
        );

        // oracle: fully-converged refits, same candidate set
        let mut oracle_best = (f64::INFINITY, f64::NAN);
        let mut sorted = z.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        sorted.dedup();
        for &t in &sorted {
            let l: Vec<usize> = (0..n).filter(|&i| z[i] <= t).collect();
            let r: Vec<usize> = (0..n).filter(|&i| z[i] > t).collect();
            if l.len() < 50 || r.len() < 50 {
                continue;
            }
            let mut obj = 0.0;
            let mut ok = true;
            for rows in [&l, &r] {
                let ys: Vec<u64> = rows.iter().map(|&i| y[i]).collect();
                let xs = x.select_rows(rows);
                let ws = w.select_rows(rows);
                match crate::irls::fit_cmp_glm(&ys, &xs, &ws, &[], &[], &control.glm) {
                    Ok(f) => obj += f.neg2loglik,
                    Err(_) => ok = false,
                }
            }
            if ok && obj < oracle_best.0 {
                oracle_best = (obj, t);
            }
        }
        // within one order-statistic gap of the oracle's threshold
        let gap = 0.02 + 1e-12;
        assert!(
            (s.point - oracle_best.1).abs() <= gap,
            "scan {} vs oracle {}",
            s.point,
            oracle_best.1
        );
    }

    #[test]
    fn no_split_when_all_p_values_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let n = 300;
        let scores1 = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>() - 0.5);
        let scores2 = DMatrix::from_fn(n, 1, |_, _| rng.gen::<f64>() - 0.5);
        let zm = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
        let mods = Moderators::continuous(zm, vec!["a".into(), "b".into(), "c".into()]);
        let mut control = MobControl::default();
        control.alpha = 1e-6; // force non-significance
        let sel = select_split_variable(&scores1, &scores2, &mods, None, &control);
        assert!(sel.is_none());
    }

    #[test]
    fn shifted_scores_select_the_right_moderator() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let n = 400;
        let zm = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
        let mut scores1 = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>() - 0.5);
        for i in 0..n {
            if zm[(i, 1)] > 0.6 {
                scores1[(i, 0)] += 1.0;
            }
        }
        let scores2 = DMatrix::from_fn(n, 1, |_, _| rng.gen::<f64>() - 0.5);
        let mods = Moderators::continuous(zm, vec!["a".into(), "b".into(), "c".into()]);
        let control = MobControl::default();
        let sel = select_split_variable(&scores1, &scores2, &mods, None, &control).unwrap();
        assert_eq!(sel.0, 1);
        assert!(matches!(sel.1, PredictorBlock::Lambda));
    }

    #[test]
    fn sim1_tree_has_structure_and_valid_bands() {
        let design = SimDesign {
            study: Study::Sim1SameModerators,
            n: 1000,
            seed: 36,
        };
        let data = generate(&design).unwrap();
        let parts = Sim1Parts::from_data(&data).unwrap();
        let control = fast_control(SplitMethod::CpExact);
        let tree = fit_cmpmob(&parts.input(&data.y), &control).unwrap();
        assert_eq!(tree.n_leaves(), 2, "tree:\n{}", tree.render());
        let split = &tree.splits()[0];
        assert_eq!(split.variable, "z1");
        assert!((split.point - 0.65).abs() < 0.03, "split {}", split.point);
        // monotone improvement: children beat the parent
        let kids = tree.root.children.as_ref().unwrap();
        assert!(
            kids.0.neg2loglik_local + kids.1.neg2loglik_local
                <= tree.root.neg2loglik_local + 1e-6
        );
        // local fit beats the global model on training data
        assert!(tree.total_local_neg2ll <= tree.global_neg2ll + 1e-6);
    }

    #[test]
    fn training_predictions_are_consistent_with_tree_components() {
        let design = SimDesign {
            study: Study::Sim1SameModerators,
            n: 600,
            seed: 37,
        };
        let data = generate(&design).unwrap();
        let parts = Sim1Parts::from_data(&data).unwrap();
        let control = fast_control(SplitMethod::CpExact);
        let tree = fit_cmpmob(&parts.input(&data.y), &control).unwrap();
        let policy = TruncationPolicy::default();
        let x3 = nalgebra::DVector::from_row_slice(data.column("x3"));
        let w2 = nalgebra::DVector::from_row_slice(data.column("w2"));
        let input = MobPredictInput {
            x1: &parts.x1.matrix,
            x2: None,
            smooth_lambda_values: vec![&x3],
            w1: &parts.w1.matrix,
            w2: None,
            smooth_nu_values: vec![&w2],
            moderators: &parts.moderators.values,
        };
        let preds = predict_mob(&tree, &input, &policy).unwrap();
        // independent assembly of eta per row
        for i in (0..data.n()).step_by(53) {
            let leaf = route_row(&tree.root, |m| parts.moderators.values[(i, m)]);
            let mut eta1 = 0.0;
            for j in 0..3 {
                eta1 += parts.x1.matrix[(i, j)] * leaf.beta[j];
            }
            eta1 += tree.smooths_lambda[0].eval(x3[i]);
            assert!((preds[i].eta1 - eta1).abs() < 1e-10);
            // nu = 1 leaves mean = lambda for a Poisson row
            if (preds[i].eta2).abs() < 1e-12 {
                assert!((preds[i].mean - preds[i].lambda).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn held_out_deviance_beats_global_model() {
        let train = generate(&SimDesign {
            study: Study::Sim1SameModerators,
            n: 1000,
            seed: 38,
        })
        .unwrap();
        let test = generate(&SimDesign {
            study: Study::Sim1SameModerators,
            n: 500,
            seed: 39,
        })
        .unwrap();
        let parts = Sim1Parts::from_data(&train).unwrap();
        let control = fast_control(SplitMethod::CpExact);
        let tree = fit_cmpmob(&parts.input(&train.y), &control).unwrap();
        assert!(tree.n_leaves() >= 2);

        let policy = TruncationPolicy::default();
        let test_parts = Sim1Parts::from_data(&test).unwrap();
        let x3 = nalgebra::DVector::from_row_slice(test.column("x3"));
        let w2 = nalgebra::DVector::from_row_slice(test.column("w2"));
        let input = MobPredictInput {
            x1: &test_parts.x1.matrix,
            x2: None,
            smooth_lambda_values: vec![&x3],
            w1: &test_parts.w1.matrix,
            w2: None,
            smooth_nu_values: vec![&w2],
            moderators: &test_parts.moderators.values,
        };
        let preds = predict_mob(&tree, &input, &policy).unwrap();
        let eta1 = nalgebra::DVector::from_iterator(test.n(), preds.iter().map(|p| p.eta1));
        let nu = nalgebra::DVector::from_iterator(test.n(), preds.iter().map(|p| p.nu));
        let lf = crate::irls::ln_factorial_vec(&test.y);
        let tree_dev = crate::irls::neg2_loglik(&test.y, &eta1, &nu, &lf, &policy).unwrap();

        // global model on the training data, evaluated on the test rows
        let global = crate::irls::fit_cmp_glm(
            &train.y,
            &parts.x1,
            &parts.w1,
            &parts.smooths_lambda,
            &parts.smooths_nu,
            &control.glm,
        )
        .unwrap();
        let mut geta1 = nalgebra::DVector::zeros(test.n());
        let mut geta2 = nalgebra::DVector::zeros(test.n());
        for i in 0..test.n() {
            for j in 0..3 {
                geta1[i] += test_parts.x1.matrix[(i, j)] * global.beta[j];
            }
            geta1[i] += global.smooths_lambda[0].eval(x3[i]);
            for j in 0..2 {
                geta2[i] += test_parts.w1.matrix[(i, j)] * global.gamma[j];
            }
            geta2[i] += global.smooths_nu[0].eval(w2[i]);
        }
        let gnu = nalgebra::DVector::from_iterator(
            test.n(),
            geta2.iter().map(|&e: &f64| e.clamp(-20.0, 20.0).exp()),
        );
        let global_dev = crate::irls::neg2_loglik(&test.y, &geta1, &gnu, &lf, &policy).unwrap();
        assert!(
            tree_dev < global_dev,
            "tree {tree_dev} vs global {global_dev}"
        );
    }

    #[test]
    fn row_permutation_does_not_change_the_tree() {
        let design = SimDesign {
            study: Study::Sim1SameModerators,
            n: 500,
            seed: 40,
        };
        let data = generate(&design).unwrap();
        let parts = Sim1Parts::from_data(&data).unwrap();
        let mut control = fast_control(SplitMethod::CpExact);
        control.glm.tol = 1e-14;
        control.glm.max_iter = 800;
        let tree = fit_cmpmob(&parts.input(&data.y), &control).unwrap();

        // permute rows deterministically
        let n = data.n();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut pdata = data.clone();
        pdata.y = perm.iter().map(|&i| data.y[i]).collect();
        for (_, col) in pdata.columns.iter_mut() {
            let orig = col.clone();
            for (new_i, &old_i) in perm.iter().enumerate() {
                col[new_i] = orig[old_i];
            }
        }
        let pparts = Sim1Parts::from_data(&pdata).unwrap();
        let ptree = fit_cmpmob(&pparts.input(&pdata.y), &control).unwrap();

        assert_eq!(tree.n_leaves(), ptree.n_leaves());
        let (s1, s2) = (tree.splits(), ptree.splits());
        for (a, b) in s1.iter().zip(&s2) {
            assert_eq!(a.variable, b.variable);
            assert_eq!(a.point, b.point, "thresholds differ");
        }
        // leaf coefficients agree tightly
        fn leaves<'t>(node: &'t MobNode, out: &mut Vec<&'t MobNode>) {
            match &node.children {
                None => out.push(node),
                Some(kids) => {
                    leaves(&kids.0, out);
                    leaves(&kids.1, out);
                }
            }
        }
        let (mut l1, mut l2) = (Vec::new(), Vec::new());
        leaves(&tree.root, &mut l1);
        leaves(&ptree.root, &mut l2);
        for (a, b) in l1.iter().zip(&l2) {
            for (ca, cb) in a.beta.iter().zip(&b.beta) {
                assert!((ca - cb).abs() <= 1e-8, "beta {ca} vs {cb}");
            }
            for (ca, cb) in a.gamma.iter().zip(&b.gamma) {
                assert!((ca - cb).abs() <= 1e-8, "gamma {ca} vs {cb}");
            }
        }
    }
}
