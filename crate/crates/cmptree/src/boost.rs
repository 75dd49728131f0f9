//! CMPBoost: gradient boosting of both CMP linear predictors with PartReg
//! varying-coefficient trees as base learners.
//!
//! Each iteration fits one tree per predictor to the working residuals of the
//! IRLS half-steps, using the same weights, and advances the predictor by a
//! damped step `xi`. Global terms are estimated once in the initial fit and
//! never boosted.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignBlock;
use crate::error::{Error, Result};
use crate::irls::{fit_cmp_glm_warm, GlmControl, GlmFit, LN_NU_CLAMP};
use crate::mob::Moderators;
use crate::partreg::{fit_partreg, BaseTree, PartRegControl};
use crate::spline::SmoothData;

const WEIGHT_FLOOR: f64 = 1e-10;
/// Consecutive -2ll increases before the run is declared divergent.
const DIVERGENCE_PATIENCE: usize = 20;

#[derive(Debug, Clone)]
pub struct BoostControl {
    /// Learning rate in (0, 1].
    pub xi: f64,
    /// Terminal nodes per base learner.
    pub max_leaves: usize,
    pub b_max: usize,
    pub min_node_size: usize,
    /// Relative -2ll improvement over `stop_window` iterations below which
    /// the run stops.
    pub stop_tol: f64,
    pub stop_window: usize,
    pub glm: GlmControl,
}

impl Default for BoostControl {
    fn default() -> Self {
        Self {
            xi: 0.1,
            max_leaves: 2,
            b_max: 1000,
            min_node_size: 20,
            stop_tol: 1e-6,
            stop_window: 10,
            glm: GlmControl::default(),
        }
    }
}

impl BoostControl {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return Err(Error::Domain(format!(
                "learning rate must be in (0, 1], got {}",
                self.xi
            )));
        }
        if self.max_leaves < 2 {
            return Err(Error::Domain("base learners need at least 2 leaves".into()));
        }
        Ok(())
    }
}

pub struct BoostInput<'a> {
    pub y: &'a [u64],
    /// Varying lambda-side design (boosted).
    pub x1: &'a DesignBlock,
    /// Global lambda-side design (estimated once).
    pub x2: Option<&'a DesignBlock>,
    pub smooths_lambda: &'a [SmoothData],
    pub w1: &'a DesignBlock,
    pub w2: Option<&'a DesignBlock>,
    pub smooths_nu: &'a [SmoothData],
    /// Moderators for the lambda predictor's trees.
    pub mods_lambda: &'a Moderators,
    /// Moderators for the nu predictor's trees.
    pub mods_nu: &'a Moderators,
}

#[derive(Debug, Clone)]
pub struct BoostModel {
    pub init: GlmFit,
    pub trees1: Vec<BaseTree>,
    pub trees2: Vec<BaseTree>,
    pub xi: f64,
    /// Iterations actually used (tree list length after truncation).
    pub b: usize,
    pub neg2ll_path: Vec<f64>,
    pub diverged: bool,
    /// Per-moderator accumulated delta-SSE, lambda side.
    pub sse_mass1: Vec<f64>,
    pub sse_mass2: Vec<f64>,
    pub mods_lambda_names: Vec<String>,
    pub mods_nu_names: Vec<String>,
    pub mods_lambda_means: Vec<f64>,
    pub mods_nu_means: Vec<f64>,
    /// Number of varying design columns per side.
    pub p1: usize,
    pub q1: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Predictor {
    Lambda,
    Nu,
}

fn column_means(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.ncols())
        .map(|j| m.column(j).sum() / m.nrows() as f64)
        .collect()
}

/// Fit the boosted semi-varying coefficient model.
pub fn fit_cmpboost(input: &BoostInput, control: &BoostControl) -> Result<BoostModel> {
    control.validate()?;
    let n = input.y.len();
    let p1 = input.x1.ncols();
    let q1 = input.w1.ncols();

    // f^(0): no-varying-coefficient fit including any global terms
    let x_glob = concat(input.x1, input.x2)?;
    let w_glob = concat(input.w1, input.w2)?;
    let init = fit_cmp_glm_warm(
        input.y,
        &x_glob,
        &w_glob,
        input.smooths_lambda,
        input.smooths_nu,
        &control.glm,
        None,
    )?;

    let lf_y = crate::irls::ln_factorial_vec(input.y);
    let policy = control.glm.policy;
    let fix_nu = control.glm.fix_nu;

    let mut eta1 = init.eta1.clone();
    let mut eta2 = init.eta2.clone();
    let nu_of = |eta2: &DVector<f64>| -> DVector<f64> {
        match fix_nu {
            Some(v) => DVector::from_element(n, v),
            None => DVector::from_iterator(
                n,
                eta2.iter().map(|&e| e.clamp(-LN_NU_CLAMP, LN_NU_CLAMP).exp()),
            ),
        }
    };
    let mut nu = nu_of(&eta2);

    let tree_control = PartRegControl {
        max_leaves: control.max_leaves,
        min_node_size: control.min_node_size,
    };

    let mut trees1: Vec<BaseTree> = Vec::new();
    let mut trees2: Vec<BaseTree> = Vec::new();
    let mut path = vec![crate::irls::neg2_loglik(input.y, &eta1, &nu, &lf_y, &policy)?];
    let mut best = (0usize, path[0]); // (iteration, -2ll)
    let mut rising = 0usize;
    let mut diverged = false;

    for b in 1..=control.b_max {
        // lambda step
        let mom = row_moments(&eta1, &nu, &policy)?;
        let r1 = DVector::from_iterator(
            n,
            (0..n).map(|i| (input.y[i] as f64 - mom.0[i]) / mom.1[i].max(WEIGHT_FLOOR)),
        );
        let w1v = DVector::from_iterator(n, (0..n).map(|i| mom.1[i].max(WEIGHT_FLOOR)));
        let t1 = fit_partreg(
            &r1,
            &w1v,
            &input.x1.matrix,
            &input.mods_lambda.values,
            &tree_control,
        );
        eta1 += control.xi * t1.predict(&input.x1.matrix, &input.mods_lambda.values);
        trees1.push(t1);

        // nu step
        if fix_nu.is_none() {
            let mom = row_moments(&eta1, &nu, &policy)?;
            let r2 = DVector::from_iterator(
                n,
                (0..n).map(|i| (mom.2[i] - lf_y[i]) / mom.3[i].max(WEIGHT_FLOOR)),
            );
            let w2v = DVector::from_iterator(
                n,
                (0..n).map(|i| mom.3[i].max(WEIGHT_FLOOR) * nu[i] * nu[i]),
            );
            let t2 = fit_partreg(
                &r2,
                &w2v,
                &input.w1.matrix,
                &input.mods_nu.values,
                &tree_control,
            );
            eta2 += control.xi * t2.predict(&input.w1.matrix, &input.mods_nu.values);
            nu = nu_of(&eta2);
            trees2.push(t2);
        }

        let d = match crate::irls::neg2_loglik(input.y, &eta1, &nu, &lf_y, &policy) {
            Ok(d) => d,
            Err(_) => f64::INFINITY, // overflowing step counts as divergence
        };
        path.push(d);
        if d < best.1 {
            best = (b, d);
            rising = 0;
        } else {
            rising += 1;
            if rising >= DIVERGENCE_PATIENCE {
                diverged = true;
                break;
            }
        }
        if b >= control.stop_window {
            let before = path[b - control.stop_window];
            let rel = (before - d) / before.abs().max(1.0);
            if rel < control.stop_tol {
                break;
            }
        }
    }

    // divergence returns the best iterate
    let b_used = if diverged { best.0 } else { trees1.len() };
    trees1.truncate(b_used);
    trees2.truncate(b_used.min(trees2.len()));
    path.truncate(b_used + 1);

    let mut sse_mass1 = vec![0.0; input.mods_lambda.values.ncols()];
    for t in &trees1 {
        for s in &t.split_log {
            sse_mass1[s.var] += s.delta_sse;
        }
    }
    let mut sse_mass2 = vec![0.0; input.mods_nu.values.ncols()];
    for t in &trees2 {
        for s in &t.split_log {
            sse_mass2[s.var] += s.delta_sse;
        }
    }

    Ok(BoostModel {
        init,
        trees1,
        trees2,
        xi: control.xi,
        b: b_used,
        neg2ll_path: path,
        diverged,
        sse_mass1,
        sse_mass2,
        mods_lambda_names: input.mods_lambda.names.clone(),
        mods_nu_names: input.mods_nu.names.clone(),
        mods_lambda_means: column_means(&input.mods_lambda.values),
        mods_nu_means: column_means(&input.mods_nu.values),
        p1,
        q1,
    })
}

/// (mean, variance, mean_lnfact, var_lnfact) per row.
#[allow(clippy::type_complexity)]
fn row_moments(
    eta1: &DVector<f64>,
    nu: &DVector<f64>,
    policy: &crate::cmp::TruncationPolicy,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
    let n = eta1.len();
    let mut m = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut ml = DVector::zeros(n);
    let mut vl = DVector::zeros(n);
    for i in 0..n {
        let mm = crate::cmp::moments_ext_ln(eta1[i], nu[i], policy)?;
        m[i] = mm.mean;
        v[i] = mm.variance;
        ml[i] = mm.mean_lnfact;
        vl[i] = mm.var_lnfact;
    }
    Ok((m, v, ml, vl))
}

fn concat(a: &DesignBlock, b: Option<&DesignBlock>) -> Result<DesignBlock> {
    match b {
        None => Ok(a.clone()),
        Some(b) => {
            let n = a.nrows();
            if b.nrows() != n {
                return Err(Error::Shape("design blocks differ in rows".into()));
            }
            let mut m = DMatrix::zeros(n, a.ncols() + b.ncols());
            m.view_mut((0, 0), (n, a.ncols())).copy_from(&a.matrix);
            m.view_mut((0, a.ncols()), (n, b.ncols()))
                .copy_from(&b.matrix);
            let mut names = a.column_names.clone();
            names.extend(b.column_names.iter().cloned());
            DesignBlock::new(m, names)
        }
    }
}

/// I_j^2 = (1/B) sum_b sum_splits deltaSSE 1(split var = j), by name.
pub fn variable_importance(model: &BoostModel, predictor: Predictor) -> Vec<(String, f64)> {
    let (mass, names, b) = match predictor {
        Predictor::Lambda => (&model.sse_mass1, &model.mods_lambda_names, model.trees1.len()),
        Predictor::Nu => (&model.sse_mass2, &model.mods_nu_names, model.trees2.len()),
    };
    let b = b.max(1) as f64;
    names
        .iter()
        .cloned()
        .zip(mass.iter().map(|&m| m / b))
        .collect()
}

/// The accumulated varying coefficient `coef_index` evaluated along one
/// moderator, the others held at their training means.
pub fn partial_dependence(
    model: &BoostModel,
    predictor: Predictor,
    coef_index: usize,
    moderator_index: usize,
    grid: &[f64],
) -> Vec<(f64, f64)> {
    let (trees, means, init_coef) = match predictor {
        Predictor::Lambda => (
            &model.trees1,
            &model.mods_lambda_means,
            model.init.beta[coef_index],
        ),
        Predictor::Nu => (
            &model.trees2,
            &model.mods_nu_means,
            model.init.gamma[coef_index],
        ),
    };
    let mut profile = means.clone();
    grid.iter()
        .map(|&g| {
            profile[moderator_index] = g;
            let mut value = init_coef;
            for t in trees {
                value += model.xi * t.leaf_coef(&profile)[coef_index];
            }
            (g, value)
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct BoostPrediction {
    pub eta1: f64,
    pub eta2: f64,
    pub lambda: f64,
    pub nu: f64,
    pub mean: f64,
}

pub struct BoostPredictInput<'a> {
    pub x1: &'a DMatrix<f64>,
    pub x2: Option<&'a DMatrix<f64>>,
    pub smooth_lambda_values: Vec<&'a DVector<f64>>,
    pub w1: &'a DMatrix<f64>,
    pub w2: Option<&'a DMatrix<f64>>,
    pub smooth_nu_values: Vec<&'a DVector<f64>>,
    pub mods_lambda: &'a DMatrix<f64>,
    pub mods_nu: &'a DMatrix<f64>,
}

/// Accumulate the boosted predictors for new rows; `b_limit` truncates to the
/// first `b` trees.
pub fn predict_boost(
    model: &BoostModel,
    input: &BoostPredictInput,
    b_limit: Option<usize>,
    policy: &crate::cmp::TruncationPolicy,
) -> Result<Vec<BoostPrediction>> {
    let n = input.x1.nrows();
    let b1 = b_limit.unwrap_or(model.trees1.len()).min(model.trees1.len());
    let b2 = b_limit.unwrap_or(model.trees2.len()).min(model.trees2.len());
    if input.smooth_lambda_values.len() != model.init.smooths_lambda.len()
        || input.smooth_nu_values.len() != model.init.smooths_nu.len()
    {
        return Err(Error::Shape("smooth value vectors do not match the fit".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut xrow = vec![0.0; model.p1];
    let mut wrow = vec![0.0; model.q1];
    let mut zrow1 = vec![0.0; input.mods_lambda.ncols()];
    let mut zrow2 = vec![0.0; input.mods_nu.ncols()];
    for i in 0..n {
        for j in 0..model.p1 {
            xrow[j] = input.x1[(i, j)];
        }
        for j in 0..input.mods_lambda.ncols() {
            zrow1[j] = input.mods_lambda[(i, j)];
        }
        let mut eta1 = 0.0;
        for j in 0..model.p1 {
            eta1 += xrow[j] * model.init.beta[j];
        }
        if let Some(x2) = input.x2 {
            for j in 0..x2.ncols() {
                eta1 += x2[(i, j)] * model.init.beta[model.p1 + j];
            }
        }
        for (s, vals) in model.init.smooths_lambda.iter().zip(&input.smooth_lambda_values) {
            eta1 += s.eval(vals[i]);
        }
        for t in &model.trees1[..b1] {
            eta1 += model.xi * t.predict_row(&xrow, &zrow1);
        }

        for j in 0..model.q1 {
            wrow[j] = input.w1[(i, j)];
        }
        for j in 0..input.mods_nu.ncols() {
            zrow2[j] = input.mods_nu[(i, j)];
        }
        let mut eta2 = 0.0;
        for j in 0..model.q1 {
            eta2 += wrow[j] * model.init.gamma[j];
        }
        if let Some(w2) = input.w2 {
            for j in 0..w2.ncols() {
                eta2 += w2[(i, j)] * model.init.gamma[model.q1 + j];
            }
        }
        for (s, vals) in model.init.smooths_nu.iter().zip(&input.smooth_nu_values) {
            eta2 += s.eval(vals[i]);
        }
        for t in &model.trees2[..b2] {
            eta2 += model.xi * t.predict_row(&wrow, &zrow2);
        }

        let nu = eta2.clamp(-LN_NU_CLAMP, LN_NU_CLAMP).exp();
        let m = crate::cmp::moments_ext_ln(eta1, nu, policy)?;
        out.push(BoostPrediction {
            eta1,
            eta2,
            lambda: eta1.exp(),
            nu,
            mean: m.mean,
        });
    }
    Ok(out)
}

/// Test-set -2ll of a prediction set against observed counts.
pub fn neg2ll_of_predictions(y: &[u64], preds: &[BoostPrediction], policy: &crate::cmp::TruncationPolicy) -> Result<f64> {
    let lf = crate::irls::ln_factorial_vec(y);
    let eta1 = DVector::from_iterator(y.len(), preds.iter().map(|p| p.eta1));
    let nu = DVector::from_iterator(y.len(), preds.iter().map(|p| p.nu));
    crate::irls::neg2_loglik(y, &eta1, &nu, &lf, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mob::Moderators;
    use crate::sim::{generate, SimDesign, Study};

    fn sim2_input(data: &crate::sim::SimData) -> (DesignBlock, DesignBlock, Moderators) {
        let x1 = DesignBlock::with_intercept(&[("x", data.column("x"))]).unwrap();
        let w1 = DesignBlock::with_intercept(&[("w", data.column("w"))]).unwrap();
        let n = data.n();
        let mut zm = DMatrix::zeros(n, 10);
        for j in 0..10 {
            let col = data.column(&format!("z{}", j + 1));
            for i in 0..n {
                zm[(i, j)] = col[i];
            }
        }
        let mods = Moderators::continuous(zm, (1..=10).map(|j| format!("z{j}")).collect());
        (x1, w1, mods)
    }

    #[test]
    fn first_iteration_is_a_descent_step() {
        let data = generate(&SimDesign {
            study: Study::Sim2VcBoth,
            n: 400,
            seed: 21,
        })
        .unwrap();
        let (x1, w1, mods) = sim2_input(&data);
        let control = BoostControl {
            b_max: 1,
            ..Default::default()
        };
        let input = BoostInput {
            y: &data.y,
            x1: &x1,
            x2: None,
            smooths_lambda: &[],
            w1: &w1,
            w2: None,
            smooths_nu: &[],
            mods_lambda: &mods,
            mods_nu: &mods,
        };
        let model = fit_cmpboost(&input, &control).unwrap();
        assert_eq!(model.b, 1);
        assert!(
            model.neg2ll_path[1] < model.neg2ll_path[0],
            "no descent: {:?}",
            model.neg2ll_path
        );
    }

    #[test]
    fn truncated_prediction_matches_shorter_run() {
        let data = generate(&SimDesign {
            study: Study::Sim2LinearNu,
            n: 300,
            seed: 22,
        })
        .unwrap();
        let (x1, w1, mods) = sim2_input(&data);
        let mk = |b_max: usize| BoostControl {
            b_max,
            stop_tol: 0.0, // run the full budget
            ..Default::default()
        };
        let input = BoostInput {
            y: &data.y,
            x1: &x1,
            x2: None,
            smooths_lambda: &[],
            w1: &w1,
            w2: None,
            smooths_nu: &[],
            mods_lambda: &mods,
            mods_nu: &mods,
        };
        let long = fit_cmpboost(&input, &mk(40)).unwrap();
        let short = fit_cmpboost(&input, &mk(15)).unwrap();
        assert_eq!(long.trees1.len(), 40);
        assert_eq!(short.trees1.len(), 15);
        let pin = BoostPredictInput {
            x1: &x1.matrix,
            x2: None,
            smooth_lambda_values: vec![],
            w1: &w1.matrix,
            w2: None,
            smooth_nu_values: vec![],
            mods_lambda: &mods.values,
            mods_nu: &mods.values,
        };
        let policy = crate::cmp::TruncationPolicy::default();
        let a = predict_boost(&long, &pin, Some(15), &policy).unwrap();
        let b = predict_boost(&short, &pin, None, &policy).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert!((pa.eta1 - pb.eta1).abs() < 1e-10);
            assert!((pa.eta2 - pb.eta2).abs() < 1e-10);
        }
    }

    #[test]
    fn importance_mass_lands_on_the_split_variable() {
        // lambda intercept steps in z5 only; a single M=2 iteration puts all
        // importance mass there
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let n = 500;
        let mut zm = DMatrix::zeros(n, 6);
        for i in 0..n {
            for j in 0..6 {
                zm[(i, j)] = rng.gen::<f64>();
            }
        }
        let policy = crate::cmp::TruncationPolicy::default();
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let eta1: f64 = if zm[(i, 4)] > 0.5 { 2.0 } else { 0.5 };
            let p = crate::cmp::CmpParams::new(eta1.exp(), 1.0).unwrap();
            let s = crate::cmp::CmpSampler::new(p, &policy).unwrap();
            y.push(s.draw(&mut rng));
        }
        let x1 = DesignBlock::intercept(n);
        let w1 = DesignBlock::intercept(n);
        let mods = Moderators::continuous(zm, (1..=6).map(|j| format!("z{j}")).collect());
        let control = BoostControl {
            b_max: 1,
            ..Default::default()
        };
        let input = BoostInput {
            y: &y,
            x1: &x1,
            x2: None,
            smooths_lambda: &[],
            w1: &w1,
            w2: None,
            smooths_nu: &[],
            mods_lambda: &mods,
            mods_nu: &mods,
        };
        let model = fit_cmpboost(&input, &control).unwrap();
        let imp = variable_importance(&model, Predictor::Lambda);
        for (name, mass) in &imp {
            if name == "z5" {
                assert!(*mass > 0.0, "z5 got no mass");
            } else {
                assert_eq!(*mass, 0.0, "{name} got mass {mass}");
            }
        }
    }

    #[test]
    fn importance_mass_is_conserved() {
        let data = generate(&SimDesign {
            study: Study::Sim2VcBoth,
            n: 400,
            seed: 24,
        })
        .unwrap();
        let (x1, w1, mods) = sim2_input(&data);
        let control = BoostControl {
            b_max: 30,
            stop_tol: 0.0,
            ..Default::default()
        };
        let input = BoostInput {
            y: &data.y,
            x1: &x1,
            x2: None,
            smooths_lambda: &[],
            w1: &w1,
            w2: None,
            smooths_nu: &[],
            mods_lambda: &mods,
            mods_nu: &mods,
        };
        let model = fit_cmpboost(&input, &control).unwrap();
        for (pred, trees, mass) in [
            (Predictor::Lambda, &model.trees1, &model.sse_mass1),
            (Predictor::Nu, &model.trees2, &model.sse_mass2),
        ] {
            let total: f64 = trees
                .iter()
                .flat_map(|t| t.split_log.iter().map(|s| s.delta_sse))
                .sum();
            let imp = variable_importance(&model, pred);
            let sum_i: f64 = imp.iter().map(|(_, v)| v).sum();
            let b = trees.len() as f64;
            assert!(
                (sum_i * b - total).abs() <= 1e-12 * (1.0 + total.abs()),
                "mass {} vs total {total}",
                sum_i * b
            );
            let direct: f64 = mass.iter().sum();
            assert!((direct - total).abs() <= 1e-12 * (1.0 + total.abs()));
        }
    }

    #[test]
    fn fixed_nu_reduces_to_poisson_boosting() {
        // oracle: the same boosting loop specialized to Poisson moments
        // (E = V = lambda), written directly in the test
        let data = generate(&SimDesign {
            study: Study::Sim2LinearNu,
            n: 400,
            seed: 25,
        })
        .unwrap();
        let (x1, w1, mods) = sim2_input(&data);
        let mut control = BoostControl {
            b_max: 20,
            stop_tol: 0.0,
            ..Default::default()
        };
        control.glm.fix_nu = Some(1.0);
        let input = BoostInput {
            y: &data.y,
            x1: &x1,
            x2: None,
            smooths_lambda: &[],
            w1: &w1,
            w2: None,
            smooths_nu: &[],
            mods_lambda: &mods,
            mods_nu: &mods,
        };
        let model = fit_cmpboost(&input, &control).unwrap();
        assert!(model.trees2.is_empty());

        // Poisson oracle boosting
        let n = data.n();
        let mut eta = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..x1.ncols() {
                acc += x1.matrix[(i, j)] * model.init.beta[j];
            }
            eta[i] = acc;
        }
        let tc = PartRegControl {
            max_leaves: control.max_leaves,
            min_node_size: control.min_node_size,
        };
        for b in 0..20 {
            let mu = DVector::from_iterator(n, eta.iter().map(|&e: &f64| e.exp()));
            let r = DVector::from_iterator(
                n,
                (0..n).map(|i| (data.y[i] as f64 - mu[i]) / mu[i].max(1e-10)),
            );
            let w = DVector::from_iterator(n, (0..n).map(|i| mu[i].max(1e-10)));
            let t = fit_partreg(&r, &w, &x1.matrix, &mods.values, &tc);
            // identical split decisions as the CMP run with nu = 1
            let s_model = &model.trees1[b].split_log;
            let s_oracle = &t.split_log;
            assert_eq!(s_model.len(), s_oracle.len(), "iteration {b}");
            for (a, o) in s_model.iter().zip(s_oracle) {
                assert_eq!(a.var, o.var, "iteration {b}");
                assert!((a.point - o.point).abs() < 1e-12, "iteration {b}");
            }
            eta += control.xi * t.predict(&x1.matrix, &mods.values);
        }
        // final predictors agree
        let pin = BoostPredictInput {
            x1: &x1.matrix,
            x2: None,
            smooth_lambda_values: vec![],
            w1: &w1.matrix,
            w2: None,
            smooth_nu_values: vec![],
            mods_lambda: &mods.values,
            mods_nu: &mods.values,
        };
        let policy = crate::cmp::TruncationPolicy::default();
        let preds = predict_boost(&model, &pin, None, &policy).unwrap();
        for i in 0..n {
            assert!(
                (preds[i].eta1 - eta[i]).abs() < 1e-6,
                "row {i}: {} vs {}",
                preds[i].eta1,
                eta[i]
            );
        }
    }

    #[test]
    fn partial_dependence_of_empty_model_is_flat() {
        let data = generate(&SimDesign {
            study: Study::Sim2VcBoth,
            n: 300,
            seed: 26,
        })
        .unwrap();
        let (x1, w1, mods) = sim2_input(&data);
        let control = BoostControl {
            b_max: 0,
            ..Default::default()
        };
        let input = BoostInput {
            y: &data.y,
            x1: &x1,
            x2: None,
            smooths_lambda: &[],
            w1: &w1,
            w2: None,
            smooths_nu: &[],
            mods_lambda: &mods,
            mods_nu: &mods,
        };
        let model = fit_cmpboost(&input, &control).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let pd = partial_dependence(&model, Predictor::Lambda, 0, 0, &grid);
        for (_, v) in &pd {
            assert!((v - model.init.beta[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_invalid_learning_rate() {
        let control = BoostControl {
            xi: 1.5,
            ..Default::default()
        };
        assert!(control.validate().is_err());
    }
}
