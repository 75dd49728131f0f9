use cmptree::design::DesignBlock;
use cmptree::irls::{fit_cmp_glm_warm, GlmControl};
use cmptree::mob::{exhaustive_split, MobControl, NodeData};
use cmptree::sim::{generate, Sim1Parts, SimDesign, Study};
use nalgebra::DVector;
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let design = SimDesign { study: Study::Sim1SameModerators, n, seed: 11 };
    let t = Instant::now();
    let data = generate(&design).unwrap();
    println!("generate: {:.2}s", t.elapsed().as_secs_f64());
    let parts = Sim1Parts::from_data(&data).unwrap();
    let control = MobControl::default();

    // global fit
    let t = Instant::now();
    let xg = parts.x1.clone();
    let wg = parts.w1.clone();
    let global = fit_cmp_glm_warm(&data.y, &xg, &wg, &parts.smooths_lambda, &parts.smooths_nu, &control.glm, None).unwrap();
    println!("global fit: {:.2}s  iters={} conv={}", t.elapsed().as_secs_f64(), global.iterations, global.converged);

    // offsets
    let mut off1 = global.eta1.clone();
    let mut off2 = global.eta2.clone();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..3 { acc += parts.x1.matrix[(i, j)] * global.beta[j]; }
        off1[i] -= acc;
        let mut acc = 0.0;
        for j in 0..2 { acc += parts.w1.matrix[(i, j)] * global.gamma[j]; }
        off2[i] -= acc;
    }
    let x = parts.x1.replacing_offset(off1).unwrap();
    let w = parts.w1.replacing_offset(off2).unwrap();
    let wb = DVector::from_iterator(3, (0..3).map(|j| global.beta[j]));
    let wgm = DVector::from_iterator(2, (0..2).map(|j| global.gamma[j]));

    // root fit
    let t = Instant::now();
    let root = fit_cmp_glm_warm(&data.y, &x, &w, &[], &[], &control.glm, Some((&wb, &wgm))).unwrap();
    println!("root fit: {:.2}s  iters={} conv={}", t.elapsed().as_secs_f64(), root.iterations, root.converged);

    // scan
    let z1: Vec<f64> = data.column("z1").to_vec();
    let nd = NodeData { y: &data.y, x1: &x, w1: &w, warm_beta: &root.beta, warm_gamma: &root.gamma };
    let t = Instant::now();
    let s = exhaustive_split(&nd, &z1, &control).unwrap();
    println!("exhaustive scan: {:.2}s  candidates={} point={:.4}", t.elapsed().as_secs_f64(), s.n_candidates, s.point);
}
