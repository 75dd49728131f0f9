// debug binary: examine crawl dynamics
use cmptree::cmp::{CmpParams, CmpSampler, TruncationPolicy};
use cmptree::design::DesignBlock;
use cmptree::irls::{fit_cmp_glm, GlmControl};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    use rand::Rng;
    let n = 1500;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let mut y = Vec::with_capacity(n);
    for &xi in &x {
        let lam = (1.0 + 0.5 * xi).exp();
        let s = CmpSampler::new(CmpParams::new(lam, 1.0).unwrap(), &TruncationPolicy::default()).unwrap();
        y.push(s.draw(&mut rng));
    }
    let xb = DesignBlock::with_intercept(&[("x", &x)]).unwrap();
    let wb = DesignBlock::intercept(n);
    for max_iter in [50usize, 200, 500, 2000] {
        let control = GlmControl { tol: 1e-12, max_iter, ..Default::default() };
        let fit = fit_cmp_glm(&y, &xb, &wb, &[], &[], &control).unwrap();
        let mut smax: f64 = 0.0;
        for j in 0..fit.scores1.ncols() {
            smax = smax.max(fit.scores1.column(j).sum().abs());
        }
        for j in 0..fit.scores2.ncols() {
            smax = smax.max(fit.scores2.column(j).sum().abs());
        }
        println!("max_iter={max_iter}: iters={} conv={} -2ll={:.9} maxscore={:.3e} beta={:?} gamma={:?}",
            fit.iterations, fit.converged, fit.neg2loglik, smax, fit.beta.as_slice(), fit.gamma.as_slice());
    }
}
