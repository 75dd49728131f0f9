use cmptree::mob::{fit_cmpmob, MobControl, SplitMethod};
use cmptree::sim::{generate, Sim1Parts, SimDesign, Study};
use std::time::Instant;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let method = match std::env::args().nth(2).as_deref() {
        Some("cp") => SplitMethod::CpExact,
        Some("top") => SplitMethod::CpTopPercent,
        _ => SplitMethod::Exhaustive,
    };
    let design = SimDesign { study: Study::Sim1SameModerators, n, seed: 11 };
    let data = generate(&design).unwrap();
    let parts = Sim1Parts::from_data(&data).unwrap();
    let mut control = MobControl::default();
    control.split_method = method;
    let t0 = Instant::now();
    let tree = fit_cmpmob(&parts.input(&data.y), &control).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("n={n} method={method:?}  wall={dt:.2}s");
    println!("global -2ll = {:.2}   local -2ll = {:.2}   leaves = {}", tree.global_neg2ll, tree.total_local_neg2ll, tree.n_leaves());
    print!("{}", tree.render());
}
