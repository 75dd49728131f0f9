//! Deterministic generators for the simulation designs and a study runner
//! that reproduces the desk-scale experiments.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmp::{CmpParams, CmpSampler, TruncationPolicy};
use crate::design::DesignBlock;
use crate::error::Result;
use crate::mob::{fit_cmpmob, MobControl, MobInput, Moderators, SplitMethod};
use crate::spline::{SmoothData, SmoothTerm};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Study {
    /// Both predictors split on z1 at 0.65.
    Sim1SameModerators,
    /// The nu predictor splits on z3 at 0.5 instead.
    Sim1DiffModerators,
    /// Varying coefficients in both predictors, moderators z1..z10.
    Sim2VcBoth,
    /// Varying lambda model, linear nu model.
    Sim2LinearNu,
}

impl Study {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "sim1" | "sim1-same" => Some(Self::Sim1SameModerators),
            "sim1-diff" => Some(Self::Sim1DiffModerators),
            "sim2" | "sim2-vc" => Some(Self::Sim2VcBoth),
            "sim2-linear-nu" => Some(Self::Sim2LinearNu),
            _ => None,
        }
    }

    /// True varying coefficient of the lambda predictor (index 0 =
    /// intercept) at moderator vector z.
    pub fn lambda_coef(&self, j: usize, z: &[f64]) -> f64 {
        match self {
            Study::Sim1SameModerators | Study::Sim1DiffModerators => match j {
                0 => 2.0,
                1 => {
                    if z[0] > 0.65 {
                        2.0
                    } else {
                        0.0
                    }
                }
                2 => {
                    if z[0] <= 0.65 {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            },
            Study::Sim2VcBoth | Study::Sim2LinearNu => match j {
                0 => (TWO_PI * z[0]).sin().powi(2) + (z[1] - 1.0).exp(),
                1 => 2.0 * (TWO_PI * z[0]).cos().powi(2) + z[1] * (1.0 - z[1]),
                _ => 0.0,
            },
        }
    }

    /// True varying coefficient of the nu predictor at moderator vector z.
    pub fn nu_coef(&self, j: usize, z: &[f64]) -> f64 {
        match self {
            Study::Sim1SameModerators => match j {
                0 => 0.25,
                1 => {
                    if z[0] > 0.65 {
                        0.5
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            },
            Study::Sim1DiffModerators => match j {
                0 => 0.25,
                1 => {
                    if z[2] > 0.5 {
                        0.5
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            },
            Study::Sim2VcBoth => match j {
                0 => (TWO_PI * z[4]).sin().powi(2),
                1 => 0.5 * (TWO_PI * z[5]).cos().powi(2),
                _ => 0.0,
            },
            Study::Sim2LinearNu => match j {
                0 => 0.25,
                1 => 0.25,
                _ => 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimDesign {
    pub study: Study,
    pub n: usize,
    pub seed: u64,
}

/// A generated dataset with its ground truth.
#[derive(Debug, Clone)]
pub struct SimData {
    pub design: SimDesign,
    pub y: Vec<u64>,
    pub columns: Vec<(String, Vec<f64>)>,
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
}

impl SimData {
    pub fn column(&self, name: &str) -> &[f64] {
        &self
            .columns
            .iter()
            .find(|(c, _)| c == name)
            .unwrap_or_else(|| panic!("no column {name}"))
            .1
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// splitmix64 step, used to derive per-replication seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate one dataset. Fully reproducible from the design's seed.
pub fn generate(design: &SimDesign) -> Result<SimData> {
    let n = design.n;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    let policy = TruncationPolicy::default();
    let uniform_col = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>()).collect()
    };

    let (columns, eta1, eta2): (Vec<(String, Vec<f64>)>, Vec<f64>, Vec<f64>) = match design.study {
        Study::Sim1SameModerators | Study::Sim1DiffModerators => {
            let x1 = uniform_col(&mut rng);
            let x2 = uniform_col(&mut rng);
            let x3 = uniform_col(&mut rng);
            let w1 = uniform_col(&mut rng);
            let w2 = uniform_col(&mut rng);
            let z: Vec<Vec<f64>> = (0..4).map(|_| uniform_col(&mut rng)).collect();
            let mut eta1 = Vec::with_capacity(n);
            let mut eta2 = Vec::with_capacity(n);
            for i in 0..n {
                let zrow = [z[0][i], z[1][i], z[2][i], z[3][i]];
                let b0 = design.study.lambda_coef(0, &zrow);
                let b1 = design.study.lambda_coef(1, &zrow);
                let b2 = design.study.lambda_coef(2, &zrow);
                eta1.push(b0 + b1 * x1[i] + b2 * x2[i] + 2.0 * (TWO_PI * x3[i]).sin().powi(2));
                let g0 = design.study.nu_coef(0, &zrow);
                let g1 = design.study.nu_coef(1, &zrow);
                eta2.push(g0 + g1 * w1[i] + 0.5 * (TWO_PI * w2[i]).cos().powi(2));
            }
            let mut cols = vec![
                ("x1".to_string(), x1),
                ("x2".to_string(), x2),
                ("x3".to_string(), x3),
                ("w1".to_string(), w1),
                ("w2".to_string(), w2),
            ];
            for (j, zc) in z.into_iter().enumerate() {
                cols.push((format!("z{}", j + 1), zc));
            }
            (cols, eta1, eta2)
        }
        Study::Sim2VcBoth | Study::Sim2LinearNu => {
            let x = uniform_col(&mut rng);
            let w = uniform_col(&mut rng);
            let z: Vec<Vec<f64>> = (0..10).map(|_| uniform_col(&mut rng)).collect();
            let mut eta1 = Vec::with_capacity(n);
            let mut eta2 = Vec::with_capacity(n);
            for i in 0..n {
                let zrow: Vec<f64> = z.iter().map(|c| c[i]).collect();
                let b0 = design.study.lambda_coef(0, &zrow);
                let b1 = design.study.lambda_coef(1, &zrow);
                eta1.push(b0 + b1 * x[i]);
                let g0 = design.study.nu_coef(0, &zrow);
                let g1 = design.study.nu_coef(1, &zrow);
                eta2.push(g0 + g1 * w[i]);
            }
            let mut cols = vec![("x".to_string(), x), ("w".to_string(), w)];
            for (j, zc) in z.into_iter().enumerate() {
                cols.push((format!("z{}", j + 1), zc));
            }
            (cols, eta1, eta2)
        }
    };

    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let params = CmpParams::from_log_link(eta1[i], eta2[i])?;
        let sampler = CmpSampler::new(params, &policy)?;
        y.push(sampler.draw(&mut rng));
    }
    Ok(SimData {
        design: *design,
        y,
        columns,
        eta1,
        eta2,
    })
}

/// Owned design blocks for the study-1 CMPMOB model:
/// `ln lambda ~ b0(z) + b1(z) x1 + b2(z) x2 + s(x3)`,
/// `ln nu ~ g0(z) + g1(z) w1 + s(w2)`.
pub struct Sim1Parts {
    pub x1: DesignBlock,
    pub w1: DesignBlock,
    pub smooths_lambda: Vec<SmoothData>,
    pub smooths_nu: Vec<SmoothData>,
    pub moderators: Moderators,
}

impl Sim1Parts {
    pub fn from_data(data: &SimData) -> Result<Self> {
        let x1 = DesignBlock::with_intercept(&[
            ("x1", data.column("x1")),
            ("x2", data.column("x2")),
        ])?;
        let w1 = DesignBlock::with_intercept(&[("w1", data.column("w1"))])?;
        let smooths_lambda = vec![SmoothData::new(
            SmoothTerm::new("x3"),
            DVector::from_row_slice(data.column("x3")),
        )];
        let smooths_nu = vec![SmoothData::new(
            SmoothTerm::new("w2"),
            DVector::from_row_slice(data.column("w2")),
        )];
        let n = data.n();
        let mut zm = DMatrix::zeros(n, 4);
        for j in 0..4 {
            let col = data.column(&format!("z{}", j + 1));
            for i in 0..n {
                zm[(i, j)] = col[i];
            }
        }
        let moderators = Moderators::continuous(
            zm,
            (1..=4).map(|j| format!("z{j}")).collect(),
        );
        Ok(Self {
            x1,
            w1,
            smooths_lambda,
            smooths_nu,
            moderators,
        })
    }

    pub fn input<'a>(&'a self, y: &'a [u64]) -> MobInput<'a> {
        MobInput {
            y,
            x1: &self.x1,
            x2: None,
            smooths_lambda: &self.smooths_lambda,
            w1: &self.w1,
            w2: None,
            smooths_nu: &self.smooths_nu,
            moderators: &self.moderators,
        }
    }
}

/// One replication's outcome for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepRecord {
    pub rep: usize,
    pub method: SplitMethod,
    pub n: usize,
    pub n_terminal: usize,
    pub splits: Vec<(String, f64)>,
    pub global_neg2ll: f64,
    pub local_neg2ll: f64,
    pub wall_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodAggregate {
    pub method: SplitMethod,
    pub n_reps: usize,
    pub first_split_mean: f64,
    pub first_split_sd: f64,
    pub global_neg2ll_mean: f64,
    pub global_neg2ll_sd: f64,
    pub local_neg2ll_mean: f64,
    pub local_neg2ll_sd: f64,
    pub terminal_nodes_mean: f64,
    pub median_wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub design: SimDesign,
    pub replications: usize,
    pub records: Vec<RepRecord>,
    pub aggregates: Vec<MethodAggregate>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fit the study-1 model on `replications` datasets per method, recording
/// split points, node counts, fit measures and wall-clock time.
pub fn run_study(
    design: &SimDesign,
    methods: &[SplitMethod],
    replications: usize,
    control: &MobControl,
) -> Result<SimResult> {
    let mut records = Vec::new();
    for rep in 0..replications {
        let rep_design = SimDesign {
            seed: derive_seed(design.seed, rep as u64),
            ..*design
        };
        let data = generate(&rep_design)?;
        let parts = Sim1Parts::from_data(&data)?;
        for &method in methods {
            let mut ctrl = control.clone();
            ctrl.split_method = method;
            let start = Instant::now();
            let fitted = fit_cmpmob(&parts.input(&data.y), &ctrl);
            let wall = start.elapsed().as_secs_f64();
            let record = match fitted {
                Ok(tree) => RepRecord {
                    rep,
                    method,
                    n: design.n,
                    n_terminal: tree.n_leaves(),
                    splits: tree
                        .splits()
                        .iter()
                        .map(|s| (s.variable.clone(), s.point))
                        .collect(),
                    global_neg2ll: tree.global_neg2ll,
                    local_neg2ll: tree.total_local_neg2ll,
                    wall_secs: wall,
                    error: None,
                },
                Err(e) => RepRecord {
                    rep,
                    method,
                    n: design.n,
                    n_terminal: 0,
                    splits: vec![],
                    global_neg2ll: f64::NAN,
                    local_neg2ll: f64::NAN,
                    wall_secs: wall,
                    error: Some(e.to_string()),
                },
            };
            records.push(record);
        }
    }

    let mut aggregates = Vec::new();
    for &method in methods {
        let ok: Vec<&RepRecord> = records
            .iter()
            .filter(|r| r.method == method && r.error.is_none())
            .collect();
        let firsts: Vec<f64> = ok
            .iter()
            .filter_map(|r| r.splits.first().map(|(_, p)| *p))
            .collect();
        let (fm, fs) = mean_sd(&firsts);
        let (gm, gs) = mean_sd(&ok.iter().map(|r| r.global_neg2ll).collect::<Vec<_>>());
        let (lm, ls) = mean_sd(&ok.iter().map(|r| r.local_neg2ll).collect::<Vec<_>>());
        let (tm, _) = mean_sd(&ok.iter().map(|r| r.n_terminal as f64).collect::<Vec<_>>());
        let mut walls: Vec<f64> = ok.iter().map(|r| r.wall_secs).collect();
        walls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_wall = if walls.is_empty() {
            f64::NAN
        } else {
            walls[walls.len() / 2]
        };
        aggregates.push(MethodAggregate {
            method,
            n_reps: ok.len(),
            first_split_mean: fm,
            first_split_sd: fs,
            global_neg2ll_mean: gm,
            global_neg2ll_sd: gs,
            local_neg2ll_mean: lm,
            local_neg2ll_sd: ls,
            terminal_nodes_mean: tm,
            median_wall_secs: median_wall,
        });
    }
    Ok(SimResult {
        design: *design,
        replications,
        records,
        aggregates,
    })
}

impl SimResult {
    /// One CSV row per (replication, method); timings are excluded so the
    /// output is byte-identical across runs.
    pub fn per_rep_csv(&self) -> String {
        let mut out = String::from("rep,method,n,n_terminal,first_split_var,first_split_point,global_neg2ll,local_neg2ll,error\n");
        for r in &self.records {
            let (fv, fp) = r
                .splits
                .first()
                .map(|(v, p)| (v.clone(), format!("{p:.6}")))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.4},{:.4},{}\n",
                r.rep,
                r.method,
                r.n,
                r.n_terminal,
                fv,
                fp,
                r.global_neg2ll,
                r.local_neg2ll,
                r.error.clone().unwrap_or_default()
            ));
        }
        out
    }

    /// Aggregate table mirroring the study's reporting layout.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("method,n,reps,split_mean,split_sd,global_neg2ll_mean,global_neg2ll_sd,local_neg2ll_mean,local_neg2ll_sd,terminal_nodes_mean\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.2},{:.2},{:.2},{:.2},{:.2}\n",
                a.method,
                self.design.n,
                a.n_reps,
                a.first_split_mean,
                a.first_split_sd,
                a.global_neg2ll_mean,
                a.global_neg2ll_sd,
                a.local_neg2ll_mean,
                a.local_neg2ll_sd,
                a.terminal_nodes_mean
            ));
        }
        out
    }

    /// Timing table (non-deterministic across runs by nature).
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("rep,method,wall_secs\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{:.6}\n", r.rep, r.method, r.wall_secs));
        }
        out
    }
}
