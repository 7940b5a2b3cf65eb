use nalgebra::{DMatrix, DVector};
use switchid::data::{gen_markov_arx, inject_outliers, DatasetSplit};
use switchid::driver::{multistart_fit, FitOptions, ModelSpec};
use switchid::likelihood::{Regularizer, SwitchStructure};
use switchid::families::FamilyKind;
use switchid::metrics::r2_score;
use switchid::predict::{recursive_one_step_predict, PredictionConfig};

fn run(family: FamilyKind, p: f64, tag: &str) -> f64 {
    let t0 = std::time::Instant::now();
    let (clean, truth) = gen_markov_arx(10_000, 424).unwrap();
    let split = DatasetSplit { train: 0..5000, validation: 5000..7500, test: 7500..10_001 };
    let (traj, n_out) = inject_outliers(&clean, p, 77, Some(split.train.clone())).unwrap();
    let spec = ModelSpec { structure: SwitchStructure::Full, family, d: 3, cfg: truth.cfg };
    let reg = Regularizer { gamma1: 1e-3, gamma2: 1e-4, gamma3: 1e-4 };
    let opts = FitOptions { n_restarts: 5, seed: 11, max_iters: 500, ..FitOptions::default() };
    let ms = multistart_fit(&spec, &traj, Some(&split), &reg, &opts).unwrap();
    // recursive one-step over the test range on the CLEAN trajectory
    let cfg = PredictionConfig { n_samples: 20, seed: 5, ..PredictionConfig::recursive(5) };
    let pred = recursive_one_step_predict(&ms.best.model, &ms.best.alpha0, &clean, split.test.clone(), &cfg).unwrap();
    let truth_rows = clean.y.rows(split.test.start, split.test.len()).into_owned();
    let r2 = r2_score(&truth_rows, &pred).unwrap();
    let iters: Vec<usize> = ms.restarts.iter().map(|r| r.iterations).collect();
    println!("{tag}: r2 {r2:.4}  outliers {n_out}  iters {iters:?}  stops {:?}  {:.1?}",
        ms.restarts.iter().map(|r| format!("{:?}", r.stop)).collect::<Vec<_>>(), t0.elapsed());
    r2
}

fn main() {
    let g0 = run(FamilyKind::Gaussian, 0.0, "gauss p=0   ");
    let t0 = run(FamilyKind::StudentT { nu: 4.0 }, 0.0, "student p=0 ");
    let g5 = run(FamilyKind::Gaussian, 0.05, "gauss p=5%  ");
    let t5 = run(FamilyKind::StudentT { nu: 4.0 }, 0.05, "student p=5%");
    println!("checks: g0 >= 0.93: {}  t0 >= 0.93: {}  t5 >= 0.90: {}  t5 >= g5: {}",
        g0 >= 0.93, t0 >= 0.93, t5 >= 0.90, t5 >= g5);
}
