use nalgebra::{DMatrix, DVector};
use switchid::data::gen_synthetic_3mode;
use switchid::driver::{initialize, fit, FitOptions, ModelSpec};
use switchid::likelihood::{nll, Regularizer, SwitchStructure};
use switchid::families::FamilyKind;
use rayon::prelude::*;

fn main() {
    let t0 = std::time::Instant::now();
    let (train, truth) = gen_synthetic_3mode(1000, 101).unwrap();
    let (val, _) = gen_synthetic_3mode(2000, 202).unwrap();
    let uniform = DVector::from_element(3, 1.0 / 3.0);
    let true_val_nll = nll(&truth, &val, &uniform).unwrap();
    println!("true val nll: {true_val_nll:.3}");
    let spec = ModelSpec { structure: SwitchStructure::Full, family: FamilyKind::Gaussian, d: 3, cfg: truth.cfg };
    let opts = FitOptions {
        max_iters: 500, grad_stop: 1e-4, rel_decrease_stop: 0.0, seed: 0,
        fixed_lambda: Some(DMatrix::identity(2, 2) * 1e3),
        ..FitOptions::default()
    };
    let results: Vec<(u64, Result<(f64, usize, String), String>)> = (0..20u64)
        .into_par_iter()
        .map(|r| {
            let run = || -> switchid::Result<(f64, usize, String)> {
                let (mut m0, a0) = initialize(&spec, &train, r)?;
                for beta in &mut m0.betas {
                    if let switchid::families::EmissionParams::Gaussian { lambda, .. } = beta {
                        *lambda = DMatrix::identity(2, 2) * 1e3;
                    }
                }
                let rep = fit(&m0, &a0, &train, &Regularizer::ZERO, &opts)?;
                let v = nll(&rep.model, &val, &uniform)?;
                Ok((v, rep.iterations.len(), format!("{:?}", rep.stop)))
            };
            (r, run().map_err(|e| e.to_string()))
        })
        .collect();
    let mut iters: Vec<usize> = Vec::new();
    let mut best = f64::INFINITY;
    for (r, res) in &results {
        match res {
            Ok((v, it, stop)) => {
                println!("restart {r}: val {v:.3} iters {it} stop {stop}");
                iters.push(*it);
                if *v < best { best = *v; }
            }
            Err(e) => println!("restart {r}: ERROR {e}"),
        }
    }
    iters.sort();
    println!("best val nll: {best:.3} (true {true_val_nll:.3}); one-sided rel gap {:.5}", (best - true_val_nll)/true_val_nll.abs());
    if !iters.is_empty() { println!("median iters: {}", iters[iters.len()/2]); }
    println!("elapsed: {:?}", t0.elapsed());
}
