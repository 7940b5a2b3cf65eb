use nalgebra::DMatrix;
use switchid::data::gen_synthetic_3mode;
use switchid::driver::{initialize, ModelSpec};
use switchid::likelihood::{Regularizer, SwitchStructure};
use switchid::families::FamilyKind;
use switchid::posterior::forward_backward;
use switchid::mstep::{build_weights, prepare_step_data, solve_switch_step, solve_gaussian_step, SolverOptions};

fn main() {
    let (train, truth) = gen_synthetic_3mode(1000, 101).unwrap();
    let spec = ModelSpec { structure: SwitchStructure::Full, family: FamilyKind::Gaussian, d: 3, cfg: truth.cfg };
    let (mut model, mut alpha) = initialize(&spec, &train, 1).unwrap();
    for beta in &mut model.betas {
        if let switchid::families::EmissionParams::Gaussian { lambda, .. } = beta {
            *lambda = DMatrix::identity(2, 2) * 1e3;
        }
    }
    let reg = Regularizer::ZERO;
    let data = prepare_step_data(&model, &train).unwrap();
    let switch_inputs: Vec<_> = data.zs.iter().map(|z| model.switch_input(z)).collect();
    for k in 0..40 {
        let post = match forward_backward(&model, &train, &alpha) {
            Ok(p) => p,
            Err(e) => { println!("iter {k}: E-step error: {e}"); break; }
        };
        let weights = build_weights(&model, &post, &train).unwrap();
        let s: f64 = weights.pi0.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            println!("iter {k}: pi0 sum drift {:.3e}, pi0 = {:?}", s - 1.0, weights.pi0.as_slice());
            // inspect xi[0]
            let xi0 = &post.xi[0];
            println!("xi0 sum = {:.17}", xi0.iter().sum::<f64>());
            let g0: f64 = post.gamma.row(0).iter().sum();
            println!("gamma0 sum = {:.17}", g0);
        }
        alpha = weights.pi0.clone();
        let (theta, _) = solve_switch_step(model.structure, &weights, &switch_inputs, reg.gamma1, &SolverOptions::default(), &model.theta).unwrap();
        model.theta = theta;
        for j in 0..3 {
            let (b, lambda) = solve_gaussian_step(&weights, &data, 0.0, 0.0, j, Some(&(DMatrix::identity(2,2)*1e3))).unwrap();
            model.betas[j] = switchid::families::EmissionParams::Gaussian { b, lambda };
        }
    }
    println!("done");
}
