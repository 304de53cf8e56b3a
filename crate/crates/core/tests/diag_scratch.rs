//! Temporary diagnostic - will be removed.

use ccmtrack::ccm::{ccm_lhs, train_ccm, CCMHyperParams};
use ccmtrack::sysmodels::model_by_id;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn diagnose_violation_structure() {
    let (model, _) = model_by_id("linear-test").unwrap();
    let sigma: f64 = std::env::var("DIAG_SIGMA")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);
    let steps: usize = std::env::var("DIAG_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(3000);
    let hyper = CCMHyperParams {
        batch_size: 128,
        train_steps: steps,
        dataset_size: 5_000,
        metric_hidden: vec![24, 24],
        gain_hidden: vec![24, 24],
        gain_dim: 8,
        seed: 17,
        sigma,
        ..CCMHyperParams::default()
    };
    let (metric, ctrl, _) = train_ccm(&model, &hyper).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9000);

    // term-wise diagnostics on held-out samples
    use ccmtrack::ccm::{
        dual_condition_c1, dual_condition_c2, psd_penalty_with_dirs, PenaltyDirections,
    };
    let dirs = PenaltyDirections::sample(model.n, model.m, 64, &mut rng);
    let eye = nalgebra::DMatrix::<f64>::identity(model.n, model.n);
    let (mut s_ccm, mut s_c1, mut s_c2, mut s_m) = (0.0, 0.0, 0.0, 0.0);
    let held = 500;
    for _ in 0..held {
        let x = model.state_box.sample(&mut rng);
        let xr = model.state_box.sample(&mut rng);
        let ur = model.control_box.sample(&mut rng);
        let psi = ccm_lhs(&model, &metric, &ctrl, &x, &xr, &ur, 0.5).unwrap();
        s_ccm += psd_penalty_with_dirs(&(-&psi - &eye * hyper.sigma), &dirs.psi);
        let c1 = dual_condition_c1(&model, &metric, &x, 0.5).unwrap();
        s_c1 += psd_penalty_with_dirs(&(-c1), &dirs.c1);
        let c2 = dual_condition_c2(&model, &metric, &x).unwrap();
        s_c2 += ccmtrack::ccm::c2_frobenius(&c2);
        let m = metric.metric_eval(&x).unwrap();
        s_m += psd_penalty_with_dirs(&(&eye * hyper.alpha_hi - m), &dirs.metric);
    }
    println!(
        "terms: L_ccm {:.5} L_c1 {:.5} L_c2 {:.5} L_m {:.5}",
        s_ccm / held as f64,
        s_c1 / held as f64,
        s_c2 / held as f64,
        s_m / held as f64
    );
    let mut rows = Vec::new();
    for _ in 0..2000 {
        let x = model.state_box.sample(&mut rng);
        let xr = model.state_box.sample(&mut rng);
        let ur = model.control_box.sample(&mut rng);
        let psi = ccm_lhs(&model, &metric, &ctrl, &x, &xr, &ur, 0.5).unwrap();
        let sym = (&psi + psi.transpose()) * 0.5;
        let me = sym.symmetric_eigen().eigenvalues.max();
        rows.push((me, (&x - &xr).norm(), ur[0], x.norm()));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let quantile = |q: f64| rows[(q * (rows.len() - 1) as f64) as usize].0;
    println!(
        "max-eig quantiles: p10 {:.3} p50 {:.3} p90 {:.3} p99 {:.3} max {:.3}",
        quantile(0.1),
        quantile(0.5),
        quantile(0.9),
        quantile(0.99),
        quantile(1.0)
    );
    let viol: Vec<_> = rows.iter().filter(|r| r.0 >= 0.0).collect();
    println!("violations: {}", viol.len());
    let mean_gap_viol = viol.iter().map(|r| r.1).sum::<f64>() / viol.len().max(1) as f64;
    let mean_gap_all = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    println!("mean |x-x*|: violating {mean_gap_viol:.3} vs all {mean_gap_all:.3}");
    let mean_u_viol = viol.iter().map(|r| r.2.abs()).sum::<f64>() / viol.len().max(1) as f64;
    println!("mean |u*|: violating {mean_u_viol:.3} vs all 1.0");
    let mean_x_viol = viol.iter().map(|r| r.3).sum::<f64>() / viol.len().max(1) as f64;
    let mean_x_all = rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64;
    println!("mean |x|: violating {mean_x_viol:.3} vs all {mean_x_all:.3}");
}
