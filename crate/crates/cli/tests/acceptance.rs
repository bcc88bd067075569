//! Acceptance suite: one test (and one printed pass/fail line) per
//! top-level criterion. Run with `cargo test --test acceptance -- --nocapture`
//! to see the lines.

use std::time::Instant;

use hardmax_transformer::constructor::{
    audit_params, build_spline_network, compile_hcm, HeadSpec,
};
use hardmax_transformer::encoder::{count_nonzero, Dims};
use hardmax_transformer::estimator::{
    bayes_classify, excess_risk_mc_naive, excess_risk_mc_of, fit_restricted_ls, AposterioriModel,
};
use hardmax_transformer::hcm::{builtin_library, find_builtin, layout};
use hardmax_transformer::spline::TruncPowerBasis;

use hardmax_exp::rates::{run_approx_rate, run_class_rate};
use hardmax_exp::verify::run_verify;
use hardmax_exp::Config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

#[test]
fn criterion_1_exactness_suite() {
    let t0 = Instant::now();
    let rep = run_verify(1000, false, 0).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = rep
        .checks
        .iter()
        .map(|l| l.max_deviation)
        .fold(0.0f64, f64::max);
    report(
        "exactness-suite",
        rep.pass && elapsed < 30.0,
        &format!(
            "{} constructions x 1000 cases, worst deviation {worst:.2e}, {elapsed:.1}s",
            rep.checks.len()
        ),
    );
}

#[test]
fn criterion_2_sparsity_bounds() {
    // Single-composite network against the per-network budgets.
    let dims = Dims {
        d: 2,
        l: 1,
        h: 4,
        copies: 1,
        d_k: 2,
        d_ff: 32,
    };
    let basis = TruncPowerBasis::new(1, vec![0.0], -1.0, 1.0).unwrap();
    let specs: Vec<HeadSpec> = (0..4)
        .map(|s| HeadSpec {
            idx: vec![s % 3, (s + 1) % 3],
            alpha: 0.3 * s as f64 + 0.1,
        })
        .collect();
    let (params, _) = build_spline_network(&dims, &basis, &specs, 1.0).unwrap();
    let audit = audit_params(&params, 1);
    let mut pass = audit.pass();
    let mut detail = format!(
        "spline net: {} <= {} nonzeros, {} <= {} slots",
        audit.nonzeros, audit.nonzero_bound, audit.param_slots, audit.param_bound
    );

    // Every builtin compiled model against its sparsity budget.
    for inst in builtin_library() {
        let copies = layout(&inst.node).total_blocks();
        let net = compile_hcm(&inst, 16, copies).unwrap();
        let nz = count_nonzero(&net.params);
        let ok = nz <= net.nonzero_budget;
        pass &= ok;
        detail.push_str(&format!("; {}: {} <= {}", inst.name, nz, net.nonzero_budget));
    }
    report("sparsity-bounds", pass, &detail);
}

#[test]
fn criterion_3_approx_rate() {
    let t0 = Instant::now();
    let cfg = Config::default();
    let uni = run_approx_rate(&cfg, "smooth-1d", None).unwrap();
    let bi = run_approx_rate(&cfg, "product-2d", None).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    report(
        "approx-rate",
        uni.pass && bi.pass && elapsed < 300.0,
        &format!(
            "univariate slope {:.3} (target -2), bivariate slope {:.3} (target -1), {elapsed:.1}s",
            uni.slope, bi.slope
        ),
    );
}

#[test]
fn criterion_4_class_rate() {
    let t0 = Instant::now();
    let cfg = Config::default();
    let res = run_class_rate(&cfg, "product-2d", None).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let inversions = res
        .points
        .windows(2)
        .filter(|w| w[1].error > w[0].error)
        .count();
    report(
        "class-rate",
        res.pass && inversions <= 1 && elapsed < 900.0,
        &format!(
            "slope {:.3} in [-0.55, -0.15], {inversions} inversion(s), {elapsed:.1}s",
            res.slope
        ),
    );
}

#[test]
fn criterion_5_dimension_robustness() {
    let cfg = Config::default();
    let low = run_class_rate(&cfg, "product-2d", None).unwrap();
    let high = run_class_rate(&cfg, "high-ambient", None).unwrap();
    let diff = (low.slope - high.slope).abs();
    report(
        "dimension-robustness",
        diff <= 0.15,
        &format!(
            "ambient 4 slope {:.3}, ambient 20 slope {:.3}, diff {diff:.3}",
            low.slope, high.slope
        ),
    );
}

#[test]
fn criterion_6_estimator_correctness() {
    // Noiseless realizable regression recovers the compiled coefficients.
    let inst = find_builtin("smooth-1d").unwrap();
    let scaffold = compile_hcm(&inst, 16, 1).unwrap();
    let truth: Vec<f64> = scaffold
        .top_block()
        .alpha_slots
        .iter()
        .map(|s| s.read(&scaffold.params))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xs: Vec<Vec<f64>> = (0..400)
        .map(|_| vec![rng.gen_range(-inst.a..=inst.a)])
        .collect();
    let ys: Vec<f64> = xs.iter().map(|x| scaffold.output(x).unwrap()).collect();
    let fitted = fit_restricted_ls(&xs, &ys, &scaffold, 1.0).unwrap();
    let recovered: Vec<f64> = fitted
        .net
        .top_block()
        .alpha_slots
        .iter()
        .map(|s| s.read(&fitted.net.params))
        .collect();
    let coeff_dev = truth
        .iter()
        .zip(&recovered)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);

    // The Bayes classifier has exactly zero excess risk.
    let model = AposterioriModel::new(find_builtin("product-2d").unwrap());
    let bayes = excess_risk_mc_of(|x| bayes_classify(&model, x), &model, 4000, 3).unwrap();

    // Rao-Blackwellized and naive label-sampling estimates agree.
    let always_one = |_x: &[f64]| Ok(1u8);
    let rb = excess_risk_mc_of(always_one, &model, 8000, 11).unwrap();
    let naive = excess_risk_mc_naive(always_one, &model, 8000, 12).unwrap();
    let gap = (rb.mean - naive.mean).abs();
    let three_sigma = 3.0 * (rb.stderr.hypot(naive.stderr));

    let pass = coeff_dev <= 1e-6 && bayes.mean == 0.0 && gap <= three_sigma;
    report(
        "estimator-correctness",
        pass,
        &format!(
            "coefficient deviation {coeff_dev:.2e}, Bayes excess risk {}, \
             RB-vs-naive gap {gap:.2e} <= {three_sigma:.2e}",
            bayes.mean
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let cfg = Config {
        model: "product-2d".into(),
        n_grid: vec![128, 256, 512],
        seeds: vec![0, 1, 2],
        n_mc: 2000,
        ..Config::default()
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        run_approx_rate(&cfg, "product-2d", Some(dir.path())).unwrap();
        run_class_rate(&cfg, "product-2d", Some(dir.path())).unwrap();
    }
    let mut pass = true;
    let mut detail = String::new();
    for name in ["approx_rate_product-2d.csv", "class_rate_product-2d.csv"] {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        let same = a == b;
        pass &= same;
        detail.push_str(&format!(
            "{name}: {}; ",
            if same { "byte-identical" } else { "DIFFERS" }
        ));
    }
    report("determinism", pass, detail.trim_end_matches("; "));
}
