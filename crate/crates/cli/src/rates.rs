//! Experiment drivers: approximation-rate sweeps over head counts,
//! classification-rate sweeps over sample sizes, and parameter audits.

use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;

use hardmax_transformer::constructor::{
    audit_params, basis_per_dim, compile_hcm, AuditReport, CompiledHcm,
};
use hardmax_transformer::estimator::{
    excess_risk_mc, fit_classifier, sample_data, AposterioriModel,
};
use hardmax_transformer::hcm::{find_builtin, layout, HcmInstance};

use crate::config::Config;
use crate::report::{write_json, write_rate_csv, RatePoint, RateResult};

/// Relative tolerance on the measured approximation-rate exponent.
pub const APPROX_SLOPE_TOL: f64 = 0.25;
/// Acceptance window for the classification-rate exponent (theory: -1/3
/// for the default bivariate model).
pub const CLASS_SLOPE_WINDOW: (f64, f64) = (-0.55, -0.15);

fn resolved_copies(inst: &HcmInstance, cfg_copies: usize) -> usize {
    if cfg_copies == 0 {
        layout(&inst.node).total_blocks()
    } else {
        cfg_copies
    }
}

/// Worst-case smoothness pair (p, K): the composite minimizing p/K, which
/// dominates the approximation rate.
fn worst_pair(inst: &HcmInstance) -> (f64, usize) {
    inst.node
        .smoothness_pairs()
        .into_iter()
        .min_by(|a, b| {
            let ra = a.0 / a.1 as f64;
            let rb = b.0 / b.1 as f64;
            ra.partial_cmp(&rb).unwrap()
        })
        .expect("model has at least one composite")
}

fn max_degree(inst: &HcmInstance) -> usize {
    inst.node
        .smoothness_pairs()
        .iter()
        .map(|(p, _)| (p.ceil() as usize).saturating_sub(1).max(1))
        .max()
        .unwrap()
}

/// Test points per used dimension: explicit from the config, otherwise
/// chosen by dimension so the grid stays small.
fn grid_points(cfg: &Config, used_dims: usize) -> usize {
    if cfg.test_grid > 0 {
        cfg.test_grid
    } else {
        match used_dims {
            1 => 201,
            2 => 41,
            _ => 11,
        }
    }
}

/// Sup error of the compiled network against the model on a uniform grid
/// over the coordinates the model actually reads; unused ambient
/// coordinates are held at zero.
pub fn sup_error_on_grid(net: &CompiledHcm, inst: &HcmInstance, pts: usize) -> Result<f64> {
    let used = inst.node.max_leaf_coord();
    let ambient = inst.ambient_dim();
    let a = inst.a;
    let axis: Vec<f64> = (0..pts)
        .map(|i| -a + 2.0 * a * i as f64 / (pts - 1) as f64)
        .collect();
    let total: usize = pts.pow(used as u32);
    let worst = (0..total)
        .into_par_iter()
        .map(|flat| -> Result<f64> {
            let mut x = vec![0.0; ambient];
            let mut rem = flat;
            for c in 0..used {
                x[c] = axis[rem % pts];
                rem /= pts;
            }
            let got = net.output(&x)?;
            let want = inst.eval(&x)?;
            Ok((got - want).abs())
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    Ok(worst)
}

/// Approximation-rate experiment: compiles the model at each head count,
/// measures the sup error on a test grid, and fits the log-log slope. The
/// target exponent is -p/K for the worst composite.
pub fn run_approx_rate(cfg: &Config, model: &str, out: Option<&Path>) -> Result<RateResult> {
    let inst = find_builtin(model)?;
    let copies = resolved_copies(&inst, cfg.copies);
    let (p, k) = worst_pair(&inst);
    let target = -p / k as f64;
    let pts = grid_points(cfg, inst.node.max_leaf_coord());

    let mut points = Vec::with_capacity(cfg.h_grid.len());
    for &h in &cfg.h_grid {
        let net = compile_hcm(&inst, h, copies)
            .with_context(|| format!("compiling {model} with h = {h}"))?;
        let err = sup_error_on_grid(&net, &inst, pts)?;
        points.push(RatePoint {
            x: h as f64,
            error: err,
            stderr: 0.0,
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error).collect();
    let slope = crate::log_log_slope(&xs, &ys);
    let result = RateResult {
        points,
        slope,
        target,
        pass: (slope - target).abs() <= APPROX_SLOPE_TOL * target.abs(),
    };
    if let Some(dir) = out {
        write_rate_csv(&dir.join(format!("approx_rate_{model}.csv")), "h", &result.points)?;
        write_json(&dir.join(format!("approx_rate_{model}.json")), &result)?;
    }
    Ok(result)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Head count schedule h(n) ~ n^{K/(2p+K)}, rounded down to the largest
/// t^K so every head carries a tensor-product basis function.
pub fn heads_for_n(n: usize, p: f64, k: usize, m_deg: usize) -> usize {
    let raw = (n as f64).powf(k as f64 / (2.0 * p + k as f64)).ceil() as usize;
    let t = basis_per_dim(raw, k).max(m_deg + 1);
    t.pow(k as u32)
}

/// Classification-rate experiment: for each sample size n, draws training
/// data per seed, refits the top coefficients of a compiled scaffold, and
/// Monte-Carlo-estimates the excess misclassification risk; the per-n error
/// is the median over seeds. The rate exponent target is -p/(2p+K).
pub fn run_class_rate(cfg: &Config, model: &str, out: Option<&Path>) -> Result<RateResult> {
    let inst = find_builtin(model)?;
    let copies = resolved_copies(&inst, cfg.copies);
    let apost = AposterioriModel::new(inst.clone());
    let (p, k) = inst
        .node
        .smoothness_pairs()
        .into_iter()
        .min_by(|a, b| {
            let ra = a.0 / (2.0 * a.0 + a.1 as f64);
            let rb = b.0 / (2.0 * b.0 + b.1 as f64);
            ra.partial_cmp(&rb).unwrap()
        })
        .unwrap();
    let target = -p / (2.0 * p + k as f64);
    let m_deg = (p.ceil() as usize).saturating_sub(1).max(1);

    let mut points = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let h = heads_for_n(n, p, k, m_deg);
        let scaffold = compile_hcm(&inst, h, copies)
            .with_context(|| format!("compiling {model} scaffold with h = {h} for n = {n}"))?;
        // Seeds run in parallel; results are collected in seed order so the
        // medians do not depend on scheduling.
        let risks: Vec<(f64, f64)> = cfg
            .seeds
            .par_iter()
            .map(|&seed| -> Result<(f64, f64)> {
                let data = sample_data(&apost, n, seed)?;
                let clf = fit_classifier(&data, &scaffold, cfg.beta)?;
                let est = excess_risk_mc(&clf, &apost, cfg.n_mc, seed ^ 0x5eed_0000)?;
                Ok((est.mean, est.stderr))
            })
            .collect::<Result<_>>()?;
        let mut means: Vec<f64> = risks.iter().map(|r| r.0).collect();
        let mut errs: Vec<f64> = risks.iter().map(|r| r.1).collect();
        points.push(RatePoint {
            x: n as f64,
            error: median(&mut means),
            stderr: median(&mut errs),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.error).collect();
    let slope = crate::log_log_slope(&xs, &ys);
    let (lo, hi) = CLASS_SLOPE_WINDOW;
    let result = RateResult {
        points,
        slope,
        target,
        pass: slope >= lo && slope <= hi,
    };
    if let Some(dir) = out {
        write_rate_csv(&dir.join(format!("class_rate_{model}.csv")), "n", &result.points)?;
        write_json(&dir.join(format!("class_rate_{model}.json")), &result)?;
    }
    Ok(result)
}

/// Audit: compiles the model at the configured head count and checks the
/// sparsity and parameter-count budgets. With `densify` set, the weights are
/// filled in first, which the audit must reject.
pub fn run_audit(cfg: &Config, out: Option<&Path>) -> Result<AuditReport> {
    let inst = find_builtin(&cfg.model)?;
    let copies = resolved_copies(&inst, cfg.copies);
    let mut net = compile_hcm(&inst, cfg.audit_h, copies)?;
    if cfg.densify {
        for layer in &mut net.params.layers {
            let ffn = &mut layer.ffn;
            for r in 0..ffn.w1.nrows() {
                for c in 0..ffn.w1.ncols() {
                    ffn.w1.set(r, c, 1.0);
                }
            }
            for r in 0..ffn.w2.nrows() {
                for c in 0..ffn.w2.ncols() {
                    ffn.w2.set(r, c, 1.0);
                }
            }
        }
    }
    let report = audit_params(&net.params, max_degree(&inst));
    if let Some(dir) = out {
        write_json(&dir.join("audit.json"), &report)?;
    }
    Ok(report)
}
