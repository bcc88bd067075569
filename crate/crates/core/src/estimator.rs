//! Statistical layer: data generation from a composition-model aposteriori
//! probability, a restricted least-squares fit of the compiled network's top
//! coefficients, the plug-in classifier, and Monte-Carlo excess risk.
//!
//! The least-squares estimate is restricted: only the linear coefficients of
//! the top block of a compiled scaffold are free, which turns the otherwise
//! intractable sparsity-constrained minimization into a convex problem over
//! the same approximation class.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constructor::CompiledHcm;
use crate::encoder::{count_nonzero, forward, truncate};
use crate::error::{Error, Result};
use crate::hcm::HcmInstance;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// Flattened input in [-A, A]^{d·l}.
    pub x: Vec<f64>,
    pub y: u8,
}

/// The aposteriori probability m(x) = P(Y = 1 | X = x), given by a
/// composition model whose output is clamped into [0, 1].
#[derive(Debug, Clone)]
pub struct AposterioriModel {
    pub inst: HcmInstance,
}

impl AposterioriModel {
    pub fn new(inst: HcmInstance) -> Self {
        AposterioriModel { inst }
    }

    pub fn m(&self, x: &[f64]) -> Result<f64> {
        Ok(self.inst.eval(x)?.clamp(0.0, 1.0))
    }

    pub fn ambient_dim(&self) -> usize {
        self.inst.ambient_dim()
    }

    fn draw_x(&self, rng: &mut impl Rng) -> Vec<f64> {
        let a = self.inst.a;
        (0..self.ambient_dim())
            .map(|_| rng.gen_range(-a..=a))
            .collect()
    }
}

/// Draws n i.i.d. samples: X uniform on [-A, A]^{d·l}, Y ~ Bernoulli(m(X)).
pub fn sample_data(model: &AposterioriModel, n: usize, seed: u64) -> Result<Vec<LabeledSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = model.draw_x(&mut rng);
        let m = model.m(&x)?;
        let y = u8::from(rng.gen_range(0.0..1.0) < m);
        out.push(LabeledSample { x, y });
    }
    Ok(out)
}

/// Splits a flattened input into tokens for the encoder.
pub fn tokens_of(x: &[f64], d: usize) -> Vec<Vec<f64>> {
    x.chunks(d).map(|c| c.to_vec()).collect()
}

/// Plug-in classifier: a compiled network with refitted top coefficients and
/// a truncation level.
#[derive(Debug, Clone)]
pub struct FittedClassifier {
    pub net: CompiledHcm,
    pub beta: f64,
    /// Sparsity budget the fitted parameters must respect.
    pub budget: usize,
    /// Ridge regularizer applied when the normal equations were degenerate.
    pub ridge: Option<f64>,
}

impl FittedClassifier {
    pub fn regression_value(&self, x: &[f64]) -> Result<f64> {
        let tokens = tokens_of(x, self.net.params.dims.d);
        Ok(truncate(forward(&self.net.params, &tokens)?, self.beta))
    }
}

const RIDGE: f64 = 1e-10;
const GRADIENT_TOL: f64 = 1e-8;

/// Least squares over the scaffold's top-block coefficients: minimizes
/// (1/n) Σ (y_i − Σ_s c_s φ_s(x_i))² where φ_s are the top-block basis
/// functions at the (approximate) child values. Falls back to a ridge
/// regularizer of 1e-10 when the normal equations are degenerate.
pub fn fit_restricted_ls(
    xs: &[Vec<f64>],
    ys: &[f64],
    scaffold: &CompiledHcm,
    beta: f64,
) -> Result<FittedClassifier> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidInput(format!(
            "need matching non-empty samples, got {} inputs and {} targets",
            xs.len(),
            ys.len()
        )));
    }
    let k = scaffold.top_block().alpha_slots.len();
    let n = xs.len();
    let mut phi = DMatrix::zeros(n, k);
    for (i, x) in xs.iter().enumerate() {
        let feats = scaffold.top_features(x)?;
        for (j, f) in feats.iter().enumerate() {
            phi[(i, j)] = *f;
        }
    }
    let y = DVector::from_column_slice(ys);
    let gram = phi.transpose() * &phi;
    let rhs = phi.transpose() * &y;

    let mut ridge = None;
    let coeffs = match gram.clone().cholesky().map(|ch| ch.solve(&rhs)) {
        Some(c) if gradient_ok(&phi, &y, &c) => c,
        _ => {
            ridge = Some(RIDGE);
            let reg = &gram + DMatrix::identity(k, k) * RIDGE;
            reg.cholesky()
                .map(|ch| ch.solve(&rhs))
                .ok_or(Error::RankDeficient { cond: f64::INFINITY })?
        }
    };

    let mut net = scaffold.clone();
    net.set_top_coefficients(coeffs.as_slice())?;
    let budget = net.nonzero_budget;
    let nonzeros = count_nonzero(&net.params);
    if nonzeros > budget {
        return Err(Error::Capacity {
            constraint: format!("fitted network has {nonzeros} nonzeros, budget {budget}"),
        });
    }
    Ok(FittedClassifier {
        net,
        beta,
        budget,
        ridge,
    })
}

fn gradient_ok(phi: &DMatrix<f64>, y: &DVector<f64>, c: &DVector<f64>) -> bool {
    let resid = phi * c - y;
    let grad = phi.transpose() * resid / y.len() as f64;
    let scale = y.amax().max(1.0) * phi.amax().max(1.0);
    grad.amax() <= GRADIENT_TOL * scale
}

/// Convenience wrapper fitting directly on labeled data (targets 0/1).
pub fn fit_classifier(
    data: &[LabeledSample],
    scaffold: &CompiledHcm,
    beta: f64,
) -> Result<FittedClassifier> {
    let xs: Vec<Vec<f64>> = data.iter().map(|s| s.x.clone()).collect();
    let ys: Vec<f64> = data.iter().map(|s| f64::from(s.y)).collect();
    fit_restricted_ls(&xs, &ys, scaffold, beta)
}

/// Threshold rule of the plug-in classifier on an already-computed
/// regression value.
pub fn decide(value: f64, beta: f64) -> u8 {
    u8::from(truncate(value, beta) >= 0.5)
}

/// Plug-in classification: 1 iff the truncated network output is >= 1/2.
pub fn classify(clf: &FittedClassifier, x: &[f64]) -> Result<u8> {
    Ok(decide(clf.regression_value(x)?, clf.beta))
}

/// Bayes classifier: 1 iff m(x) > 1/2 (strict).
pub fn bayes_classify(model: &AposterioriModel, x: &[f64]) -> Result<u8> {
    Ok(u8::from(model.m(x)? > 0.5))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub mean: f64,
    pub stderr: f64,
}

const MC_CHUNK: usize = 256;

fn mc_over_draws<T, F>(model: &AposterioriModel, n_mc: usize, seed: u64, per_draw: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&AposterioriModel, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    let n_chunks = n_mc.div_ceil(MC_CHUNK);
    // Independent, reproducible streams per chunk; results merged in chunk
    // order so the estimate does not depend on scheduling.
    let chunks: Vec<Result<Vec<T>>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64 + 1);
            let lo = chunk * MC_CHUNK;
            let hi = ((chunk + 1) * MC_CHUNK).min(n_mc);
            (lo..hi).map(|_| per_draw(model, &mut rng)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(n_mc);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn summarize(values: &[f64]) -> RiskEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    RiskEstimate {
        mean,
        stderr: (var / n).sqrt(),
    }
}

/// Monte-Carlo excess misclassification risk of an arbitrary classifier
/// against the Bayes rule. Uses the exact aposteriori probability: each draw
/// contributes |2·m(X) − 1| exactly when the classifier disagrees with the
/// Bayes classifier, which has the same expectation as label sampling but
/// lower variance.
pub fn excess_risk_mc_of<F>(
    classifier: F,
    model: &AposterioriModel,
    n_mc: usize,
    seed: u64,
) -> Result<RiskEstimate>
where
    F: Fn(&[f64]) -> Result<u8> + Sync,
{
    let values = mc_over_draws(model, n_mc, seed, |model, rng| {
        let x = model.draw_x(rng);
        let m = model.m(&x)?;
        let disagree = classifier(&x)? != u8::from(m > 0.5);
        Ok(if disagree { (2.0 * m - 1.0).abs() } else { 0.0 })
    })?;
    Ok(summarize(&values))
}

pub fn excess_risk_mc(
    clf: &FittedClassifier,
    model: &AposterioriModel,
    n_mc: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    excess_risk_mc_of(|x| classify(clf, x), model, n_mc, seed)
}

/// Naive label-sampling estimate of the same quantity: draws Y ~ m(X) and
/// compares the indicator losses directly. Higher variance; used as an
/// independent check of the Rao-Blackwellized estimate.
pub fn excess_risk_mc_naive<F>(
    classifier: F,
    model: &AposterioriModel,
    n_mc: usize,
    seed: u64,
) -> Result<RiskEstimate>
where
    F: Fn(&[f64]) -> Result<u8> + Sync,
{
    let values = mc_over_draws(model, n_mc, seed, |model, rng| {
        let x = model.draw_x(rng);
        let m = model.m(&x)?;
        let y = u8::from(rng.gen_range(0.0..1.0) < m);
        let pred = classifier(&x)?;
        let bayes = u8::from(m > 0.5);
        Ok(f64::from(pred != y) - f64::from(bayes != y))
    })?;
    Ok(summarize(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constructor::compile_hcm;
    use crate::hcm::{find_builtin, HcmInstance, HcmNode, SmoothFn};

    fn constant_model(c: f64) -> AposterioriModel {
        let g = SmoothFn::new("const", 1, 2.0, 1.0, 0.0, move |_: &[f64]| c);
        AposterioriModel::new(HcmInstance {
            name: "const",
            description: "constant aposteriori probability",
            d: 1,
            l: 2,
            a: 1.0,
            node: HcmNode::composite(g, vec![HcmNode::leaf(1)]),
        })
    }

    #[test]
    fn sample_data_deterministic() {
        let model = constant_model(0.3);
        let a = sample_data(&model, 50, 7).unwrap();
        let b = sample_data(&model, 50, 7).unwrap();
        let c = sample_data(&model, 50, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for s in &a {
            assert!(s.x.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn sample_data_degenerate_probabilities() {
        let ones = sample_data(&constant_model(1.0), 200, 1).unwrap();
        assert!(ones.iter().all(|s| s.y == 1));
        let zeros = sample_data(&constant_model(0.0), 200, 1).unwrap();
        assert!(zeros.iter().all(|s| s.y == 0));
    }

    #[test]
    fn sample_data_balanced_mean() {
        // Binomial(1e4, 0.5): mean within 0.05 with probability > 0.99.
        let data = sample_data(&constant_model(0.5), 10_000, 42).unwrap();
        let mean = data.iter().map(|s| f64::from(s.y)).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn decide_examples() {
        assert_eq!(decide(0.7, 1.0), 1);
        assert_eq!(decide(0.5, 1.0), 1);
        assert_eq!(decide(-3.0, 1.0), 0);
        // truncation is neutral at the threshold for beta >= 1/2
        for v in [-2.0, 0.2, 0.49999, 0.5, 0.7, 3.0] {
            assert_eq!(decide(v, 1.0), decide(v, 0.5));
            assert_eq!(decide(v, 1.0), u8::from(v >= 0.5));
        }
    }

    #[test]
    fn bayes_is_strict_at_half() {
        let model = constant_model(0.5);
        assert_eq!(bayes_classify(&model, &[0.0, 0.0]).unwrap(), 0);
        assert_eq!(bayes_classify(&constant_model(0.9), &[0.0, 0.0]).unwrap(), 1);
        assert_eq!(bayes_classify(&constant_model(0.1), &[0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn noiseless_realizable_recovery() {
        // Targets produced by the scaffold's own coefficient vector must be
        // recovered to machine-level accuracy.
        let inst = find_builtin("smooth-1d").unwrap();
        let scaffold = compile_hcm(&inst, 8, 1).unwrap();
        let truth: Vec<f64> = scaffold.top_block().fit.coefficients.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen_range(-1.0..=1.0)]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| scaffold.output(x).unwrap()).collect();
        let clf = fit_restricted_ls(&xs, &ys, &scaffold, 1.0).unwrap();
        let got = &clf.net.top_block().fit.coefficients;
        for (g, t) in got.iter().zip(&truth) {
            assert!((g - t).abs() < 1e-6, "got {g}, expected {t}");
        }
        assert!(count_nonzero(&clf.net.params) <= clf.budget);
    }

    #[test]
    fn underdetermined_fit_uses_ridge() {
        let inst = find_builtin("smooth-1d").unwrap();
        let scaffold = compile_hcm(&inst, 8, 1).unwrap();
        // 3 samples, 8 free coefficients: rank deficient by construction.
        let xs = vec![vec![-0.5], vec![0.0], vec![0.5]];
        let ys = vec![0.2, 0.5, 0.6];
        let clf = fit_restricted_ls(&xs, &ys, &scaffold, 1.0).unwrap();
        assert_eq!(clf.ridge, Some(1e-10));
        // the fit still interpolates the data closely
        for (x, y) in xs.iter().zip(&ys) {
            assert!((clf.regression_value(x).unwrap() - y).abs() < 1e-3);
        }
    }

    #[test]
    fn bayes_classifier_has_zero_excess_risk() {
        let model = AposterioriModel::new(find_builtin("product-2d").unwrap());
        let est =
            excess_risk_mc_of(|x| bayes_classify(&model, x), &model, 2000, 11).unwrap();
        assert_eq!(est.mean, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn anti_bayes_has_known_excess_risk() {
        // Constant m = 0.8: predicting 0 everywhere disagrees with Bayes on
        // the whole space, excess risk |2·0.8 − 1| = 0.6 exactly.
        let model = constant_model(0.8);
        let est = excess_risk_mc_of(|_| Ok(0u8), &model, 500, 5).unwrap();
        assert!((est.mean - 0.6).abs() < 1e-12);
    }

    #[test]
    fn rao_blackwell_agrees_with_naive() {
        let model = AposterioriModel::new(find_builtin("product-2d").unwrap());
        // a deliberately imperfect classifier: threshold shifted off 1/2
        let clf = |x: &[f64]| -> Result<u8> { Ok(u8::from(model.m(x)? > 0.65)) };
        let rb = excess_risk_mc_of(clf, &model, 60_000, 17).unwrap();
        let naive = excess_risk_mc_naive(clf, &model, 60_000, 18).unwrap();
        let tol = 3.0 * (rb.stderr.powi(2) + naive.stderr.powi(2)).sqrt();
        assert!(
            (rb.mean - naive.mean).abs() <= tol,
            "RB {} vs naive {} (tol {tol})",
            rb.mean,
            naive.mean
        );
        assert!(rb.stderr < naive.stderr);
        assert!(rb.mean >= -3.0 * rb.stderr);
    }

    #[test]
    fn excess_risk_deterministic() {
        let model = AposterioriModel::new(find_builtin("product-2d").unwrap());
        let clf = |x: &[f64]| -> Result<u8> { Ok(u8::from(x[0] > 0.0)) };
        let a = excess_risk_mc_of(clf, &model, 3000, 9).unwrap();
        let b = excess_risk_mc_of(clf, &model, 3000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fitted_classifier_learns_noiseless_signal() {
        // Labels drawn from a realizable m: with plenty of data the plug-in
        // classifier should rarely disagree with Bayes.
        let inst = find_builtin("product-2d").unwrap();
        let model = AposterioriModel::new(inst.clone());
        let scaffold = compile_hcm(&inst, 16, 1).unwrap();
        let data = sample_data(&model, 4000, 21).unwrap();
        let clf = fit_classifier(&data, &scaffold, 1.0).unwrap();
        let est = excess_risk_mc(&clf, &model, 4000, 22).unwrap();
        assert!(est.mean < 0.05, "excess risk {}", est.mean);
        assert!(est.mean >= -3.0 * est.stderr);
    }
}
