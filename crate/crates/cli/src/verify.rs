//! Exactness suite: every constructed network is compared slot-by-slot with
//! its closed-form output on randomized inputs, including the requirement
//! that non-targeted coordinates pass through unchanged.

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hardmax_transformer::constructor::{
    build_multiply, build_relu_ffn, build_scale_shift_ffn, build_select, build_select_const,
    build_spline_network, build_tensor_basis, HeadSpec, SourceCoord,
};
use hardmax_transformer::encoder::{
    attention_layer, encode_input, ffn_layer, forward, Dims, Layer, SliceAddress, TokenMatrix,
};
use hardmax_transformer::spline::{eval_tensor_basis, TruncPowerBasis};

pub const REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckReport>,
    pub pass: bool,
}

fn run_layers(layers: &[Layer], z: &TokenMatrix, dims: &Dims) -> TokenMatrix {
    let mut z = z.clone();
    for layer in layers {
        z = attention_layer(&z, &layer.heads, dims);
        z = ffn_layer(&z, &layer.ffn);
    }
    z
}

fn rel_dev(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

/// Deviation of the full state from an expected state.
fn state_dev(got: &TokenMatrix, want: &TokenMatrix) -> f64 {
    let mut worst = 0.0f64;
    for (g, w) in got.rows.iter().zip(&want.rows) {
        for (gv, wv) in g.iter().zip(w) {
            worst = worst.max(rel_dev(*gv, *wv));
        }
    }
    worst
}

fn random_tokens(rng: &mut ChaCha8Rng, d: usize, l: usize, a: f64) -> Vec<Vec<f64>> {
    (0..l)
        .map(|_| (0..d).map(|_| rng.gen_range(-a..=a)).collect())
        .collect()
}

struct Ctx {
    n_cases: usize,
    sabotage: bool,
}

impl Ctx {
    fn margin(&self, bound: f64) -> f64 {
        if self.sabotage {
            // Deliberately below the "B > 2 · max" precondition.
            0.01
        } else {
            4.0 * bound.max(1.0)
        }
    }

    fn check(
        &self,
        name: &str,
        seed: u64,
        mut case: impl FnMut(&mut ChaCha8Rng, &Ctx) -> Result<f64>,
    ) -> Result<CheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..self.n_cases {
            worst = worst.max(case(&mut rng, self)?);
        }
        Ok(CheckReport {
            name: name.into(),
            cases: self.n_cases,
            max_deviation: worst,
            pass: worst <= REL_TOL,
        })
    }
}

fn check_select(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<f64> {
    let d = rng.gen_range(1..=3);
    let l = rng.gen_range(1..=4);
    let dims = Dims::single_head(d, l);
    let x = random_tokens(rng, d, l, 2.0);
    let j = rng.gen_range(1..=l);
    let k = rng.gen_range(1..=d);
    let u = rng.gen_range(-1.0..=1.0);
    let bound = x.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let b = ctx.margin(bound);
    let slice = SliceAddress::new(&dims, 1, 1)?;
    let plan = build_select(&dims, &slice, &SourceCoord::Data { token: j, dim: k }, u, b)?;
    let z = encode_input(&x, &dims)?;
    let got = run_layers(&[plan.layer], &z, &dims);
    let mut want = z;
    want.rows[0][slice.aux_a()] = x[j - 1][k - 1] - u;
    Ok(state_dev(&got, &want))
}

fn check_select_const(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<f64> {
    let d = rng.gen_range(1..=3);
    let l = rng.gen_range(1..=4);
    let dims = Dims::single_head(d, l);
    let x = random_tokens(rng, d, l, 2.0);
    let j = rng.gen_range(1..=l);
    let b = ctx.margin(1.0);
    let slice = SliceAddress::new(&dims, 1, 1)?;
    let plan = build_select_const(&dims, &slice, j, b)?;
    let z = encode_input(&x, &dims)?;
    let got = run_layers(&[plan.layer], &z, &dims);
    let mut want = z;
    want.rows[0][slice.aux_a()] = 1.0;
    Ok(state_dev(&got, &want))
}

fn check_multiply(rng: &mut ChaCha8Rng, ctx: &Ctx) -> Result<f64> {
    let d = rng.gen_range(1..=3);
    let l = rng.gen_range(1..=4);
    let dims = Dims::single_head(d, l);
    let x = random_tokens(rng, d, l, 2.0);
    let j = rng.gen_range(1..=l);
    let a_vals: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..=2.0)).collect();
    let b_vals: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..=2.0)).collect();
    let slice = SliceAddress::new(&dims, 1, 1)?;
    let mut z = encode_input(&x, &dims)?;
    for t in 0..l {
        z.rows[t][slice.aux_a()] = a_vals[t];
        z.rows[t][slice.aux_b()] = b_vals[t];
    }
    let bound = a_vals
        .iter()
        .flat_map(|a| b_vals.iter().map(move |b| (a * b).abs()))
        .fold(0.0f64, f64::max);
    let b = ctx.margin(bound);
    let plan = build_multiply(&dims, &slice, j, b)?;
    let got = run_layers(&[plan.layer], &z, &dims);
    // Slots 1..d+l+3 of every token must be unchanged; token 1's auxC holds
    // the product plus margin. Other tokens' auxC may be polluted, which the
    // check must tolerate: compare only the specified slots.
    let mut worst = rel_dev(
        got.at(1, slice.aux_c()),
        b_vals[0] * a_vals[j - 1] + b,
    );
    for t in 1..=l {
        for c in 0..slice.aux_c() {
            worst = worst.max(rel_dev(got.at(t, c), z.at(t, c)));
        }
    }
    Ok(worst)
}

fn check_scale_shift(rng: &mut ChaCha8Rng, _ctx: &Ctx) -> Result<f64> {
    let d = rng.gen_range(1..=3);
    let l = rng.gen_range(1..=4);
    let dims = Dims::single_head(d, l);
    let x = random_tokens(rng, d, l, 2.0);
    let alpha = rng.gen_range(-2.0..=2.0);
    let b = rng.gen_range(0.5..=6.0);
    let slice = SliceAddress::new(&dims, 1, 1)?;
    let mut z = encode_input(&x, &dims)?;
    for t in 0..l {
        z.rows[t][slice.aux_a()] = rng.gen_range(-3.0..=3.0);
        z.rows[t][slice.aux_b()] = rng.gen_range(-3.0..=3.0);
        z.rows[t][slice.aux_c()] = rng.gen_range(-6.0..=6.0);
    }
    let plan = build_scale_shift_ffn(&dims, &slice, alpha, b)?;
    let got = run_layers(&[plan.layer], &z, &dims);
    let mut want = z.clone();
    for t in 0..l {
        want.rows[t][slice.aux_b()] = alpha * (z.rows[t][slice.aux_c()] - b);
        want.rows[t][slice.aux_a()] = 0.0;
        want.rows[t][slice.aux_c()] = 0.0;
    }
    Ok(state_dev(&got, &want))
}

fn check_relu(rng: &mut ChaCha8Rng, _ctx: &Ctx, identity_mode: bool) -> Result<f64> {
    let d = rng.gen_range(1..=3);
    let l = rng.gen_range(1..=4);
    let dims = Dims::single_head(d, l);
    let x = random_tokens(rng, d, l, 2.0);
    let slice = SliceAddress::new(&dims, 1, 1)?;
    let mut z = encode_input(&x, &dims)?;
    for t in 0..l {
        z.rows[t][slice.aux_a()] = rng.gen_range(-3.0..=3.0);
        z.rows[t][slice.aux_c()] = rng.gen_range(-3.0..=3.0);
    }
    let plan = build_relu_ffn(&dims, &slice, identity_mode)?;
    let got = run_layers(&[plan.layer], &z, &dims);
    let mut want = z.clone();
    for t in 0..l {
        let c = z.rows[t][slice.aux_c()];
        want.rows[t][slice.aux_a()] = if identity_mode { c } else { c.max(0.0) };
    }
    Ok(state_dev(&got, &want))
}

fn random_basis(rng: &mut ChaCha8Rng) -> Result<TruncPowerBasis> {
    let degree = rng.gen_range(1..=2);
    let n_knots = rng.gen_range(0..=2);
    let mut knots: Vec<f64> = (0..n_knots).map(|_| rng.gen_range(-0.9..=0.9)).collect();
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    Ok(TruncPowerBasis::new(degree, knots, -1.0, 1.0)?)
}

fn check_tensor_basis(rng: &mut ChaCha8Rng, _ctx: &Ctx) -> Result<f64> {
    let d = rng.gen_range(1..=2);
    let dims = Dims {
        d,
        l: 1,
        h: 1,
        copies: 1,
        d_k: 2,
        d_ff: 8,
    };
    let basis = random_basis(rng)?;
    let idx: Vec<usize> = (0..d).map(|_| rng.gen_range(0..basis.size())).collect();
    let alpha = rng.gen_range(-2.0..=2.0);
    let layers = build_tensor_basis(&dims, 1, &basis, &idx, alpha, 1.0)?;
    let x = random_tokens(rng, d, 1, 1.0);
    let z = encode_input(&x, &dims)?;
    let got = run_layers(&layers, &z, &dims);
    let slice = SliceAddress::new(&dims, 1, 1)?;
    let bases = vec![basis.clone(); d];
    let want = alpha * eval_tensor_basis(&bases, &idx, &x[0])?;
    Ok(rel_dev(got.at(1, slice.aux_b()), want))
}

fn check_parallel_heads(rng: &mut ChaCha8Rng, _ctx: &Ctx) -> Result<f64> {
    let d = 2;
    let h = *[2usize, 4].get(rng.gen_range(0..2)).unwrap();
    let dims = Dims {
        d,
        l: 1,
        h,
        copies: 1,
        d_k: 2,
        d_ff: 8 * h,
    };
    let basis = random_basis(rng)?;
    let specs: Vec<HeadSpec> = (0..h)
        .map(|_| HeadSpec {
            idx: (0..d).map(|_| rng.gen_range(0..basis.size())).collect(),
            alpha: rng.gen_range(-2.0..=2.0),
        })
        .collect();
    let layers = hardmax_transformer::constructor::build_parallel_heads(
        &dims, 1, &basis, &specs, 1.0,
    )?;
    let x = random_tokens(rng, d, 1, 1.0);
    let z = encode_input(&x, &dims)?;
    let got = run_layers(&layers, &z, &dims);
    let bases = vec![basis.clone(); d];
    let mut worst = 0.0f64;
    for (s, spec) in specs.iter().enumerate() {
        let slice = SliceAddress::new(&dims, s + 1, 1)?;
        let want = spec.alpha * eval_tensor_basis(&bases, &spec.idx, &x[0])?;
        worst = worst.max(rel_dev(got.at(1, slice.aux_b()), want));
    }
    Ok(worst)
}

fn check_sum_network(rng: &mut ChaCha8Rng, _ctx: &Ctx) -> Result<f64> {
    let d = rng.gen_range(1..=2);
    let h = rng.gen_range(2..=4);
    let dims = Dims {
        d,
        l: 1,
        h,
        copies: 1,
        d_k: 2,
        d_ff: (8 * h).max(2 * h + 2),
    };
    let basis = random_basis(rng)?;
    let specs: Vec<HeadSpec> = (0..h)
        .map(|_| HeadSpec {
            idx: (0..d).map(|_| rng.gen_range(0..basis.size())).collect(),
            alpha: rng.gen_range(-2.0..=2.0),
        })
        .collect();
    let (params, _) = build_spline_network(&dims, &basis, &specs, 1.0)?;
    let x = random_tokens(rng, d, 1, 1.0);
    let got = forward(&params, &x)?;
    let bases = vec![basis.clone(); d];
    let mut want = 0.0;
    for spec in &specs {
        want += spec.alpha * eval_tensor_basis(&bases, &spec.idx, &x[0])?;
    }
    Ok(rel_dev(got, want))
}

/// Runs the full exactness suite; every construction is exercised on
/// `n_cases` randomized inputs.
pub fn run_verify(n_cases: usize, sabotage_b_margin: bool, seed: u64) -> Result<VerifyReport> {
    let ctx = Ctx {
        n_cases,
        sabotage: sabotage_b_margin,
    };
    let checks = vec![
        ctx.check("select", seed ^ 0x01, |r, c| check_select(r, c))?,
        ctx.check("select-const", seed ^ 0x02, |r, c| check_select_const(r, c))?,
        ctx.check("multiply", seed ^ 0x03, |r, c| check_multiply(r, c))?,
        ctx.check("scale-shift", seed ^ 0x04, |r, c| check_scale_shift(r, c))?,
        ctx.check("relu", seed ^ 0x05, |r, c| check_relu(r, c, false))?,
        ctx.check("identity-copy", seed ^ 0x06, |r, c| check_relu(r, c, true))?,
        ctx.check("tensor-basis", seed ^ 0x07, |r, c| check_tensor_basis(r, c))?,
        ctx.check("parallel-heads", seed ^ 0x08, |r, c| check_parallel_heads(r, c))?,
        ctx.check("sum-network", seed ^ 0x09, |r, c| check_sum_network(r, c))?,
    ];
    let pass = checks.iter().all(|l| l.pass);
    Ok(VerifyReport { checks, pass })
}
