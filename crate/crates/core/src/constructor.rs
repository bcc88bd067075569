//! Compiles spline and hierarchical-composition descriptions into explicit
//! encoder weights.
//!
//! The building blocks are single attention/feedforward pairs:
//! a *select* pair copies one coordinate of one token (minus a shift) into a
//! slice's auxA slot, a *multiply* pair writes auxB·auxA + B into auxC, a
//! *scale-shift* feedforward turns that into alpha·auxB·auxA while clearing
//! the working slots, and a final *sum* pair adds the per-slice results.
//! Chaining these computes alpha·prod_k B_{j_k}(x^(k)) for truncated-power
//! basis functions, h of them in parallel (one per head), and whole
//! composition trees block by block (one copy of the coding per block).
//!
//! Every margin constant B is derived by interval arithmetic over the
//! reachable values of each coordinate (a 2x safety factor over the required
//! "B > 2 · max" preconditions), so the hardmax selections are always strict.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    count_nonzero, count_param_slots, AttentionHead, Dims, EncoderParams, FeedForward, Layer,
    SliceAddress,
};
use crate::error::{Error, Result};
use crate::hcm::{node_interval, HcmInstance, HcmNode, Interval, SmoothFn};
use crate::linalg::SparseMat;
use crate::spline::{
    eval_grid, eval_tensor_basis, fit_spline_ls, tensor_indices, BasisIndex, SplineFit,
    TruncPowerBasis,
};

pub const TAG_SELECT: &str = "L1-select";
pub const TAG_SELECT_CONST: &str = "L1-select-const";
pub const TAG_MULTIPLY: &str = "L2-multiply";
pub const TAG_SCALE_SHIFT: &str = "L3-scale-shift";
pub const TAG_RELU: &str = "L3b-relu";
pub const TAG_RELU_IDENTITY: &str = "L3b-identity";
pub const TAG_RELU_INPLACE: &str = "L3b-relu-inplace";
pub const TAG_SUM: &str = "L5b-sum";

/// One attention + feedforward pair emitted by a builder, with a tag naming
/// the construction it realizes.
#[derive(Debug, Clone)]
pub struct LayerPairPlan {
    pub tag: &'static str,
    pub layer: Layer,
}

/// Where a select pair reads its value from: a data slot of a token, or an
/// arbitrary coordinate of a token (used to read earlier blocks' results).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceCoord {
    Data { token: usize, dim: usize },
    Column { token: usize, col: usize },
}

impl SourceCoord {
    pub fn token(&self) -> usize {
        match self {
            SourceCoord::Data { token, .. } | SourceCoord::Column { token, .. } => *token,
        }
    }

    /// Global column addressed by this source, resolving data slots within
    /// the given slice.
    pub fn column(&self, slice: &SliceAddress) -> usize {
        match self {
            SourceCoord::Data { dim, .. } => slice.data(*dim),
            SourceCoord::Column { col, .. } => *col,
        }
    }
}

/// Maps a flattened input coordinate (1-based, in 1..=d*l) to its token and
/// within-token dimension.
pub fn flat_source(dims: &Dims, coord: usize) -> Result<SourceCoord> {
    if coord == 0 || coord > dims.d * dims.l {
        return Err(Error::IndexOutOfRange {
            context: "flattened input coordinate".into(),
            index: coord,
            limit: dims.d * dims.l,
        });
    }
    Ok(SourceCoord::Data {
        token: (coord - 1) / dims.d + 1,
        dim: (coord - 1) % dims.d + 1,
    })
}

/// One unary factor of a basis-function product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorKind {
    /// x -> 1 (constant-select variant of the select pair).
    Constant1,
    /// x -> x.
    Identity,
    /// x -> (x - u)_+.
    TruncShift { u: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub src: SourceCoord,
}

/// Decomposes the 1-d basis function with index `j` into exactly `m_deg`
/// unary factors: x^j becomes j identities and m_deg - j constants, and
/// (x - u)_+^M becomes M repeated truncated shifts.
pub fn factor_decomposition(
    basis: &TruncPowerBasis,
    j: usize,
    src: SourceCoord,
    m_deg: usize,
) -> Result<Vec<FactorSpec>> {
    if j >= basis.size() {
        return Err(Error::IndexOutOfRange {
            context: "basis index in factor decomposition".into(),
            index: j,
            limit: basis.size(),
        });
    }
    if basis.degree != m_deg {
        return Err(Error::InvalidBasis(format!(
            "basis degree {} does not match factor budget {m_deg}",
            basis.degree
        )));
    }
    let mut out = Vec::with_capacity(m_deg);
    if j <= m_deg {
        for _ in 0..j {
            out.push(FactorSpec {
                kind: FactorKind::Identity,
                src,
            });
        }
        for _ in j..m_deg {
            out.push(FactorSpec {
                kind: FactorKind::Constant1,
                src,
            });
        }
    } else {
        let u = basis.knots[j - m_deg - 1];
        for _ in 0..m_deg {
            out.push(FactorSpec {
                kind: FactorKind::TruncShift { u },
                src,
            });
        }
    }
    Ok(out)
}

fn local_row(dims: &Dims, slice: &SliceAddress, global_col: usize) -> usize {
    global_col - (slice.head - 1) * dims.d_v()
}

fn acc(m: &mut SparseMat, row: usize, col: usize, v: f64) {
    let prev = m.get(row, col);
    m.set(row, col, prev + v);
}

// ---------------------------------------------------------------------------
// Low-level emitters: write one construction into an existing layer.
// ---------------------------------------------------------------------------

/// Select: token 1's auxA of the slice gains value(src at its token) - u.
pub fn emit_select(
    dims: &Dims,
    head: &mut AttentionHead,
    slice: &SliceAddress,
    src: &SourceCoord,
    u: f64,
    b: f64,
) -> Result<()> {
    let col = src.column(slice);
    if col >= dims.d_model() {
        return Err(Error::IndexOutOfRange {
            context: "select source column".into(),
            index: col,
            limit: dims.d_model(),
        });
    }
    let j = src.token();
    if j == 0 || j > dims.l {
        return Err(Error::IndexOutOfRange {
            context: "select source token".into(),
            index: j,
            limit: dims.l,
        });
    }
    head.w_q.set(0, slice.pos(1), 1.0);
    head.w_q.set(1, slice.pos(1), b);
    acc(&mut head.w_k, 0, col, 1.0);
    acc(&mut head.w_k, 0, slice.const_slot(), -u - b);
    head.w_k.set(1, slice.pos(j), 1.0);
    head.w_v
        .set(local_row(dims, slice, slice.aux_a()), slice.const_slot(), 1.0);
    Ok(())
}

/// Constant-select variant: token 1's auxA of the slice gains 1.
pub fn emit_select_const(
    dims: &Dims,
    head: &mut AttentionHead,
    slice: &SliceAddress,
    token_j: usize,
    b: f64,
) -> Result<()> {
    if token_j == 0 || token_j > dims.l {
        return Err(Error::IndexOutOfRange {
            context: "select source token".into(),
            index: token_j,
            limit: dims.l,
        });
    }
    head.w_q.set(0, slice.pos(1), 1.0);
    head.w_q.set(1, slice.pos(1), b);
    head.w_k.set(0, slice.const_slot(), 1.0 - b);
    head.w_k.set(1, slice.pos(token_j), 1.0);
    head.w_v
        .set(local_row(dims, slice, slice.aux_a()), slice.const_slot(), 1.0);
    Ok(())
}

/// Multiply: token 1's auxC of the slice gains auxB(token 1)·auxA(token j) + B.
pub fn emit_multiply(
    dims: &Dims,
    head: &mut AttentionHead,
    slice: &SliceAddress,
    token_j: usize,
    b: f64,
) -> Result<()> {
    if token_j == 0 || token_j > dims.l {
        return Err(Error::IndexOutOfRange {
            context: "multiply source token".into(),
            index: token_j,
            limit: dims.l,
        });
    }
    head.w_q.set(0, slice.aux_b(), 1.0);
    head.w_q.set(1, slice.pos(1), b);
    head.w_k.set(0, slice.aux_a(), 1.0);
    head.w_k.set(1, slice.pos(token_j), 1.0);
    head.w_v
        .set(local_row(dims, slice, slice.aux_c()), slice.const_slot(), 1.0);
    Ok(())
}

/// Scale-shift feedforward on one slice, using 8 hidden units starting at
/// `hidden_base`: auxB <- alpha·(auxC - B); auxA <- 0; auxC <- 0, applied to
/// every token. The ±alpha entries are always allocated (even when alpha is
/// zero) so the support mask is independent of the coefficient values.
pub fn emit_scale_shift(
    dims: &Dims,
    ffn: &mut FeedForward,
    slice: &SliceAddress,
    hidden_base: usize,
    alpha: f64,
    b: f64,
) -> Result<()> {
    if hidden_base + 8 > dims.d_ff {
        return Err(Error::Capacity {
            constraint: format!(
                "scale-shift needs 8 hidden units at offset {hidden_base}, d_ff = {}",
                dims.d_ff
            ),
        });
    }
    let (h0, a_col, b_col, c_col, one) = (
        hidden_base,
        slice.aux_a(),
        slice.aux_b(),
        slice.aux_c(),
        slice.const_slot(),
    );
    ffn.w1.set(h0, a_col, 1.0);
    ffn.w1.set(h0 + 1, a_col, -1.0);
    ffn.w1.set(h0 + 2, b_col, 1.0);
    ffn.w1.set(h0 + 3, b_col, -1.0);
    ffn.w1.set(h0 + 4, one, -b);
    ffn.w1.set(h0 + 4, c_col, 1.0);
    ffn.w1.set(h0 + 5, one, b);
    ffn.w1.set(h0 + 5, c_col, -1.0);
    ffn.w1.set(h0 + 6, c_col, 1.0);
    ffn.w1.set(h0 + 7, c_col, -1.0);
    ffn.w2.set(a_col, h0, -1.0);
    ffn.w2.set(a_col, h0 + 1, 1.0);
    ffn.w2.set(b_col, h0 + 2, -1.0);
    ffn.w2.set(b_col, h0 + 3, 1.0);
    ffn.w2.set(b_col, h0 + 4, alpha);
    ffn.w2.set(b_col, h0 + 5, -alpha);
    ffn.w2.set(c_col, h0 + 6, -1.0);
    ffn.w2.set(c_col, h0 + 7, 1.0);
    Ok(())
}

/// In-place rectification of auxA using one hidden unit:
/// auxA <- auxA + relu(-auxA) = max{auxA, 0}.
pub fn emit_relu_inplace(
    dims: &Dims,
    ffn: &mut FeedForward,
    slice: &SliceAddress,
    hidden: usize,
) -> Result<()> {
    if hidden >= dims.d_ff {
        return Err(Error::Capacity {
            constraint: format!("rectifier needs hidden unit {hidden}, d_ff = {}", dims.d_ff),
        });
    }
    ffn.w1.set(hidden, slice.aux_a(), -1.0);
    ffn.w2.set(slice.aux_a(), hidden, 1.0);
    Ok(())
}

/// auxA <- max{auxC, 0} (3 hidden units), or auxA <- auxC in identity mode
/// (4 hidden units); all other slots unchanged.
pub fn emit_relu_aux(
    dims: &Dims,
    ffn: &mut FeedForward,
    slice: &SliceAddress,
    hidden_base: usize,
    identity_mode: bool,
) -> Result<()> {
    let need = if identity_mode { 4 } else { 3 };
    if hidden_base + need > dims.d_ff {
        return Err(Error::Capacity {
            constraint: format!(
                "aux rectifier needs {need} hidden units at offset {hidden_base}, d_ff = {}",
                dims.d_ff
            ),
        });
    }
    let (h0, a_col, c_col) = (hidden_base, slice.aux_a(), slice.aux_c());
    ffn.w1.set(h0, a_col, 1.0);
    ffn.w1.set(h0 + 1, a_col, -1.0);
    ffn.w1.set(h0 + 2, c_col, 1.0);
    ffn.w2.set(a_col, h0, -1.0);
    ffn.w2.set(a_col, h0 + 1, 1.0);
    ffn.w2.set(a_col, h0 + 2, 1.0);
    if identity_mode {
        ffn.w1.set(h0 + 3, c_col, -1.0);
        ffn.w2.set(a_col, h0 + 3, -1.0);
    }
    Ok(())
}

/// Sum feedforward: the auxC slot of slice (h, copy) gains the sum of all h
/// slices' auxB values of that copy; 2h + 2 nonzeros, two hidden units.
/// Returns the global result column.
pub fn emit_sum(dims: &Dims, ffn: &mut FeedForward, copy: usize) -> Result<usize> {
    if dims.d_ff < 2 * dims.h + 2 {
        return Err(Error::Capacity {
            constraint: format!(
                "sum layer needs d_ff >= {}, got {}",
                2 * dims.h + 2,
                dims.d_ff
            ),
        });
    }
    for head in 1..=dims.h {
        let slice = SliceAddress::new(dims, head, copy)?;
        ffn.w1.set(0, slice.aux_b(), 1.0);
        ffn.w1.set(1, slice.aux_b(), -1.0);
    }
    let target = SliceAddress::new(dims, dims.h, copy)?.aux_c();
    ffn.w2.set(target, 0, 1.0);
    ffn.w2.set(target, 1, -1.0);
    Ok(target)
}

// ---------------------------------------------------------------------------
// Single-pair builders (one construction per otherwise-identity layer).
// ---------------------------------------------------------------------------

pub fn build_select(
    dims: &Dims,
    slice: &SliceAddress,
    src: &SourceCoord,
    u: f64,
    b: f64,
) -> Result<LayerPairPlan> {
    let mut layer = Layer::identity(dims);
    emit_select(dims, &mut layer.heads[slice.head - 1], slice, src, u, b)?;
    Ok(LayerPairPlan {
        tag: TAG_SELECT,
        layer,
    })
}

pub fn build_select_const(
    dims: &Dims,
    slice: &SliceAddress,
    token_j: usize,
    b: f64,
) -> Result<LayerPairPlan> {
    let mut layer = Layer::identity(dims);
    emit_select_const(dims, &mut layer.heads[slice.head - 1], slice, token_j, b)?;
    Ok(LayerPairPlan {
        tag: TAG_SELECT_CONST,
        layer,
    })
}

pub fn build_multiply(
    dims: &Dims,
    slice: &SliceAddress,
    token_j: usize,
    b: f64,
) -> Result<LayerPairPlan> {
    let mut layer = Layer::identity(dims);
    emit_multiply(dims, &mut layer.heads[slice.head - 1], slice, token_j, b)?;
    Ok(LayerPairPlan {
        tag: TAG_MULTIPLY,
        layer,
    })
}

pub fn build_scale_shift_ffn(
    dims: &Dims,
    slice: &SliceAddress,
    alpha: f64,
    b: f64,
) -> Result<LayerPairPlan> {
    let mut layer = Layer::identity(dims);
    emit_scale_shift(dims, &mut layer.ffn, slice, 0, alpha, b)?;
    Ok(LayerPairPlan {
        tag: TAG_SCALE_SHIFT,
        layer,
    })
}

pub fn build_relu_ffn(
    dims: &Dims,
    slice: &SliceAddress,
    identity_mode: bool,
) -> Result<LayerPairPlan> {
    let mut layer = Layer::identity(dims);
    emit_relu_aux(dims, &mut layer.ffn, slice, 0, identity_mode)?;
    Ok(LayerPairPlan {
        tag: if identity_mode {
            TAG_RELU_IDENTITY
        } else {
            TAG_RELU
        },
        layer,
    })
}

pub fn build_relu_inplace_ffn(dims: &Dims, slice: &SliceAddress) -> Result<LayerPairPlan> {
    let mut layer = Layer::identity(dims);
    emit_relu_inplace(dims, &mut layer.ffn, slice, 0)?;
    Ok(LayerPairPlan {
        tag: TAG_RELU_INPLACE,
        layer,
    })
}

pub fn build_sum_layer(dims: &Dims, copy: usize) -> Result<(LayerPairPlan, usize)> {
    let mut layer = Layer::identity(dims);
    let target = emit_sum(dims, &mut layer.ffn, copy)?;
    Ok((
        LayerPairPlan {
            tag: TAG_SUM,
            layer,
        },
        target,
    ))
}

// ---------------------------------------------------------------------------
// Margin tracking.
// ---------------------------------------------------------------------------

/// Per-token, per-column interval bounds on the reachable coordinate values,
/// updated alongside every emitted construction. Margins are 4·max{1, bound},
/// twice each precondition's required "2 · max".
#[derive(Debug, Clone)]
pub struct RangeTracker {
    dims: Dims,
    /// cols[token-1][column].
    cols: Vec<Vec<Interval>>,
}

impl RangeTracker {
    /// Ranges of the input coding with data values in [-a, a].
    pub fn new(dims: &Dims, a: f64) -> Self {
        let mut cols = vec![vec![Interval::point(0.0); dims.d_model()]; dims.l];
        for token in 1..=dims.l {
            for head in 1..=dims.h {
                for copy in 1..=dims.copies {
                    let slice = SliceAddress::new(dims, head, copy).expect("valid slice");
                    let row = &mut cols[token - 1];
                    for k in 1..=dims.d {
                        row[slice.data(k)] = Interval::symmetric(a);
                    }
                    row[slice.const_slot()] = Interval::point(1.0);
                    row[slice.pos(token)] = Interval::point(1.0);
                    row[slice.aux_b()] = Interval::point(1.0);
                }
            }
        }
        RangeTracker {
            dims: *dims,
            cols,
        }
    }

    pub fn interval(&self, token: usize, col: usize) -> Interval {
        self.cols[token - 1][col]
    }

    fn hull(&self, col: usize) -> Interval {
        self.cols
            .iter()
            .map(|row| row[col])
            .reduce(|a, b| a.hull(b))
            .expect("at least one token")
    }

    fn margin(bound: f64) -> f64 {
        4.0 * bound.max(1.0)
    }

    pub fn select_margin(&self, slice: &SliceAddress, src: &SourceCoord) -> f64 {
        Self::margin(self.hull(src.column(slice)).max_abs())
    }

    pub fn apply_select(&mut self, slice: &SliceAddress, src: &SourceCoord, u: f64) {
        let v = self.interval(src.token(), src.column(slice)).offset(-u);
        self.cols[0][slice.aux_a()] = self.cols[0][slice.aux_a()].add(v);
    }

    pub fn apply_select_const(&mut self, slice: &SliceAddress) {
        self.cols[0][slice.aux_a()] = self.cols[0][slice.aux_a()].offset(1.0);
    }

    pub fn apply_relu_inplace(&mut self, slice: &SliceAddress) {
        for row in &mut self.cols {
            row[slice.aux_a()] = row[slice.aux_a()].relu();
        }
    }

    pub fn multiply_margin(&self, slice: &SliceAddress) -> f64 {
        let a = self.hull(slice.aux_a());
        let b = self.hull(slice.aux_b());
        Self::margin(a.mul(b).max_abs())
    }

    pub fn apply_multiply(&mut self, slice: &SliceAddress, token_j: usize, b: f64) {
        let a_hull = self.hull(slice.aux_a());
        let a_j = self.interval(token_j, slice.aux_a());
        let b_1 = self.interval(1, slice.aux_b());
        let gain_1 = b_1.mul(a_j).offset(b);
        self.cols[0][slice.aux_c()] = self.cols[0][slice.aux_c()].add(gain_1);
        for row in self.cols.iter_mut().skip(1) {
            let gain = row[slice.aux_b()].mul(a_hull);
            row[slice.aux_c()] = row[slice.aux_c()].add(gain);
        }
    }

    pub fn apply_scale_shift(&mut self, slice: &SliceAddress, alpha: f64, b: f64) {
        for row in &mut self.cols {
            row[slice.aux_b()] = row[slice.aux_c()].offset(-b).scale(alpha);
            row[slice.aux_a()] = Interval::point(0.0);
            row[slice.aux_c()] = Interval::point(0.0);
        }
    }

    pub fn apply_sum(&mut self, copy: usize, target: usize) {
        let dims = self.dims;
        for row in &mut self.cols {
            let mut sum = Interval::point(0.0);
            for head in 1..=dims.h {
                let slice = SliceAddress::new(&dims, head, copy).expect("valid slice");
                sum = sum.add(row[slice.aux_b()]);
            }
            row[target] = row[target].add(sum);
        }
    }

    /// Overrides token 1's interval for a column with an externally measured
    /// bound (used to keep block-result ranges tight).
    pub fn set_token1(&mut self, col: usize, interval: Interval) {
        self.cols[0][col] = interval;
    }
}

// ---------------------------------------------------------------------------
// Pipeline builder.
// ---------------------------------------------------------------------------

/// Location of the ±alpha entries of a head's final scale-shift, so a fitted
/// coefficient can be written back into a compiled network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlphaSlot {
    pub layer: usize,
    pub row: usize,
    pub col_pos: usize,
    pub col_neg: usize,
}

impl AlphaSlot {
    pub fn write(&self, params: &mut EncoderParams, alpha: f64) {
        let w2 = &mut params.layers[self.layer].ffn.w2;
        w2.set(self.row, self.col_pos, alpha);
        w2.set(self.row, self.col_neg, -alpha);
    }

    pub fn read(&self, params: &EncoderParams) -> f64 {
        params.layers[self.layer].ffn.w2.get(self.row, self.col_pos)
    }
}

/// Per-head basis assignment for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSpec {
    pub idx: BasisIndex,
    pub alpha: f64,
}

/// Assembles layers sequentially while tracking coordinate ranges for the
/// margin schedule.
pub struct PipelineBuilder {
    dims: Dims,
    tracker: RangeTracker,
    layers: Vec<Layer>,
}

impl PipelineBuilder {
    pub fn new(dims: &Dims, a: f64) -> Result<Self> {
        dims.validate()?;
        if dims.d_k < 2 {
            return Err(Error::Capacity {
                constraint: format!("constructions need d_k >= 2, got {}", dims.d_k),
            });
        }
        Ok(PipelineBuilder {
            dims: *dims,
            tracker: RangeTracker::new(dims, a),
            layers: Vec::new(),
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tracker(&self) -> &RangeTracker {
        &self.tracker
    }

    pub fn push_identity(&mut self) {
        self.layers.push(Layer::identity(&self.dims));
    }

    /// Emits the 2·M·K layer pairs computing, for every head s of `copy`,
    /// alpha_s · prod_k B_{idx_s[k]}(value of sources[k]) into that slice's
    /// auxB slot of token 1. Returns the per-head alpha slots.
    pub fn push_basis_block(
        &mut self,
        copy: usize,
        basis: &TruncPowerBasis,
        specs: &[HeadSpec],
        sources: &[SourceCoord],
    ) -> Result<Vec<AlphaSlot>> {
        let dims = self.dims;
        if specs.len() != dims.h {
            return Err(Error::DimensionMismatch {
                context: "head specs".into(),
                expected: dims.h,
                got: specs.len(),
            });
        }
        if dims.d_ff < 8 * dims.h {
            return Err(Error::Capacity {
                constraint: format!(
                    "parallel scale-shift needs d_ff >= {}, got {}",
                    8 * dims.h,
                    dims.d_ff
                ),
            });
        }
        let m_deg = basis.degree;
        let k_arity = sources.len();
        let n_factors = m_deg * k_arity;
        // Per-head factor list: dimension-major, m_deg factors per dimension.
        let mut plans: Vec<Vec<FactorSpec>> = Vec::with_capacity(dims.h);
        for spec in specs {
            if spec.idx.len() != k_arity {
                return Err(Error::DimensionMismatch {
                    context: "basis index arity".into(),
                    expected: k_arity,
                    got: spec.idx.len(),
                });
            }
            let mut plan = Vec::with_capacity(n_factors);
            for (k, &j) in spec.idx.iter().enumerate() {
                plan.extend(factor_decomposition(basis, j, sources[k], m_deg)?);
            }
            plans.push(plan);
        }
        let mut slots = Vec::with_capacity(dims.h);
        for f in 0..n_factors {
            // Pair A: select into auxA, rectify where the factor needs it.
            let mut layer = Layer::identity(&dims);
            for (s, plan) in plans.iter().enumerate() {
                let slice = SliceAddress::new(&dims, s + 1, copy)?;
                let factor = &plan[f];
                match factor.kind {
                    FactorKind::Constant1 => {
                        let b = RangeTracker::margin(1.0);
                        emit_select_const(&dims, &mut layer.heads[s], &slice, 1, b)?;
                        self.tracker.apply_select_const(&slice);
                    }
                    FactorKind::Identity => {
                        let b = self.tracker.select_margin(&slice, &factor.src);
                        emit_select(&dims, &mut layer.heads[s], &slice, &factor.src, 0.0, b)?;
                        self.tracker.apply_select(&slice, &factor.src, 0.0);
                    }
                    FactorKind::TruncShift { u } => {
                        let b = self.tracker.select_margin(&slice, &factor.src);
                        emit_select(&dims, &mut layer.heads[s], &slice, &factor.src, u, b)?;
                        self.tracker.apply_select(&slice, &factor.src, u);
                        emit_relu_inplace(&dims, &mut layer.ffn, &slice, s)?;
                        self.tracker.apply_relu_inplace(&slice);
                    }
                }
            }
            self.layers.push(layer);
            // Pair B: multiply into auxC, scale-shift back into auxB.
            let last = f == n_factors - 1;
            let mut layer = Layer::identity(&dims);
            for (s, spec) in specs.iter().enumerate() {
                let slice = SliceAddress::new(&dims, s + 1, copy)?;
                let b = self.tracker.multiply_margin(&slice);
                emit_multiply(&dims, &mut layer.heads[s], &slice, 1, b)?;
                self.tracker.apply_multiply(&slice, 1, b);
                let alpha = if last { spec.alpha } else { 1.0 };
                emit_scale_shift(&dims, &mut layer.ffn, &slice, 8 * s, alpha, b)?;
                self.tracker.apply_scale_shift(&slice, alpha, b);
                if last {
                    slots.push(AlphaSlot {
                        layer: self.layers.len(),
                        row: slice.aux_b(),
                        col_pos: 8 * s + 4,
                        col_neg: 8 * s + 5,
                    });
                }
            }
            self.layers.push(layer);
        }
        Ok(slots)
    }

    /// Emits the sum pair for `copy` and returns the result column.
    pub fn push_sum(&mut self, copy: usize) -> Result<usize> {
        let mut layer = Layer::identity(&self.dims);
        let target = emit_sum(&self.dims, &mut layer.ffn, copy)?;
        self.tracker.apply_sum(copy, target);
        self.layers.push(layer);
        Ok(target)
    }

    pub fn finish(self) -> Vec<Layer> {
        self.layers
    }
}

/// Network computing a single tensor-product basis function (token 1,
/// designated slice's auxB). Margins follow from data values in [-a, a].
pub fn build_tensor_basis(
    dims: &Dims,
    copy: usize,
    basis: &TruncPowerBasis,
    idx: &BasisIndex,
    alpha: f64,
    a: f64,
) -> Result<Vec<Layer>> {
    let specs: Vec<HeadSpec> = (0..dims.h)
        .map(|s| {
            if s == 0 {
                HeadSpec {
                    idx: idx.clone(),
                    alpha,
                }
            } else {
                HeadSpec {
                    idx: vec![0; idx.len()],
                    alpha: 0.0,
                }
            }
        })
        .collect();
    let sources: Vec<SourceCoord> = (1..=idx.len())
        .map(|c| flat_source(dims, c))
        .collect::<Result<_>>()?;
    let mut builder = PipelineBuilder::new(dims, a)?;
    builder.push_basis_block(copy, basis, &specs, &sources)?;
    Ok(builder.finish())
}

/// Network computing h tensor-product basis functions in parallel, one per
/// head, on the coordinates 1..=K of the flattened input.
pub fn build_parallel_heads(
    dims: &Dims,
    copy: usize,
    basis: &TruncPowerBasis,
    specs: &[HeadSpec],
    a: f64,
) -> Result<Vec<Layer>> {
    let k_arity = specs
        .first()
        .map(|s| s.idx.len())
        .ok_or_else(|| Error::InvalidInput("no head specs".into()))?;
    let sources: Vec<SourceCoord> = (1..=k_arity)
        .map(|c| flat_source(dims, c))
        .collect::<Result<_>>()?;
    let mut builder = PipelineBuilder::new(dims, a)?;
    builder.push_basis_block(copy, basis, specs, &sources)?;
    Ok(builder.finish())
}

/// Full spline network: parallel heads, the sum pair, and a readout of the
/// summed value. Returns the parameters and the result column.
pub fn build_spline_network(
    dims: &Dims,
    basis: &TruncPowerBasis,
    specs: &[HeadSpec],
    a: f64,
) -> Result<(EncoderParams, usize)> {
    let k_arity = specs
        .first()
        .map(|s| s.idx.len())
        .ok_or_else(|| Error::InvalidInput("no head specs".into()))?;
    let sources: Vec<SourceCoord> = (1..=k_arity)
        .map(|c| flat_source(dims, c))
        .collect::<Result<_>>()?;
    let mut builder = PipelineBuilder::new(dims, a)?;
    builder.push_basis_block(1, basis, specs, &sources)?;
    let result_col = builder.push_sum(1)?;
    let layers = builder.finish();
    let mut params = EncoderParams::identity(*dims, 0);
    params.layers = layers;
    params.out_w[result_col] = 1.0;
    Ok((params, result_col))
}

// ---------------------------------------------------------------------------
// Hierarchical composition compilation.
// ---------------------------------------------------------------------------

/// Where a block reads each of its arguments from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChildSource {
    /// 1-based flattened input coordinate.
    Input { coord: usize },
    /// Index of an earlier block.
    Block { index: usize },
}

/// One compiled composite submodel.
#[derive(Debug, Clone)]
pub struct BlockInfo {
    pub copy: usize,
    pub layer_start: usize,
    pub pairs_used: usize,
    pub fit: SplineFit,
    /// Basis indices of the active heads, aligned with fit.coefficients.
    pub head_indices: Vec<BasisIndex>,
    pub alpha_slots: Vec<AlphaSlot>,
    pub children: Vec<ChildSource>,
    pub result_col: usize,
    /// Interval-propagated bound on the true submodel value.
    pub true_bound: f64,
    /// Measured bound on the fitted approximant over its domain.
    pub approx_bound: f64,
    /// Half-width of the fitting domain.
    pub domain: f64,
}

/// A compiled hierarchical composition network: the encoder parameters plus
/// enough metadata to evaluate the approximant directly, to re-fit the top
/// block's coefficients, and to audit the sparsity budget.
#[derive(Debug, Clone)]
pub struct CompiledHcm {
    pub params: EncoderParams,
    pub blocks: Vec<BlockInfo>,
    pub result_col: usize,
    /// Sparsity budget 144·(q_max+1)·K_max·I·h.
    pub nonzero_budget: usize,
    pub pairs_per_block: usize,
}

impl CompiledHcm {
    pub fn top_block(&self) -> &BlockInfo {
        self.blocks.last().expect("at least one block")
    }

    fn child_values(&self, block: &BlockInfo, x: &[f64]) -> Result<Vec<f64>> {
        block
            .children
            .iter()
            .map(|c| match c {
                ChildSource::Input { coord } => {
                    x.get(*coord - 1).copied().ok_or(Error::IndexOutOfRange {
                        context: "input coordinate".into(),
                        index: *coord,
                        limit: x.len(),
                    })
                }
                ChildSource::Block { index } => self.block_value(*index, x),
            })
            .collect()
    }

    /// Evaluates block `index`'s approximant directly (recursively through
    /// the spline fits); equals the network's internal value for that block.
    pub fn block_value(&self, index: usize, x: &[f64]) -> Result<f64> {
        let block = &self.blocks[index];
        let args = self.child_values(block, x)?;
        self.blocks[index].fit.eval(&args)
    }

    /// The approximant computed by the network's forward pass.
    pub fn output(&self, x: &[f64]) -> Result<f64> {
        self.block_value(self.blocks.len() - 1, x)
    }

    /// Top-block basis functions evaluated at the (approximate) child
    /// values, one value per active head: the regression features of the
    /// restricted least-squares estimate.
    pub fn top_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let top = self.top_block();
        let args = self.child_values(top, x)?;
        top.head_indices
            .iter()
            .map(|idx| eval_tensor_basis(&top.fit.bases, idx, &args))
            .collect()
    }

    /// Writes new top-block coefficients into both the weight matrices and
    /// the evaluation metadata.
    pub fn set_top_coefficients(&mut self, coeffs: &[f64]) -> Result<()> {
        let n_active = self.top_block().alpha_slots.len();
        if coeffs.len() != n_active {
            return Err(Error::DimensionMismatch {
                context: "top-block coefficients".into(),
                expected: n_active,
                got: coeffs.len(),
            });
        }
        let top = self.blocks.last_mut().expect("at least one block");
        for (slot, &c) in top.alpha_slots.iter().zip(coeffs) {
            slot.write(&mut self.params, c);
        }
        top.fit.coefficients = coeffs.to_vec();
        Ok(())
    }
}

struct RawBlock {
    g: SmoothFn,
    children: Vec<ChildSource>,
    true_bound: f64,
}

fn collect_blocks(node: &HcmNode, a: f64, out: &mut Vec<RawBlock>) -> Result<ChildSource> {
    match node {
        HcmNode::Leaf { coord } => Ok(ChildSource::Input { coord: *coord }),
        HcmNode::Composite { g, children } => {
            let sources = children
                .iter()
                .map(|c| collect_blocks(c, a, out))
                .collect::<Result<Vec<_>>>()?;
            out.push(RawBlock {
                g: g.clone(),
                children: sources,
                true_bound: node_interval(node, a).max_abs().max(a),
            });
            Ok(ChildSource::Block { index: out.len() - 1 })
        }
    }
}

/// Basis functions per dimension for h heads shared over K dimensions:
/// the largest t with t^K <= h.
pub fn basis_per_dim(h: usize, k_arity: usize) -> usize {
    let mut t = (h as f64).powf(1.0 / k_arity as f64).round() as usize;
    while t.pow(k_arity as u32) > h {
        t -= 1;
    }
    t.max(1)
}

/// Compiles a hierarchical composition model into encoder weights: one block
/// of 2·M_max·K_max + 1 layer pairs per composite submodel, each block
/// working in its own copy of the coding and reading its children's results
/// from their blocks' output columns.
pub fn compile_hcm(inst: &HcmInstance, h: usize, copies: usize) -> Result<CompiledHcm> {
    let a = inst.a;
    let mut raw = Vec::new();
    collect_blocks(&inst.node, a, &mut raw)?;
    if copies < raw.len() {
        return Err(Error::Capacity {
            constraint: format!("model needs {} copies, got {copies}", raw.len()),
        });
    }
    let m_max = raw.iter().map(|b| b.g.q().max(1)).max().unwrap();
    let k_max = raw.iter().map(|b| b.g.arity).max().unwrap();
    let q_max = raw.iter().map(|b| b.g.q()).max().unwrap();
    let pairs_per_block = 2 * m_max * k_max + 1;
    let dims = Dims {
        d: inst.d,
        l: inst.l,
        h,
        copies,
        d_k: 2,
        d_ff: (8 * h).max(2 * h + 2).max(10),
    };
    let mut builder = PipelineBuilder::new(&dims, a)?;
    let mut blocks: Vec<BlockInfo> = Vec::with_capacity(raw.len());

    for (b, rb) in raw.iter().enumerate() {
        let copy = b + 1;
        let k_arity = rb.g.arity;
        let m_deg = rb.g.q().max(1);
        let t = basis_per_dim(h, k_arity);
        if t < m_deg + 1 {
            return Err(Error::Capacity {
                constraint: format!(
                    "h = {h} gives {t} basis functions per dimension, need at least {} \
                     for degree {m_deg} with arity {k_arity}",
                    m_deg + 1
                ),
            });
        }
        // The fitting domain must contain the children's values: exactly
        // [-a, a] for input coordinates, and true bound + 1 for compiled
        // children, whose approximants may overshoot (verified below).
        let mut domain = a;
        for c in &rb.children {
            let bound = match c {
                ChildSource::Input { .. } => a,
                ChildSource::Block { index } => {
                    let child = &blocks[*index];
                    if child.approx_bound > child.true_bound + 1.0 {
                        return Err(Error::Capacity {
                            constraint: format!(
                                "block {index} approximant bound {:.3} exceeds {:.3}; \
                                 h = {h} is too small for this model",
                                child.approx_bound,
                                child.true_bound + 1.0
                            ),
                        });
                    }
                    child.true_bound + 1.0
                }
            };
            domain = domain.max(bound);
        }
        let basis = TruncPowerBasis::equidistant(m_deg, t, -domain, domain)?;
        let bases = vec![basis.clone(); k_arity];
        let fit = fit_spline_ls(|y| rb.g.eval(y), &bases, (2 * t).max(m_deg + 2))?;
        let approx_bound = eval_grid(&bases, 2 * t + 1)
            .iter()
            .map(|p| fit.eval(p).map(f64::abs))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0_f64, f64::max);

        let head_indices = tensor_indices(&bases);
        let mut specs: Vec<HeadSpec> = head_indices
            .iter()
            .zip(&fit.coefficients)
            .map(|(idx, &alpha)| HeadSpec {
                idx: idx.clone(),
                alpha,
            })
            .collect();
        specs.resize(
            h,
            HeadSpec {
                idx: vec![0; k_arity],
                alpha: 0.0,
            },
        );
        let sources: Vec<SourceCoord> = rb
            .children
            .iter()
            .map(|c| match c {
                ChildSource::Input { coord } => flat_source(&dims, *coord),
                ChildSource::Block { index } => Ok(SourceCoord::Column {
                    token: 1,
                    col: blocks[*index].result_col,
                }),
            })
            .collect::<Result<_>>()?;

        let layer_start = builder.n_layers();
        let slots = builder.push_basis_block(copy, &basis, &specs, &sources)?;
        let result_col = builder.push_sum(copy)?;
        builder
            .tracker
            .set_token1(result_col, Interval::symmetric(approx_bound));
        let pairs_used = 2 * m_deg * k_arity + 1;
        for _ in pairs_used..pairs_per_block {
            builder.push_identity();
        }
        blocks.push(BlockInfo {
            copy,
            layer_start,
            pairs_used,
            fit,
            head_indices,
            alpha_slots: slots.into_iter().take(t.pow(k_arity as u32)).collect(),
            children: rb.children.clone(),
            result_col,
            true_bound: rb.true_bound,
            approx_bound,
            domain,
        });
    }
    // Unused copies keep their reserved (identity) layer range.
    for _ in raw.len()..copies {
        for _ in 0..pairs_per_block {
            builder.push_identity();
        }
    }
    let result_col = blocks.last().unwrap().result_col;
    let layers = builder.finish();
    let mut params = EncoderParams::identity(dims, 0);
    params.layers = layers;
    params.out_w[result_col] = 1.0;
    Ok(CompiledHcm {
        params,
        blocks,
        result_col,
        nonzero_budget: 144 * (q_max + 1) * k_max * copies * h,
        pairs_per_block,
    })
}

// ---------------------------------------------------------------------------
// Parameter audit.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub nonzeros: usize,
    pub nonzero_bound: usize,
    pub nonzero_pass: bool,
    pub param_slots: usize,
    pub param_bound: usize,
    pub param_pass: bool,
}

impl AuditReport {
    pub fn pass(&self) -> bool {
        self.nonzero_pass && self.param_pass
    }
}

/// Checks a network against the budgets nonzeros <= 144·M·d·h and total
/// parameter slots <= 235·M·max{l, d, d_k, d_ff}^3·h^2.
pub fn audit_params(params: &EncoderParams, m_deg: usize) -> AuditReport {
    let d = params.dims.d;
    let h = params.dims.h;
    let nonzeros = count_nonzero(params);
    let nonzero_bound = 144 * m_deg * d * h;
    let param_slots = count_param_slots(params);
    let dim_max = params
        .dims
        .l
        .max(d)
        .max(params.dims.d_k)
        .max(params.dims.d_ff);
    let param_bound = 235 * m_deg * dim_max.pow(3) * h * h;
    AuditReport {
        nonzeros,
        nonzero_bound,
        nonzero_pass: nonzeros <= nonzero_bound,
        param_slots,
        param_bound,
        param_pass: param_slots <= param_bound,
    }
}
