//! Hardmax-attention transformer encoder: input coding, attention and
//! feedforward layers with residual connections, linear readout, and
//! nonzero-parameter accounting.
//!
//! The encoder is deterministic. Attention selects the key with the maximal
//! score (smallest index on ties) and scales the corresponding value by that
//! score; there is no softmax and no layer normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{count_nonzero_vec, SparseMat};

/// Width of one (head, copy) slice: d data slots, one constant slot,
/// l position slots and three auxiliary working slots.
pub const AUX_SLOTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Dimension of each input token.
    pub d: usize,
    /// Sequence length.
    pub l: usize,
    /// Number of attention heads.
    pub h: usize,
    /// Number of coding copies per head.
    pub copies: usize,
    /// Query/key dimension.
    pub d_k: usize,
    /// Hidden width of the feedforward networks.
    pub d_ff: usize,
}

impl Dims {
    pub fn slice_width(&self) -> usize {
        self.d + self.l + AUX_SLOTS
    }

    pub fn d_model(&self) -> usize {
        self.h * self.copies * self.slice_width()
    }

    /// Per-head value dimension; heads concatenate to d_model.
    pub fn d_v(&self) -> usize {
        self.copies * self.slice_width()
    }

    /// Single-head constructive dims: d_model = d + l + 4.
    pub fn single_head(d: usize, l: usize) -> Self {
        Dims {
            d,
            l,
            h: 1,
            copies: 1,
            d_k: 2,
            d_ff: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.l == 0 || self.h == 0 || self.copies == 0 {
            return Err(Error::InvalidInput(
                "d, l, h and copies must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Address of one width-(d+l+4) slice of the token coding and its slots.
///
/// Slices are linearized with the copy index varying fastest:
/// slice k = (head-1)*copies + copy for 1-based head and copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SliceAddress {
    pub head: usize,
    pub copy: usize,
    pub base_offset: usize,
    d: usize,
    l: usize,
}

impl SliceAddress {
    pub fn new(dims: &Dims, head: usize, copy: usize) -> Result<Self> {
        if head == 0 || head > dims.h {
            return Err(Error::IndexOutOfRange {
                context: "slice head index".into(),
                index: head,
                limit: dims.h,
            });
        }
        if copy == 0 || copy > dims.copies {
            return Err(Error::IndexOutOfRange {
                context: "slice copy index".into(),
                index: copy,
                limit: dims.copies,
            });
        }
        let k = (head - 1) * dims.copies + copy;
        Ok(SliceAddress {
            head,
            copy,
            base_offset: (k - 1) * dims.slice_width(),
            d: dims.d,
            l: dims.l,
        })
    }

    /// Column of data slot k (1-based, k in 1..=d).
    pub fn data(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.d);
        self.base_offset + k - 1
    }

    pub fn const_slot(&self) -> usize {
        self.base_offset + self.d
    }

    /// Column of the position slot for token j (1-based).
    pub fn pos(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.l);
        self.base_offset + self.d + j
    }

    pub fn aux_a(&self) -> usize {
        self.base_offset + self.d + self.l + 1
    }

    pub fn aux_b(&self) -> usize {
        self.base_offset + self.d + self.l + 2
    }

    pub fn aux_c(&self) -> usize {
        self.base_offset + self.d + self.l + 3
    }
}

/// Layer state: l tokens by d_model coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl TokenMatrix {
    pub fn n_tokens(&self) -> usize {
        self.rows.len()
    }

    pub fn d_model(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Value at (1-based token, 0-based column).
    pub fn at(&self, token: usize, col: usize) -> f64 {
        self.rows[token - 1][col]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    pub w_q: SparseMat,
    pub w_k: SparseMat,
    pub w_v: SparseMat,
}

impl AttentionHead {
    pub fn zeros(dims: &Dims) -> Self {
        AttentionHead {
            w_q: SparseMat::zeros(dims.d_k, dims.d_model()),
            w_k: SparseMat::zeros(dims.d_k, dims.d_model()),
            w_v: SparseMat::zeros(dims.d_v(), dims.d_model()),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.w_q.count_nonzero() + self.w_k.count_nonzero() + self.w_v.count_nonzero()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub w1: SparseMat,
    pub b1: Vec<f64>,
    pub w2: SparseMat,
    pub b2: Vec<f64>,
}

impl FeedForward {
    pub fn zeros(dims: &Dims) -> Self {
        FeedForward {
            w1: SparseMat::zeros(dims.d_ff, dims.d_model()),
            b1: vec![0.0; dims.d_ff],
            w2: SparseMat::zeros(dims.d_model(), dims.d_ff),
            b2: vec![0.0; dims.d_model()],
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.w1.count_nonzero()
            + count_nonzero_vec(&self.b1)
            + self.w2.count_nonzero()
            + count_nonzero_vec(&self.b2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub heads: Vec<AttentionHead>,
    pub ffn: FeedForward,
}

impl Layer {
    pub fn identity(dims: &Dims) -> Self {
        Layer {
            heads: (0..dims.h).map(|_| AttentionHead::zeros(dims)).collect(),
            ffn: FeedForward::zeros(dims),
        }
    }
}

/// Full parameter vector of the encoder: N (attention, feedforward) pairs
/// plus the linear readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub dims: Dims,
    pub layers: Vec<Layer>,
    /// Readout weights, token-major: entry (i-1)*d_model + c reads
    /// coordinate c of token i.
    pub out_w: Vec<f64>,
    pub out_b: f64,
}

impl EncoderParams {
    pub fn identity(dims: Dims, n_layers: usize) -> Self {
        let d_model = dims.d_model();
        EncoderParams {
            layers: (0..n_layers).map(|_| Layer::identity(&dims)).collect(),
            out_w: vec![0.0; dims.l * d_model],
            out_b: 0.0,
            dims,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let d_model = self.dims.d_model();
        if self.out_w.len() != self.dims.l * d_model {
            return Err(Error::DimensionMismatch {
                context: "readout weight vector".into(),
                expected: self.dims.l * d_model,
                got: self.out_w.len(),
            });
        }
        for (r, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != self.dims.h {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {r} head count"),
                    expected: self.dims.h,
                    got: layer.heads.len(),
                });
            }
            for head in &layer.heads {
                if head.w_q.ncols() != d_model || head.w_v.nrows() != self.dims.d_v() {
                    return Err(Error::DimensionMismatch {
                        context: format!("layer {r} attention matrices"),
                        expected: d_model,
                        got: head.w_q.ncols(),
                    });
                }
            }
            if layer.ffn.w1.ncols() != d_model || layer.ffn.w2.nrows() != d_model {
                return Err(Error::DimensionMismatch {
                    context: format!("layer {r} feedforward matrices"),
                    expected: d_model,
                    got: layer.ffn.w1.ncols(),
                });
            }
        }
        Ok(())
    }
}

/// Builds the initial representation z_0: in every (head, copy) slice the
/// data slots carry the token, the constant slot is 1, the position slots
/// are the one-hot of the token index, auxB is 1 and auxA, auxC are 0.
pub fn encode_input(x: &[Vec<f64>], dims: &Dims) -> Result<TokenMatrix> {
    dims.validate()?;
    if x.len() != dims.l {
        return Err(Error::DimensionMismatch {
            context: "input sequence length".into(),
            expected: dims.l,
            got: x.len(),
        });
    }
    for (j, tok) in x.iter().enumerate() {
        if tok.len() != dims.d {
            return Err(Error::BadToken {
                token: j + 1,
                expected: dims.d,
                got: tok.len(),
            });
        }
    }
    let d_model = dims.d_model();
    let mut rows = vec![vec![0.0; d_model]; dims.l];
    for j in 1..=dims.l {
        for head in 1..=dims.h {
            for copy in 1..=dims.copies {
                let slice = SliceAddress::new(dims, head, copy)?;
                for k in 1..=dims.d {
                    rows[j - 1][slice.data(k)] = x[j - 1][k - 1];
                }
                rows[j - 1][slice.const_slot()] = 1.0;
                rows[j - 1][slice.pos(j)] = 1.0;
                rows[j - 1][slice.aux_b()] = 1.0;
            }
        }
    }
    Ok(TokenMatrix { rows })
}

/// One multi-head hardmax attention layer with residual connection.
///
/// For each head and token: the key index with maximal score is selected
/// (smallest index wins ties) and the corresponding value vector is scaled
/// by that maximal score. Head outputs are concatenated and added to z.
pub fn attention_layer(z: &TokenMatrix, heads: &[AttentionHead], dims: &Dims) -> TokenMatrix {
    let d_v = dims.d_v();
    let l = z.n_tokens();
    let mut out = z.clone();
    for (s, head) in heads.iter().enumerate() {
        let queries: Vec<Vec<f64>> = z.rows.iter().map(|t| head.w_q.matvec(t)).collect();
        let keys: Vec<Vec<f64>> = z.rows.iter().map(|t| head.w_k.matvec(t)).collect();
        for i in 0..l {
            let mut best_j = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for j in 0..l {
                let score: f64 = queries[i]
                    .iter()
                    .zip(&keys[j])
                    .map(|(a, b)| a * b)
                    .sum();
                if score > best_score {
                    best_score = score;
                    best_j = j;
                }
            }
            let value = head.w_v.matvec(&z.rows[best_j]);
            let block = &mut out.rows[i][s * d_v..(s + 1) * d_v];
            for (o, v) in block.iter_mut().zip(&value) {
                *o += v * best_score;
            }
        }
    }
    out
}

/// Pointwise feedforward layer with ReLU hidden units and residual
/// connection, applied to each token independently.
pub fn ffn_layer(y: &TokenMatrix, ffn: &FeedForward) -> TokenMatrix {
    let mut out = y.clone();
    for (o, tok) in out.rows.iter_mut().zip(&y.rows) {
        let mut hidden = ffn.w1.matvec(tok);
        for (hv, b) in hidden.iter_mut().zip(&ffn.b1) {
            *hv = (*hv + b).max(0.0);
        }
        ffn.w2.matvec_into(&hidden, o);
        for (ov, b) in o.iter_mut().zip(&ffn.b2) {
            *ov += b;
        }
    }
    out
}

/// Linear readout z_N . w + b.
pub fn readout(z: &TokenMatrix, out_w: &[f64], out_b: f64) -> f64 {
    let d_model = z.d_model();
    let mut acc = out_b;
    for (i, row) in z.rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let w = out_w[i * d_model + c];
            if w != 0.0 {
                acc += w * v;
            }
        }
    }
    acc
}

/// Full forward pass f(x) = z_N . w + b.
pub fn forward(params: &EncoderParams, x: &[Vec<f64>]) -> Result<f64> {
    let mut z = encode_input(x, &params.dims)?;
    for layer in &params.layers {
        z = attention_layer(&z, &layer.heads, &params.dims);
        z = ffn_layer(&z, &layer.ffn);
    }
    Ok(readout(&z, &params.out_w, params.out_b))
}

/// As `forward`, but returns every intermediate state z_0 ... z_N.
pub fn forward_trace(params: &EncoderParams, x: &[Vec<f64>]) -> Result<Vec<TokenMatrix>> {
    let mut trace = Vec::with_capacity(params.layers.len() + 1);
    let mut z = encode_input(x, &params.dims)?;
    trace.push(z.clone());
    for layer in &params.layers {
        z = attention_layer(&z, &layer.heads, &params.dims);
        z = ffn_layer(&z, &layer.ffn);
        trace.push(z.clone());
    }
    Ok(trace)
}

/// Exact count of nonzero entries across all weight matrices, bias vectors
/// and the readout.
pub fn count_nonzero(params: &EncoderParams) -> usize {
    let mut n = 0;
    for layer in &params.layers {
        for head in &layer.heads {
            n += head.count_nonzero();
        }
        n += layer.ffn.count_nonzero();
    }
    n += count_nonzero_vec(&params.out_w);
    if params.out_b != 0.0 {
        n += 1;
    }
    n
}

/// Total allocated parameter slots (dense sizes), for the parameter audit.
pub fn count_param_slots(params: &EncoderParams) -> usize {
    let mut n = 0;
    for layer in &params.layers {
        for head in &layer.heads {
            n += head.w_q.param_slots() + head.w_k.param_slots() + head.w_v.param_slots();
        }
        n += layer.ffn.w1.param_slots()
            + layer.ffn.b1.len()
            + layer.ffn.w2.param_slots()
            + layer.ffn.b2.len();
    }
    n + params.out_w.len() + 1
}

/// Truncation operator: clamps to [-beta, beta].
pub fn truncate(v: f64, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    v.clamp(-beta, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims_small() -> Dims {
        Dims::single_head(1, 2)
    }

    #[test]
    fn encode_single_head_layout() {
        // d=1, l=2: token1 = (0.5, 1, 1, 0, 0, 1, 0), token2 = (-0.3, 1, 0, 1, 0, 1, 0)
        let dims = dims_small();
        let z = encode_input(&[vec![0.5], vec![-0.3]], &dims).unwrap();
        assert_eq!(z.rows[0], vec![0.5, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(z.rows[1], vec![-0.3, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn encode_repeats_slices() {
        let dims = Dims {
            d: 1,
            l: 2,
            h: 2,
            copies: 1,
            d_k: 2,
            d_ff: 8,
        };
        let z = encode_input(&[vec![0.7], vec![0.2]], &dims).unwrap();
        let w = dims.slice_width();
        for j in 0..2 {
            assert_eq!(z.rows[j][..w], z.rows[j][w..2 * w]);
        }
    }

    #[test]
    fn encode_position_one_hot() {
        let dims = Dims {
            d: 2,
            l: 3,
            h: 1,
            copies: 1,
            d_k: 2,
            d_ff: 8,
        };
        let x = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
        let z = encode_input(&x, &dims).unwrap();
        let slice = SliceAddress::new(&dims, 1, 1).unwrap();
        for j in 1..=3 {
            for t in 1..=3 {
                let expect = if t == j { 1.0 } else { 0.0 };
                assert_eq!(z.at(j, slice.pos(t)), expect);
            }
        }
    }

    #[test]
    fn encode_rejects_bad_token() {
        let dims = dims_small();
        let err = encode_input(&[vec![0.5, 0.1], vec![-0.3]], &dims).unwrap_err();
        assert!(matches!(err, Error::BadToken { token: 1, .. }));
    }

    #[test]
    fn zero_query_attention_is_identity() {
        // All-zero W_Q: every score 0, smallest index selected, scale 0.
        let dims = dims_small();
        let z = encode_input(&[vec![0.5], vec![-0.3]], &dims).unwrap();
        let mut head = AttentionHead::zeros(&dims);
        head.w_k.set(0, 0, 1.0);
        head.w_v.set(3, 1, 2.0);
        let out = attention_layer(&z, &[head], &dims);
        assert_eq!(out, z);
    }

    #[test]
    fn zero_value_attention_is_identity() {
        let dims = dims_small();
        let z = encode_input(&[vec![0.9], vec![0.4]], &dims).unwrap();
        let mut head = AttentionHead::zeros(&dims);
        head.w_q.set(0, 0, 1.3);
        head.w_k.set(0, 1, -0.8);
        let out = attention_layer(&z, &[head], &dims);
        assert_eq!(out, z);
    }

    #[test]
    fn zero_ffn_is_identity() {
        let dims = dims_small();
        let z = encode_input(&[vec![0.5], vec![-0.3]], &dims).unwrap();
        let out = ffn_layer(&z, &FeedForward::zeros(&dims));
        assert_eq!(out, z);
    }

    #[test]
    fn relu_kills_negative_passthrough() {
        // One hidden unit copying coordinate 0; input -3 stays -3 after
        // residual because ReLU(-3) = 0.
        let dims = dims_small();
        let mut ffn = FeedForward::zeros(&dims);
        ffn.w1.set(0, 0, 1.0);
        ffn.w2.set(0, 0, 1.0);
        let y = TokenMatrix {
            rows: vec![vec![-3.0; dims.d_model()]; 1],
        };
        let out = ffn_layer(&y, &ffn);
        assert_eq!(out.rows[0][0], -3.0);
    }

    #[test]
    fn forward_zero_layers_reads_coding() {
        let dims = dims_small();
        let mut params = EncoderParams::identity(dims, 0);
        params.out_w[0] = 1.0; // first coordinate of token 1
        let v = forward(&params, &[vec![0.42], vec![0.1]]).unwrap();
        assert_eq!(v, 0.42);
    }

    #[test]
    fn forward_all_zero_returns_bias() {
        let dims = dims_small();
        let mut params = EncoderParams::identity(dims, 3);
        params.out_b = -1.25;
        let v = forward(&params, &[vec![0.1], vec![0.2]]).unwrap();
        assert_eq!(v, -1.25);
    }

    #[test]
    fn trace_structure() {
        let dims = dims_small();
        let mut params = EncoderParams::identity(dims, 2);
        params.out_w[3] = 2.0;
        params.out_b = 0.5;
        let x = vec![vec![0.3], vec![0.8]];
        let trace = forward_trace(&params, &x).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace[0], encode_input(&x, &params.dims).unwrap());
        assert_eq!(
            readout(&trace[2], &params.out_w, params.out_b),
            forward(&params, &x).unwrap()
        );
    }

    #[test]
    fn count_nonzero_zero_params() {
        let params = EncoderParams::identity(dims_small(), 4);
        assert_eq!(count_nonzero(&params), 0);
    }

    #[test]
    fn truncate_examples() {
        assert_eq!(truncate(2.0, 1.0), 1.0);
        assert_eq!(truncate(-0.4, 1.0), -0.4);
        assert_eq!(truncate(-5.0, 1.0), -1.0);
    }

    #[test]
    fn tie_break_selects_smallest_index() {
        // Symmetric input: both keys give equal scores; token 2's value must
        // come from index 1.
        let dims = dims_small();
        let z = encode_input(&[vec![1.0], vec![1.0]], &dims).unwrap();
        let mut head = AttentionHead::zeros(&dims);
        head.w_q.set(0, 1, 1.0); // const slot
        head.w_k.set(0, 0, 1.0); // data slot, equal for both tokens
        // value = position one-hot, so the output reveals which token won
        let slice = SliceAddress::new(&dims, 1, 1).unwrap();
        head.w_v.set(6, slice.pos(1), 1.0);
        let out = attention_layer(&z, &[head], &dims);
        // score = 1.0 for both keys; selected key must be token 1, whose
        // pos(1) = 1, so auxC of every token gains 1.0 * 1.0.
        assert_eq!(out.at(1, slice.aux_c()), 1.0);
        assert_eq!(out.at(2, slice.aux_c()), 1.0);
    }
}
