//! Multi-head key/query/value attention layers.
//!
//! Streams are laid out as [d x N] — one column per sequence position.
//! Each head projects with a [3 x d' x d] weight block; queries and keys
//! receive positional terms, values never do:
//!
//!   Q = T'1 (X_q + P_q),  K = T'2 (X_kv + P_kv),  V = T'3 X_kv
//!
//! Positional encodings are re-added at every layer's attention inputs.
//! The language-encoder side passes `None` positions (it embeds them at the
//! input) and a key mask excluding padding from attention.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Layer-norm epsilon used throughout the stack.
pub const LN_EPS: f64 = 1e-5;

/// Forward execution mode: eval is deterministic, train threads a seeded
/// rng through every dropout site.
pub enum Mode<'a> {
    Eval,
    Train { dropout_rng: &'a mut ChaCha8Rng },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn apply_dropout<E: Element>(&mut self, x: &Tensor<E>, p: f64) -> Result<Tensor<E>> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train { dropout_rng } => x.dropout(p, true, dropout_rng),
        }
    }
}

/// Fixed sinusoidal positional table, shape [d x N].
#[derive(Debug, Clone)]
pub struct PositionalEncoding<E: Element> {
    table: Tensor<E>,
}

impl<E: Element> PositionalEncoding<E> {
    /// Token-position encoding: channel pair (2k, 2k+1) holds
    /// sin/cos(pos / 10000^(2k/d)). Requires even `d`.
    pub fn sinusoidal_1d(d: usize, len: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Param(format!("positional encoding needs even d, got {d}")));
        }
        let mut data = vec![E::zero(); d * len];
        fill_sinusoid(&mut data, d, len, 0, |pos| pos);
        Ok(PositionalEncoding {
            table: Tensor::from_vec(vec![d, len], data)?,
        })
    }

    /// Image-grid encoding: first d/2 channels encode the row index, last
    /// d/2 the column index, over raster-flattened positions. Requires
    /// d divisible by 4.
    pub fn sinusoidal_2d(d: usize, h: usize, w: usize) -> Result<Self> {
        if d == 0 || d % 4 != 0 {
            return Err(Error::Param(format!(
                "2-d positional encoding needs d divisible by 4, got {d}"
            )));
        }
        let half = d / 2;
        let n = h * w;
        let mut data = vec![E::zero(); d * n];
        fill_sinusoid(&mut data[..half * n], half, n, 0, |pos| pos / w);
        fill_sinusoid(&mut data[half * n..], half, n, 0, |pos| pos % w);
        Ok(PositionalEncoding {
            table: Tensor::from_vec(vec![d, n], data)?,
        })
    }

    /// All-zero table (positions disabled but shapes kept).
    pub fn zeros(d: usize, len: usize) -> Self {
        PositionalEncoding {
            table: Tensor::zeros(vec![d, len]),
        }
    }

    pub fn table(&self) -> &Tensor<E> {
        &self.table
    }

    pub fn dim(&self) -> usize {
        self.table.rows()
    }

    pub fn len(&self) -> usize {
        self.table.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.table.cols() == 0
    }

    /// Permute positions (columns); used by the permutation-invariance
    /// checks.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let (d, n) = (self.dim(), self.len());
        if perm.len() != n {
            return Err(Error::Param("permutation length mismatch".into()));
        }
        let src = self.table.data();
        let mut data = vec![E::zero(); d * n];
        for (new_col, &old_col) in perm.iter().enumerate() {
            for r in 0..d {
                data[r * n + new_col] = src[r * n + old_col];
            }
        }
        Ok(PositionalEncoding {
            table: Tensor::from_vec(vec![d, n], data)?,
        })
    }
}

fn fill_sinusoid<E: Element>(
    data: &mut [E],
    d: usize,
    len: usize,
    channel_offset: usize,
    index_of: impl Fn(usize) -> usize,
) {
    for pos in 0..len {
        let idx = index_of(pos) as f64;
        for k in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * k as f64 / d as f64);
            let angle = idx / freq;
            data[(channel_offset + 2 * k) * len + pos] = E::from_f64(angle.sin());
            data[(channel_offset + 2 * k + 1) * len + pos] = E::from_f64(angle.cos());
        }
    }
}

/// One attention head: weight tensor [3 x d' x d] concatenating the query,
/// key and value projections.
#[derive(Debug, Clone)]
pub struct AttentionHeadParams<E: Element> {
    pub t_prime: Tensor<E>,
}

impl<E: Element> AttentionHeadParams<E> {
    pub fn init(d: usize, d_prime: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionHeadParams {
            t_prime: Tensor::init_projection(vec![3, d_prime, d], d, rng),
        }
    }

    pub fn d_prime(&self) -> usize {
        self.t_prime.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.t_prime.shape()[2]
    }

    /// Projection block k (0 = query, 1 = key, 2 = value) as a [d' x d]
    /// matrix view into the weight tensor.
    pub fn block(&self, k: usize) -> Result<Tensor<E>> {
        self.t_prime
            .narrow(0, k, 1)?
            .reshape(vec![self.d_prime(), self.d()])
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&format!("{prefix}.t_prime"), &self.t_prime);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&format!("{prefix}.t_prime"), &mut self.t_prime);
    }
}

/// Project the query and key/value streams into head space. Queries and
/// keys receive their positional terms; the value projection sees the raw
/// key/value stream.
pub fn qkv_project<E: Element>(
    x_q: &Tensor<E>,
    x_kv: &Tensor<E>,
    p_q: Option<&PositionalEncoding<E>>,
    p_kv: Option<&PositionalEncoding<E>>,
    head: &AttentionHeadParams<E>,
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let xq = match p_q {
        Some(p) => x_q.add(p.table())?,
        None => x_q.clone(),
    };
    let xkv = match p_kv {
        Some(p) => x_kv.add(p.table())?,
        None => x_kv.clone(),
    };
    let q = head.block(0)?.matmul(&xq)?;
    let k = head.block(1)?.matmul(&xkv)?;
    let v = head.block(2)?.matmul(x_kv)?;
    Ok((q, k, v))
}

/// Row-normalized attention weights, shape [N_q x N_kv]:
/// alpha[i][j] = exp(Q_i . K_j / sqrt(d')) / Z_i.
///
/// `key_mask`, when given, excludes masked-out key positions from every
/// row's normalization (their weight is exactly 0).
pub fn attention_weights<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    key_mask: Option<&[bool]>,
) -> Result<Tensor<E>> {
    if q.rows() != k.rows() {
        return Err(Error::Shape(format!(
            "attention_weights: head dims differ, Q {:?} K {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let d_prime = q.rows();
    let scale = E::from_f64(1.0 / (d_prime as f64).sqrt());
    let mut scores = q.transpose()?.matmul(k)?.scale(scale);
    if let Some(mask) = key_mask {
        let (n_q, n_kv) = (scores.rows(), scores.cols());
        if mask.len() != n_kv {
            return Err(Error::Shape(format!(
                "attention_weights: mask length {} does not match {} key positions",
                mask.len(),
                n_kv
            )));
        }
        let neg = E::from_f64(-1e9);
        let mut bias = vec![E::zero(); n_q * n_kv];
        for j in 0..n_kv {
            if !mask[j] {
                for i in 0..n_q {
                    bias[i * n_kv + j] = neg;
                }
            }
        }
        scores = scores.add(&Tensor::from_vec(vec![n_q, n_kv], bias)?)?;
    }
    scores.softmax(1)
}

/// Weighted sum of the value columns: output column i is
/// sum_j alpha[i][j] V_j, shape [d' x N_q].
pub fn attention_apply<E: Element>(alpha: &Tensor<E>, v: &Tensor<E>) -> Result<Tensor<E>> {
    if alpha.cols() != v.cols() {
        return Err(Error::Shape(format!(
            "attention_apply: alpha {:?} and V {:?} disagree on key count",
            alpha.shape(),
            v.shape()
        )));
    }
    v.matmul(&alpha.transpose()?)
}

/// Head blocks plus the output projection and the residual layer norm of
/// one attention sublayer.
#[derive(Debug, Clone)]
pub struct MultiHeadParams<E: Element> {
    pub heads: Vec<AttentionHeadParams<E>>,
    pub proj: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> MultiHeadParams<E> {
    pub fn init(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if m == 0 || d % m != 0 {
            return Err(Error::Config(format!("head count {m} must divide model dim {d}")));
        }
        let d_prime = d / m;
        Ok(MultiHeadParams {
            heads: (0..m).map(|_| AttentionHeadParams::init(d, d_prime, rng)).collect(),
            proj: Tensor::init_projection(vec![d, d], d, rng),
            gamma: Tensor::param(vec![d], vec![E::one(); d]).expect("const shape"),
            beta: Tensor::param(vec![d], vec![E::zero(); d]).expect("const shape"),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}.head{i}"), f);
        }
        f(&format!("{prefix}.proj"), &self.proj);
        f(&format!("{prefix}.norm.gamma"), &self.gamma);
        f(&format!("{prefix}.norm.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.head{i}"), f);
        }
        f(&format!("{prefix}.proj"), &mut self.proj);
        f(&format!("{prefix}.norm.gamma"), &mut self.gamma);
        f(&format!("{prefix}.norm.beta"), &mut self.beta);
    }
}

/// Position-wise feed-forward (d -> d_ff -> d) with its residual norm.
#[derive(Debug, Clone)]
pub struct FeedForwardParams<E: Element> {
    pub w1: Tensor<E>,
    pub w2: Tensor<E>,
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> FeedForwardParams<E> {
    pub fn init(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForwardParams {
            w1: Tensor::init_projection(vec![d_ff, d], d, rng),
            w2: Tensor::init_projection(vec![d, d_ff], d_ff, rng),
            gamma: Tensor::param(vec![d], vec![E::one(); d]).expect("const shape"),
            beta: Tensor::param(vec![d], vec![E::zero(); d]).expect("const shape"),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.norm.gamma"), &self.gamma);
        f(&format!("{prefix}.norm.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.norm.gamma"), &mut self.gamma);
        f(&format!("{prefix}.norm.beta"), &mut self.beta);
    }
}

/// One attention sublayer: per-head attention, concat, output projection,
/// dropout, residual, layer norm.
pub fn multi_head<E: Element>(
    x_q: &Tensor<E>,
    x_kv: &Tensor<E>,
    p_q: Option<&PositionalEncoding<E>>,
    p_kv: Option<&PositionalEncoding<E>>,
    key_mask: Option<&[bool]>,
    params: &MultiHeadParams<E>,
    dropout: f64,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let mut head_outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let (q, k, v) = qkv_project(x_q, x_kv, p_q, p_kv, head)?;
        let alpha = attention_weights(&q, &k, key_mask)?;
        head_outputs.push(attention_apply(&alpha, &v)?);
    }
    let concat = Tensor::concat(0, &head_outputs)?;
    let projected = params.proj.matmul(&concat)?;
    let dropped = mode.apply_dropout(&projected, dropout)?;
    x_q.add(&dropped)?
        .layer_norm(&params.gamma, &params.beta, LN_EPS, 0)
}

fn feed_forward<E: Element>(
    x: &Tensor<E>,
    ffn: &FeedForwardParams<E>,
    dropout: f64,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let hidden = ffn.w2.matmul(&ffn.w1.matmul(x)?.relu())?;
    let dropped = mode.apply_dropout(&hidden, dropout)?;
    x.add(&dropped)?.layer_norm(&ffn.gamma, &ffn.beta, LN_EPS, 0)
}

/// Self-attention encoder layer.
#[derive(Debug, Clone)]
pub struct EncoderLayerParams<E: Element> {
    pub attn: MultiHeadParams<E>,
    pub ffn: FeedForwardParams<E>,
    pub dropout: f64,
}

impl<E: Element> EncoderLayerParams<E> {
    pub fn init(d: usize, m: usize, d_ff: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(EncoderLayerParams {
            attn: MultiHeadParams::init(d, m, rng)?,
            ffn: FeedForwardParams::init(d, d_ff, rng),
            dropout,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Self-attention over the query stream, then the position-wise
/// feed-forward, both with residual + norm. Preserves [d x N].
pub fn encoder_layer_forward<E: Element>(
    x: &Tensor<E>,
    p: Option<&PositionalEncoding<E>>,
    key_mask: Option<&[bool]>,
    layer: &EncoderLayerParams<E>,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let attended = multi_head(x, x, p, p, key_mask, &layer.attn, layer.dropout, mode)?;
    feed_forward(&attended, &layer.ffn, layer.dropout, mode)
}

/// Decoder layer: self-attention over the decoder stream, cross-attention
/// into the encoder memory, then feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayerParams<E: Element> {
    pub self_attn: MultiHeadParams<E>,
    pub cross_attn: MultiHeadParams<E>,
    pub ffn: FeedForwardParams<E>,
    pub dropout: f64,
}

impl<E: Element> DecoderLayerParams<E> {
    pub fn init(d: usize, m: usize, d_ff: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(DecoderLayerParams {
            self_attn: MultiHeadParams::init(d, m, rng)?,
            cross_attn: MultiHeadParams::init(d, m, rng)?,
            ffn: FeedForwardParams::init(d, d_ff, rng),
            dropout,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.self_attn.visit(&format!("{prefix}.self_attn"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

/// Non-autoregressive decoder layer: every position attends everywhere
/// (no causal mask). Queries carry the decoder positions in both the self
/// and cross sublayers; memory keys carry the memory positions.
pub fn decoder_layer_forward<E: Element>(
    x_dec: &Tensor<E>,
    memory: &Tensor<E>,
    p_dec: Option<&PositionalEncoding<E>>,
    p_mem: Option<&PositionalEncoding<E>>,
    layer: &DecoderLayerParams<E>,
    mode: &mut Mode,
) -> Result<Tensor<E>> {
    let self_out = multi_head(x_dec, x_dec, p_dec, p_dec, None, &layer.self_attn, layer.dropout, mode)?;
    let cross_out = multi_head(
        &self_out,
        memory,
        p_dec,
        p_mem,
        None,
        &layer.cross_attn,
        layer.dropout,
        mode,
    )?;
    feed_forward(&cross_out, &layer.ffn, layer.dropout, mode)
}
