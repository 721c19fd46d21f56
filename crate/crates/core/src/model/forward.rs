use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use super::params::{Block, LayerNorm, ModelParams};
use super::rope::Rope;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::taskgen::TokenId;

/// Everything observable from one forward pass over a single sequence.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// `(seq, vocab)` logits at every position.
    pub logits: Array2<T>,
    /// Per layer, post-softmax attention `(heads, query, key)`.
    pub attention: Vec<Array3<T>>,
    /// Per layer, residual stream after the block, `(seq, d)`.
    pub hidden: Vec<Array2<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn attn(&self, layer: usize, head: usize, query: usize, key: usize) -> Option<T> {
        self.attention.get(layer)?.get((head, query, key)).copied()
    }
}

/// Several sequences laid end to end; row `i` of every activation belongs to
/// exactly one segment. Attention never crosses segments.
pub(crate) struct Packed {
    pub tokens: Vec<TokenId>,
    /// `(start, len)` of each sequence.
    pub segments: Vec<(usize, usize)>,
}

impl Packed {
    pub fn new<T: Scalar>(params: &ModelParams<T>, seqs: &[&[TokenId]]) -> Result<Self> {
        let cfg = &params.config;
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut tokens = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if seq.len() > cfg.max_seq {
                return Err(Error::Input(format!(
                    "sequence of length {} exceeds max_seq {}",
                    seq.len(),
                    cfg.max_seq
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::Input(format!(
                    "token {bad} outside vocabulary of size {}",
                    cfg.vocab_size
                )));
            }
            segments.push((tokens.len(), seq.len()));
            tokens.extend_from_slice(seq);
        }
        Ok(Self { tokens, segments })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_len(&self) -> usize {
        self.segments.iter().map(|s| s.1).max().unwrap_or(0)
    }

    pub fn last_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|&(s, l)| s + l - 1).collect()
    }
}

pub(crate) struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: ArrayView2<'_, T>,
    ln: &LayerNorm<T>,
    eps: T,
) -> (Array2<T>, LnCache<T>) {
    let d = T::of(x.ncols() as f64);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.axis_iter_mut(Axis(0)).zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / d;
        *r = T::one() / (var + eps).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let mut y = &xhat * &ln.gain;
    y += &ln.bias;
    (y, LnCache { xhat, rstd })
}

pub(crate) fn linear<T: Scalar>(x: ArrayView2<'_, T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(u: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * u * (T::one() + (k * (u + T::of(GELU_C) * u * u * u)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(u: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let t = (k * (u + T::of(GELU_C) * u * u * u)).tanh();
    half * (T::one() + t)
        + half * u * (T::one() - t * t) * k * (T::one() + T::of(3.0 * GELU_C) * u * u)
}

/// Activations of one block kept for the backward pass.
pub(crate) struct BlockCache<T> {
    pub ln1: LnCache<T>,
    pub a: Array2<T>,
    /// Queries and keys after rotation.
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    /// Per segment, `(heads, len, len)` attention probabilities.
    pub probs: Vec<Array3<T>>,
    pub att: Array2<T>,
    pub ln2: LnCache<T>,
    pub m: Array2<T>,
    pub u: Array2<T>,
    pub g: Array2<T>,
}

pub(crate) struct Cache<T> {
    pub blocks: Vec<BlockCache<T>>,
    /// Residual stream after each block.
    pub outputs: Vec<Array2<T>>,
}

pub(crate) fn block_forward<T: Scalar>(
    blk: &Block<T>,
    x: &Array2<T>,
    packed: &Packed,
    rope: &Rope<T>,
    n_heads: usize,
    eps: T,
) -> (Array2<T>, BlockCache<T>) {
    let dh = x.ncols() / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let (a, ln1) = layer_norm(x.view(), &blk.ln1, eps);
    let mut q = linear(a.view(), &blk.w_q, &blk.b_q);
    let mut k = linear(a.view(), &blk.w_k, &blk.b_k);
    let v = linear(a.view(), &blk.w_v, &blk.b_v);

    let mut att = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(packed.segments.len());
    for &(start, len) in &packed.segments {
        let mut p_seg = Array3::zeros((n_heads, len, len));
        for h in 0..n_heads {
            let cols = s![start..start + len, h * dh..(h + 1) * dh];
            rope.apply(q.slice_mut(cols), false);
            rope.apply(k.slice_mut(cols), false);
            let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
            let mut scores = qh.dot(&kh.t());
            for i in 0..len {
                let mut row = scores.row_mut(i);
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    row[j] = row[j] * scale;
                    max = max.max(row[j]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    row[j] = if j <= i {
                        (row[j] - max).exp()
                    } else {
                        T::zero()
                    };
                    sum = sum + row[j];
                }
                row.mapv_inplace(|p| p / sum);
            }
            att.slice_mut(cols).assign(&scores.dot(&vh));
            p_seg.index_axis_mut(Axis(0), h).assign(&scores);
        }
        probs.push(p_seg);
    }

    let mut x_mid = linear(att.view(), &blk.w_o, &blk.b_o);
    x_mid += x;

    let (m, ln2) = layer_norm(x_mid.view(), &blk.ln2, eps);
    let u = linear(m.view(), &blk.w_fc, &blk.b_fc);
    let g = u.mapv(gelu);
    let mut out = linear(g.view(), &blk.w_proj, &blk.b_proj);
    out += &x_mid;

    let cache = BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        att,
        ln2,
        m,
        u,
        g,
    };
    (out, cache)
}

/// Runs embedding and all blocks; returns the final residual stream.
pub(crate) fn trunk_forward<T: Scalar>(
    params: &ModelParams<T>,
    packed: &Packed,
) -> (Array2<T>, Cache<T>) {
    let cfg = &params.config;
    let eps = T::of(cfg.ln_eps);
    let rope = Rope::new(cfg.head_dim(), packed.max_len(), cfg.rope_base);

    let mut x = Array2::zeros((packed.rows(), cfg.d_model));
    for (mut row, &t) in x.axis_iter_mut(Axis(0)).zip(&packed.tokens) {
        row.assign(&params.wte.row(t as usize));
    }

    let mut cache = Cache {
        blocks: Vec::with_capacity(params.blocks.len()),
        outputs: Vec::with_capacity(params.blocks.len()),
    };
    for blk in &params.blocks {
        let (y, bc) = block_forward(blk, &x, packed, &rope, cfg.n_heads, eps);
        cache.blocks.push(bc);
        cache.outputs.push(y.clone());
        x = y;
    }
    (x, cache)
}

/// Final norm and unembedding of selected rows.
pub(crate) fn head<T: Scalar>(
    params: &ModelParams<T>,
    x: &Array2<T>,
    rows: &[usize],
) -> (Array2<T>, Array2<T>, LnCache<T>) {
    let picked = x.select(Axis(0), rows);
    let (z, ln) = layer_norm(picked.view(), &params.ln_f, T::of(params.config.ln_eps));
    let logits = z.dot(&params.w_unembed);
    (logits, z, ln)
}

/// Full forward pass over one sequence, keeping logits at every position,
/// every attention map and every block output.
pub fn forward<T: Scalar>(params: &ModelParams<T>, tokens: &[TokenId]) -> Result<ForwardTrace<T>> {
    let packed = Packed::new(params, &[tokens])?;
    let (x, cache) = trunk_forward(params, &packed);
    let rows: Vec<usize> = (0..packed.rows()).collect();
    let (logits, _, _) = head(params, &x, &rows);
    let Cache { blocks, outputs } = cache;
    Ok(ForwardTrace {
        logits,
        attention: blocks.into_iter().map(|mut b| b.probs.remove(0)).collect(),
        hidden: outputs,
    })
}

/// Logits at the last position of each input, `(batch, vocab)`.
pub fn last_logits<T: Scalar>(params: &ModelParams<T>, inputs: &[&[TokenId]]) -> Result<Array2<T>> {
    let packed = Packed::new(params, inputs)?;
    let (x, _) = trunk_forward(params, &packed);
    let (logits, _, _) = head(params, &x, &packed.last_rows());
    Ok(logits)
}

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Scalar>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut p = logits.mapv(|v| (v - max).exp());
    let sum = p.sum();
    p.mapv_inplace(|v| v / sum);
    p
}
