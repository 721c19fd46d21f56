use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::forward::{gelu_grad, head, trunk_forward, BlockCache, LnCache, Packed};
use super::params::{Block, LayerNorm, ModelParams};
use super::rope::Rope;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::taskgen::TokenId;

/// Mean cross-entropy of the last-position logits of each input against its
/// target, and the exact gradient of that loss for every parameter.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &[&[TokenId]],
    targets: &[TokenId],
) -> Result<(T, ModelParams<T>)> {
    if inputs.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    let cfg = &params.config;
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("target {bad} outside vocabulary")));
    }
    let packed = Packed::new(params, inputs)?;
    let (x, cache) = trunk_forward(params, &packed);
    let last = packed.last_rows();
    let (logits, z, ln_f) = head(params, &x, &last);

    let batch = T::of(inputs.len() as f64);
    let mut probs = logits;
    let mut loss = T::zero();
    for (mut row, &t) in probs.axis_iter_mut(Axis(0)).zip(targets) {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss = loss + lse - row[t as usize];
        row.mapv_inplace(|v| (v - lse).exp());
        row[t as usize] = row[t as usize] - T::one();
    }
    loss = loss / batch;
    let dlogits = probs.mapv(|v| v / batch);

    let mut grads = params.zeros_like();
    grads.w_unembed = z.t().dot(&dlogits);
    let dz = dlogits.dot(&params.w_unembed.t());
    let dpicked = layer_norm_backward(dz.view(), &params.ln_f, &ln_f, &mut grads.ln_f);

    let mut dx = Array2::zeros(x.raw_dim());
    for (row, &r) in dpicked.axis_iter(Axis(0)).zip(&last) {
        dx.row_mut(r).assign(&row);
    }

    let rope = Rope::new(cfg.head_dim(), packed.max_len(), cfg.rope_base);
    for (l, blk) in params.blocks.iter().enumerate().rev() {
        dx = block_backward(
            blk,
            &cache.blocks[l],
            dx,
            &packed,
            &rope,
            cfg.n_heads,
            &mut grads.blocks[l],
        );
    }

    for (row, &t) in dx.axis_iter(Axis(0)).zip(&packed.tokens) {
        let mut g = grads.wte.row_mut(t as usize);
        g += &row;
    }
    Ok((loss, grads))
}

fn layer_norm_backward<T: Scalar>(
    dy: ArrayView2<'_, T>,
    ln: &LayerNorm<T>,
    cache: &LnCache<T>,
    grad: &mut LayerNorm<T>,
) -> Array2<T> {
    grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let d = T::of(dy.ncols() as f64);
    let mut dx = &dy * &ln.gain;
    for ((mut row, xhat), &rstd) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.rstd)
    {
        let mean_g = row.sum() / d;
        let mean_gx = row.dot(&xhat) / d;
        row.zip_mut_with(&xhat, |g, &xh| *g = rstd * (*g - mean_g - xh * mean_gx));
    }
    dx
}

/// Accumulates `x^T dy` and the bias gradient; returns `dy W^T`.
fn linear_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
    w: &Array2<T>,
    gw: &mut Array2<T>,
    gb: &mut Array1<T>,
) -> Array2<T> {
    *gw += &x.t().dot(&dy);
    *gb += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn block_backward<T: Scalar>(
    blk: &Block<T>,
    c: &BlockCache<T>,
    dout: Array2<T>,
    packed: &Packed,
    rope: &Rope<T>,
    n_heads: usize,
    g: &mut Block<T>,
) -> Array2<T> {
    let dh = dout.ncols() / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();

    // MLP branch; dout flows straight into the mid residual as well.
    let dg = linear_backward(
        c.g.view(),
        dout.view(),
        &blk.w_proj,
        &mut g.w_proj,
        &mut g.b_proj,
    );
    let mut du = dg;
    du.zip_mut_with(&c.u, |d, &u| *d = *d * gelu_grad(u));
    let dm = linear_backward(c.m.view(), du.view(), &blk.w_fc, &mut g.w_fc, &mut g.b_fc);
    let mut dmid = layer_norm_backward(dm.view(), &blk.ln2, &c.ln2, &mut g.ln2);
    dmid += &dout;

    // Attention branch.
    let datt = linear_backward(c.att.view(), dmid.view(), &blk.w_o, &mut g.w_o, &mut g.b_o);
    let mut dq = Array2::zeros(datt.raw_dim());
    let mut dk = Array2::zeros(datt.raw_dim());
    let mut dv = Array2::zeros(datt.raw_dim());
    for (seg, &(start, len)) in packed.segments.iter().enumerate() {
        for h in 0..n_heads {
            let cols = s![start..start + len, h * dh..(h + 1) * dh];
            let p = c.probs[seg].index_axis(Axis(0), h);
            let d_o = datt.slice(cols);
            let (qh, kh, vh) = (c.q.slice(cols), c.k.slice(cols), c.v.slice(cols));

            dv.slice_mut(cols).assign(&p.t().dot(&d_o));
            let dp = d_o.dot(&vh.t());
            let mut ds = Array2::zeros((len, len));
            for i in 0..len {
                let dot: T = (0..=i).map(|j| dp[[i, j]] * p[[i, j]]).sum();
                for j in 0..=i {
                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            let mut dqh = ds.dot(&kh);
            let mut dkh = ds.t().dot(&qh);
            rope.apply(dqh.view_mut(), true);
            rope.apply(dkh.view_mut(), true);
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
        }
    }
    let mut da = linear_backward(c.a.view(), dq.view(), &blk.w_q, &mut g.w_q, &mut g.b_q);
    da += &linear_backward(c.a.view(), dk.view(), &blk.w_k, &mut g.w_k, &mut g.b_k);
    da += &linear_backward(c.a.view(), dv.view(), &blk.w_v, &mut g.w_v, &mut g.b_v);
    let mut dx = layer_norm_backward(da.view(), &blk.ln1, &c.ln1, &mut g.ln1);
    dx += &dmid;
    dx
}
