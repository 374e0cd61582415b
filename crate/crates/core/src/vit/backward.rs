//! Analytic backward pass: parameter gradients for training and input
//! gradients for white-box attacks, from one traversal of the forward cache.
//!
//! Conventions: `backward` differentiates the MEAN cross-entropy of the
//! batch (training semantics). [`input_gradient`] rescales by the batch size
//! so each returned image slice is the gradient of that image's own loss,
//! which makes batched attack gradients exactly the stack of per-image ones.

use super::{gelu_prime, BlockCache, ForwardCache, LayerNorm, Linear, LnCache, VitParams};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::sync::atomic::{AtomicU64, Ordering};

/// Count of backward invocations, used by tests to prove that black-box
/// attack paths never touch gradient code.
pub static GRADIENT_EVALS: AtomicU64 = AtomicU64::new(0);

fn linear_backward<S: Scalar>(
    x: &[S],
    rows: usize,
    lin: &Linear<S>,
    dy: &[S],
    grad: &mut Linear<S>,
    dx: &mut [S],
    accumulate_dx: bool,
) {
    let (ind, outd) = (lin.in_dim, lin.out_dim);
    // dW = x^T dy  [in, out]
    S::gemm(ind, rows, outd, S::one(), x, 1, ind as isize, dy, outd as isize, 1, S::one(), &mut grad.w, outd as isize, 1);
    // db = column sums of dy
    for row in dy.chunks_exact(outd) {
        for (g, &v) in grad.b.iter_mut().zip(row) {
            *g += v;
        }
    }
    // dx = dy W^T  [rows, in]
    let beta = if accumulate_dx { S::one() } else { S::zero() };
    S::gemm(rows, outd, ind, S::one(), dy, outd as isize, 1, &lin.w, 1, outd as isize, beta, dx, ind as isize, 1);
}

fn layer_norm_backward<S: Scalar>(
    cache: &LnCache<S>,
    rows: usize,
    dim: usize,
    ln: &LayerNorm<S>,
    dy: &[S],
    grad: &mut LayerNorm<S>,
    dx: &mut [S],
) {
    let inv_dim = S::from_f64(1.0 / dim as f64);
    for r in 0..rows {
        let xhat = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let istd = cache.inv_std[r];
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_xhat = S::zero();
        for c in 0..dim {
            grad.gamma[c] += dyr[c] * xhat[c];
            grad.beta[c] += dyr[c];
            let dxhat = dyr[c] * ln.gamma[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[c];
        }
        mean_dxhat *= inv_dim;
        mean_dxhat_xhat *= inv_dim;
        let out = &mut dx[r * dim..(r + 1) * dim];
        for c in 0..dim {
            let dxhat = dyr[c] * ln.gamma[c];
            out[c] = istd * (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
}

/// Row-wise softmax backward: given post-softmax `a` and upstream `da`,
/// returns `a * (da - <da, a>)` per row, written over `da`.
fn softmax_backward_rows<S: Scalar>(a: &[S], da: &mut [S], dim: usize) {
    for (arow, darow) in a.chunks_exact(dim).zip(da.chunks_exact_mut(dim)) {
        let mut dot = S::zero();
        for (&av, &dv) in arow.iter().zip(darow.iter()) {
            dot += av * dv;
        }
        for (dv, &av) in darow.iter_mut().zip(arow) {
            *dv = av * (*dv - dot);
        }
    }
}

/// Gradient of the mean batch cross-entropy with respect to parameters and
/// input pixels. `cache` must come from [`super::forward`] on the same
/// `(params, x)`.
pub fn backward<S: Scalar>(
    params: &VitParams<S>,
    x: &Tensor<S>,
    labels: &[usize],
    cache: &ForwardCache<S>,
) -> Result<(VitParams<S>, Tensor<S>)> {
    GRADIENT_EVALS.fetch_add(1, Ordering::Relaxed);
    let cfg = &params.config;
    let batch = cache.batch;
    super::check_labels(cfg.num_classes, batch, labels)?;
    let (d, t, p, pd) = (cfg.embed_dim, cfg.seq_len(), cfg.num_patches(), cfg.patch_dim());
    let rows = batch * t;
    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut grads = VitParams::<S>::zeros(*cfg)?;

    // d logits = (softmax - onehot) / B
    let nc = cfg.num_classes;
    let mut dlogits = cache.logits.clone();
    super::softmax_rows(&mut dlogits, nc);
    let inv_b = S::from_f64(1.0 / batch as f64);
    for (b, &y) in labels.iter().enumerate() {
        dlogits[b * nc + y] -= S::one();
        for v in &mut dlogits[b * nc..(b + 1) * nc] {
            *v *= inv_b;
        }
    }

    // Head and final layer norm (class-token rows only).
    let mut d_normed = vec![S::zero(); batch * d];
    linear_backward(&cache.final_normed, batch, &params.head, &dlogits, &mut grads.head, &mut d_normed, false);
    let mut d_cls = vec![S::zero(); batch * d];
    layer_norm_backward(&cache.final_ln, batch, d, &params.final_ln, &d_normed, &mut grads.final_ln, &mut d_cls);

    // Token-stream gradient entering the top of the block stack.
    let mut d_seq = vec![S::zero(); rows * d];
    for b in 0..batch {
        d_seq[(b * t) * d..(b * t) * d + d].copy_from_slice(&d_cls[b * d..(b + 1) * d]);
    }

    for (l, blk) in params.blocks.iter().enumerate().rev() {
        let bc: &BlockCache<S> = &cache.blocks[l];
        let gblk = &mut grads.blocks[l];

        // MLP branch: x_out = after_attn + fc2(gelu(fc1(ln2(after_attn))))
        let d_m2 = &d_seq; // gradient wrt the fc2 output equals the stream gradient
        let mut d_a1 = vec![S::zero(); rows * cfg.mlp_hidden];
        linear_backward(&bc.a1, rows, &blk.fc2, d_m2, &mut gblk.fc2, &mut d_a1, false);
        for (dv, &z) in d_a1.iter_mut().zip(&bc.m1) {
            *dv *= gelu_prime(z);
        }
        let mut d_ln2out = vec![S::zero(); rows * d];
        linear_backward(&bc.ln2_out, rows, &blk.fc1, &d_a1, &mut gblk.fc1, &mut d_ln2out, false);
        let mut d_after_attn = vec![S::zero(); rows * d];
        layer_norm_backward(&bc.ln2, rows, d, &blk.ln2, &d_ln2out, &mut gblk.ln2, &mut d_after_attn);
        for (acc, &up) in d_after_attn.iter_mut().zip(d_seq.iter()) {
            *acc += up; // residual path
        }

        // Attention branch: after_attn = x_in + wo(heads_out)
        let mut d_heads = vec![S::zero(); rows * d];
        linear_backward(&bc.heads_out, rows, &blk.wo, &d_after_attn, &mut gblk.wo, &mut d_heads, false);

        let mut dq = vec![S::zero(); rows * d];
        let mut dk = vec![S::zero(); rows * d];
        let mut dv = vec![S::zero(); rows * d];
        let mut d_scores = vec![S::zero(); t * t];
        for b in 0..batch {
            for h in 0..heads {
                let off = (b * t) * d + h * hd;
                let a = &bc.attn[((b * heads) + h) * t * t..((b * heads) + h + 1) * t * t];
                let doh = &d_heads[off..];
                let vh = &bc.v[off..];
                // dA = dOh Vh^T
                S::gemm(t, hd, t, S::one(), doh, d as isize, 1, vh, 1, d as isize, S::zero(), &mut d_scores, t as isize, 1);
                // dVh = A^T dOh
                S::gemm(t, t, hd, S::one(), a, 1, t as isize, doh, d as isize, 1, S::one(), &mut dv[off..], d as isize, 1);
                softmax_backward_rows(a, &mut d_scores, t);
                let qh = &bc.q[off..];
                let kh = &bc.k[off..];
                // dQh = scale * dS Kh ; dKh = scale * dS^T Qh
                S::gemm(t, t, hd, scale, &d_scores, t as isize, 1, kh, d as isize, 1, S::one(), &mut dq[off..], d as isize, 1);
                S::gemm(t, t, hd, scale, &d_scores, 1, t as isize, qh, d as isize, 1, S::one(), &mut dk[off..], d as isize, 1);
            }
        }

        let mut d_ln1out = vec![S::zero(); rows * d];
        linear_backward(&bc.ln1_out, rows, &blk.wq, &dq, &mut gblk.wq, &mut d_ln1out, false);
        linear_backward(&bc.ln1_out, rows, &blk.wk, &dk, &mut gblk.wk, &mut d_ln1out, true);
        linear_backward(&bc.ln1_out, rows, &blk.wv, &dv, &mut gblk.wv, &mut d_ln1out, true);

        let mut d_x_in = vec![S::zero(); rows * d];
        layer_norm_backward(&bc.ln1, rows, d, &blk.ln1, &d_ln1out, &mut gblk.ln1, &mut d_x_in);
        for (acc, &up) in d_x_in.iter_mut().zip(d_after_attn.iter()) {
            *acc += up; // residual path
        }
        d_seq = d_x_in;
    }

    // Embedding stage: tokens[b,0] = class + pos[0]; tokens[b,1+g] = embed + pos[1+g].
    for b in 0..batch {
        for tok in 0..t {
            let src = &d_seq[(b * t + tok) * d..(b * t + tok + 1) * d];
            for c in 0..d {
                grads.pos_embed[tok * d + c] += src[c];
            }
            if tok == 0 {
                for c in 0..d {
                    grads.class_token[c] += src[c];
                }
            }
        }
    }
    // Gather patch-token gradients into [B*P, d].
    let mut d_embed = vec![S::zero(); batch * p * d];
    for b in 0..batch {
        for g in 0..p {
            let src = (b * t + 1 + g) * d;
            let dst = (b * p + g) * d;
            d_embed[dst..dst + d].copy_from_slice(&d_seq[src..src + d]);
        }
    }
    let mut d_patches = vec![S::zero(); batch * p * pd];
    linear_backward(&cache.patches, batch * p, &params.patch_embed, &d_embed, &mut grads.patch_embed, &mut d_patches, false);

    // Scatter patch gradients back to image layout.
    let (gh, gw, m) = (cfg.grid_h(), cfg.grid_w(), cfg.patch_size);
    let mut d_input = Tensor::<S>::zeros(x.shape());
    let di = d_input.data_mut();
    for b in 0..batch {
        let img_off = b * cfg.channels * cfg.height * cfg.width;
        for gy in 0..gh {
            for gx in 0..gw {
                let base = ((b * p) + gy * gw + gx) * pd;
                let mut k = 0;
                for c in 0..cfg.channels {
                    for i in 0..m {
                        for j in 0..m {
                            di[img_off + (c * cfg.height + gy * m + i) * cfg.width + gx * m + j] = d_patches[base + k];
                            k += 1;
                        }
                    }
                }
            }
        }
    }

    if !d_input.all_finite() {
        return Err(Error::Model("non-finite input gradient".into()));
    }
    Ok((grads, d_input))
}

/// Gradient of each image's own cross-entropy with respect to its pixels,
/// stacked along the batch axis.
pub fn input_gradient<S: Scalar>(params: &VitParams<S>, x: &Tensor<S>, labels: &[usize]) -> Result<Tensor<S>> {
    let (_, cache) = super::forward(params, x)?;
    let (_, mut g) = backward(params, x, labels, &cache)?;
    let b = S::from_f64(cache.batch as f64);
    for v in g.data_mut() {
        *v *= b;
    }
    Ok(g)
}

/// Mean-loss parameter gradients for a labelled batch.
pub fn param_gradients<S: Scalar>(params: &VitParams<S>, x: &Tensor<S>, labels: &[usize]) -> Result<VitParams<S>> {
    let (_, cache) = super::forward(params, x)?;
    backward(params, x, labels, &cache).map(|(g, _)| g)
}
