//! A fixed tiny patch-embedding transformer classifier with exact analytic
//! forward and backward passes.
//!
//! The architecture is deliberately frozen: patch embedding over `M x M`
//! blocks, a learned class token and positional embedding, `L` pre-norm
//! transformer blocks (multi-head self-attention + 2-layer GELU MLP), a final
//! layer norm on the class token, and a linear head. No autodiff — the
//! backward pass is written out so both parameter gradients (training) and
//! input gradients (white-box attacks) are available and checkable against
//! finite differences.
//!
//! Patches are flattened channel-first, then row, then column — the same
//! order [`crate::keys`] uses for blocks, so an image encrypted with a
//! block permutation reaches the model as the same patch sequence with
//! permuted coordinates inside each patch vector.

mod backward;
mod gradcheck;

pub use backward::{backward, input_gradient, param_gradients, GRADIENT_EVALS};
pub use gradcheck::{grad_check, GradCheckBudget};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Epsilon inside layer-norm denominators. Fixed architectural constant.
pub const LN_EPS: f64 = 1e-5;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

/// Geometry and width choices for the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
}

impl VitConfig {
    /// The desk-scale configuration used throughout the experiments:
    /// 32x32x3 inputs, 4x4 patches, width 64, 2 blocks, 4 heads.
    pub fn desk() -> Self {
        VitConfig {
            channels: 3,
            height: 32,
            width: 32,
            patch_size: 4,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            mlp_hidden: 128,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let any_zero = [
            self.channels,
            self.height,
            self.width,
            self.patch_size,
            self.embed_dim,
            self.num_blocks,
            self.num_heads,
            self.mlp_hidden,
            self.num_classes,
        ]
        .iter()
        .any(|&v| v == 0);
        if any_zero {
            return Err(Error::Model("config has a zero extent".into()));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Model(format!(
                "{}x{} not divisible by patch size {}",
                self.height, self.width, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Model(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    /// Pixels per patch: C * M * M.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub w: Vec<S>, // [in_dim, out_dim] row-major
    pub b: Vec<S>, // [out_dim]
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<S: Scalar> Linear<S> {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear { w: vec![S::zero(); in_dim * out_dim], b: vec![S::zero(); out_dim], in_dim, out_dim }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gamma: Vec<S>,
    pub beta: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    fn identity(dim: usize) -> Self {
        LayerNorm { gamma: vec![S::one(); dim], beta: vec![S::zero(); dim] }
    }
    fn zeros(dim: usize) -> Self {
        LayerNorm { gamma: vec![S::zero(); dim], beta: vec![S::zero(); dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<S> {
    pub ln1: LayerNorm<S>,
    pub wq: Linear<S>,
    pub wk: Linear<S>,
    pub wv: Linear<S>,
    pub wo: Linear<S>,
    pub ln2: LayerNorm<S>,
    pub fc1: Linear<S>,
    pub fc2: Linear<S>,
}

/// All parameters of the classifier, plus the geometry they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct VitParams<S = f32> {
    pub config: VitConfig,
    pub patch_embed: Linear<S>, // [p_b, d]
    pub class_token: Vec<S>,    // [d]
    pub pos_embed: Vec<S>,      // [T, d]
    pub blocks: Vec<Block<S>>,
    pub final_ln: LayerNorm<S>,
    pub head: Linear<S>, // [d, num_classes]
}

impl<S: Scalar> VitParams<S> {
    /// All-zero parameters (gradient/velocity containers, zero-map tests).
    pub fn zeros(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let blocks = (0..config.num_blocks)
            .map(|_| Block {
                ln1: LayerNorm::zeros(d),
                wq: Linear::zeros(d, d),
                wk: Linear::zeros(d, d),
                wv: Linear::zeros(d, d),
                wo: Linear::zeros(d, d),
                ln2: LayerNorm::zeros(d),
                fc1: Linear::zeros(d, config.mlp_hidden),
                fc2: Linear::zeros(config.mlp_hidden, d),
            })
            .collect();
        Ok(VitParams {
            config,
            patch_embed: Linear::zeros(config.patch_dim(), d),
            class_token: vec![S::zero(); d],
            pos_embed: vec![S::zero(); config.seq_len() * d],
            blocks,
            final_ln: LayerNorm::zeros(d),
            head: Linear::zeros(d, config.num_classes),
        })
    }

    /// Seeded init: truncated normal (sigma 0.02) weights, zero biases,
    /// identity layer norms.
    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut r = rng::stream(seed);
        let mut fill = |v: &mut [S]| {
            for e in v.iter_mut() {
                *e = S::from_f64(rng::truncated_normal(&mut r, 0.02));
            }
        };
        fill(&mut p.patch_embed.w);
        fill(&mut p.class_token);
        fill(&mut p.pos_embed);
        for b in &mut p.blocks {
            b.ln1 = LayerNorm::identity(config.embed_dim);
            b.ln2 = LayerNorm::identity(config.embed_dim);
            fill(&mut b.wq.w);
            fill(&mut b.wk.w);
            fill(&mut b.wv.w);
            fill(&mut b.wo.w);
            fill(&mut b.fc1.w);
            fill(&mut b.fc2.w);
        }
        p.final_ln = LayerNorm::identity(config.embed_dim);
        fill(&mut p.head.w);
        Ok(p)
    }

    /// Visit every parameter tensor in a fixed, documented order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[S])) {
        f("patch_embed.w", &self.patch_embed.w);
        f("patch_embed.b", &self.patch_embed.b);
        f("class_token", &self.class_token);
        f("pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            let n = |s: &str| format!("block{i}.{s}");
            f(&n("ln1.g"), &b.ln1.gamma);
            f(&n("ln1.b"), &b.ln1.beta);
            f(&n("attn.wq.w"), &b.wq.w);
            f(&n("attn.wq.b"), &b.wq.b);
            f(&n("attn.wk.w"), &b.wk.w);
            f(&n("attn.wk.b"), &b.wk.b);
            f(&n("attn.wv.w"), &b.wv.w);
            f(&n("attn.wv.b"), &b.wv.b);
            f(&n("attn.wo.w"), &b.wo.w);
            f(&n("attn.wo.b"), &b.wo.b);
            f(&n("ln2.g"), &b.ln2.gamma);
            f(&n("ln2.b"), &b.ln2.beta);
            f(&n("mlp.fc1.w"), &b.fc1.w);
            f(&n("mlp.fc1.b"), &b.fc1.b);
            f(&n("mlp.fc2.w"), &b.fc2.w);
            f(&n("mlp.fc2.b"), &b.fc2.b);
        }
        f("final_ln.g", &self.final_ln.gamma);
        f("final_ln.b", &self.final_ln.beta);
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    /// Mutable variant of [`VitParams::visit`], same order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [S])) {
        f("patch_embed.w", &mut self.patch_embed.w);
        f("patch_embed.b", &mut self.patch_embed.b);
        f("class_token", &mut self.class_token);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = |s: &str| format!("block{i}.{s}");
            f(&n("ln1.g"), &mut b.ln1.gamma);
            f(&n("ln1.b"), &mut b.ln1.beta);
            f(&n("attn.wq.w"), &mut b.wq.w);
            f(&n("attn.wq.b"), &mut b.wq.b);
            f(&n("attn.wk.w"), &mut b.wk.w);
            f(&n("attn.wk.b"), &mut b.wk.b);
            f(&n("attn.wv.w"), &mut b.wv.w);
            f(&n("attn.wv.b"), &mut b.wv.b);
            f(&n("attn.wo.w"), &mut b.wo.w);
            f(&n("attn.wo.b"), &mut b.wo.b);
            f(&n("ln2.g"), &mut b.ln2.gamma);
            f(&n("ln2.b"), &mut b.ln2.beta);
            f(&n("mlp.fc1.w"), &mut b.fc1.w);
            f(&n("mlp.fc1.b"), &mut b.fc1.b);
            f(&n("mlp.fc2.w"), &mut b.fc2.w);
            f(&n("mlp.fc2.b"), &mut b.fc2.b);
        }
        f("final_ln.g", &mut self.final_ln.gamma);
        f("final_ln.b", &mut self.final_ln.beta);
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }
}

impl VitParams<f32> {
    pub fn to_f64(&self) -> VitParams<f64> {
        let mut out = VitParams::<f64>::zeros(self.config).expect("config already validated");
        let mut src: Vec<Vec<f64>> = Vec::new();
        self.visit(&mut |_, s| src.push(s.iter().map(|&v| f64::from(v)).collect()));
        let mut i = 0;
        out.visit_mut(&mut |_, d| {
            d.copy_from_slice(&src[i]);
            i += 1;
        });
        out
    }
}

/// Flatten an image into its patch vectors, row-major over the patch grid,
/// each patch flattened channel-first then row then column.
pub fn patchify<S: Scalar>(x: &Tensor<S>, m: usize) -> Result<Vec<Vec<S>>> {
    let [c, h, w] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        other => return Err(Error::Model(format!("patchify wants [C,H,W], got {other:?}"))),
    };
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Model(format!("{h}x{w} not divisible by patch size {m}")));
    }
    let data = x.data();
    let mut out = Vec::with_capacity((h / m) * (w / m));
    for gy in 0..h / m {
        for gx in 0..w / m {
            let mut patch = Vec::with_capacity(c * m * m);
            for ch in 0..c {
                for i in 0..m {
                    for j in 0..m {
                        patch.push(data[(ch * h + gy * m + i) * w + gx * m + j]);
                    }
                }
            }
            out.push(patch);
        }
    }
    Ok(out)
}

/// Per-row layer-norm cache needed by the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct LnCache<S> {
    pub xhat: Vec<S>,    // [rows, dim]
    pub inv_std: Vec<S>, // [rows]
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<S> {
    pub ln1: LnCache<S>,
    pub ln1_out: Vec<S>,   // [B*T, d]
    pub q: Vec<S>,         // [B*T, d]
    pub k: Vec<S>,         // [B*T, d]
    pub v: Vec<S>,         // [B*T, d]
    pub attn: Vec<S>,      // [B, heads, T, T], post-softmax
    pub heads_out: Vec<S>, // [B*T, d]
    pub after_attn: Vec<S>, // [B*T, d]
    pub ln2: LnCache<S>,
    pub ln2_out: Vec<S>, // [B*T, d]
    pub m1: Vec<S>,      // [B*T, mlp_hidden], pre-GELU
    pub a1: Vec<S>,      // [B*T, mlp_hidden], post-GELU
}

/// Intermediate activations of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub(crate) batch: usize,
    pub(crate) patches: Vec<S>, // [B*P, p_b]
    pub(crate) seq: Vec<Vec<S>>, // seq[l] = tokens entering block l; seq[L] = final tokens
    pub(crate) blocks: Vec<BlockCache<S>>,
    pub(crate) final_ln: LnCache<S>,
    pub(crate) final_normed: Vec<S>, // [B, d]
    pub(crate) logits: Vec<S>,       // [B, num_classes]
}

fn check_batch_shape<S: Scalar>(cfg: &VitConfig, x: &Tensor<S>) -> Result<usize> {
    match x.shape() {
        [b, c, h, w] if *c == cfg.channels && *h == cfg.height && *w == cfg.width => Ok(*b),
        other => Err(Error::Model(format!(
            "input shape {other:?} does not match configured [B,{},{},{}]",
            cfg.channels, cfg.height, cfg.width
        ))),
    }
}

/// `y[r] += b` for every row of a row-major [rows, dim] buffer.
fn add_bias<S: Scalar>(y: &mut [S], bias: &[S]) {
    for row in y.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn linear_forward<S: Scalar>(x: &[S], rows: usize, lin: &Linear<S>) -> Vec<S> {
    let mut y = vec![S::zero(); rows * lin.out_dim];
    S::gemm(
        rows,
        lin.in_dim,
        lin.out_dim,
        S::one(),
        x,
        lin.in_dim as isize,
        1,
        &lin.w,
        lin.out_dim as isize,
        1,
        S::zero(),
        &mut y,
        lin.out_dim as isize,
        1,
    );
    add_bias(&mut y, &lin.b);
    y
}

fn layer_norm_forward<S: Scalar>(x: &[S], rows: usize, dim: usize, ln: &LayerNorm<S>) -> (Vec<S>, LnCache<S>) {
    let eps = S::from_f64(LN_EPS);
    let inv_dim = S::from_f64(1.0 / dim as f64);
    let mut out = vec![S::zero(); rows * dim];
    let mut xhat = vec![S::zero(); rows * dim];
    let mut inv_std = vec![S::zero(); rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_dim;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_dim;
        let istd = (var + eps).sqrt().recip();
        inv_std[r] = istd;
        for (c, &v) in row.iter().enumerate() {
            let h = (v - mean) * istd;
            xhat[r * dim + c] = h;
            out[r * dim + c] = ln.gamma[c] * h + ln.beta[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// In-place row-wise softmax of a [rows, dim] buffer.
pub(crate) fn softmax_rows<S: Scalar>(x: &mut [S], dim: usize) {
    for row in x.chunks_exact_mut(dim) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

pub(crate) fn gelu<S: Scalar>(z: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let inner = c0 * (z + c1 * z * z * z);
    half * z * (S::one() + inner.tanh())
}

pub(crate) fn gelu_prime<S: Scalar>(z: S) -> S {
    let c0 = S::from_f64(GELU_C0);
    let c1 = S::from_f64(GELU_C1);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let th = (c0 * (z + c1 * z * z * z)).tanh();
    let sech2 = S::one() - th * th;
    half * (S::one() + th) + half * z * sech2 * c0 * (S::one() + three * c1 * z * z)
}

/// Run the classifier on a batch, keeping every intermediate needed for the
/// backward pass. Returns `[B, num_classes]` logits.
pub fn forward<S: Scalar>(params: &VitParams<S>, x: &Tensor<S>) -> Result<(Tensor<S>, ForwardCache<S>)> {
    let cfg = &params.config;
    let batch = check_batch_shape(cfg, x)?;
    let (d, t, p, pd, m) = (cfg.embed_dim, cfg.seq_len(), cfg.num_patches(), cfg.patch_dim(), cfg.patch_size);
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let rows = batch * t;

    // Patch extraction, [B*P, p_b].
    let xd = x.data();
    let mut patches = vec![S::zero(); batch * p * pd];
    for b in 0..batch {
        let img = &xd[b * cfg.channels * cfg.height * cfg.width..];
        for gy in 0..gh {
            for gx in 0..gw {
                let base = ((b * p) + gy * gw + gx) * pd;
                let mut k = 0;
                for c in 0..cfg.channels {
                    for i in 0..m {
                        for j in 0..m {
                            patches[base + k] = img[(c * cfg.height + gy * m + i) * cfg.width + gx * m + j];
                            k += 1;
                        }
                    }
                }
            }
        }
    }

    // Embed patches, then lay out [class_token, patch tokens...] + positions.
    let embedded = linear_forward(&patches, batch * p, &params.patch_embed); // [B*P, d]
    let mut tokens = vec![S::zero(); rows * d];
    for b in 0..batch {
        let row0 = (b * t) * d;
        for c in 0..d {
            tokens[row0 + c] = params.class_token[c] + params.pos_embed[c];
        }
        for g in 0..p {
            let dst = (b * t + 1 + g) * d;
            let src = (b * p + g) * d;
            for c in 0..d {
                tokens[dst + c] = embedded[src + c] + params.pos_embed[(1 + g) * d + c];
            }
        }
    }

    let mut seq = Vec::with_capacity(cfg.num_blocks + 1);
    seq.push(tokens);
    let mut blocks = Vec::with_capacity(cfg.num_blocks);

    let heads = cfg.num_heads;
    let hd = cfg.head_dim();
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());

    for blk in &params.blocks {
        let x_in = seq.last().expect("nonempty").clone();
        let (ln1_out, ln1) = layer_norm_forward(&x_in, rows, d, &blk.ln1);
        let q = linear_forward(&ln1_out, rows, &blk.wq);
        let k = linear_forward(&ln1_out, rows, &blk.wk);
        let v = linear_forward(&ln1_out, rows, &blk.wv);

        let mut attn = vec![S::zero(); batch * heads * t * t];
        let mut heads_out = vec![S::zero(); rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let qh = &q[(b * t) * d + h * hd..];
                let kh = &k[(b * t) * d + h * hd..];
                let vh = &v[(b * t) * d + h * hd..];
                let scores = &mut attn[((b * heads) + h) * t * t..((b * heads) + h + 1) * t * t];
                // scores = scale * Qh * Kh^T
                S::gemm(t, hd, t, scale, qh, d as isize, 1, kh, 1, d as isize, S::zero(), scores, t as isize, 1);
                softmax_rows(scores, t);
                // Oh = scores * Vh, written into the head's column slice.
                let oh = &mut heads_out[(b * t) * d + h * hd..];
                S::gemm(t, t, hd, S::one(), scores, t as isize, 1, vh, d as isize, 1, S::zero(), oh, d as isize, 1);
            }
        }

        let mut after_attn = linear_forward(&heads_out, rows, &blk.wo);
        for (o, i) in after_attn.iter_mut().zip(&x_in) {
            *o += *i;
        }

        let (ln2_out, ln2) = layer_norm_forward(&after_attn, rows, d, &blk.ln2);
        let m1 = linear_forward(&ln2_out, rows, &blk.fc1);
        let a1: Vec<S> = m1.iter().map(|&z| gelu(z)).collect();
        let mut x_out = linear_forward(&a1, rows, &blk.fc2);
        for (o, i) in x_out.iter_mut().zip(&after_attn) {
            *o += *i;
        }

        blocks.push(BlockCache { ln1, ln1_out, q, k, v, attn, heads_out, after_attn, ln2, ln2_out, m1, a1 });
        seq.push(x_out);
    }

    // Final LN over class-token rows only, then the linear head.
    let last = seq.last().expect("nonempty");
    let mut cls = vec![S::zero(); batch * d];
    for b in 0..batch {
        cls[b * d..(b + 1) * d].copy_from_slice(&last[(b * t) * d..(b * t) * d + d]);
    }
    let (final_normed, final_ln) = layer_norm_forward(&cls, batch, d, &params.final_ln);
    let logits_vec = linear_forward(&final_normed, batch, &params.head);
    let logits = Tensor::from_vec(&[batch, cfg.num_classes], logits_vec.clone())?;
    if !logits.all_finite() {
        return Err(Error::Model("non-finite logits".into()));
    }

    Ok((logits, ForwardCache { batch, patches, seq, blocks, final_ln, final_normed, logits: logits_vec }))
}

/// Forward pass without keeping the cache.
pub fn forward_logits<S: Scalar>(params: &VitParams<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    forward(params, x).map(|(l, _)| l)
}

/// Row-wise softmax of logits.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let dim = match logits.shape() {
        [_, k] => *k,
        other => return Err(Error::Model(format!("softmax wants [B,K] logits, got {other:?}"))),
    };
    let mut data = logits.data().to_vec();
    softmax_rows(&mut data, dim);
    Tensor::from_vec(logits.shape(), data)
}

fn check_labels(num_classes: usize, batch: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Model(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Model(format!("label {bad} out of range 0..{num_classes}")));
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels under softmax(logits).
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let (batch, classes) = match logits.shape() {
        [b, k] => (*b, *k),
        other => return Err(Error::Model(format!("cross_entropy wants [B,K] logits, got {other:?}"))),
    };
    check_labels(classes, batch, labels)?;
    let data = logits.data();
    let mut total = S::zero();
    for (b, &y) in labels.iter().enumerate() {
        let row = &data[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for &v in row {
            sum += (v - max).exp();
        }
        total += max + sum.ln() - row[y];
    }
    let loss = total / S::from_f64(batch as f64);
    if !loss.is_finite() {
        return Err(Error::Model("non-finite loss".into()));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::{encrypt_image, PermutationKey};

    fn tiny_config() -> VitConfig {
        VitConfig {
            channels: 1,
            height: 4,
            width: 4,
            patch_size: 2,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            mlp_hidden: 16,
            num_classes: 3,
        }
    }

    fn random_image<S: Scalar>(shape: &[usize], seed: u64) -> Tensor<S> {
        use rand::Rng;
        let mut r = rng::stream(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| S::from_f64(r.random())).collect()).unwrap()
    }

    #[test]
    fn patchify_single_block() {
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let patches = patchify(&x, 2).unwrap();
        assert_eq!(patches, vec![vec![1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn patchify_grid_order_is_row_major() {
        // 4x4 single channel numbered 0..16; M=2 -> patches in order
        // top-left, top-right, bottom-left, bottom-right.
        let x = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let patches = patchify(&x, 2).unwrap();
        assert_eq!(patches.len(), 4);
        assert_eq!(patches[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(patches[1], vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(patches[2], vec![8.0, 9.0, 12.0, 13.0]);
        assert_eq!(patches[3], vec![10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_rejects_bad_divisibility() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4]);
        assert!(patchify(&x, 2).is_err());
    }

    #[test]
    fn patchify_commutes_with_encryption() {
        // patchify(encrypt(x, K)) == apply K to each patch of patchify(x)
        let x = random_image::<f32>(&[3, 8, 8], 5);
        let key = PermutationKey::generate(11, 3 * 4 * 4).unwrap();
        let enc = encrypt_image(&x, &key, 4).unwrap();
        let plain_patches = patchify(&x, 4).unwrap();
        let enc_patches = patchify(&enc, 4).unwrap();
        // Recover the permutation's action via a probe image whose pixels are
        // their own indices, avoiding any access to the secret vector.
        let probe = Tensor::from_vec(&[3, 4, 4], (0..48).map(|v| v as f32).collect()).unwrap();
        let probe_enc = encrypt_image(&probe, &key, 4).unwrap();
        let v: Vec<usize> = probe_enc.data().iter().map(|&f| f as usize).collect();
        for (pp, ep) in plain_patches.iter().zip(&enc_patches) {
            let expect: Vec<f32> = v.iter().map(|&src| pp[src]).collect();
            assert_eq!(ep, &expect);
        }
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let cfg = tiny_config();
        let params = VitParams::<f32>::zeros(cfg).unwrap();
        let x = random_image::<f32>(&[2, 1, 4, 4], 1);
        let logits = forward_logits(&params, &x).unwrap();
        for &v in logits.data() {
            assert_eq!(v, logits.data()[0]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_config();
        let params = VitParams::<f32>::init(cfg, 3).unwrap();
        let x = random_image::<f32>(&[2, 1, 4, 4], 2);
        let a = forward_logits(&params, &x).unwrap();
        let b = forward_logits(&params, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = tiny_config();
        let params = VitParams::<f32>::init(cfg, 3).unwrap();
        let batch = random_image::<f32>(&[3, 1, 4, 4], 9);
        let all = forward_logits(&params, &batch).unwrap();
        for b in 0..3 {
            let img = Tensor::from_vec(&[1, 1, 4, 4], batch.data()[b * 16..(b + 1) * 16].to_vec()).unwrap();
            let one = forward_logits(&params, &img).unwrap();
            assert_eq!(one.data(), &all.data()[b * 3..(b + 1) * 3]);
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let cfg = tiny_config();
        let params = VitParams::<f32>::zeros(cfg).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 5]);
        assert!(forward_logits(&params, &x).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let logits = Tensor::from_vec(&[1, 10], vec![0.3f32; 10]).unwrap();
        let loss = cross_entropy(&logits, &[4]).unwrap();
        assert!((f64::from(loss) - 10.0f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_confident_goes_to_zero() {
        let mut row = vec![0.0f32; 10];
        row[7] = 50.0;
        let logits = Tensor::from_vec(&[1, 10], row).unwrap();
        let loss = cross_entropy(&logits, &[7]).unwrap();
        assert!(f64::from(loss) < 1e-6, "loss={loss}");
    }

    #[test]
    fn cross_entropy_matches_independent_log_sum_exp() {
        // Independent oracle: direct log-sum-exp in f64 without max-shift.
        use rand::Rng;
        let mut r = rng::stream(21);
        for _ in 0..20 {
            let vals: Vec<f32> = (0..8).map(|_| r.random_range(-4.0..4.0)).collect();
            let y = r.random_range(0..8usize);
            let logits = Tensor::from_vec(&[1, 8], vals.clone()).unwrap();
            let got = f64::from(cross_entropy(&logits, &[y]).unwrap());
            let sum: f64 = vals.iter().map(|&v| f64::from(v).exp()).sum();
            let want = sum.ln() - f64::from(vals[y]);
            assert!((got - want).abs() / want.abs().max(1.0) < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0f32; 3]).unwrap();
        assert!(cross_entropy(&logits, &[3]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let cfg = tiny_config();
        let params = VitParams::<f32>::init(cfg, 8).unwrap();
        let x = random_image::<f32>(&[4, 1, 4, 4], 6);
        let probs = softmax(&forward_logits(&params, &x).unwrap()).unwrap();
        for row in probs.data().chunks_exact(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn permuting_blocks_and_embed_rows_leaves_logits_unchanged() {
        // Shuffling pixels inside blocks and permuting the patch-embedding
        // input rows the same way is a no-op on the logits.
        let cfg = VitConfig { channels: 3, height: 8, width: 8, ..tiny_config() };
        let params = VitParams::<f32>::init(cfg, 13).unwrap();
        let key = PermutationKey::generate(31, cfg.patch_dim()).unwrap();
        let x = random_image::<f32>(&[1, 3, 8, 8], 17);

        let img = Tensor::from_vec(&[3, 8, 8], x.data().to_vec()).unwrap();
        let enc = encrypt_image(&img, &key, 2).unwrap();
        let enc_batch = Tensor::from_vec(&[1, 3, 8, 8], enc.into_data()).unwrap();

        // Recover the permutation through the public probe trick and permute
        // the embedding rows with it: w'[k] = w[v[k]].
        let probe = Tensor::from_vec(&[3, 2, 2], (0..12).map(|v| v as f32).collect()).unwrap();
        let v: Vec<usize> = encrypt_image(&probe, &key, 2).unwrap().data().iter().map(|&f| f as usize).collect();
        let mut permuted = params.clone();
        let d = cfg.embed_dim;
        for (k, &src) in v.iter().enumerate() {
            permuted.patch_embed.w[k * d..(k + 1) * d]
                .copy_from_slice(&params.patch_embed.w[src * d..(src + 1) * d]);
        }

        let plain_logits = forward_logits(&params, &x).unwrap();
        let enc_logits = forward_logits(&permuted, &enc_batch).unwrap();
        let diff = f64::from(plain_logits.max_abs_diff(&enc_logits).unwrap());
        assert!(diff < 1e-5, "diff={diff}");
    }
}
