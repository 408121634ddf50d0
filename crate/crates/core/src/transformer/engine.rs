//! Forward and backward passes of the pre-LN encoder classifier over a flat
//! parameter vector. Generic over the float type so the same code runs in
//! `f32` for training and in `f64` for gradient checking.

use super::config::{InputSpec, Layout, ModelConfig, Readout};
use super::kernels::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_row, LayerNormOut, Real,
};
use super::Input;

/// `(layer, head, probs, len)` callback run after each attention softmax.
pub(crate) type AttnHook<'a, T> = &'a dyn Fn(usize, usize, &mut [T], usize);

/// Optional instrumentation of the forward pass.
#[derive(Default)]
pub(crate) struct Hooks<'a, T> {
    /// May rewrite the `len x len` attention matrix in place.
    pub attn: Option<AttnHook<'a, T>>,
    /// Layers whose attention branch is removed entirely.
    pub skip_attention: &'a [usize],
}

pub(crate) struct LayerCache<T> {
    ln1: LayerNormOut<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `heads x len x len` attention probabilities.
    pub probs: Vec<T>,
    ctx: Vec<T>,
    ln2: LayerNormOut<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
    pub x_out: Vec<T>,
}

pub(crate) struct Cache<T> {
    /// Real token count, class token included.
    pub len: usize,
    pub layers: Vec<LayerCache<T>>,
    lnf: LayerNormOut<T>,
    /// Classifier input.
    pooled: Vec<T>,
    pub logits: Vec<T>,
}

pub(crate) struct Net<'a, T> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub p: &'a [T],
}

impl<'a, T: Real> Net<'a, T> {
    fn slice(&self, off: usize, len: usize) -> &'a [T] {
        &self.p[off..off + len]
    }

    /// Token count of `input` once the class token is added.
    pub fn token_len(&self, input: &Input) -> usize {
        let extra = usize::from(self.cfg.use_class_token);
        match input {
            Input::Tokens(t) => t.len() + extra,
            Input::Image(_) => self.cfg.max_tokens,
        }
    }

    fn embed(&self, input: &Input) -> (usize, Vec<T>) {
        let d = self.cfg.hidden_dim;
        let len = self.token_len(input);
        let mut x = vec![T::zero(); len * d];
        let start = usize::from(self.cfg.use_class_token);
        if let Some(c) = self.layout.class {
            x[..d].copy_from_slice(self.slice(c, d));
        }
        match (input, self.cfg.input) {
            (Input::Tokens(tokens), _) => {
                for (t, &tok) in tokens.iter().enumerate() {
                    let row = self.slice(self.layout.embed + tok as usize * d, d);
                    x[(start + t) * d..(start + t + 1) * d].copy_from_slice(row);
                }
            }
            (Input::Image(px), InputSpec::Grid { grid_side, patch_size }) => {
                let pd = patch_size * patch_size;
                let w = self.slice(self.layout.embed, pd * d);
                let b = self.slice(self.layout.patch_bias.unwrap_or(0), d);
                let patches = patchify(px, grid_side, patch_size);
                let proj: Vec<T> = linear(&patches, w, Some(b), grid_side * grid_side, pd, d);
                x[start * d..].copy_from_slice(&proj);
            }
            (Input::Image(_), InputSpec::Sequence { .. }) => unreachable!("validated upstream"),
        }
        let pos = self.slice(self.layout.pos, len * d);
        x.iter_mut().zip(pos).for_each(|(a, &b)| *a += b);
        (len, x)
    }

    pub fn forward(&self, input: &Input, hooks: &Hooks<'_, T>) -> Cache<T> {
        let cfg = self.cfg;
        let (d, f, heads, dk) = (cfg.hidden_dim, cfg.ffn_dim, cfg.num_heads, cfg.head_dim());
        let scale = T::lit(1.0 / (dk as f64).sqrt());
        let (n, mut x) = self.embed(input);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for (l, off) in self.layout.layers.iter().enumerate() {
            let ln1 = layer_norm(&x, self.slice(off.ln1_g, d), self.slice(off.ln1_b, d), n, d);
            let q = linear(&ln1.y, self.slice(off.wq, d * d), Some(self.slice(off.bq, d)), n, d, d);
            let k = linear(&ln1.y, self.slice(off.wk, d * d), Some(self.slice(off.bk, d)), n, d, d);
            let v = linear(&ln1.y, self.slice(off.wv, d * d), Some(self.slice(off.bv, d)), n, d, d);
            let mut probs = vec![T::zero(); heads * n * n];
            let mut ctx = vec![T::zero(); n * d];
            let skip = hooks.skip_attention.contains(&l);
            for h in 0..heads {
                let hs = h * dk;
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let qi = &q[i * d + hs..i * d + hs + dk];
                    let row = &mut p[i * n..(i + 1) * n];
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = super::kernels::dot(qi, &k[j * d + hs..j * d + hs + dk]) * scale;
                    }
                    softmax_row(row);
                }
                if let Some(hook) = hooks.attn {
                    hook(l, h, p, n);
                }
                if skip {
                    continue;
                }
                for i in 0..n {
                    let out = &mut ctx[i * d + hs..i * d + hs + dk];
                    for j in 0..n {
                        let a = p[i * n + j];
                        let vj = &v[j * d + hs..j * d + hs + dk];
                        for c in 0..dk {
                            out[c] += a * vj[c];
                        }
                    }
                }
            }
            let attn_out = linear(&ctx, self.slice(off.wo, d * d), None, n, d, d);
            let x_mid: Vec<T> = x.iter().zip(&attn_out).map(|(&a, &b)| a + b).collect();
            let ln2 = layer_norm(&x_mid, self.slice(off.ln2_g, d), self.slice(off.ln2_b, d), n, d);
            let h_pre = linear(&ln2.y, self.slice(off.w1, d * f), Some(self.slice(off.b1, f)), n, d, f);
            let h_act: Vec<T> = h_pre.iter().map(|&z| gelu(z)).collect();
            let ffn = linear(&h_act, self.slice(off.w2, f * d), Some(self.slice(off.b2, d)), n, f, d);
            let x_out: Vec<T> = x_mid.iter().zip(&ffn).map(|(&a, &b)| a + b).collect();
            x.clone_from(&x_out);
            layers.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                h_pre,
                h_act,
                x_out,
            });
        }
        let (lnf, pooled) = match cfg.readout {
            Readout::First => {
                let lnf = layer_norm(
                    &x[..d],
                    self.slice(self.layout.lnf_g, d),
                    self.slice(self.layout.lnf_b, d),
                    1,
                    d,
                );
                let pooled = lnf.y.clone();
                (lnf, pooled)
            }
            Readout::Mean => {
                let lnf = layer_norm(
                    &x,
                    self.slice(self.layout.lnf_g, d),
                    self.slice(self.layout.lnf_b, d),
                    n,
                    d,
                );
                let start = usize::from(cfg.use_class_token);
                let inv = T::lit(1.0 / (n - start) as f64);
                let mut pooled = vec![T::zero(); d];
                for row in lnf.y[start * d..].chunks(d) {
                    pooled.iter_mut().zip(row).for_each(|(p, &v)| *p += v * inv);
                }
                (lnf, pooled)
            }
        };
        let c = cfg.num_classes;
        let logits = linear(
            &pooled,
            self.slice(self.layout.wc, d * c),
            Some(self.slice(self.layout.bc, c)),
            1,
            d,
            c,
        );
        Cache {
            len: n,
            layers,
            lnf,
            pooled,
            logits,
        }
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    pub fn backward(&self, input: &Input, cache: &Cache<T>, dlogits: &[T], grads: &mut [T]) {
        let cfg = self.cfg;
        let lay = self.layout;
        let (d, f, heads, dk, c) = (
            cfg.hidden_dim,
            cfg.ffn_dim,
            cfg.num_heads,
            cfg.head_dim(),
            cfg.num_classes,
        );
        let n = cache.len;
        let scale = T::lit(1.0 / (dk as f64).sqrt());

        let dz = linear_backward_into(
            grads,
            &cache.pooled,
            self.slice(lay.wc, d * c),
            dlogits,
            1,
            d,
            c,
            lay.wc,
            Some(lay.bc),
        );
        let mut dx = vec![T::zero(); n * d];
        {
            let (dg, db) = two_mut(grads, lay.lnf_g, lay.lnf_b, d);
            match cfg.readout {
                Readout::First => {
                    let d0 = layer_norm_backward(&dz, &cache.lnf, self.slice(lay.lnf_g, d), 1, d, dg, db);
                    dx[..d].copy_from_slice(&d0);
                }
                Readout::Mean => {
                    let start = usize::from(cfg.use_class_token);
                    let inv = T::lit(1.0 / (n - start) as f64);
                    let mut dy = vec![T::zero(); n * d];
                    for row in dy[start * d..].chunks_mut(d) {
                        row.iter_mut().zip(&dz).for_each(|(a, &g)| *a = g * inv);
                    }
                    dx = layer_norm_backward(&dy, &cache.lnf, self.slice(lay.lnf_g, d), n, d, dg, db);
                }
            }
        }

        for (off, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward branch
            let mut dh = linear_backward_into(
                grads,
                &lc.h_act,
                self.slice(off.w2, f * d),
                &dx,
                n,
                f,
                d,
                off.w2,
                Some(off.b2),
            );
            for (g, &z) in dh.iter_mut().zip(&lc.h_pre) {
                *g *= gelu_grad(z);
            }
            let df = linear_backward_into(
                grads,
                &lc.ln2.y,
                self.slice(off.w1, d * f),
                &dh,
                n,
                d,
                f,
                off.w1,
                Some(off.b1),
            );
            let mut dmid = {
                let (dg, db) = two_mut(grads, off.ln2_g, off.ln2_b, d);
                layer_norm_backward(&df, &lc.ln2, self.slice(off.ln2_g, d), n, d, dg, db)
            };
            dmid.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b);

            // attention branch
            let dctx = linear_backward_into(grads, &lc.ctx, self.slice(off.wo, d * d), &dmid, n, d, d, off.wo, None);
            let mut dq = vec![T::zero(); n * d];
            let mut dk_ = vec![T::zero(); n * d];
            let mut dv = vec![T::zero(); n * d];
            let mut dp = vec![T::zero(); n];
            for h in 0..heads {
                let hs = h * dk;
                let p = &lc.probs[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let dci = &dctx[i * d + hs..i * d + hs + dk];
                    let prow = &p[i * n..(i + 1) * n];
                    let mut weighted = T::zero();
                    for j in 0..n {
                        let vj = &lc.v[j * d + hs..j * d + hs + dk];
                        dp[j] = super::kernels::dot(dci, vj);
                        weighted += prow[j] * dp[j];
                        let dvj = &mut dv[j * d + hs..j * d + hs + dk];
                        for cc in 0..dk {
                            dvj[cc] += prow[j] * dci[cc];
                        }
                    }
                    for j in 0..n {
                        let ds = prow[j] * (dp[j] - weighted) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        for cc in 0..dk {
                            dq[i * d + hs + cc] += ds * lc.k[j * d + hs + cc];
                            dk_[j * d + hs + cc] += ds * lc.q[i * d + hs + cc];
                        }
                    }
                }
            }
            let mut da = linear_backward_into(
                grads,
                &lc.ln1.y,
                self.slice(off.wq, d * d),
                &dq,
                n,
                d,
                d,
                off.wq,
                Some(off.bq),
            );
            let dak = linear_backward_into(
                grads,
                &lc.ln1.y,
                self.slice(off.wk, d * d),
                &dk_,
                n,
                d,
                d,
                off.wk,
                Some(off.bk),
            );
            let dav = linear_backward_into(
                grads,
                &lc.ln1.y,
                self.slice(off.wv, d * d),
                &dv,
                n,
                d,
                d,
                off.wv,
                Some(off.bv),
            );
            for ((a, &b), &cc) in da.iter_mut().zip(&dak).zip(&dav) {
                *a += b + cc;
            }
            let dxin = {
                let (dg, db) = two_mut(grads, off.ln1_g, off.ln1_b, d);
                layer_norm_backward(&da, &lc.ln1, self.slice(off.ln1_g, d), n, d, dg, db)
            };
            dx = dmid.iter().zip(&dxin).map(|(&a, &b)| a + b).collect();
        }

        // embeddings
        let start = usize::from(cfg.use_class_token);
        for (g, &v) in grads[lay.pos..lay.pos + n * d].iter_mut().zip(&dx) {
            *g += v;
        }
        if let Some(cls) = lay.class {
            for (g, &v) in grads[cls..cls + d].iter_mut().zip(&dx[..d]) {
                *g += v;
            }
        }
        match (input, cfg.input) {
            (Input::Tokens(tokens), _) => {
                for (t, &tok) in tokens.iter().enumerate() {
                    let row = &mut grads[lay.embed + tok as usize * d..][..d];
                    for (g, &v) in row.iter_mut().zip(&dx[(start + t) * d..(start + t + 1) * d]) {
                        *g += v;
                    }
                }
            }
            (Input::Image(px), InputSpec::Grid { grid_side, patch_size }) => {
                let pd = patch_size * patch_size;
                let patches: Vec<T> = patchify(px, grid_side, patch_size);
                let np = grid_side * grid_side;
                let bias = lay.patch_bias.expect("grid layout has a patch bias");
                linear_backward_into(
                    grads,
                    &patches,
                    self.slice(lay.embed, pd * d),
                    &dx[start * d..],
                    np,
                    pd,
                    d,
                    lay.embed,
                    Some(bias),
                );
            }
            (Input::Image(_), InputSpec::Sequence { .. }) => unreachable!("validated upstream"),
        }
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

/// `linear_backward` writing weight/bias gradients at the given offsets of
/// the flat gradient vector; always returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward_into<T: Real>(
    grads: &mut [T],
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    k: usize,
    m: usize,
    w_off: usize,
    b_off: Option<usize>,
) -> Vec<T> {
    match b_off {
        Some(b) => {
            debug_assert!(w_off + k * m <= b);
            let (lo, hi) = grads.split_at_mut(b);
            linear_backward(
                x,
                w,
                dy,
                n,
                k,
                m,
                &mut lo[w_off..w_off + k * m],
                Some(&mut hi[..m]),
                true,
            )
        }
        None => linear_backward(x, w, dy, n, k, m, &mut grads[w_off..w_off + k * m], None, true),
    }
    .expect("dx requested")
}

/// Reorders a row-major image into `grid_side^2` row-major patches.
pub(crate) fn patchify<T: Real>(px: &[f32], grid_side: usize, patch_size: usize) -> Vec<T> {
    let side = grid_side * patch_size;
    let mut out = Vec::with_capacity(px.len());
    for pr in 0..grid_side {
        for pc in 0..grid_side {
            for r in 0..patch_size {
                let row = (pr * patch_size + r) * side + pc * patch_size;
                out.extend(px[row..row + patch_size].iter().map(|&v| T::from_f32(v)));
            }
        }
    }
    out
}

/// Mean cross-entropy gradient for one sample: `softmax(logits) - onehot`.
pub(crate) fn cross_entropy<T: Real>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let mut p = logits.to_vec();
    softmax_row(&mut p);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().fold(T::zero(), |a, &z| a + (z - max).exp()).ln();
    let loss = lse - logits[label];
    p[label] -= T::one();
    (loss, p)
}
