//! Neural-net building blocks with explicit forward/backward passes.
//!
//! Everything operates on one sample at a time in f64; batching happens a
//! level up by mapping over samples and summing gradient structures.
//! Gradient "structures" reuse the parameter structs themselves: a
//! gradient of a `Linear` is another `Linear` with the same shapes, which
//! keeps accumulation and the optimizer loop free of index bookkeeping.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Fully connected layer, weights stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Tensor::xavier(out_dim, in_dim, rng),
            b: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.w"), format!("{prefix}.b")]
    }

    /// `y = x w^T + b` for `x: [n, in]`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, in_dim, out_dim) = (x.rows(), self.in_dim(), self.out_dim());
        assert_eq!(x.cols(), in_dim, "linear input width");
        let mut y = Tensor::zeros(&[n, out_dim]);
        matmul_bt_into(x.data(), self.w.data(), n, in_dim, out_dim, y.data_mut());
        for r in 0..n {
            let row = y.row_mut(r);
            for (v, b) in row.iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grads: &mut Linear) -> Tensor {
        let (n, in_dim, out_dim) = (x.rows(), self.in_dim(), self.out_dim());
        matmul_at_into(
            dy.data(),
            x.data(),
            n,
            out_dim,
            in_dim,
            grads.w.data_mut(),
        );
        for r in 0..n {
            for (g, d) in grads.b.data_mut().iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, in_dim]);
        matmul_into(dy.data(), self.w.data(), n, out_dim, in_dim, dx.data_mut());
        dx
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_vec(&[dim], vec![1.0; dim]),
            beta: Tensor::zeros(&[dim]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.gamma"), format!("{prefix}.beta")]
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, LayerNormCache) {
        let (n, d) = (x.rows(), x.cols());
        let mut xhat = Tensor::zeros(&[n, d]);
        let mut inv_std = vec![0.0; n];
        let mut y = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = istd;
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat.row_mut(r)[c] = h;
                y.row_mut(r)[c] = self.gamma.data()[c] * h + self.beta.data()[c];
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Tensor, grads: &mut LayerNorm) -> Tensor {
        let (n, d) = (dy.rows(), dy.cols());
        let mut dx = Tensor::zeros(&[n, d]);
        for r in 0..n {
            let xhat = cache.xhat.row(r);
            let dyr = dy.row(r);
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for c in 0..d {
                let dxhat = dyr[c] * self.gamma.data()[c];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat[c];
                grads.gamma.data_mut()[c] += dyr[c] * xhat[c];
                grads.beta.data_mut()[c] += dyr[c];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            let istd = cache.inv_std[r];
            for c in 0..d {
                let dxhat = dyr[c] * self.gamma.data()[c];
                dx.row_mut(r)[c] = istd * (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat);
            }
        }
        dx
    }
}

/// Token embedding table `[vocab, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(vocab: usize, d: usize, rng: &mut ChaCha8Rng) -> Self {
        Embedding {
            table: Tensor::uniform(&[vocab, d], (3.0 / d as f64).sqrt(), rng),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.table]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.table]
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        vec![format!("{prefix}.table")]
    }

    pub fn forward(&self, ids: &[u32]) -> Tensor {
        let d = self.table.cols();
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.table.row(id as usize));
        }
        out
    }

    pub fn backward(&self, ids: &[u32], dy: &Tensor, grads: &mut Embedding) {
        for (r, &id) in ids.iter().enumerate() {
            let grow = grads.table.row_mut(id as usize);
            for (g, d) in grow.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
}

/// Sinusoidal positional encoding added in place to `[n, d]` rows.
pub fn add_positional(x: &mut Tensor) {
    let (n, d) = (x.rows(), x.cols());
    for pos in 0..n {
        let row = x.row_mut(pos);
        for i in 0..d {
            let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            row[i] += if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
}

fn softmax_rows(x: &mut Tensor) {
    let (n, d) = (x.rows(), x.cols());
    for r in 0..n {
        let row = &mut x.data_mut()[r * d..(r + 1) * d];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Row-wise softmax backward: `dx = (dy - sum(dy .* y)) .* y`.
fn softmax_backward_rows(y: &Tensor, dy: &Tensor) -> Tensor {
    let (n, d) = (y.rows(), y.cols());
    let mut dx = Tensor::zeros(&[n, d]);
    for r in 0..n {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for c in 0..d {
            dx.row_mut(r)[c] = (dyr[c] - dot) * yr[c];
        }
    }
    dx
}

/// Multi-head scaled dot-product attention. Queries come from one input,
/// keys/values from another (equal inputs give self-attention).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<Tensor>, // per head [nq, nk]
    ctx: Tensor,
}

impl MultiHeadAttention {
    pub fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(d % heads, 0, "d must split across heads");
        MultiHeadAttention {
            wq: Linear::new(d, d, rng),
            wk: Linear::new(d, d, rng),
            wv: Linear::new(d, d, rng),
            wo: Linear::new(d, d, rng),
            heads,
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .into_iter()
            .flat_map(|l| l.params())
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        out.extend(self.wq.params_mut());
        out.extend(self.wk.params_mut());
        out.extend(self.wv.params_mut());
        out.extend(self.wo.params_mut());
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.wq.param_names(&format!("{prefix}.wq")));
        out.extend(self.wk.param_names(&format!("{prefix}.wk")));
        out.extend(self.wv.param_names(&format!("{prefix}.wv")));
        out.extend(self.wo.param_names(&format!("{prefix}.wo")));
        out
    }

    fn head_view(x: &Tensor, head: usize, dh: usize) -> Tensor {
        let n = x.rows();
        let mut out = Tensor::zeros(&[n, dh]);
        for r in 0..n {
            out.row_mut(r)
                .copy_from_slice(&x.row(r)[head * dh..(head + 1) * dh]);
        }
        out
    }

    fn head_add(x: &mut Tensor, part: &Tensor, head: usize, dh: usize) {
        for r in 0..x.rows() {
            for c in 0..dh {
                x.row_mut(r)[head * dh + c] += part.row(r)[c];
            }
        }
    }

    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor) -> (Tensor, AttentionCache) {
        let d = self.wq.out_dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(q_in);
        let k = self.wk.forward(kv_in);
        let v = self.wv.forward(kv_in);
        let (nq, nk) = (q.rows(), k.rows());
        let mut ctx = Tensor::zeros(&[nq, d]);
        let mut attn_heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = Self::head_view(&q, h, dh);
            let kh = Self::head_view(&k, h, dh);
            let vh = Self::head_view(&v, h, dh);
            let mut scores = Tensor::zeros(&[nq, nk]);
            matmul_bt_into(qh.data(), kh.data(), nq, dh, nk, scores.data_mut());
            scores.scale(scale);
            softmax_rows(&mut scores);
            let mut ctx_h = Tensor::zeros(&[nq, dh]);
            matmul_into(scores.data(), vh.data(), nq, nk, dh, ctx_h.data_mut());
            Self::head_add(&mut ctx, &ctx_h, h, dh);
            attn_heads.push(scores);
        }
        let out = self.wo.forward(&ctx);
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                attn: attn_heads,
                ctx,
            },
        )
    }

    /// Returns `(d_q_in, d_kv_in)`; self-attention callers add them.
    pub fn backward(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        cache: &AttentionCache,
        dout: &Tensor,
        grads: &mut MultiHeadAttention,
    ) -> (Tensor, Tensor) {
        let d = self.wq.out_dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (nq, nk) = (cache.q.rows(), cache.k.rows());

        let dctx = self.wo.backward(&cache.ctx, dout, &mut grads.wo);
        let mut dq = Tensor::zeros(&[nq, d]);
        let mut dk = Tensor::zeros(&[nk, d]);
        let mut dv = Tensor::zeros(&[nk, d]);
        for h in 0..self.heads {
            let qh = Self::head_view(&cache.q, h, dh);
            let kh = Self::head_view(&cache.k, h, dh);
            let vh = Self::head_view(&cache.v, h, dh);
            let dctx_h = Self::head_view(&dctx, h, dh);
            let attn = &cache.attn[h];

            let mut dattn = Tensor::zeros(&[nq, nk]);
            matmul_bt_into(dctx_h.data(), vh.data(), nq, dh, nk, dattn.data_mut());
            let mut dvh = Tensor::zeros(&[nk, dh]);
            matmul_at_into(attn.data(), dctx_h.data(), nq, nk, dh, dvh.data_mut());

            let mut dscores = softmax_backward_rows(attn, &dattn);
            dscores.scale(scale);
            let mut dqh = Tensor::zeros(&[nq, dh]);
            matmul_into(dscores.data(), kh.data(), nq, nk, dh, dqh.data_mut());
            let mut dkh = Tensor::zeros(&[nk, dh]);
            matmul_at_into(dscores.data(), qh.data(), nq, nk, dh, dkh.data_mut());

            Self::head_add(&mut dq, &dqh, h, dh);
            Self::head_add(&mut dk, &dkh, h, dh);
            Self::head_add(&mut dv, &dvh, h, dh);
        }
        let dq_in = self.wq.backward(q_in, &dq, &mut grads.wq);
        let mut dkv_in = self.wk.backward(kv_in, &dk, &mut grads.wk);
        let dkv_v = self.wv.backward(kv_in, &dv, &mut grads.wv);
        dkv_in.add_assign(&dkv_v);
        (dq_in, dkv_in)
    }
}

/// Two-layer position-wise feed-forward with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

pub struct FeedForwardCache {
    hidden: Tensor, // post-ReLU
}

impl FeedForward {
    pub fn new(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            w1: Linear::new(ff, d, rng),
            w2: Linear::new(d, ff, rng),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.w1.params();
        out.extend(self.w2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.w1.params_mut();
        out.extend(self.w2.params_mut());
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.w1.param_names(&format!("{prefix}.w1"));
        out.extend(self.w2.param_names(&format!("{prefix}.w2")));
        out
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, FeedForwardCache) {
        let mut hidden = self.w1.forward(x);
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let out = self.w2.forward(&hidden);
        (out, FeedForwardCache { hidden })
    }

    pub fn backward(
        &self,
        x: &Tensor,
        cache: &FeedForwardCache,
        dout: &Tensor,
        grads: &mut FeedForward,
    ) -> Tensor {
        let mut dhidden = self.w2.backward(&cache.hidden, dout, &mut grads.w2);
        for (dv, h) in dhidden.data_mut().iter_mut().zip(cache.hidden.data()) {
            if *h == 0.0 {
                *dv = 0.0;
            }
        }
        self.w1.backward(x, &dhidden, &mut grads.w1)
    }
}

/// Post-LN transformer encoder layer (self-attention + feed-forward).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

pub struct EncoderLayerCache {
    x: Tensor,
    attn: AttentionCache,
    ln1: LayerNormCache,
    mid: Tensor,
    ff: FeedForwardCache,
    ln2: LayerNormCache,
}

impl EncoderLayer {
    pub fn new(d: usize, heads: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            attn: MultiHeadAttention::new(d, heads, rng),
            ln1: LayerNorm::new(d),
            ff: FeedForward::new(d, ff, rng),
            ln2: LayerNorm::new(d),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = self.attn.params();
        out.extend(self.ln1.params());
        out.extend(self.ff.params());
        out.extend(self.ln2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.attn.params_mut();
        out.extend(self.ln1.params_mut());
        out.extend(self.ff.params_mut());
        out.extend(self.ln2.params_mut());
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = self.attn.param_names(&format!("{prefix}.attn"));
        out.extend(self.ln1.param_names(&format!("{prefix}.ln1")));
        out.extend(self.ff.param_names(&format!("{prefix}.ff")));
        out.extend(self.ln2.param_names(&format!("{prefix}.ln2")));
        out
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, EncoderLayerCache) {
        let (attn_out, attn_cache) = self.attn.forward(x, x);
        let mut res1 = x.clone();
        res1.add_assign(&attn_out);
        let (mid, ln1_cache) = self.ln1.forward(&res1);
        let (ff_out, ff_cache) = self.ff.forward(&mid);
        let mut res2 = mid.clone();
        res2.add_assign(&ff_out);
        let (out, ln2_cache) = self.ln2.forward(&res2);
        (
            out,
            EncoderLayerCache {
                x: x.clone(),
                attn: attn_cache,
                ln1: ln1_cache,
                mid,
                ff: ff_cache,
                ln2: ln2_cache,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderLayerCache,
        dout: &Tensor,
        grads: &mut EncoderLayer,
    ) -> Tensor {
        let dres2 = self.ln2.backward(&cache.ln2, dout, &mut grads.ln2);
        let dff = self.ff.backward(&cache.mid, &cache.ff, &dres2, &mut grads.ff);
        let mut dmid = dres2;
        dmid.add_assign(&dff);
        let dres1 = self.ln1.backward(&cache.ln1, &dmid, &mut grads.ln1);
        let (dq, dkv) = self
            .attn
            .backward(&cache.x, &cache.x, &cache.attn, &dres1, &mut grads.attn);
        let mut dx = dres1;
        dx.add_assign(&dq);
        dx.add_assign(&dkv);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Finite-difference check of a layer's full backward against a scalar
    /// loss `sum(w .* forward(x))` for fixed random `w`.
    #[test]
    fn encoder_layer_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (n, d, ff) = (3, 8, 16);
        let layer = EncoderLayer::new(d, 2, ff, &mut rng);
        let x = Tensor::uniform(&[n, d], 0.7, &mut rng);
        let wsum = Tensor::uniform(&[n, d], 1.0, &mut rng);

        let loss = |layer: &EncoderLayer, x: &Tensor| -> f64 {
            let (y, _) = layer.forward(x);
            y.data().iter().zip(wsum.data()).map(|(a, b)| a * b).sum()
        };

        let (y, cache) = layer.forward(&x);
        assert_eq!(y.shape(), &[n, d]);
        let mut grads = layer.clone();
        grads.params_mut().into_iter().for_each(|t| t.zero());
        let dx = layer.backward(&cache, &wsum, &mut grads);

        // Input gradient.
        let mut x_probe = x.clone();
        for idx in [0usize, 5, n * d - 1] {
            let got = dx.data()[idx];
            let want = {
                let h = 1e-5;
                let orig = x_probe.data()[idx];
                x_probe.data_mut()[idx] = orig + h;
                let up = loss(&layer, &x_probe);
                x_probe.data_mut()[idx] = orig - h;
                let down = loss(&layer, &x_probe);
                x_probe.data_mut()[idx] = orig;
                (up - down) / (2.0 * h)
            };
            assert!(
                (got - want).abs() / want.abs().max(1e-6) < 1e-4,
                "dx[{idx}] {got} vs {want}"
            );
        }

        // A few parameter gradients from every tensor.
        let names = layer.param_names("layer");
        let analytic: Vec<Vec<f64>> = grads.params().iter().map(|t| t.data().to_vec()).collect();
        let mut probe = layer.clone();
        for (ti, name) in names.iter().enumerate() {
            let len = probe.params()[ti].len();
            for idx in [0, len / 2, len - 1] {
                let got = analytic[ti][idx];
                let want = {
                    let h = 1e-5;
                    let orig = probe.params()[ti].data()[idx];
                    probe.params_mut()[ti].data_mut()[idx] = orig + h;
                    let up = loss(&probe, &x);
                    probe.params_mut()[ti].data_mut()[idx] = orig - h;
                    let down = loss(&probe, &x);
                    probe.params_mut()[ti].data_mut()[idx] = orig;
                    (up - down) / (2.0 * h)
                };
                let rel = (got - want).abs() / (got.abs() + want.abs()).max(1e-6);
                assert!(rel < 1e-4, "{name}[{idx}]: {got} vs {want}");
            }
        }
    }

    #[test]
    fn linear_forward_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(3, 2, &mut rng);
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -2.0]);
        let y = lin.forward(&x);
        for j in 0..3 {
            let want =
                lin.w.row(j)[0] * 1.0 + lin.w.row(j)[1] * -2.0 + lin.b.data()[j];
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_encoding_distinguishes_positions() {
        let mut a = Tensor::zeros(&[4, 6]);
        add_positional(&mut a);
        assert_ne!(a.row(0), a.row(1));
        assert_ne!(a.row(1), a.row(2));
    }
}
