//! Query decoder: definition-query vectors cross-attend to the encoded
//! audio through a small stack of decoder layers. By default queries do
//! not attend to each other, so every query's output depends only on
//! itself and the audio; a config flag enables the dependent variant with
//! query-query self-attention.

use rand_chacha::ChaCha8Rng;

use super::nn::{
    AttentionCache, FeedForward, FeedForwardCache, LayerNorm, LayerNormCache, MultiHeadAttention,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    /// Query-query self-attention; present only in the dependent variant.
    pub self_attn: Option<(MultiHeadAttention, LayerNorm)>,
    pub cross: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ff: FeedForward,
    pub ln2: LayerNorm,
}

pub struct DecoderLayerCache {
    q_in: Tensor,
    self_attn: Option<(AttentionCache, LayerNormCache, Tensor)>, // cache, ln, s (self-attn output)
    cross: AttentionCache,
    ln1: LayerNormCache,
    mid: Tensor,
    ff: FeedForwardCache,
    ln2: LayerNormCache,
}

impl DecoderLayer {
    pub fn new(d: usize, heads: usize, ff: usize, self_attention: bool, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            self_attn: if self_attention {
                Some((MultiHeadAttention::new(d, heads, rng), LayerNorm::new(d)))
            } else {
                None
            },
            cross: MultiHeadAttention::new(d, heads, rng),
            ln1: LayerNorm::new(d),
            ff: FeedForward::new(d, ff, rng),
            ln2: LayerNorm::new(d),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        if let Some((attn, ln)) = &self.self_attn {
            out.extend(attn.params());
            out.extend(ln.params());
        }
        out.extend(self.cross.params());
        out.extend(self.ln1.params());
        out.extend(self.ff.params());
        out.extend(self.ln2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        if let Some((attn, ln)) = &mut self.self_attn {
            out.extend(attn.params_mut());
            out.extend(ln.params_mut());
        }
        out.extend(self.cross.params_mut());
        out.extend(self.ln1.params_mut());
        out.extend(self.ff.params_mut());
        out.extend(self.ln2.params_mut());
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if let Some((attn, ln)) = &self.self_attn {
            out.extend(attn.param_names(&format!("{prefix}.self_attn")));
            out.extend(ln.param_names(&format!("{prefix}.ln0")));
        }
        out.extend(self.cross.param_names(&format!("{prefix}.cross")));
        out.extend(self.ln1.param_names(&format!("{prefix}.ln1")));
        out.extend(self.ff.param_names(&format!("{prefix}.ff")));
        out.extend(self.ln2.param_names(&format!("{prefix}.ln2")));
        out
    }

    pub fn forward(&self, q: &Tensor, h: &Tensor) -> (Tensor, DecoderLayerCache) {
        let (s, self_cache) = if let Some((attn, ln)) = &self.self_attn {
            let (a, cache) = attn.forward(q, q);
            let mut res = q.clone();
            res.add_assign(&a);
            let (s, ln_cache) = ln.forward(&res);
            (s.clone(), Some((cache, ln_cache, s)))
        } else {
            (q.clone(), None)
        };
        let (cross_out, cross_cache) = self.cross.forward(&s, h);
        let mut res1 = s.clone();
        res1.add_assign(&cross_out);
        let (mid, ln1_cache) = self.ln1.forward(&res1);
        let (ff_out, ff_cache) = self.ff.forward(&mid);
        let mut res2 = mid.clone();
        res2.add_assign(&ff_out);
        let (out, ln2_cache) = self.ln2.forward(&res2);
        (
            out,
            DecoderLayerCache {
                q_in: q.clone(),
                self_attn: self_cache,
                cross: cross_cache,
                ln1: ln1_cache,
                mid,
                ff: ff_cache,
                ln2: ln2_cache,
            },
        )
    }

    /// Returns `(dq, dh)`.
    pub fn backward(
        &self,
        cache: &DecoderLayerCache,
        h: &Tensor,
        dout: &Tensor,
        grads: &mut DecoderLayer,
    ) -> (Tensor, Tensor) {
        let dres2 = self.ln2.backward(&cache.ln2, dout, &mut grads.ln2);
        let dff = self.ff.backward(&cache.mid, &cache.ff, &dres2, &mut grads.ff);
        let mut dmid = dres2;
        dmid.add_assign(&dff);
        let dres1 = self.ln1.backward(&cache.ln1, &dmid, &mut grads.ln1);
        let s = cache
            .self_attn
            .as_ref()
            .map(|(_, _, s)| s)
            .unwrap_or(&cache.q_in);
        let (ds_cross, dh) = self.cross.backward(
            s,
            h,
            &cache.cross,
            &dres1,
            &mut grads.cross,
        );
        let mut ds = dres1;
        ds.add_assign(&ds_cross);
        let dq = if let Some((attn, ln)) = &self.self_attn {
            let (attn_cache, ln_cache, _) = cache.self_attn.as_ref().expect("self-attn cache");
            let (gattn, gln) = grads.self_attn.as_mut().expect("self-attn grads");
            let dres0 = ln.backward(ln_cache, &ds, gln);
            let (dqa, dqkv) = attn.backward(&cache.q_in, &cache.q_in, attn_cache, &dres0, gattn);
            let mut dq = dres0;
            dq.add_assign(&dqa);
            dq.add_assign(&dqkv);
            dq
        } else {
            ds
        };
        (dq, dh)
    }
}

/// Stack of decoder layers; the classification head lives in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDecoder {
    pub layers: Vec<DecoderLayer>,
}

pub struct DecoderCache {
    layer_caches: Vec<DecoderLayerCache>,
    pub output: Tensor, // [n_queries, d]
}

impl QueryDecoder {
    pub fn new(
        d: usize,
        layers: usize,
        heads: usize,
        ff: usize,
        self_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        QueryDecoder {
            layers: (0..layers)
                .map(|_| DecoderLayer::new(d, heads, ff, self_attention, rng))
                .collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.params_mut());
        }
        out
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.param_names(&format!("{prefix}.layer{i}")));
        }
        out
    }

    /// `queries: [n_queries, d]`, `h: [x_h, d]` -> `[n_queries, d]`.
    pub fn forward(&self, queries: &Tensor, h: &Tensor) -> (Tensor, DecoderCache) {
        let mut x = queries.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, h);
            layer_caches.push(cache);
            x = y;
        }
        (
            x.clone(),
            DecoderCache {
                layer_caches,
                output: x,
            },
        )
    }

    /// Returns `(dqueries, dh)`.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        h: &Tensor,
        dout: &Tensor,
        grads: &mut QueryDecoder,
    ) -> (Tensor, Tensor) {
        let mut dq = dout.clone();
        let mut dh_total = Tensor::zeros(&[h.rows(), h.cols()]);
        for i in (0..self.layers.len()).rev() {
            let (dq_next, dh) =
                self.layers[i].backward(&cache.layer_caches[i], h, &dq, &mut grads.layers[i]);
            dq = dq_next;
            dh_total.add_assign(&dh);
        }
        (dq, dh_total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn query_rows_are_independent_without_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = QueryDecoder::new(8, 2, 2, 16, false, &mut rng);
        let h = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let q1 = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let q2 = Tensor::uniform(&[1, 8], 1.0, &mut rng);

        let (single, _) = dec.forward(&q1, &h);
        let mut stacked = Tensor::zeros(&[3, 8]);
        stacked.row_mut(0).copy_from_slice(q1.row(0));
        stacked.row_mut(1).copy_from_slice(q2.row(0));
        stacked.row_mut(2).copy_from_slice(q1.row(0)); // duplicate of row 0
        let (multi, _) = dec.forward(&stacked, &h);
        assert_eq!(multi.row(0), single.row(0), "batched row equals single run");
        assert_eq!(multi.row(0), multi.row(2), "duplicate query, identical output");
        assert_ne!(multi.row(0), multi.row(1));
    }

    #[test]
    fn self_attention_variant_breaks_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dec = QueryDecoder::new(8, 1, 2, 16, true, &mut rng);
        let h = Tensor::uniform(&[5, 8], 1.0, &mut rng);
        let q1 = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let q2 = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let (single, _) = dec.forward(&q1, &h);
        let mut stacked = Tensor::zeros(&[2, 8]);
        stacked.row_mut(0).copy_from_slice(q1.row(0));
        stacked.row_mut(1).copy_from_slice(q2.row(0));
        let (multi, _) = dec.forward(&stacked, &h);
        assert_ne!(multi.row(0), single.row(0));
    }
}
