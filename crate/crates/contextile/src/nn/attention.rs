//! Single-head self-attention plus cross-attention over condition tokens,
//! applied to a `(C, H, W)` map flattened into H*W spatial tokens.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::linear::{Linear, LinearCache};
use super::norm::{GroupNorm, GroupNormCache};
use super::ops::{softmax_rows, softmax_rows_backward};
use super::{Grads, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub norm1: GroupNorm,
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub norm2: GroupNorm,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_out: Linear,
    pub channels: usize,
}

pub struct AttentionCache<F> {
    hw: (usize, usize),
    gn1: GroupNormCache<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    p: Array2<F>,
    qc: LinearCache<F>,
    kc: LinearCache<F>,
    vc: LinearCache<F>,
    oc: LinearCache<F>,
    gn2: GroupNormCache<F>,
    q2: Array2<F>,
    k2: Array2<F>,
    v2: Array2<F>,
    p2: Array2<F>,
    q2c: LinearCache<F>,
    k2c: LinearCache<F>,
    v2c: LinearCache<F>,
    o2c: LinearCache<F>,
}

/// `(C, H, W)` to `(H*W, C)` tokens.
pub fn to_tokens<F: Real>(x: &Array3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    let flat = x
        .view()
        .into_shape_with_order((c, h * w))
        .expect("feature map is contiguous");
    flat.t().as_standard_layout().to_owned()
}

/// `(H*W, C)` tokens back to `(C, H, W)`.
pub fn from_tokens<F: Real>(t: &Array2<F>, h: usize, w: usize) -> Array3<F> {
    let c = t.dim().1;
    t.t()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, h, w))
        .expect("token count matches map")
}

impl AttentionBlock {
    /// `attn1` projections are `channels -> channels`; `attn2` draws keys
    /// and values from `cond_dim`-wide condition tokens.
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        prefix: &str,
        channels: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> Self {
        AttentionBlock {
            norm1: GroupNorm::init(store, &format!("{prefix}.norm1"), channels),
            to_q: Linear::init(store, &format!("{prefix}.attn1.to_q"), channels, channels, rng),
            to_k: Linear::init(store, &format!("{prefix}.attn1.to_k"), channels, channels, rng),
            to_v: Linear::init(store, &format!("{prefix}.attn1.to_v"), channels, channels, rng),
            to_out: Linear::init(
                store,
                &format!("{prefix}.attn1.to_out"),
                channels,
                channels,
                rng,
            ),
            norm2: GroupNorm::init(store, &format!("{prefix}.norm2"), channels),
            cross_q: Linear::init(store, &format!("{prefix}.attn2.to_q"), channels, channels, rng),
            cross_k: Linear::init(store, &format!("{prefix}.attn2.to_k"), cond_dim, channels, rng),
            cross_v: Linear::init(store, &format!("{prefix}.attn2.to_v"), cond_dim, channels, rng),
            cross_out: Linear::init(
                store,
                &format!("{prefix}.attn2.to_out"),
                channels,
                channels,
                rng,
            ),
            channels,
        }
    }

    /// The four self-attention projections, addressable for adapters.
    pub fn attn1_projections(&mut self) -> [&mut Linear; 4] {
        [
            &mut self.to_q,
            &mut self.to_k,
            &mut self.to_v,
            &mut self.to_out,
        ]
    }

    pub fn all_projections(&mut self) -> [&mut Linear; 8] {
        [
            &mut self.to_q,
            &mut self.to_k,
            &mut self.to_v,
            &mut self.to_out,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_out,
        ]
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array3<F>,
        cond: &Array2<F>,
    ) -> (Array3<F>, AttentionCache<F>) {
        let (_, h, w) = x.dim();
        let scale = F::from_f64(1.0 / (self.channels as f64).sqrt());

        // Self-attention with residual.
        let (h1, gn1) = self.norm1.forward(store, x);
        let tokens = to_tokens(&h1);
        let (q, qc) = self.to_q.forward(store, &tokens);
        let (k, kc) = self.to_k.forward(store, &tokens);
        let (v, vc) = self.to_v.forward(store, &tokens);
        let mut scores = q.dot(&k.t());
        scores.mapv_inplace(|s| s * scale);
        let p = softmax_rows(&scores);
        let o = p.dot(&v);
        let (att, oc) = self.to_out.forward(store, &o);
        let y1 = x + &from_tokens(&att, h, w);

        // Cross-attention over condition tokens with residual.
        let (h2, gn2) = self.norm2.forward(store, &y1);
        let tokens2 = to_tokens(&h2);
        let (q2, q2c) = self.cross_q.forward(store, &tokens2);
        let (k2, k2c) = self.cross_k.forward(store, cond);
        let (v2, v2c) = self.cross_v.forward(store, cond);
        let mut scores2 = q2.dot(&k2.t());
        scores2.mapv_inplace(|s| s * scale);
        let p2 = softmax_rows(&scores2);
        let o2 = p2.dot(&v2);
        let (att2, o2c) = self.cross_out.forward(store, &o2);
        let y = &y1 + &from_tokens(&att2, h, w);

        (
            y,
            AttentionCache {
                hw: (h, w),
                gn1,
                q,
                k,
                v,
                p,
                qc,
                kc,
                vc,
                oc,
                gn2,
                q2,
                k2,
                v2,
                p2,
                q2c,
                k2c,
                v2c,
                o2c,
            },
        )
    }

    /// Returns `(dx, dcond)`.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &AttentionCache<F>,
        dy: &Array3<F>,
    ) -> (Array3<F>, Array2<F>) {
        let (h, w) = cache.hw;
        let scale = F::from_f64(1.0 / (self.channels as f64).sqrt());

        // Cross-attention half.
        let datt2 = to_tokens(dy);
        let do2 = self.cross_out.backward(store, grads, &cache.o2c, &datt2);
        let dp2 = do2.dot(&cache.v2.t());
        let dv2 = cache.p2.t().dot(&do2);
        let mut ds2 = softmax_rows_backward(&cache.p2, &dp2);
        ds2.mapv_inplace(|s| s * scale);
        let dq2 = ds2.dot(&cache.k2);
        let dk2 = ds2.t().dot(&cache.q2);
        let dtokens2 = self.cross_q.backward(store, grads, &cache.q2c, &dq2);
        let mut dcond = self.cross_k.backward(store, grads, &cache.k2c, &dk2);
        dcond += &self.cross_v.backward(store, grads, &cache.v2c, &dv2);
        let dh2 = from_tokens(&dtokens2, h, w);
        let dy1 = dy + &self.norm2.backward(store, grads, &cache.gn2, &dh2);

        // Self-attention half.
        let datt = to_tokens(&dy1);
        let do_ = self.to_out.backward(store, grads, &cache.oc, &datt);
        let dp = do_.dot(&cache.v.t());
        let dv = cache.p.t().dot(&do_);
        let mut ds = softmax_rows_backward(&cache.p, &dp);
        ds.mapv_inplace(|s| s * scale);
        let dq = ds.dot(&cache.k);
        let dk = ds.t().dot(&cache.q);
        let mut dtokens = self.to_q.backward(store, grads, &cache.qc, &dq);
        dtokens += &self.to_k.backward(store, grads, &cache.kc, &dk);
        dtokens += &self.to_v.backward(store, grads, &cache.vc, &dv);
        let dh1 = from_tokens(&dtokens, h, w);
        let dx = &dy1 + &self.norm1.backward(store, grads, &cache.gn1, &dh1);

        (dx, dcond)
    }
}
