//! Dense projection with an optional low-rank adapter on the weight.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;

use super::{fill_normal, Grads, ParamId, ParamStore, Real};

/// Additive low-rank delta on a weight: effective W is
/// `W + (alpha/r) * B.dot(A)` with `A: (r, d_in)`, `B: (d_out, r)`.
#[derive(Debug, Clone)]
pub struct Lora {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub lora: Option<Lora>,
    pub d_in: usize,
    pub d_out: usize,
}

pub struct LinearCache<F> {
    x: Array2<F>,
}

impl Linear {
    /// Registers a `(d_out, d_in)` weight with std `1/sqrt(d_in)` and a zero
    /// bias.
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = ArrayD::zeros(vec![d_out, d_in]);
        fill_normal(&mut w, 1.0 / (d_in as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![d_out]), true);
        Linear {
            name: name.to_string(),
            weight,
            bias,
            lora: None,
            d_in,
            d_out,
        }
    }

    /// Weight with the adapter delta folded in (borrowed view when no
    /// adapter is attached).
    pub fn effective_weight<F: Real>(&self, store: &ParamStore<F>) -> Array2<F> {
        let w = store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight is 2-d");
        match &self.lora {
            None => w.to_owned(),
            Some(lora) => {
                let a = store
                    .get(lora.a)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let b = store
                    .get(lora.b)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let mut delta = b.dot(&a);
                delta.mapv_inplace(|v| v * F::from_f64(lora.scale));
                &w + &delta
            }
        }
    }

    /// `y = x W^T + bias` for `x: (N, d_in)`.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array2<F>,
    ) -> (Array2<F>, LinearCache<F>) {
        let w = self.effective_weight(store);
        let bias = store
            .get(self.bias)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut y = x.dot(&w.t());
        y += &bias;
        (y, LinearCache { x: x.clone() })
    }

    /// Propagates `dy: (N, d_out)` back to the input and routes the weight
    /// gradient to the base tensor and/or the adapter factors.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &LinearCache<F>,
        dy: &Array2<F>,
    ) -> Array2<F> {
        let w = self.effective_weight(store);
        let dx = dy.dot(&w);

        let base_trainable = store.meta(self.weight).trainable;
        if base_trainable || self.lora.is_some() {
            let dw_eff = dy.t().dot(&cache.x);
            if base_trainable {
                let g = grads
                    .get_mut(self.weight)
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                ndarray::Zip::from(g).and(&dw_eff).for_each(|g, &d| *g += d);
            }
            if let Some(lora) = &self.lora {
                let scale = F::from_f64(lora.scale);
                let a = store
                    .get(lora.a)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let b = store
                    .get(lora.b)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let mut da = b.t().dot(&dw_eff);
                da.mapv_inplace(|v| v * scale);
                let mut db = dw_eff.dot(&a.t());
                db.mapv_inplace(|v| v * scale);
                let ga = grads
                    .get_mut(lora.a)
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                ndarray::Zip::from(ga).and(&da).for_each(|g, &d| *g += d);
                let gb = grads
                    .get_mut(lora.b)
                    .view_mut()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                ndarray::Zip::from(gb).and(&db).for_each(|g, &d| *g += d);
            }
        }
        if store.meta(self.bias).trainable {
            let db: Array1<F> = dy.sum_axis(Axis(0));
            let g = grads
                .get_mut(self.bias)
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            ndarray::Zip::from(g).and(&db).for_each(|g, &d| *g += d);
        }
        dx
    }
}
