//! Group normalization over `(C, H, W)` feature maps.

use ndarray::{Array3, ArrayD, Ix1};

use super::{Grads, ParamId, ParamStore, Real};

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

pub struct GroupNormCache<F> {
    xhat: Array3<F>,
    inv_std: Vec<F>,
}

/// Largest group count in {4, 2, 1} dividing `channels`.
pub fn pick_groups(channels: usize) -> usize {
    for g in [4usize, 2, 1] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

impl GroupNorm {
    pub fn init<F: Real>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(vec![channels], F::one()),
            true,
        );
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(vec![channels]), true);
        GroupNorm {
            gamma,
            beta,
            groups: pick_groups(channels),
            channels,
        }
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, GroupNormCache<F>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let per = c / self.groups;
        let n = F::from_f64((per * h * w) as f64);
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let slice = ndarray::s![g * per..(g + 1) * per, .., ..];
            let mean = xhat.slice(slice).sum() / n;
            let var = xhat
                .slice(slice)
                .iter()
                .map(|v| (*v - mean) * (*v - mean))
                .sum::<F>()
                / n;
            let r = F::one() / (var + F::from_f64(EPS)).sqrt();
            xhat.slice_mut(slice).mapv_inplace(|v| (v - mean) * r);
            inv_std.push(r);
        }
        let gamma = store
            .get(self.gamma)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let beta = store
            .get(self.beta)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        let mut y = xhat.clone();
        for ci in 0..c {
            let (g, b) = (gamma[ci], beta[ci]);
            y.index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * g + b);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &GroupNormCache<F>,
        dy: &Array3<F>,
    ) -> Array3<F> {
        let (c, h, w) = dy.dim();
        let per = c / self.groups;
        let n = F::from_f64((per * h * w) as f64);
        let gamma = store
            .get(self.gamma)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap()
            .to_owned();

        if store.meta(self.gamma).trainable {
            let g = grads
                .get_mut(self.gamma)
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for (ci, gv) in g.into_iter().enumerate() {
                let prod = &dy.index_axis(ndarray::Axis(0), ci)
                    * &cache.xhat.index_axis(ndarray::Axis(0), ci);
                *gv += prod.sum();
            }
        }
        if store.meta(self.beta).trainable {
            let b = grads
                .get_mut(self.beta)
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            for (ci, bv) in b.into_iter().enumerate() {
                *bv += dy.index_axis(ndarray::Axis(0), ci).sum();
            }
        }

        // dxhat = dy * gamma_c; per group:
        // dx = r * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        let mut dxhat = dy.clone();
        for ci in 0..c {
            let g = gamma[ci];
            dxhat
                .index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * g);
        }
        let mut dx = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let slice = ndarray::s![g * per..(g + 1) * per, .., ..];
            let dh = dxhat.slice(slice);
            let xh = cache.xhat.slice(slice);
            let m1 = dh.sum() / n;
            let m2 = (&dh * &xh).sum() / n;
            let r = cache.inv_std[g];
            let mut out = dx.slice_mut(slice);
            ndarray::Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &d, &x| *o = r * (d - m1 - x * m2));
        }
        dx
    }
}
