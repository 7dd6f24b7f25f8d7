//! 2-d convolution via im2col and GEMM.

use ndarray::{Array2, Array3, ArrayD, Axis, Ix1, Ix4};
use rand::Rng;

use super::{fill_normal, Grads, ParamId, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

pub struct ConvCache<F> {
    cols: Array2<F>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    /// He-style init: std `sqrt(2 / (c_in k^2))`.
    pub fn init<F: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = ArrayD::zeros(vec![c_out, c_in, k, k]);
        fill_normal(&mut w, (2.0 / (c_in * k * k) as f64).sqrt(), rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![c_out]), true);
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
        }
    }

    /// Zero-initialized variant, used for the final projection so the net
    /// starts out predicting zero noise.
    pub fn init_zero<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ArrayD::zeros(vec![c_out, c_in, k, k]),
            true,
        );
        let bias = store.add(format!("{name}.bias"), ArrayD::zeros(vec![c_out]), true);
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            k,
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.k / 2;
        (
            (h + 2 * pad - self.k) / self.stride + 1,
            (w + 2 * pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array3<F>,
    ) -> (Array3<F>, ConvCache<F>) {
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, self.c_in);
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride);
        let w_mat = self.weight_matrix(store);
        let mut y_mat = w_mat.dot(&cols);
        let bias = store
            .get(self.bias)
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap();
        for (mut row, b) in y_mat.rows_mut().into_iter().zip(bias.iter()) {
            row.mapv_inplace(|v| v + *b);
        }
        let y = y_mat
            .into_shape_with_order((self.c_out, oh, ow))
            .expect("conv output reshape");
        (
            y,
            ConvCache {
                cols,
                in_dims: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &ConvCache<F>,
        dy: &Array3<F>,
    ) -> Array3<F> {
        let (oh, ow) = cache.out_hw;
        let dy_mat = dy
            .view()
            .into_shape_with_order((self.c_out, oh * ow))
            .expect("dy reshape");
        if store.meta(self.weight).trainable {
            let dw = dy_mat.dot(&cache.cols.t());
            let g = grads.get_mut(self.weight);
            let g_flat = g
                .view_mut()
                .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
                .unwrap();
            ndarray::Zip::from(g_flat).and(&dw).for_each(|g, &d| *g += d);
        }
        if store.meta(self.bias).trainable {
            let db = dy_mat.sum_axis(Axis(1));
            let g = grads
                .get_mut(self.bias)
                .view_mut()
                .into_dimensionality::<Ix1>()
                .unwrap();
            ndarray::Zip::from(g).and(&db).for_each(|g, &d| *g += d);
        }
        let w_mat = self.weight_matrix(store);
        let dcols = w_mat.t().dot(&dy_mat);
        col2im(
            &dcols,
            cache.in_dims,
            cache.out_hw,
            self.k,
            self.stride,
        )
    }

    fn weight_matrix<F: Real>(&self, store: &ParamStore<F>) -> Array2<F> {
        store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.c_out, self.c_in * self.k * self.k))
            .expect("conv weights are contiguous")
            .to_owned()
    }
}

/// Unrolls `(C, H, W)` into `(C k^2, OH OW)` patches with zero padding
/// `k/2`.
fn im2col<F: Real>(x: &Array3<F>, k: usize, stride: usize) -> Array2<F> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the
/// input grid.
fn col2im<F: Real>(
    dcols: &Array2<F>,
    in_dims: (usize, usize, usize),
    out_hw: (usize, usize),
    k: usize,
    stride: usize,
) -> Array3<F> {
    let (c, h, w) = in_dims;
    let (oh, ow) = out_hw;
    let pad = k / 2;
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    dx
}
