//! Parameter-free ops: activations, softmax, resampling, embeddings.

use ndarray::{Array1, Array2, Array3};

use super::Real;

/// `x * sigmoid(x)` elementwise.
pub fn silu<F: Real, D: ndarray::Dimension>(x: &ndarray::Array<F, D>) -> ndarray::Array<F, D> {
    x.mapv(|v| v * sigmoid(v))
}

/// Gradient of silu given the pre-activation input.
pub fn silu_backward<F: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    dy: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(x).for_each(|d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (F::one() + v * (F::one() - s)));
    });
    dx
}

fn sigmoid<F: Real>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

/// Row-wise softmax.
pub fn softmax_rows<F: Real>(scores: &Array2<F>) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward through a row-wise softmax: `ds = p * (dp - rowsum(dp * p))`.
pub fn softmax_rows_backward<F: Real>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut ds = p * dp;
    for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
        let dot = row.sum();
        ndarray::Zip::from(&mut row).and(&prow).for_each(|d, &pv| {
            *d = *d - pv * dot;
        });
    }
    ds
}

/// Nearest-neighbor 2x upsample of a `(C, H, W)` map.
pub fn upsample_nearest<F: Real>(x: &Array3<F>) -> Array3<F> {
    let (c, h, w) = x.dim();
    let mut out = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let v = x[[ci, y, xx]];
                out[[ci, 2 * y, 2 * xx]] = v;
                out[[ci, 2 * y + 1, 2 * xx]] = v;
                out[[ci, 2 * y, 2 * xx + 1]] = v;
                out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
            }
        }
    }
    out
}

/// Backward of nearest upsample: sum the 2x2 cells.
pub fn upsample_nearest_backward<F: Real>(dy: &Array3<F>) -> Array3<F> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[[ci, y, xx]] = dy[[ci, 2 * y, 2 * xx]]
                    + dy[[ci, 2 * y + 1, 2 * xx]]
                    + dy[[ci, 2 * y, 2 * xx + 1]]
                    + dy[[ci, 2 * y + 1, 2 * xx + 1]];
            }
        }
    }
    dx
}

/// Sinusoidal embedding of an integer timestep, half sines then half
/// cosines over log-spaced frequencies.
pub fn sinusoidal_embedding<F: Real>(t: usize, dim: usize) -> Array1<F> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            -(10_000.0f64.ln()) * i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let angle = t as f64 * exponent.exp();
        out[i] = F::from_f64(angle.sin());
        out[half + i] = F::from_f64(angle.cos());
    }
    out
}
