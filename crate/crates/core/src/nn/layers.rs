//! Dense, convolutional, and normalization layers with explicit backward
//! passes. Every forward either returns the values its backward needs or the
//! caller keeps the input; there is no global tape.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use super::store::{trunc_normal, zeros, GradBuf, ParamId, ParamStore};

/// Fully connected layer, `y = x W^T + b` over rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), trunc_normal(&[out_dim, in_dim], 0.02, rng));
        let b = store.add(&format!("{name}.b"), zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> Array2<f64> {
        let w = store.get2(self.w);
        let b = store.get1(self.b);
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    /// Returns the input gradient; accumulates parameter gradients.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array2<f64>,
        gout: &Array2<f64>,
        grads: &mut GradBuf,
    ) -> Array2<f64> {
        grads.accum(self.w, &gout.t().dot(x));
        grads.accum(self.b, &gout.sum_axis(Axis(0)));
        gout.dot(&store.get2(self.w))
    }
}

/// Layer normalization over the last axis of `(n, d)` with learned scale
/// and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let g = store.add(&format!("{name}.g"), ndarray::ArrayD::ones(ndarray::IxDyn(&[dim])));
        let b = store.add(&format!("{name}.b"), zeros(&[dim]));
        Self { g, b, dim, eps: 1e-5 }
    }

    pub fn forward(&self, store: &ParamStore, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = self.dim as f64;
        let mean = x.mean_axis(Axis(1)).unwrap();
        let mut xhat = x.clone();
        for (mut row, &m) in xhat.rows_mut().into_iter().zip(mean.iter()) {
            row -= m;
        }
        let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        for (mut row, &s) in xhat.rows_mut().into_iter().zip(inv_std.iter()) {
            row *= s;
        }
        let g = store.get1(self.g);
        let b = store.get1(self.b);
        let mut y = xhat.clone();
        y *= &g;
        y += &b;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        gout: &Array2<f64>,
        grads: &mut GradBuf,
    ) -> Array2<f64> {
        let d = self.dim as f64;
        let g = store.get1(self.g);
        grads.accum(self.g, &(gout * &cache.xhat).sum_axis(Axis(0)));
        grads.accum(self.b, &gout.sum_axis(Axis(0)));
        let dxhat = gout * &g;
        let sum_dxhat = dxhat.sum_axis(Axis(1));
        let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1));
        let mut dx = dxhat * d;
        for ((mut row, xrow), (&s1, &s2)) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(sum_dxhat.iter().zip(sum_dxhat_xhat.iter()))
        {
            for (v, &xh) in row.iter_mut().zip(xrow.iter()) {
                *v -= s1 + xh * s2;
            }
        }
        for (mut row, &s) in dx.rows_mut().into_iter().zip(cache.inv_std.iter()) {
            row *= s / d;
        }
        dx
    }
}

/// 2-D convolution on a single `(C, H, W)` sample via im2col.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            &format!("{name}.w"),
            trunc_normal(&[out_ch, in_ch, k, k], 0.02, rng),
        );
        let b = store.add(&format!("{name}.b"), zeros(&[out_ch]));
        Self { w, b, in_ch, out_ch, k, stride, pad }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
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

    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let mut x = Array3::zeros((c, h, w));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[[ci, iy as usize, ix as usize]] += cols[[row, oy * ow + ox]];
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, store: &ParamStore, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let wmat = store
            .get(self.w)
            .view()
            .into_shape((self.out_ch, self.in_ch * self.k * self.k))
            .unwrap()
            .to_owned();
        let mut y = wmat.dot(&cols);
        let b = store.get1(self.b);
        for (mut row, &bv) in y.rows_mut().into_iter().zip(b.iter()) {
            row += bv;
        }
        y.into_shape((self.out_ch, oh, ow)).unwrap()
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Array3<f64>,
        gout: &Array3<f64>,
        grads: &mut GradBuf,
    ) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let gout2 = gout
            .view()
            .into_shape((self.out_ch, oh * ow))
            .unwrap()
            .to_owned();
        let cols = self.im2col(x);
        let gw = gout2.dot(&cols.t());
        grads.accum(
            self.w,
            &gw.into_shape((self.out_ch, self.in_ch, self.k, self.k)).unwrap(),
        );
        grads.accum(self.b, &gout2.sum_axis(Axis(1)));
        let wmat = store
            .get(self.w)
            .view()
            .into_shape((self.out_ch, self.in_ch * self.k * self.k))
            .unwrap()
            .to_owned();
        let gcols = wmat.t().dot(&gout2);
        self.col2im(&gcols, c, h, w)
    }
}

/// Nearest-neighbor 2x spatial upsampling of `(C, H, W)`.
pub fn upsample2x(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2x_backward(gout: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut g = Array3::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                g[[ci, y / 2, x / 2]] += gout[[ci, y, x]];
            }
        }
    }
    g
}

/// SiLU activation `x * sigmoid(x)`; smooth, so finite differences agree
/// with the analytic gradient everywhere.
pub fn silu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v * sigmoid_scalar(v))
}

pub fn silu_backward<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    gout: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut g = x.mapv(|v| {
        let s = sigmoid_scalar(v);
        s * (1.0 + v * (1.0 - s))
    });
    g *= gout;
    g
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn sigmoid<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(sigmoid_scalar)
}

/// Backward through sigmoid given its output `y`.
pub fn sigmoid_backward_from_y<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    gout: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut g = y.mapv(|v| v * (1.0 - v));
    g *= gout;
    g
}
