//! Dense, convolutional, upsampling and feature-wise modulation layers.

use ndarray::{Array1, Array2, Array3, Axis, Ix1, Ix2};
use rand_chacha::ChaCha12Rng;

use super::{GradSet, Init, ParamId, ParamSet};

/// Fully connected layer over token rows: `y = x w^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        zero_init: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::FanInUniform { fan_in: in_dim }
        };
        let w = ps.register(&format!("{name}.w"), &[out_dim, in_dim], init, rng);
        let b = ps.register(&format!("{name}.b"), &[out_dim], Init::Zeros, rng);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array2<f64>) -> Array2<f64> {
        let w = ps
            .get(self.w)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight rank");
        let b = ps
            .get(self.b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("linear bias rank");
        let mut y = x.dot(&w.t());
        y += &b;
        y
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        gy: &Array2<f64>,
        grads: &mut GradSet,
    ) -> Array2<f64> {
        let w = ps
            .get(self.w)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("linear weight rank");
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(Axis(0));
        *grads.get_mut(self.w) += &gw.into_dyn();
        *grads.get_mut(self.b) += &gb.into_dyn();
        gy.dot(&w)
    }
}

/// Lowers `[C, H, W]` into patch columns `[C*k*k, Hout*Wout]`.
pub fn im2col(
    x: &Array3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = x.dim();
    let hout = (h + 2 * pad - k) / stride + 1;
    let wout = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((c * k * k, hout * wout));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wout + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    (cols, hout, wout)
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `[C, H, W]`.
pub fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let hout = (h + 2 * pad - k) / stride + 1;
    let wout = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oy in 0..hout {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += cols[[row, oy * wout + ox]];
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct Conv2dCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

/// 2-D convolution with square kernel, symmetric padding and stride.
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
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.register(
            &format!("{name}.w"),
            &[out_ch, in_ch, k, k],
            Init::FanInUniform { fan_in },
            rng,
        );
        let b = ps.register(&format!("{name}.b"), &[out_ch], Init::Zeros, rng);
        Self {
            w,
            b,
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn forward(&self, ps: &ParamSet, x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let (cols, hout, wout) = im2col(x, self.k, self.stride, self.pad);
        let w2 = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .expect("conv weight reshape");
        let b = ps
            .get(self.b)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("conv bias rank");
        let mut y2 = w2.dot(&cols);
        for (mut row, bias) in y2.outer_iter_mut().zip(b.iter()) {
            row += *bias;
        }
        let y = y2
            .into_shape_with_order((self.out_ch, hout, wout))
            .expect("conv output reshape");
        (
            y,
            Conv2dCache {
                cols,
                in_shape: (c, h, w),
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamSet,
        cache: &Conv2dCache,
        gy: &Array3<f64>,
        grads: &mut GradSet,
    ) -> Array3<f64> {
        let (cout, hout, wout) = gy.dim();
        assert_eq!(cout, self.out_ch);
        let gy2 = gy
            .view()
            .into_shape_with_order((cout, hout * wout))
            .expect("grad reshape");
        let gw2 = gy2.dot(&cache.cols.t());
        let gw = gw2
            .into_shape_with_order((self.out_ch, self.in_ch, self.k, self.k))
            .expect("weight grad reshape");
        *grads.get_mut(self.w) += &gw.into_dyn();
        let gb = gy2.sum_axis(Axis(1));
        *grads.get_mut(self.b) += &gb.into_dyn();

        let w2 = ps
            .get(self.w)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.k * self.k))
            .expect("conv weight reshape");
        let gcols = w2.t().dot(&gy2);
        let (c, h, w) = cache.in_shape;
        col2im(&gcols, c, h, w, self.k, self.stride, self.pad)
    }
}

/// Nearest-neighbour 2x upsampling.
#[derive(Debug, Clone, Copy)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let mut y = Array3::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[ci, i, j]];
                    y[[ci, 2 * i, 2 * j]] = v;
                    y[[ci, 2 * i + 1, 2 * j]] = v;
                    y[[ci, 2 * i, 2 * j + 1]] = v;
                    y[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        y
    }

    pub fn backward(&self, gy: &Array3<f64>) -> Array3<f64> {
        let (c, h2, w2) = gy.dim();
        let (h, w) = (h2 / 2, w2 / 2);
        let mut gx = Array3::zeros((c, h, w));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[ci, i, j]] = gy[[ci, 2 * i, 2 * j]]
                        + gy[[ci, 2 * i + 1, 2 * j]]
                        + gy[[ci, 2 * i, 2 * j + 1]]
                        + gy[[ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct FilmCache {
    scale: Array1<f64>,
    x: Array2<f64>,
    cond: Array1<f64>,
}

/// Feature-wise affine modulation from a conditioning vector.
///
/// `y[n,j] = x[n,j] * (1 + (Ws c)_j) + (Wb c)_j`. Both projections are
/// zero-initialized so modulation starts as the identity for every `c`.
#[derive(Debug, Clone)]
pub struct Film {
    pub ws: ParamId,
    pub wb: ParamId,
    pub feat_dim: usize,
    pub cond_dim: usize,
}

impl Film {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        feat_dim: usize,
        cond_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let ws = ps.register(
            &format!("{name}.ws"),
            &[feat_dim, cond_dim],
            Init::Zeros,
            rng,
        );
        let wb = ps.register(
            &format!("{name}.wb"),
            &[feat_dim, cond_dim],
            Init::Zeros,
            rng,
        );
        Self {
            ws,
            wb,
            feat_dim,
            cond_dim,
        }
    }

    pub fn forward(
        &self,
        ps: &ParamSet,
        x: &Array2<f64>,
        cond: &Array1<f64>,
    ) -> (Array2<f64>, FilmCache) {
        assert_eq!(cond.len(), self.cond_dim, "conditioning dimension");
        let ws = ps
            .get(self.ws)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("film scale rank");
        let wb = ps
            .get(self.wb)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("film shift rank");
        let scale = ws.dot(cond) + 1.0;
        let shift = wb.dot(cond);
        let mut y = x.clone();
        for mut row in y.outer_iter_mut() {
            row *= &scale;
            row += &shift;
        }
        (
            y,
            FilmCache {
                scale,
                x: x.clone(),
                cond: cond.clone(),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &FilmCache,
        gy: &Array2<f64>,
        grads: &mut GradSet,
    ) -> Array2<f64> {
        // d/d scale_j = sum_n gy[n,j] * x[n,j]; d/d shift_j = sum_n gy[n,j]
        let gscale = (gy * &cache.x).sum_axis(Axis(0));
        let gshift = gy.sum_axis(Axis(0));
        let gws = outer(&gscale, &cache.cond);
        let gwb = outer(&gshift, &cache.cond);
        *grads.get_mut(self.ws) += &gws.into_dyn();
        *grads.get_mut(self.wb) += &gwb.into_dyn();
        let mut gx = gy.clone();
        for mut row in gx.outer_iter_mut() {
            row *= &cache.scale;
        }
        gx
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_difference_check, leaky_relu, leaky_relu_backward};
    use crate::rng::rng_derive;
    use ndarray::Array;

    fn rng() -> ChaCha12Rng {
        rng_derive(7, &[77]).rng()
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let layer = Linear::new(&mut ps, "fc", 4, 3, false, &mut r);
        let x = Array::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin());

        let loss_fn = |ps: &ParamSet| layer.forward(ps, &x).iter().map(|v| v * v).sum::<f64>();
        let y = layer.forward(&ps, &x);
        let gy = y.mapv(|v| 2.0 * v);
        let mut grads = ps.zeros_like();
        layer.backward(&ps, &x, &gy, &mut grads);

        let worst = finite_difference_check(&mut ps, &grads, 1e-6, loss_fn);
        assert!(worst < 1e-7, "linear fd error {worst}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "c", 2, 3, 3, 2, 1, &mut r);
        let x = Array::from_shape_fn((2, 6, 6), |(c, i, j)| ((c * 31 + i * 7 + j) as f64).cos());

        let loss_fn = |ps: &ParamSet| {
            let (y, _) = conv.forward(ps, &x);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = conv.forward(&ps, &x);
        let gy = y.mapv(|v| 2.0 * v);
        let mut grads = ps.zeros_like();
        conv.backward(&ps, &cache, &gy, &mut grads);

        let worst = finite_difference_check(&mut ps, &grads, 1e-6, loss_fn);
        assert!(worst < 1e-7, "conv fd error {worst}");
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let conv = Conv2d::new(&mut ps, "c", 1, 2, 3, 1, 1, &mut r);
        let mut x = Array::from_shape_fn((1, 4, 4), |(_, i, j)| ((i * 5 + j) as f64 * 0.3).sin());

        let (y, cache) = conv.forward(&ps, &x);
        let gy = y.mapv(|v| 2.0 * v);
        let mut grads = ps.zeros_like();
        let gx = conv.backward(&ps, &cache, &gy, &mut grads);

        let step = 1e-6;
        for idx in [[0usize, 0usize, 0usize], [0, 2, 3], [0, 3, 1]] {
            let orig = x[idx];
            x[idx] = orig + step;
            let plus: f64 = conv.forward(&ps, &x).0.iter().map(|v| v * v).sum();
            x[idx] = orig - step;
            let minus: f64 = conv.forward(&ps, &x).0.iter().map(|v| v * v).sum();
            x[idx] = orig;
            let fd = (plus - minus) / (2.0 * step);
            assert!((gx[idx] - fd).abs() < 1e-6, "gx {} vs fd {}", gx[idx], fd);
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Array::from_shape_fn((2, 3, 3), |(c, i, j)| (c + i * 3 + j) as f64);
        let up = Upsample2x;
        let y = up.forward(&x);
        assert_eq!(y.dim(), (2, 6, 6));
        assert_eq!(y[[1, 4, 5]], x[[1, 2, 2]]);
        // <Ax, Ax> = <x, A^T A x> for the adjoint pair.
        let gy = y.clone();
        let gx = up.backward(&gy);
        let lhs: f64 = y.iter().map(|v| v * v).sum();
        let rhs: f64 = (&x * &gx).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn film_is_identity_at_zero_init_and_grads_check() {
        let mut r = rng();
        let mut ps = ParamSet::new();
        let film = Film::new(&mut ps, "m", 3, 2, &mut r);
        let x = Array::from_shape_fn((4, 3), |(i, j)| ((i + j) as f64) * 0.25 - 0.4);
        let cond = Array1::from(vec![0.7, -1.2]);

        let (y, _) = film.forward(&ps, &x, &cond);
        assert_eq!(y, x, "zero-initialized modulation must be the identity");
        let zero_cond = Array1::from(vec![0.0, 0.0]);
        let (y0, _) = film.forward(&ps, &x, &zero_cond);
        assert_eq!(y, y0);

        // Perturb the parameters and check gradients.
        for idx in 0..ps.flat_len() {
            ps.set_flat(idx, ((idx * 13 % 7) as f64 - 3.0) * 0.05);
        }
        let loss_fn = |ps: &ParamSet| {
            let (y, _) = film.forward(ps, &x, &cond);
            y.iter().map(|v| v * v).sum::<f64>()
        };
        let (y, cache) = film.forward(&ps, &x, &cond);
        let gy = y.mapv(|v| 2.0 * v);
        let mut grads = ps.zeros_like();
        film.backward(&cache, &gy, &mut grads);
        let worst = finite_difference_check(&mut ps, &grads, 1e-6, loss_fn);
        assert!(worst < 1e-7, "film fd error {worst}");
    }

    #[test]
    fn leaky_relu_backward_masks_slope() {
        let x = Array1::from(vec![-2.0, -0.5, 0.0, 0.5, 2.0]);
        let y = leaky_relu(&x);
        assert_eq!(y[0], -0.4);
        assert_eq!(y[4], 2.0);
        let gy = Array1::from(vec![1.0; 5]);
        let gx = leaky_relu_backward(&x, &gy);
        assert_eq!(gx[0], 0.2);
        assert_eq!(gx[4], 1.0);
    }
}
