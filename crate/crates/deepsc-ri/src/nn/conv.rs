//! 2-D convolution and resampling over feature maps stored in token layout.
//!
//! A feature map keeps its pixels as tokens: `[N, H*W, C]` in raster order
//! (row-major over `y`, then `x`). That makes the channel axis the innermost
//! one, so `LayerNorm` and the transformer blocks apply to feature maps
//! without reshaping. Convolution is im2col followed by one matrix multiply.

use super::{xavier, Module, Param, ParamVisitor};
use ndarray::{s, Array1, Array2, Array3, Array4, Axis, Ix1, Ix2, NdFloat};
use rand_chacha::ChaCha12Rng;

/// Spatial feature map: `data[n, y * w + x, c]`.
#[derive(Debug, Clone)]
pub struct FeatMap<F> {
    pub data: Array3<F>,
    pub h: usize,
    pub w: usize,
}

impl<F: NdFloat> FeatMap<F> {
    pub fn new(data: Array3<F>, h: usize, w: usize) -> Self {
        debug_assert_eq!(data.dim().1, h * w, "token count must equal h * w");
        FeatMap { data, h, w }
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }
}

/// Same-padded, stride-1 convolution with a square kernel of odd size.
#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// `[k * k * c_in, c_out]`; the column index of a tap is
    /// `(ky * k + kx) * c_in + c`.
    pub w: Param<F, Ix2>,
    pub b: Param<F, Ix1>,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct Conv2dCache<F> {
    /// im2col matrix, `[N * H * W, k * k * c_in]`.
    col: Array2<F>,
    h: usize,
    w: usize,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha12Rng) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd for same padding");
        let fan_in = k * k * c_in;
        let mut init = xavier(rng, fan_in, c_out);
        Conv2d {
            w: Param::new(Array2::from_shape_simple_fn((fan_in, c_out), &mut init)),
            b: Param::new(Array1::zeros(c_out)),
            k,
            c_in,
            c_out,
        }
    }

    /// All-zero weights and bias; the layer starts as the zero map, which
    /// turns a residual branch into the identity at initialization.
    pub fn zeroed(c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd for same padding");
        Conv2d {
            w: Param::new(Array2::zeros((k * k * c_in, c_out))),
            b: Param::new(Array1::zeros(c_out)),
            k,
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &FeatMap<F>) -> Array2<F> {
        let (n, _, c) = x.data.dim();
        let (h, w, k) = (x.h, x.w, self.k);
        let pad = k / 2;
        let mut col = Array2::zeros((n * h * w, k * k * c));
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = (i * h + y) * w + xx;
                    for ky in 0..k {
                        let sy = y + ky;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let sy = sy - pad;
                        for kx in 0..k {
                            let sx = xx + kx;
                            if sx < pad || sx >= w + pad {
                                continue;
                            }
                            let sx = sx - pad;
                            let off = (ky * k + kx) * c;
                            col.slice_mut(s![row, off..off + c])
                                .assign(&x.data.slice(s![i, sy * w + sx, ..]));
                        }
                    }
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &FeatMap<F>) -> (FeatMap<F>, Conv2dCache<F>) {
        debug_assert_eq!(x.channels(), self.c_in);
        let n = x.batch();
        let col = self.im2col(x);
        let mut y_flat = col.dot(&self.w.v);
        y_flat += &self.b.v;
        let y = y_flat
            .into_shape_with_order((n, x.h * x.w, self.c_out))
            .expect("standard layout");
        (
            FeatMap::new(y, x.h, x.w),
            Conv2dCache { col, h: x.h, w: x.w },
        )
    }

    pub fn forward_eval(&self, x: &FeatMap<F>) -> FeatMap<F> {
        self.forward(x).0
    }

    pub fn backward(&mut self, cache: &Conv2dCache<F>, gy: &FeatMap<F>) -> FeatMap<F> {
        let (n, hw, _) = gy.data.dim();
        let gy_flat = gy
            .data
            .view()
            .into_shape_with_order((n * hw, self.c_out))
            .expect("standard layout");
        self.w.g += &cache.col.t().dot(&gy_flat);
        self.b.g += &gy_flat.sum_axis(Axis(0));

        // Scatter the column gradient back onto the input grid (col2im).
        let g_col = gy_flat.dot(&self.w.v.t());
        let (h, w, k, c) = (cache.h, cache.w, self.k, self.c_in);
        let pad = k / 2;
        let mut gx = Array3::zeros((n, h * w, c));
        for i in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let row = (i * h + y) * w + xx;
                    for ky in 0..k {
                        let sy = y + ky;
                        if sy < pad || sy >= h + pad {
                            continue;
                        }
                        let sy = sy - pad;
                        for kx in 0..k {
                            let sx = xx + kx;
                            if sx < pad || sx >= w + pad {
                                continue;
                            }
                            let sx = sx - pad;
                            let off = (ky * k + kx) * c;
                            let mut dst = gx.slice_mut(s![i, sy * w + sx, ..]);
                            dst += &g_col.slice(s![row, off..off + c]);
                        }
                    }
                }
            }
        }
        FeatMap::new(gx, h, w)
    }
}

impl<F: NdFloat> Module<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<F>) {
        self.w.visit(&super::path(prefix, "w"), visitor);
        self.b.visit(&super::path(prefix, "b"), visitor);
    }
}

/// Channel-last feature map `[N, H*W, C]` -> image tensor `[N, C, H, W]`.
pub fn images_from_map<F: NdFloat>(fm: &FeatMap<F>) -> Array4<F> {
    let n = fm.batch();
    let c = fm.channels();
    let mut out = Array4::zeros((n, c, fm.h, fm.w));
    for i in 0..n {
        for y in 0..fm.h {
            for x in 0..fm.w {
                for ch in 0..c {
                    out[[i, ch, y, x]] = fm.data[[i, y * fm.w + x, ch]];
                }
            }
        }
    }
    out
}

/// Image tensor `[N, C, H, W]` -> channel-last feature map `[N, H*W, C]`.
pub fn map_from_images<F: NdFloat>(img: &Array4<F>) -> FeatMap<F> {
    let (n, c, h, w) = img.dim();
    let mut data = Array3::zeros((n, h * w, c));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[[i, y * w + x, ch]] = img[[i, ch, y, x]];
                }
            }
        }
    }
    FeatMap::new(data, h, w)
}

/// 2x2 average pooling with stride 2; halves both spatial dimensions.
pub fn avg_pool2<F: NdFloat>(x: &FeatMap<F>) -> FeatMap<F> {
    let (n, _, c) = x.data.dim();
    let (h, w) = (x.h, x.w);
    debug_assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even extents");
    let (oh, ow) = (h / 2, w / 2);
    let quarter: F = super::fl(0.25);
    let mut out = Array3::zeros((n, oh * ow, c));
    for i in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = x.data.slice(s![i, (2 * y) * w + 2 * xx, ..]).to_owned();
                acc += &x.data.slice(s![i, (2 * y) * w + 2 * xx + 1, ..]);
                acc += &x.data.slice(s![i, (2 * y + 1) * w + 2 * xx, ..]);
                acc += &x.data.slice(s![i, (2 * y + 1) * w + 2 * xx + 1, ..]);
                acc.mapv_inplace(|v| v * quarter);
                out.slice_mut(s![i, y * ow + xx, ..]).assign(&acc);
            }
        }
    }
    FeatMap::new(out, oh, ow)
}

/// Backward of [`avg_pool2`]: spreads each output gradient evenly over its
/// 2x2 source block.
pub fn avg_pool2_backward<F: NdFloat>(gy: &FeatMap<F>) -> FeatMap<F> {
    let (n, _, c) = gy.data.dim();
    let (oh, ow) = (gy.h, gy.w);
    let (h, w) = (oh * 2, ow * 2);
    let quarter: F = super::fl(0.25);
    let mut gx = Array3::zeros((n, h * w, c));
    for i in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let g = gy.data.slice(s![i, y * ow + xx, ..]).mapv(|v| v * quarter);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    gx.slice_mut(s![i, (2 * y + dy) * w + 2 * xx + dx, ..])
                        .assign(&g);
                }
            }
        }
    }
    FeatMap::new(gx, h, w)
}

/// Nearest-neighbour 2x upsampling; doubles both spatial dimensions.
pub fn upsample2<F: NdFloat>(x: &FeatMap<F>) -> FeatMap<F> {
    let (n, _, c) = x.data.dim();
    let (h, w) = (x.h, x.w);
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Array3::zeros((n, oh * ow, c));
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let src = x.data.slice(s![i, y * w + xx, ..]);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    out.slice_mut(s![i, (2 * y + dy) * ow + 2 * xx + dx, ..])
                        .assign(&src);
                }
            }
        }
    }
    FeatMap::new(out, oh, ow)
}

/// Backward of [`upsample2`]: sums the four replicated gradients.
pub fn upsample2_backward<F: NdFloat>(gy: &FeatMap<F>) -> FeatMap<F> {
    let (n, _, c) = gy.data.dim();
    let (oh, ow) = (gy.h, gy.w);
    let (h, w) = (oh / 2, ow / 2);
    let mut gx = Array3::zeros((n, h * w, c));
    for i in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = gy.data.slice(s![i, (2 * y) * ow + 2 * xx, ..]).to_owned();
                acc += &gy.data.slice(s![i, (2 * y) * ow + 2 * xx + 1, ..]);
                acc += &gy.data.slice(s![i, (2 * y + 1) * ow + 2 * xx, ..]);
                acc += &gy.data.slice(s![i, (2 * y + 1) * ow + 2 * xx + 1, ..]);
                gx.slice_mut(s![i, y * w + xx, ..]).assign(&acc);
            }
        }
    }
    FeatMap::new(gx, h, w)
}

/// Global average pool: `[N, H*W, C]` -> `[N, C]`.
pub fn global_avg_pool<F: NdFloat>(x: &FeatMap<F>) -> Array2<F> {
    let inv: F = super::fl(1.0 / (x.h * x.w) as f64);
    x.data.sum_axis(Axis(1)).mapv(|v| v * inv)
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward<F: NdFloat>(gy: &Array2<F>, h: usize, w: usize) -> FeatMap<F> {
    let (n, c) = gy.dim();
    let inv: F = super::fl(1.0 / (h * w) as f64);
    let mut gx = Array3::zeros((n, h * w, c));
    for i in 0..n {
        let g = gy.slice(s![i, ..]).mapv(|v| v * inv);
        for t in 0..h * w {
            gx.slice_mut(s![i, t, ..]).assign(&g);
        }
    }
    FeatMap::new(gx, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_parameter_grads;
    use crate::rng::stream;
    use rand::Rng;

    fn random_map(rng: &mut rand_chacha::ChaCha12Rng, n: usize, h: usize, w: usize, c: usize) -> FeatMap<f64> {
        FeatMap::new(
            Array3::from_shape_fn((n, h * w, c), |_| rng.random_range(-1.0..1.0)),
            h,
            w,
        )
    }

    #[test]
    fn one_by_one_identity_kernel_is_identity() {
        let mut rng = stream(23, &[1]);
        let x = random_map(&mut rng, 2, 4, 4, 3);
        let mut conv = Conv2d::<f64>::zeroed(3, 3, 1);
        for c in 0..3 {
            conv.w.v[[c, c]] = 1.0;
        }
        let (y, _) = conv.forward(&x);
        let max_diff = (&y.data - &x.data).iter().fold(0.0f64, |a, &d| a.max(d.abs()));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn conv_matches_direct_sum_at_interior_pixel() {
        let mut rng = stream(23, &[2]);
        let x = random_map(&mut rng, 1, 4, 4, 2);
        let conv = Conv2d::<f64>::new(2, 1, 3, &mut rng);
        let (y, _) = conv.forward(&x);
        // Output at (1, 1) accumulates the full 3x3 window.
        let mut want = conv.b.v[0];
        for ky in 0..3 {
            for kx in 0..3 {
                for c in 0..2 {
                    want += x.data[[0, (ky) * 4 + kx, c]] * conv.w.v[[(ky * 3 + kx) * 2 + c, 0]];
                }
            }
        }
        assert!((y.data[[0, 5, 0]] - want).abs() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = stream(23, &[3]);
        let x = random_map(&mut rng, 2, 4, 4, 2);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, &mut rng);
        let report = check_parameter_grads(
            &mut conv,
            |c| {
                let (y, cache) = c.forward(&x);
                let loss = y.data.iter().map(|&v| v * v).sum::<f64>();
                let gy = FeatMap::new(y.data.mapv(|v| 2.0 * v), y.h, y.w);
                c.backward(&cache, &gy);
                loss
            },
            1e-5,
            16,
        );
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = stream(23, &[4]);
        let x = random_map(&mut rng, 1, 4, 4, 2);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, &mut rng);
        let (y, cache) = conv.forward(&x);
        let gy = FeatMap::new(y.data.mapv(|v| 2.0 * v), y.h, y.w);
        let gx = conv.backward(&cache, &gy);

        let loss = |m: &FeatMap<f64>| -> f64 {
            let (y, _) = conv.forward(m);
            y.data.iter().map(|&v| v * v).sum()
        };
        let eps = 1e-5;
        for &(t, c) in &[(0usize, 0usize), (5, 1), (15, 0)] {
            let mut xp = x.clone();
            xp.data[[0, t, c]] += eps;
            let mut xm = x.clone();
            xm.data[[0, t, c]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - gx.data[[0, t, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_round_trip_shapes() {
        let mut rng = stream(23, &[5]);
        let x = random_map(&mut rng, 2, 8, 8, 3);
        let pooled = avg_pool2(&x);
        assert_eq!((pooled.h, pooled.w), (4, 4));
        assert_eq!(pooled.data.dim(), (2, 16, 3));
        let up = upsample2(&pooled);
        assert_eq!((up.h, up.w), (8, 8));
        // A constant map survives the round trip exactly.
        let c = FeatMap::new(Array3::from_elem((1, 64, 2), 0.7f64), 8, 8);
        let rt = upsample2(&avg_pool2(&c));
        let max_diff = (&rt.data - &c.data).iter().fold(0.0f64, |a, &d| a.max(d.abs()));
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn pooling_backward_matches_finite_differences() {
        let mut rng = stream(23, &[6]);
        let x = random_map(&mut rng, 1, 4, 4, 2);
        let loss = |m: &FeatMap<f64>| -> f64 {
            avg_pool2(m).data.iter().map(|&v| v * v).sum()
        };
        let y = avg_pool2(&x);
        let gy = FeatMap::new(y.data.mapv(|v| 2.0 * v), y.h, y.w);
        let gx = avg_pool2_backward(&gy);
        let eps = 1e-5;
        for &(t, c) in &[(0usize, 0usize), (7, 1), (15, 0)] {
            let mut xp = x.clone();
            xp.data[[0, t, c]] += eps;
            let mut xm = x.clone();
            xm.data[[0, t, c]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - gx.data[[0, t, c]]).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_backward_matches_finite_differences() {
        let mut rng = stream(23, &[7]);
        let x = random_map(&mut rng, 1, 2, 2, 2);
        let loss = |m: &FeatMap<f64>| -> f64 {
            upsample2(m).data.iter().map(|&v| v * v * v).sum()
        };
        let y = upsample2(&x);
        let gy = FeatMap::new(y.data.mapv(|v| 3.0 * v * v), y.h, y.w);
        let gx = upsample2_backward(&gy);
        let eps = 1e-5;
        for &(t, c) in &[(0usize, 0usize), (3, 1)] {
            let mut xp = x.clone();
            xp.data[[0, t, c]] += eps;
            let mut xm = x.clone();
            xm.data[[0, t, c]] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
            assert!((fd - gx.data[[0, t, c]]).abs() < 1e-6);
        }
    }

    #[test]
    fn global_pool_backward_matches_finite_differences() {
        let mut rng = stream(23, &[8]);
        let x = random_map(&mut rng, 2, 2, 2, 3);
        let loss = |m: &FeatMap<f64>| -> f64 {
            global_avg_pool(m).iter().map(|&v| v * v).sum()
        };
        let y = global_avg_pool(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let gx = global_avg_pool_backward(&gy, 2, 2);
        let eps = 1e-5;
        let mut xp = x.clone();
        xp.data[[1, 3, 2]] += eps;
        let mut xm = x.clone();
        xm.data[[1, 3, 2]] -= eps;
        let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps);
        assert!((fd - gx.data[[1, 3, 2]]).abs() < 1e-7);
    }
}
