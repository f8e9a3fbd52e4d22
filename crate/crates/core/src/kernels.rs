//! Raw tensor kernels shared by forward ops and their backward rules.
//!
//! Layouts: images are NHWC, convolution kernels are `Kh×Kw×Cin×Cout`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        if x.len() != 4 {
            return Err(shape_err("conv2d", format!("input must be NHWC rank 4, got {x:?}")));
        }
        if k.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("kernel must be Kh×Kw×Cin×Cout rank 4, got {k:?}"),
            ));
        }
        if x[3] != k[2] {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input channels (input axis 3) = {} but kernel in-channels (kernel axis 2) = {}",
                    x[3], k[2]
                ),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be ≥ 1"));
        }
        let (h, w, kh, kw) = (x[1], x[2], k[0], k[1]);
        let (ho, wo, pad_t, pad_l) = match pad {
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(shape_err(
                        "conv2d",
                        format!("valid padding: input spatial (axes 1,2) {h}×{w} smaller than kernel (axes 0,1) {kh}×{kw}"),
                    ));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let ho = h.div_ceil(stride);
                let wo = w.div_ceil(stride);
                let pt = ((ho - 1) * stride + kh).saturating_sub(h);
                let pl = ((wo - 1) * stride + kw).saturating_sub(w);
                (ho, wo, pt / 2, pl / 2)
            }
        };
        Ok(Self {
            n: x[0],
            h,
            w,
            cin: x[3],
            kh,
            kw,
            cout: k[3],
            stride,
            ho,
            wo,
            pad_t,
            pad_l,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.ho, self.wo, self.cout]
    }

    pub fn in_shape(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.cin]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.cin, self.cout]
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// 1×1 stride-1 kernels need no patch extraction.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_t == 0 && self.pad_l == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let mut r = 0;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_l as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = (ky * g.kw + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let mut r = 0;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_l as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = (ky * g.kw + kx) * g.cin;
                        for (d, s) in x[dst..dst + g.cin].iter_mut().zip(&row[src..src + g.cin]) {
                            *d += *s;
                        }
                    }
                }
                r += 1;
            }
        }
    }
    x
}

/// Cross-correlation (no kernel flip).
pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.rows() * g.cout];
    if g.is_pointwise() {
        gemm(x, w, &mut out, g.rows(), g.cin, g.cout, false, false, false);
    } else {
        let cols = im2col(x, g);
        gemm(&cols, w, &mut out, g.rows(), g.patch(), g.cout, false, false, false);
    }
    out
}

/// Adjoint of [`conv2d`] in its input: maps an output-shaped gradient back to input shape.
pub(crate) fn conv2d_input_grad<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        let mut gx = vec![T::zero(); g.rows() * g.cin];
        gemm(gout, w, &mut gx, g.rows(), g.cout, g.cin, false, true, false);
        gx
    } else {
        let mut gcols = vec![T::zero(); g.rows() * g.patch()];
        gemm(gout, w, &mut gcols, g.rows(), g.cout, g.patch(), false, true, false);
        col2im(&gcols, g)
    }
}

/// Adjoint of [`conv2d`] in its kernel.
pub(crate) fn conv2d_weight_grad<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom) -> Vec<T> {
    let mut gw = vec![T::zero(); g.patch() * g.cout];
    if g.is_pointwise() {
        gemm(x, gout, &mut gw, g.cin, g.rows(), g.cout, true, false, false);
    } else {
        let cols = im2col(x, g);
        gemm(&cols, gout, &mut gw, g.patch(), g.rows(), g.cout, true, false, false);
    }
    gw
}

pub(crate) fn check_nhwc(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.len() != 4 {
        return Err(shape_err(op, format!("expected NHWC rank-4 input, got {shape:?}")));
    }
    Ok(())
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_nhwc("upsample2x", x.shape())?;
    let [n, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let src = x.data();
    let mut out = vec![T::zero(); n * 4 * h * w * c];
    let (ho, wo) = (2 * h, 2 * w);
    for b in 0..n {
        for y in 0..ho {
            for xo in 0..wo {
                let s = ((b * h + y / 2) * w + xo / 2) * c;
                let d = ((b * ho + y) * wo + xo) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(&[n, ho, wo, c], out)
}

/// Sums each 2×2 block; `scale` is applied to the sum (0.25 gives average pooling).
pub(crate) fn pool2x<T: Scalar>(x: &Tensor<T>, scale: T) -> Result<Tensor<T>> {
    check_nhwc("downsample2x", x.shape())?;
    let [n, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(
            "downsample2x",
            format!("spatial axes 1,2 must be even, got {h}×{w}"),
        ));
    }
    let src = x.data();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * ho * wo * c];
    for b in 0..n {
        for y in 0..ho {
            for xo in 0..wo {
                let d = ((b * ho + y) * wo + xo) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((b * h + 2 * y + dy) * w + 2 * xo + dx) * c;
                    for k in 0..c {
                        out[d + k] += src[s + k];
                    }
                }
                for v in &mut out[d..d + c] {
                    *v *= scale;
                }
            }
        }
    }
    Tensor::new(&[n, ho, wo, c], out)
}

/// Mean over H and W: NHWC → N×C.
pub(crate) fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_nhwc("global_avg_pool_hw", x.shape())?;
    let [n, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let hw = h * w;
    let inv = T::one() / T::of(hw as f64);
    let src = x.data();
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let o = &mut out[b * c..(b + 1) * c];
        for p in 0..hw {
            let s = (b * hw + p) * c;
            for k in 0..c {
                o[k] += src[s + k];
            }
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(&[n, c], out)
}

/// Adjoint of [`global_avg_pool`]: N×C → NHWC with each value divided by H·W.
pub(crate) fn spread_hw<T: Scalar>(g: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if g.rank() != 2 {
        return Err(shape_err("spread_hw", format!("expected N×C, got {:?}", g.shape())));
    }
    let (n, c) = (g.dim(0), g.dim(1));
    let inv = T::one() / T::of((h * w) as f64);
    let src = g.data();
    let mut out = vec![T::zero(); n * h * w * c];
    for b in 0..n {
        for p in 0..h * w {
            let d = (b * h * w + p) * c;
            for k in 0..c {
                out[d + k] = src[b * c + k] * inv;
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}

pub(crate) fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shapes agree")
}

pub(crate) fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += *b;
    }
}

/// Sums all rows onto the last axis: `[.., C]` → `[C]`.
pub(crate) fn sum_to_last<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let c = *g.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); c];
    for row in g.data().chunks_exact(c.max(1)) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    Tensor::new(&[c], out).expect("sum_to_last")
}

/// Per-column statistics over rows of a `rows×C` view: (mean, biased variance).
pub(crate) fn column_moments<T: Scalar>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let inv = T::one() / T::of(rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += *v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for k in 0..c {
            let d = row[k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v *= inv);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeom::new(&[2, 8, 8, 3], &[3, 3, 3, 4], 1, Padding::Same).unwrap();
        assert_eq!(g.out_shape(), [2, 8, 8, 4]);
        assert_eq!((g.pad_t, g.pad_l), (1, 1));
        let g = ConvGeom::new(&[1, 7, 7, 1], &[3, 3, 1, 1], 2, Padding::Same).unwrap();
        assert_eq!((g.ho, g.wo), (4, 4));
        let g = ConvGeom::new(&[1, 5, 5, 1], &[3, 3, 1, 1], 1, Padding::Valid).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
    }

    #[test]
    fn channel_mismatch_names_axes() {
        let err = ConvGeom::new(&[1, 4, 4, 3], &[3, 3, 2, 4], 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis 3") && msg.contains("axis 2"), "{msg}");
    }

    #[test]
    fn odd_downsample_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 1]);
        assert!(pool2x(&x, 0.25).is_err());
    }
}
