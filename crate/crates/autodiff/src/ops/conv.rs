//! 2-D cross-correlation on NHWC inputs with HWIO filters, via im2col + gemm.

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, MatRef};
use crate::flops;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; zero padding split with the extra
    /// row/column on the bottom/right.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], f: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if x.len() != 4 || f.len() != 4 {
            return Err(TensorError::dim("conv2d", format!("input {x:?}, filter {f:?}")));
        }
        if x[3] != f[2] {
            return Err(TensorError::dim("conv2d", format!("input has {} channels, filter expects {}", x[3], f[2])));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be >= 1".into()));
        }
        let (in_h, in_w, k_h, k_w) = (x[1], x[2], f[0], f[1]);
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if in_h < k_h || in_w < k_w {
                    return Err(TensorError::dim("conv2d", format!("kernel {k_h}x{k_w} larger than input {in_h}x{in_w}")));
                }
                ((in_h - k_h) / stride + 1, (in_w - k_w) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = in_h.div_ceil(stride);
                let ow = in_w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k_h).saturating_sub(in_h);
                let pw = ((ow - 1) * stride + k_w).saturating_sub(in_w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Ok(Self { batch: x[0], in_h, in_w, in_c: x[3], k_h, k_w, out_c: f[3], stride, out_h, out_w, pad_top, pad_left })
    }

    fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// FLOPs of the forward pass for the whole batch (two per MAC).
    pub fn flops(&self) -> usize {
        2 * self.batch * self.out_pixels() * self.patch_len() * self.out_c
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1
    }

    /// Input coordinate for output pixel `o` and kernel offset `k` on one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < extent).then_some(p)
    }

    fn im2col<T: Float>(&self, x: &[T], cols: &mut [T]) {
        let c = self.in_c;
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut cols[(oy * self.out_w + ox) * pl..][..pl];
                for ky in 0..self.k_h {
                    let iy = Self::src(oy, ky, self.stride, self.pad_top, self.in_h);
                    for kx in 0..self.k_w {
                        let dst = &mut row[(ky * self.k_w + kx) * c..][..c];
                        match (iy, Self::src(ox, kx, self.stride, self.pad_left, self.in_w)) {
                            (Some(iy), Some(ix)) => dst.copy_from_slice(&x[(iy * self.in_w + ix) * c..][..c]),
                            _ => dst.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Float>(&self, cols: &[T], dx: &mut [T]) {
        let c = self.in_c;
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &cols[(oy * self.out_w + ox) * pl..][..pl];
                for ky in 0..self.k_h {
                    let Some(iy) = Self::src(oy, ky, self.stride, self.pad_top, self.in_h) else { continue };
                    for kx in 0..self.k_w {
                        let Some(ix) = Self::src(ox, kx, self.stride, self.pad_left, self.in_w) else { continue };
                        let src = &row[(ky * self.k_w + kx) * c..][..c];
                        for (d, &s) in dx[(iy * self.in_w + ix) * c..][..c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution on raw buffers; `out` has shape `[n, out_h, out_w, out_c]`.
pub fn conv2d_forward<T: Float>(geo: &ConvGeometry, x: &[T], f: &[T], out: &mut [T]) {
    let (pl, op) = (geo.patch_len(), geo.out_pixels());
    let in_len = geo.in_h * geo.in_w * geo.in_c;
    let out_len = op * geo.out_c;
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); op * pl] };
    for n in 0..geo.batch {
        let xn = &x[n * in_len..][..in_len];
        let patches: &[T] = if geo.is_pointwise() {
            xn
        } else {
            geo.im2col(xn, &mut cols);
            &cols
        };
        gemm(MatRef::new(patches, op, pl), MatRef::new(f, pl, geo.out_c), T::zero(), &mut out[n * out_len..][..out_len]);
    }
}

struct Conv2dOp {
    geo: ConvGeometry,
}

impl<T: Float> Backward<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], needs: &[bool]) -> Vec<Option<Vec<T>>> {
        let geo = &self.geo;
        let (x, f) = (inputs[0].data(), inputs[1].data());
        let (pl, op) = (geo.patch_len(), geo.out_pixels());
        let in_len = geo.in_h * geo.in_w * geo.in_c;
        let out_len = op * geo.out_c;
        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut df = needs[1].then(|| vec![T::zero(); f.len()]);
        let mut cols = vec![T::zero(); op * pl];
        let mut dcols = vec![T::zero(); op * pl];
        for n in 0..geo.batch {
            let gn = &g[n * out_len..][..out_len];
            if let Some(df) = df.as_mut() {
                let xn = &x[n * in_len..][..in_len];
                let patches: &[T] = if geo.is_pointwise() {
                    xn
                } else {
                    geo.im2col(xn, &mut cols);
                    &cols
                };
                // dF += patches^T * dY
                gemm(MatRef::transposed(patches, pl, op), MatRef::new(gn, op, geo.out_c), T::one(), df);
            }
            if let Some(dx) = dx.as_mut() {
                let dxn = &mut dx[n * in_len..][..in_len];
                let fm = MatRef::transposed(f, geo.out_c, pl);
                if geo.is_pointwise() {
                    gemm(MatRef::new(gn, op, geo.out_c), fm, T::zero(), dxn);
                } else {
                    gemm(MatRef::new(gn, op, geo.out_c), fm, T::zero(), &mut dcols);
                    geo.col2im(&dcols, dxn);
                }
            }
        }
        vec![dx, df]
    }
}

impl<T: Float> Tape<T> {
    /// Cross-correlation of `x: [n, h, w, c]` with `f: [kh, kw, c, fo]`.
    pub fn conv2d(&mut self, x: Var, f: Var, stride: usize, padding: Padding) -> Result<Var> {
        let geo = ConvGeometry::new(self.shape(x), self.shape(f), stride, padding)?;
        let mut out = vec![T::zero(); geo.batch * geo.out_pixels() * geo.out_c];
        conv2d_forward(&geo, self.value(x).data(), self.value(f).data(), &mut out);
        flops::record(flops::Kind::Conv, geo.flops());
        let out = Tensor::new(vec![geo.batch, geo.out_h, geo.out_w, geo.out_c], out)?;
        Ok(self.record(out, vec![x, f], Conv2dOp { geo }))
    }
}
