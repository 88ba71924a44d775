//! Patch extraction (`im2col`) and its adjoint (`col2im`) for NHWC tensors,
//! registered as candle custom ops. Each op's backward pass is the other op,
//! so convolutions built from them are differentiable with gemm-speed
//! forward and backward passes.
//!
//! Column layout: row `(n, oy, ox)` of a `(B * OH * OW, K * K * C)` matrix
//! holds the `K x K x C` patch feeding output position `(oy, ox)` of image
//! `n`, ordered `(ky, kx, c)`. Out-of-bounds (padding) entries are zero.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a convolution over an `height x width x channels` image.
    pub fn new(height: usize, width: usize, channels: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    fn cols_len(&self) -> usize {
        self.out_h * self.out_w * self.patch_len()
    }

    /// Visits every (image offset, column offset) pair of a `channels`-long run.
    #[inline]
    fn for_each_run(&self, batch: usize, mut f: impl FnMut(usize, usize)) {
        let (k, c) = (self.kernel, self.channels);
        let patch = self.patch_len();
        for n in 0..batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((n * self.out_h + oy) * self.out_w + ox) * patch;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src = ((n * self.height + iy as usize) * self.width + ix as usize) * c;
                            f(src, row + (ky * k + kx) * c);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let batch = src.len() / self.image_len();
        let c = self.channels;
        let mut dst = vec![T::default(); batch * self.cols_len()];
        self.for_each_run(batch, |s, d| dst[d..d + c].copy_from_slice(&src[s..s + c]));
        dst
    }

    fn col2im<T: Copy + Default + AddAssign>(&self, cols: &[T]) -> Vec<T> {
        let batch = cols.len() / self.cols_len();
        let c = self.channels;
        let mut dst = vec![T::default(); batch * self.image_len()];
        self.for_each_run(batch, |s, d| {
            for (o, v) in dst[s..s + c].iter_mut().zip(&cols[d..d + c]) {
                *o += *v;
            }
        });
        dst
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

/// `(B, H, W, C)` -> `(B * OH * OW, K * K * C)`.
pub struct Im2Col(pub ConvGeometry);

/// `(B * OH * OW, K * K * C)` -> `(B, H, W, C)`, summing overlapping patches.
pub struct Col2Im(pub ConvGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let dims = layout.shape().dims();
        if dims.len() != 4 || dims[1] != g.height || dims[2] != g.width || dims[3] != g.channels {
            candle_core::bail!("im2col: input shape {dims:?} does not match geometry {g:?}");
        }
        let rows = dims[0] * g.out_h * g.out_w;
        let shape = Shape::from((rows, g.patch_len()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.im2col(contiguous(v, layout, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.im2col(contiguous(v, layout, "im2col")?)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let dims = layout.shape().dims();
        let per_image = g.out_h * g.out_w;
        if dims.len() != 2 || dims[1] != g.patch_len() || !dims[0].is_multiple_of(per_image) {
            candle_core::bail!("col2im: input shape {dims:?} does not match geometry {g:?}");
        }
        let batch = dims[0] / per_image;
        let shape = Shape::from((batch, g.height, g.width, g.channels));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.col2im(contiguous(v, layout, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.col2im(contiguous(v, layout, "col2im")?)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

pub fn im2col(x: &Tensor, g: ConvGeometry) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Im2Col(g))
}

pub fn col2im(cols: &Tensor, g: ConvGeometry) -> candle_core::Result<Tensor> {
    cols.contiguous()?.apply_op1(Col2Im(g))
}
