//! Convolutions as patch extraction + one gemm. Candle's CPU convolution
//! backward goes through a naive transposed convolution that dominated the
//! training step; here both directions reduce to gemm plus two cheap
//! gather/scatter kernels that are each other's adjoint.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
    /// Mirror out-of-range taps back into the image instead of reading zero.
    reflect: bool,
    /// Spatial size of the image side (unpadded).
    h: usize,
    w: usize,
}

const OUTSIDE: usize = usize::MAX;

impl Geometry {
    fn out(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    /// Source coordinate of every padded coordinate along an axis of length
    /// `len`, or OUTSIDE where the border reads zero.
    fn axis_map(&self, len: usize) -> Vec<usize> {
        let l = len as isize;
        (0..len + 2 * self.pad)
            .map(|q| {
                let p = q as isize - self.pad as isize;
                let p = if (0..l).contains(&p) || !self.reflect {
                    p
                } else if p < 0 {
                    -p
                } else {
                    2 * (l - 1) - p
                };
                if (0..l).contains(&p) { p as usize } else { OUTSIDE }
            })
            .collect()
    }

    /// Pairs (padded index, image index) of one plane, skipping zero border.
    fn plane_map(&self) -> Vec<(usize, usize)> {
        let (ry, rx) = (self.axis_map(self.h), self.axis_map(self.w));
        let wp = rx.len();
        let mut m = Vec::with_capacity(ry.len() * wp);
        for (py, &y) in ry.iter().enumerate() {
            for (px, &x) in rx.iter().enumerate() {
                if y != OUTSIDE && x != OUTSIDE {
                    m.push((py * wp + px, y * self.w + x));
                }
            }
        }
        m
    }
}

/// `[N, C, H, W]` → `[C*k*k, N*Ho*Wo]`.
struct Im2Col(Geometry);

/// Adjoint of [`Im2Col`]: scatters-and-adds columns back onto the image.
struct Col2Im(Geometry);

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("patch ops need contiguous input"),
    }
}

fn im2col<T: WithDType>(src: &[T], n: usize, c: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out();
    let (hp, wp) = g.padded();
    let plane = g.h * g.w;
    let map = g.plane_map();
    let st = g.stride;
    let mut dst = Vec::with_capacity(c * g.k * g.k * n * ho * wo);
    let mut padded = vec![T::zero(); n * hp * wp];
    for ci in 0..c {
        for ni in 0..n {
            let s = &src[(ni * c + ci) * plane..][..plane];
            let p = &mut padded[ni * hp * wp..][..hp * wp];
            for &(pi, si) in &map {
                p[pi] = s[si];
            }
        }
        for i in 0..g.k {
            for j in 0..g.k {
                for ni in 0..n {
                    let p = &padded[ni * hp * wp..][..hp * wp];
                    for oy in 0..ho {
                        let row = &p[(oy * st + i) * wp + j..];
                        if st == 1 {
                            dst.extend_from_slice(&row[..wo]);
                        } else {
                            dst.extend((0..wo).map(|ox| row[ox * st]));
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: WithDType>(src: &[T], n: usize, c: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.out();
    let (hp, wp) = g.padded();
    let plane = g.h * g.w;
    let map = g.plane_map();
    let st = g.stride;
    let mut dst = vec![T::zero(); n * c * plane];
    let mut padded = vec![T::zero(); n * hp * wp];
    let mut cols = src.chunks_exact(wo);
    for ci in 0..c {
        padded.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..g.k {
            for j in 0..g.k {
                for ni in 0..n {
                    let p = &mut padded[ni * hp * wp..][..hp * wp];
                    for oy in 0..ho {
                        let s = cols.next().expect("column count matches geometry");
                        let row = &mut p[(oy * st + i) * wp + j..];
                        for (ox, &v) in s.iter().enumerate() {
                            row[ox * st] += v;
                        }
                    }
                }
            }
        }
        for ni in 0..n {
            let p = &padded[ni * hp * wp..][..hp * wp];
            let d = &mut dst[(ni * c + ci) * plane..][..plane];
            for &(pi, di) in &map {
                d[di] += p[pi];
            }
        }
    }
    dst
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let g = Geometry { h, w, ..self.0 };
        let (ho, wo) = g.out();
        let shape = Shape::from((c * g.k * g.k, n * ho * wo));
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(im2col(contiguous::<f32>(s, l)?, n, c, g)),
            DType::F64 => CpuStorage::F64(im2col(contiguous::<f64>(s, l)?, n, c, g)),
            d => candle_core::bail!("im2col: unsupported dtype {d:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(Geometry { h, w, ..self.0 }))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (ckk, nl) = l.shape().dims2()?;
        let g = self.0;
        let (ho, wo) = g.out();
        let (c, n) = (ckk / (g.k * g.k), nl / (ho * wo));
        let shape = Shape::from((n, c, g.h, g.w));
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(col2im(contiguous::<f32>(s, l)?, n, c, g)),
            DType::F64 => CpuStorage::F64(col2im(contiguous::<f64>(s, l)?, n, c, g)),
            d => candle_core::bail!("col2im: unsupported dtype {d:?}"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Cross-correlation of `x: [N, C, H, W]` with `w: [O, C, k, k]`; the
/// border is zero-padded, or mirrored when `reflect` (needs `pad < H, W`).
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, reflect: bool) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, ci, k, k2) = w.dims4()?;
    if reflect && (pad >= h || pad >= wd) {
        return Err(Error::invalid(format!(
            "reflection pad {pad} needs spatial dims larger than {h}x{wd}"
        )));
    }
    if ci != c || k != k2 || h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
        return Err(Error::invalid(format!(
            "conv2d: input {:?}, kernel {:?}, stride {stride}, pad {pad}",
            x.dims(),
            w.dims()
        )));
    }
    let g = Geometry { k, stride, pad, reflect, h, w: wd };
    let (ho, wo) = g.out();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = w.reshape((o, c * k * k))?.matmul(&cols)?;
    Ok(y.reshape((o, n, ho, wo))?.transpose(0, 1)?.contiguous()?)
}

/// Transposed convolution (the adjoint of [`conv2d`]) with `w: [C, O, k, k]`.
pub fn conv_transpose2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize, output_padding: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (ci, o, k, k2) = w.dims4()?;
    let ho = ((h - 1) * stride + k + output_padding).checked_sub(2 * pad);
    let wo = ((wd - 1) * stride + k + output_padding).checked_sub(2 * pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(Error::invalid(format!("conv_transpose2d: padding {pad} too large")));
    };
    if ci != c || k != k2 || stride == 0 || output_padding >= stride {
        return Err(Error::invalid(format!(
            "conv_transpose2d: input {:?}, kernel {:?}, stride {stride}, output padding {output_padding}",
            x.dims(),
            w.dims()
        )));
    }
    let xm = x.transpose(0, 1)?.contiguous()?.reshape((c, n * h * wd))?;
    let cols = w.reshape((c, o * k * k))?.t()?.matmul(&xm)?;
    let g = Geometry { k, stride, pad, reflect: false, h: ho, w: wo };
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}
