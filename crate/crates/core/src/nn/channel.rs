//! Per-channel reductions and broadcasts over `[N, C, H, W]`. Candle's
//! backward for a `[1, C, 1, 1]` broadcast reduces over non-trailing dims
//! element by element; these two ops are each other's adjoint and loop
//! over contiguous planes instead.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// `[N, C, H, W]` → `[C]`.
struct ChannelSum;

/// `[C]` → `[N, C, H, W]`.
struct ChannelBroadcast {
    n: usize,
    h: usize,
    w: usize,
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("channel ops need contiguous input"),
    }
}

fn sum<T: WithDType>(src: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, d) in dst.iter_mut().enumerate() {
            let p = &src[(ni * c + ci) * plane..][..plane];
            *d += p.iter().fold(T::zero(), |a, &b| a + b);
        }
    }
    dst
}

fn broadcast<T: WithDType>(src: &[T], n: usize, plane: usize) -> Vec<T> {
    let c = src.len();
    let mut dst = Vec::with_capacity(n * c * plane);
    for _ in 0..n {
        for &v in src {
            dst.extend(std::iter::repeat_n(v, plane));
        }
    }
    dst
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(sum(slice::<f32>(s, l)?, n, c, h * w)),
            DType::F64 => CpuStorage::F64(sum(slice::<f64>(s, l)?, n, c, h * w)),
            d => candle_core::bail!("channel-sum: unsupported dtype {d:?}"),
        };
        Ok((out, Shape::from(c)))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, _, h, w) = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1(ChannelBroadcast { n, h, w })?))
    }
}

impl CustomOp1 for ChannelBroadcast {
    fn name(&self) -> &'static str {
        "channel-broadcast"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let c = l.shape().dims1()?;
        let plane = self.h * self.w;
        let out = match s.dtype() {
            DType::F32 => CpuStorage::F32(broadcast(slice::<f32>(s, l)?, self.n, plane)),
            DType::F64 => CpuStorage::F64(broadcast(slice::<f64>(s, l)?, self.n, plane)),
            d => candle_core::bail!("channel-broadcast: unsupported dtype {d:?}"),
        };
        Ok((out, Shape::from((self.n, c, self.h, self.w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(ChannelSum)?))
    }
}

/// Sum of `x: [N, C, H, W]` over everything but the channel dim.
pub fn channel_sum(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(ChannelSum)?)
}

/// Expands `v: [C]` to the shape of `like: [N, C, H, W]`.
pub fn channel_broadcast(v: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = like.dims4()?;
    if v.dims() != [c] {
        return Err(Error::invalid(format!("channel vector {:?} does not match {:?}", v.dims(), like.dims())));
    }
    Ok(v.contiguous()?.apply_op1(ChannelBroadcast { n, h, w })?)
}
