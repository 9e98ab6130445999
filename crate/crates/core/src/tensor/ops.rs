use super::{DenseTensor, Real};
use crate::error::{Error, Result};

pub fn relu_forward<T: Real>(x: &DenseTensor<T>) -> DenseTensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad` where the forward input was strictly positive.
pub fn relu_backward<T: Real>(grad: &DenseTensor<T>, cached_input: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    cached_input.expect_shape("relu_backward", grad.shape())?;
    let data = grad
        .data()
        .iter()
        .zip(cached_input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    DenseTensor::new(grad.shape().to_vec(), data)
}

pub fn add_forward<T: Real>(a: &DenseTensor<T>, b: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    b.expect_shape("add_forward", a.shape())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    DenseTensor::new(a.shape().to_vec(), data)
}

/// Both summands receive the incoming gradient unchanged.
pub fn add_backward<T: Real>(grad: &DenseTensor<T>) -> (DenseTensor<T>, DenseTensor<T>) {
    (grad.clone(), grad.clone())
}

#[derive(Clone, Debug)]
pub struct MseResult<T = f32> {
    pub loss: T,
    /// d(loss)/d(pred)
    pub grad: DenseTensor<T>,
}

/// Mean of squared differences over every element. Accumulates in `f64`.
pub fn mse_loss<T: Real>(pred: &DenseTensor<T>, target: &DenseTensor<T>) -> Result<MseResult<T>> {
    target.expect_shape("mse_loss", pred.shape())?;
    if pred.is_empty() {
        return Err(Error::InvalidConfig("mse_loss over an empty tensor".into()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0f64;
    let scale = T::from_f64(2.0 / n);
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            sum += d.to_f64() * d.to_f64();
            scale * d
        })
        .collect();
    Ok(MseResult {
        loss: T::from_f64(sum / n),
        grad: DenseTensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// `[B, C, T, H, W] -> [B, C*T, H, W]`; element `(b, c, t, h, w)` lands at
/// channel `c * T + t`. In row-major layout this is a pure reshape.
pub fn stack_time_channels<T: Real>(x: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let [b, c, t, h, w] = x.dims5("stack_time_channels")?;
    x.reshape(&[b, c * t, h, w])
}

/// Inverse of [`stack_time_channels`] for a given number of timesteps.
pub fn unstack_time_channels<T: Real>(x: &DenseTensor<T>, timesteps: usize) -> Result<DenseTensor<T>> {
    x.expect_rank("unstack_time_channels", 4)?;
    let s = x.shape();
    if timesteps == 0 || !s[1].is_multiple_of(timesteps) {
        return Err(Error::shape("unstack_time_channels", "channels", timesteps, s[1]));
    }
    x.reshape(&[s[0], s[1] / timesteps, timesteps, s[2], s[3]])
}

/// Concatenates 5-axis tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&DenseTensor<T>]) -> Result<DenseTensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidConfig("concat_channels of nothing".into()))?;
    let [b, _, t, h, w] = first.dims5("concat_channels")?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let d = p.dims5("concat_channels")?;
        if d[0] != b || d[2..] != [t, h, w] {
            return Err(Error::shape(
                "concat_channels",
                "batch/spatial extent",
                b * t * h * w,
                d[0] * d[2] * d[3] * d[4],
            ));
        }
        channels.push(d[1]);
    }
    let plane = t * h * w;
    let total: usize = channels.iter().sum();
    let mut out = Vec::with_capacity(b * total * plane);
    for bi in 0..b {
        for (p, &c) in parts.iter().zip(&channels) {
            out.extend_from_slice(&p.data()[bi * c * plane..][..c * plane]);
        }
    }
    DenseTensor::new(vec![b, total, t, h, w], out)
}

/// Splits a 5-axis tensor along channels into pieces of the given widths.
pub fn split_channels<T: Real>(x: &DenseTensor<T>, widths: &[usize]) -> Result<Vec<DenseTensor<T>>> {
    let [b, c, t, h, w] = x.dims5("split_channels")?;
    let total: usize = widths.iter().sum();
    if total != c {
        return Err(Error::shape("split_channels", "channels", c, total));
    }
    let plane = t * h * w;
    let mut outs: Vec<Vec<T>> = widths.iter().map(|&wd| Vec::with_capacity(b * wd * plane)).collect();
    for bi in 0..b {
        let mut start = bi * c * plane;
        for (o, &wd) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&x.data()[start..start + wd * plane]);
            start += wd * plane;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(o, &wd)| DenseTensor::new(vec![b, wd, t, h, w], o))
        .collect()
}

/// Repeats a `[B, C, 1, H, W]` frame along time.
pub fn broadcast_time<T: Real>(frame: &DenseTensor<T>, timesteps: usize) -> Result<DenseTensor<T>> {
    let [b, c, t, h, w] = frame.dims5("broadcast_time")?;
    if t != 1 {
        return Err(Error::shape("broadcast_time", "time axis", 1, t));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * c * timesteps * plane);
    for chunk in frame.data().chunks(plane) {
        for _ in 0..timesteps {
            out.extend_from_slice(chunk);
        }
    }
    DenseTensor::new(vec![b, c, timesteps, h, w], out)
}

/// Frames `start..start + len` of a `[B, C, T, H, W]` tensor.
pub fn slice_time<T: Real>(x: &DenseTensor<T>, start: usize, len: usize) -> Result<DenseTensor<T>> {
    let [b, c, t, h, w] = x.dims5("slice_time")?;
    if start + len > t {
        return Err(Error::shape("slice_time", "time axis", start + len, t));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(b * c * len * plane);
    for chunk in x.data().chunks(t * plane) {
        out.extend_from_slice(&chunk[start * plane..(start + len) * plane]);
    }
    DenseTensor::new(vec![b, c, len, h, w], out)
}

/// Concatenates 5-axis tensors along time.
pub fn concat_time<T: Real>(parts: &[&DenseTensor<T>]) -> Result<DenseTensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidConfig("concat_time of nothing".into()))?;
    let [b, c, _, h, w] = first.dims5("concat_time")?;
    let mut lengths = Vec::with_capacity(parts.len());
    for p in parts {
        let d = p.dims5("concat_time")?;
        if d[0] != b || d[1] != c || d[3] != h || d[4] != w {
            return Err(Error::shape(
                "concat_time",
                "batch/channel/spatial extent",
                b * c * h * w,
                d[0] * d[1] * d[3] * d[4],
            ));
        }
        lengths.push(d[2]);
    }
    let plane = h * w;
    let total: usize = lengths.iter().sum();
    let mut out = Vec::with_capacity(b * c * total * plane);
    for bc in 0..b * c {
        for (p, &t) in parts.iter().zip(&lengths) {
            out.extend_from_slice(&p.data()[bc * t * plane..][..t * plane]);
        }
    }
    DenseTensor::new(vec![b, c, total, h, w], out)
}

/// Sums a `[B, C, T, H, W]` gradient over time into `[B, C, 1, H, W]`.
pub fn broadcast_time_backward<T: Real>(grad: &DenseTensor<T>) -> Result<DenseTensor<T>> {
    let [b, c, t, h, w] = grad.dims5("broadcast_time_backward")?;
    let plane = h * w;
    let mut out = vec![T::zero(); b * c * plane];
    for (p, dst) in out.chunks_mut(plane).enumerate() {
        for ti in 0..t {
            for (d, &g) in dst.iter_mut().zip(&grad.data()[(p * t + ti) * plane..][..plane]) {
                *d += g;
            }
        }
    }
    DenseTensor::new(vec![b, c, 1, h, w], out)
}
