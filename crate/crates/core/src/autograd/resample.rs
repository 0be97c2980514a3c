use crate::error::{shape_err, Result};
use crate::tensor::{strides, Tensor};

use super::Var;

/// Source taps for linear resampling of `n_in` samples onto `n_out`, using
/// half-pixel centres (the `align_corners = false` convention).
pub(crate) fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resample one axis of a plain tensor to `n_out` samples.
pub(crate) fn resample_axis(t: &Tensor, axis: usize, n_out: usize) -> Tensor {
    let shape = t.shape();
    let n_in = shape[axis];
    let inner = strides(shape)[axis];
    let outer = t.len() / (n_in * inner);
    let taps = linear_taps(n_in, n_out);
    let x = t.data();
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        for (j, &(i0, i1, l)) in taps.iter().enumerate() {
            let dst = (o * n_out + j) * inner;
            let s0 = (o * n_in + i0) * inner;
            let s1 = (o * n_in + i1) * inner;
            for k in 0..inner {
                out[dst + k] = (1.0 - l) * x[s0 + k] + l * x[s1 + k];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = n_out;
    Tensor::from_parts(new_shape, out)
}

impl Var {
    /// Linear resampling along one axis.
    pub fn resample_axis(&self, axis: usize, n_out: usize) -> Result<Var> {
        if axis >= self.shape().len() || n_out == 0 || self.shape()[axis] == 0 {
            return shape_err(format!("resample axis {axis} to {n_out} for {:?}", self.shape()));
        }
        let value = resample_axis(self.value(), axis, n_out);
        let in_shape = self.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let n_in = in_shape[axis];
                let inner = strides(&in_shape)[axis];
                let outer = g.len() / (n_out * inner);
                let taps = linear_taps(n_in, n_out);
                let gd = g.data();
                let mut gx = vec![0.0; outer * n_in * inner];
                for o in 0..outer {
                    for (j, &(i0, i1, l)) in taps.iter().enumerate() {
                        let src = (o * n_out + j) * inner;
                        let d0 = (o * n_in + i0) * inner;
                        let d1 = (o * n_in + i1) * inner;
                        for k in 0..inner {
                            gx[d0 + k] += (1.0 - l) * gd[src + k];
                            gx[d1 + k] += l * gd[src + k];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    /// Trilinear upsampling of a `[B, C, D, H, W]` block by an integer factor.
    pub fn upsample_trilinear(&self, factor: usize) -> Result<Var> {
        if self.shape().len() != 5 {
            return shape_err(format!("upsample_trilinear expects 5-D input, got {:?}", self.shape()));
        }
        let s = self.shape().to_vec();
        self.resample_axis(2, s[2] * factor)?
            .resample_axis(3, s[3] * factor)?
            .resample_axis(4, s[4] * factor)
    }
}
