use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::Var;

/// Normalize each contiguous segment of length `seg` of `x`, returning the
/// normalized values and the reciprocal standard deviation per segment.
fn normalize_segments(x: &[f64], seg: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(x.len() / seg);
    for (src, dst) in x.chunks(seg).zip(xhat.chunks_mut(seg)) {
        let n = seg as f64;
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let r = 1.0 / (var + eps).sqrt();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Backward through the segment normalization given `dxhat`.
fn segments_backward(dxhat: &[f64], xhat: &[f64], rstd: &[f64], seg: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (i, r) in rstd.iter().enumerate() {
        let range = i * seg..(i + 1) * seg;
        let dh = &dxhat[range.clone()];
        let xh = &xhat[range.clone()];
        let n = seg as f64;
        let m1 = dh.iter().sum::<f64>() / n;
        let m2 = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, a), b) in dx[range].iter_mut().zip(dh).zip(xh) {
            *o = r * (a - m1 - b * m2);
        }
    }
    dx
}

impl Var {
    /// Group normalization over `[B, C, ...]` with per-channel affine
    /// parameters. `groups == channels` gives instance normalization.
    pub fn group_norm(&self, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        if shape.len() < 2 {
            return shape_err(format!("group_norm input {shape:?}"));
        }
        let (b, c) = (shape[0], shape[1]);
        if groups == 0 || c % groups != 0 {
            return shape_err(format!("{c} channels not divisible into {groups} groups"));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return shape_err(format!("group_norm affine shapes {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()));
        }
        let spatial: usize = shape[2..].iter().product();
        let seg = (c / groups) * spatial;
        let (xhat, rstd) = normalize_segments(self.value().data(), seg, eps);
        let mut y = vec![0.0; xhat.len()];
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * spatial;
                for i in off..off + spatial {
                    y[i] = xhat[i] * gm[ch] + bt[ch];
                }
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(shape.clone(), y),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let gm = p[1].value().data();
                let mut dxhat = vec![0.0; gd.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * spatial;
                        for i in off..off + spatial {
                            dxhat[i] = gd[i] * gm[ch];
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                let dx = p[0]
                    .requires_grad()
                    .then(|| Tensor::from_parts(shape.clone(), segments_backward(&dxhat, &xhat, &rstd, seg)));
                vec![
                    dx,
                    Some(Tensor::from_parts(vec![c], dgamma)),
                    Some(Tensor::from_parts(vec![c], dbeta)),
                ]
            }),
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = self.shape().to_vec();
        let e = *shape.last().ok_or_else(|| crate::Error::Shape("layer_norm on scalar".into()))?;
        if gamma.shape() != [e] || beta.shape() != [e] {
            return shape_err(format!("layer_norm affine shapes {:?}/{:?} for width {e}", gamma.shape(), beta.shape()));
        }
        let (xhat, rstd) = normalize_segments(self.value().data(), e, eps);
        let (gm, bt) = (gamma.value().data(), beta.value().data());
        let y: Vec<f64> = xhat.iter().enumerate().map(|(i, v)| v * gm[i % e] + bt[i % e]).collect();
        Ok(Var::from_op(
            Tensor::from_parts(shape.clone(), y),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let gm = p[1].value().data();
                let mut dgamma = vec![0.0; e];
                let mut dbeta = vec![0.0; e];
                let dxhat: Vec<f64> = gd
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        dgamma[i % e] += gv * xhat[i];
                        dbeta[i % e] += gv;
                        gv * gm[i % e]
                    })
                    .collect();
                let dx = p[0]
                    .requires_grad()
                    .then(|| Tensor::from_parts(shape.clone(), segments_backward(&dxhat, &xhat, &rstd, e)));
                vec![
                    dx,
                    Some(Tensor::from_parts(vec![e], dgamma)),
                    Some(Tensor::from_parts(vec![e], dbeta)),
                ]
            }),
        ))
    }

    /// 1-D convolution across the channel axis of `[B, C]` with a single
    /// shared odd-length kernel and zero padding `(K-1)/2`, so the output
    /// keeps `C` entries.
    pub fn channel_conv1d(&self, kernel: &Var) -> Result<Var> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 || kernel.shape().len() != 1 {
            return shape_err(format!("channel_conv1d input {shape:?} kernel {:?}", kernel.shape()));
        }
        let k = kernel.shape()[0];
        if k.is_multiple_of(2) {
            return shape_err(format!("channel_conv1d kernel length {k} must be odd"));
        }
        let (b, c) = (shape[0], shape[1]);
        let half = (k / 2) as isize;
        let x = self.value().data();
        let w = kernel.value().data();
        let mut y = vec![0.0; b * c];
        for n in 0..b {
            for i in 0..c {
                let mut s = 0.0;
                for (t, wt) in w.iter().enumerate() {
                    let j = i as isize + t as isize - half;
                    if j >= 0 && (j as usize) < c {
                        s += wt * x[n * c + j as usize];
                    }
                }
                y[n * c + i] = s;
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(shape.clone(), y),
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, p, _| {
                let gd = g.data();
                let x = p[0].value().data();
                let w = p[1].value().data();
                let mut gx = vec![0.0; b * c];
                let mut gw = vec![0.0; k];
                for n in 0..b {
                    for i in 0..c {
                        let gi = gd[n * c + i];
                        for t in 0..k {
                            let j = i as isize + t as isize - half;
                            if j >= 0 && (j as usize) < c {
                                gx[n * c + j as usize] += gi * w[t];
                                gw[t] += gi * x[n * c + j as usize];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_parts(shape.clone(), gx)),
                    Some(Tensor::from_parts(vec![k], gw)),
                ]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::super::backward;
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor) -> f64, x0: &Tensor) -> Tensor {
        let h = 1e-6;
        Tensor::from_fn(x0.shape(), |i| {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
    }

    fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let x = Var::constant(Tensor::from_fn(&[2, 4, 3, 3, 3], |i| (i as f64 * 0.77).sin() * 5.0 + 2.0));
        let y = x
            .group_norm(&Var::constant(Tensor::ones(&[4])), &Var::constant(Tensor::zeros(&[4])), 2, 0.0)
            .unwrap();
        for seg in y.value().data().chunks(2 * 27) {
            let m = seg.iter().sum::<f64>() / seg.len() as f64;
            let v = seg.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / seg.len() as f64;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_gradients() {
        let x0 = Tensor::from_fn(&[2, 4, 2, 2, 1], |i| (i as f64 * 1.3).cos());
        let g0 = Tensor::from_fn(&[4], |i| 1.0 + i as f64 * 0.5);
        let b0 = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
        let probe = Tensor::from_fn(&[2, 4, 2, 2, 1], |i| (i as f64 * 0.4).sin());
        let run = |x: &Var, g: &Var, b: &Var| {
            x.group_norm(g, b, 2, 1e-5).unwrap().mul(&Var::constant(probe.clone())).unwrap().sum_all()
        };
        let (x, g, b) = (Var::leaf(x0.clone()), Var::leaf(g0.clone()), Var::leaf(b0.clone()));
        let grads = backward(&run(&x, &g, &b));
        let fx = |t: &Tensor| run(&Var::constant(t.clone()), &g, &b).value().item();
        let fg = |t: &Tensor| run(&x, &Var::constant(t.clone()), &b).value().item();
        assert_close(grads.get(&x).unwrap(), &numeric_grad(&fx, &x0), 1e-6);
        assert_close(grads.get(&g).unwrap(), &numeric_grad(&fg, &g0), 1e-6);
    }

    #[test]
    fn layer_norm_gradients() {
        let x0 = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.9).sin() * 2.0);
        let probe = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.3).cos());
        let gam = Var::constant(Tensor::from_fn(&[5], |i| 0.5 + i as f64));
        let bet = Var::constant(Tensor::zeros(&[5]));
        let run = |x: &Var| x.layer_norm(&gam, &bet, 1e-5).unwrap().mul(&Var::constant(probe.clone())).unwrap().sum_all();
        let x = Var::leaf(x0.clone());
        let grads = backward(&run(&x));
        let f = |t: &Tensor| run(&Var::constant(t.clone())).value().item();
        assert_close(grads.get(&x).unwrap(), &numeric_grad(&f, &x0), 1e-6);
    }

    #[test]
    fn channel_conv1d_zero_padding() {
        let x = Var::constant(Tensor::full(&[1, 5], 2.0));
        let w = Var::constant(Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap());
        let y = x.channel_conv1d(&w).unwrap();
        // interior: 2 * 3.5; first loses the left tap, last loses the right tap
        assert_eq!(y.value().data(), &[6.0, 7.0, 7.0, 7.0, 3.0]);
    }

    #[test]
    fn channel_conv1d_gradients() {
        let x0 = Tensor::from_fn(&[2, 6], |i| (i as f64).sin());
        let w0 = Tensor::from_fn(&[3], |i| 0.3 + i as f64);
        let probe = Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.5).cos());
        let run = |x: &Var, w: &Var| x.channel_conv1d(w).unwrap().mul(&Var::constant(probe.clone())).unwrap().sum_all();
        let (x, w) = (Var::leaf(x0.clone()), Var::leaf(w0.clone()));
        let grads = backward(&run(&x, &w));
        let fx = |t: &Tensor| run(&Var::constant(t.clone()), &w).value().item();
        let fw = |t: &Tensor| run(&x, &Var::constant(t.clone())).value().item();
        assert_close(grads.get(&x).unwrap(), &numeric_grad(&fx, &x0), 1e-6);
        assert_close(grads.get(&w).unwrap(), &numeric_grad(&fw, &w0), 1e-6);
    }
}
