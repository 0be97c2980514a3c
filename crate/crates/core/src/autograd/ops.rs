use crate::error::{shape_err, Result};
use crate::tensor::{broadcast_zip, numel, strides, Tensor};

use super::Var;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a + b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    Some(g.sum_to(p[0].shape())),
                    Some(g.sum_to(p[1].shape())),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a - b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                vec![
                    Some(g.sum_to(p[0].shape())),
                    Some(g.map(|x| -x).sum_to(p[1].shape())),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a * b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| broadcast_zip(g, p[1].value(), |g, b| g * b).unwrap());
                let gb = p[1]
                    .requires_grad()
                    .then(|| broadcast_zip(g, p[0].value(), |g, a| g * a).unwrap());
                vec![
                    ga.map(|t| t.sum_to(p[0].shape())),
                    gb.map(|t| t.sum_to(p[1].shape())),
                ]
            }),
        ))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let value = broadcast_zip(self.value(), other.value(), |a, b| a / b)?;
        Ok(Var::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, out| {
                let ga = p[0]
                    .requires_grad()
                    .then(|| broadcast_zip(g, p[1].value(), |g, b| g / b).unwrap());
                let gb = p[1].requires_grad().then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let q = broadcast_zip(g, out, |g, o| -g * o).unwrap();
                    broadcast_zip(&q, p[1].value(), |q, b| q / b).unwrap()
                });
                vec![
                    ga.map(|t| t.sum_to(p[0].shape())),
                    gb.map(|t| t.sum_to(p[1].shape())),
                ]
            }),
        ))
    }

    pub fn add_scalar(&self, s: f64) -> Var {
        Var::from_op(
            self.value().map(|x| x + s),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Var {
        Var::from_op(
            self.value().scale(s),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.scale(s))]),
        )
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Var {
        Var::from_op(
            self.value().map(|x| 1.0 - x),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.scale(-1.0))]),
        )
    }

    pub fn sigmoid(&self) -> Var {
        Var::from_op(
            self.value().map(sigmoid),
            vec![self.clone()],
            Box::new(|g, _, out| vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s)))]),
        )
    }

    pub fn relu(&self) -> Var {
        Var::from_op(
            // keep NaN visible instead of clamping it to zero
            self.value().map(|x| if x < 0.0 { 0.0 } else { x }),
            vec![self.clone()],
            Box::new(|g, p, _| {
                vec![Some(
                    g.zip_map(p[0].value(), |g, x| if x > 0.0 { g } else { 0.0 }),
                )]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var {
        let f = |x: f64| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh());
        Var::from_op(
            self.value().map(f),
            vec![self.clone()],
            Box::new(|g, p, _| {
                vec![Some(g.zip_map(p[0].value(), |g, x| {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                }))]
            }),
        )
    }

    pub fn sum_all(&self) -> Var {
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            vec![self.clone()],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape().to_vec();
        let mut target = shape.clone();
        for &a in axes {
            if a >= shape.len() {
                return shape_err(format!("sum axis {a} for shape {shape:?}"));
            }
            target[a] = 1;
        }
        let value = self.value().sum_to(&target);
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                vec![Some(broadcast_zip(&Tensor::zeros(&shape), g, |_, g| g).unwrap())]
            }),
        ))
    }

    /// Mean over `axes`, keeping them with extent 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.mul_scalar(1.0 / count as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.clone().reshaped(&orig))]),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let value = self.value().permute(perm)?;
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.permute_unchecked(&inverse))]),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose_last(&self) -> Result<Var> {
        let r = self.shape().len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value().narrow(axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(Var::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[axis];
                let mut full = vec![0.0; numel(&shape)];
                let gd = g.data();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    full[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![Some(Tensor::from_parts(shape.clone(), full))]
            }),
        ))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let value = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Var::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, p, _| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(p)
                    .map(|(&n, parent)| {
                        let s = start;
                        start += n;
                        parent.requires_grad().then(|| g.narrow(axis, s, n).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("softmax axis {axis} for shape {shape:?}"));
        }
        let n = shape[axis];
        let inner = strides(&shape)[axis];
        let outer = numel(&shape) / (n * inner).max(1);
        let x = self.value().data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..n {
                    m = m.max(x[base + k * inner]);
                }
                let mut s = 0.0;
                for k in 0..n {
                    let e = (x[base + k * inner] - m).exp();
                    out[base + k * inner] = e;
                    s += e;
                }
                for k in 0..n {
                    out[base + k * inner] /= s;
                }
            }
        }
        Ok(Var::from_op(
            Tensor::from_parts(shape, out),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let (gd, yd) = (g.data(), y.data());
                let mut gx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = 0.0;
                        for k in 0..n {
                            dot += gd[base + k * inner] * yd[base + k * inner];
                        }
                        for k in 0..n {
                            let j = base + k * inner;
                            gx[j] = yd[j] * (gd[j] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
            }),
        ))
    }
}
