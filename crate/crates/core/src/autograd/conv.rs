//! 3-D convolution via chunked im2col and GEMM.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::linalg::gemm;
use super::Var;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dGeometry {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

struct Dims {
    batch: usize,
    cin: usize,
    cout: usize,
    inp: [usize; 3],
    out: [usize; 3],
    k: usize,
    s: usize,
    p: usize,
}

impl Dims {
    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_len(&self) -> usize {
        self.out.iter().product()
    }
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
    /// Output depth slices per im2col chunk.
    fn chunk_depth(&self) -> usize {
        let per_slice = self.rows() * self.out[1] * self.out[2];
        (COL_BUDGET / per_slice.max(1)).clamp(1, self.out[0])
    }
}

fn dims(x: &Tensor, w: &Tensor, g: Conv3dGeometry) -> Result<Dims> {
    if x.rank() != 5 || w.rank() != 5 {
        return shape_err(format!("conv3d expects 5-D input and weight, got {:?} and {:?}", x.shape(), w.shape()));
    }
    let xs = x.shape();
    let ws = w.shape();
    if ws[1] != xs[1] || ws[2] != g.kernel || ws[3] != g.kernel || ws[4] != g.kernel {
        return shape_err(format!("conv3d weight {ws:?} incompatible with input {xs:?}, kernel {}", g.kernel));
    }
    if g.stride == 0 {
        return shape_err("conv3d stride must be positive");
    }
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = g
            .out_extent(xs[2 + a])
            .ok_or_else(|| crate::Error::Shape(format!("conv3d kernel {} larger than padded input {xs:?}", g.kernel)))?;
    }
    Ok(Dims {
        batch: xs[0],
        cin: xs[1],
        cout: ws[0],
        inp: [xs[2], xs[3], xs[4]],
        out,
        k: g.kernel,
        s: g.stride,
        p: g.padding,
    })
}

/// Fill `col` (rows x chunk columns) for output depth slices `z0..z1`.
fn im2col(x: &[f64], d: &Dims, z0: usize, z1: usize, col: &mut [f64]) {
    let [id, ih, iw] = d.inp;
    let [_, oh, ow] = d.out;
    let cols = (z1 - z0) * oh * ow;
    let k = d.k;
    let mut r = 0;
    for ci in 0..d.cin {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = &mut col[r * cols..(r + 1) * cols];
                    let mut j = 0;
                    for oz in z0..z1 {
                        let iz = (oz * d.s + kd) as isize - d.p as isize;
                        for oy in 0..oh {
                            let iy = (oy * d.s + kh) as isize - d.p as isize;
                            let valid_zy = iz >= 0 && (iz as usize) < id && iy >= 0 && (iy as usize) < ih;
                            if !valid_zy {
                                row[j..j + ow].fill(0.0);
                                j += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * d.s + kw) as isize - d.p as isize;
                                row[j] = if ix >= 0 && (ix as usize) < iw {
                                    xc[base + ix as usize]
                                } else {
                                    0.0
                                };
                                j += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Scatter-add `col` back into the input gradient.
fn col2im(col: &[f64], d: &Dims, z0: usize, z1: usize, gx: &mut [f64]) {
    let [id, ih, iw] = d.inp;
    let [_, oh, ow] = d.out;
    let cols = (z1 - z0) * oh * ow;
    let k = d.k;
    let mut r = 0;
    for ci in 0..d.cin {
        let gc = &mut gx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = &col[r * cols..(r + 1) * cols];
                    let mut j = 0;
                    for oz in z0..z1 {
                        let iz = (oz * d.s + kd) as isize - d.p as isize;
                        for oy in 0..oh {
                            let iy = (oy * d.s + kh) as isize - d.p as isize;
                            if !(iz >= 0 && (iz as usize) < id && iy >= 0 && (iy as usize) < ih) {
                                j += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = (ox * d.s + kw) as isize - d.p as isize;
                                if ix >= 0 && (ix as usize) < iw {
                                    gc[base + ix as usize] += row[j];
                                }
                                j += 1;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Forward convolution on plain tensors (no graph).
pub fn conv3d_raw(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: Conv3dGeometry) -> Result<Tensor> {
    let d = dims(x, w, g)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return shape_err(format!("conv3d bias {:?} for {} output channels", b.shape(), d.cout));
        }
    }
    let (in_len, out_len, rows) = (d.in_len(), d.out_len(), d.rows());
    let mut out = vec![0.0; d.batch * d.cout * out_len];
    let chunk = d.chunk_depth();
    let plane = d.out[1] * d.out[2];
    let mut col = if d.pointwise() { Vec::new() } else { vec![0.0; rows * chunk * plane] };
    for b in 0..d.batch {
        let xb = &x.data()[b * d.cin * in_len..(b + 1) * d.cin * in_len];
        let ob = &mut out[b * d.cout * out_len..(b + 1) * d.cout * out_len];
        if d.pointwise() {
            gemm(d.cout, d.cin, out_len, 1.0, w.data(), (d.cin, 1), xb, (in_len, 1), 0.0, ob, (out_len, 1));
        } else {
            let mut z0 = 0;
            while z0 < d.out[0] {
                let z1 = (z0 + chunk).min(d.out[0]);
                let cols = (z1 - z0) * plane;
                im2col(xb, &d, z0, z1, &mut col[..rows * cols]);
                gemm(d.cout, rows, cols, 1.0, w.data(), (rows, 1), &col, (cols, 1), 0.0, &mut ob[z0 * plane..], (out_len, 1));
                z0 = z1;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut ob[co * out_len..(co + 1) * out_len] {
                    *v += bv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.out[0], d.out[1], d.out[2]], out))
}

impl Var {
    /// 3-D convolution. `weight` is `[cout, cin, k, k, k]`; `bias` is `[cout]`.
    pub fn conv3d(&self, weight: &Var, bias: Option<&Var>, g: Conv3dGeometry) -> Result<Var> {
        let value = conv3d_raw(self.value(), weight.value(), bias.map(|b| b.value()), g)?;
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Var::from_op(
            value,
            parents,
            Box::new(move |grad, p, _| {
                let x = p[0].value();
                let w = p[1].value();
                let d = dims(x, w, g).expect("validated in forward");
                let (in_len, out_len, rows) = (d.in_len(), d.out_len(), d.rows());
                let plane = d.out[1] * d.out[2];
                let chunk = d.chunk_depth();
                let want_x = p[0].requires_grad();
                let want_w = p[1].requires_grad();
                let mut gx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
                let mut gw = vec![0.0; if want_w { w.len() } else { 0 }];
                let mut col = if d.pointwise() { Vec::new() } else { vec![0.0; rows * chunk * plane] };
                let mut gcol = if d.pointwise() || !want_x { Vec::new() } else { vec![0.0; rows * chunk * plane] };
                let gd = grad.data();
                for b in 0..d.batch {
                    let xb = &x.data()[b * d.cin * in_len..(b + 1) * d.cin * in_len];
                    let gb = &gd[b * d.cout * out_len..(b + 1) * d.cout * out_len];
                    if d.pointwise() {
                        if want_w {
                            gemm(d.cout, out_len, d.cin, 1.0, gb, (out_len, 1), xb, (1, in_len), 1.0, &mut gw, (d.cin, 1));
                        }
                        if want_x {
                            let gxb = &mut gx[b * d.cin * in_len..(b + 1) * d.cin * in_len];
                            gemm(d.cin, d.cout, out_len, 1.0, w.data(), (1, d.cin), gb, (out_len, 1), 0.0, gxb, (in_len, 1));
                        }
                        continue;
                    }
                    let mut z0 = 0;
                    while z0 < d.out[0] {
                        let z1 = (z0 + chunk).min(d.out[0]);
                        let cols = (z1 - z0) * plane;
                        let gchunk = &gb[z0 * plane..];
                        if want_w {
                            im2col(xb, &d, z0, z1, &mut col[..rows * cols]);
                            gemm(d.cout, cols, rows, 1.0, gchunk, (out_len, 1), &col, (1, cols), 1.0, &mut gw, (rows, 1));
                        }
                        if want_x {
                            gemm(rows, d.cout, cols, 1.0, w.data(), (1, rows), gchunk, (out_len, 1), 0.0, &mut gcol[..rows * cols], (cols, 1));
                            let gxb = &mut gx[b * d.cin * in_len..(b + 1) * d.cin * in_len];
                            col2im(&gcol[..rows * cols], &d, z0, z1, gxb);
                        }
                        z0 = z1;
                    }
                }
                let mut out = vec![
                    want_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
                    want_w.then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
                ];
                if p.len() == 3 {
                    let gbias = p[2].requires_grad().then(|| {
                        let mut s = vec![0.0; d.cout];
                        for b in 0..d.batch {
                            for (co, acc) in s.iter_mut().enumerate() {
                                let off = (b * d.cout + co) * out_len;
                                *acc += gd[off..off + out_len].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_parts(vec![d.cout], s)
                    });
                    out.push(gbias);
                }
                out
            }),
        ))
    }
}
