//! Raw slice kernels behind the graph ops.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Index mapping for right-aligned broadcasting of two shapes.
pub struct Broadcast {
    out: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
    same: bool,
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

impl Broadcast {
    pub fn new(lhs: &[usize], rhs: &[usize]) -> Option<Self> {
        let rank = lhs.len().max(rhs.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let l = lhs.len().checked_sub(rank - i).map_or(1, |j| lhs[j]);
            let r = rhs.len().checked_sub(rank - i).map_or(1, |j| rhs[j]);
            out[i] = match (l, r) {
                (a, b) if a == b => a,
                (1, b) => b,
                (a, 1) => a,
                _ => return None,
            };
        }
        Some(Self {
            lhs_strides: strides_for(lhs, &out),
            rhs_strides: strides_for(rhs, &out),
            same: lhs == rhs,
            out,
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out
    }

    pub fn numel(&self) -> usize {
        self.out.iter().product()
    }

    /// Calls `f(out_index, lhs_index, rhs_index)` for every output element in
    /// row-major order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.numel();
        if self.same {
            (0..n).for_each(|i| f(i, i, i));
            return;
        }
        if n == 0 {
            return;
        }
        let rank = self.out.len();
        let mut idx = vec![0usize; rank];
        let (mut li, mut ri) = (0usize, 0usize);
        for o in 0..n {
            f(o, li, ri);
            for d in (0..rank).rev() {
                idx[d] += 1;
                li += self.lhs_strides[d];
                ri += self.rhs_strides[d];
                if idx[d] < self.out[d] {
                    break;
                }
                li -= self.lhs_strides[d] * idx[d];
                ri -= self.rhs_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `ga += g · bᵀ`
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for p in 0..k {
            let mut s = 0.0;
            for j in 0..m {
                s += g[i * m + j] * b[p * m + j];
            }
            ga[i * k + p] += s;
        }
    }
}

/// `gb += aᵀ · g`
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            for j in 0..m {
                gb[p * m + j] += aip * g[i * m + j];
            }
        }
    }
}

pub fn reduce_axis(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub fn logsumexp_axis(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| x[(o * len + l) * inner + i];
            let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                out[o * inner + i] = m;
                continue;
            }
            let s: f64 = (0..len).map(|l| (at(l) - m).exp()).sum();
            out[o * inner + i] = m + s.ln();
        }
    }
    out
}

pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `off`
/// (in `-pad..=pad`).
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims) -> Vec<f64> {
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    let mut out = vec![0.0; d.c_out * plane];
    for co in 0..d.c_out {
        let o = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            o.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..d.c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(d.h, dy);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(d.w, dx);
                    let wv = w[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let orow = &mut o[oy * d.w + x0..oy * d.w + x1];
                        let start = (x0 as isize + dx) as usize;
                        let irow = &xin[iy * d.w + start..iy * d.w + start + (x1 - x0)];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * iv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_grad_input(g: &[f64], w: &[f64], gx: &mut [f64], d: &ConvDims) {
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    for co in 0..d.c_out {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let gin = &mut gx[ci * plane..(ci + 1) * plane];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(d.h, dy);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(d.w, dx);
                    let wv = w[((co * d.c_in + ci) * d.k + ky) * d.k + kx];
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let start = (x0 as isize + dx) as usize;
                        let grow = &go[oy * d.w + x0..oy * d.w + x1];
                        let irow = &mut gin[iy * d.w + start..iy * d.w + start + (x1 - x0)];
                        for (iv, gv) in irow.iter_mut().zip(grow) {
                            *iv += wv * gv;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_grad_weight(g: &[f64], x: &[f64], gw: &mut [f64], d: &ConvDims) {
    let plane = d.h * d.w;
    let pad = (d.k / 2) as isize;
    for co in 0..d.c_out {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let xin = &x[ci * plane..(ci + 1) * plane];
            for ky in 0..d.k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(d.h, dy);
                for kx in 0..d.k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(d.w, dx);
                    let mut s = 0.0;
                    for oy in y0..y1 {
                        let iy = (oy as isize + dy) as usize;
                        let start = (x0 as isize + dx) as usize;
                        let grow = &go[oy * d.w + x0..oy * d.w + x1];
                        let irow = &xin[iy * d.w + start..iy * d.w + start + (x1 - x0)];
                        s += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gw[((co * d.c_in + ci) * d.k + ky) * d.k + kx] += s;
                }
            }
        }
    }
}

pub fn avg_pool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let at = |dy: usize, dx: usize| x[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                out[(ch * oh + y) * ow + xx] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    out
}

pub fn avg_pool2_grad(g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                gx[(ch * h + y) * w + xx] += 0.25 * g[(ch * oh + y / 2) * ow + xx / 2];
            }
        }
    }
}

pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_grad(g: &[f64], gx: &mut [f64], c: usize, h: usize, w: usize) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
            }
        }
    }
}
