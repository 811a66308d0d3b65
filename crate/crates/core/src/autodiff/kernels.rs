//! Raw slice kernels behind the tape primitives.

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn huber(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * d * d
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    row[k] - log_sum_exp(row)
}

pub fn softmax_rows(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= z);
    }
    out
}

/// `[n, k] x [k, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[n, m] x [k, m]^T -> [n, k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..k {
            let brow = &b[j * m..(j + 1) * m];
            out[i * k + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `[n, k]^T x [n, m] -> [k, m]`.
pub fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize]) -> Self {
        Self {
            n: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: k[0],
            kh: k[2],
            kw: k[3],
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.h, self.w]
    }

    /// Calls `f(x_index, k_index, out_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let (h, w) = (self.h as isize, self.w as isize);
        for n in 0..self.n {
            for o in 0..self.co {
                for c in 0..self.ci {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let ki = ((o * self.ci + c) * self.kh + ky) * self.kw + kx;
                            let dy = ky as isize - ph as isize;
                            let dx = kx as isize - pw as isize;
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < 0 || sy >= h {
                                    continue;
                                }
                                for x in 0..w {
                                    let sx = x + dx;
                                    if sx < 0 || sx >= w {
                                        continue;
                                    }
                                    let xi = ((n * self.ci + c) * self.h + sy as usize) * self.w + sx as usize;
                                    let oi = ((n * self.co + o) * self.h + y as usize) * self.w + x as usize;
                                    f(xi, ki, oi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.co * g.h * g.w];
    g.for_each_tap(|xi, ki, oi| out[oi] += x[xi] * k[ki]);
    out
}

pub fn conv2d_grad_input(up: &[f64], k: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut gx = vec![0.0; g.n * g.ci * g.h * g.w];
    g.for_each_tap(|xi, ki, oi| gx[xi] += up[oi] * k[ki]);
    gx
}

pub fn conv2d_grad_kernel(up: &[f64], x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut gk = vec![0.0; g.co * g.ci * g.kh * g.kw];
    g.for_each_tap(|xi, ki, oi| gk[ki] += up[oi] * x[xi]);
    gk
}

pub struct GroupNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub struct GroupNormGrad {
    pub dx: Vec<f64>,
    pub dgamma: Vec<f64>,
    pub dbeta: Vec<f64>,
}

fn gn_dims(shape: &[usize], groups: usize) -> (usize, usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let hw: usize = shape[2..].iter().product();
    (n, c, hw, c / groups * hw)
}

pub fn group_norm(x: &[f64], shape: &[usize], gamma: &[f64], beta: &[f64], groups: usize, eps: f64) -> GroupNormOut {
    let (n, c, hw, m) = gn_dims(shape, groups);
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * (c / groups)) * hw;
            let seg = &x[start..start + m];
            let mean = seg.iter().sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (off, v) in seg.iter().enumerate() {
                let ch = (start + off) / hw % c;
                let xh = (v - mean) * is;
                xhat[start + off] = xh;
                y[start + off] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    GroupNormOut { y, xhat, inv_std }
}

pub fn group_norm_backward(
    up: &[f64],
    shape: &[usize],
    gamma: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    groups: usize,
) -> GroupNormGrad {
    let (n, c, hw, m) = gn_dims(shape, groups);
    let mut dx = vec![0.0; up.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * (c / groups)) * hw;
            let is = inv_std[b * groups + g];
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for off in 0..m {
                let i = start + off;
                let ch = i / hw % c;
                dgamma[ch] += up[i] * xhat[i];
                dbeta[ch] += up[i];
                let d = up[i] * gamma[ch];
                sum_d += d;
                sum_dx += d * xhat[i];
            }
            let mf = m as f64;
            for off in 0..m {
                let i = start + off;
                let ch = i / hw % c;
                let d = up[i] * gamma[ch];
                dx[i] = is / mf * (mf * d - sum_d - xhat[i] * sum_dx);
            }
        }
    }
    GroupNormGrad { dx, dgamma, dbeta }
}
