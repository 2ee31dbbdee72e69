//! Forward and backward kernels on HWC activations.

use crate::linalg::gemm;

/// Activation tensor in row-major `(y, x, channel)` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }
}

fn im2col(input: &Act) -> Vec<f64> {
    let (h, w, c) = (input.h, input.w, input.c);
    let cols = 9 * c;
    let mut col = vec![0.0; h * w * cols];
    for y in 0..h {
        for x in 0..w {
            let row = &mut col[(y * w + x) * cols..(y * w + x + 1) * cols];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * c;
                    let dst = (ky * 3 + kx) * c;
                    row[dst..dst + c].copy_from_slice(&input.data[src..src + c]);
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], h: usize, w: usize, c: usize) -> Act {
    let cols = 9 * c;
    let mut out = Act::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let row = &dcol[(y * w + x) * cols..(y * w + x + 1) * cols];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = (sy as usize * w + sx as usize) * c;
                    let src = (ky * 3 + kx) * c;
                    for k in 0..c {
                        out.data[dst + k] += row[src + k];
                    }
                }
            }
        }
    }
    out
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn accumulate_bias_grad(dout: &[f64], db: &mut [f64]) {
    for row in dout.chunks_exact(db.len()) {
        for (g, d) in db.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// 3x3 convolution with zero padding; `weight` is `(9 * c_in) x c_out`
/// indexed by `(ky * 3 + kx) * c_in + ci`. Returns output and im2col cache.
pub fn conv3x3(input: &Act, weight: &[f64], bias: &[f64]) -> (Act, Vec<f64>) {
    let c_out = bias.len();
    let k = 9 * input.c;
    debug_assert_eq!(weight.len(), k * c_out);
    let col = im2col(input);
    let mut out = Act::zeros(input.h, input.w, c_out);
    gemm(input.pixels(), k, c_out, &col, false, weight, false, 0.0, &mut out.data);
    add_bias(&mut out.data, bias);
    (out, col)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv3x3_backward(
    col: &[f64],
    dout: &Act,
    weight: &[f64],
    c_in: usize,
    dw: &mut [f64],
    db: &mut [f64],
) -> Act {
    let hw = dout.pixels();
    let k = 9 * c_in;
    let c_out = dout.c;
    gemm(k, hw, c_out, col, true, &dout.data, false, 1.0, dw);
    accumulate_bias_grad(&dout.data, db);
    let mut dcol = vec![0.0; hw * k];
    gemm(hw, c_out, k, &dout.data, false, weight, true, 0.0, &mut dcol);
    col2im(&dcol, dout.h, dout.w, c_in)
}

/// Per-pixel linear map (`c_in x c_out` weight).
pub fn conv1x1(input: &Act, weight: &[f64], bias: &[f64]) -> Act {
    let c_out = bias.len();
    let mut out = Act::zeros(input.h, input.w, c_out);
    gemm(input.pixels(), input.c, c_out, &input.data, false, weight, false, 0.0, &mut out.data);
    add_bias(&mut out.data, bias);
    out
}

pub fn conv1x1_backward(input: &Act, dout: &Act, weight: &[f64], dw: &mut [f64], db: &mut [f64]) -> Act {
    let hw = input.pixels();
    gemm(input.c, hw, dout.c, &input.data, true, &dout.data, false, 1.0, dw);
    accumulate_bias_grad(&dout.data, db);
    let mut din = Act::zeros(input.h, input.w, input.c);
    gemm(hw, dout.c, input.c, &dout.data, false, weight, true, 0.0, &mut din.data);
    din
}

/// 2x2 average pooling.
pub fn avg_pool(input: &Act) -> Act {
    let (h, w, c) = (input.h / 2, input.w / 2, input.c);
    let mut out = Act::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let dst = (y * w + x) * c;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = ((2 * y + dy) * input.w + 2 * x + dx) * c;
                for k in 0..c {
                    out.data[dst + k] += 0.25 * input.data[src + k];
                }
            }
        }
    }
    out
}

pub fn avg_pool_backward(dout: &Act) -> Act {
    let (h, w, c) = (dout.h * 2, dout.w * 2, dout.c);
    let mut din = Act::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let src = ((y / 2) * dout.w + x / 2) * c;
            let dst = (y * w + x) * c;
            for k in 0..c {
                din.data[dst + k] = 0.25 * dout.data[src + k];
            }
        }
    }
    din
}

/// Transposed convolution with a 2x2 kernel and stride 2. `weight` holds four
/// `c_in x c_out` blocks, one per output offset `dy * 2 + dx`.
pub fn deconv2x2(input: &Act, weight: &[f64], bias: &[f64]) -> Act {
    let c_out = bias.len();
    let block = input.c * c_out;
    let hw = input.pixels();
    let mut out = Act::zeros(2 * input.h, 2 * input.w, c_out);
    let mut tmp = vec![0.0; hw * c_out];
    for off in 0..4 {
        let (dy, dx) = (off / 2, off % 2);
        gemm(hw, input.c, c_out, &input.data, false, &weight[off * block..(off + 1) * block], false, 0.0, &mut tmp);
        for y in 0..input.h {
            for x in 0..input.w {
                let src = (y * input.w + x) * c_out;
                let dst = ((2 * y + dy) * out.w + 2 * x + dx) * c_out;
                for k in 0..c_out {
                    out.data[dst + k] = tmp[src + k] + bias[k];
                }
            }
        }
    }
    out
}

pub fn deconv2x2_backward(input: &Act, dout: &Act, weight: &[f64], dw: &mut [f64], db: &mut [f64]) -> Act {
    let c_out = dout.c;
    let block = input.c * c_out;
    let hw = input.pixels();
    let mut din = Act::zeros(input.h, input.w, input.c);
    let mut gathered = vec![0.0; hw * c_out];
    accumulate_bias_grad(&dout.data, db);
    for off in 0..4 {
        let (dy, dx) = (off / 2, off % 2);
        for y in 0..input.h {
            for x in 0..input.w {
                let src = ((2 * y + dy) * dout.w + 2 * x + dx) * c_out;
                let dst = (y * input.w + x) * c_out;
                gathered[dst..dst + c_out].copy_from_slice(&dout.data[src..src + c_out]);
            }
        }
        gemm(input.c, hw, c_out, &input.data, true, &gathered, false, 1.0, &mut dw[off * block..(off + 1) * block]);
        gemm(hw, c_out, input.c, &gathered, false, &weight[off * block..(off + 1) * block], true, 1.0, &mut din.data);
    }
    din
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// SiLU `x * sigmoid(x)`; smooth, so finite differences stay accurate.
pub fn silu(pre: &Act) -> Act {
    Act {
        data: pre.data.iter().map(|&x| x * sigmoid(x)).collect(),
        ..*pre
    }
}

pub fn silu_backward(pre: &Act, dout: &Act) -> Act {
    Act {
        data: pre
            .data
            .iter()
            .zip(&dout.data)
            .map(|(&x, &g)| {
                let s = sigmoid(x);
                g * s * (1.0 + x * (1.0 - s))
            })
            .collect(),
        ..*pre
    }
}

/// Channel concatenation `[a, b]`.
pub fn concat(a: &Act, b: &Act) -> Act {
    let c = a.c + b.c;
    let mut out = Act::zeros(a.h, a.w, c);
    for p in 0..a.pixels() {
        out.data[p * c..p * c + a.c].copy_from_slice(&a.data[p * a.c..(p + 1) * a.c]);
        out.data[p * c + a.c..(p + 1) * c].copy_from_slice(&b.data[p * b.c..(p + 1) * b.c]);
    }
    out
}

pub fn split(d: &Act, ca: usize) -> (Act, Act) {
    let cb = d.c - ca;
    let mut a = Act::zeros(d.h, d.w, ca);
    let mut b = Act::zeros(d.h, d.w, cb);
    for p in 0..d.pixels() {
        a.data[p * ca..(p + 1) * ca].copy_from_slice(&d.data[p * d.c..p * d.c + ca]);
        b.data[p * cb..(p + 1) * cb].copy_from_slice(&d.data[p * d.c + ca..(p + 1) * d.c]);
    }
    (a, b)
}

/// Pre-normalization vectors shorter than this map to `e_1`.
pub const NORM_GUARD: f64 = 1e-12;

/// Per-pixel L2 normalization. Returns the unit vectors and the norms.
pub fn normalize(v: &Act) -> (Act, Vec<f64>) {
    let mut out = v.clone();
    let mut norms = Vec::with_capacity(v.pixels());
    for px in out.data.chunks_exact_mut(v.c) {
        let n = px.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < NORM_GUARD {
            px.fill(0.0);
            px[0] = 1.0;
        } else {
            px.iter_mut().for_each(|x| *x /= n);
        }
        norms.push(n);
    }
    (out, norms)
}

/// `dv = (g - f (f . g)) / |v|`, zero where the guard fired.
pub fn normalize_backward(f: &Act, norms: &[f64], df: &Act) -> Act {
    let c = f.c;
    let mut dv = Act::zeros(f.h, f.w, c);
    for (p, &n) in norms.iter().enumerate() {
        if n < NORM_GUARD {
            continue;
        }
        let fp = &f.data[p * c..(p + 1) * c];
        let gp = &df.data[p * c..(p + 1) * c];
        let dot: f64 = fp.iter().zip(gp).map(|(a, b)| a * b).sum();
        for k in 0..c {
            dv.data[p * c + k] = (gp[k] - fp[k] * dot) / n;
        }
    }
    dv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize, phase: f64) -> Act {
        Act {
            h,
            w,
            c,
            data: (0..h * w * c).map(|i| (i as f64 * 0.731 + phase).sin()).collect(),
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv3x3_matches_direct_sum() {
        let input = ramp(5, 4, 2, 0.1);
        let c_out = 3;
        let weight: Vec<f64> = (0..18 * c_out).map(|i| (i as f64 * 0.3).cos()).collect();
        let bias = [0.1, -0.2, 0.3];
        let (out, _) = conv3x3(&input, &weight, &bias);
        for y in 0..5 {
            for x in 0..4 {
                for co in 0..c_out {
                    let mut acc = bias[co];
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y as i32 + ky - 1, x as i32 + kx - 1);
                            if sy < 0 || sy >= 5 || sx < 0 || sx >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                let wi = ((ky * 3 + kx) as usize * 2 + ci) * c_out + co;
                                acc += weight[wi] * input.data[(sy as usize * 4 + sx as usize) * 2 + ci];
                            }
                        }
                    }
                    assert!((out.data[(y * 4 + x) * c_out + co] - acc).abs() < 1e-12);
                }
            }
        }
    }

    // <dout, L(x)> = <L^T(dout), x> for the linear parts of each layer
    #[test]
    fn backward_kernels_are_adjoint() {
        let x = ramp(4, 6, 3, 0.2);
        let g = ramp(4, 6, 2, 1.3);
        let weight: Vec<f64> = (0..27 * 2).map(|i| (i as f64 * 0.17).sin()).collect();
        let (y, col) = conv3x3(&x, &weight, &[0.0, 0.0]);
        let mut dw = vec![0.0; weight.len()];
        let mut db = vec![0.0; 2];
        let dx = conv3x3_backward(&col, &g, &weight, 3, &mut dw, &mut db);
        assert!((dot(&g.data, &y.data) - dot(&dx.data, &x.data)).abs() < 1e-10);

        let gp = ramp(2, 3, 3, 0.5);
        let pooled = avg_pool(&x);
        assert!((dot(&gp.data, &pooled.data) - dot(&avg_pool_backward(&gp).data, &x.data)).abs() < 1e-12);

        let wd: Vec<f64> = (0..4 * 3 * 2).map(|i| (i as f64 * 0.23).cos()).collect();
        let up = deconv2x2(&x, &wd, &[0.0, 0.0]);
        let gu = ramp(8, 12, 2, 0.9);
        let mut dwd = vec![0.0; wd.len()];
        let mut dbd = vec![0.0; 2];
        let dxd = deconv2x2_backward(&x, &gu, &wd, &mut dwd, &mut dbd);
        assert!((dot(&gu.data, &up.data) - dot(&dxd.data, &x.data)).abs() < 1e-10);
        // weight gradient of a linear map: <g, L_w(x)> = <dW, w>
        assert!((dot(&gu.data, &up.data) - dot(&dwd, &wd)).abs() < 1e-10);
    }

    #[test]
    fn normalization_guard() {
        let v = Act::zeros(1, 2, 3);
        let (f, norms) = normalize(&v);
        assert_eq!(f.data, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let dv = normalize_backward(&f, &norms, &ramp(1, 2, 3, 0.0));
        assert!(dv.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = ramp(3, 2, 2, 0.0);
        let b = ramp(3, 2, 3, 1.0);
        let (a2, b2) = split(&concat(&a, &b), 2);
        assert_eq!((a2, b2), (a, b));
    }
}
