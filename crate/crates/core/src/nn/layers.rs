//! Forward and backward kernels on channel-first single-sample activations.

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output rows (or columns) whose source index `o * stride + k - pad` lies in `0..len`.
    #[inline]
    fn valid(&self, k: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(self.stride) };
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Unfolds the input into a `[c_in*k*k, oh*ow]` matrix (zeros where padding).
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (k, oh, ow, s) = (self.k, self.oh, self.ow, self.stride);
        let p = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * p];
        for c in 0..self.c_in {
            let inp = &input[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let rows = self.valid(ky, self.h, oh);
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let dst = &mut cols[r * p..(r + 1) * p];
                    let xs = self.valid(kx, self.w, ow);
                    for oy in rows.clone() {
                        let src = &inp[(oy * s + ky - self.pad) * self.w..];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        for ox in xs.clone() {
                            d[ox] = src[ox * s + kx - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of `im2col`: scatters column gradients back onto the input.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (k, oh, ow, s) = (self.k, self.oh, self.ow, self.stride);
        let p = oh * ow;
        let mut out = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                let rows = self.valid(ky, self.h, oh);
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let src = &cols[r * p..(r + 1) * p];
                    let xs = self.valid(kx, self.w, ow);
                    for oy in rows.clone() {
                        let y = oy * s + ky - self.pad;
                        let d = &mut plane[y * self.w..(y + 1) * self.w];
                        let sr = &src[oy * ow..(oy + 1) * ow];
                        for ox in xs.clone() {
                            d[ox * s + kx - self.pad] += sr[ox];
                        }
                    }
                }
            }
        }
        out
    }
}

/// Row-major `c (+)= alpha * op(a) * op(b)` with `op(a)` m x k and `op(b)` k x n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.oh * g.ow;
    let cols = g.im2col(input);
    let mut out = vec![0.0; g.c_out * p];
    for (plane, &b) in out.chunks_exact_mut(p).zip(bias) {
        plane.fill(b);
    }
    gemm(g.c_out, g.patch_len(), p, weight, false, &cols, false, 1.0, &mut out);
    out
}

/// Returns the input gradient; accumulates weight and bias gradients when given.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let p = g.oh * g.ow;
    let kk = g.patch_len();
    if let Some((gw, gb)) = param_grads {
        let cols = g.im2col(input);
        gemm(g.c_out, p, kk, grad_out, false, &cols, true, 1.0, gw);
        for (b, go) in gb.iter_mut().zip(grad_out.chunks_exact(p)) {
            *b += go.iter().sum::<f64>();
        }
    }
    let mut gcols = vec![0.0; kk * p];
    gemm(kk, g.c_out, p, weight, true, grad_out, false, 0.0, &mut gcols);
    g.col2im(&gcols)
}

pub(crate) fn relu_forward(input: &[f64]) -> Vec<f64> {
    input.iter().map(|&v| v.max(0.0)).collect()
}

/// Subgradient at zero is zero.
pub(crate) fn relu_backward(input: &[f64], grad_out: &[f64]) -> Vec<f64> {
    input
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Non-overlapping max pooling. Returns outputs and the flat input index of each
/// winner (first maximum on ties).
pub(crate) fn max_pool_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    size: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(argmax: &[usize], grad_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; input_len];
    for (&i, &d) in argmax.iter().zip(grad_out) {
        g[i] += d;
    }
    g
}

pub(crate) fn avg_pool_forward(input: &[f64], c: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..size {
                    for dx in 0..size {
                        acc += input[ch * h * w + (oy * size + dy) * w + ox * size + dx];
                    }
                }
                out.push(acc * norm);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], c: usize, h: usize, w: usize, size: usize) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    let mut g = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = grad_out[(ch * oh + oy) * ow + ox] * norm;
                for dy in 0..size {
                    for dx in 0..size {
                        g[ch * h * w + (oy * size + dy) * w + ox * size + dx] += d;
                    }
                }
            }
        }
    }
    g
}

pub(crate) fn global_avg_forward(input: &[f64], c: usize, hw: usize) -> Vec<f64> {
    input
        .chunks_exact(hw)
        .take(c)
        .map(|p| p.iter().sum::<f64>() / hw as f64)
        .collect()
}

pub(crate) fn global_avg_backward(grad_out: &[f64], hw: usize) -> Vec<f64> {
    grad_out
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d / hw as f64, hw))
        .collect()
}

pub(crate) fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

pub(crate) fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    param_grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let n_in = input.len();
    let mut grad_in = vec![0.0; n_in];
    for (o, &d) in grad_out.iter().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        for (gi, w) in grad_in.iter_mut().zip(row) {
            *gi += w * d;
        }
    }
    if let Some((gw, gb)) = param_grads {
        for (o, &d) in grad_out.iter().enumerate() {
            gb[o] += d;
            for (gwi, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                *gwi += x * d;
            }
        }
    }
    grad_in
}
