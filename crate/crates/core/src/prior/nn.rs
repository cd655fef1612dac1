//! Minimal f32 layers with hand-written backward passes.
//!
//! Activations use channel-major `[C, B, H, W]` layout so a convolution is a
//! single `[Cout, Cin·k²] x [Cin·k², B·H·W]` product and channel concatenation
//! is a plain append.

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn like(&self) -> Self {
        Act::zeros(self.c, self.n, self.h, self.w)
    }

    /// Elements per channel (`B·H·W`).
    pub fn plane(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn concat(a: &Act, b: &Act) -> Act {
        debug_assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Act {
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Splits channel-wise into the first `c` channels and the rest.
    pub fn split(self, c: usize) -> (Act, Act) {
        let at = c * self.plane();
        let mut head = self.data;
        let tail = head.split_off(at);
        (
            Act {
                c,
                n: self.n,
                h: self.h,
                w: self.w,
                data: head,
            },
            Act {
                c: self.c - c,
                n: self.n,
                h: self.h,
                w: self.w,
                data: tail,
            },
        )
    }

    pub fn with_data(&self, data: Vec<f32>) -> Act {
        debug_assert_eq!(data.len(), self.data.len());
        Act {
            c: self.c,
            n: self.n,
            h: self.h,
            w: self.w,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Act) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn of<'a>(&self, v: &'a [f32]) -> &'a [f32] {
        &v[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn of_mut<'a>(&self, v: &'a mut [f32]) -> &'a mut [f32] {
        &mut v[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

/// Flat parameter storage; tensors are kept in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub values: Vec<f32>,
    pub specs: Vec<TensorSpec>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> f32) -> Slot {
        let len: usize = shape.iter().product();
        let slot = Slot {
            offset: self.values.len(),
            len,
        };
        self.values.extend((0..len).map(|_| init()));
        self.specs.push(TensorSpec {
            name: name.into(),
            shape: shape.to_vec(),
            slot,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Act) -> Act {
    x.with_data(x.data.iter().map(|&v| v * sigmoid(v)).collect())
}

/// `grad ⊙ silu'(x)`.
pub fn silu_backward(x: &Act, grad: &Act) -> Act {
    x.with_data(
        x.data
            .iter()
            .zip(&grad.data)
            .map(|(&v, &g)| {
                let s = sigmoid(v);
                g * s * (1.0 + v * (1.0 - s))
            })
            .collect(),
    )
}

pub fn avg_pool2(x: &Act) -> Act {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.n, h2, w2);
    for cb in 0..x.c * x.n {
        let src = &x.data[cb * x.h * x.w..(cb + 1) * x.h * x.w];
        let dst = &mut out.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(grad: &Act, h: usize, w: usize) -> Act {
    let mut out = Act::zeros(grad.c, grad.n, h, w);
    let (h2, w2) = (grad.h, grad.w);
    for cb in 0..grad.c * grad.n {
        let src = &grad.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        let dst = &mut out.data[cb * h * w..(cb + 1) * h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                let g = 0.25 * src[y * w2 + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    out
}

pub fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.n, h, w);
    for cb in 0..x.c * x.n {
        let src = &x.data[cb * x.h * x.w..(cb + 1) * x.h * x.w];
        let dst = &mut out.data[cb * h * w..(cb + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Act) -> Act {
    let (h2, w2) = (grad.h / 2, grad.w / 2);
    let mut out = Act::zeros(grad.c, grad.n, h2, w2);
    for cb in 0..grad.c * grad.n {
        let src = &grad.data[cb * grad.h * grad.w..(cb + 1) * grad.h * grad.w];
        let dst = &mut out.data[cb * h2 * w2..(cb + 1) * h2 * w2];
        for y in 0..grad.h {
            for xx in 0..grad.w {
                dst[(y / 2) * w2 + xx / 2] += src[y * grad.w + xx];
            }
        }
    }
    out
}

/// `C[m×n] = op(A)[m×k] · op(B)[k×n] + beta · C` with explicit strides (C has column stride 1).
#[allow(clippy::too_many_arguments)]
#[inline]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    assert!(m > 0 && k > 0 && n > 0);
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: every element addressed through the strides is in bounds per the checks above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Square convolution with stride 1 and "same" zero padding (k = 1 or 3).
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: Slot,
    pub bias: Slot,
}

/// Valid destination column range and source offset for horizontal tap `kx`.
#[inline]
fn tap_range(kx: usize, w: usize) -> (usize, usize, usize) {
    let x0 = if kx == 0 { 1 } else { 0 };
    let x1 = if kx == 2 { w - 1 } else { w };
    (x0, x1, x0 + kx - 1)
}

thread_local! {
    static COL_SCRATCH: std::cell::RefCell<Vec<f32>> = const { std::cell::RefCell::new(Vec::new()) };
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, init: &mut impl FnMut(usize) -> f32, gain: f32) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(format!("{name}.weight"), &[cout, cin, k, k], || gain * init(fan_in));
        let bias = store.add(format!("{name}.bias"), &[cout], || 0.0);
        Conv {
            cin,
            cout,
            k,
            weight,
            bias,
        }
    }

    /// Column matrix `[cin·9, H·W]` of sample `b`.
    fn im2col(&self, x: &Act, b: usize, col: &mut [f32]) {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        for ci in 0..self.cin {
            let src = &x.data[(ci * x.n + b) * hw..(ci * x.n + b + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = (ci * 9 + ky * 3 + kx) * hw;
                    let dst = &mut col[row..row + hw];
                    let (x0, x1, s0) = tap_range(kx, w);
                    for (y, line) in dst.chunks_mut(w).enumerate() {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let sy = sy as usize;
                        line[..x0].fill(0.0);
                        line[x0..x1].copy_from_slice(&src[sy * w + s0..sy * w + s0 + (x1 - x0)]);
                        line[x1..].fill(0.0);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dx: &mut Act, b: usize) {
        let (h, w) = (dx.h, dx.w);
        let hw = h * w;
        let n = dx.n;
        for ci in 0..self.cin {
            let dst = &mut dx.data[(ci * n + b) * hw..(ci * n + b + 1) * hw];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let row = (ci * 9 + ky * 3 + kx) * hw;
                    let src = &col[row..row + hw];
                    let (x0, x1, s0) = tap_range(kx, w);
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let sy = sy as usize;
                        for (d, s) in dst[sy * w + s0..sy * w + s0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, p: &[f32], x: &Act) -> Act {
        debug_assert_eq!(x.c, self.cin);
        let plane = x.plane();
        let hw = x.h * x.w;
        let mut out = Act::zeros(self.cout, x.n, x.h, x.w);
        let kk = self.cin * self.k * self.k;
        let wgt = self.weight.of(p);
        if self.k == 1 {
            for b in 0..x.n {
                gemm(self.cout, kk, hw, wgt, kk, 1, &x.data[b * hw..], plane, 1, 0.0, &mut out.data[b * hw..], plane);
            }
        } else {
            COL_SCRATCH.with(|cell| {
                let mut col = cell.borrow_mut();
                if col.len() < kk * hw {
                    col.resize(kk * hw, 0.0);
                }
                let col = &mut col[..kk * hw];
                for b in 0..x.n {
                    self.im2col(x, b, col);
                    gemm(self.cout, kk, hw, wgt, kk, 1, col, hw, 1, 0.0, &mut out.data[b * hw..], plane);
                }
            });
        }
        let bias = self.bias.of(p);
        for (co, chunk) in out.data.chunks_mut(plane).enumerate() {
            let b = bias[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        out
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward(&self, p: &[f32], g: &mut [f32], x: &Act, grad: &Act) -> Act {
        let plane = x.plane();
        let hw = x.h * x.w;
        let kk = self.cin * self.k * self.k;
        {
            let db = self.bias.of_mut(g);
            for (co, chunk) in grad.data.chunks(plane).enumerate() {
                db[co] += chunk.iter().sum::<f32>();
            }
        }
        let wgt = self.weight.of(p);
        let mut dx = Act::zeros(self.cin, x.n, x.h, x.w);
        let mut col = vec![0f32; if self.k == 1 { 0 } else { kk * hw }];
        let mut dcol = vec![0f32; if self.k == 1 { 0 } else { kk * hw }];
        for b in 0..x.n {
            let gb = &grad.data[b * hw..];
            if self.k == 1 {
                // dW[cout×cin] += grad_b[cout×hw] · x_bᵀ[hw×cin]
                gemm(self.cout, hw, kk, gb, plane, 1, &x.data[b * hw..], 1, plane, 1.0, self.weight.of_mut(g), kk);
                // dx_b[cin×hw] = Wᵀ[cin×cout] · grad_b[cout×hw]
                gemm(kk, self.cout, hw, wgt, 1, kk, gb, plane, 1, 0.0, &mut dx.data[b * hw..], plane);
            } else {
                self.im2col(x, b, &mut col);
                gemm(self.cout, hw, kk, gb, plane, 1, &col, 1, hw, 1.0, self.weight.of_mut(g), kk);
                gemm(kk, self.cout, hw, wgt, 1, kk, gb, plane, 1, 0.0, &mut dcol, hw);
                self.col2im(&dcol, &mut dx, b);
            }
        }
        dx
    }
}

/// Dense layer on row-major `[B, nin]` inputs.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    pub weight: Slot,
    pub bias: Slot,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, nin: usize, nout: usize, init: &mut impl FnMut(usize) -> f32, gain: f32) -> Self {
        let weight = store.add(format!("{name}.weight"), &[nout, nin], || gain * init(nin));
        let bias = store.add(format!("{name}.bias"), &[nout], || 0.0);
        Linear {
            nin,
            nout,
            weight,
            bias,
        }
    }

    pub fn forward(&self, p: &[f32], x: &[f32], batch: usize) -> Vec<f32> {
        let w = self.weight.of(p);
        let b = self.bias.of(p);
        let mut out = vec![0f32; batch * self.nout];
        for n in 0..batch {
            let xi = &x[n * self.nin..(n + 1) * self.nin];
            for o in 0..self.nout {
                let row = &w[o * self.nin..(o + 1) * self.nin];
                out[n * self.nout + o] = b[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        out
    }

    pub fn backward(&self, p: &[f32], g: &mut [f32], x: &[f32], grad: &[f32], batch: usize) -> Vec<f32> {
        let mut dx = vec![0f32; batch * self.nin];
        for n in 0..batch {
            let xi = &x[n * self.nin..(n + 1) * self.nin];
            for o in 0..self.nout {
                let go = grad[n * self.nout + o];
                if go == 0.0 {
                    continue;
                }
                self.bias.of_mut(g)[o] += go;
                let wrow = &self.weight.of(p)[o * self.nin..(o + 1) * self.nin];
                for i in 0..self.nin {
                    dx[n * self.nin + i] += go * wrow[i];
                }
                let grow = &mut self.weight.of_mut(g)[o * self.nin..(o + 1) * self.nin];
                for i in 0..self.nin {
                    grow[i] += go * xi[i];
                }
            }
        }
        dx
    }
}

pub fn silu_vec(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_vec_backward(x: &[f32], grad: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(grad)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

/// Sinusoidal embedding of (possibly fractional) step positions.
pub fn timestep_embedding(steps: &[f32], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0f32; steps.len() * dim];
    for (n, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f32).ln() * k as f32 / half as f32).exp();
            out[n * dim + k] = (t * freq).sin();
            out[n * dim + half + k] = (t * freq).cos();
        }
    }
    out
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub clip: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 1.0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32]) {
        self.step += 1;
        let norm = grads.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt() as f32;
        let scale = if norm > self.clip { self.clip / norm } else { 1.0 };
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(c: usize, n: usize, h: usize, w: usize, f: impl Fn(usize) -> f32) -> Act {
        let mut a = Act::zeros(c, n, h, w);
        for (i, v) in a.data.iter_mut().enumerate() {
            *v = f(i);
        }
        a
    }

    /// Direct 3x3 same-padded convolution used as a reference.
    fn conv_ref(conv: &Conv, p: &[f32], x: &Act) -> Act {
        let mut out = Act::zeros(conv.cout, x.n, x.h, x.w);
        let w = conv.weight.of(p);
        let b = conv.bias.of(p);
        let r = conv.k as isize / 2;
        for co in 0..conv.cout {
            for n in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let mut s = b[co];
                        for ci in 0..conv.cin {
                            for ky in 0..conv.k {
                                for kx in 0..conv.k {
                                    let sy = y as isize + ky as isize - r;
                                    let sx = xx as isize + kx as isize - r;
                                    if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                        continue;
                                    }
                                    let wi = ((co * conv.cin + ci) * conv.k + ky) * conv.k + kx;
                                    let xi = ((ci * x.n + n) * x.h + sy as usize) * x.w + sx as usize;
                                    s += w[wi] * x.data[xi];
                                }
                            }
                        }
                        out.data[((co * x.n + n) * x.h + y) * x.w + xx] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(i: usize) -> f32 {
        ((i * 7919 % 1013) as f32 / 1013.0) - 0.5
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        for k in [1, 3] {
            let mut store = ParamStore::default();
            let mut counter = 0usize;
            let mut init = |_fan: usize| {
                counter += 1;
                pseudo(counter)
            };
            let conv = Conv::new(&mut store, "c", 3, 4, k, &mut init, 1.0);
            store.values[conv.bias.offset] = 0.3;
            let x = act(3, 2, 5, 6, pseudo);
            let got = conv.forward(&store.values, &x);
            let want = conv_ref(&conv, &store.values, &x);
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x: its input gradient must satisfy <dx, x> = <conv(x) - b, g>
        let mut store = ParamStore::default();
        let mut c = 0usize;
        let mut init = |_f: usize| {
            c += 1;
            pseudo(c + 17)
        };
        let conv = Conv::new(&mut store, "c", 2, 3, 3, &mut init, 1.0);
        let x = act(2, 2, 4, 5, |i| pseudo(i + 3));
        let g = act(3, 2, 4, 5, |i| pseudo(i + 101));
        let y = conv.forward(&store.values, &x);
        let mut grads = vec![0f32; store.len()];
        let dx = conv.backward(&store.values, &mut grads, &x, &g);
        let lhs: f32 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
        // weight gradient: <dW, W> equals the same bilinear form
        let dw = conv.weight.of(&grads);
        let w = conv.weight.of(&store.values);
        let lw: f32 = dw.iter().zip(w).map(|(a, b)| a * b).sum();
        assert!((lw - rhs).abs() < 1e-4);
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let x = act(2, 1, 4, 6, pseudo);
        let g = act(2, 1, 2, 3, |i| pseudo(i + 9));
        let p = avg_pool2(&x);
        let lhs: f32 = p.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let dx = avg_pool2_backward(&g, 4, 6);
        let rhs: f32 = dx.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);

        let u = upsample2(&g);
        let gu = act(2, 1, 4, 6, |i| pseudo(i + 33));
        let lhs: f32 = u.data.iter().zip(&gu.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = upsample2_backward(&gu).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }

    #[test]
    fn concat_split_inverse() {
        let a = act(2, 2, 3, 3, pseudo);
        let b = act(3, 2, 3, 3, |i| pseudo(i + 5));
        let (x, y) = Act::concat(&a, &b).split(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }
}
