//! Reverse-mode automatic differentiation over small dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough context to run the backward pass. Graphs are built per
//! call and dropped afterwards, so there is no shared mutable state and two
//! identical sequences of operations always produce bit-identical values and
//! gradients.
//!
//! Shapes are plain row-major `Vec<usize>`. Image-like tensors are `[C, H, W]`
//! for a single sample; batching is done by running several forwards on the
//! same graph.

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Column `j` of a 2-D tensor.
    pub fn column(&self, j: usize) -> Vec<f64> {
        assert_eq!(self.shape.len(), 2);
        let (rows, cols) = (self.shape[0], self.shape[1]);
        (0..rows).map(|r| self.data[r * cols + j]).collect()
    }

    pub fn mse(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    DivScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<f64>,
    },
    Silu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat0(Var, Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Blur3(Var, [f64; 9]),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An append-only computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// influence the loss or was not marked as requiring gradients.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is [m,k] (or [k,m] when transposed), b is [k,n] (or [n,k]).
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: slice lengths are checked by the callers' shape assertions and
    // the strides above describe dense row-major layouts within those slices.
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

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// 3×3 blur with reflect padding (mirror without repeating the edge).
pub fn blur3(src: &[f64], h: usize, w: usize, kernel: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..3 {
                let sy = reflect(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let sx = reflect(x as isize + kx as isize - 1, w);
                    acc += kernel[ky * 3 + kx] * src[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    let d = &mut dst[y * w..(y + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            d[xx] = src_row[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, out: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx >= 0 && sx < w as isize {
                            out[ci * hw + sy as usize * w + sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected a scalar, got shape {:?}", t.shape);
        t.data[0]
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant tensor of the same length.
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), k.len());
        let v = Tensor::new(
            va.shape.clone(),
            va.data.iter().zip(&k).map(|(x, y)| x * y).collect(),
        );
        let ng = self.ng(a);
        self.push(v, Op::MulConst(a, k), ng)
    }

    /// `a / s` where `s` is a one-element node.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.value(a).map(|x| x / sv);
        let ng = self.ng(a) || self.ng(s);
        self.push(v, Op::DivScalar(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        sgemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (m, n) = (s[0], s[1]);
        let src = &self.value(a).data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`x` is `[C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.value(b).len(), c);
        let mut v = self.value(x).clone();
        let per = v.len() / c;
        let bd = &self.value(b).data;
        for ci in 0..c {
            for e in &mut v.data[ci * per..(ci + 1) * per] {
                *e += bd[ci];
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(v, Op::AddChannelBias(x, b), ng)
    }

    /// Adds `b[d]` to every row of `x` (`x` is `[N, D]`).
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let d = s[1];
        assert_eq!(self.value(b).len(), d);
        let mut v = self.value(x).clone();
        let bd = &self.value(b).data;
        for row in v.data.chunks_mut(d) {
            for (e, bb) in row.iter_mut().zip(bd) {
                *e += bb;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(v, Op::AddRowBias(x, b), ng)
    }

    /// Same-padded, stride-1 convolution. `x: [Cin, H, W]`,
    /// `w: [Cout, Cin, K, K]` (K odd), `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv input channels");
        assert_eq!(ws[3], k);
        assert!(k % 2 == 1);
        let hw = h * wd;
        let cols = im2col(&self.value(x).data, cin, h, wd, k);
        let mut out = vec![0.0; cout * hw];
        sgemm(
            cout,
            cin * k * k,
            hw,
            &self.value(w).data,
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let bd = &self.value(b).data;
        for co in 0..cout {
            for e in &mut out[co * hw..(co + 1) * hw] {
                *e += bd[co];
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        let cols = if ng { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![cout, h, wd], out),
            Op::Conv2d { x, w, b, cols },
            ng,
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let n = s[1];
        let mut v = self.value(a).clone();
        for row in v.data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let n = s[1];
        let mut v = self.value(a).clone();
        for row in v.data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), ng)
    }

    /// L2-normalizes each row of `[N, D]`.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let d = s[1];
        let mut v = self.value(a).clone();
        for row in v.data.chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for e in row.iter_mut() {
                *e /= norm;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::NormalizeRows(a), ng)
    }

    /// 2×2 average pooling of `[C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0);
        let (h2, w2) = (h / 2, w / 2);
        let src = &self.value(a).data;
        let mut out = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    let base = ci * h * w;
                    let s = src[base + 2 * y * w + 2 * x]
                        + src[base + 2 * y * w + 2 * x + 1]
                        + src[base + (2 * y + 1) * w + 2 * x]
                        + src[base + (2 * y + 1) * w + 2 * x + 1];
                    out[ci * h2 * w2 + y * w2 + x] = 0.25 * s;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![c, h2, w2], out), Op::AvgPool2(a), ng)
    }

    /// Nearest-neighbour ×2 upsampling of `[C, H, W]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let s = self.shape(a).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = &self.value(a).data;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[ci * h2 * w2 + y * w2 + x] = src[ci * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![c, h2, w2], out), Op::Upsample2(a), ng)
    }

    /// Concatenation along the leading dimension.
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert_eq!(sa[1..], sb[1..]);
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(shape, data), Op::Concat0(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Maximum element; the gradient flows to the first maximizer.
    pub fn max(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut best = 0;
        for (i, &x) in t.data.iter().enumerate() {
            if x > t.data[best] {
                best = i;
            }
        }
        let v = Tensor::scalar(t.data[best]);
        let ng = self.ng(a);
        self.push(v, Op::Max(a, best), ng)
    }

    /// Rows `ids` of a `[V, D]` table, giving `[ids.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table);
        assert_eq!(s.len(), 2);
        let d = s[1];
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::new(vec![ids.len(), d], out),
            Op::GatherRows(table, ids.to_vec()),
            ng,
        )
    }

    /// Flat elements `idx` of `a`, giving a 1-D tensor.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = &self.value(a).data;
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(vec![idx.len()], out), Op::Pick(a, idx), ng)
    }

    /// Column `j` of a `[N, S]` tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let s = self.shape(a);
        assert_eq!(s.len(), 2);
        let (n, m) = (s[0], s[1]);
        assert!(j < m);
        self.pick(a, (0..n).map(|r| r * m + j).collect())
    }

    /// 3×3 reflect-padded blur of a `[H, W]` map.
    pub fn blur3(&mut self, a: Var, kernel: [f64; 9]) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2);
        let out = blur3(&self.value(a).data, s[0], s[1], &kernel);
        let ng = self.ng(a);
        self.push(Tensor::new(s, out), Op::Blur3(a, kernel), ng)
    }

    /// Mean squared difference between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Runs the backward pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads, shapes };
        }
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if ng(v) {
                            let t = acc(&mut grads, v, g.len());
                            t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        let t = acc(&mut grads, *a, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                    if ng(*b) {
                        let t = acc(&mut grads, *b, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t -= g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        let bv = &val(*b).data;
                        let t = acc(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            t[j] += g[j] * bv[j];
                        }
                    }
                    if ng(*b) {
                        let av = &val(*a).data;
                        let t = acc(&mut grads, *b, g.len());
                        for j in 0..g.len() {
                            t[j] += g[j] * av[j];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if ng(*a) {
                        let t = acc(&mut grads, *a, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += c * g);
                    }
                }
                Op::AddScalar(a) => {
                    if ng(*a) {
                        let t = acc(&mut grads, *a, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                }
                Op::MulConst(a, k) => {
                    if ng(*a) {
                        let t = acc(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            t[j] += g[j] * k[j];
                        }
                    }
                }
                Op::DivScalar(a, s) => {
                    let sv = val(*s).data[0];
                    if ng(*a) {
                        let t = acc(&mut grads, *a, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g / sv);
                    }
                    if ng(*s) {
                        let av = &val(*a).data;
                        let dot: f64 = g.iter().zip(av).map(|(g, a)| g * a).sum();
                        let t = acc(&mut grads, *s, 1);
                        t[0] -= dot / (sv * sv);
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if ng(*a) {
                        let bv = &val(*b).data;
                        let t = acc(&mut grads, *a, m * k);
                        // dA = G · Bᵀ
                        sgemm(m, n, k, &g, false, bv, true, t, true);
                    }
                    if ng(*b) {
                        let av = &val(*a).data;
                        let t = acc(&mut grads, *b, k * n);
                        // dB = Aᵀ · G
                        sgemm(k, m, n, av, true, &g, false, t, true);
                    }
                }
                Op::Transpose(a) => {
                    if ng(*a) {
                        let s = &val(*a).shape;
                        let (m, n) = (s[0], s[1]);
                        let t = acc(&mut grads, *a, m * n);
                        for i in 0..m {
                            for j in 0..n {
                                t[i * n + j] += g[j * m + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if ng(*a) {
                        let t = acc(&mut grads, *a, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                }
                Op::AddChannelBias(x, b) => {
                    if ng(*x) {
                        let t = acc(&mut grads, *x, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                    if ng(*b) {
                        let c = val(*b).len();
                        let per = g.len() / c;
                        let t = acc(&mut grads, *b, c);
                        for ci in 0..c {
                            t[ci] += g[ci * per..(ci + 1) * per].iter().sum::<f64>();
                        }
                    }
                }
                Op::AddRowBias(x, b) => {
                    if ng(*x) {
                        let t = acc(&mut grads, *x, g.len());
                        t.iter_mut().zip(&g).for_each(|(t, g)| *t += g);
                    }
                    if ng(*b) {
                        let d = val(*b).len();
                        let t = acc(&mut grads, *b, d);
                        for row in g.chunks(d) {
                            t.iter_mut().zip(row).for_each(|(t, g)| *t += g);
                        }
                    }
                }
                Op::Conv2d { x, w, b, cols } => {
                    let xs = &val(*x).shape;
                    let ws = &val(*w).shape;
                    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                    let (cout, k) = (ws[0], ws[2]);
                    let hw = h * wd;
                    let kk = cin * k * k;
                    if ng(*b) {
                        let t = acc(&mut grads, *b, cout);
                        for co in 0..cout {
                            t[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                        }
                    }
                    if ng(*w) {
                        let t = acc(&mut grads, *w, cout * kk);
                        // dW = G · colsᵀ
                        sgemm(cout, hw, kk, &g, false, cols, true, t, true);
                    }
                    if ng(*x) {
                        let wv = &val(*w).data;
                        let mut dcols = vec![0.0; kk * hw];
                        // dcols = Wᵀ · G
                        sgemm(kk, cout, hw, wv, true, &g, false, &mut dcols, false);
                        let t = acc(&mut grads, *x, cin * hw);
                        col2im(&dcols, cin, h, wd, k, t);
                    }
                }
                Op::Silu(a) => {
                    if ng(*a) {
                        let av = &val(*a).data;
                        let t = acc(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            let s = sigmoid(av[j]);
                            t[j] += g[j] * s * (1.0 + av[j] * (1.0 - s));
                        }
                    }
                }
                Op::Square(a) => {
                    if ng(*a) {
                        let av = &val(*a).data;
                        let t = acc(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            t[j] += 2.0 * g[j] * av[j];
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    if ng(*a) {
                        let y = &node.value.data;
                        let n = node.value.shape[1];
                        let t = acc(&mut grads, *a, g.len());
                        for r in 0..y.len() / n {
                            let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for j in 0..n {
                                t[r * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if ng(*a) {
                        let y = &node.value.data;
                        let n = node.value.shape[1];
                        let t = acc(&mut grads, *a, g.len());
                        for r in 0..y.len() / n {
                            let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                            for j in 0..n {
                                t[r * n + j] += g[r * n + j] - y[r * n + j].exp() * gs;
                            }
                        }
                    }
                }
                Op::NormalizeRows(a) => {
                    if ng(*a) {
                        let y = &node.value.data;
                        let av = &val(*a).data;
                        let d = node.value.shape[1];
                        let t = acc(&mut grads, *a, g.len());
                        for r in 0..y.len() / d {
                            let ar = &av[r * d..(r + 1) * d];
                            let norm = ar.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                            let yr = &y[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                            for j in 0..d {
                                t[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    }
                }
                Op::AvgPool2(a) => {
                    if ng(*a) {
                        let s = &val(*a).shape;
                        let (c, h, w) = (s[0], s[1], s[2]);
                        let (h2, w2) = (h / 2, w / 2);
                        let t = acc(&mut grads, *a, c * h * w);
                        for ci in 0..c {
                            for y in 0..h {
                                for x in 0..w {
                                    t[ci * h * w + y * w + x] +=
                                        0.25 * g[ci * h2 * w2 + (y / 2) * w2 + x / 2];
                                }
                            }
                        }
                    }
                }
                Op::Upsample2(a) => {
                    if ng(*a) {
                        let s = &val(*a).shape;
                        let (c, h, w) = (s[0], s[1], s[2]);
                        let (h2, w2) = (2 * h, 2 * w);
                        let t = acc(&mut grads, *a, c * h * w);
                        for ci in 0..c {
                            for y in 0..h2 {
                                for x in 0..w2 {
                                    t[ci * h * w + (y / 2) * w + x / 2] +=
                                        g[ci * h2 * w2 + y * w2 + x];
                                }
                            }
                        }
                    }
                }
                Op::Concat0(a, b) => {
                    let la = val(*a).len();
                    if ng(*a) {
                        let t = acc(&mut grads, *a, la);
                        t.iter_mut().zip(&g[..la]).for_each(|(t, g)| *t += g);
                    }
                    if ng(*b) {
                        let t = acc(&mut grads, *b, g.len() - la);
                        t.iter_mut().zip(&g[la..]).for_each(|(t, g)| *t += g);
                    }
                }
                Op::Sum(a) => {
                    if ng(*a) {
                        let len = val(*a).len();
                        let t = acc(&mut grads, *a, len);
                        t.iter_mut().for_each(|t| *t += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if ng(*a) {
                        let len = val(*a).len();
                        let t = acc(&mut grads, *a, len);
                        let s = g[0] / len as f64;
                        t.iter_mut().for_each(|t| *t += s);
                    }
                }
                Op::Max(a, idx) => {
                    if ng(*a) {
                        let len = val(*a).len();
                        let t = acc(&mut grads, *a, len);
                        t[*idx] += g[0];
                    }
                }
                Op::GatherRows(table, ids) => {
                    if ng(*table) {
                        let s = &val(*table).shape;
                        let d = s[1];
                        let t = acc(&mut grads, *table, s[0] * d);
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                t[id * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
                Op::Pick(a, idx) => {
                    if ng(*a) {
                        let len = val(*a).len();
                        let t = acc(&mut grads, *a, len);
                        for (j, &i) in idx.iter().enumerate() {
                            t[i] += g[j];
                        }
                    }
                }
                Op::Blur3(a, kernel) => {
                    if ng(*a) {
                        let s = &val(*a).shape;
                        let (h, w) = (s[0], s[1]);
                        let t = acc(&mut grads, *a, h * w);
                        for y in 0..h {
                            for x in 0..w {
                                let gy = g[y * w + x];
                                for ky in 0..3 {
                                    let sy = reflect(y as isize + ky as isize - 1, h);
                                    for kx in 0..3 {
                                        let sx = reflect(x as isize + kx as isize - 1, w);
                                        t[sy * w + sx] += kernel[ky * 3 + kx] * gy;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            // Keep gradients of leaves (and any node the caller may query).
            grads[i] = Some(g);
        }
        Gradients { grads, shapes }
    }
}
