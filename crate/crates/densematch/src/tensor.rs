//! Dense n-dimensional arrays with reverse-mode automatic differentiation.
//!
//! The op set is closed over what the matching model needs: matmul, softmax,
//! layer norm, 2d convolution, bilinear resize/sample, and pointwise glue.
//! Every operation is recorded on a [`Tape`]; [`Tape::backward`] replays the
//! records in reverse order and accumulates gradients into a [`GradStore`].
//!
//! All computation is f64. Finite-difference gradient checking is only
//! meaningful in double precision, and at the scales this crate targets the
//! speed difference against f32 does not matter.

use crate::error::{Error, Result};

/// A plain host array: shape plus contiguous row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "array shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Array {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value {
    id: usize,
}

type BackFn = Box<dyn Fn(&Tape, &[f64], &mut GradStore)>;

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    back: Option<BackFn>,
}

/// Per-node gradient slots for one backward pass.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    fn accumulate(&mut self, id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    pub fn get(&self, v: Value) -> Option<&[f64]> {
        self.grads[v.id].as_deref()
    }
}

/// Eager operation recorder. One forward/backward pass owns one tape.
pub struct Tape {
    nodes: Vec<Node>,
    /// When false, backward closures are not recorded (inference mode).
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite value {v} at index {i} produced by {op}"
            )));
        }
    }
    Ok(())
}

/// f64 gemm: c[m,n] (+)= a[m,k] * b[k,n], row-major with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
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

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// Tape that skips recording backward closures.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    fn push(&mut self, op: &'static str, shape: Vec<usize>, data: Vec<f64>, back: Option<BackFn>) -> Result<Value> {
        check_finite(op, &data)?;
        let back = if self.record { back } else { None };
        self.nodes.push(Node { shape, data, back });
        Ok(Value {
            id: self.nodes.len() - 1,
        })
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.id].data
    }

    pub fn array(&self, v: Value) -> Array {
        Array {
            shape: self.nodes[v.id].shape.clone(),
            data: self.nodes[v.id].data.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf node (input, constant, or parameter).
    pub fn input(&mut self, a: Array) -> Result<Value> {
        self.push("input", a.shape, a.data, None)
    }

    pub fn input_from(&mut self, shape: &[usize], data: &[f64]) -> Result<Value> {
        self.input(Array::new(shape.to_vec(), data.to_vec())?)
    }

    pub fn scalar(&mut self, x: f64) -> Result<Value> {
        self.input(Array::new(vec![1], vec![x])?)
    }

    // ---- pointwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "add",
            shape,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, len, |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                gs.accumulate(b.id, len, |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            })),
        )
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "sub",
            shape,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, len, |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                gs.accumulate(b.id, len, |s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            })),
        )
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "mul",
            shape,
            data,
            Some(Box::new(move |t, g, gs| {
                gs.accumulate(a.id, len, |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(t.data(b)) {
                        *d += x * y;
                    }
                });
                gs.accumulate(b.id, len, |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(t.data(a)) {
                        *d += x * y;
                    }
                });
            })),
        )
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "scale",
            shape,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, len, |s| {
                    s.iter_mut().zip(g).for_each(|(d, x)| *d += x * c)
                });
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "add_scalar",
            shape,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, len, |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            })),
        )
    }

    /// Elementwise square root. The caller guarantees nonnegative input
    /// (typically via an epsilon shift).
    pub fn sqrt(&mut self, a: Value) -> Result<Value> {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "sqrt",
            shape,
            data,
            Some(Box::new(move |t, g, gs| {
                let out = t.data_of_output(a, "sqrt");
                gs.accumulate(a.id, len, |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(out) {
                        *d += x * 0.5 / y.max(1e-300);
                    }
                });
            })),
        )
    }

    // The sqrt backward needs its own output; recompute from the input to
    // avoid capturing the output id before it exists.
    fn data_of_output(&self, input: Value, op: &'static str) -> Vec<f64> {
        match op {
            "sqrt" => self.data(input).iter().map(|x| x.sqrt()).collect(),
            _ => unreachable!(),
        }
    }

    /// x * sigmoid(x); smooth everywhere.
    pub fn silu(&mut self, a: Value) -> Result<Value> {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "silu",
            shape,
            data,
            Some(Box::new(move |t, g, gs| {
                gs.accumulate(a.id, len, |s| {
                    for ((d, gx), &x) in s.iter_mut().zip(g).zip(t.data(a)) {
                        let sig = 1.0 / (1.0 + (-x).exp());
                        *d += gx * (sig * (1.0 + x * (1.0 - sig)));
                    }
                });
            })),
        )
    }

    /// elu(x) + 1: strictly positive, C1-smooth kernel feature map.
    pub fn elu_plus_one(&mut self, a: Value) -> Result<Value> {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .map(|&x| if x > 0.0 { x + 1.0 } else { x.exp() })
            .collect();
        let shape = self.shape(a).to_vec();
        let len = data.len();
        self.push(
            "elu_plus_one",
            shape,
            data,
            Some(Box::new(move |t, g, gs| {
                gs.accumulate(a.id, len, |s| {
                    for ((d, gx), &x) in s.iter_mut().zip(g).zip(t.data(a)) {
                        *d += gx * if x > 0.0 { 1.0 } else { x.exp() };
                    }
                });
            })),
        )
    }

    // ---- shape --------------------------------------------------------

    pub fn reshape(&mut self, a: Value, shape: Vec<usize>) -> Result<Value> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::dim("reshape", self.shape(a), &shape));
        }
        let data = self.data(a).to_vec();
        let len = data.len();
        self.push(
            "reshape",
            shape,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, len, |s| s.iter_mut().zip(g).for_each(|(d, x)| *d += x));
            })),
        )
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        let sh = self.shape(a);
        if sh.len() != 2 {
            return Err(Error::dim("transpose", sh, &[]));
        }
        let (r, c) = (sh[0], sh[1]);
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(
            "transpose",
            vec![c, r],
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, r * c, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            })),
        )
    }

    /// Permute the axes of a 4d array: output axis `a` is input axis `perm[a]`.
    pub fn permute4(&mut self, x: Value, perm: [usize; 4]) -> Result<Value> {
        let sh = self.shape(x);
        if sh.len() != 4 {
            return Err(Error::dim("permute4", sh, &[]));
        }
        let ish = [sh[0], sh[1], sh[2], sh[3]];
        let osh = [ish[perm[0]], ish[perm[1]], ish[perm[2]], ish[perm[3]]];
        let istr = [ish[1] * ish[2] * ish[3], ish[2] * ish[3], ish[3], 1];
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        let mut idx = 0;
        for o0 in 0..osh[0] {
            for o1 in 0..osh[1] {
                for o2 in 0..osh[2] {
                    let base =
                        o0 * istr[perm[0]] + o1 * istr[perm[1]] + o2 * istr[perm[2]];
                    let s3 = istr[perm[3]];
                    for o3 in 0..osh[3] {
                        data[idx] = src[base + o3 * s3];
                        idx += 1;
                    }
                }
            }
        }
        let len = data.len();
        self.push(
            "permute4",
            osh.to_vec(),
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, len, |s| {
                    let mut idx = 0;
                    for o0 in 0..osh[0] {
                        for o1 in 0..osh[1] {
                            for o2 in 0..osh[2] {
                                let base = o0 * istr[perm[0]]
                                    + o1 * istr[perm[1]]
                                    + o2 * istr[perm[2]];
                                let s3 = istr[perm[3]];
                                for o3 in 0..osh[3] {
                                    s[base + o3 * s3] += g[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::dim("concat_cols", sa, sb));
        }
        let (n, ma, mb) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(&da[i * ma..(i + 1) * ma]);
            data.extend_from_slice(&db[i * mb..(i + 1) * mb]);
        }
        self.push(
            "concat_cols",
            vec![n, ma + mb],
            data,
            Some(Box::new(move |_t, g, gs| {
                let m = ma + mb;
                gs.accumulate(a.id, n * ma, |s| {
                    for i in 0..n {
                        for j in 0..ma {
                            s[i * ma + j] += g[i * m + j];
                        }
                    }
                });
                gs.accumulate(b.id, n * mb, |s| {
                    for i in 0..n {
                        for j in 0..mb {
                            s[i * mb + j] += g[i * m + ma + j];
                        }
                    }
                });
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, len: usize) -> Result<Value> {
        let sh = self.shape(a);
        if sh.len() != 2 || start + len > sh[1] {
            return Err(Error::dim("slice_cols", sh, &[start, len]));
        }
        let (n, m) = (sh[0], sh[1]);
        let src = self.data(a);
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&src[i * m + start..i * m + start + len]);
        }
        self.push(
            "slice_cols",
            vec![n, len],
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(a.id, n * m, |s| {
                    for i in 0..n {
                        for j in 0..len {
                            s[i * m + start + j] += g[i * len + j];
                        }
                    }
                });
            })),
        )
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            0.0,
            &mut data,
        );
        self.push(
            "matmul",
            vec![m, n],
            data,
            Some(Box::new(move |t, g, gs| {
                // dA = g . B^T
                gs.accumulate(a.id, m * k, |s| {
                    gemm(m, n, k, g, n as isize, 1, t.data(b), 1, n as isize, 1.0, s);
                });
                // dB = A^T . g
                gs.accumulate(b.id, k * n, |s| {
                    gemm(k, m, n, t.data(a), 1, k as isize, g, n as isize, 1, 1.0, s);
                });
            })),
        )
    }

    /// Broadcast-add a row vector `b` (length m) to every row of `x` (n x m).
    pub fn add_row(&mut self, x: Value, b: Value) -> Result<Value> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::dim("add_row", sx, sb));
        }
        let (n, m) = (sx[0], sx[1]);
        let bv = self.data(b);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % m])
            .collect();
        self.push(
            "add_row",
            vec![n, m],
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, n * m, |s| {
                    s.iter_mut().zip(g).for_each(|(d, v)| *d += v)
                });
                gs.accumulate(b.id, m, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g[i * m + j];
                        }
                    }
                });
            })),
        )
    }

    /// Divide each row of `x` (n x m) by the matching entry of `d` (n x 1).
    pub fn div_cols(&mut self, x: Value, d: Value) -> Result<Value> {
        let (sx, sd) = (self.shape(x), self.shape(d));
        if sx.len() != 2 || sd != [sx[0], 1] {
            return Err(Error::dim("div_cols", sx, sd));
        }
        let (n, m) = (sx[0], sx[1]);
        let dv = self.data(d);
        if dv.iter().any(|&v| v == 0.0) {
            return Err(Error::Numeric("zero normalizer in div_cols".into()));
        }
        let xv = self.data(x);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = xv[i * m + j] / dv[i];
            }
        }
        self.push(
            "div_cols",
            vec![n, m],
            data,
            Some(Box::new(move |t, g, gs| {
                let dv = t.data(d);
                let xv = t.data(x);
                gs.accumulate(x.id, n * m, |s| {
                    for i in 0..n {
                        for j in 0..m {
                            s[i * m + j] += g[i * m + j] / dv[i];
                        }
                    }
                });
                gs.accumulate(d.id, n, |s| {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * xv[i * m + j];
                        }
                        s[i] -= acc / (dv[i] * dv[i]);
                    }
                });
            })),
        )
    }

    // ---- normalization ------------------------------------------------

    /// Temperature softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax_last(&mut self, x: Value, temperature: f64) -> Result<Value> {
        if temperature <= 0.0 {
            return Err(Error::Domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let sh = self.shape(x).to_vec();
        let m = *sh.last().ok_or_else(|| Error::dim("softmax", &sh, &[]))?;
        let rows = self.data(x).len() / m;
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let sl = &src[r * m..(r + 1) * m];
            let mx = sl.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in data[r * m..(r + 1) * m].iter_mut().zip(sl) {
                *o = ((v - mx) / temperature).exp();
                sum += *o;
            }
            for o in &mut data[r * m..(r + 1) * m] {
                *o /= sum;
            }
        }
        let out = data.clone();
        let len = data.len();
        self.push(
            "softmax",
            sh,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, len, |s| {
                    for r in 0..rows {
                        let y = &out[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            s[r * m + j] += y[j] * (gr[j] - dot) / temperature;
                        }
                    }
                });
            })),
        )
    }

    /// Layer normalization over the last axis with learned affine.
    pub fn layer_norm(&mut self, x: Value, scale: Value, bias: Value, eps: f64) -> Result<Value> {
        let sh = self.shape(x).to_vec();
        let m = *sh.last().ok_or_else(|| Error::dim("layer_norm", &sh, &[]))?;
        if self.shape(scale) != [m] || self.shape(bias) != [m] {
            return Err(Error::dim("layer_norm", &sh, self.shape(scale)));
        }
        let rows = self.data(x).len() / m;
        let (xs, sc, bi) = (self.data(x), self.data(scale), self.data(bias));
        let mut data = vec![0.0; xs.len()];
        let mut stats = vec![0.0; rows * 2]; // (mean, inv_std) per row
        for r in 0..rows {
            let sl = &xs[r * m..(r + 1) * m];
            let mean = sl.iter().sum::<f64>() / m as f64;
            let var = sl.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats[r * 2] = mean;
            stats[r * 2 + 1] = inv;
            for j in 0..m {
                data[r * m + j] = (sl[j] - mean) * inv * sc[j] + bi[j];
            }
        }
        let len = data.len();
        self.push(
            "layer_norm",
            sh,
            data,
            Some(Box::new(move |t, g, gs| {
                let xs = t.data(x);
                let sc = t.data(scale);
                gs.accumulate(bias.id, m, |s| {
                    for r in 0..rows {
                        for j in 0..m {
                            s[j] += g[r * m + j];
                        }
                    }
                });
                gs.accumulate(scale.id, m, |s| {
                    for r in 0..rows {
                        let (mean, inv) = (stats[r * 2], stats[r * 2 + 1]);
                        for j in 0..m {
                            s[j] += g[r * m + j] * (xs[r * m + j] - mean) * inv;
                        }
                    }
                });
                gs.accumulate(x.id, len, |s| {
                    for r in 0..rows {
                        let (mean, inv) = (stats[r * 2], stats[r * 2 + 1]);
                        // dxhat, then the two coupled reduction terms
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..m {
                            let xh = (xs[r * m + j] - mean) * inv;
                            let dxh = g[r * m + j] * sc[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        for j in 0..m {
                            let xh = (xs[r * m + j] - mean) * inv;
                            let dxh = g[r * m + j] * sc[j];
                            s[r * m + j] += inv
                                * (dxh - sum_dxh / m as f64 - xh * sum_dxh_xh / m as f64);
                        }
                    }
                });
            })),
        )
    }

    /// Row-wise L2 normalization with a zero-vector guard.
    pub fn l2_normalize_rows(&mut self, x: Value) -> Result<Value> {
        let sh = self.shape(x).to_vec();
        let m = *sh.last().ok_or_else(|| Error::dim("l2_normalize", &sh, &[]))?;
        let rows = self.data(x).len() / m;
        let xs = self.data(x);
        let mut data = vec![0.0; xs.len()];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let sl = &xs[r * m..(r + 1) * m];
            let norm = sl.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm >= 1e-12 {
                for j in 0..m {
                    data[r * m + j] = sl[j] / norm;
                }
            }
        }
        let out = data.clone();
        let len = data.len();
        self.push(
            "l2_normalize",
            sh,
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, len, |s| {
                    for r in 0..rows {
                        if norms[r] < 1e-12 {
                            continue;
                        }
                        let y = &out[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            s[r * m + j] += (gr[j] - y[j] * dot) / norms[r];
                        }
                    }
                });
            })),
        )
    }

    // ---- convolution --------------------------------------------------

    /// Same-padded 2d convolution. x: [h,w,cin], kernel: [kh,kw,cin,cout].
    /// Output spatial extents are ceil(input/stride).
    pub fn conv2d(&mut self, x: Value, kernel: Value, stride: usize) -> Result<Value> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 4 || sx[2] != sk[2] {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        let (h, w, ci) = (sx[0], sx[1], sx[2]);
        let (kh, kw, co) = (sk[0], sk[1], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let xs = self.data(x);
        let ks = self.data(kernel);
        let mut data = vec![0.0; oh * ow * co];
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = (ox * stride + dx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * w + ix as usize) * ci;
                        let koff = (dy * kw + dx) * ci * co;
                        let ooff = (oy * ow + ox) * co;
                        for c_in in 0..ci {
                            let xv = xs[xoff + c_in];
                            let kb = koff + c_in * co;
                            for c_out in 0..co {
                                data[ooff + c_out] += xv * ks[kb + c_out];
                            }
                        }
                    }
                }
            }
        }
        self.push(
            "conv2d",
            vec![oh, ow, co],
            data,
            Some(Box::new(move |t, g, gs| {
                let xs = t.data(x);
                let ks = t.data(kernel);
                gs.accumulate(x.id, h * w * ci, |s| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for dy in 0..kh {
                                let iy = (oy * stride + dy) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox * stride + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xoff = (iy as usize * w + ix as usize) * ci;
                                    let koff = (dy * kw + dx) * ci * co;
                                    let ooff = (oy * ow + ox) * co;
                                    for c_in in 0..ci {
                                        let kb = koff + c_in * co;
                                        let mut acc = 0.0;
                                        for c_out in 0..co {
                                            acc += g[ooff + c_out] * ks[kb + c_out];
                                        }
                                        s[xoff + c_in] += acc;
                                    }
                                }
                            }
                        }
                    }
                });
                gs.accumulate(kernel.id, kh * kw * ci * co, |s| {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for dy in 0..kh {
                                let iy = (oy * stride + dy) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox * stride + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xoff = (iy as usize * w + ix as usize) * ci;
                                    let koff = (dy * kw + dx) * ci * co;
                                    let ooff = (oy * ow + ox) * co;
                                    for c_in in 0..ci {
                                        let xv = xs[xoff + c_in];
                                        let kb = koff + c_in * co;
                                        for c_out in 0..co {
                                            s[kb + c_out] += g[ooff + c_out] * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Same-padded stride-1 convolution of the first two axes of `x`
    /// ([h,w,m]) with a single 2d kernel shared across all m channels.
    pub fn conv2d_shared(&mut self, x: Value, kernel: Value) -> Result<Value> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 2 {
            return Err(Error::dim("conv2d_shared", &sx, &sk));
        }
        let (h, w, m) = (sx[0], sx[1], sx[2]);
        let (kh, kw) = (sk[0], sk[1]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!(
                "conv2d_shared kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let xs = self.data(x);
        let ks = self.data(kernel);
        let mut data = vec![0.0; h * w * m];
        for oy in 0..h {
            for ox in 0..w {
                let ooff = (oy * w + ox) * m;
                for dy in 0..kh {
                    let iy = (oy + dy) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..kw {
                        let ix = (ox + dx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let kv = ks[dy * kw + dx];
                        let xoff = (iy as usize * w + ix as usize) * m;
                        for c in 0..m {
                            data[ooff + c] += kv * xs[xoff + c];
                        }
                    }
                }
            }
        }
        self.push(
            "conv2d_shared",
            vec![h, w, m],
            data,
            Some(Box::new(move |t, g, gs| {
                let xs = t.data(x);
                let ks = t.data(kernel);
                gs.accumulate(x.id, h * w * m, |s| {
                    for oy in 0..h {
                        for ox in 0..w {
                            let ooff = (oy * w + ox) * m;
                            for dy in 0..kh {
                                let iy = (oy + dy) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let kv = ks[dy * kw + dx];
                                    let xoff = (iy as usize * w + ix as usize) * m;
                                    for c in 0..m {
                                        s[xoff + c] += kv * g[ooff + c];
                                    }
                                }
                            }
                        }
                    }
                });
                gs.accumulate(kernel.id, kh * kw, |s| {
                    for oy in 0..h {
                        for ox in 0..w {
                            let ooff = (oy * w + ox) * m;
                            for dy in 0..kh {
                                let iy = (oy + dy) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox + dx) as isize - pw as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xoff = (iy as usize * w + ix as usize) * m;
                                    let mut acc = 0.0;
                                    for c in 0..m {
                                        acc += xs[xoff + c] * g[ooff + c];
                                    }
                                    s[dy * kw + dx] += acc;
                                }
                            }
                        }
                    }
                });
            })),
        )
    }

    // ---- resampling ---------------------------------------------------

    /// Bilinear resize of [h,w,c] to [oh,ow,c], align-corners-false
    /// (pixel centers at (i+0.5)/extent).
    pub fn bilinear_resize(&mut self, x: Value, oh: usize, ow: usize) -> Result<Value> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dim("bilinear_resize", &sx, &[oh, ow]));
        }
        if oh == 0 || ow == 0 {
            return Err(Error::Config("bilinear_resize output extents must be >= 1".into()));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        // (src0, src1, frac) per output coordinate along each axis
        let plan_axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                        .clamp(0.0, (n_in - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n_in - 1);
                    (i0, i1, s - i0 as f64)
                })
                .collect()
        };
        let ys = plan_axis(h, oh);
        let xs_plan = plan_axis(w, ow);
        let src = self.data(x);
        let mut data = vec![0.0; oh * ow * c];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs_plan.iter().enumerate() {
                let o = (oy * ow + ox) * c;
                for ch in 0..c {
                    let v00 = src[(y0 * w + x0) * c + ch];
                    let v01 = src[(y0 * w + x1) * c + ch];
                    let v10 = src[(y1 * w + x0) * c + ch];
                    let v11 = src[(y1 * w + x1) * c + ch];
                    data[o + ch] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
        self.push(
            "bilinear_resize",
            vec![oh, ow, c],
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, h * w * c, |s| {
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs_plan.iter().enumerate() {
                            let o = (oy * ow + ox) * c;
                            for ch in 0..c {
                                let gv = g[o + ch];
                                s[(y0 * w + x0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                                s[(y0 * w + x1) * c + ch] += gv * (1.0 - fy) * fx;
                                s[(y1 * w + x0) * c + ch] += gv * fy * (1.0 - fx);
                                s[(y1 * w + x1) * c + ch] += gv * fy * fx;
                            }
                        }
                    }
                });
            })),
        )
    }

    /// Sample [h,w,c] at continuous (x,y) pixel coordinates. Out-of-range
    /// coordinates are clamped; the returned mask is false for them.
    /// Gradients flow to `x` only; coordinates are treated as constants.
    pub fn bilinear_sample(
        &mut self,
        x: Value,
        coords: &[(f64, f64)],
    ) -> Result<(Value, Vec<bool>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::dim("bilinear_sample", &sx, &[coords.len(), 2]));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let n = coords.len();
        let mut mask = vec![false; n];
        let mut taps: Vec<(usize, usize, usize, usize, f64, f64)> = Vec::with_capacity(n);
        for (i, &(cx, cy)) in coords.iter().enumerate() {
            mask[i] = cx >= 0.0 && cx <= (w - 1) as f64 && cy >= 0.0 && cy <= (h - 1) as f64;
            let sxc = cx.clamp(0.0, (w - 1) as f64);
            let syc = cy.clamp(0.0, (h - 1) as f64);
            let x0 = sxc.floor() as usize;
            let y0 = syc.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            taps.push((x0, x1, y0, y1, sxc - x0 as f64, syc - y0 as f64));
        }
        let src = self.data(x);
        let mut data = vec![0.0; n * c];
        for (i, &(x0, x1, y0, y1, fx, fy)) in taps.iter().enumerate() {
            for ch in 0..c {
                data[i * c + ch] = src[(y0 * w + x0) * c + ch] * (1.0 - fy) * (1.0 - fx)
                    + src[(y0 * w + x1) * c + ch] * (1.0 - fy) * fx
                    + src[(y1 * w + x0) * c + ch] * fy * (1.0 - fx)
                    + src[(y1 * w + x1) * c + ch] * fy * fx;
            }
        }
        let v = self.push(
            "bilinear_sample",
            vec![n, c],
            data,
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, h * w * c, |s| {
                    for (i, &(x0, x1, y0, y1, fx, fy)) in taps.iter().enumerate() {
                        for ch in 0..c {
                            let gv = g[i * c + ch];
                            s[(y0 * w + x0) * c + ch] += gv * (1.0 - fy) * (1.0 - fx);
                            s[(y0 * w + x1) * c + ch] += gv * (1.0 - fy) * fx;
                            s[(y1 * w + x0) * c + ch] += gv * fy * (1.0 - fx);
                            s[(y1 * w + x1) * c + ch] += gv * fy * fx;
                        }
                    }
                });
            })),
        )?;
        Ok((v, mask))
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let s: f64 = self.data(x).iter().sum();
        let len = self.data(x).len();
        self.push(
            "sum_all",
            vec![1],
            vec![s],
            Some(Box::new(move |_t, g, gs| {
                gs.accumulate(x.id, len, |sl| sl.iter_mut().for_each(|d| *d += g[0]));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let n = self.data(x).len();
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode gradient propagation from a scalar loss.
    /// Deterministic: the tape is visited in strict reverse creation order.
    pub fn backward(&self, loss: Value) -> Result<GradStore> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut gs = GradStore::new(self.nodes.len());
        gs.grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(back) = self.nodes[id].back.as_ref() else {
                continue;
            };
            let Some(g) = gs.grads[id].clone() else {
                continue;
            };
            back(self, &g, &mut gs);
        }
        Ok(gs)
    }
}
