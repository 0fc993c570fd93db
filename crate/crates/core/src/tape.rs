//! Reverse-mode differentiation over an explicit tape of primitive ops.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op records its
//! output value, its input handles and a closure mapping the output
//! gradient to input gradients. [`Tape::backward`] walks the tape in
//! reverse and accumulates gradients into a [`Gradients`] table.
//!
//! Values are immutable once recorded. A tape is confined to one thread.

use std::cell::{Ref, RefCell};

use crate::{Error, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Backward<T> = Box<dyn Fn(&Tensor<T>, &[&Tensor<T>], &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    backward: Option<Backward<T>>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every recorded value that needs one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.record(value, Vec::new(), None, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.record(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn record(
        &self,
        value: Tensor<T>,
        inputs: Vec<Var>,
        backward: Option<Backward<T>>,
        leaf_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = if inputs.is_empty() {
            leaf_grad
        } else {
            inputs.iter().any(|i| nodes[i.0].needs_grad)
        };
        let id = nodes.len();
        nodes.push(Node {
            value,
            inputs,
            backward: if needs_grad { backward } else { None },
            needs_grad,
        });
        Var(id)
    }

    fn push(&self, value: Tensor<T>, inputs: Vec<Var>, backward: Backward<T>) -> Var {
        self.record(value, inputs, Some(backward), false)
    }

    /// Gradients of the one-element value `loss` with respect to everything
    /// on the tape that depends on a leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must be a scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|i| &nodes[i.0].value).collect();
            let in_grads = backward(&g, &inputs, &node.value);
            for (var, ig) in node.inputs.iter().zip(in_grads) {
                let Some(ig) = ig else { continue };
                if !nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot @ None => *slot = Some(ig),
                }
            }
            // keep the gradient of leaves and intermediate values visible
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ---------------------------------------------------------------- linear

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
                return Err(Error::dim(
                    "matmul",
                    format!("{:?} x {:?}", av.shape(), bv.shape()),
                ));
            }
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            (m, k, n, matmul_nn(av.data(), bv.data(), m, k, n))
        };
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |g, x, _| {
                let da = matmul_nt(g.data(), x[1].data(), m, n, k);
                let db = matmul_tn(x[0].data(), g.data(), m, k, n);
                vec![
                    Some(Tensor::new(&[m, k], da).unwrap()),
                    Some(Tensor::new(&[k, n], db).unwrap()),
                ]
            }),
        ))
    }

    /// `a[m,k]^T b[m,n] -> [k,n]` without materialising the transpose.
    pub fn matmul_tn(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, out) = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.rank() != 2 || bv.rank() != 2 || av.rows() != bv.rows() {
                return Err(Error::dim(
                    "matmul_tn",
                    format!("{:?}^T x {:?}", av.shape(), bv.shape()),
                ));
            }
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            (m, k, n, matmul_tn(av.data(), bv.data(), m, k, n))
        };
        let value = Tensor::new(&[k, n], out)?;
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |g, x, _| {
                let da = matmul_nt(x[1].data(), g.data(), m, n, k);
                let db = matmul_nn(x[0].data(), g.data(), m, k, n);
                vec![
                    Some(Tensor::new(&[m, k], da).unwrap()),
                    Some(Tensor::new(&[m, n], db).unwrap()),
                ]
            }),
        ))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = {
            let av = self.value(a);
            if av.rank() != 2 {
                return Err(Error::dim("transpose", format!("{:?}", av.shape())));
            }
            av.transpose()
        };
        Ok(self.push(value, vec![a], Box::new(|g, _, _| vec![Some(g.transpose())])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (value, old) = {
            let av = self.value(a);
            (av.clone().reshape(shape)?, av.shape().to_vec())
        };
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.clone().reshape(&old).unwrap())]),
        ))
    }

    // ------------------------------------------------------------ elementwise

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(T, T) -> T,
        df: fn(T, T, T) -> (T, T),
    ) -> Result<Var> {
        let value = {
            let (av, bv) = (self.value(a), self.value(b));
            if av.shape() != bv.shape() {
                return Err(Error::dim(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape(), data)?
        };
        Ok(self.push(
            value,
            vec![a, b],
            Box::new(move |g, x, _| {
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for ((&gi, &ai), &bi) in g.data().iter().zip(x[0].data()).zip(x[1].data()) {
                    let (da, db) = df(gi, ai, bi);
                    ga.push(da);
                    gb.push(db);
                }
                vec![
                    Some(Tensor::new(g.shape(), ga).unwrap()),
                    Some(Tensor::new(g.shape(), gb).unwrap()),
                ]
            }),
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |g, x, y| (g / y, -g * x / (y * y)))
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T, df: fn(T, T, T) -> T) -> Var {
        let value = self.value(a).map(f);
        self.push(
            value,
            vec![a],
            Box::new(move |g, x, y| {
                let data = g
                    .data()
                    .iter()
                    .zip(x[0].data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| df(gi, xi, yi))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).unwrap())]
            }),
        )
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |g, x, _| if x > T::zero() { g } else { T::zero() },
        )
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |g, x, _| g * (x + x))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.abs(),
            |g, x, _| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn recip(&self, a: Var) -> Var {
        self.unary(a, |x| x.recip(), |g, _, y| -g * y * y)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(a).map(|x| x * c);
        self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * c))]),
        )
    }

    pub fn add_const(&self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(a).map(|x| x + c);
        self.push(value, vec![a], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    /// Stops gradient flow: the result is a constant copy of `a`.
    pub fn detach(&self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.constant(value)
    }

    // ------------------------------------------------------------ broadcasting

    /// Adds a `[n]` bias to every row of a `[m,n]` matrix.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (value, m, n) = {
            let (av, bv) = (self.value(a), self.value(bias));
            if av.rank() != 2 || bv.shape() != [av.cols()] {
                return Err(Error::dim(
                    "add_bias",
                    format!("{:?} + {:?}", av.shape(), bv.shape()),
                ));
            }
            let n = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bv.data()[i % n])
                .collect();
            (Tensor::new(av.shape(), data)?, av.rows(), n)
        };
        Ok(self.push(
            value,
            vec![a, bias],
            Box::new(move |g, _, _| {
                let mut gb = vec![T::zero(); n];
                for i in 0..m {
                    for (acc, &v) in gb.iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *acc = *acc + v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::vector(gb))]
            }),
        ))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&self, s: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let sv = self.value(s);
            if sv.len() != 1 {
                return Err(Error::dim("expand", format!("{:?} is not a scalar", sv.shape())));
            }
            Tensor::full(shape, sv.item())
        };
        let src = self.shape(s);
        Ok(self.push(
            value,
            vec![s],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&src, g.sum()))]),
        ))
    }

    /// `[t] -> [t, n]`, repeating each element along a new last axis.
    pub fn broadcast_cols(&self, a: Var, n: usize) -> Result<Var> {
        let value = {
            let av = self.value(a);
            if av.rank() != 1 {
                return Err(Error::dim("broadcast_cols", format!("{:?}", av.shape())));
            }
            let data = av
                .data()
                .iter()
                .flat_map(|&x| std::iter::repeat_n(x, n))
                .collect();
            Tensor::new(&[av.len(), n], data)?
        };
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, x, _| {
                let data = (0..x[0].len())
                    .map(|i| g.data()[i * n..(i + 1) * n].iter().copied().sum())
                    .collect();
                vec![Some(Tensor::vector(data))]
            }),
        ))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            vec![a],
            Box::new(|g, x, _| vec![Some(Tensor::full(x[0].shape(), g.item()))]),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Softmax over the last axis, stabilised by subtracting each row's max.
    pub fn row_softmax(&self, a: Var) -> Var {
        let value = {
            let av = self.value(a);
            let mut out = av.clone();
            let c = av.cols();
            if c > 0 {
                for row in out.data_mut().chunks_mut(c) {
                    softmax_in_place(row);
                }
            }
            out
        };
        self.push(
            value,
            vec![a],
            Box::new(|g, _, y| {
                let c = y.cols();
                let mut dx = g.clone();
                if c > 0 {
                    for (dxr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: T = dxr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                        for (d, &yi) in dxr.iter_mut().zip(yr) {
                            *d = yi * (*d - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    /// `d[i,j] = (p[i] - j)^2` for `p: [T]` and `j` in `0..cols`.
    pub fn squared_distances(&self, p: Var, cols: usize) -> Result<Var> {
        let (t, value) = {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(Error::dim("squared_distances", format!("{:?}", pv.shape())));
            }
            let t = pv.len();
            let mut out = Vec::with_capacity(t * cols);
            for &pi in pv.data() {
                out.extend((0..cols).map(|j| {
                    let d = pi - T::of(j as f64);
                    d * d
                }));
            }
            (t, Tensor::new(&[t, cols], out)?)
        };
        Ok(self.push(
            value,
            vec![p],
            Box::new(move |g, x, _| {
                let p = x[0].data();
                let mut dp = vec![T::zero(); t];
                for (i, (d, gr)) in dp.iter_mut().zip(g.data().chunks(cols.max(1))).enumerate() {
                    let two = T::of(2.0);
                    *d = gr
                        .iter()
                        .enumerate()
                        .map(|(j, &gij)| gij * two * (p[i] - T::of(j as f64)))
                        .sum();
                }
                vec![Some(Tensor::new(&[t], dp).unwrap())]
            }),
        ))
    }

    /// Column-wise softmax of `-d / sigma^2` for `d: [T, L]`, where
    /// `sigma = |sigma_raw| + floor` and `sigma_raw` is a scalar.
    pub fn gaussian_column_softmax(&self, d: Var, sigma_raw: Var, floor: f64) -> Result<Var> {
        let (t, l, value) = {
            let (dv, sv) = (self.value(d), self.value(sigma_raw));
            if dv.rank() != 2 || sv.len() != 1 {
                return Err(Error::dim(
                    "gaussian_column_softmax",
                    format!("{:?}, sigma {:?}", dv.shape(), sv.shape()),
                ));
            }
            let (t, l) = (dv.rows(), dv.cols());
            let sigma = sv.item().abs() + T::of(floor);
            let inv = T::one() / (sigma * sigma);
            let mut out: Vec<T> = dv.data().iter().map(|&x| -x * inv).collect();
            let mut col = vec![T::zero(); t];
            for j in 0..l {
                for i in 0..t {
                    col[i] = out[i * l + j];
                }
                softmax_in_place(&mut col);
                for i in 0..t {
                    // flush subnormal tails to zero
                    let v = col[i];
                    out[i * l + j] = if v < T::min_positive_value() { T::zero() } else { v };
                }
            }
            (t, l, Tensor::new(&[t, l], out)?)
        };
        Ok(self.push(
            value,
            vec![d, sigma_raw],
            Box::new(move |g, x, y| {
                let raw = x[1].item();
                let sigma = raw.abs() + T::of(floor);
                let inv = T::one() / (sigma * sigma);
                let (gd, yd, dd) = (g.data(), y.data(), x[0].data());
                // dz = y * (g - sum_i g y) per column
                let mut dots = vec![T::zero(); l];
                for i in 0..t {
                    for j in 0..l {
                        dots[j] = dots[j] + gd[i * l + j] * yd[i * l + j];
                    }
                }
                let mut dx = vec![T::zero(); t * l];
                let mut dinv = T::zero();
                for i in 0..t {
                    for j in 0..l {
                        let k = i * l + j;
                        let dz = yd[k] * (gd[k] - dots[j]);
                        dx[k] = -dz * inv;
                        dinv = dinv - dz * dd[k];
                    }
                }
                let sign = if raw > T::zero() {
                    T::one()
                } else if raw < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                let dsigma = dinv * T::of(-2.0) * inv / sigma;
                vec![
                    Some(Tensor::new(&[t, l], dx).unwrap()),
                    Some(Tensor::new(x[1].shape(), vec![dsigma * sign]).unwrap()),
                ]
            }),
        ))
    }

    /// Inclusive cumulative sum along the last axis.
    pub fn cumsum_last(&self, a: Var) -> Var {
        let value = {
            let mut out = self.value(a).clone();
            let c = out.cols();
            if c > 0 {
                for row in out.data_mut().chunks_mut(c) {
                    let mut acc = T::zero();
                    for v in row.iter_mut() {
                        acc = acc + *v;
                        *v = acc;
                    }
                }
            }
            out
        };
        self.push(
            value,
            vec![a],
            Box::new(|g, _, _| {
                let mut dx = g.clone();
                let c = dx.cols();
                if c > 0 {
                    for row in dx.data_mut().chunks_mut(c) {
                        let mut acc = T::zero();
                        for v in row.iter_mut().rev() {
                            acc = acc + *v;
                            *v = acc;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        )
    }

    // ------------------------------------------------------- slicing / concat

    /// `len` entries (rank 1) or rows (rank 2) starting at `start`.
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (value, stride, shape) = {
            let av = self.value(a);
            let n = av.shape().first().copied().unwrap_or(0);
            if start + len > n {
                return Err(Error::Index {
                    index: start + len,
                    size: n,
                });
            }
            let stride: usize = av.shape()[1..].iter().product();
            let mut shape = av.shape().to_vec();
            shape[0] = len;
            let data = av.data()[start * stride..(start + len) * stride].to_vec();
            (Tensor::new(&shape, data)?, stride, av.shape().to_vec())
        };
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&shape);
                dx.data_mut()[start * stride..(start + len) * stride].copy_from_slice(g.data());
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenation along the first axis.
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        let (value, sizes) = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let Some(first) = vals.first() else {
                return Err(Error::dim("concat", "no inputs"));
            };
            let tail = first.shape()[1..].to_vec();
            let mut data = Vec::new();
            let mut rows = 0;
            let mut sizes = Vec::new();
            for v in &vals {
                if v.shape()[1..] != tail[..] {
                    return Err(Error::dim(
                        "concat",
                        format!("{:?} vs {:?}", v.shape(), first.shape()),
                    ));
                }
                rows += v.shape()[0];
                sizes.push(v.len());
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            (Tensor::new(&shape, data)?, sizes)
        };
        Ok(self.push(
            value,
            parts.to_vec(),
            Box::new(move |g, x, _| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(x)
                    .map(|(&n, xi)| {
                        let t = Tensor::new(xi.shape(), g.data()[off..off + n].to_vec()).unwrap();
                        off += n;
                        Some(t)
                    })
                    .collect()
            }),
        ))
    }

    /// Columns `start..start+len` of a `[m,n]` matrix.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (value, m, n) = {
            let av = self.value(a);
            if av.rank() != 2 || start + len > av.cols() {
                return Err(Error::dim(
                    "slice_cols",
                    format!("{:?} [{start}..{}]", av.shape(), start + len),
                ));
            }
            let (m, n) = (av.rows(), av.cols());
            let mut data = Vec::with_capacity(m * len);
            for i in 0..m {
                data.extend_from_slice(&av.data()[i * n + start..i * n + start + len]);
            }
            (Tensor::new(&[m, len], data)?, m, n)
        };
        Ok(self.push(
            value,
            vec![a],
            Box::new(move |g, _, _| {
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    dx.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Concatenation of `[m, n_k]` matrices along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (value, widths, m) = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let Some(first) = vals.first() else {
                return Err(Error::dim("concat_cols", "no inputs"));
            };
            let m = first.rows();
            if vals.iter().any(|v| v.rank() != 2 || v.rows() != m) {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
            let n: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for v in &vals {
                    data.extend_from_slice(v.row(i));
                }
            }
            (Tensor::new(&[m, n], data)?, widths, m)
        };
        Ok(self.push(
            value,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let n: usize = widths.iter().sum();
                let mut off = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut data = Vec::with_capacity(m * w);
                        for i in 0..m {
                            data.extend_from_slice(&g.data()[i * n + off..i * n + off + w]);
                        }
                        off += w;
                        Some(Tensor::new(&[m, w], data).unwrap())
                    })
                    .collect()
            }),
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (value, v, d) = {
            let tv = self.value(table);
            if tv.rank() != 2 {
                return Err(Error::dim("gather_rows", format!("{:?}", tv.shape())));
            }
            let (v, d) = (tv.rows(), tv.cols());
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::Index { index: id, size: v });
                }
                data.extend_from_slice(tv.row(id));
            }
            (Tensor::new(&[ids.len(), d], data)?, v, d)
        };
        let ids = ids.to_vec();
        Ok(self.push(
            value,
            vec![table],
            Box::new(move |g, _, _| {
                let mut dt = Tensor::zeros(&[v, d]);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a = *a + b;
                    }
                }
                vec![Some(dt)]
            }),
        ))
    }

    // ---------------------------------------------------------------- layers

    /// Normalises the last axis to zero mean and unit variance
    /// (`eps = 1e-5` inside the root), then applies `gain` and `bias`.
    pub fn layer_norm(&self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (value, xhat, inv_std) = {
            let (av, gv, bv) = (self.value(a), self.value(gain), self.value(bias));
            let d = av.cols();
            if d == 0 || gv.shape() != [d] || bv.shape() != [d] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{:?} with gain {:?}, bias {:?}", av.shape(), gv.shape(), bv.shape()),
                ));
            }
            let dn = T::of(d as f64);
            let mut xhat = av.clone();
            let mut inv_std = Vec::with_capacity(av.len() / d);
            for row in xhat.data_mut().chunks_mut(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dn;
                let is = (var + T::of(EPS)).sqrt().recip();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                inv_std.push(is);
            }
            let mut out = xhat.clone();
            for row in out.data_mut().chunks_mut(d) {
                for ((x, &g), &b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                    *x = *x * g + b;
                }
            }
            (out, xhat, inv_std)
        };
        Ok(self.push(
            value,
            vec![a, gain, bias],
            Box::new(move |g, x, _| {
                let d = g.cols();
                let dn = T::of(d as f64);
                let gain = x[1].data();
                let mut dx = Tensor::zeros(g.shape());
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (r, ((gr, xr), dxr)) in g
                    .data()
                    .chunks(d)
                    .zip(xhat.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xr[j];
                        db[j] = db[j] + gr[j];
                        let dxh = gr[j] * gain[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    for j in 0..d {
                        let dxh = gr[j] * gain[j];
                        dxr[j] = inv_std[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                vec![Some(dx), Some(Tensor::vector(dg)), Some(Tensor::vector(db))]
            }),
        ))
    }

    /// Length-preserving 1-D cross-correlation over `[t, c_in]` with an odd
    /// kernel `[k, c_in, c_out]`, zero padding `(k-1)/2` on each side.
    pub fn conv1d_same(&self, a: Var, w: Var, b: Var) -> Result<Var> {
        let (value, t, cin, k, cout) = {
            let (av, wv, bv) = (self.value(a), self.value(w), self.value(b));
            if wv.rank() != 3 {
                return Err(Error::dim("conv1d_same", format!("kernel {:?}", wv.shape())));
            }
            let (k, cin, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            if k % 2 == 0 {
                return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
            }
            if av.rank() != 2 || av.cols() != cin || bv.shape() != [cout] {
                return Err(Error::dim(
                    "conv1d_same",
                    format!("input {:?}, kernel {:?}, bias {:?}", av.shape(), wv.shape(), bv.shape()),
                ));
            }
            let t = av.rows();
            let pad = k / 2;
            let mut out = Vec::with_capacity(t * cout);
            for _ in 0..t {
                out.extend_from_slice(bv.data());
            }
            let (ad, wd) = (av.data(), wv.data());
            for i in 0..t {
                let orow = &mut out[i * cout..(i + 1) * cout];
                for q in 0..k {
                    let Some(src) = (i + q).checked_sub(pad).filter(|&s| s < t) else {
                        continue;
                    };
                    for c in 0..cin {
                        let x = ad[src * cin + c];
                        let wrow = &wd[(q * cin + c) * cout..(q * cin + c + 1) * cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o = *o + x * wv;
                        }
                    }
                }
            }
            (Tensor::new(&[t, cout], out)?, t, cin, k, cout)
        };
        Ok(self.push(
            value,
            vec![a, w, b],
            Box::new(move |g, x, _| {
                let pad = k / 2;
                let (ad, wd, gd) = (x[0].data(), x[1].data(), g.data());
                let mut da = vec![T::zero(); t * cin];
                let mut dw = vec![T::zero(); k * cin * cout];
                let mut db = vec![T::zero(); cout];
                for i in 0..t {
                    let grow = &gd[i * cout..(i + 1) * cout];
                    for (acc, &gv) in db.iter_mut().zip(grow) {
                        *acc = *acc + gv;
                    }
                    for q in 0..k {
                        let Some(src) = (i + q).checked_sub(pad).filter(|&s| s < t) else {
                            continue;
                        };
                        for c in 0..cin {
                            let base = (q * cin + c) * cout;
                            let xv = ad[src * cin + c];
                            let mut acc = T::zero();
                            for o in 0..cout {
                                acc = acc + grow[o] * wd[base + o];
                                dw[base + o] = dw[base + o] + xv * grow[o];
                            }
                            da[src * cin + c] = da[src * cin + c] + acc;
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[t, cin], da).unwrap()),
                    Some(Tensor::new(&[k, cin, cout], dw).unwrap()),
                    Some(Tensor::vector(db)),
                ]
            }),
        ))
    }

    // ---------------------------------------------------------------- losses

    /// Mean over positions of `-log softmax(logits)[target]`. With
    /// `smoothing > 0` the target distribution is mixed with a uniform one.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (value, probs, l, v) = {
            let lv = self.value(logits);
            if lv.rank() != 2 || lv.rows() != targets.len() {
                return Err(Error::dim(
                    "cross_entropy",
                    format!("logits {:?} for {} targets", lv.shape(), targets.len()),
                ));
            }
            let (l, v) = (lv.rows(), lv.cols());
            if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
                return Err(Error::Index { index: bad, size: v });
            }
            let mut probs = lv.clone();
            let mut loss = 0.0;
            for (r, row) in probs.data_mut().chunks_mut(v).enumerate() {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                let nll = (lse - row[targets[r]]).f64();
                let uniform = if smoothing > 0.0 {
                    row.iter().map(|&x| (lse - x).f64()).sum::<f64>() / v as f64
                } else {
                    0.0
                };
                loss += (1.0 - smoothing) * nll + smoothing * uniform;
                for x in row.iter_mut() {
                    *x = (*x - lse).exp();
                }
            }
            (Tensor::scalar(T::of(loss / l.max(1) as f64)), probs, l, v)
        };
        let targets = targets.to_vec();
        Ok(self.push(
            value,
            vec![logits],
            Box::new(move |g, _, _| {
                let scale = g.item() / T::of(l.max(1) as f64);
                let off = T::of(smoothing / v as f64);
                let on = T::of(1.0 - smoothing);
                let mut dx = probs.clone();
                for (r, row) in dx.data_mut().chunks_mut(v).enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        let q = if j == targets[r] { on + off } else { off };
                        *x = (*x - q) * scale;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean of squared differences.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b).map_err(|_| {
            Error::dim(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            )
        })?;
        let sq = self.square(diff);
        Ok(self.mean(sq))
    }
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// `a[m,k] b[k,n]`.
fn matmul_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a[m,n] b[k,n]^T -> [m,k]`.
fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * n..(j + 1) * n]).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]^T g[m,n] -> [k,n]`.
fn matmul_tn<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &gv) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}
