//! Reverse-mode autodiff tape.
//!
//! Forward ops append a value node plus (when any input wants gradients) a
//! boxed backward closure. [`Tape::backward`] walks the records in exact
//! reverse creation order, accumulating gradients into per-node buffers.
//! Nodes reachable only from frozen inputs record no closure, so frozen
//! subgraphs cost nothing on the way back.

use super::{matmul_new, softmax_lane, transpose_data, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn FnOnce(&[Tensor<T>], &[T], &mut Grads<T>)>;

/// Gradient buffers, lazily allocated per node during the backward sweep.
pub struct Grads<T: Scalar> {
    bufs: Vec<Option<Vec<T>>>,
    numels: Vec<usize>,
    wants: Vec<bool>,
}

impl<T: Scalar> Grads<T> {
    /// Whether this node's gradient is needed at all. Backward closures may
    /// skip computing a contribution when the target does not want one.
    pub fn wants(&self, v: Var) -> bool {
        self.wants[v.0]
    }

    /// Zero-initialized gradient buffer for `v`, allocating on first touch.
    pub fn buf(&mut self, v: Var) -> &mut [T] {
        let n = self.numels[v.0];
        self.bufs[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }
}

pub struct Tape<T: Scalar> {
    vals: Vec<Tensor<T>>,
    needs: Vec<bool>,
    backs: Vec<Option<BackFn<T>>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            needs: Vec::new(),
            backs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Drop every record. After backward + clear no state remains.
    pub fn clear(&mut self) {
        self.vals.clear();
        self.needs.clear();
        self.backs.clear();
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.vals[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.vals[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Gradient of the last `backward` target with respect to `v`, if one
    /// was produced (leaves only; interior buffers are released on the fly).
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads.get(v.0).and_then(|g| {
            g.as_ref()
                .map(|buf| Tensor::from_vec(self.vals[v.0].shape(), buf.clone()).unwrap())
        })
    }

    fn push(&mut self, val: Tensor<T>, needs: bool, back: Option<BackFn<T>>) -> Var {
        self.vals.push(val);
        self.needs.push(needs);
        self.backs.push(back);
        Var(self.vals.len() - 1)
    }

    /// For ops defined in other modules (conv2d, CTC loss).
    pub(crate) fn push_external(
        &mut self,
        val: Tensor<T>,
        needs: bool,
        back: Option<Box<dyn FnOnce(&[Tensor<T>], &[T], &mut Grads<T>)>>,
    ) -> Var {
        self.push(val, needs, back)
    }

    /// Insert a value node with no history.
    pub fn leaf(&mut self, val: Tensor<T>, requires_grad: bool) -> Var {
        self.push(val, requires_grad, None)
    }

    pub fn constant(&mut self, val: Tensor<T>) -> Var {
        self.leaf(val, false)
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// grad-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.vals.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if !self.vals[loss.0].is_scalar_shape() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        let n = self.vals.len();
        let mut grads = Grads {
            bufs: vec![None; n],
            numels: self.vals.iter().map(|t| t.numel()).collect(),
            wants: self.needs.clone(),
        };
        grads.bufs[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if grads.bufs[id].is_none() {
                continue;
            }
            if let Some(f) = self.backs[id].take() {
                let g = grads.bufs[id].take().unwrap();
                f(&self.vals, &g, &mut grads);
            }
        }
        self.grads = grads.bufs;
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                for &v in [a, b].iter() {
                    if gr.wants(v) {
                        let buf = gr.buf(v);
                        for (o, &gi) in buf.iter_mut().zip(g) {
                            *o += gi;
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    /// Broadcast-add a length-n row vector to every row of an m x n matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.vals[x.0], &self.vals[bias.0]);
        let (m, n) = (tx.rows(), tx.cols());
        if tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs[x.0] || self.needs[bias.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
                if gr.wants(bias) {
                    let buf = gr.buf(bias);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let needs = self.needs[a.0] || self.needs[b.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(a) {
                    let bd: Vec<T> = vals[b.0].data().to_vec();
                    let buf = gr.buf(a);
                    for ((o, &gi), &bv) in buf.iter_mut().zip(g).zip(bd.iter()) {
                        *o += gi * bv;
                    }
                }
                if gr.wants(b) {
                    let ad: Vec<T> = vals[a.0].data().to_vec();
                    let buf = gr.buf(b);
                    for ((o, &gi), &av) in buf.iter_mut().zip(g).zip(ad.iter()) {
                        *o += gi * av;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.vals[x.0].map(|v| v * c);
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }) as BackFn<T>
        });
        self.push(out, needs, back)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
        let a = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let out = self.vals[x.0].map(|v| {
            let u = c * (v + a * v.powi(3));
            half * v * (T::one() + u.tanh())
        });
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let xd: Vec<T> = vals[x.0].data().to_vec();
                    let buf = gr.buf(x);
                    for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(xd.iter()) {
                        let u = c * (v + a * v.powi(3));
                        let t = u.tanh();
                        let du = c * (T::one() + T::from_f64(3.0) * a * v * v);
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                        *o += gi * d;
                    }
                }
            }) as BackFn<T>
        });
        self.push(out, needs, back)
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::from_vec(&[m, n], matmul_new(ta.data(), tb.data(), m, k, n))?;
        let needs = self.needs[a.0] || self.needs[b.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(a) {
                    // dA = dC . B^T
                    let bt = transpose_data(vals[b.0].data(), k, n);
                    let da = matmul_new(g, &bt, m, n, k);
                    let buf = gr.buf(a);
                    for (o, v) in buf.iter_mut().zip(da) {
                        *o += v;
                    }
                }
                if gr.wants(b) {
                    // dB = A^T . dC
                    let at = transpose_data(vals[a.0].data(), m, k);
                    let db = matmul_new(&at, g, k, m, n);
                    let buf = gr.buf(b);
                    for (o, v) in buf.iter_mut().zip(db) {
                        *o += v;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    /// a (m x k) times b^T where b is (n x k); avoids materializing the
    /// transpose in the caller.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.cols() {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let bt = transpose_data(tb.data(), n, k);
        let out = Tensor::from_vec(&[m, n], matmul_new(ta.data(), &bt, m, k, n))?;
        let needs = self.needs[a.0] || self.needs[b.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(a) {
                    // dA = dC . B
                    let da = matmul_new(g, vals[b.0].data(), m, n, k);
                    let buf = gr.buf(a);
                    for (o, v) in buf.iter_mut().zip(da) {
                        *o += v;
                    }
                }
                if gr.wants(b) {
                    // dB = dC^T . A
                    let gt = transpose_data(g, m, n);
                    let db = matmul_new(&gt, vals[a.0].data(), n, m, k);
                    let buf = gr.buf(b);
                    for (o, v) in buf.iter_mut().zip(db) {
                        *o += v;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    // ---- normalization and activation ----

    /// Softmax along `axis` with max-subtraction per lane.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        let shape = tx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = vec![T::zero(); tx.numel()];
        let src = tx.data();
        let mut lane_in = vec![T::zero(); lane];
        let mut lane_out = vec![T::zero(); lane];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..lane {
                    lane_in[l] = src[(o * lane + l) * inner + i];
                }
                softmax_lane(&lane_in, &mut lane_out);
                for l in 0..lane {
                    data[(o * lane + l) * inner + i] = lane_out[l];
                }
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs[x.0];
        let out_var_slot = self.vals.len(); // output id == next slot
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let y = vals[out_var_slot].data().to_vec();
                    let buf = gr.buf(x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut dot = T::zero();
                            for l in 0..lane {
                                let idx = (o * lane + l) * inner + i;
                                dot += g[idx] * y[idx];
                            }
                            for l in 0..lane {
                                let idx = (o * lane + l) * inner + i;
                                buf[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let tx = &self.vals[x.0];
        let shape = tx.shape().to_vec();
        let d = *shape.last().unwrap();
        if self.vals[gain.0].shape() != [d] || self.vals[bias.0].shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape.clone(),
                rhs: self.vals[gain.0].shape().to_vec(),
            });
        }
        let lanes = tx.numel() / d;
        let epst = T::from_f64(eps);
        let gd = self.vals[gain.0].data().to_vec();
        let bd = self.vals[bias.0].data().to_vec();
        let src = tx.data();
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut data = vec![T::zero(); tx.numel()];
        for l in 0..lanes {
            let row = &src[l * d..(l + 1) * d];
            let mut mu = T::zero();
            for &v in row {
                mu += v;
            }
            mu = mu * inv_d;
            let mut var = T::zero();
            for &v in row {
                var += (v - mu) * (v - mu);
            }
            var = var * inv_d;
            let inv_std = T::one() / (var + epst).sqrt();
            for j in 0..d {
                let xh = (row[j] - mu) * inv_std;
                data[l * d + j] = xh * gd[j] + bd[j];
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        let needs = self.needs[x.0] || self.needs[gain.0] || self.needs[bias.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                let src = vals[x.0].data();
                let gaind = vals[gain.0].data();
                // recompute per-lane moments rather than saving them
                for l in 0..lanes {
                    let row = &src[l * d..(l + 1) * d];
                    let mut mu = T::zero();
                    for &v in row {
                        mu += v;
                    }
                    mu = mu * inv_d;
                    let mut var = T::zero();
                    for &v in row {
                        var += (v - mu) * (v - mu);
                    }
                    var = var * inv_d;
                    let inv_std = T::one() / (var + epst).sqrt();
                    let gl = &g[l * d..(l + 1) * d];
                    if gr.wants(gain) || gr.wants(bias) {
                        for j in 0..d {
                            let xh = (row[j] - mu) * inv_std;
                            if gr.wants(gain) {
                                gr.buf(gain)[j] += gl[j] * xh;
                            }
                            if gr.wants(bias) {
                                gr.buf(bias)[j] += gl[j];
                            }
                        }
                    }
                    if gr.wants(x) {
                        let mut mean_dy = T::zero();
                        let mut mean_dy_xh = T::zero();
                        for j in 0..d {
                            let xh = (row[j] - mu) * inv_std;
                            let dyh = gl[j] * gaind[j];
                            mean_dy += dyh;
                            mean_dy_xh += dyh * xh;
                        }
                        mean_dy = mean_dy * inv_d;
                        mean_dy_xh = mean_dy_xh * inv_d;
                        let buf = gr.buf(x);
                        for j in 0..d {
                            let xh = (row[j] - mu) * inv_std;
                            let dyh = gl[j] * gaind[j];
                            buf[l * d + j] += (dyh - mean_dy - xh * mean_dy_xh) * inv_std;
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    /// Rotary position encoding over pair lanes of the last axis.
    /// `positions[s]` is the absolute position of row s.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let tx = &self.vals[x.0];
        let (s, d) = (tx.rows(), tx.cols());
        if d % 2 != 0 {
            return Err(Error::config(format!("rope requires an even dim, got {d}")));
        }
        if positions.len() != s {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: vec![s, d],
                rhs: vec![positions.len()],
            });
        }
        let pos = positions.to_vec();
        let rotate = move |src: &[T], sign: f64, pos: &[usize]| -> Vec<T> {
            let mut out = vec![T::zero(); src.len()];
            for (i, &p) in pos.iter().enumerate() {
                for h in 0..d / 2 {
                    let theta = sign * p as f64 / base.powf(2.0 * h as f64 / d as f64);
                    let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
                    let x0 = src[i * d + 2 * h];
                    let x1 = src[i * d + 2 * h + 1];
                    out[i * d + 2 * h] = x0 * cos - x1 * sin;
                    out[i * d + 2 * h + 1] = x0 * sin + x1 * cos;
                }
            }
            out
        };
        let out = Tensor::from_vec(&[s, d], rotate(tx.data(), 1.0, &pos))?;
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let dg = rotate(g, -1.0, &pos);
                    let buf = gr.buf(x);
                    for (o, v) in buf.iter_mut().zip(dg) {
                        *o += v;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    /// Replace strictly-upper-triangle entries of a square score matrix with
    /// the log-zero sentinel. Masked positions are a constant, so outputs at
    /// row t are bitwise independent of inputs at columns > t.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let tx = &self.vals[x.0];
        let (m, n) = (tx.rows(), tx.cols());
        if m != n {
            return Err(Error::ShapeMismatch {
                op: "causal_mask",
                lhs: vec![m, n],
                rhs: vec![n, n],
            });
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for j in (i + 1)..n {
                data[i * n + j] = T::log_zero();
            }
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for i in 0..m {
                        for j in 0..=i {
                            buf[i * n + j] += g[i * n + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    // ---- reshuffling ----

    /// Same data, new shape. Gradient passes through untouched.
    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let tx = &self.vals[x.0];
        if new_shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: tx.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let out = Tensor::from_vec(new_shape, tx.data().to_vec())?;
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    pub fn slice_cols(&mut self, x: Var, c0: usize, c1: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        let (m, n) = (tx.rows(), tx.cols());
        if c0 >= c1 || c1 > n {
            return Err(Error::Contract(format!(
                "slice_cols {c0}..{c1} out of range for {n} columns"
            )));
        }
        let w = c1 - c0;
        let mut data = vec![T::zero(); m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&tx.data()[i * n + c0..i * n + c1]);
        }
        let out = Tensor::from_vec(&[m, w], data)?;
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for i in 0..m {
                        for j in 0..w {
                            buf[i * n + c0 + j] += g[i * w + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero parts".into()));
        }
        let m = self.vals[parts[0].0].rows();
        let widths: Vec<usize> = parts.iter().map(|v| self.vals[v.0].cols()).collect();
        for v in parts {
            if self.vals[v.0].rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: self.vals[v.0].shape().to_vec(),
                });
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * n];
        let mut off = 0;
        for (v, &w) in parts.iter().zip(&widths) {
            let src = self.vals[v.0].data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = parts.iter().any(|v| self.needs[v.0]);
        let parts_v = parts.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                let mut off = 0;
                for (v, &w) in parts_v.iter().zip(&widths) {
                    if gr.wants(*v) {
                        let buf = gr.buf(*v);
                        for i in 0..m {
                            for j in 0..w {
                                buf[i * w + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero parts".into()));
        }
        let n = self.vals[parts[0].0].cols();
        let mut heights = Vec::with_capacity(parts.len());
        for v in parts {
            if self.vals[v.0].cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: self.vals[v.0].shape().to_vec(),
                });
            }
            heights.push(self.vals[v.0].rows());
        }
        let m: usize = heights.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for v in parts {
            data.extend_from_slice(self.vals[v.0].data());
        }
        let out = Tensor::from_vec(&[m, n], data)?;
        let needs = parts.iter().any(|v| self.needs[v.0]);
        let parts_v = parts.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                let mut off = 0;
                for (v, &h) in parts_v.iter().zip(&heights) {
                    if gr.wants(*v) {
                        let buf = gr.buf(*v);
                        for (o, &gi) in buf.iter_mut().zip(&g[off * n..(off + h) * n]) {
                            *o += gi;
                        }
                    }
                    off += h;
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    pub fn slice_rows(&mut self, x: Var, r0: usize, r1: usize) -> Result<Var> {
        let tx = &self.vals[x.0];
        let (m, n) = (tx.rows(), tx.cols());
        if r0 >= r1 || r1 > m {
            return Err(Error::Contract(format!(
                "slice_rows {r0}..{r1} out of range for {m} rows"
            )));
        }
        let h = r1 - r0;
        let data = tx.data()[r0 * n..r1 * n].to_vec();
        let out = Tensor::from_vec(&[h, n], data)?;
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for (o, &gi) in buf[r0 * n..r1 * n].iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.vals[table.0];
        let (v, d) = (tt.rows(), tt.cols());
        for &id in ids {
            if id >= v {
                return Err(Error::Contract(format!(
                    "gather_rows id {id} out of range for table with {v} rows"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        let needs = self.needs[table.0];
        let ids_v = ids.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(table) {
                    let buf = gr.buf(table);
                    for (s, &id) in ids_v.iter().enumerate() {
                        for j in 0..d {
                            buf[id * d + j] += g[s * d + j];
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(out, needs, back))
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: T = self.vals[x.0].data().iter().copied().sum();
        let n = self.vals[x.0].numel();
        let needs = self.needs[x.0];
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(x) {
                    let buf = gr.buf(x);
                    for o in buf.iter_mut().take(n) {
                        *o += g[0];
                    }
                }
            }) as BackFn<T>
        });
        self.push(Tensor::scalar(total), needs, back)
    }

    /// Mean of scalar vars; used to combine per-sequence losses in a batch.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("mean_of zero vars".into()));
        }
        for v in xs {
            if !self.vals[v.0].is_scalar_shape() {
                return Err(Error::Contract("mean_of on non-scalar var".into()));
            }
        }
        let n = T::from_f64(xs.len() as f64);
        let total: T = xs.iter().map(|v| self.vals[v.0].item()).sum();
        let needs = xs.iter().any(|v| self.needs[v.0]);
        let xs_v = xs.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                for v in &xs_v {
                    if gr.wants(*v) {
                        gr.buf(*v)[0] += g[0] / n;
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::scalar(total / n), needs, back))
    }

    /// Mean of -log softmax(logits)[t, target[t]] over positions where
    /// `mask[t]` is true.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let tl = &self.vals[logits.0];
        let (s, v) = (tl.rows(), tl.cols());
        if targets.len() != s || mask.len() != s {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: vec![s, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy_masked with empty mask".into()));
        }
        for (t, (&id, &m)) in targets.iter().zip(mask).enumerate() {
            if m && id >= v {
                return Err(Error::Contract(format!(
                    "target {id} at position {t} out of range for {v} classes"
                )));
            }
        }
        let probs = tl.softmax_rows();
        let mut loss = T::zero();
        for t in 0..s {
            if mask[t] {
                loss += -(probs.at2(t, targets[t]).ln());
            }
        }
        let cnt = T::from_f64(count as f64);
        loss = loss / cnt;
        let needs = self.needs[logits.0];
        let targets_v = targets.to_vec();
        let mask_v = mask.to_vec();
        let back: Option<BackFn<T>> = needs.then(|| {
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(logits) {
                    let scale = g[0] / cnt;
                    let buf = gr.buf(logits);
                    for t in 0..s {
                        if !mask_v[t] {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets_v[t] { T::one() } else { T::zero() };
                            buf[t * v + j] += scale * (probs.at2(t, j) - onehot);
                        }
                    }
                }
            }) as BackFn<T>
        });
        Ok(self.push(Tensor::scalar(loss), needs, back))
    }
}
