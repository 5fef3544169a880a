use super::{mismatch, AutodiffError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Message `(receiver, sender, coefficient)`.
pub type Message = (usize, usize, f64);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Propagate { x: Var, msgs: Vec<Message> },
    PairSum { u: Var, v: Var, pairs: Vec<(usize, usize)> },
    SegmentSoftmax { x: Var, seg: Vec<usize> },
    AttnAggregate { alpha: Var, z: Var, msgs: Vec<Message> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    ConcatFirst(Var, Var),
    MeanOf(Vec<Var>),
    Mean(Var),
    WeightedSum { x: Var, w: Vec<f64> },
    Bce { p: Var, y: Vec<f64>, w: Vec<f64> },
    CosineMean(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probability clamp used by the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(Var, ParamId)>,
}

/// Gradients of one scalar output with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        self.value(v)
            .matrix_dims()
            .ok_or_else(|| mismatch(op, format!("expected a matrix, got {:?}", self.dims(v))))
    }

    fn image(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize), AutodiffError> {
        match self.dims(v) {
            &[c, h, w] => Ok((c, h, w)),
            d => Err(mismatch(op, format!("expected [C, H, W], got {d:?}"))),
        }
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.get(id).value.clone());
        self.bound.push((v, id));
        v
    }

    pub(crate) fn bound_params(&self) -> &[(Var, ParamId)] {
        &self.bound
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, k) = self.matrix("matmul", a)?;
        let (k2, m) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let (x, y) = (self.data(a), self.data(b));
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for t in 0..k {
                let s = x[i * k + t];
                if s == 0.0 {
                    continue;
                }
                for (o, w) in row.iter_mut().zip(&y[t * m..(t + 1) * m]) {
                    *o += s * w;
                }
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::MatMul(a, b)))
    }

    /// `x + b` with `b` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, m) = self.matrix("add_bias", x)?;
        if self.dims(b) != [m] {
            return Err(mismatch("add_bias", format!("bias {:?} for {m} columns", self.dims(b))));
        }
        let bias = self.data(b);
        let out: Vec<f64> = self.data(x).iter().enumerate().map(|(i, v)| v + bias[i % m]).collect();
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.dims(a) != self.dims(b) {
            return Err(mismatch("add", format!("{:?} + {:?}", self.dims(a), self.dims(b))));
        }
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let dims = self.dims(a).to_vec();
        Ok(self.push(Tensor::new(&dims, out)?, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.dims(), t.data().iter().map(|v| v * s).collect()).unwrap();
        self.push(out, Op::Scale(x, s))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(
            t.dims(),
            t.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        )
        .unwrap();
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.dims(), t.data().iter().map(|&v| sigmoid(v)).collect()).unwrap();
        self.push(out, Op::Sigmoid(x))
    }

    /// Row `i` of the output is `sum of c * x[j]` over messages `(i, j, c)`.
    pub fn propagate(&mut self, x: Var, n_out: usize, msgs: &[Message]) -> Result<Var, AutodiffError> {
        let (n, m) = self.matrix("propagate", x)?;
        if msgs.iter().any(|&(i, j, _)| i >= n_out || j >= n) {
            return Err(mismatch("propagate", "message index out of range"));
        }
        let xs = self.data(x);
        let mut out = vec![0.0; n_out * m];
        for &(i, j, c) in msgs {
            for k in 0..m {
                out[i * m + k] += c * xs[j * m + k];
            }
        }
        Ok(self.push(Tensor::new(&[n_out, m], out)?, Op::Propagate { x, msgs: msgs.to_vec() }))
    }

    /// `out[e] = u[i] + v[j]` for each pair `(i, j)`; `u` and `v` are column vectors.
    pub fn pair_sum(&mut self, u: Var, v: Var, pairs: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let (nu, cu) = self.matrix("pair_sum", u)?;
        let (nv, cv) = self.matrix("pair_sum", v)?;
        if cu != 1 || cv != 1 || pairs.iter().any(|&(i, j)| i >= nu || j >= nv) {
            return Err(mismatch("pair_sum", "expected column vectors covering every pair"));
        }
        let (a, b) = (self.data(u), self.data(v));
        let out: Vec<f64> = pairs.iter().map(|&(i, j)| a[i] + b[j]).collect();
        Ok(self.push(
            Tensor::new(&[pairs.len()], out)?,
            Op::PairSum {
                u,
                v,
                pairs: pairs.to_vec(),
            },
        ))
    }

    /// Softmax within each segment; `seg[e]` names the segment of element `e`.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize]) -> Result<Var, AutodiffError> {
        let xs = self.data(x);
        if xs.len() != seg.len() {
            return Err(mismatch("segment_softmax", "one segment id per element"));
        }
        let nseg = seg.iter().max().map_or(0, |m| m + 1);
        let mut mx = vec![f64::NEG_INFINITY; nseg];
        for (e, &s) in seg.iter().enumerate() {
            mx[s] = mx[s].max(xs[e]);
        }
        let mut out: Vec<f64> = seg.iter().enumerate().map(|(e, &s)| (xs[e] - mx[s]).exp()).collect();
        let mut tot = vec![0.0; nseg];
        for (e, &s) in seg.iter().enumerate() {
            tot[s] += out[e];
        }
        for (e, &s) in seg.iter().enumerate() {
            out[e] /= tot[s];
        }
        let dims = self.dims(x).to_vec();
        Ok(self.push(Tensor::new(&dims, out)?, Op::SegmentSoftmax { x, seg: seg.to_vec() }))
    }

    /// Row `i` of the output is `sum of c * alpha[e] * z[j]` over messages `e = (i, j, c)`.
    pub fn attn_aggregate(&mut self, alpha: Var, z: Var, n_out: usize, msgs: &[Message]) -> Result<Var, AutodiffError> {
        let (n, m) = self.matrix("attn_aggregate", z)?;
        if self.value(alpha).len() != msgs.len() || msgs.iter().any(|&(i, j, _)| i >= n_out || j >= n) {
            return Err(mismatch("attn_aggregate", "one coefficient per in-range message"));
        }
        let (a, zs) = (self.data(alpha), self.data(z));
        let mut out = vec![0.0; n_out * m];
        for (e, &(i, j, c)) in msgs.iter().enumerate() {
            let s = c * a[e];
            for k in 0..m {
                out[i * m + k] += s * zs[j * m + k];
            }
        }
        Ok(self.push(
            Tensor::new(&[n_out, m], out)?,
            Op::AttnAggregate {
                alpha,
                z,
                msgs: msgs.to_vec(),
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let (n, m) = self.matrix("gather_rows", x)?;
        if idx.iter().any(|&i| i >= n) {
            return Err(mismatch("gather_rows", "row index out of range"));
        }
        let xs = self.data(x);
        let out: Vec<f64> = idx
            .iter()
            .flat_map(|&i| xs[i * m..(i + 1) * m].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(&[idx.len(), m], out)?,
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (n, p) = self.matrix("concat_cols", a)?;
        let (n2, q) = self.matrix("concat_cols", b)?;
        if n != n2 {
            return Err(mismatch("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let (x, y) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(&x[i * p..(i + 1) * p]);
            out.extend_from_slice(&y[i * q..(i + 1) * q]);
        }
        Ok(self.push(Tensor::new(&[n, p + q], out)?, Op::ConcatCols(a, b)))
    }

    /// Concatenation along the leading axis (channels for images).
    pub fn concat_first(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != db.len() || da[1..] != db[1..] {
            return Err(mismatch("concat_first", format!("{da:?} with {db:?}")));
        }
        let mut dims = da.to_vec();
        dims[0] += db[0];
        let out = [self.data(a), self.data(b)].concat();
        Ok(self.push(Tensor::new(&dims, out)?, Op::ConcatFirst(a, b)))
    }

    /// Element-wise mean of same-shaped values.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        let first = *xs.first().ok_or(AutodiffError::EmptyInput)?;
        let dims = self.dims(first).to_vec();
        if xs.iter().any(|&v| self.dims(v) != dims) {
            return Err(mismatch("mean_of", "operands differ in shape"));
        }
        let k = xs.len() as f64;
        let mut out = vec![0.0; self.value(first).len()];
        for &v in xs {
            for (o, x) in out.iter_mut().zip(self.data(v)) {
                *o += x / k;
            }
        }
        Ok(self.push(Tensor::new(&dims, out)?, Op::MeanOf(xs.to_vec())))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let xs = self.data(x);
        if xs.is_empty() {
            return Err(AutodiffError::EmptyInput);
        }
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x)))
    }

    /// `sum of w[k] * x[k]`, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: &[f64]) -> Result<Var, AutodiffError> {
        let xs = self.data(x);
        if xs.len() != w.len() {
            return Err(mismatch("weighted_sum", "one weight per element"));
        }
        let s = xs.iter().zip(w).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w: w.to_vec() }))
    }

    /// `(1/T) sum of w_t * BCE(p_t, y_t)` with `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, y: &[f64], w: &[f64]) -> Result<Var, AutodiffError> {
        let ps = self.data(p);
        if ps.len() != y.len() || y.len() != w.len() {
            return Err(mismatch("bce", "predictions, labels and weights differ in length"));
        }
        if ps.is_empty() {
            return Err(AutodiffError::EmptyInput);
        }
        if let Some(&bad) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AutodiffError::LabelOutOfRange(bad));
        }
        let t = ps.len() as f64;
        let loss: f64 = ps
            .iter()
            .zip(y)
            .zip(w)
            .map(|((&p, &y), &w)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / t;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                y: y.to_vec(),
                w: w.to_vec(),
            },
        ))
    }

    /// `(1/H^2) sum over i, j of cos(x_i, x_j)`, each operand flattened.
    pub fn cosine_mean(&mut self, xs: &[Var]) -> Result<Var, AutodiffError> {
        if xs.is_empty() {
            return Err(AutodiffError::EmptyInput);
        }
        let n = self.value(xs[0]).len();
        if xs.iter().any(|&v| self.value(v).len() != n) {
            return Err(mismatch("cosine_mean", "operands differ in size"));
        }
        let norms: Vec<f64> = xs.iter().map(|&v| norm(self.data(v))).collect();
        if let Some(h) = norms.iter().position(|&v| v == 0.0) {
            return Err(AutodiffError::ZeroNormHead { layer: 0, head: h });
        }
        let h = xs.len();
        let mut total = 0.0;
        for i in 0..h {
            for j in 0..h {
                total += dot(self.data(xs[i]), self.data(xs[j])) / (norms[i] * norms[j]);
            }
        }
        Ok(self.push(Tensor::scalar(total / (h * h) as f64), Op::CosineMean(xs.to_vec())))
    }

    /// 3x3 convolution, stride 1, zero padding: `x [C, H, W]`, `w [O, C, 3, 3]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (c, h, wd) = self.image("conv2d", x)?;
        let o = match self.dims(w) {
            &[o, c2, 3, 3] if c2 == c => o,
            d => return Err(mismatch("conv2d", format!("kernel {d:?} for {c} channels"))),
        };
        if self.dims(b) != [o] {
            return Err(mismatch("conv2d", format!("bias {:?} for {o} filters", self.dims(b))));
        }
        let (xs, ws, bs) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; o * h * wd];
        for oc in 0..o {
            let plane = &mut out[oc * h * wd..(oc + 1) * h * wd];
            plane.iter_mut().for_each(|v| *v = bs[oc]);
            for ic in 0..c {
                let src = &xs[ic * h * wd..(ic + 1) * h * wd];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let k = ws[((oc * c + ic) * 3 + dy) * 3 + dx];
                        if k == 0.0 {
                            continue;
                        }
                        let (y0, y1) = (1usize.saturating_sub(dy), (h + 1 - dy).min(h));
                        let (x0, x1) = (1usize.saturating_sub(dx), (wd + 1 - dx).min(wd));
                        for y in y0..y1 {
                            let sy = y + dy - 1;
                            let dst = &mut plane[y * wd + x0..y * wd + x1];
                            let s = &src[sy * wd + x0 + dx - 1..sy * wd + x1 + dx - 1];
                            for (d, v) in dst.iter_mut().zip(s) {
                                *d += k * v;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(&[o, h, wd], out)?, Op::Conv2d { x, w, b }))
    }

    /// 2x2 max pooling with stride 2; spatial extents must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (c, h, w) = self.image("max_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(mismatch("max_pool2", format!("odd extent {h}x{w}")));
        }
        let xs = self.data(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if xs[i] > best.0 {
                            best = (xs[i], i);
                        }
                    }
                    let o = (ch * oh + y) * ow + xx;
                    out[o] = best.0;
                    argmax[o] = best.1;
                }
            }
        }
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::MaxPool2 { x, argmax }))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (c, h, w) = self.image("upsample2", x)?;
        let xs = self.data(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(ch * oh + y) * ow + xx] = xs[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::Upsample2(x)))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var, AutodiffError> {
        let t = Tensor::new(dims, self.data(x).to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Reverse pass from `out`, seeded with ones.
    pub fn backward(&self, out: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0; self.value(out).len()]);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = self.nodes[v.0].value.len();
            f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, k) = self.value(a).matrix_dims().unwrap();
                let m = self.value(b).dims()[1];
                let (x, y) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for i in 0..n {
                        for t in 0..k {
                            ga[i * k + t] += dot(&g[i * m..(i + 1) * m], &y[t * m..(t + 1) * m]);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..n {
                        for t in 0..k {
                            let s = x[i * k + t];
                            for j in 0..m {
                                gb[t * m + j] += s * g[i * m + j];
                            }
                        }
                    }
                });
            }
            &Op::AddBias(x, b) => {
                let m = self.dims(b)[0];
                acc(x, &mut |gx| add_into(gx, g));
                acc(b, &mut |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % m] += v;
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Scale(x, s) => acc(x, &mut |gx| {
                for (o, v) in gx.iter_mut().zip(g) {
                    *o += s * v;
                }
            }),
            &Op::LeakyRelu(x, slope) => {
                let xs = self.data(x);
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += if xs[k] > 0.0 { g[k] } else { slope * g[k] };
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let ys = node.value.data();
                acc(x, &mut |gx| {
                    for k in 0..g.len() {
                        gx[k] += g[k] * ys[k] * (1.0 - ys[k]);
                    }
                });
            }
            Op::Propagate { x, msgs } => {
                let m = node.value.dims()[1];
                acc(*x, &mut |gx| {
                    for &(i, j, c) in msgs {
                        for k in 0..m {
                            gx[j * m + k] += c * g[i * m + k];
                        }
                    }
                });
            }
            Op::PairSum { u, v, pairs } => {
                acc(*u, &mut |gu| {
                    for (e, &(i, _)) in pairs.iter().enumerate() {
                        gu[i] += g[e];
                    }
                });
                acc(*v, &mut |gv| {
                    for (e, &(_, j)) in pairs.iter().enumerate() {
                        gv[j] += g[e];
                    }
                });
            }
            Op::SegmentSoftmax { x, seg } => {
                let ys = node.value.data();
                let nseg = seg.iter().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; nseg];
                for (e, &s) in seg.iter().enumerate() {
                    inner[s] += g[e] * ys[e];
                }
                acc(*x, &mut |gx| {
                    for (e, &s) in seg.iter().enumerate() {
                        gx[e] += ys[e] * (g[e] - inner[s]);
                    }
                });
            }
            Op::AttnAggregate { alpha, z, msgs } => {
                let m = node.value.dims()[1];
                let (a, zs) = (self.data(*alpha), self.data(*z));
                acc(*alpha, &mut |ga| {
                    for (e, &(i, j, c)) in msgs.iter().enumerate() {
                        ga[e] += c * dot(&g[i * m..(i + 1) * m], &zs[j * m..(j + 1) * m]);
                    }
                });
                acc(*z, &mut |gz| {
                    for (e, &(i, j, c)) in msgs.iter().enumerate() {
                        let s = c * a[e];
                        for k in 0..m {
                            gz[j * m + k] += s * g[i * m + k];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let m = node.value.dims()[1];
                acc(*x, &mut |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..m {
                            gx[i * m + k] += g[r * m + k];
                        }
                    }
                });
            }
            &Op::ConcatCols(a, b) => {
                let p = self.dims(a)[1];
                let q = self.dims(b)[1];
                acc(a, &mut |ga| {
                    for (i, row) in ga.chunks_mut(p).enumerate() {
                        add_into(row, &g[i * (p + q)..i * (p + q) + p]);
                    }
                });
                acc(b, &mut |gb| {
                    for (i, row) in gb.chunks_mut(q).enumerate() {
                        add_into(row, &g[i * (p + q) + p..(i + 1) * (p + q)]);
                    }
                });
            }
            &Op::ConcatFirst(a, b) => {
                let na = self.value(a).len();
                acc(a, &mut |ga| add_into(ga, &g[..na]));
                acc(b, &mut |gb| add_into(gb, &g[na..]));
            }
            Op::MeanOf(xs) => {
                let k = xs.len() as f64;
                for &v in xs {
                    acc(v, &mut |gv| {
                        for (o, x) in gv.iter_mut().zip(g) {
                            *o += x / k;
                        }
                    });
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).len() as f64;
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::WeightedSum { x, w } => acc(*x, &mut |gx| {
                for (o, wk) in gx.iter_mut().zip(w) {
                    *o += g[0] * wk;
                }
            }),
            Op::Bce { p, y, w } => {
                let ps = self.data(*p);
                let t = ps.len() as f64;
                acc(*p, &mut |gp| {
                    for k in 0..ps.len() {
                        let pk = ps[k];
                        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&pk) {
                            continue;
                        }
                        gp[k] += g[0] * w[k] / t * (-y[k] / pk + (1.0 - y[k]) / (1.0 - pk));
                    }
                });
            }
            Op::CosineMean(xs) => {
                let h = xs.len();
                let norms: Vec<f64> = xs.iter().map(|&v| norm(self.data(v))).collect();
                for i in 0..h {
                    let xi = self.data(xs[i]);
                    let mut gi = vec![0.0; xi.len()];
                    for j in 0..h {
                        let xj = self.data(xs[j]);
                        let cos = dot(xi, xj) / (norms[i] * norms[j]);
                        for k in 0..xi.len() {
                            gi[k] += xj[k] / (norms[i] * norms[j]) - cos * xi[k] / (norms[i] * norms[i]);
                        }
                    }
                    let s = 2.0 * g[0] / (h * h) as f64;
                    acc(xs[i], &mut |gx| {
                        for (o, v) in gx.iter_mut().zip(&gi) {
                            *o += s * v;
                        }
                    });
                }
            }
            &Op::Conv2d { x, w, b } => {
                let (c, h, wd) = match self.dims(x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let o = self.dims(w)[0];
                let (xs, ws) = (self.data(x), self.data(w));
                acc(b, &mut |gb| {
                    for oc in 0..o {
                        gb[oc] += g[oc * h * wd..(oc + 1) * h * wd].iter().sum::<f64>();
                    }
                });
                let window = |dy: usize, dx: usize| {
                    (
                        1usize.saturating_sub(dy),
                        (h + 1 - dy).min(h),
                        1usize.saturating_sub(dx),
                        (wd + 1 - dx).min(wd),
                    )
                };
                acc(w, &mut |gw| {
                    for oc in 0..o {
                        let gp = &g[oc * h * wd..(oc + 1) * h * wd];
                        for ic in 0..c {
                            let src = &xs[ic * h * wd..(ic + 1) * h * wd];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (y0, y1, x0, x1) = window(dy, dx);
                                    let mut s = 0.0;
                                    for y in y0..y1 {
                                        let sy = y + dy - 1;
                                        s += dot(
                                            &gp[y * wd + x0..y * wd + x1],
                                            &src[sy * wd + x0 + dx - 1..sy * wd + x1 + dx - 1],
                                        );
                                    }
                                    gw[((oc * c + ic) * 3 + dy) * 3 + dx] += s;
                                }
                            }
                        }
                    }
                });
                acc(x, &mut |gx| {
                    for oc in 0..o {
                        let gp = &g[oc * h * wd..(oc + 1) * h * wd];
                        for ic in 0..c {
                            let dst = &mut gx[ic * h * wd..(ic + 1) * h * wd];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let k = ws[((oc * c + ic) * 3 + dy) * 3 + dx];
                                    let (y0, y1, x0, x1) = window(dy, dx);
                                    for y in y0..y1 {
                                        let sy = y + dy - 1;
                                        let d = &mut dst[sy * wd + x0 + dx - 1..sy * wd + x1 + dx - 1];
                                        for (dv, gv) in d.iter_mut().zip(&gp[y * wd + x0..y * wd + x1]) {
                                            *dv += k * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |gx| {
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
            }),
            &Op::Upsample2(x) => {
                let (c, h, w) = match self.dims(x) {
                    &[c, h, w] => (c, h, w),
                    _ => unreachable!(),
                };
                let (oh, ow) = (2 * h, 2 * w);
                acc(x, &mut |gx| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * oh + y) * ow + xx];
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_bias_values() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[-1.0, -1.0]);
        let bias = t.leaf(Tensor::new(&[1], vec![0.5]).unwrap());
        let d = t.add_bias(c, bias).unwrap();
        assert_eq!(t.value(d).data(), &[-0.5, -0.5]);
        assert!(t.matmul(a, d).is_ok());
        assert!(matches!(t.matmul(b, b), Err(AutodiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[5], vec![0.3, -1.0, 2.0, 0.0, 0.0]).unwrap());
        let y = t.segment_softmax(x, &[0, 0, 0, 1, 1]).unwrap();
        let v = t.value(y).data();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert_eq!(&v[3..], &[0.5, 0.5]);
    }

    #[test]
    fn bce_closed_forms() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::filled(&[4], 0.5));
        let l = t.bce(p, &[0.0, 1.0, 1.0, 0.0], &[1.0; 4]).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let q = t.leaf(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let l = t.bce(q, &[0.0, 1.0], &[1.0; 2]).unwrap();
        assert!(t.value(l).item() <= 1e-6);
        assert_eq!(
            t.bce(q, &[0.0, 2.0], &[1.0; 2]),
            Err(AutodiffError::LabelOutOfRange(2.0))
        );
    }

    #[test]
    fn cosine_mean_fixtures() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let b = t.leaf(Tensor::new(&[2], vec![0.0, 3.0]).unwrap());
        let same = t.cosine_mean(&[a, a, a]).unwrap();
        assert!((t.value(same).item() - 1.0).abs() < 1e-12);
        let orth = t.cosine_mean(&[a, b]).unwrap();
        assert!((t.value(orth).item() - 0.5).abs() < 1e-12);
        let z = t.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            t.cosine_mean(&[a, z]),
            Err(AutodiffError::ZeroNormHead { head: 1, .. })
        ));
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let p = t.max_pool2(x).unwrap();
        assert_eq!(t.value(p).data(), &[4.0]);
        let u = t.upsample2(p).unwrap();
        assert_eq!(t.value(u).dims(), &[1, 2, 2]);
        assert_eq!(t.value(u).data(), &[4.0; 4]);
    }
}
