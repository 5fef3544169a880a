//! Layers assembled from tape operations.

use super::tape::Message;
use super::{AutodiffError, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;

/// Negative slope of hidden activations.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Negative slope of the attention score activation.
pub const ATTN_SLOPE: f64 = 0.2;

/// Message-passing structure of one graph, self-loops included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub n: usize,
    /// `(receiver, sender, coefficient)` sorted by receiver, then sender.
    pub messages: Vec<Message>,
    /// Neighborhood size of each node, self included.
    pub degree: Vec<usize>,
}

impl Adjacency {
    /// Symmetric degree-normalized adjacency: message `j -> i` carries `e_ij / sqrt(deg_i deg_j)`,
    /// with `e_ij = 1` on self-loops or when `edges` weights are ignored.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], use_weights: bool) -> Self {
        let mut degree = vec![1usize; n];
        for &(a, b, _) in edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let c = |i: usize, j: usize| ((degree[i] * degree[j]) as f64).sqrt();
        let mut messages: Vec<Message> = (0..n).map(|i| (i, i, 1.0 / c(i, i))).collect();
        for &(a, b, w) in edges {
            let e = if use_weights { w } else { 1.0 };
            messages.push((a, b, e / c(a, b)));
            messages.push((b, a, e / c(b, a)));
        }
        messages.sort_by_key(|m| (m.0, m.1));
        Self { n, messages, degree }
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.messages.iter().map(|m| (m.0, m.1)).collect()
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.messages.iter().map(|m| m.0).collect()
    }
}

/// Glorot-uniform initialized matrix.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], limit, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseParams {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), glorot(inputs, outputs, rng)),
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[outputs])),
        }
    }
}

/// `x W + b`.
pub fn dense_forward(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Graph convolution: `h_i' = LeakyReLU(sum over j in N(i) of c_ij h_j W + b)`.
pub fn gcn_forward(tape: &mut Tape, h: Var, adj: &Adjacency, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let z = tape.matmul(h, w)?;
    let p = tape.propagate(z, adj.n, &adj.messages)?;
    let y = tape.add_bias(p, b)?;
    Ok(tape.leaky_relu(y, LEAKY_SLOPE))
}

/// One attention head: projection `w [L, M]` and score vectors for receiver and sender halves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub w: ParamId,
    pub a_dst: ParamId,
    pub a_src: ParamId,
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(&format!("{name}.w"), glorot(inputs, outputs, rng)),
            a_dst: store.add(&format!("{name}.a_dst"), glorot(outputs, 1, rng)),
            a_src: store.add(&format!("{name}.a_src"), glorot(outputs, 1, rng)),
        }
    }
}

/// Head weights bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w: Var,
    pub a_dst: Var,
    pub a_src: Var,
}

impl HeadVars {
    pub fn bind(tape: &mut Tape, store: &ParamStore, p: &HeadParams) -> Self {
        Self {
            w: tape.param(store, p.w),
            a_dst: tape.param(store, p.a_dst),
            a_src: tape.param(store, p.a_src),
        }
    }
}

/// Per-layer, per-head outputs before head averaging.
#[derive(Debug, Clone, Default)]
pub struct AttentionRecord {
    pub layers: Vec<Vec<Var>>,
}

/// Attention weights of one head: softmax over `N(i)` of
/// `LeakyReLU(a_dst . z_i + a_src . z_j)` with `z = h W`, self-loop included.
pub fn attention_coefficients(
    tape: &mut Tape,
    h: Var,
    adj: &Adjacency,
    head: &HeadVars,
) -> Result<(Var, Var), AutodiffError> {
    let z = tape.matmul(h, head.w)?;
    let u = tape.matmul(z, head.a_dst)?;
    let v = tape.matmul(z, head.a_src)?;
    let s = tape.pair_sum(u, v, &adj.pairs())?;
    let s = tape.leaky_relu(s, ATTN_SLOPE);
    let alpha = tape.segment_softmax(s, &adj.receivers())?;
    Ok((alpha, z))
}

/// Multi-head attention graph convolution; returns the layer output and each head's output.
pub fn attention_gcn_forward(
    tape: &mut Tape,
    h: Var,
    adj: &Adjacency,
    heads: &[HeadVars],
    b: Var,
) -> Result<(Var, Vec<Var>), AutodiffError> {
    if heads.is_empty() {
        return Err(AutodiffError::EmptyInput);
    }
    let mut outs = Vec::with_capacity(heads.len());
    for head in heads {
        let (alpha, z) = attention_coefficients(tape, h, adj, head)?;
        outs.push(tape.attn_aggregate(alpha, z, adj.n, &adj.messages)?);
    }
    let avg = tape.mean_of(&outs)?;
    let y = tape.add_bias(avg, b)?;
    Ok((tape.leaky_relu(y, LEAKY_SLOPE), outs))
}

/// Mean pairwise cosine similarity of head outputs, averaged over layers.
pub fn attention_regularizer(tape: &mut Tape, record: &AttentionRecord) -> Result<Var, AutodiffError> {
    if record.layers.is_empty() {
        return Err(AutodiffError::EmptyInput);
    }
    let mut per_layer = Vec::with_capacity(record.layers.len());
    for (l, heads) in record.layers.iter().enumerate() {
        let v = tape.cosine_mean(heads).map_err(|e| match e {
            AutodiffError::ZeroNormHead { head, .. } => AutodiffError::ZeroNormHead { layer: l, head },
            other => other,
        })?;
        per_layer.push(v);
    }
    tape.mean_of(&per_layer)
}

/// Unweighted mean binary cross-entropy.
pub fn bce_loss(tape: &mut Tape, p: Var, labels: &[f64]) -> Result<Var, AutodiffError> {
    tape.bce(p, labels, &vec![1.0; labels.len()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvParams {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (9 * (inputs + outputs)) as f64).sqrt();
        Self {
            w: store.add(
                &format!("{name}.w"),
                Tensor::uniform(&[outputs, inputs, 3, 3], limit, rng),
            ),
            b: store.add(&format!("{name}.b"), Tensor::zeros(&[outputs])),
        }
    }

    /// Convolution followed by the hidden activation.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, AutodiffError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.conv2d(x, w, b)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn gcn_self_loop_only() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let w = t.leaf(eye(2));
        let b = t.leaf(Tensor::zeros(&[2]));
        let adj = Adjacency::from_edges(1, &[], true);
        let y = gcn_forward(&mut t, h, &adj, w, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, -0.01]);
    }

    #[test]
    fn gcn_disconnected_nodes_are_independent() {
        let adj = Adjacency::from_edges(2, &[], true);
        let run = |second: f64| {
            let mut t = Tape::new();
            let h = t.leaf(Tensor::new(&[2, 2], vec![0.3, 0.7, second, 1.0]).unwrap());
            let w = t.leaf(Tensor::new(&[2, 2], vec![0.5, -0.2, 0.1, 0.9]).unwrap());
            let b = t.leaf(Tensor::new(&[2], vec![0.1, 0.0]).unwrap());
            let y = gcn_forward(&mut t, h, &adj, w, b).unwrap();
            t.value(y).row(0).to_vec()
        };
        assert_eq!(run(0.0), run(5.0));
    }

    #[test]
    fn uniform_attention_over_identical_neighbors() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::filled(&[4, 3], 0.4));
        let w = t.leaf(Tensor::filled(&[3, 2], 0.3));
        let a_dst = t.leaf(Tensor::new(&[2, 1], vec![0.7, -0.1]).unwrap());
        let a_src = t.leaf(Tensor::new(&[2, 1], vec![0.2, 0.5]).unwrap());
        let adj = Adjacency::from_edges(4, &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)], false);
        let head = HeadVars { w, a_dst, a_src };
        let (alpha, _) = attention_coefficients(&mut t, h, &adj, &head).unwrap();
        let a = t.value(alpha).data();
        for (e, m) in adj.messages.iter().enumerate() {
            if m.0 == 0 {
                assert!((a[e] - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_attention_single_head_matches_mean_normalized_gcn() {
        let edges = [(0, 1, 0.6), (1, 2, 0.3), (0, 3, 0.1)];
        let adj = Adjacency::from_edges(4, &edges, true);
        let hv: Vec<f64> = (0..12).map(|k| ((k * 7 % 5) as f64 - 2.0) * 0.3).collect();
        let wv: Vec<f64> = (0..6).map(|k| (k as f64 - 2.5) * 0.2).collect();
        let mut t = Tape::new();
        let h = t.leaf(Tensor::new(&[4, 3], hv).unwrap());
        let w = t.leaf(Tensor::new(&[3, 2], wv).unwrap());
        let zero = t.leaf(Tensor::zeros(&[2, 1]));
        let b = t.leaf(Tensor::new(&[2], vec![0.05, -0.05]).unwrap());
        let head = HeadVars {
            w,
            a_dst: zero,
            a_src: zero,
        };
        let (att, _) = attention_gcn_forward(&mut t, h, &adj, &[head], b).unwrap();
        let mut uniform = adj.clone();
        for m in &mut uniform.messages {
            m.2 /= adj.degree[m.0] as f64;
        }
        let gcn = gcn_forward(&mut t, h, &uniform, w, b).unwrap();
        for (x, y) in t.value(att).data().iter().zip(t.value(gcn).data()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn regularizer_fixtures() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap());
        let b = t.leaf(Tensor::new(&[2, 1], vec![0.0, 2.0]).unwrap());
        let rec = AttentionRecord {
            layers: vec![vec![a, b]],
        };
        let r = attention_regularizer(&mut t, &rec).unwrap();
        assert!((t.value(r).item() - 0.5).abs() < 1e-12);
        let z = t.leaf(Tensor::zeros(&[2, 1]));
        let rec = AttentionRecord {
            layers: vec![vec![a, a], vec![a, z]],
        };
        assert_eq!(
            attention_regularizer(&mut t, &rec).unwrap_err(),
            AutodiffError::ZeroNormHead { layer: 1, head: 1 }
        );
    }
}
