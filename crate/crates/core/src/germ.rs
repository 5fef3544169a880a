//! Edge classifier over rupture graphs: attention graph convolutions followed by
//! a dense scorer on concatenated endpoint embeddings.

use crate::autodiff::nn::{
    attention_gcn_forward, attention_regularizer, Adjacency, AttentionRecord, DenseParams, HeadParams, HeadVars,
};
use crate::autodiff::{
    load_checkpoint, save_checkpoint, sgd_step, AutodiffError, ParamId, ParamStore, SgdConfig, Tape, Tensor, Var,
};
use crate::graph::{CurvilinearGraph, GraphError, NODE_FEATURE_LEN};
use crate::raster::{label_components, BinaryMask, Connectivity, RasterError};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GermError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("graph {graph} edge {edge} has no label")]
    UnlabeledEdge { graph: usize, edge: usize },
    #[error("graph {graph} edge {edge} has no predicted probability")]
    MissingProbability { graph: usize, edge: usize },
    #[error("node features have length {found}, model expects {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("invalid GERM config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GermConfig {
    /// Attention graph convolution layers.
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Scale messages by the softmax-normalized edge weights.
    pub use_edge_weights: bool,
    /// `+1` penalizes similar heads (adds the mean head cosine), `-1` rewards them.
    pub attn_reg_sign: f64,
    pub attn_reg_weight: f64,
}

impl Default for GermConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            hidden: 64,
            use_edge_weights: true,
            attn_reg_sign: 1.0,
            attn_reg_weight: 1.0,
        }
    }
}

impl GermConfig {
    pub fn validate(&self) -> Result<(), GermError> {
        if self.depth == 0 || self.heads == 0 || self.hidden == 0 {
            return Err(GermError::InvalidConfig(
                "depth, heads and hidden must be positive".into(),
            ));
        }
        if self.attn_reg_sign != 1.0 && self.attn_reg_sign != -1.0 {
            return Err(GermError::InvalidConfig("attn_reg_sign must be 1 or -1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GermTrainConfig {
    pub epochs: usize,
    /// Graphs per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for GermTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 4,
            lr: 1e-3,
            momentum: 0.99,
            weight_decay: 1e-4,
            seed: 7,
        }
    }
}

impl GermTrainConfig {
    pub fn validate(&self) -> Result<(), GermError> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(GermError::InvalidConfig("epochs, batch and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Upper bound of the positive-class weight.
pub const MAX_POS_WEIGHT: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    heads: Vec<HeadParams>,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GermModel {
    pub cfg: GermConfig,
    pub feature_len: usize,
    pub seed: u64,
    pub store: ParamStore,
    layers: Vec<Layer>,
    classifier: DenseParams,
    feat_mean: ParamId,
    feat_std: ParamId,
}

/// Compresses heavy-tailed counts before standardization.
fn squash(v: f64) -> f64 {
    v.signum() * v.abs().ln_1p()
}

impl GermModel {
    pub fn new(cfg: GermConfig, feature_len: usize, seed: u64) -> Result<Self, GermError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let feat_mean = store.add_frozen("feat.mean", Tensor::zeros(&[feature_len]));
        let feat_std = store.add_frozen("feat.std", Tensor::filled(&[feature_len], 1.0));
        let mut layers = Vec::with_capacity(cfg.depth);
        let mut width = feature_len;
        for l in 0..cfg.depth {
            let heads = (0..cfg.heads)
                .map(|k| HeadParams::new(&mut store, &format!("gcn{l}.head{k}"), width, cfg.hidden, &mut rng))
                .collect();
            let bias = store.add(&format!("gcn{l}.b"), Tensor::zeros(&[cfg.hidden]));
            layers.push(Layer { heads, bias });
            width = cfg.hidden;
        }
        let classifier = DenseParams::new(&mut store, "classifier", 2 * cfg.hidden, 1, &mut rng);
        Ok(Self {
            cfg,
            feature_len,
            seed,
            store,
            layers,
            classifier,
            feat_mean,
            feat_std,
        })
    }

    /// Sets the per-slot standardization statistics from the nodes of `graphs`.
    pub fn fit_normalization(&mut self, graphs: &[CurvilinearGraph]) {
        let l = self.feature_len;
        let rows: Vec<Vec<f64>> = graphs
            .iter()
            .flat_map(|g| g.nodes.iter().map(|n| n.features.iter().map(|&v| squash(v)).collect()))
            .collect();
        if rows.is_empty() {
            return;
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; l];
        for r in &rows {
            for k in 0..l {
                mean[k] += r[k] / n;
            }
        }
        let mut var = vec![0.0; l];
        for r in &rows {
            for k in 0..l {
                var[k] += (r[k] - mean[k]).powi(2) / n;
            }
        }
        let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
        self.store.get_mut(self.feat_mean).value = Tensor::new(&[l], mean).unwrap();
        self.store.get_mut(self.feat_std).value = Tensor::new(&[l], std).unwrap();
    }

    fn input_matrix(&self, graph: &CurvilinearGraph) -> Result<Tensor, GermError> {
        let mean = self.store.get(self.feat_mean).value.data();
        let std = self.store.get(self.feat_std).value.data();
        let mut data = Vec::with_capacity(graph.nodes.len() * self.feature_len);
        for n in &graph.nodes {
            if n.features.len() != self.feature_len {
                return Err(GermError::FeatureLength {
                    expected: self.feature_len,
                    found: n.features.len(),
                });
            }
            data.extend(
                n.features
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (squash(v) - mean[k]) / std[k]),
            );
        }
        Ok(Tensor::new(&[graph.nodes.len(), self.feature_len], data)?)
    }

    /// Records the forward pass; returns per-edge probabilities and head outputs.
    fn forward(&self, tape: &mut Tape, graph: &CurvilinearGraph) -> Result<(Var, AttentionRecord), GermError> {
        let x = tape.leaf(self.input_matrix(graph)?);
        let edges: Vec<(usize, usize, f64)> = graph.edges.iter().map(|e| (e.a, e.b, e.weight)).collect();
        let adj = Adjacency::from_edges(graph.nodes.len(), &edges, self.cfg.use_edge_weights);
        let mut h = x;
        let mut record = AttentionRecord::default();
        for layer in &self.layers {
            let heads: Vec<HeadVars> = layer
                .heads
                .iter()
                .map(|p| HeadVars::bind(tape, &self.store, p))
                .collect();
            let b = tape.param(&self.store, layer.bias);
            let (out, per_head) = attention_gcn_forward(tape, h, &adj, &heads, b)?;
            record.layers.push(per_head);
            h = out;
        }
        let a: Vec<usize> = graph.edges.iter().map(|e| e.a).collect();
        let b: Vec<usize> = graph.edges.iter().map(|e| e.b).collect();
        let ha = tape.gather_rows(h, &a)?;
        let hb = tape.gather_rows(h, &b)?;
        let ab = tape.concat_cols(ha, hb)?;
        let ba = tape.concat_cols(hb, ha)?;
        let w = tape.param(&self.store, self.classifier.w);
        let bias = tape.param(&self.store, self.classifier.b);
        let mut probs = Vec::with_capacity(2);
        for pair in [ab, ba] {
            let logit = crate::autodiff::nn::dense_forward(tape, pair, w, bias)?;
            probs.push(tape.sigmoid(logit));
        }
        let sum = tape.add(probs[0], probs[1])?;
        Ok((tape.scale(sum, 0.5), record))
    }

    /// Symmetrized keep probability of every edge, in edge order.
    pub fn predict(&self, graph: &CurvilinearGraph) -> Result<Vec<f64>, GermError> {
        if graph.edges.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let (p, _) = self.forward(&mut tape, graph)?;
        Ok(tape.value(p).data().to_vec())
    }

    pub fn metadata(&self) -> String {
        format!(
            "germ depth={} heads={} hidden={} L={} edge_weights={} reg_sign={} reg_weight={} seed={}",
            self.cfg.depth,
            self.cfg.heads,
            self.cfg.hidden,
            self.feature_len,
            self.cfg.use_edge_weights as u8,
            self.cfg.attn_reg_sign,
            self.cfg.attn_reg_weight,
            self.seed
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        save_checkpoint(&self.metadata(), &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GermError> {
        let ck = load_checkpoint(bytes)?;
        if !ck.meta.starts_with("germ ") {
            return Err(AutodiffError::Checkpoint("not a GERM checkpoint".into()).into());
        }
        let field = |k: &str| -> Result<&str, GermError> {
            ck.meta_value(k)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("metadata lacks {k}")).into())
        };
        let num = |k: &str| -> Result<f64, GermError> {
            field(k)?
                .parse::<f64>()
                .map_err(|_| AutodiffError::Checkpoint(format!("metadata {k} is not a number")).into())
        };
        let cfg = GermConfig {
            depth: num("depth")? as usize,
            heads: num("heads")? as usize,
            hidden: num("hidden")? as usize,
            use_edge_weights: num("edge_weights")? != 0.0,
            attn_reg_sign: num("reg_sign")?,
            attn_reg_weight: num("reg_weight")?,
        };
        let mut model = Self::new(cfg, num("L")? as usize, num("seed")? as u64)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

/// Label 1 iff both components overlap a common ground-truth component.
pub fn derive_edge_labels(
    graph: &mut CurvilinearGraph,
    patch: &BinaryMask,
    gt: &BinaryMask,
    connectivity: Connectivity,
) -> Result<(), GermError> {
    patch.same_dims(gt)?;
    let gt_labels = label_components(gt, connectivity);
    let owners: Vec<Vec<u32>> = graph
        .nodes
        .iter()
        .map(|n| {
            let mut ids: Vec<u32> = n
                .points
                .iter()
                .map(|&p| gt_labels.label_at(p))
                .filter(|&l| l != 0)
                .collect();
            ids.sort_unstable();
            ids.dedup();
            ids
        })
        .collect();
    for e in &mut graph.edges {
        let shared = owners[e.a].iter().any(|id| owners[e.b].binary_search(id).is_ok());
        e.label = Some(shared);
    }
    Ok(())
}

/// Stores the model's keep probability on every edge.
pub fn classify_edges(graph: &mut CurvilinearGraph, model: &GermModel) -> Result<(), GermError> {
    let probs = model.predict(graph)?;
    for (e, p) in graph.edges.iter_mut().zip(probs) {
        e.prob = Some(p);
    }
    Ok(())
}

/// Keep flags: an edge survives iff its probability is at least `threshold`.
pub fn prune_edges(graph: &CurvilinearGraph, threshold: f64) -> Result<Vec<bool>, GermError> {
    graph
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            e.prob
                .map(|p| p >= threshold)
                .ok_or(GermError::MissingProbability { graph: 0, edge: i })
        })
        .collect()
}

/// Disjoint union of graphs, node indices offset in order.
pub fn union_graph(graphs: &[&CurvilinearGraph]) -> CurvilinearGraph {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for g in graphs {
        let off = nodes.len();
        nodes.extend(g.nodes.iter().cloned());
        edges.extend(g.edges.iter().map(|e| {
            let mut e = e.clone();
            e.a += off;
            e.b += off;
            e
        }));
    }
    CurvilinearGraph::from_parts(graphs.first().map_or(2, |g| g.ndim), nodes, edges)
}

/// Positive-class weight `neg / pos`, clamped to `[1, MAX_POS_WEIGHT]`.
pub fn positive_weight(labels: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&y| y > 0.5).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 {
        1.0
    } else {
        (neg / pos).clamp(1.0, MAX_POS_WEIGHT)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
}

/// Loss of one batch: weighted BCE plus the signed head-similarity term.
fn batch_loss(model: &GermModel, tape: &mut Tape, graph: &CurvilinearGraph) -> Result<Var, GermError> {
    let (p, record) = model.forward(tape, graph)?;
    let y: Vec<f64> = graph
        .edges
        .iter()
        .map(|e| e.label.map_or(0.0, |l| l as u8 as f64))
        .collect();
    let pw = positive_weight(&y);
    let w: Vec<f64> = y.iter().map(|&v| if v > 0.5 { pw } else { 1.0 }).collect();
    let ce = tape.bce(p, &y, &w)?;
    if model.cfg.attn_reg_weight == 0.0 {
        return Ok(ce);
    }
    match attention_regularizer(tape, &record) {
        Ok(reg) => {
            let reg = tape.scale(reg, model.cfg.attn_reg_sign * model.cfg.attn_reg_weight);
            Ok(tape.add(ce, reg)?)
        }
        Err(AutodiffError::ZeroNormHead { .. }) => Ok(ce),
        Err(e) => Err(e.into()),
    }
}

/// Trains a fresh model on labeled graphs; deterministic for a fixed seed.
pub fn train_germ(
    graphs: &[CurvilinearGraph],
    cfg: GermConfig,
    train: &GermTrainConfig,
) -> Result<(GermModel, TrainReport), GermError> {
    train.validate()?;
    if graphs.is_empty() {
        return Err(GermError::EmptyDataset);
    }
    for (gi, g) in graphs.iter().enumerate() {
        if let Some(ei) = g.edges.iter().position(|e| e.label.is_none()) {
            return Err(GermError::UnlabeledEdge { graph: gi, edge: ei });
        }
    }
    let feature_len = graphs
        .iter()
        .flat_map(|g| g.nodes.first())
        .map(|n| n.features.len())
        .next()
        .unwrap_or(NODE_FEATURE_LEN);
    let mut model = GermModel::new(cfg, feature_len, train.seed)?;
    model.fit_normalization(graphs);
    let sgd = SgdConfig {
        lr: train.lr,
        momentum: train.momentum,
        weight_decay: train.weight_decay,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0001);
    let usable: Vec<usize> = (0..graphs.len()).filter(|&i| !graphs[i].edges.is_empty()).collect();
    if usable.is_empty() {
        return Err(GermError::EmptyDataset);
    }
    let mut losses = Vec::with_capacity(train.epochs);
    let mut order = usable.clone();
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(train.batch) {
            let members: Vec<&CurvilinearGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = union_graph(&members);
            let mut tape = Tape::new();
            let loss = batch_loss(&model, &mut tape, &batch)?;
            total += tape.value(loss).item();
            steps += 1;
            let grads = tape.backward(loss);
            model.store.zero_grads();
            model.store.accumulate(&tape, &grads);
            sgd_step(&mut model.store, &sgd)?;
        }
        let mean = total / steps as f64;
        debug!("germ epoch {} loss {:.5}", epoch + 1, mean);
        losses.push(mean);
    }
    info!(
        "germ trained {} epochs on {} graphs, loss {:.4} -> {:.4}",
        train.epochs,
        usable.len(),
        losses[0],
        losses[losses.len() - 1]
    );
    Ok((model, TrainReport { losses }))
}

/// Binary classification counts for the positive ("keep") class.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EdgeScores {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl EdgeScores {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores the model's pruning decisions on labeled graphs.
pub fn evaluate_edges(graphs: &[CurvilinearGraph], model: &GermModel, threshold: f64) -> Result<EdgeScores, GermError> {
    let mut s = EdgeScores::default();
    for (gi, g) in graphs.iter().enumerate() {
        let probs = model.predict(g)?;
        for (ei, (e, p)) in g.edges.iter().zip(probs).enumerate() {
            let label = e.label.ok_or(GermError::UnlabeledEdge { graph: gi, edge: ei })?;
            s.add(p >= threshold, label);
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, separate_clusters, CcmConfig};

    fn strokes() -> (BinaryMask, BinaryMask) {
        // GT: two horizontal strokes; observed: each broken once, plus a stray blob
        let mut gt = BinaryMask::new_2d(30, 40);
        for x in 2..38 {
            gt.set([0, 5, x], true);
            gt.set([0, 20, x], true);
        }
        let mut obs = gt.clone();
        for x in 15..19 {
            obs.set([0, 5, x], false);
            obs.set([0, 20, x + 5], false);
        }
        obs.set([0, 12, 30], true);
        (obs, gt)
    }

    fn labeled_graph() -> CurvilinearGraph {
        let (obs, gt) = strokes();
        let cfg = CcmConfig::default();
        let mut g = build_graph(&label_components(&obs, cfg.connectivity), &obs, &cfg).unwrap();
        derive_edge_labels(&mut g, &obs, &gt, cfg.connectivity).unwrap();
        g
    }

    #[test]
    fn labels_follow_gt_components() {
        let g = labeled_graph();
        assert_eq!(g.node_count(), 5);
        let blob = g.nodes.iter().position(|n| n.points == vec![[0, 12, 30]]).unwrap();
        for e in &g.edges {
            let same_row = g.nodes[e.a].points[0][1] == g.nodes[e.b].points[0][1];
            let expect = e.a != blob && e.b != blob && same_row;
            assert_eq!(e.label, Some(expect), "{e:?}");
        }
        let keep: Vec<bool> = g.edges.iter().map(|e| e.label.unwrap()).collect();
        assert_eq!(separate_clusters(&g, &keep).len(), 3);
    }

    #[test]
    fn zero_classifier_predicts_one_half_symmetrically() {
        let g = labeled_graph();
        let mut model = GermModel::new(
            GermConfig {
                hidden: 8,
                ..GermConfig::default()
            },
            NODE_FEATURE_LEN,
            3,
        )
        .unwrap();
        let w = model.classifier.w;
        model.store.get_mut(w).value = Tensor::zeros(&[16, 1]);
        assert!(model.predict(&g).unwrap().iter().all(|&p| p == 0.5));

        let model = GermModel::new(
            GermConfig {
                hidden: 8,
                ..GermConfig::default()
            },
            NODE_FEATURE_LEN,
            3,
        )
        .unwrap();
        let mut flipped = g.clone();
        for e in &mut flipped.edges {
            std::mem::swap(&mut e.a, &mut e.b);
        }
        let p = model.predict(&g).unwrap();
        let q = model.predict(&flipped).unwrap();
        for (x, y) in p.iter().zip(&q) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn prune_threshold_semantics() {
        let mut g = labeled_graph();
        assert!(prune_edges(&g, 0.5).is_err());
        for (i, e) in g.edges.iter_mut().enumerate() {
            e.prob = Some(if i % 2 == 0 { 0.9 } else { 0.1 });
        }
        let keep = prune_edges(&g, 0.5).unwrap();
        assert!(keep.iter().enumerate().all(|(i, &k)| k == (i % 2 == 0)));
        assert!(prune_edges(&g, 0.0).unwrap().iter().all(|&k| k));
        assert!(prune_edges(&g, 1.0 + 1e-9).unwrap().iter().all(|&k| !k));
    }

    #[test]
    fn positive_weight_is_clamped() {
        assert_eq!(positive_weight(&[1.0, 0.0, 0.0, 0.0]), 3.0);
        assert_eq!(positive_weight(&[1.0, 1.0, 0.0]), 1.0);
        assert_eq!(
            positive_weight(&[1.0; 1].iter().chain(&[0.0; 30]).copied().collect::<Vec<_>>()),
            10.0
        );
        assert_eq!(positive_weight(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let g = labeled_graph();
        let cfg = GermConfig {
            hidden: 8,
            heads: 2,
            ..GermConfig::default()
        };
        let train = GermTrainConfig {
            epochs: 3,
            batch: 1,
            ..GermTrainConfig::default()
        };
        let (m1, r1) = train_germ(&[g.clone(), g.clone()], cfg, &train).unwrap();
        let (m2, _) = train_germ(&[g.clone(), g.clone()], cfg, &train).unwrap();
        assert_eq!(m1.to_bytes(), m2.to_bytes());
        assert_eq!(r1.losses.len(), 3);
        let back = GermModel::from_bytes(&m1.to_bytes()).unwrap();
        assert_eq!(back.predict(&g).unwrap(), m1.predict(&g).unwrap());
    }

    #[test]
    fn training_errors() {
        assert_eq!(
            train_germ(&[], GermConfig::default(), &GermTrainConfig::default()).unwrap_err(),
            GermError::EmptyDataset
        );
        let (obs, _) = strokes();
        let g = build_graph(&label_components(&obs, Connectivity::Full), &obs, &CcmConfig::default()).unwrap();
        assert!(matches!(
            train_germ(&[g], GermConfig::default(), &GermTrainConfig::default()),
            Err(GermError::UnlabeledEdge { graph: 0, edge: 0 })
        ));
    }
}
