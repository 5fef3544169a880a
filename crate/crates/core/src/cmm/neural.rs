//! Learned 2D merger: twin convolutional encoders over the fragment crop and
//! the image crop, fused at the bottleneck, decoded with skip connections.

use super::{cluster_patch, cmm_loss, extract_cluster_rois, CmmError, EdgeJudge, MergeInput, MergeOutput, Provenance};
use crate::autodiff::nn::{bce_loss, ConvParams};
use crate::autodiff::{
    load_checkpoint, save_checkpoint, sgd_step, AutodiffError, Gradients, ParamStore, SgdConfig, Tape, Tensor, Var,
};
use crate::graph::CcmConfig;
use crate::raster::{label_components, tile_patches, BinaryMask, GrayImage};
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Side of the square canvas the merger runs on.
pub const MERGER_SIDE: usize = 64;
const LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergerConfig {
    /// Channels of the first encoder level; doubled at each downsampling.
    pub base_channels: usize,
}

impl Default for MergerConfig {
    fn default() -> Self {
        Self { base_channels: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergerTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MergerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 10,
            lr: 1e-4,
            momentum: 0.99,
            weight_decay: 1e-4,
            seed: 7,
        }
    }
}

impl MergerTrainConfig {
    pub fn validate(&self) -> Result<(), CmmError> {
        let bad = |m: &str| Err(CmmError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Encoder {
    convs: Vec<ConvParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergerModel {
    pub cfg: MergerConfig,
    pub seed: u64,
    pub trained: bool,
    pub store: ParamStore,
    fragment_enc: Encoder,
    image_enc: Encoder,
    fuse: ConvParams,
    decoder: Vec<ConvParams>,
    head: ConvParams,
}

/// Crop-to-canvas mapping: an integer downsampling factor, then zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Canvas {
    factor: usize,
}

impl Canvas {
    fn for_crop(h: usize, w: usize) -> Self {
        Self {
            factor: h.max(w).div_ceil(MERGER_SIDE).max(1),
        }
    }

    fn fragments(&self, m: &BinaryMask) -> Vec<f64> {
        let [_, h, w] = m.shape();
        let mut out = vec![0.0; MERGER_SIDE * MERGER_SIDE];
        for y in 0..h {
            for x in 0..w {
                if m.get([0, y as i32, x as i32]) {
                    out[(y / self.factor) * MERGER_SIDE + x / self.factor] = 1.0;
                }
            }
        }
        out
    }

    fn image(&self, img: &GrayImage) -> Vec<f64> {
        let [_, h, w] = img.shape();
        let mut out = vec![0.0; MERGER_SIDE * MERGER_SIDE];
        let mut count = vec![0usize; MERGER_SIDE * MERGER_SIDE];
        for y in 0..h {
            for x in 0..w {
                let c = (y / self.factor) * MERGER_SIDE + x / self.factor;
                out[c] += img.get([0, y as i32, x as i32]) as f64;
                count[c] += 1;
            }
        }
        for (v, &n) in out.iter_mut().zip(&count) {
            if n > 0 {
                *v /= n as f64;
            }
        }
        out
    }

    /// Canvas values read back at every crop voxel.
    fn to_crop(self, canvas: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                out.push(canvas[(y / self.factor) * MERGER_SIDE + x / self.factor]);
            }
        }
        out
    }
}

fn canvas_tensor(data: Vec<f64>) -> Tensor {
    Tensor::new(&[1, MERGER_SIDE, MERGER_SIDE], data).expect("canvas size")
}

fn require_2d(m: &BinaryMask) -> Result<(), CmmError> {
    if m.ndim() != 2 {
        return Err(CmmError::UnsupportedDims(m.ndim()));
    }
    Ok(())
}

impl MergerModel {
    pub fn new(cfg: MergerConfig, seed: u64) -> Result<Self, CmmError> {
        if cfg.base_channels == 0 {
            return Err(CmmError::InvalidConfig("base_channels must be positive".into()));
        }
        let c = cfg.base_channels;
        let widths: Vec<usize> = (0..LEVELS).map(|l| c << l).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut encoder = |name: &str, store: &mut ParamStore| {
            let mut convs = Vec::new();
            let mut inputs = 1;
            for (l, &w) in widths.iter().enumerate() {
                convs.push(ConvParams::new(store, &format!("{name}.conv{l}"), inputs, w, &mut rng));
                inputs = w;
            }
            Encoder { convs }
        };
        let fragment_enc = encoder("enc_fragments", &mut store);
        let image_enc = encoder("enc_image", &mut store);
        let top = widths[LEVELS - 1];
        let fuse = ConvParams::new(&mut store, "fuse", 2 * top, top, &mut rng);
        let mut decoder = Vec::new();
        let mut inputs = top;
        for l in (0..LEVELS).rev() {
            let out = widths[l.saturating_sub(1)];
            decoder.push(ConvParams::new(
                &mut store,
                &format!("dec{l}"),
                inputs + widths[l],
                out,
                &mut rng,
            ));
            inputs = out;
        }
        let head = ConvParams::new(&mut store, "head", inputs, 1, &mut rng);
        Ok(Self {
            cfg,
            seed,
            trained: false,
            store,
            fragment_enc,
            image_enc,
            fuse,
            decoder,
            head,
        })
    }

    fn encode(&self, tape: &mut Tape, enc: &Encoder, x: Var) -> Result<(Var, Vec<Var>), CmmError> {
        let mut skips = Vec::with_capacity(LEVELS);
        let mut h = x;
        for conv in &enc.convs {
            let f = conv.forward(tape, &self.store, h)?;
            skips.push(f);
            h = tape.max_pool2(f)?;
        }
        Ok((h, skips))
    }

    /// Foreground probabilities `[1, S, S]` of one canvas pair.
    fn forward(&self, tape: &mut Tape, fragments: Tensor, image: Tensor) -> Result<Var, CmmError> {
        let xf = tape.leaf(fragments);
        let xi = tape.leaf(image);
        let (bf, skips) = self.encode(tape, &self.fragment_enc, xf)?;
        let (bi, _) = self.encode(tape, &self.image_enc, xi)?;
        let fused = tape.concat_first(bf, bi)?;
        let mut h = self.fuse.forward(tape, &self.store, fused)?;
        for (conv, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = tape.upsample2(h)?;
            let cat = tape.concat_first(up, *skip)?;
            h = conv.forward(tape, &self.store, cat)?;
        }
        let w = tape.param(&self.store, self.head.w);
        let b = tape.param(&self.store, self.head.b);
        let logits = tape.conv2d(h, w, b)?;
        Ok(tape.sigmoid(logits))
    }

    fn canvases(input: &MergeInput) -> (Canvas, Tensor, Tensor) {
        let [_, h, w] = input.fragments.shape();
        let canvas = Canvas::for_crop(h, w);
        let f = canvas_tensor(canvas.fragments(&input.fragments));
        let i = canvas_tensor(canvas.image(&input.image));
        (canvas, f, i)
    }

    /// Raw network probabilities at every crop voxel.
    pub fn probabilities(&self, input: &MergeInput) -> Result<Vec<f64>, CmmError> {
        require_2d(&input.fragments)?;
        let (canvas, f, i) = Self::canvases(input);
        let mut tape = Tape::new();
        let p = self.forward(&mut tape, f, i)?;
        let [_, h, w] = input.fragments.shape();
        Ok(canvas.to_crop(tape.value(p).data(), h, w))
    }

    /// Thresholded prediction OR-ed with the input fragments.
    pub fn merge(&self, input: &MergeInput) -> Result<MergeOutput, CmmError> {
        if !self.trained {
            return Err(CmmError::UntrainedModel);
        }
        let probs = self.probabilities(input)?;
        Ok(finish(input, probs))
    }

    pub fn metadata(&self) -> String {
        format!(
            "merger base={} seed={} trained={}",
            self.cfg.base_channels, self.seed, self.trained as u8
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        save_checkpoint(&self.metadata(), &self.store)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CmmError> {
        let ck = load_checkpoint(bytes)?;
        if !ck.meta.starts_with("merger ") {
            return Err(AutodiffError::Checkpoint("not a merger checkpoint".into()).into());
        }
        let num = |k: &str| -> Result<u64, CmmError> {
            ck.meta_value(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AutodiffError::Checkpoint(format!("metadata {k} missing or malformed")).into())
        };
        let mut model = Self::new(
            MergerConfig {
                base_channels: num("base")? as usize,
            },
            num("seed")?,
        )?;
        model.trained = num("trained")? != 0;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

/// Output whose fragments are forced to foreground with probability one.
fn finish(input: &MergeInput, mut probs: Vec<f64>) -> MergeOutput {
    let mut merged = input.fragments.clone();
    for (i, p) in probs.iter_mut().enumerate() {
        if merged.get_index(i) {
            *p = 1.0;
        } else if *p >= super::MERGE_THRESHOLD {
            merged.set_index(i, true);
        }
    }
    MergeOutput {
        merged,
        bbox: input.bbox,
        provenance: Provenance::Learned,
        probabilities: Some(probs),
    }
}

/// Ruptured cluster crop and the clean structure it should become.
#[derive(Debug, Clone, PartialEq)]
pub struct MergePair {
    pub input: MergeInput,
    pub target: BinaryMask,
}

/// Training pairs from one ruptured/clean mask pair: every multi-fragment
/// cluster found with ground-truth edge labels, targeted at the clean
/// components its fragments belong to.
pub fn merge_training_pairs(
    ruptured: &BinaryMask,
    clean: &BinaryMask,
    image: Option<&GrayImage>,
    ccm: &CcmConfig,
) -> Result<Vec<MergePair>, CmmError> {
    require_2d(ruptured)?;
    ruptured.same_dims(clean)?;
    let (layout, patches) = tile_patches(ruptured);
    let clean_patches = layout.extract(clean);
    let image_patches = image.map(|img| layout.extract_gray(img));
    let mut pairs = Vec::new();
    for (pi, patch) in patches.iter().enumerate() {
        let labeling = label_components(patch, ccm.connectivity);
        if labeling.components.len() < 2 {
            continue;
        }
        let gt = &clean_patches[pi];
        let (_, clusters) = cluster_patch(&labeling, patch, &EdgeJudge::Oracle(gt), ccm)?;
        let gt_labels = label_components(gt, ccm.connectivity);
        for (ci, members) in clusters.clusters.iter().enumerate() {
            if members.len() < 2 {
                continue;
            }
            let img = image_patches.as_ref().map(|v| &v[pi]);
            let input = extract_cluster_rois(ci, members, &labeling, patch, img)?;
            let mut owners: Vec<u32> = members
                .iter()
                .flat_map(|&m| labeling.components[m].points.iter().map(|&p| gt_labels.label_at(p)))
                .filter(|&l| l != 0)
                .collect();
            owners.sort_unstable();
            owners.dedup();
            let mut target = BinaryMask::zeros(&input.bbox.dims())?;
            let o = input.bbox.min;
            for &id in &owners {
                for p in &gt_labels.components[id as usize - 1].points {
                    if input.bbox.contains(*p) {
                        target.set([p[0] - o[0], p[1] - o[1], p[2] - o[2]], true);
                    }
                }
            }
            pairs.push(MergePair { input, target });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergerTrainReport {
    /// Mean reported loss over the training pairs after each epoch.
    pub losses: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Gradient of one pair's cross-entropy scaled by `scale`.
fn pair_gradients(model: &MergerModel, pair: &MergePair, scale: f64) -> Result<(Tape, Gradients), CmmError> {
    let (canvas, f, i) = MergerModel::canvases(&pair.input);
    let target = canvas_tensor(canvas.fragments(&pair.target));
    let mut tape = Tape::new();
    let p = model.forward(&mut tape, f, i)?;
    let ce = bce_loss(&mut tape, p, target.data())?;
    let scaled = tape.scale(ce, scale);
    let grads = tape.backward(scaled);
    Ok((tape, grads))
}

/// Cross-entropy of the raw canvas plus polyline and connectivity terms of the
/// post-processed crop.
pub fn reported_loss(model: &MergerModel, pair: &MergePair) -> Result<f64, CmmError> {
    let (canvas, f, i) = MergerModel::canvases(&pair.input);
    let target = canvas_tensor(canvas.fragments(&pair.target));
    let mut tape = Tape::new();
    let p = model.forward(&mut tape, f, i)?;
    let ce = bce_loss(&mut tape, p, target.data())?;
    let [_, h, w] = pair.input.fragments.shape();
    let out = finish(&pair.input, canvas.to_crop(tape.value(p).data(), h, w));
    let terms = cmm_loss(
        out.probabilities.as_deref().expect("learned output"),
        &pair.target,
        pair.input.connectivity,
    )?;
    Ok(tape.value(ce).item() + terms.polyline + terms.connectivity)
}

/// Trains a fresh merger; the parameters of the epoch with the lowest reported
/// loss are returned. Cross-entropy is the only term with a gradient.
pub fn train_merger(
    pairs: &[MergePair],
    cfg: MergerConfig,
    train: &MergerTrainConfig,
) -> Result<(MergerModel, MergerTrainReport), CmmError> {
    train.validate()?;
    let usable: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].target.count_ones() > 0).collect();
    if usable.is_empty() {
        return Err(CmmError::EmptyDataset);
    }
    for &i in &usable {
        require_2d(&pairs[i].input.fragments)?;
    }
    let mut model = MergerModel::new(cfg, train.seed)?;
    let sgd = SgdConfig {
        lr: train.lr,
        momentum: train.momentum,
        weight_decay: train.weight_decay,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_0002);
    let mut order = usable.clone();
    let mut losses = Vec::with_capacity(train.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch) {
            let scale = 1.0 / chunk.len() as f64;
            let steps: Vec<(Tape, Gradients)> = chunk
                .par_iter()
                .map(|&i| pair_gradients(&model, &pairs[i], scale))
                .collect::<Result<_, _>>()?;
            model.store.zero_grads();
            for (tape, grads) in &steps {
                model.store.accumulate(tape, grads);
            }
            sgd_step(&mut model.store, &sgd)?;
        }
        let reported: Vec<f64> = usable
            .par_iter()
            .map(|&i| reported_loss(&model, &pairs[i]))
            .collect::<Result<_, _>>()?;
        let mean = reported.iter().sum::<f64>() / reported.len() as f64;
        debug!("merger epoch {} loss {:.5}", epoch + 1, mean);
        losses.push(mean);
        if best.as_ref().is_none_or(|b| mean < b.0) {
            best = Some((mean, epoch, model.store.clone()));
        }
    }
    let (_, best_epoch, store) = best.expect("at least one epoch");
    model.store = store;
    model.trained = true;
    info!(
        "merger trained {} epochs on {} pairs, best epoch {}",
        train.epochs,
        usable.len(),
        best_epoch + 1
    );
    Ok((model, MergerTrainReport { losses, best_epoch }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{Connectivity, Point};

    fn gap_pair(row: i32, gap: (i32, i32)) -> MergePair {
        let frag: Vec<Point> = (2..30)
            .filter(|x| *x < gap.0 || *x > gap.1)
            .map(|x| [0, row, x])
            .collect();
        let full: Vec<Point> = (2..30).map(|x| [0, row, x]).collect();
        let m = BinaryMask::from_points(&[32, 32], &frag).unwrap();
        let mut img = GrayImage::zeros(&[32, 32]).unwrap();
        for p in &full {
            img.set(*p, 0.8);
        }
        let labeling = label_components(&m, Connectivity::Full);
        let members: Vec<usize> = (0..labeling.components.len()).collect();
        let input = extract_cluster_rois(0, &members, &labeling, &m, Some(&img)).unwrap();
        let o = input.bbox.min;
        let target_pts: Vec<Point> = full.iter().map(|p| [0, p[1] - o[1], p[2] - o[2]]).collect();
        let target = BinaryMask::from_points(&input.bbox.dims(), &target_pts).unwrap();
        MergePair { input, target }
    }

    fn hard(m: &BinaryMask) -> Vec<f64> {
        (0..m.len()).map(|i| if m.get_index(i) { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn untrained_model_refuses_to_merge() {
        let model = MergerModel::new(MergerConfig::default(), 1).unwrap();
        let pair = gap_pair(10, (14, 17));
        assert_eq!(model.merge(&pair.input).unwrap_err(), CmmError::UntrainedModel);
        let p = model.probabilities(&pair.input).unwrap();
        assert_eq!(p.len(), pair.input.fragments.len());
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_volumes() {
        let m = BinaryMask::from_points(&[8, 8, 8], &[[1, 1, 1], [1, 1, 5]]).unwrap();
        let labeling = label_components(&m, Connectivity::Full);
        let input = extract_cluster_rois(0, &[0, 1], &labeling, &m, None).unwrap();
        let mut model = MergerModel::new(MergerConfig::default(), 1).unwrap();
        model.trained = true;
        assert_eq!(model.merge(&input).unwrap_err(), CmmError::UnsupportedDims(3));
    }

    #[test]
    fn output_contains_fragments_and_checkpoint_round_trips() {
        let mut model = MergerModel::new(MergerConfig { base_channels: 4 }, 3).unwrap();
        model.trained = true;
        let pair = gap_pair(12, (10, 13));
        let out = model.merge(&pair.input).unwrap();
        assert!(pair.input.fragments.is_subset_of(&out.merged));
        assert_eq!(out.provenance, Provenance::Learned);
        let probs = out.probabilities.unwrap();
        for i in 0..probs.len() {
            assert_eq!(probs[i] >= crate::cmm::MERGE_THRESHOLD, out.merged.get_index(i));
        }
        let back = MergerModel::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(back, model);
        assert_eq!(
            back.probabilities(&pair.input).unwrap(),
            model.probabilities(&pair.input).unwrap()
        );
    }

    #[test]
    fn short_training_closes_gaps() {
        let pairs: Vec<MergePair> = [(8, (12, 15)), (14, (17, 19)), (20, (9, 12)), (24, (15, 18))]
            .iter()
            .map(|&(r, g)| gap_pair(r, g))
            .collect();
        let train = MergerTrainConfig {
            epochs: 12,
            batch: 2,
            lr: 0.05,
            momentum: 0.9,
            ..Default::default()
        };
        let (model, report) = train_merger(&pairs, MergerConfig { base_channels: 4 }, &train).unwrap();
        assert_eq!(report.losses.len(), 12);
        assert!(report.losses[report.best_epoch] < report.losses[0]);
        let (mut before, mut after) = (0.0, 0.0);
        for pair in &pairs {
            let c = pair.input.connectivity;
            before += cmm_loss(&hard(&pair.input.fragments), &pair.target, c).unwrap().total;
            let out = model.merge(&pair.input).unwrap();
            after += cmm_loss(out.probabilities.as_deref().unwrap(), &pair.target, c)
                .unwrap()
                .total;
        }
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn training_is_reproducible() {
        let pairs = vec![gap_pair(9, (12, 15)), gap_pair(20, (8, 10))];
        let train = MergerTrainConfig {
            epochs: 2,
            batch: 1,
            ..Default::default()
        };
        let cfg = MergerConfig { base_channels: 2 };
        let (a, _) = train_merger(&pairs, cfg, &train).unwrap();
        let (b, _) = train_merger(&pairs, cfg, &train).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(train_merger(&[], cfg, &train).unwrap_err(), CmmError::EmptyDataset);
    }
}
