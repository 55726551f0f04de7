//! Training loop (backbone → pooled head → balanced BCE), inference and
//! model persistence.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::backbone::{backbone_init, Backbone, BackboneCache, BackboneGrads, ConvLayer};
use crate::error::{format_err, shape_err, Error, Result};
use crate::evaluation::roc_auc;
use crate::head::{
    balanced_bce_logits, cam_score_map, image_logits, image_logits_backward, ClassWeights, ClassifierHead,
    HeadGrads, ProbabilityMap,
};
use crate::localization::{localize_cam, localize_probability_map, BBox, BoxRecord};
use crate::pooling::{AttentionParams, PoolKind, PoolSpec};
use crate::synthetic::SynthSample;
use crate::tensor::{sigmoid, Grid, Rng, Tensor};

pub use crate::gradcheck::{gradcheck, GradcheckReport};

const SPLIT_STREAM: u64 = 0x5_917;
const HEAD_STREAM: u64 = 0x4EAD;
const EPOCH_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pooling: PoolSpec,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Share of the data held out for validation AUC.
    pub valid_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pooling: PoolSpec::Pcam,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            valid_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a frozen run
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.valid_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub head: ClassifierHead,
    pub pooling: PoolKind,
    pub spec: PoolSpec,
    /// Training resolution `(height, width)`.
    pub input_size: (usize, usize),
}

impl Model {
    pub fn init(spec: PoolSpec, num_classes: usize, input_size: (usize, usize), seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidArgument("model needs at least one class".into()));
        }
        let backbone = backbone_init(seed);
        let c = backbone.feature_channels();
        let mut rng = Rng::stream(seed, HEAD_STREAM);
        let head = ClassifierHead::init(num_classes, c, &mut rng);
        let pooling = spec.instantiate(c, &mut rng)?;
        let model = Self {
            backbone,
            head,
            pooling,
            spec,
            input_size,
        };
        model.feature_factor()?;
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    /// Upsampling factor from the feature grid back to the input.
    pub fn feature_factor(&self) -> Result<usize> {
        let (h, w) = self.input_size;
        let mut fh = h;
        let mut fw = w;
        for _ in &self.backbone.layers {
            fh = crate::backbone::output_extent(fh);
            fw = crate::backbone::output_extent(fw);
        }
        if h != w || fh == 0 || h % fh != 0 || fw * (h / fh) != w {
            return Err(shape_err(format!("input {h}x{w} does not map evenly onto the feature grid")));
        }
        Ok(h / fh)
    }

    fn image_tensor(&self, image: &Grid<f64>) -> Result<Tensor> {
        if image.dims() != self.input_size {
            return Err(shape_err(format!(
                "image is {}x{}, model was trained at {}x{}",
                image.height(),
                image.width(),
                self.input_size.0,
                self.input_size.1
            )));
        }
        Tensor::new(vec![1, image.height(), image.width()], image.data().to_vec())
    }

    pub fn features(&self, image: &Grid<f64>) -> Result<Tensor> {
        self.backbone.features(&self.image_tensor(image)?)
    }

    pub fn logits(&self, image: &Grid<f64>) -> Result<Vec<f64>> {
        image_logits(&self.pooling, &self.features(image)?, &self.head)
    }

    pub fn probabilities(&self, image: &Grid<f64>) -> Result<Vec<f64>> {
        Ok(self.logits(image)?.into_iter().map(sigmoid).collect())
    }

    /// Every trainable buffer, in a fixed order shared with [`Gradients`].
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let Self {
            backbone,
            head,
            pooling,
            ..
        } = self;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in backbone.layers.iter_mut() {
            out.push(layer.kernels.data_mut());
            out.push(&mut layer.bias);
        }
        for cls in head.classes_mut() {
            out.push(&mut cls.w);
            out.push(std::slice::from_mut(&mut cls.b));
        }
        match pooling {
            PoolKind::Attention(p) => {
                out.push(p.v.data_mut());
                out.push(&mut p.w);
            }
            PoolKind::LseLba { beta, .. } => out.push(std::slice::from_mut(beta)),
            _ => {}
        }
        out
    }

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    /// Parameters as named tensors, in file order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.layers.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), layer.kernels.clone()));
            out.push((format!("conv{}.bias", i + 1), vector(&layer.bias)));
        }
        let k = self.head.num_classes();
        let c = self.head.channels();
        let w: Vec<f64> = self.head.classes().iter().flat_map(|cls| cls.w.iter().copied()).collect();
        out.push(("head.weight".into(), Tensor::new(vec![k, c], w).expect("head shape")));
        let b: Vec<f64> = self.head.classes().iter().map(|cls| cls.b).collect();
        out.push(("head.bias".into(), vector(&b)));
        match &self.pooling {
            PoolKind::Attention(p) => {
                out.push(("attention.v".into(), p.v.clone()));
                out.push(("attention.w".into(), vector(&p.w)));
            }
            PoolKind::LseLba { beta, .. } => out.push(("lselba.beta".into(), vector(&[*beta]))),
            _ => {}
        }
        out
    }

    fn from_named(spec: PoolSpec, input_size: (usize, usize), tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let mut take = |name: &str| -> Result<Tensor> {
            match it.next() {
                Some((n, t)) if n == name => Ok(t),
                Some((n, _)) => Err(format_err("model", format!("expected tensor {name}, found {n}"))),
                None => Err(format_err("model", format!("missing tensor {name}"))),
            }
        };
        let mut layers = Vec::with_capacity(3);
        for i in 1..=3 {
            let kernels = take(&format!("conv{i}.weight"))?;
            let bias = take(&format!("conv{i}.bias"))?.into_data();
            layers.push(ConvLayer::new(kernels, bias)?);
        }
        let backbone = Backbone {
            layers: layers.try_into().expect("three layers"),
        };
        let w = take("head.weight")?;
        let b = take("head.bias")?.into_data();
        let [k, c] = w.shape() else {
            return Err(format_err("model", "head.weight must be rank 2"));
        };
        let (k, c) = (*k, *c);
        if b.len() != k || c != backbone.feature_channels() {
            return Err(format_err("model", "head shape disagrees with backbone"));
        }
        let classes = w
            .data()
            .chunks_exact(c)
            .zip(&b)
            .map(|(w, &b)| ClassWeights { w: w.to_vec(), b })
            .collect();
        let head = ClassifierHead::new(classes)?;
        let pooling = match spec {
            PoolSpec::Attention { hidden } => {
                let v = take("attention.v")?;
                let w = take("attention.w")?.into_data();
                let p = AttentionParams::new(v, w)?;
                if p.hidden() != hidden {
                    return Err(format_err("model", "attention width disagrees with pooling label"));
                }
                PoolKind::Attention(p)
            }
            PoolSpec::LseLba { gamma0 } => {
                let beta = take("lselba.beta")?.into_data();
                PoolKind::lse_lba(gamma0, beta[0])?
            }
            other => other.instantiate(c, &mut Rng::new(0))?,
        };
        let model = Self {
            backbone,
            head,
            pooling,
            spec,
            input_size,
        };
        model.feature_factor()?;
        Ok(model)
    }
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty vector")
}

/// Gradient buffers laid out like `Model::params_mut`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    fn from_parts(bg: BackboneGrads, hg: HeadGrads, pooling: &PoolKind) -> Self {
        let mut out = Vec::new();
        for (dk, db) in bg.layers {
            out.push(dk.into_data());
            out.push(db);
        }
        for (dw, db) in hg.d_w.into_iter().zip(hg.d_b) {
            out.push(dw);
            out.push(vec![db]);
        }
        if let Some((dv, dw)) = hg.d_attention {
            out.push(dv.into_data());
            out.push(dw);
        }
        if matches!(pooling, PoolKind::LseLba { .. }) {
            out.push(vec![hg.d_beta]);
        }
        Self(out)
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Batch loss (balanced BCE summed over classes) and its gradient. Samples
/// run in parallel; gradients are reduced in batch order so the result does
/// not depend on scheduling.
pub fn batch_gradient(model: &Model, images: &[&Grid<f64>], labels: &[&[bool]]) -> Result<(f64, Gradients)> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::InvalidArgument("batch needs matching, non-empty images and labels".into()));
    }
    let k = model.num_classes();
    if labels.iter().any(|l| l.len() != k) {
        return Err(shape_err(format!("every sample needs {k} labels")));
    }
    let forward: Vec<(Tensor, BackboneCache, Vec<f64>)> = images
        .par_iter()
        .map(|img| {
            let (f, cache) = model.backbone.forward(&model.image_tensor(img)?)?;
            let logits = image_logits(&model.pooling, &f, &model.head)?;
            Ok((f, cache, logits))
        })
        .collect::<Result<_>>()?;

    let n = images.len();
    let mut loss = 0.0;
    let mut d_logits = vec![vec![0.0; k]; n];
    for class in 0..k {
        let z: Vec<f64> = forward.iter().map(|f| f.2[class]).collect();
        let y: Vec<bool> = labels.iter().map(|l| l[class]).collect();
        let (l, dz) = balanced_bce_logits(&z, &y)?;
        loss += l;
        for (d, g) in d_logits.iter_mut().zip(dz) {
            d[class] = g;
        }
    }

    let per_sample: Vec<Gradients> = forward
        .par_iter()
        .zip(&d_logits)
        .map(|((f, cache, _), dl)| {
            let hg = image_logits_backward(&model.pooling, f, &model.head, dl)?;
            let bg = model.backbone.backward(cache, &hg.d_input, false)?;
            Ok(Gradients::from_parts(bg, hg, &model.pooling))
        })
        .collect::<Result<_>>()?;
    let mut iter = per_sample.into_iter();
    let mut total = iter.next().expect("non-empty batch");
    for g in iter {
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Parameters plus optimizer state. Batch order is a pure function of
/// `(seed, epoch)`, so these fields fully determine the rest of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers, shaped like the model's parameters.
    pub velocity: Model,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let velocity = model.zeroed();
        Self {
            model,
            velocity,
            epoch: 0,
            seed,
        }
    }

    /// `v ← μv + g; p ← p − ηv`.
    pub fn apply(&mut self, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        let params = self.model.params_mut();
        let vel = self.velocity.params_mut();
        if params.len() != grads.0.len() || vel.len() != grads.0.len() {
            return Err(shape_err("gradient layout does not match the model"));
        }
        for ((p, v), g) in params.into_iter().zip(vel).zip(&grads.0) {
            if p.len() != g.len() {
                return Err(shape_err("gradient buffer length mismatch"));
            }
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    /// `None` where the validation split holds a single label.
    pub valid_auc: Vec<Option<f64>>,
}

/// Train/validation indices, shuffled once by seed and then sorted.
pub fn split_indices(n: usize, seed: u64, valid_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::stream(seed, SPLIT_STREAM).shuffle(&mut idx);
    let n_valid = ((n as f64) * valid_fraction).round() as usize;
    let mut valid = idx[..n_valid].to_vec();
    let mut train = idx[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    (train, valid)
}

fn check_dataset(data: &[SynthSample]) -> Result<((usize, usize), usize)> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
    let dims = first.image.dims();
    let k = first.labels.len();
    if k == 0 {
        return Err(Error::InvalidArgument("samples carry no labels".into()));
    }
    if data.iter().any(|s| s.image.dims() != dims || s.labels.len() != k) {
        return Err(shape_err("samples differ in resolution or class count"));
    }
    Ok((dims, k))
}

/// Fresh state for `config` on `data`.
pub fn init_state(config: &TrainConfig, data: &[SynthSample]) -> Result<TrainState> {
    config.validate()?;
    let (dims, k) = check_dataset(data)?;
    Ok(TrainState::new(
        Model::init(config.pooling, k, dims, config.seed)?,
        config.seed,
    ))
}

pub fn train(config: &TrainConfig, data: &[SynthSample]) -> Result<(TrainState, Vec<EpochLog>)> {
    let mut state = init_state(config, data)?;
    let log = train_until(config, data, &mut state, config.epochs)?;
    Ok((state, log))
}

/// Continues `state` until `until_epoch` epochs are complete.
pub fn train_until(
    config: &TrainConfig,
    data: &[SynthSample],
    state: &mut TrainState,
    until_epoch: usize,
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let (dims, k) = check_dataset(data)?;
    if state.seed != config.seed {
        return Err(Error::Config(format!(
            "state was seeded with {}, config says {}",
            state.seed, config.seed
        )));
    }
    if state.model.spec != config.pooling || dims != state.model.input_size || k != state.model.num_classes() {
        return Err(Error::Config("state does not match the config or dataset".into()));
    }
    let (train_idx, valid_idx) = split_indices(data.len(), config.seed, config.valid_fraction);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("no training samples after the split".into()));
    }
    let mut log = Vec::new();
    while state.epoch < until_epoch {
        let mut order = train_idx.clone();
        Rng::stream(config.seed, EPOCH_STREAM + state.epoch as u64).shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&Grid<f64>> = chunk.iter().map(|&i| &data[i].image).collect();
            let labels: Vec<&[bool]> = chunk.iter().map(|&i| data[i].labels.as_slice()).collect();
            let (loss, grads) = batch_gradient(&state.model, &images, &labels)?;
            let finite = loss.is_finite() && grads.0.iter().flatten().all(|g| g.is_finite());
            if !finite {
                return Err(Error::Diverged {
                    epoch: state.epoch,
                    step,
                    loss,
                });
            }
            state.apply(&grads, config.lr, config.momentum)?;
            total += loss;
            steps += 1;
        }
        state.epoch += 1;
        log.push(EpochLog {
            epoch: state.epoch,
            train_loss: total / steps as f64,
            valid_auc: validation_auc(&state.model, data, &valid_idx)?,
        });
    }
    Ok(log)
}

fn validation_auc(model: &Model, data: &[SynthSample], idx: &[usize]) -> Result<Vec<Option<f64>>> {
    let k = model.num_classes();
    if idx.is_empty() {
        return Ok(vec![None; k]);
    }
    let probs: Vec<Vec<f64>> = idx
        .par_iter()
        .map(|&i| model.probabilities(&data[i].image))
        .collect::<Result<_>>()?;
    (0..k)
        .map(|class| {
            let s: Vec<f64> = probs.iter().map(|p| p[class]).collect();
            let y: Vec<bool> = idx.iter().map(|&i| data[i].labels[class]).collect();
            match roc_auc(&s, &y) {
                Ok(a) => Ok(Some(a)),
                Err(Error::AucUndefined(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Per-class output of the probability-map inference path.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassInference {
    pub class_id: usize,
    pub probability: f64,
    /// Probability map at feature resolution.
    pub probability_map: ProbabilityMap,
    /// The same map upsampled to the input resolution.
    pub heatmap: ProbabilityMap,
    pub boxes: Vec<BBox>,
}

/// Backbone, head, upsample, threshold at `tau`, box.
pub fn infer(model: &Model, image: &Grid<f64>, tau: f64) -> Result<Vec<ClassInference>> {
    let x = model.features(image)?;
    let factor = model.feature_factor()?;
    let logits = image_logits(&model.pooling, &x, &model.head)?;
    model
        .head
        .classes()
        .iter()
        .zip(logits)
        .enumerate()
        .map(|(class_id, (cls, z))| {
            let p = ProbabilityMap::from_scores(&cam_score_map(&x, &cls.w, cls.b)?);
            let (heatmap, boxes) = localize_probability_map(&p, factor, tau, class_id)?;
            Ok(ClassInference {
                class_id,
                probability: sigmoid(z),
                probability_map: p,
                heatmap,
                boxes,
            })
        })
        .collect()
}

/// Per-class output of the baseline CAM path.
#[derive(Debug, Clone, PartialEq)]
pub struct CamInference {
    pub class_id: usize,
    pub probability: f64,
    /// Normalized CAM at the input resolution.
    pub heatmap: Grid<u8>,
    pub boxes: Vec<BBox>,
}

/// Baseline path: normalize the class score map to `[0, 255]`, upsample and
/// keep values of at least 180.
pub fn infer_cam(model: &Model, image: &Grid<f64>) -> Result<Vec<CamInference>> {
    let x = model.features(image)?;
    let factor = model.feature_factor()?;
    let logits = image_logits(&model.pooling, &x, &model.head)?;
    model
        .head
        .classes()
        .iter()
        .zip(logits)
        .enumerate()
        .map(|(class_id, (cls, z))| {
            let (heatmap, boxes) = localize_cam(&cam_score_map(&x, &cls.w, cls.b)?, factor, class_id)?;
            Ok(CamInference {
                class_id,
                probability: sigmoid(z),
                heatmap,
                boxes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LocalizationPath {
    Probability { tau: f64 },
    Cam,
}

/// Boxes and image scores for a whole dataset, keyed by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Predictions {
    pub boxes: BTreeMap<String, Vec<BBox>>,
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl Predictions {
    pub fn box_records(&self) -> Vec<BoxRecord> {
        self.boxes
            .iter()
            .flat_map(|(id, bs)| {
                bs.iter().map(|b| BoxRecord {
                    image_id: id.clone(),
                    bbox: *b,
                })
            })
            .collect()
    }
}

pub fn predict(model: &Model, data: &[SynthSample], path: LocalizationPath) -> Result<Predictions> {
    let rows: Vec<(Vec<BBox>, Vec<f64>)> = data
        .par_iter()
        .map(|s| {
            Ok(match path {
                LocalizationPath::Probability { tau } => {
                    let out = infer(model, &s.image, tau)?;
                    (
                        out.iter().flat_map(|c| c.boxes.iter().copied()).collect(),
                        out.iter().map(|c| c.probability).collect(),
                    )
                }
                LocalizationPath::Cam => {
                    let out = infer_cam(model, &s.image)?;
                    (
                        out.iter().flat_map(|c| c.boxes.iter().copied()).collect(),
                        out.iter().map(|c| c.probability).collect(),
                    )
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut preds = Predictions::default();
    for (s, (b, p)) in data.iter().zip(rows) {
        preds.boxes.insert(s.image_id.clone(), b);
        preds.scores.insert(s.image_id.clone(), p);
    }
    Ok(preds)
}

const MODEL_MAGIC: &str = "pcam-model";
const CHECKPOINT_MAGIC: &str = "pcam-checkpoint";
const FORMAT_VERSION: &str = "v1";

fn header_line(magic: &str, model: &Model, extra: &[(&str, String)]) -> String {
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut line = format!(
        "{magic} {FORMAT_VERSION} pooling={} input={}x{} classes={}",
        model.spec.label(),
        model.input_size.0,
        model.input_size.1,
        model.num_classes()
    );
    for (k, v) in extra {
        line.push_str(&format!(" {k}={v}"));
    }
    line.push_str(&format!(" tensors={}\n", names.join(",")));
    line
}

fn read_header<R: BufRead>(input: &mut R, magic: &'static str) -> Result<BTreeMap<String, String>> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let mut tokens = line.trim_end_matches('\n').split(' ');
    if tokens.next() != Some(magic) {
        return Err(format_err("model", format!("expected {magic} header")));
    }
    if tokens.next() != Some(FORMAT_VERSION) {
        return Err(format_err("model", "unsupported format version"));
    }
    tokens
        .map(|t| {
            t.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format_err("model", format!("bad header field {t:?}")))
        })
        .collect()
}

fn header_field<'a>(h: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    h.get(key)
        .map(String::as_str)
        .ok_or_else(|| format_err("model", format!("header lacks {key}")))
}

fn parse_field<T: std::str::FromStr>(h: &BTreeMap<String, String>, key: &str) -> Result<T> {
    header_field(h, key)?
        .parse()
        .map_err(|_| format_err("model", format!("bad value for {key}")))
}

fn read_body<R: Read>(input: &mut R, h: &BTreeMap<String, String>) -> Result<Model> {
    let spec = PoolSpec::from_label(header_field(h, "pooling")?)?;
    let (ih, iw) = header_field(h, "input")?
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| format_err("model", "bad input size"))?;
    let classes: usize = parse_field(h, "classes")?;
    let tensors = header_field(h, "tensors")?
        .split(',')
        .map(|name| Ok((name.to_string(), Tensor::read_from(input)?)))
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_named(spec, (ih, iw), tensors)?;
    if model.num_classes() != classes {
        return Err(format_err("model", "class count disagrees with the head"));
    }
    Ok(model)
}

fn write_tensors<W: Write>(out: &mut W, model: &Model) -> Result<()> {
    for (_, t) in model.named_tensors() {
        t.write_to(out)?;
    }
    Ok(())
}

fn expect_eof<R: Read>(input: &mut R, what: &'static str) -> Result<()> {
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(format_err(what, "trailing bytes"));
    }
    Ok(())
}

/// A text header naming the pooling kind, resolution and tensor order,
/// followed by one binary tensor record per parameter.
pub fn write_model<W: Write>(mut out: W, model: &Model) -> Result<()> {
    out.write_all(header_line(MODEL_MAGIC, model, &[]).as_bytes())?;
    write_tensors(&mut out, model)?;
    out.flush()?;
    Ok(())
}

pub fn read_model<R: BufRead>(mut input: R) -> Result<Model> {
    let h = read_header(&mut input, MODEL_MAGIC)?;
    let model = read_body(&mut input, &h)?;
    expect_eof(&mut input, "model")?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    read_model(BufReader::new(File::open(path)?))
}

/// Model file with the epoch and seed in the header and the momentum
/// buffers appended.
pub fn write_checkpoint<W: Write>(mut out: W, state: &TrainState) -> Result<()> {
    let extra = [("epoch", state.epoch.to_string()), ("seed", state.seed.to_string())];
    out.write_all(header_line(CHECKPOINT_MAGIC, &state.model, &extra).as_bytes())?;
    write_tensors(&mut out, &state.model)?;
    write_tensors(&mut out, &state.velocity)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<TrainState> {
    let h = read_header(&mut input, CHECKPOINT_MAGIC)?;
    let model = read_body(&mut input, &h)?;
    let velocity = read_body(&mut input, &h)?;
    expect_eof(&mut input, "checkpoint")?;
    Ok(TrainState {
        model,
        velocity,
        epoch: parse_field(&h, "epoch")?,
        seed: parse_field(&h, "seed")?,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), state)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
