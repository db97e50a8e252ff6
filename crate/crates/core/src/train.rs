//! Toy segmentation model, SGD training loop and evaluation metrics.
//!
//! Model: 3×3 conv stem with bias, ReLU, attention block, 1×1 classifier with
//! bias, trained on mean pixelwise cross-entropy.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::attention::{self, AttentionDecomposition, BlockLeaves, BlockParams, Variant};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::io::WeightsFile;
use crate::metrics::{AttentionSource, LabelMap};
use crate::scene::{self, SceneConfig, SceneSample};
use crate::tensor::{self, FeatureMap, Tensor};

/// The model family: no block at all, or one of the attention variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Arch {
    Baseline,
    Block(Variant),
}

impl Arch {
    pub const ALL: [Arch; 7] = [
        Arch::Baseline,
        Arch::Block(Variant::NL),
        Arch::Block(Variant::PairwiseNL),
        Arch::Block(Variant::UnaryNL),
        Arch::Block(Variant::DNL),
        Arch::Block(Variant::DNLStar),
        Arch::Block(Variant::DNLDagger),
    ];

    pub fn variant(self) -> Option<Variant> {
        match self {
            Arch::Baseline => None,
            Arch::Block(v) => Some(v),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Baseline => f.write_str("None"),
            Arch::Block(v) => v.fmt(f),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(Arch::Baseline),
            _ => s.parse().map(Arch::Block),
        }
    }
}

/// `base · (1 − iter/max_iter)^power`
pub fn poly_lr(iter: usize, max_iter: usize, base: f64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Invalid(format!(
            "iteration {iter} beyond schedule end {max_iter}"
        )));
    }
    if max_iter == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Mean pixelwise cross-entropy of `[K, H, W]` logits.
pub fn cross_entropy(logits: &FeatureMap, labels: &LabelMap) -> Result<f64> {
    if logits.height() != labels.height() || logits.width() != labels.width() {
        return Err(Error::shape(
            "cross_entropy",
            logits.tensor().shape(),
            &[labels.height(), labels.width()],
        ));
    }
    Ok(tensor::cross_entropy_columns(&logits.to_matrix(), labels.labels())?.0)
}

/// Per-pixel argmax over channels; ties go to the lower class index.
pub fn argmax_labels(logits: &FeatureMap) -> Result<LabelMap> {
    let (k, hw) = (logits.channels(), logits.pixels());
    let d = logits.tensor().data();
    let labels = (0..hw)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + p] > d[best * hw + p] {
                    best = c;
                }
            }
            best
        })
        .collect();
    LabelMap::new(logits.height(), logits.width(), k.max(2), labels)
}

/// Pixel counts `[gt][pred]`, pooled over any number of maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.pixels() != gt.pixels() || pred.height() != gt.height() {
            return Err(Error::shape(
                "miou",
                &[pred.height(), pred.width()],
                &[gt.height(), gt.width()],
            ));
        }
        let k = pred.categories().max(gt.categories());
        if k > self.k {
            return Err(Error::Invalid(format!(
                "{k} categories exceed confusion size {}",
                self.k
            )));
        }
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    /// Mean IoU over classes occurring in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let k = self.k;
        let mut sum = 0.0;
        let mut present = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            let gt: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            let pred: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
            let union = gt + pred - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

pub fn miou(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let mut c = Confusion::new(pred.categories().max(gt.categories()));
    c.add(pred, gt)?;
    Ok(c.miou())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub seed: u64,
    pub iterations: usize,
    pub base_lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub channels: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub eval_every: usize,
    pub scene: SceneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Block(Variant::DNL),
            seed: 0,
            iterations: 2000,
            base_lr: 0.05,
            lr_power: 0.9,
            momentum: 0.9,
            batch_size: 1,
            channels: 16,
            train_scenes: 64,
            val_scenes: 16,
            eval_every: 500,
            scene: SceneConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "variant",
        "seed",
        "iterations",
        "base_lr",
        "lr_power",
        "momentum",
        "batch_size",
        "channels",
        "train_scenes",
        "val_scenes",
        "eval_every",
        "height",
        "width",
        "categories",
        "feature_dim",
        "noise",
        "boundary_radius",
        "min_site_distance",
        "codebook_seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scene;
        match key {
            "variant" => self.arch = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "iterations" => self.iterations = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "lr_power" => self.lr_power = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "train_scenes" => self.train_scenes = parse(key, value)?,
            "val_scenes" => self.val_scenes = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "height" => s.height = parse(key, value)?,
            "width" => s.width = parse(key, value)?,
            "categories" => s.categories = parse(key, value)?,
            "feature_dim" => s.feature_dim = parse(key, value)?,
            "noise" => s.noise = parse(key, value)?,
            "boundary_radius" => s.boundary_radius = parse(key, value)?,
            "min_site_distance" => s.min_site_distance = parse(key, value)?,
            "codebook_seed" => s.codebook_seed = parse(key, value)?,
            _ => return Err(Error::Invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in [`TrainConfig::KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let s = &self.scene;
        let values = [
            self.arch.to_string(),
            self.seed.to_string(),
            self.iterations.to_string(),
            self.base_lr.to_string(),
            self.lr_power.to_string(),
            self.momentum.to_string(),
            self.batch_size.to_string(),
            self.channels.to_string(),
            self.train_scenes.to_string(),
            self.val_scenes.to_string(),
            self.eval_every.to_string(),
            s.height.to_string(),
            s.width.to_string(),
            s.categories.to_string(),
            s.feature_dim.to_string(),
            s.noise.to_string(),
            s.boundary_radius.to_string(),
            s.min_site_distance.to_string(),
            s.codebook_seed.to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Invalid(format!(
                "base_lr must be positive, got {}",
                self.base_lr
            )));
        }
        if self.batch_size == 0 || self.train_scenes == 0 || self.eval_every == 0 {
            return Err(Error::Invalid(
                "batch_size, train_scenes and eval_every must be positive".into(),
            ));
        }
        if self.channels < 2 || !self.channels.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "channels must be even, got {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// Scene seeds for split `split` (0 = train, 1 = val) of a run.
fn scene_seeds(seed: u64, split: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split + 1);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Training and validation scenes for `cfg`.
pub fn dataset(cfg: &TrainConfig) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let gen = |split, n| -> Result<Vec<SceneSample>> {
        scene_seeds(cfg.seed, split, n)
            .into_iter()
            .map(|s| scene::generate_scene(s, &cfg.scene))
            .collect()
    };
    Ok((gen(0, cfg.train_scenes)?, gen(1, cfg.val_scenes)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub arch: Arch,
    /// `[C, C_in, 3, 3]`
    pub stem_w: Tensor,
    /// `[C, 1]`
    pub stem_b: Tensor,
    pub block: Option<BlockParams>,
    /// `[K, C]`
    pub cls_w: Tensor,
    /// `[K, 1]`
    pub cls_b: Tensor,
}

pub struct ModelLeaves {
    pub stem_w: NodeId,
    pub stem_b: NodeId,
    pub block: Option<BlockLeaves>,
    pub cls_w: NodeId,
    pub cls_b: NodeId,
}

pub struct ModelNodes {
    pub hidden: NodeId,
    pub block: Option<attention::BlockNodes>,
    pub logits: NodeId,
}

const BLOCK_PREFIX: &str = "block.";

impl ToyModel {
    /// He-initialised stem, `N(0, 1/√C)` classifier, zero biases.
    pub fn init<R: Rng + ?Sized>(
        arch: Arch,
        in_channels: usize,
        channels: usize,
        categories: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bad = |e: rand_distr::NormalError| Error::Invalid(e.to_string());
        let stem = Normal::new(0.0, (2.0 / (9 * in_channels) as f64).sqrt()).map_err(bad)?;
        let cls = Normal::new(0.0, 1.0 / (channels as f64).sqrt()).map_err(bad)?;
        let stem_w = Tensor::from_fn(&[channels, in_channels, 3, 3], |_| stem.sample(rng))?;
        let block = match arch.variant() {
            Some(v) => Some(BlockParams::init(channels, v, rng)?),
            None => None,
        };
        let cls_w = Tensor::from_fn(&[categories, channels], |_| cls.sample(rng))?;
        Ok(ToyModel {
            arch,
            stem_w,
            stem_b: Tensor::zeros(&[channels, 1]),
            block,
            cls_w,
            cls_b: Tensor::zeros(&[categories, 1]),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("stem.weight".to_string(), &self.stem_w),
            ("stem.bias".to_string(), &self.stem_b),
        ];
        if let Some(b) = &self.block {
            out.extend(
                b.tensors()
                    .into_iter()
                    .map(|(n, t)| (format!("{BLOCK_PREFIX}{n}"), t)),
            );
        }
        out.push(("classifier.weight".to_string(), &self.cls_w));
        out.push(("classifier.bias".to_string(), &self.cls_b));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("stem.weight".to_string(), &mut self.stem_w),
            ("stem.bias".to_string(), &mut self.stem_b),
        ];
        if let Some(b) = &mut self.block {
            out.push((format!("{BLOCK_PREFIX}wq"), &mut b.wq));
            out.push((format!("{BLOCK_PREFIX}wk"), &mut b.wk));
            out.push((format!("{BLOCK_PREFIX}wv"), &mut b.wv));
            if let Some(wm) = &mut b.wm {
                out.push((format!("{BLOCK_PREFIX}wm"), wm));
            }
            out.push((format!("{BLOCK_PREFIX}wout"), &mut b.wout));
        }
        out.push(("classifier.weight".to_string(), &mut self.cls_w));
        out.push(("classifier.bias".to_string(), &mut self.cls_b));
        out
    }

    pub fn leaves(&self, g: &mut Graph, trainable: bool) -> ModelLeaves {
        let mut leaf = |name: &str, t: &Tensor| {
            if trainable {
                g.param(name, t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let stem_w = leaf("stem.weight", &self.stem_w);
        let stem_b = leaf("stem.bias", &self.stem_b);
        let cls_w = leaf("classifier.weight", &self.cls_w);
        let cls_b = leaf("classifier.bias", &self.cls_b);
        let block = self
            .block
            .as_ref()
            .map(|b| b.to_graph(g, BLOCK_PREFIX, trainable));
        ModelLeaves {
            stem_w,
            stem_b,
            block,
            cls_w,
            cls_b,
        }
    }

    /// Adds one forward pass over `x` to `g`.
    pub fn apply(
        &self,
        g: &mut Graph,
        l: &ModelLeaves,
        x: &FeatureMap,
        record: bool,
    ) -> Result<ModelNodes> {
        let xs = g.constant(x.to_matrix());
        let conv = g.conv3x3(xs, l.stem_w, x.height(), x.width())?;
        let pre = g.add_col(conv, l.stem_b)?;
        let hidden = g.relu(pre)?;
        let (feat, block) = match (&l.block, self.arch.variant()) {
            (Some(bl), Some(v)) => {
                let nodes = attention::block_nodes(g, hidden, bl, v, record)?;
                (nodes.y, Some(nodes))
            }
            _ => (hidden, None),
        };
        let scores = g.matmul(l.cls_w, feat)?;
        let logits = g.add_col(scores, l.cls_b)?;
        Ok(ModelNodes {
            hidden,
            block,
            logits,
        })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let l = self.leaves(&mut g, false);
        let n = self.apply(&mut g, &l, x, false)?;
        FeatureMap::from_matrix(g.value(n.logits), x.height(), x.width())
    }

    /// Stem output after the nonlinearity, i.e. the block's input.
    pub fn block_input(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let l = self.leaves(&mut g, false);
        let n = self.apply(&mut g, &l, x, false)?;
        FeatureMap::from_matrix(g.value(n.hidden), x.height(), x.width())
    }

    pub fn predict(&self, x: &FeatureMap) -> Result<LabelMap> {
        argmax_labels(&self.forward(x)?)
    }

    /// The block's attention for input `x`; errors for the baseline.
    pub fn attention(&self, x: &FeatureMap) -> Result<AttentionDecomposition> {
        let (block, v) = match (&self.block, self.arch.variant()) {
            (Some(b), Some(v)) => (b, v),
            _ => return Err(Error::Invalid("model has no attention block".into())),
        };
        Ok(attention::block_forward(&self.block_input(x)?, block, v)?.1)
    }

    pub fn to_weights(&self, cfg: &TrainConfig) -> WeightsFile {
        WeightsFile {
            metadata: cfg.pairs(),
            tensors: self
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_weights(w: &WeightsFile) -> Result<(TrainConfig, ToyModel)> {
        let cfg = TrainConfig::from_pairs(&w.metadata)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = ToyModel::init(
            cfg.arch,
            cfg.scene.in_channels(),
            cfg.channels,
            cfg.scene.categories,
            &mut rng,
        )?;
        let expected = model.named_tensors().len();
        if w.tensors.len() != expected {
            return Err(Error::Format {
                what: "weights",
                detail: format!("expected {expected} tensors, found {}", w.tensors.len()),
            });
        }
        for (name, slot) in model.named_tensors_mut() {
            let t = w.tensor(&name).ok_or_else(|| Error::Format {
                what: "weights",
                detail: format!("missing tensor {name}"),
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("weights", t.shape(), slot.shape()));
            }
            *slot = t.clone();
        }
        Ok((cfg, model))
    }
}

/// Wraps a model with a block for the consistency table.
pub struct ModelAttention<'a>(pub &'a ToyModel);

impl AttentionSource for ModelAttention<'_> {
    fn variant(&self) -> Variant {
        self.0.arch.variant().unwrap_or(Variant::NL)
    }

    fn decompose(&self, input: &FeatureMap) -> Result<AttentionDecomposition> {
        self.0.attention(input)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_miou: f64,
    pub val_miou: f64,
}

pub const TRACE_HEADER: &str = "iter,lr,loss,train_miou,val_miou";

pub fn trace_csv(trace: &[TracePoint]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for t in trace {
        let _ = writeln!(
            out,
            "{},{:.8},{:.8},{:.6},{:.6}",
            t.iter, t.lr, t.loss, t.train_miou, t.val_miou
        );
    }
    out
}

/// Mean cross-entropy and pooled mIoU over `samples`.
pub fn evaluate(
    model: &ToyModel,
    samples: &[SceneSample],
    categories: usize,
) -> Result<(f64, f64)> {
    let mut conf = Confusion::new(categories);
    let mut loss = 0.0;
    for s in samples {
        let logits = model.forward(&s.features)?;
        loss += cross_entropy(&logits, &s.labels)?;
        conf.add(&argmax_labels(&logits)?, &s.labels)?;
    }
    Ok((loss / samples.len().max(1) as f64, conf.miou()))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    pub trace: Vec<TracePoint>,
}

impl TrainOutcome {
    pub fn final_point(&self) -> &TracePoint {
        self.trace.last().expect("trace has the initial checkpoint")
    }
}

fn diverged(iter: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { .. } => Error::Divergence {
            iter,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains a fresh model on `train`, checkpointing every `eval_every` steps.
pub fn train(
    cfg: &TrainConfig,
    train: &[SceneSample],
    val: &[SceneSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let k = cfg.scene.categories;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(100);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(101);
    let mut model = ToyModel::init(
        cfg.arch,
        cfg.scene.in_channels(),
        cfg.channels,
        k,
        &mut init_rng,
    )?;
    let mut velocity: Vec<Tensor> = model
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();

    let checkpoint = |model: &ToyModel, iter: usize| -> Result<TracePoint> {
        let (loss, train_miou) = evaluate(model, train, k)?;
        let val_miou = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(model, val, k)?.1
        };
        Ok(TracePoint {
            iter,
            lr: poly_lr(iter, cfg.iterations, cfg.base_lr, cfg.lr_power)?,
            loss,
            train_miou,
            val_miou,
        })
    };
    let mut trace = vec![checkpoint(&model, 0)?];

    for it in 0..cfg.iterations {
        let lr = poly_lr(it, cfg.iterations, cfg.base_lr, cfg.lr_power)?;
        let grads = {
            let mut g = Graph::new();
            let leaves = model.leaves(&mut g, true);
            let mut total: Option<NodeId> = None;
            for _ in 0..cfg.batch_size {
                let s = &train[batch_rng.random_range(0..train.len())];
                let nodes = model
                    .apply(&mut g, &leaves, &s.features, false)
                    .map_err(diverged(it))?;
                let ce = g
                    .cross_entropy(nodes.logits, s.labels.labels())
                    .map_err(diverged(it))?;
                total = Some(match total {
                    Some(t) => g.add(t, ce)?,
                    None => ce,
                });
            }
            let total = total.expect("batch_size > 0");
            let loss = g
                .scale(total, 1.0 / cfg.batch_size as f64)
                .map_err(diverged(it))?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence {
                    iter: it,
                    loss: value,
                });
            }
            g.backward(loss).map_err(diverged(it))?.into_named()
        };
        for ((name, w), v) in model.named_tensors_mut().into_iter().zip(&mut velocity) {
            let grad = &grads[&name];
            let step = || -> Result<(Tensor, Tensor)> {
                let nv = tensor::add(&tensor::scale(v, cfg.momentum)?, grad)?;
                let nw = tensor::sub(w, &tensor::scale(&nv, lr)?)?;
                Ok((nv, nw))
            };
            (*v, *w) = step().map_err(diverged(it))?;
        }
        let done = it + 1;
        if done % cfg.eval_every == 0 || done == cfg.iterations {
            trace.push(checkpoint(&model, done).map_err(diverged(it))?);
        }
    }
    Ok(TrainOutcome { model, trace })
}

/// Generates the dataset for `cfg` and trains on it.
pub fn train_run(cfg: &TrainConfig) -> Result<(TrainOutcome, Vec<SceneSample>, Vec<SceneSample>)> {
    let (tr, va) = dataset(cfg)?;
    let out = train(cfg, &tr, &va)?;
    Ok((out, tr, va))
}

/// One finished run of a seed sweep.
#[derive(Debug, Clone)]
pub struct SweepRun {
    pub cfg: TrainConfig,
    pub outcome: TrainOutcome,
}

/// Trains every `(arch, seed)` pair on top of `base`, using up to `threads`
/// workers. Runs are independent, so results do not depend on `threads`.
/// The output is ordered seed-major, then by `archs`.
pub fn sweep(
    base: &TrainConfig,
    archs: &[Arch],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRun>> {
    let jobs: Vec<TrainConfig> = seeds
        .iter()
        .flat_map(|&seed| {
            archs.iter().map(move |&arch| TrainConfig {
                arch,
                seed,
                ..base.clone()
            })
        })
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TrainOutcome>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = jobs.get(i) else { break };
                let r = train_run(cfg).map(|(o, _, _)| o);
                *slots[i].lock().expect("sweep slot") = Some(r);
            });
        }
    });
    jobs.into_iter()
        .zip(slots)
        .map(|(cfg, slot)| {
            let outcome = slot
                .into_inner()
                .expect("sweep slot")
                .expect("every job ran")?;
            Ok(SweepRun { cfg, outcome })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff_check, relative_error};

    fn small_cfg(arch: Arch) -> TrainConfig {
        TrainConfig {
            arch,
            iterations: 0,
            channels: 4,
            train_scenes: 2,
            val_scenes: 1,
            eval_every: 50,
            scene: SceneConfig {
                height: 8,
                width: 8,
                min_site_distance: 2.0,
                ..SceneConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn labels(k: usize, v: &[usize]) -> LabelMap {
        LabelMap::new(1, v.len(), k, v.to_vec()).unwrap()
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9).unwrap(), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9).unwrap(), 0.0);
        assert!((poly_lr(50, 100, 0.01, 0.9).unwrap() - 0.0053589).abs() < 1e-7);
        assert!(poly_lr(101, 100, 0.01, 0.9).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let l = labels(3, &[0, 2, 1, 1]);
        let uniform = FeatureMap::from_vec(3, 1, 4, vec![0.3; 12]).unwrap();
        assert!((cross_entropy(&uniform, &l).unwrap() - 3f64.ln()).abs() < 1e-12);
        let mut sat = vec![0.0; 12];
        for (p, &c) in l.labels().iter().enumerate() {
            sat[c * 4 + p] = 20.0;
        }
        let sat = FeatureMap::from_vec(3, 1, 4, sat).unwrap();
        assert!(cross_entropy(&sat, &l).unwrap() <= 1e-8);
        let one = FeatureMap::from_vec(2, 1, 1, vec![0.0, 2f64.ln()]).unwrap();
        let ce = cross_entropy(&one, &labels(2, &[1])).unwrap();
        assert!((ce - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn miou_examples() {
        let gt = labels(2, &[0, 1, 1, 1]);
        assert_eq!(miou(&gt, &gt).unwrap(), 1.0);
        let v = miou(&labels(2, &[0, 0, 1, 1]), &gt).unwrap();
        assert!((v - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(miou(&labels(3, &[0, 0]), &labels(3, &[1, 1])).unwrap(), 0.0);
    }

    #[test]
    fn argmax_ties_go_low() {
        let logits = FeatureMap::from_vec(3, 1, 2, vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&logits).unwrap().labels(), &[0, 1]);
    }

    #[test]
    fn arch_parse() {
        assert_eq!("none".parse::<Arch>().unwrap(), Arch::Baseline);
        assert_eq!("DNL".parse::<Arch>().unwrap(), Arch::Block(Variant::DNL));
        assert_eq!(Arch::Baseline.to_string(), "None");
        assert!("bogus".parse::<Arch>().is_err());
    }

    #[test]
    fn config_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.set("variant", "UnaryNL").unwrap();
        cfg.set("noise", "0.25").unwrap();
        let back = TrainConfig::from_pairs(&cfg.pairs()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("seed", "x").is_err());
    }

    #[test]
    fn zero_iterations_keep_init() {
        let cfg = small_cfg(Arch::Block(Variant::DNL));
        let (tr, va) = dataset(&cfg).unwrap();
        let out = train(&cfg, &tr, &va).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(100);
        let init = ToyModel::init(cfg.arch, 5, 4, 4, &mut rng).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn single_sample_loss_drops() {
        for arch in [
            Arch::Baseline,
            Arch::Block(Variant::DNL),
            Arch::Block(Variant::UnaryNL),
        ] {
            let cfg = TrainConfig {
                iterations: 500,
                train_scenes: 1,
                ..small_cfg(arch)
            };
            let (tr, va) = dataset(&cfg).unwrap();
            let out = train(&cfg, &tr, &va).unwrap();
            assert!(
                out.final_point().loss < out.trace[0].loss,
                "{arch}: {:?}",
                out.trace
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            iterations: 20,
            eval_every: 5,
            ..small_cfg(Arch::Block(Variant::NL))
        };
        let a = train_run(&cfg).unwrap().0;
        let b = train_run(&cfg).unwrap().0;
        assert_eq!(trace_csv(&a.trace), trace_csv(&b.trace));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn divergence_reports_iteration() {
        let cfg = TrainConfig {
            iterations: 200,
            base_lr: f64::MAX,
            ..small_cfg(Arch::Baseline)
        };
        match train_run(&cfg) {
            Err(Error::Divergence { iter, .. }) => assert!(iter < 200),
            Err(e) => panic!("expected divergence, got {e}"),
            Ok(_) => panic!("expected divergence, training finished"),
        }
    }

    #[test]
    fn weights_round_trip() {
        let cfg = TrainConfig {
            iterations: 3,
            ..small_cfg(Arch::Block(Variant::DNLStar))
        };
        let out = train_run(&cfg).unwrap().0;
        let bytes = out.model.to_weights(&cfg).to_bytes().unwrap();
        let (cfg2, model2) =
            ToyModel::from_weights(&WeightsFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(model2, out.model);
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = small_cfg(Arch::Block(Variant::DNL));
        let (tr, _) = dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = ToyModel::init(cfg.arch, 5, 4, 4, &mut rng).unwrap();
        // nonzero block weights so every leaf receives gradient
        let b = model.block.as_mut().unwrap();
        b.wout = Tensor::from_fn(b.wout.shape(), |i| ((i as f64) * 0.37).sin()).unwrap();
        b.wm = Some(Tensor::from_fn(&[1, 4], |i| 0.3 - 0.2 * i as f64).unwrap());
        let mut g = Graph::new();
        let l = model.leaves(&mut g, true);
        let n = model.apply(&mut g, &l, &tr[0].features, false).unwrap();
        let loss = g.cross_entropy(n.logits, tr[0].labels.labels()).unwrap();
        let r = finite_diff_check(&mut g, loss, 1e-4, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(relative_error(1.0, 1.0) == 0.0);
    }
}
