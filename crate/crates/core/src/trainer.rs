//! SGD training with the distillation losses, synthetic toy data and the
//! distillation ablation harness.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::distill::{deepgaze_loss, hint_loss, salgan_loss, TeacherBundle};
use crate::error::{Error, Result};
use crate::io::{self, DatasetManifest, ImageConfig};
use crate::metrics::{EvalTargets, FixationSet, MetricReport};
use crate::network::{BnMode, NetworkGraph, TapeBackend, WeightStore};
use crate::ops;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Hint loss against teacher intermediates (pretraining).
    Hint,
    /// Binary cross-entropy against ground truth and a SalGAN-style pseudo map.
    Salgan,
    /// KL + cosine + BCE against a DeepGaze-style pseudo distribution.
    DeepGaze,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hint" => Ok(LossKind::Hint),
            "salgan" => Ok(LossKind::Salgan),
            "deepgaze" => Ok(LossKind::DeepGaze),
            other => Err(Error::config(format!("unknown loss `{other}` (hint, salgan, deepgaze)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Hint => "hint",
            LossKind::Salgan => "salgan",
            LossKind::DeepGaze => "deepgaze",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Include the ground-truth term.
    pub use_gt: bool,
    /// Include the teacher pseudo-label term.
    pub use_teacher: bool,
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Slot-name prefixes that are never updated.
    pub frozen: Vec<String>,
    /// Stops after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Salgan,
            use_gt: true,
            use_teacher: true,
            epochs: 100,
            base_lr: 0.01,
            decay_epochs: vec![15, 30, 60],
            decay_factor: 0.1,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            frozen: Vec::new(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss != LossKind::Hint && !self.use_gt && !self.use_teacher {
            return Err(Error::config("fine-tuning needs the ground-truth term, the teacher term, or both"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("decay epochs must be strictly increasing"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.decay_factor > 0.0) {
            return Err(Error::config("learning rate and decay factor must be positive, momentum in [0, 1)"));
        }
        Ok(())
    }

    /// Hint pretraining updates the backbone and adaptation layers; fine-tuning updates everything.
    pub fn trainable(&self, slot: &str) -> bool {
        if self.frozen.iter().any(|p| slot.starts_with(p.as_str())) {
            return false;
        }
        match self.loss {
            LossKind::Hint => slot.starts_with("backbone.") || slot.starts_with("decoder.adapt"),
            _ => true,
        }
    }
}

/// Piecewise-constant rate: `base_lr * decay_factor^k` with k the number of decay epochs reached.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr * cfg.decay_factor.powi(k as i32)
}

/// Classical momentum: `v ← μv + g`, `w ← w − lr·v`.
pub fn sgd_step(weight: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, momentum: f64) -> Result<()> {
    if weight.shape() != grad.shape() || weight.shape() != velocity.shape() {
        return Err(Error::contract(format!(
            "sgd_step: weight {}, gradient {}, velocity {}",
            weight.shape(),
            grad.shape(),
            velocity.shape()
        )));
    }
    if let Some((i, g)) = grad.data().iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient {g} at index {i}")));
    }
    let (lr, mu) = (lr as f32, momentum as f32);
    for ((w, &g), v) in weight.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = mu * *v + g;
        *w -= lr * *v;
    }
    Ok(())
}

/// Momentum state keyed by slot name.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies all gradients, or none if any is non-finite.
    pub fn step(&mut self, store: &mut WeightStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::numeric(format!("non-finite gradient for `{name}`; step aborted")));
            }
        }
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            sgd_step(store.get_mut(name)?, g, v, lr, self.momentum)?;
        }
        Ok(())
    }
}

/// One training or validation image with whatever targets are available.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Normalized `1×3×H×W` input.
    pub image: Tensor,
    /// Ground-truth saliency map in [0, 1].
    pub gt: Option<Tensor>,
    pub fixations: Option<FixationSet>,
    pub teacher: TeacherBundle,
}

fn check_samples(cfg: &TrainConfig, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::config("no training samples"));
    }
    for (i, s) in samples.iter().enumerate() {
        let missing = match cfg.loss {
            LossKind::Hint => s.teacher.hints.is_empty().then_some("teacher hint features"),
            LossKind::Salgan if cfg.use_teacher && s.teacher.pseudo_map.is_none() => Some("teacher pseudo map"),
            LossKind::DeepGaze if cfg.use_teacher && s.teacher.pseudo_dist.is_none() => Some("teacher pseudo distribution"),
            _ if cfg.loss != LossKind::Hint && cfg.use_gt && s.gt.is_none() => Some("ground-truth map"),
            _ => None,
        };
        if let Some(what) = missing {
            return Err(Error::config(format!("sample {i} has no {what}, required by the {} loss", cfg.loss)));
        }
    }
    Ok(())
}

fn stack<'a>(items: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let v: Vec<&Tensor> = items.collect();
    ops::stack_batch(&v)
}

fn stack_opt<'a>(batch: &[&'a Sample], f: impl Fn(&'a Sample) -> Option<&'a Tensor>) -> Result<Tensor> {
    stack(batch.iter().map(|s| f(s).expect("checked before training")))
}

/// Records the configured loss for one batch and applies one SGD step.
///
/// Returns the batch loss before the update.
pub fn train_step(
    graph: &NetworkGraph,
    store: &mut WeightStore,
    sgd: &mut Sgd,
    cfg: &TrainConfig,
    batch: &[&Sample],
    lr: f64,
) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let x = tape.leaf(stack(batch.iter().map(|s| &s.image))?, false);
    let keep: Vec<_> = match cfg.loss {
        LossKind::Hint => graph.hints().to_vec(),
        _ => vec![graph.output()],
    };
    let mut backend = TapeBackend::new(&mut tape, store, BnMode::Train, |n| cfg.trainable(n));
    let acts = graph.run(&mut backend, vec![x], &keep)?;
    let (params, running) = backend.finish();
    let outs: Vec<Var> = keep.iter().map(|&k| *acts.get(k).expect("kept")).collect();

    let loss = match cfg.loss {
        LossKind::Hint => {
            let teacher: Vec<Tensor> = (0..outs.len())
                .map(|l| {
                    stack(batch.iter().map(|s| {
                        s.teacher
                            .hints
                            .get(l)
                            .ok_or_else(|| Error::config(format!("teacher bundle lacks hint {l}")))
                    }).collect::<Result<Vec<_>>>()?.into_iter())
                })
                .collect::<Result<_>>()?;
            let student: Vec<&Tensor> = outs.iter().map(|&v| tape.value(v)).collect();
            let teacher_refs: Vec<&Tensor> = teacher.iter().collect();
            hint_loss(&student, &teacher_refs)?.record(&mut tape, &outs)?
        }
        LossKind::Salgan => {
            let gt = cfg.use_gt.then(|| stack_opt(batch, |s| s.gt.as_ref())).transpose()?;
            let pseudo = cfg
                .use_teacher
                .then(|| stack_opt(batch, |s| s.teacher.pseudo_map.as_ref()))
                .transpose()?;
            salgan_loss(tape.value(outs[0]), gt.as_ref(), pseudo.as_ref())?.record(&mut tape, &outs)?
        }
        LossKind::DeepGaze => {
            let mut terms = Vec::new();
            if cfg.use_teacher {
                let dist = stack_opt(batch, |s| s.teacher.pseudo_dist.as_ref())?;
                terms.push(deepgaze_loss(tape.value(outs[0]), &dist)?.record(&mut tape, &outs)?);
            }
            if cfg.use_gt {
                let gt = stack_opt(batch, |s| s.gt.as_ref())?;
                terms.push(salgan_loss(tape.value(outs[0]), Some(&gt), None)?.record(&mut tape, &outs)?);
            }
            match terms.as_slice() {
                [a] => *a,
                [a, b] => tape.add(*a, *b)?,
                _ => unreachable!("validated"),
            }
        }
    };
    let value = tape.value(loss).value()? as f64;
    if !value.is_finite() {
        return Err(Error::numeric(format!("loss is {value}")));
    }
    let mut grads = tape.backward(loss)?;
    let named: Vec<(String, Tensor)> = params
        .into_iter()
        .filter(|(_, v)| tape.requires_grad(*v))
        .map(|(name, v)| {
            let g = grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            (name, g)
        })
        .collect();
    sgd.step(store, &named, lr)?;
    running.apply(store)?;
    Ok(value)
}

/// One row per completed epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
    pub val_nss: Option<f64>,
    pub val_cc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_loss,steps,val_nss,val_cc\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.lr,
                e.mean_loss,
                e.steps,
                opt(e.val_nss),
                opt(e.val_cc)
            ));
        }
        s
    }
}

/// Metrics of `sigmoid(logits)` for every sample carrying fixations or ground truth.
///
/// sAUC negatives are the pooled fixations of the other samples. IG is measured
/// against `baseline`, or a uniform map when none is given.
pub fn evaluate_samples(
    graph: &NetworkGraph,
    store: &WeightStore,
    samples: &[Sample],
    baseline: Option<&Tensor>,
) -> Result<Vec<(usize, MetricReport)>> {
    let mut reports = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.fixations.is_none() && s.gt.is_none() {
            continue;
        }
        let pred = ops::sigmoid(&graph.forward(store, &[&s.image])?);
        let shuffled = s.fixations.as_ref().and_then(|f| {
            let points: Vec<(usize, usize)> = samples
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(_, o)| o.fixations.as_ref())
                .filter(|o| (o.height, o.width) == (f.height, f.width))
                .flat_map(|o| o.points.iter().copied())
                .collect();
            if points.is_empty() {
                None
            } else {
                FixationSet::new(f.height, f.width, points).ok()
            }
        });
        let uniform = Tensor::full(pred.shape(), 1.0);
        let targets = EvalTargets {
            fixations: s.fixations.as_ref(),
            density: s.gt.as_ref(),
            shuffled: shuffled.as_ref(),
            baseline: Some(baseline.unwrap_or(&uniform)),
        };
        reports.push((i, MetricReport::compute(&pred, &targets)?));
    }
    Ok(reports)
}

/// Column means of [`evaluate_samples`] with a uniform IG baseline.
pub fn evaluate(graph: &NetworkGraph, store: &WeightStore, samples: &[Sample]) -> Result<MetricReport> {
    let rows: Vec<MetricReport> = evaluate_samples(graph, store, samples, None)?.into_iter().map(|(_, r)| r).collect();
    Ok(MetricReport::mean(&rows))
}

/// Runs the configured schedule over `samples`; `validation` feeds the NSS/CC log columns.
pub fn train(
    samples: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    graph: &NetworkGraph,
    store: &mut WeightStore,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_samples(cfg, samples)?;
    store.check(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| log.step_losses.len() >= m) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let loss = train_step(graph, store, &mut sgd, cfg, &batch, lr)?;
            losses.push(loss);
            log.step_losses.push(loss);
        }
        if losses.is_empty() {
            break 'epochs;
        }
        let (val_nss, val_cc) = if validation.is_empty() || cfg.loss == LossKind::Hint {
            (None, None)
        } else {
            let r = evaluate(graph, store, validation)?;
            (r.nss, r.cc)
        };
        let row = EpochLog {
            epoch,
            lr,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            steps: losses.len(),
            val_nss,
            val_cc,
        };
        log::info!("epoch {epoch}: lr {lr:e}, loss {:.5}", row.mean_loss);
        log.epochs.push(row);
    }
    Ok(log)
}

/// Loads every manifest record, resizing maps and rescaling fixations to the input size.
pub fn load_samples(manifest: &DatasetManifest, image: &ImageConfig) -> Result<Vec<Sample>> {
    manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let wrap = |e: Error| Error::Record {
                record: i,
                image: r.image.display().to_string(),
                message: e.to_string(),
            };
            load_record(r, image).map_err(wrap)
        })
        .collect()
}

fn fit(map: Tensor, h: usize, w: usize) -> Result<Tensor> {
    let s = map.shape();
    if (s.h, s.w) == (h, w) {
        Ok(map)
    } else {
        ops::bilinear_resize(&map, h, w)
    }
}

fn load_record(r: &io::ManifestRecord, cfg: &ImageConfig) -> Result<Sample> {
    let pnm = io::parse_pnm(&std::fs::read(&r.image).map_err(|e| Error::file(&r.image, e))?)
        .map_err(|e| e.in_file(&r.image))?;
    let image = cfg.preprocess(&pnm.to_rgb())?;
    let (h, w) = (image.shape().h, image.shape().w);
    let gt = r.gt.as_ref().map(|p| io::load_map(p).and_then(|m| fit(m, h, w))).transpose()?;
    let fixations = r
        .fix
        .as_ref()
        .map(|p| {
            let f = io::load_fixations(p, pnm.height, pnm.width)?;
            let points = f
                .points
                .iter()
                .map(|&(y, x)| (y * h / pnm.height, x * w / pnm.width))
                .collect();
            FixationSet::new(h, w, points)
        })
        .transpose()?;
    let mut teacher = match &r.teacher {
        Some(p) => io::load_teacher_bundle(p)?,
        None => TeacherBundle::default(),
    };
    if let Some(m) = teacher.pseudo_map.take() {
        teacher.pseudo_map = Some(fit(m, h, w)?);
    }
    if let Some(d) = teacher.pseudo_dist.take() {
        let d = fit(d, h, w)?;
        let sum = d.sum();
        teacher.pseudo_dist = Some(d.map(|v| v / sum));
    }
    Ok(Sample {
        image,
        gt,
        fixations,
        teacher,
    })
}

/// Loads a manifest file and its samples.
pub fn load_dataset(path: impl AsRef<Path>, image: &ImageConfig) -> Result<Vec<Sample>> {
    load_samples(&io::load_manifest(path)?, image)
}

/// Deterministic toy images: dark noisy backgrounds with one or two bright
/// blobs. The ground truth is a Gaussian bump at each blob; the pseudo map is
/// a wider version of it and the pseudo distribution its normalization.
pub fn synthetic_samples(count: usize, height: usize, width: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = ImageConfig {
        size: None,
        ..ImageConfig::default()
    };
    (0..count)
        .map(|_| {
            let blobs: Vec<(f32, f32, f32, [f32; 3])> = (0..rng.random_range(1..=2))
                .map(|_| {
                    let cy = rng.random_range(0.2..0.8) * height as f32;
                    let cx = rng.random_range(0.2..0.8) * width as f32;
                    let r = rng.random_range(0.06..0.12) * height.min(width) as f32;
                    let color = [rng.random_range(0.6..1.0), rng.random_range(0.6..1.0), rng.random_range(0.3..1.0)];
                    (cy, cx, r, color)
                })
                .collect();
            let bump = |y: usize, x: usize, widen: f32| -> f32 {
                blobs
                    .iter()
                    .map(|&(cy, cx, r, _)| {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        (-d2 / (2.0 * (r * widen).powi(2))).exp()
                    })
                    .fold(0.0, f32::max)
            };
            let noise: Vec<f32> = (0..3 * height * width).map(|_| rng.random_range(0.0..0.25)).collect();
            let rgb = Tensor::from_fn(Shape::new(1, 3, height, width), |[_, c, y, x]| {
                let mut v = noise[(c * height + y) * width + x];
                for &(cy, cx, r, color) in &blobs {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    if d2 <= r * r {
                        v = color[c];
                    }
                }
                v
            });
            let gt = Tensor::from_fn(Shape::new(1, 1, height, width), |[_, _, y, x]| bump(y, x, 1.0));
            let pseudo = Tensor::from_fn(Shape::new(1, 1, height, width), |[_, _, y, x]| bump(y, x, 1.3));
            let sum = pseudo.sum();
            let dist = pseudo.map(|v| v / sum);
            let points = blobs
                .iter()
                .map(|&(cy, cx, _, _)| (cy as usize, cx as usize))
                .collect();
            Sample {
                image: norm.preprocess(&rgb).expect("3-channel input"),
                gt: Some(gt),
                fixations: Some(FixationSet::new(height, width, points).expect("centres lie inside")),
                teacher: TeacherBundle {
                    hints: Vec::new(),
                    pseudo_map: Some(pseudo),
                    pseudo_dist: Some(dist),
                },
            }
        })
        .collect()
}

/// Fills each sample's hint features with `teacher`'s hint outputs.
pub fn attach_teacher_hints(samples: &mut [Sample], teacher: &NetworkGraph, weights: &WeightStore) -> Result<()> {
    for s in samples {
        s.teacher.hints = teacher.forward_nodes(weights, &[&s.image], teacher.hints())?;
    }
    Ok(())
}

/// The five (pretrain, finetune, gt) combinations of the distillation ablation.
pub const ABLATION_ROWS: [(bool, bool, bool); 5] = [
    (false, true, false),
    (true, true, false),
    (false, false, true),
    (false, true, true),
    (true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub pretrain: bool,
    pub finetune: bool,
    pub gt: bool,
    pub nss: f64,
    pub cc: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("pretrain,finetune,gt,nss,cc\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.pretrain, r.finetune, r.gt, r.nss, r.cc));
    }
    s
}

/// Trains each ablation configuration from `init` and scores it on `validation`.
///
/// `pretrain` must use the hint loss; `finetune` supplies the fine-tuning
/// schedule whose `use_teacher`/`use_gt` flags are overridden per row.
pub fn ablation_run(
    samples: &[Sample],
    validation: &[Sample],
    graph: &NetworkGraph,
    init: &WeightStore,
    pretrain: &TrainConfig,
    finetune: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if pretrain.loss != LossKind::Hint {
        return Err(Error::config("ablation pretraining must use the hint loss"));
    }
    if finetune.loss == LossKind::Hint {
        return Err(Error::config("ablation fine-tuning must use a saliency loss"));
    }
    let pretrained = {
        let mut w = init.clone();
        train(samples, &[], pretrain, graph, &mut w)?;
        w
    };
    ABLATION_ROWS
        .iter()
        .map(|&(pre, teacher, gt)| {
            let mut w = if pre { pretrained.clone() } else { init.clone() };
            let cfg = TrainConfig {
                use_teacher: teacher,
                use_gt: gt,
                ..finetune.clone()
            };
            train(samples, &[], &cfg, graph, &mut w)?;
            let r = evaluate(graph, &w, validation)?;
            Ok(AblationRow {
                pretrain: pre,
                finetune: teacher,
                gt,
                nss: r.nss.ok_or_else(|| Error::config("validation samples need fixations for NSS"))?,
                cc: r.cc.ok_or_else(|| Error::config("validation samples need ground truth for CC"))?,
            })
        })
        .collect()
}
