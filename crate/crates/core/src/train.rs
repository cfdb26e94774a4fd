//! Multi-task training: per-sample task sampling, BCE objective, AdamW with
//! a step schedule, best-by-validation checkpoint retention, and the
//! equal-weighting baseline with one shared set of trainable LoRA factors.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{slice_triplets, Label, Sample};
use crate::error::{Error, Result};
use crate::eval::ScoreSet;
use crate::hyper::{Dropout, HyperConfig, HyperNet, LoraFactors};
use crate::params::{Bound, GradMap, ParamStore};
use crate::real::Real;
use crate::rng::{self, streams, RngState, StreamRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{Backbone, BackboneConfig, DeltaSet, TapeDeltas, TapeFactors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Hypernetwork-generated task-specific factors.
    Hyperct,
    /// One shared set of directly trained factors for all tasks.
    EwBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub variant: Variant,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.0,
            lr_decay_factor: 0.1,
            lr_decay_every_epochs: 15,
            variant: Variant::Hyperct,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config("train.lr_decay_factor must lie in (0, 1]".into()));
        }
        if self.lr_decay_every_epochs == 0 {
            return Err(Error::Config("train.lr_decay_every_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("train.weight_decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// `lr · factor^⌊epoch / every⌋`
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.lr_decay_every_epochs.max(1)) as i32;
    cfg.lr * libm::pow(cfg.lr_decay_factor, steps as f64)
}

/// Uniform draw over the non-missing entries of `labels`.
pub fn sample_task(labels: &[Label], rng: &mut impl Rng) -> Result<usize> {
    let avail: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != Label::Missing)
        .map(|(k, _)| k)
        .collect();
    if avail.is_empty() {
        return Err(Error::NoAvailableTask);
    }
    Ok(avail[rng.random_range(0..avail.len())])
}

const HEAD_W: &str = "task_head.weight";
const HEAD_B: &str = "task_head.bias";

fn lora_paths(m: usize) -> (String, String) {
    (format!("lora.{m}.b"), format!("lora.{m}.a"))
}

/// A sample with its frozen token embedding precomputed.
#[derive(Clone, Debug)]
pub struct Prepared<S: Real = f32> {
    pub id: String,
    /// `[triplets·seq × D]`
    pub tokens: Tensor<S>,
    pub triplets: usize,
    pub labels: Vec<Label>,
}

/// Frozen backbone, trainable parameters and per-task heads.
pub struct Model<S: Real = f32> {
    variant: Variant,
    backbone: Backbone<S>,
    hyper: HyperNet,
    params: ParamStore<S>,
    num_tasks: usize,
}

impl<S: Real> Model<S> {
    /// Backbone from stream `BACKBONE`; hypernetwork (or shared factors)
    /// from `HYPERNET` (`BASELINE`); classifier heads start at zero.
    pub fn new(
        bb: &BackboneConfig,
        hc: &HyperConfig,
        num_tasks: usize,
        variant: Variant,
        seed: u64,
    ) -> Result<Self> {
        let backbone = Backbone::init(bb, seed)?;
        let hyper = HyperNet::new(hc, num_tasks, backbone.descriptors())?;
        let mut params = ParamStore::new();
        match variant {
            Variant::Hyperct => hyper.init_params(&mut params, &mut rng::stream(seed, streams::HYPERNET))?,
            Variant::EwBaseline => {
                let mut rng = rng::stream(seed, streams::BASELINE);
                for d in backbone.descriptors() {
                    let (b, a) = lora_paths(d.flat_index);
                    let std = 1.0 / libm::sqrt(d.d_in as f64);
                    let bv: Vec<f64> = (0..d.d_in * hc.rank).map(|_| rng::normal(&mut rng) * std).collect();
                    params.insert(b, Tensor::from_f64(&[d.d_in, hc.rank], &bv)?, true)?;
                    params.insert(a, Tensor::zeros(&[hc.rank, d.d_out]), true)?;
                }
            }
        }
        let d = bb.hidden_dim;
        params.insert(HEAD_W, Tensor::zeros(&[num_tasks, d]), true)?;
        params.insert(HEAD_B, Tensor::zeros(&[num_tasks, 1]), true)?;
        Ok(Model {
            variant,
            backbone,
            hyper,
            params,
            num_tasks,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn backbone(&self) -> &Backbone<S> {
        &self.backbone
    }

    pub fn hyper(&self) -> &HyperNet {
        &self.hyper
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    /// Same model in another precision.
    pub fn cast<T: Real>(&self) -> Result<Model<T>> {
        let mut backbone = Backbone::<T>::init(self.backbone.config(), 0)?;
        backbone.params_mut().load_values(&self.backbone.params().cast())?;
        Ok(Model {
            variant: self.variant,
            backbone,
            hyper: self.hyper.clone(),
            params: self.params.cast(),
            num_tasks: self.num_tasks,
        })
    }

    /// Overwrites trainable values from a checkpoint's parameter set, which
    /// must contain exactly this model's trainable paths.
    pub fn load_trainables(&mut self, stored: &ParamStore<S>) -> Result<()> {
        let want = self.params.trainable_paths();
        let have: Vec<String> = stored.paths().map(String::from).collect();
        if want != have {
            let missing = want.iter().find(|p| !have.contains(p));
            let extra = have.iter().find(|p| !want.contains(p));
            return Err(Error::Config(format!(
                "checkpoint parameters do not match the model (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        self.params.load_values(stored)
    }

    pub fn prepare(&self, sample: &Sample) -> Result<Prepared<S>> {
        if sample.labels.len() != self.num_tasks {
            return Err(Error::shape("labels", &[sample.labels.len()], &[self.num_tasks]));
        }
        let triplets: Vec<Tensor<S>> = slice_triplets(&sample.volume)?.iter().map(|t| t.cast()).collect();
        Ok(Prepared {
            id: sample.id.clone(),
            tokens: self.backbone.embed_images(&triplets)?,
            triplets: triplets.len(),
            labels: sample.labels.clone(),
        })
    }

    fn shared_deltas(&self, bound: &Bound) -> Result<TapeDeltas> {
        let scale = self.hyper.config().scale();
        self.backbone
            .descriptors()
            .iter()
            .map(|d| {
                let (b, a) = lora_paths(d.flat_index);
                Ok((
                    d.flat_index,
                    TapeFactors {
                        b: bound.var(&b)?,
                        a: bound.var(&a)?,
                        scale,
                    },
                ))
            })
            .collect()
    }

    /// Stacked tokens of `group` as one constant.
    fn group_tokens<'a>(&self, tape: &mut Tape<'a, S>, group: &[&Prepared<S>]) -> Result<(Var, Vec<usize>)> {
        let d = self.backbone.config().hidden_dim;
        let rows: usize = group.iter().map(|p| p.tokens.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * d);
        for p in group {
            data.extend_from_slice(p.tokens.data());
        }
        let sizes = group.iter().map(|p| p.triplets).collect();
        Ok((tape.leaf(Tensor::new(vec![rows, d], data)?), sizes))
    }

    /// Scan features `[n × D]` → logits `[n × 1]` of task `k`.
    fn head_logits<'a>(&self, tape: &mut Tape<'a, S>, bound: &Bound, feats: Var, k: usize) -> Result<Var> {
        let w = tape.gather_rows(bound.var(HEAD_W)?, &[k])?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(feats, wt)?;
        let b = tape.gather_rows(bound.var(HEAD_B)?, &[k])?;
        tape.add_row(y, b)
    }

    /// Mean sampled-task BCE over `batch` and its gradients. Tasks are drawn
    /// per sample first; samples are then grouped by task (ascending) and the
    /// factors of every drawn task are generated in one pass.
    pub fn loss_for_batch(&self, batch: &[&Prepared<S>], rng: &mut StreamRng) -> Result<(f64, GradMap<S>)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut groups: BTreeMap<usize, Vec<&Prepared<S>>> = BTreeMap::new();
        for p in batch {
            groups.entry(sample_task(&p.labels, rng)?).or_default().push(p);
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let shared = match self.variant {
            Variant::EwBaseline => Some(self.shared_deltas(&bound)?),
            Variant::Hyperct => None,
        };
        let tasks: Vec<usize> = groups.keys().copied().collect();
        let generated = match shared {
            Some(s) => vec![s; tasks.len()],
            None => self
                .hyper
                .generate_tasks_on_tape(&mut tape, &bound, &tasks, &mut Dropout::On(&mut *rng))?,
        };
        let mut parts = Vec::with_capacity(groups.len());
        for ((&k, group), deltas) in groups.iter().zip(generated) {
            let (tokens, sizes) = self.group_tokens(&mut tape, group)?;
            let cls = self.backbone.forward_tokens(&mut tape, tokens, &deltas)?;
            let feats = tape.group_mean(cls, &sizes)?;
            let logits = self.head_logits(&mut tape, &bound, feats, k)?;
            let labels: Vec<u8> = group
                .iter()
                .map(|p| p.labels[k].binary().ok_or(Error::NoAvailableTask))
                .collect::<Result<_>>()?;
            parts.push(tape.bce_with_logits_sum(logits, &labels)?);
        }
        let total = if parts.len() == 1 {
            parts[0]
        } else {
            let all = tape.concat_rows(&parts)?;
            tape.sum(all)?
        };
        let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
        let value = tape.value(loss).data()[0].to_f64();
        let mut grads = tape.backward(loss)?;
        Ok((value, self.params.collect_grads(&bound, &mut grads)))
    }

    /// Evaluation-mode deltas of task `k` (the shared set for the baseline).
    pub fn task_deltas(&self, k: usize) -> Result<DeltaSet<S>> {
        if k >= self.num_tasks {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.num_tasks,
            });
        }
        match self.variant {
            Variant::Hyperct => self.hyper.task_deltas(&self.params, k),
            Variant::EwBaseline => self.shared_factors(),
        }
    }

    fn shared_factors(&self) -> Result<DeltaSet<S>> {
        let alpha = self.hyper.config().alpha;
        self.backbone
            .descriptors()
            .iter()
            .map(|d| {
                let (b, a) = lora_paths(d.flat_index);
                let f = LoraFactors::new(self.params.get(&b)?.clone(), self.params.get(&a)?.clone(), alpha)?;
                Ok((d.flat_index, f))
            })
            .collect()
    }

    /// Scan features `[n × D]` for `samples` under fixed deltas.
    fn scan_features(&self, samples: &[&Prepared<S>], deltas: &DeltaSet<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let td = self.backbone.deltas_on_tape(&mut tape, deltas)?;
        let (tokens, sizes) = self.group_tokens(&mut tape, samples)?;
        let cls = self.backbone.forward_tokens(&mut tape, tokens, &td)?;
        let feats = tape.group_mean(cls, &sizes)?;
        Ok(tape.value(feats).clone())
    }

    fn head_values(&self, feats: &Tensor<S>, k: usize) -> Result<Vec<f64>> {
        let w = self.params.get(HEAD_W)?;
        let b = self.params.get(HEAD_B)?.data()[k].to_f64();
        let d = self.backbone.config().hidden_dim;
        let wk = &w.data()[k * d..(k + 1) * d];
        Ok(feats
            .data()
            .chunks_exact(d)
            .map(|row| b + row.iter().zip(wk).map(|(x, y)| x.to_f64() * y.to_f64()).sum::<f64>())
            .collect())
    }

    /// Logits `[sample][task]`; with `labelled_only`, entries whose label is
    /// missing are `None` and never computed.
    pub fn predict_logits(&self, samples: &[Prepared<S>], labelled_only: bool) -> Result<Vec<Vec<Option<f64>>>> {
        const CHUNK: usize = 64;
        let mut out = vec![vec![None; self.num_tasks]; samples.len()];
        let run = |k: usize, deltas: &DeltaSet<S>, idx: &[usize], out: &mut Vec<Vec<Option<f64>>>| -> Result<()> {
            for chunk in idx.chunks(CHUNK) {
                let refs: Vec<&Prepared<S>> = chunk.iter().map(|&i| &samples[i]).collect();
                let feats = self.scan_features(&refs, deltas)?;
                let tasks: Vec<usize> = if self.variant == Variant::EwBaseline { (0..self.num_tasks).collect() } else { vec![k] };
                for t in tasks {
                    for (&i, v) in chunk.iter().zip(self.head_values(&feats, t)?) {
                        if !labelled_only || samples[i].labels[t] != Label::Missing {
                            out[i][t] = Some(v);
                        }
                    }
                }
            }
            Ok(())
        };
        match self.variant {
            Variant::EwBaseline => {
                let deltas = self.shared_factors()?;
                let idx: Vec<usize> = (0..samples.len())
                    .filter(|&i| !labelled_only || samples[i].labels.iter().any(|l| *l != Label::Missing))
                    .collect();
                run(0, &deltas, &idx, &mut out)?;
            }
            Variant::Hyperct => {
                for k in 0..self.num_tasks {
                    let deltas = self.hyper.task_deltas(&self.params, k)?;
                    let idx: Vec<usize> = (0..samples.len())
                        .filter(|&i| !labelled_only || samples[i].labels[k] != Label::Missing)
                        .collect();
                    run(k, &deltas, &idx, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Masked per-task logit scores of `samples`.
    pub fn score_set(&self, samples: &[Prepared<S>]) -> Result<ScoreSet> {
        let logits = self.predict_logits(samples, true)?;
        let mut set = ScoreSet::new(self.num_tasks);
        for (p, row) in samples.iter().zip(&logits) {
            for (k, l) in p.labels.iter().enumerate() {
                if let (Some(y), Some(z)) = (l.binary(), row[k]) {
                    set.tasks[k].push(z, y);
                }
            }
        }
        Ok(set)
    }
}

/// Per-parameter first/second moments and step count.
#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Adam with decoupled weight decay (β = (0.9, 0.999), ε = 1e-8). Decay is
/// applied first, `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    /// Updates every parameter present in `grads`; parameters without a
    /// gradient are left alone. Nothing is modified if any key is invalid.
    pub fn step<S: Real>(&mut self, params: &mut ParamStore<S>, grads: &GradMap<S>, lr: f64) -> Result<()> {
        for (path, g) in grads {
            match params.is_trainable(path) {
                None => return Err(Error::UnknownParam(path.clone())),
                Some(false) => return Err(Error::FrozenGradient(path.clone())),
                Some(true) => {}
            }
            let p = params.get(path)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()));
            }
        }
        for (path, g) in grads {
            let p = params.get_mut(path)?;
            let st = self.state.entry(path.clone()).or_default();
            if st.m.is_empty() {
                st.m = vec![0.0; g.numel()];
                st.v = vec![0.0; g.numel()];
            }
            st.step += 1;
            let bc1 = 1.0 - libm::pow(self.beta1, st.step as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, st.step as f64);
            let decay = 1.0 - lr * self.weight_decay;
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((x, gi), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                let gi = gi.to_f64();
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let upd = x.to_f64() * decay - lr * (*m / bc1) / (libm::sqrt(*v / bc2) + eps);
                *x = S::from_f64(upd);
            }
            p.ensure_finite("optimizer step")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc_per_task: Vec<Option<f64>>,
    pub val_auc_mean: Option<f64>,
}

/// Trainable parameters after `epoch` completed epochs, plus the training
/// generator position at that point.
#[derive(Clone, Debug)]
pub struct Checkpoint<S: Real = f32> {
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore<S>,
}

pub struct TrainOutcome<S: Real = f32> {
    pub best: Checkpoint<S>,
    pub log: Vec<EpochRecord>,
}

/// Trains `model` in place and returns the best-by-validation checkpoint.
/// Training samples with no available label are skipped. `on_epoch` sees every record as soon as it is produced.
pub fn train<S: Real>(
    model: &mut Model<S>,
    train_set: &[Prepared<S>],
    val_set: &[Prepared<S>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut rng = rng::stream(cfg.seed, streams::TRAIN);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut best = Checkpoint {
        epoch: 0,
        rng: RngState::capture(&rng),
        params: model.params.trainable_subset(),
    };
    let mut best_auc = f64::NEG_INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);
    // rows with every label missing carry no supervision
    let mut order: Vec<usize> = (0..train_set.len())
        .filter(|&i| train_set[i].labels.iter().any(|l| *l != Label::Missing))
        .collect();
    if order.is_empty() {
        return Err(Error::Empty("labelled training samples"));
    }
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared<S>> = idx.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = model.loss_for_batch(&batch, &mut rng)?;
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut model.params, &grads, lr)?;
        }
        if !loss_sum.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        let (per, mean) = model.score_set(val_set)?.auc_summary()?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / order.len() as f64,
            val_auc_per_task: per,
            val_auc_mean: mean,
        };
        on_epoch(&rec);
        if let Some(m) = mean {
            if m > best_auc {
                best_auc = m;
                best = Checkpoint {
                    epoch: epoch + 1,
                    rng: RngState::capture(&rng),
                    params: model.params.trainable_subset(),
                };
            }
        }
        log.push(rec);
    }
    Ok(TrainOutcome { best, log })
}
