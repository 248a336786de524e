//! One distillation step and the epoch loop around it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{extractor_checkpoint, Checkpoint};
use crate::dataset::CropSample;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamSet};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

use super::augment::make_views;
use super::config::DirlConfig;
use super::loss::{composite_loss_on, dino_pair_loss_on, sharpen_and_center, LossReport};
use super::model::{DirlModel, ViewData};
use super::optim::{clip_per_tensor, cosine_schedule, AdamW};
use super::teacher::TeacherState;
use super::{RepKey, Variant};

type Logits = Vec<(RepKey, Option<Vec<f64>>)>;

/// Student, teacher and optimizer state of a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: DirlConfig,
    pub variant: Variant,
    pub aux: bool,
    pub seed: u64,
    pub model: DirlModel,
    pub student: ParamSet,
    pub teacher: TeacherState,
    pub optimizer: AdamW,
}

impl TrainState {
    /// Student initialized from `seed`; the teacher starts as a copy.
    pub fn new(config: &DirlConfig, variant: Variant, aux: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut student = ParamSet::new();
        let model = DirlModel::init(&mut student, config, variant, aux, &mut rng)?;
        let centers = model
            .heads
            .heads
            .iter()
            .map(|(k, h)| (*k, Tensor::zeros(&[h.out_dim])))
            .collect();
        Ok(TrainState {
            config: config.clone(),
            variant,
            aux,
            seed,
            teacher: TeacherState {
                params: student.clone(),
                centers,
                center_momentum: config.center_momentum,
            },
            optimizer: AdamW::new(&student),
            model,
            student,
        })
    }

    fn uses_classes(&self) -> bool {
        self.variant == Variant::CellbackV2
    }

    /// Builds network inputs for a crop's two views.
    pub fn prepare(&self, views: &super::ViewPair) -> Result<[ViewData; 2]> {
        let p = self.config.encoder.patch;
        let j = self.uses_classes().then_some(self.config.cell_types);
        Ok([
            ViewData::from_view(&views.views[0], p, j)?,
            ViewData::from_view(&views.views[1], p, j)?,
        ])
    }

    /// Metadata identifying the run, stored in every checkpoint.
    pub fn meta(&self) -> Vec<(String, String)> {
        let mut m = vec![
            ("variant".to_string(), self.variant.to_string()),
            ("aux_cell_count".to_string(), self.aux.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("step".to_string(), self.optimizer.step.to_string()),
        ];
        m.extend(self.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)));
        m
    }

    /// Student, teacher, centers and optimizer moments in one container.
    pub fn full_checkpoint(&self) -> Checkpoint {
        let mut meta = vec![("kind".to_string(), "train-state".to_string())];
        meta.extend(self.meta());
        let mut params = ParamSet::new();
        for (name, t) in self.student.iter() {
            params.add(format!("student.{name}"), t.clone());
        }
        for (name, t) in self.teacher.params.iter() {
            params.add(format!("teacher.{name}"), t.clone());
        }
        for (k, c) in &self.teacher.centers {
            params.add(format!("center.{k}"), c.clone());
        }
        for (i, (name, _)) in self.student.iter().enumerate() {
            params.add(format!("adam.m.{name}"), self.optimizer.m[i].clone());
            params.add(format!("adam.v.{name}"), self.optimizer.v[i].clone());
        }
        Checkpoint { meta, params }
    }

    /// Feature extractor taken from the teacher encoder.
    pub fn extractor_checkpoint(&self) -> Checkpoint {
        let mut extra = vec![("source".to_string(), "teacher".to_string())];
        extra.extend(
            self.meta()
                .into_iter()
                .filter(|(k, _)| matches!(k.as_str(), "variant" | "seed" | "step" | "aux_cell_count")),
        );
        extractor_checkpoint(&self.teacher.params, &self.config, &extra)
    }
}

/// Per-term statistics of a step or epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TermStat {
    pub mean: Option<f64>,
    pub evaluated: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    /// Mean composite loss over samples with signal.
    pub loss: f64,
    pub terms: BTreeMap<String, TermStat>,
    pub aux_loss: Option<f64>,
    pub samples: usize,
    pub no_signal: usize,
}

struct SampleOut {
    teacher: [Logits; 2],
    /// `None` when no term had signal.
    student: Option<(LossReport, Option<f64>, f64, Vec<(usize, Tensor)>)>,
}

fn teacher_targets(state: &TrainState, logits: &[Logits; 2]) -> Result<[BTreeMap<RepKey, Vec<f64>>; 2]> {
    let t = state.config.temps.teacher;
    let mut out = [BTreeMap::new(), BTreeMap::new()];
    for (v, l) in logits.iter().enumerate() {
        for (k, z) in l {
            if let Some(z) = z {
                let c = state.teacher.center(*k).map(|c| c.data());
                out[v].insert(*k, sharpen_and_center(z, t, c)?);
            }
        }
    }
    Ok(out)
}

/// Builds the per-sample loss on `tape` with the student bound through `b`.
/// Teacher targets enter as constants. Returns the loss node, the term
/// report and the auxiliary loss value.
pub fn sample_loss_on(
    tape: &mut Tape,
    b: &mut Binder,
    model: &DirlModel,
    cfg: &DirlConfig,
    views: &[ViewData; 2],
    targets: &[BTreeMap<RepKey, Vec<f64>>; 2],
    aux: bool,
) -> Result<(Var, LossReport, Option<f64>)> {
    let f0 = model.forward_on(tape, b, &views[0])?;
    let f1 = model.forward_on(tape, b, &views[1])?;
    let temp = cfg.temps.student;
    let (ssl, report) = composite_loss_on(tape, model.variant, &cfg.weights, cfg.cell_types, |tape, key| {
        match (f0.logits(key), f1.logits(key), targets[0].get(&key), targets[1].get(&key)) {
            (Some(s0), Some(s1), Some(t0), Some(t1)) => dino_pair_loss_on(tape, [s0, s1], [t0, t1], temp).map(Some),
            _ => Ok(None),
        }
    })?;
    match (aux && cfg.weights.aux > 0.0, f0.aux, f1.aux) {
        (true, Some(a0), Some(a1)) => {
            let l0 = tape.mse(a0, &views[0].counts)?;
            let l1 = tape.mse(a1, &views[1].counts)?;
            let la = tape.weighted_sum(&[(l0, 0.5), (l1, 0.5)])?;
            let aux_value = tape.value(la).data()[0];
            let total = tape.weighted_sum(&[(ssl, 1.0), (la, cfg.weights.aux)])?;
            Ok((total, report, Some(aux_value)))
        }
        _ => Ok((ssl, report, None)),
    }
}

fn run_sample(state: &TrainState, views: &[ViewData; 2], backward: bool) -> Result<SampleOut> {
    let teacher = [
        state.model.logits(&state.teacher.params, &views[0])?,
        state.model.logits(&state.teacher.params, &views[1])?,
    ];
    let targets = teacher_targets(state, &teacher)?;
    let mut tape = Tape::new();
    let mut b = if backward {
        Binder::trainable(&state.student)
    } else {
        Binder::frozen(&state.student)
    };
    let student = match sample_loss_on(&mut tape, &mut b, &state.model, &state.config, views, &targets, state.aux) {
        Ok((root, report, aux)) => {
            let total = tape.value(root).data()[0];
            let grads = if backward && total.is_finite() {
                tape.backward(root)?.param_grads()
            } else {
                Vec::new()
            };
            Some((report, aux, total, grads))
        }
        Err(Error::NoSignal(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SampleOut { teacher, student })
}

fn summarize(outs: &[SampleOut]) -> Result<StepMetrics> {
    let bad: Vec<usize> = outs
        .iter()
        .enumerate()
        .filter(|(_, o)| o.student.as_ref().is_some_and(|s| !s.2.is_finite()))
        .map(|(i, _)| i)
        .collect();
    if !bad.is_empty() {
        return Err(Error::NonFinite(format!("loss at batch samples {bad:?}")));
    }
    let mut m = StepMetrics {
        samples: outs.len(),
        ..Default::default()
    };
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let (mut total, mut aux_sum, mut aux_n, mut n) = (0.0, 0.0, 0usize, 0usize);
    for o in outs {
        let Some((report, aux, loss, _)) = &o.student else {
            m.no_signal += 1;
            continue;
        };
        n += 1;
        total += loss;
        if let Some(a) = aux {
            aux_sum += a;
            aux_n += 1;
        }
        for t in &report.terms {
            let e = m.terms.entry(t.key.name()).or_default();
            match t.loss {
                Some(l) => {
                    e.evaluated += 1;
                    *sums.entry(t.key.name()).or_default() += l;
                }
                None => e.skipped += 1,
            }
        }
    }
    for (k, s) in m.terms.iter_mut() {
        if s.evaluated > 0 {
            s.mean = Some(sums[k] / s.evaluated as f64);
        }
    }
    m.loss = if n > 0 { total / n as f64 } else { 0.0 };
    m.aux_loss = (aux_n > 0).then(|| aux_sum / aux_n as f64);
    Ok(m)
}

/// Mean loss of a batch under the current student, without updating anything.
pub fn evaluate_loss(state: &TrainState, batch: &[[ViewData; 2]]) -> Result<StepMetrics> {
    let outs = batch
        .par_iter()
        .map(|v| run_sample(state, v, false))
        .collect::<Result<Vec<_>>>()?;
    summarize(&outs)
}

/// Forward/backward over the batch, an optimizer step on the student, then
/// the EMA and center updates of the teacher.
///
/// Samples run in parallel; gradients are reduced in batch order, so the
/// result does not depend on the thread count.
pub fn train_step(state: &mut TrainState, batch: &[[ViewData; 2]], lr: f64, ema_momentum: f64) -> Result<StepMetrics> {
    let outs = {
        let s: &TrainState = state;
        batch
            .par_iter()
            .map(|v| run_sample(s, v, true))
            .collect::<Result<Vec<_>>>()?
    };
    let metrics = summarize(&outs)?;

    let contributing = outs.iter().filter(|o| o.student.is_some()).count();
    if contributing > 0 {
        let mut grads: Vec<Option<Tensor>> = vec![None; state.student.len()];
        for o in &outs {
            let Some((_, _, _, g)) = &o.student else { continue };
            for (slot, t) in g {
                match &mut grads[*slot] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    none => *none = Some(t.clone()),
                }
            }
        }
        let inv = 1.0 / contributing as f64;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        clip_per_tensor(&mut grads, state.config.train.clip_grad);
        let wd = state.config.train.weight_decay;
        state.optimizer.update(&mut state.student, &grads, lr, wd)?;
    }

    state.teacher.ema(&state.student, ema_momentum)?;

    let mut per_head: Vec<(RepKey, Vec<Vec<f64>>)> = state.model.heads.keys().into_iter().map(|k| (k, Vec::new())).collect();
    for o in &outs {
        for view in &o.teacher {
            for (k, z) in view {
                if let Some(z) = z {
                    let slot = per_head.iter_mut().find(|(key, _)| key == k).expect("bank key");
                    slot.1.push(z.clone());
                }
            }
        }
    }
    state.teacher.update_centers(&per_head)?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub ema_momentum: f64,
    pub loss: f64,
    pub aux_loss: Option<f64>,
    pub terms: BTreeMap<String, TermStat>,
    pub no_signal: usize,
}

pub struct PretrainResult {
    pub state: TrainState,
    pub history: Vec<EpochMetrics>,
}

/// Runs the configured number of epochs. With `out_dir`, writes
/// `epoch_XXXX.state` every `checkpoint_every` epochs and, at the end,
/// `extractor.ckpt` (teacher encoder) and `train_state.ckpt`.
pub fn pretrain(
    data: &[CropSample],
    cfg: &DirlConfig,
    variant: Variant,
    aux: bool,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<PretrainResult> {
    if data.is_empty() {
        return Err(Error::Data("pretraining dataset is empty".into()));
    }
    let mut state = TrainState::new(cfg, variant, aux, seed)?;
    let t = &cfg.train;
    let steps = data.len().div_ceil(t.batch_size);
    let lrs = cosine_schedule(t.peak_lr(), t.min_lr, t.epochs, steps, t.warmup_epochs);
    let moms = cosine_schedule(cfg.ema_start, cfg.ema_end, t.epochs, steps, 0);
    let mut history = Vec::with_capacity(t.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..t.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1 << 32, epoch as u64));
        order.shuffle(&mut rng);
        let mut acc: Vec<StepMetrics> = Vec::with_capacity(steps);
        for (s, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch = chunk
                .par_iter()
                .map(|&i| {
                    let mut r = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64, i as u64));
                    let views = make_views(&data[i].image, &data[i].centroids, &cfg.aug, &mut r)?;
                    state.prepare(&views)
                })
                .collect::<Result<Vec<_>>>()?;
            let it = epoch * steps + s;
            acc.push(train_step(&mut state, &batch, lrs[it], moms[it])?);
        }
        history.push(merge_epoch(epoch, &acc, lrs[epoch * steps], moms[epoch * steps]));
        if let Some(dir) = out_dir {
            if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 && epoch + 1 < t.epochs {
                let p = dir.join(format!("epoch_{:04}.state", epoch + 1));
                state.full_checkpoint().write(&p)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        state.extractor_checkpoint().write(&dir.join("extractor.ckpt"))?;
        state.full_checkpoint().write(&dir.join("train_state.ckpt"))?;
    }
    Ok(PretrainResult { state, history })
}

fn merge_epoch(epoch: usize, steps: &[StepMetrics], lr: f64, ema: f64) -> EpochMetrics {
    let mut terms: BTreeMap<String, TermStat> = BTreeMap::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let (mut loss, mut n, mut aux, mut aux_n, mut none) = (0.0, 0usize, 0.0, 0usize, 0usize);
    for s in steps {
        let with_signal = s.samples - s.no_signal;
        loss += s.loss * with_signal as f64;
        n += with_signal;
        none += s.no_signal;
        if let Some(a) = s.aux_loss {
            aux += a * with_signal as f64;
            aux_n += with_signal;
        }
        for (k, t) in &s.terms {
            let e = terms.entry(k.clone()).or_default();
            e.evaluated += t.evaluated;
            e.skipped += t.skipped;
            if let Some(m) = t.mean {
                *sums.entry(k.clone()).or_default() += m * t.evaluated as f64;
            }
        }
    }
    for (k, t) in terms.iter_mut() {
        if t.evaluated > 0 {
            t.mean = Some(sums[k] / t.evaluated as f64);
        }
    }
    EpochMetrics {
        epoch,
        lr,
        ema_momentum: ema,
        loss: if n > 0 { loss / n as f64 } else { 0.0 },
        aux_loss: (aux_n > 0).then(|| aux / aux_n as f64),
        terms,
        no_signal: none,
    }
}
