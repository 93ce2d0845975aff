//! Two-stage training: stage 1 tunes encoder and projector with the decoder
//! frozen plus EMA-teacher self-distillation; stage 2 tunes projector and
//! decoder with the encoder frozen.
//!
//! Stage 0 is an optional decoder warm-up that trains every partition on
//! captioning; its decoder then stands in for a pretrained language model
//! when stage 1 starts from freshly initialized vision weights.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use finegrain_autodiff::{Checkpoint, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bbox::NormBBox;
use crate::curation::{QaSample, Task};
use crate::error::{Error, Result};
use crate::geometry::{crop_resize, roi_align_plan, Image};
use crate::imageio::load_png;
use crate::vlm::{is_norm_or_bias, Partition, Vlm, VlmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Also decay LayerNorm parameters and biases.
    pub decay_norm_and_bias: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_norm_and_bias: false,
        }
    }
}

/// Learning-rate schedule over a stage's `steps`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at the first step down to 0 after the last.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub stage: u8,
    pub lambda: f64,
    pub alpha: f64,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Task sampling weights; `None` uses the stage's default mix.
    pub task_mix: Option<BTreeMap<Task, f64>>,
    pub adamw: AdamWConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// ROIAlign samples per bin side in the distillation branch.
    pub roi_sampling: usize,
    /// Computes the distillation branch in stage 1.
    pub distill: bool,
    /// Periodic evaluation interval in steps; 0 disables it.
    pub eval_every: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl StageConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            lambda: 1.0,
            alpha: 0.9,
            lr: 1e-3,
            lr_schedule: LrSchedule::Constant,
            steps: 300,
            batch_size: 8,
            seed: 0,
            task_mix: None,
            adamw: AdamWConfig::default(),
            grad_clip: None,
            roi_sampling: 2,
            distill: true,
            eval_every: 0,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            ..Self::stage1()
        }
    }

    pub fn stage0() -> Self {
        Self {
            stage: 0,
            ..Self::stage1()
        }
    }

    pub fn for_stage(stage: u8) -> Self {
        Self {
            stage,
            ..Self::stage1()
        }
    }

    /// Learning rate for the update taken at zero-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = step.min(self.steps) as f64 / self.steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn mix(&self) -> BTreeMap<Task, f64> {
        self.task_mix.clone().unwrap_or_else(|| {
            let regional = if self.stage <= 1 {
                Task::Bbox2Caption
            } else {
                Task::Caption2Bbox
            };
            BTreeMap::from([(Task::GlobalCaption, 1.0), (regional, 1.0)])
        })
    }

    pub fn trainable(&self) -> &'static [Partition] {
        if self.stage == 0 {
            &[Partition::Encoder, Partition::Projector, Partition::Decoder]
        } else if self.stage == 1 {
            &[Partition::Encoder, Partition::Projector]
        } else {
            &[Partition::Projector, Partition::Decoder]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage > 2 {
            return Err(Error::config(format!("stage must be 0, 1 or 2, got {}", self.stage)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1), got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lr >= 0.0) {
            return Err(Error::config("lambda and lr must be non-negative"));
        }
        if self.batch_size == 0 || self.roi_sampling == 0 {
            return Err(Error::config("batch_size and roi_sampling must be positive"));
        }
        let mix = self.mix();
        if mix.values().any(|w| !(*w >= 0.0 && w.is_finite())) || !mix.values().any(|w| *w > 0.0) {
            return Err(Error::config("task_mix weights must be non-negative with one positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive"));
        }
        Ok(())
    }
}

/// A QA sample together with its decoded image.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub sample: QaSample,
    pub image: Arc<Image>,
}

impl TrainSample {
    pub fn task(&self) -> Task {
        self.sample.task
    }
}

/// Loads every sample of `qa-*.jsonl` under `dir`, resolving images relative
/// to `dir`. Each image file is decoded once.
pub fn load_samples(dir: &Path) -> Result<Vec<TrainSample>> {
    let samples = crate::curation::read_qa_dir(dir)?;
    attach_images(samples, dir)
}

pub fn attach_images(samples: Vec<QaSample>, base: &Path) -> Result<Vec<TrainSample>> {
    let mut cache: HashMap<PathBuf, Arc<Image>> = HashMap::new();
    samples
        .into_iter()
        .map(|sample| {
            let path = base.join(&sample.image_ref);
            let image = match cache.get(&path) {
                Some(img) => img.clone(),
                None => {
                    let img = Arc::new(load_png(&path)?);
                    cache.insert(path, img.clone());
                    img
                }
            };
            Ok(TrainSample { sample, image })
        })
        .collect()
}

/// Teacher encoder parameters, updated only by EMA.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher {
    pub params: ParamStore,
    pub updates: u64,
}

impl EmaTeacher {
    pub fn from_student(model: &Vlm) -> Self {
        let mut params = model.encoder_params();
        params.set_trainable(|_| false);
        Self { params, updates: 0 }
    }

    pub fn update(&mut self, student: &ParamStore, alpha: f64) -> Result<()> {
        ema_update(&mut self.params, student, alpha)?;
        self.updates += 1;
        Ok(())
    }

    pub fn encode(&self, cfg: &VlmConfig, image: &Image) -> Result<Tensor> {
        Ok(Vlm::encode_grid_with(cfg, &self.params, image)?.to_tensor())
    }
}

/// `θ_tea ← α·θ_tea + (1 − α)·θ_stu` for every teacher parameter.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    let names: Vec<String> = teacher.names().map(str::to_string).collect();
    for name in names {
        let t = teacher.tensor(&name)?;
        let s = student.tensor(&name)?;
        if t.shape() != s.shape() {
            return Err(finegrain_autodiff::Error::ShapeMismatch {
                op: "ema_update",
                detail: format!("{name}: {:?} vs {:?}", t.shape(), s.shape()),
            }
            .into());
        }
        let data = t.data().iter().zip(s.data()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let blended = Tensor::new(t.shape().to_vec(), data)?;
        teacher.set(&name, blended)?;
    }
    Ok(())
}

/// Self-distillation term for one boxed sample: MSE between the teacher's
/// encoding of the cropped-and-resized canvas region and the ROIAlign of the
/// student grid over the same box. No gradient reaches the teacher.
pub fn distill_loss(
    tape: &mut Tape,
    cfg: &VlmConfig,
    canvas: &Image,
    bbox: &NormBBox,
    student_grid: Var,
    teacher: &EmaTeacher,
    sampling: usize,
) -> Result<Var> {
    let (px, g) = (cfg.img_px, cfg.grid());
    let crop = crop_resize(canvas, bbox.to_abs(px as f64, px as f64), px)?;
    let target = tape.constant(teacher.encode(cfg, &crop)?)?;
    let plan = roi_align_plan(g, g, bbox.as_array(), g, sampling)?;
    let pooled = tape.sample(student_grid, Arc::new(plan))?;
    Ok(tape.mse(target, pooled)?)
}

/// Loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub l_caption: f64,
    pub l_distill: f64,
    pub l_total: f64,
    pub n_caption: usize,
    pub n_distill: usize,
}

/// Per-sample tape terms.
pub struct SampleTerms {
    /// `caption/B + λ·distill/n_box`; the per-sample share of the batch loss.
    pub objective: Var,
    pub caption: Var,
    pub distill: Option<Var>,
}

/// Whether a sample contributes a distillation term under `cfg`.
pub fn has_distill(cfg: &StageConfig, s: &TrainSample) -> bool {
    cfg.stage == 1 && cfg.distill && s.task() == Task::Bbox2Caption && s.sample.bbox.is_some()
}

/// Builds one sample's contribution to the batch objective on `tape`.
pub fn sample_terms(
    tape: &mut Tape,
    model: &Vlm,
    teacher: &EmaTeacher,
    cfg: &StageConfig,
    s: &TrainSample,
    batch_size: usize,
    n_box: usize,
) -> Result<SampleTerms> {
    let visual = model.visual(tape, &s.image)?;
    let caption = model.caption_loss(tape, &visual, &s.sample.question, &s.sample.answer)?;
    let mut objective = tape.scale(caption, 1.0 / batch_size as f64)?;
    let mut distill = None;
    if has_distill(cfg, s) {
        let b = s.sample.bbox.expect("checked by has_distill");
        let canvas_box = visual.padded.affine.map_bbox(&b, s.image.width(), s.image.height())?;
        let d = distill_loss(
            tape,
            &model.cfg,
            &visual.padded.canvas,
            &canvas_box,
            visual.grid,
            teacher,
            cfg.roi_sampling,
        )?;
        let weighted = tape.scale(d, cfg.lambda / n_box as f64)?;
        objective = tape.add(objective, weighted)?;
        distill = Some(d);
    }
    Ok(SampleTerms {
        objective,
        caption,
        distill,
    })
}

struct SampleResult {
    caption: f64,
    distill: Option<f64>,
    objective: f64,
    grads: Option<BTreeMap<String, Tensor>>,
}

fn run_sample(
    model: &Vlm,
    teacher: &EmaTeacher,
    cfg: &StageConfig,
    s: &TrainSample,
    b: usize,
    n_box: usize,
    want_grads: bool,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let terms = sample_terms(&mut tape, model, teacher, cfg, s, b, n_box)?;
    let grads = if want_grads {
        Some(tape.backward(terms.objective)?.into_params())
    } else {
        None
    };
    Ok(SampleResult {
        caption: tape.scalar(terms.caption),
        distill: terms.distill.map(|d| tape.scalar(d)),
        objective: tape.scalar(terms.objective),
        grads,
    })
}

fn batch_pass(
    model: &Vlm,
    teacher: &EmaTeacher,
    cfg: &StageConfig,
    batch: &[TrainSample],
    want_grads: bool,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch is empty"));
    }
    let b = batch.len();
    let n_box = batch.iter().filter(|s| has_distill(cfg, s)).count();
    let results: Vec<Result<SampleResult>> = batch
        .par_iter()
        .map(|s| run_sample(model, teacher, cfg, s, b, n_box, want_grads))
        .collect();
    let mut out = LossBreakdown {
        n_caption: b,
        n_distill: n_box,
        ..LossBreakdown::default()
    };
    let mut distill_sum = 0.0;
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let r = r?;
        out.l_caption += r.caption / b as f64;
        distill_sum += r.distill.unwrap_or(0.0);
        out.l_total += r.objective;
        for (name, g) in r.grads.into_iter().flatten() {
            match sums.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, x)| *a += x),
                None => {
                    sums.insert(name, g.to_vec());
                }
            }
        }
    }
    if n_box > 0 {
        out.l_distill = distill_sum / n_box as f64;
    }
    let grads = sums
        .into_iter()
        .map(|(name, data)| {
            let shape = model.params.tensor(&name)?.shape().to_vec();
            Ok((name, Tensor::new(shape, data)?))
        })
        .collect::<Result<_>>()?;
    Ok((out, grads))
}

/// Forward-only loss of a batch.
pub fn stage_loss(model: &Vlm, teacher: &EmaTeacher, cfg: &StageConfig, batch: &[TrainSample]) -> Result<LossBreakdown> {
    Ok(batch_pass(model, teacher, cfg, batch, false)?.0)
}

/// Loss and summed parameter gradients of a batch, in parameter-name order.
pub fn stage_grads(
    model: &Vlm,
    teacher: &EmaTeacher,
    cfg: &StageConfig,
    batch: &[TrainSample],
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    batch_pass(model, teacher, cfg, batch, true)
}

/// Central-difference check of the batch objective's parameter gradients on
/// `coords` randomly chosen trainable coordinates; returns the largest
/// relative error. `model` is restored before returning.
pub fn loss_grad_check(
    model: &mut Vlm,
    teacher: &EmaTeacher,
    cfg: &StageConfig,
    batch: &[TrainSample],
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = stage_grads(model, teacher, cfg, batch)?;
    let names: Vec<String> = grads.keys().cloned().collect();
    if names.is_empty() {
        return Err(Error::EmptyInput("no trainable parameters to check"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let name = &names[rng.gen_range(0..names.len())];
        let theta = model.params.tensor(name)?.clone();
        let i = rng.gen_range(0..theta.numel());
        let mut at = |delta: f64| -> Result<f64> {
            let mut data = theta.to_vec();
            data[i] += delta;
            model.params.set(name, Tensor::new(theta.shape().to_vec(), data)?)?;
            Ok(stage_loss(model, teacher, cfg, batch)?.l_total)
        };
        let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
        model.params.set(name, theta)?;
        worst = worst.max(finegrain_autodiff::gradcheck::rel_err(grads[name].data()[i], numeric));
    }
    Ok(worst)
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub stage: u8,
    pub step: usize,
    pub model: Vlm,
    pub teacher: EmaTeacher,
    /// AdamW first and second moments, one entry per trainable parameter.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub trace: Vec<LossBreakdown>,
}

impl TrainState {
    /// Applies the stage's trainable partitions and zeroes optimizer moments.
    pub fn new(mut model: Vlm, teacher: EmaTeacher, cfg: &StageConfig) -> Self {
        model.set_trainable(cfg.trainable());
        let moments = model
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| (p.name.clone(), (vec![0.0; p.tensor.numel()], vec![0.0; p.tensor.numel()])))
            .collect();
        Self {
            stage: cfg.stage,
            step: 0,
            model,
            teacher,
            moments,
            trace: Vec::new(),
        }
    }
}

fn clip_grads(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<()> {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * k);
        }
    }
    Ok(())
}

fn adamw_update(state: &mut TrainState, grads: &BTreeMap<String, Tensor>, cfg: &StageConfig) -> Result<()> {
    let a = &cfg.adamw;
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - a.beta1.powi(t);
    let bc2 = 1.0 - a.beta2.powi(t);
    let lr = cfg.lr_at(state.step);
    for (name, (m, v)) in state.moments.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::config(format!("missing gradient for {name}")))?;
        let theta = state.model.params.tensor(name)?;
        let wd = if a.decay_norm_and_bias || !is_norm_or_bias(name) {
            a.weight_decay
        } else {
            0.0
        };
        let mut data = theta.to_vec();
        for i in 0..data.len() {
            let gi = g.data()[i];
            m[i] = a.beta1 * m[i] + (1.0 - a.beta1) * gi;
            v[i] = a.beta2 * v[i] + (1.0 - a.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * (mhat / (vhat.sqrt() + a.eps) + wd * data[i]);
        }
        let shape = theta.shape().to_vec();
        state.model.params.set(name, Tensor::new(shape, data)?)?;
    }
    Ok(())
}

fn non_finite_as_loss(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(finegrain_autodiff::Error::NonFinite { .. }) => Error::NonFiniteLoss { step },
        other => other,
    }
}

/// One optimizer step: forward, backward, AdamW on trainables, then the EMA
/// teacher update in stage 1. On error the state is left untouched.
pub fn stage_step(state: &mut TrainState, batch: &[TrainSample], cfg: &StageConfig) -> Result<LossBreakdown> {
    let step = state.step;
    let (mut loss, mut grads) =
        stage_grads(&state.model, &state.teacher, cfg, batch).map_err(|e| non_finite_as_loss(e, step))?;
    if !loss.l_total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    if let Some(c) = cfg.grad_clip {
        clip_grads(&mut grads, c)?;
    }
    adamw_update(state, &grads, cfg)?;
    if cfg.stage == 1 {
        state.teacher.update(&state.model.params, cfg.alpha)?;
    }
    state.step += 1;
    loss.step = state.step;
    state.trace.push(loss);
    Ok(loss)
}

/// Seeded batch sampler: each slot picks a task by weight, then takes the
/// next sample from that task's shuffled queue (reshuffled when exhausted).
pub struct BatchSchedule {
    rng: ChaCha8Rng,
    tasks: Vec<(Task, f64, Vec<usize>, usize)>,
}

impl BatchSchedule {
    pub fn new(samples: &[TrainSample], mix: &BTreeMap<Task, f64>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tasks = Vec::new();
        for (&task, &w) in mix {
            let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].task() == task).collect();
            if w > 0.0 && !idx.is_empty() {
                idx.shuffle(&mut rng);
                tasks.push((task, w, idx, 0));
            }
        }
        if tasks.is_empty() {
            return Err(Error::EmptyInput("no samples match the stage task mix"));
        }
        Ok(Self { rng, tasks })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let total: f64 = self.tasks.iter().map(|t| t.1).sum();
        (0..size)
            .map(|_| {
                let mut x = self.rng.gen::<f64>() * total;
                let k = self
                    .tasks
                    .iter()
                    .position(|t| {
                        x -= t.1;
                        x < 0.0
                    })
                    .unwrap_or(self.tasks.len() - 1);
                let (_, _, queue, pos) = &mut self.tasks[k];
                if *pos == queue.len() {
                    queue.shuffle(&mut self.rng);
                    *pos = 0;
                }
                *pos += 1;
                queue[*pos - 1]
            })
            .collect()
    }
}

/// Starting point of a stage.
#[derive(Clone, Debug)]
pub enum StageInit {
    Fresh { vlm: VlmConfig, seed: u64 },
    Checkpoint(Checkpoint),
    /// Fresh encoder and projector (from `seed`) with the decoder of `decoder`.
    WarmDecoder { decoder: Checkpoint, seed: u64 },
}

pub struct StageOutput {
    pub state: TrainState,
    pub checkpoint: Checkpoint,
    /// Samples whose task is outside the stage's mix.
    pub skipped: usize,
    /// `(step, value)` from the periodic evaluator.
    pub curve: Vec<(usize, f64)>,
}

/// Model and teacher from a checkpoint; the teacher falls back to a copy of
/// the student encoder when the checkpoint has none.
pub fn restore(ckpt: &Checkpoint) -> Result<(Vlm, EmaTeacher)> {
    let model = Vlm::from_checkpoint(ckpt)?;
    let mut teacher = EmaTeacher::from_student(&model);
    let names: Vec<String> = teacher.params.names().map(str::to_string).collect();
    if names.iter().all(|n| ckpt.get(&format!("teacher.{n}")).is_some()) {
        for n in names {
            teacher.params.set(&n, ckpt.get(&format!("teacher.{n}")).expect("checked").clone())?;
        }
        teacher.updates = ckpt.meta["teacher_updates"].as_u64().unwrap_or(0);
    }
    Ok((model, teacher))
}

/// A freshly initialized model whose decoder parameters are copied from
/// `decoder`.
pub fn with_warm_decoder(decoder: &Checkpoint, seed: u64) -> Result<Vlm> {
    let donor = Vlm::from_checkpoint(decoder)?;
    let mut model = Vlm::init(donor.cfg.clone(), seed)?;
    for p in donor.params.iter().filter(|p| Partition::of(&p.name) == Some(Partition::Decoder)) {
        model.params.set(&p.name, p.tensor.clone())?;
    }
    Ok(model)
}

pub fn checkpoint_stage(ckpt: &Checkpoint) -> Option<u64> {
    ckpt.meta["stage"].as_u64()
}

/// Model, teacher (as `teacher.encoder.*`), stage tag, step and config echo.
pub fn to_checkpoint(state: &TrainState, cfg: &StageConfig) -> Checkpoint {
    let mut ckpt = state.model.to_checkpoint();
    ckpt.meta = json!({
        "stage": state.stage,
        "step": state.step,
        "teacher_updates": state.teacher.updates,
        "vlm": state.model.cfg,
        "stage_config": cfg,
    });
    for p in state.teacher.params.iter() {
        ckpt.tensors.push((format!("teacher.{}", p.name), p.tensor.clone()));
    }
    ckpt
}

/// Runs `cfg.steps` optimizer steps from `init` over `samples`.
///
/// `evaluator`, when given, is called every `cfg.eval_every` steps (and at
/// the end) with the current model.
pub fn run_stage(
    cfg: &StageConfig,
    samples: &[TrainSample],
    init: StageInit,
    evaluator: Option<&dyn Fn(&Vlm) -> Result<f64>>,
) -> Result<StageOutput> {
    cfg.validate()?;
    let (model, teacher) = match init {
        StageInit::Fresh { vlm, seed } => {
            if cfg.stage == 2 {
                return Err(Error::config("stage 2 requires a stage-1 checkpoint, not a fresh init"));
            }
            let model = Vlm::init(vlm, seed)?;
            let teacher = EmaTeacher::from_student(&model);
            (model, teacher)
        }
        StageInit::WarmDecoder { decoder, seed } => {
            if cfg.stage == 2 {
                return Err(Error::config("stage 2 requires a stage-1 checkpoint, not a warm decoder"));
            }
            let model = with_warm_decoder(&decoder, seed)?;
            let teacher = EmaTeacher::from_student(&model);
            (model, teacher)
        }
        StageInit::Checkpoint(ckpt) => {
            if cfg.stage == 2 && checkpoint_stage(&ckpt).is_none_or(|s| s < 1) {
                return Err(Error::config("stage 2 requires a checkpoint produced by stage 1"));
            }
            restore(&ckpt)?
        }
    };
    let mix = cfg.mix();
    let usable: Vec<TrainSample> = samples
        .iter()
        .filter(|s| mix.get(&s.task()).is_some_and(|w| *w > 0.0))
        .cloned()
        .collect();
    let skipped = samples.len() - usable.len();
    let mut state = TrainState::new(model, teacher, cfg);
    let mut curve = Vec::new();
    if cfg.steps > 0 {
        let mut schedule = BatchSchedule::new(&usable, &mix, cfg.seed)?;
        for _ in 0..cfg.steps {
            let batch: Vec<TrainSample> = schedule
                .next_batch(cfg.batch_size)
                .into_iter()
                .map(|i| usable[i].clone())
                .collect();
            stage_step(&mut state, &batch, cfg)?;
            if let Some(eval) = evaluator {
                if cfg.eval_every > 0 && state.step % cfg.eval_every == 0 {
                    curve.push((state.step, eval(&state.model)?));
                }
            }
        }
    }
    if let Some(eval) = evaluator {
        if curve.last().is_none_or(|(s, _)| *s != state.step) {
            curve.push((state.step, eval(&state.model)?));
        }
    }
    let checkpoint = to_checkpoint(&state, cfg);
    Ok(StageOutput {
        state,
        checkpoint,
        skipped,
        curve,
    })
}

/// CSV trace with columns `step,l_caption,l_distill,l_total`.
pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut s = String::from("step,l_caption,l_distill,l_total\n");
    for l in trace {
        s.push_str(&format!("{},{:.17e},{:.17e},{:.17e}\n", l.step, l.l_caption, l.l_distill, l.l_total));
    }
    s
}
