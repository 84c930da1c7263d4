//! Teacher-student training: burn-in, weak/strong views, loss assembly,
//! SGD on the student and EMA on the teacher.
//!
//! All randomness inside a step comes from streams keyed by
//! `(seed, iteration, slot, purpose)`, so a run can be resumed from a
//! checkpoint and two runs that differ only in loss flags see the same
//! batches and perturbations.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AngleGapMode;
use crate::losses::{supervised_loss, unsup_loss_with, LossBreakdown, MapGrad, RawNormalize, UnsupConfig, DEFAULT_ALPHA};
use crate::model::{sgd_step, ParamVector, ToyModel, DEFAULT_HIDDEN, DEFAULT_LR};
use crate::ot::{CostComposition, SinkhornConfig, TransportSolution};
use crate::pseudo_label::{pair_with_student, sample_dense_labels, teacher_boxes, SamplerConfig};
use crate::scenes::{encode_targets, render_features_with, scene_rng, FeatureField, GridSpec, RenderConfig, Scene, TargetMap};

pub const CHECKPOINT_VERSION: u32 = 1;

const RENDER_SALT: u64 = 0x51ed_270b_2734_6f7d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub sample_ratio: f64,
    pub ema_momentum: f64,
    /// Defaults to 10% of `total_iters`.
    pub burn_in_iters: Option<u64>,
    pub total_iters: u64,
    pub lr: f64,
    pub lr_decay_iters: Vec<u64>,
    pub lr_decay_factor: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    /// Rescales the step gradient to at most this L2 norm; 0 disables.
    pub grad_clip: f64,
    pub batch_unlabeled: usize,
    pub batch_labeled: usize,
    pub hidden: usize,
    pub sinkhorn: SinkhornConfig,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub nms_pre: usize,
    pub weighted_by_score: bool,
    pub use_raw: bool,
    pub use_gc: bool,
    pub cost_use_dist: bool,
    pub cost_use_score: bool,
    pub raw_normalize: RawNormalize,
    pub gap_mode: AngleGapMode,
    pub raw_weight_grad: bool,
    /// Horizontal flips in the weak and strong views.
    pub random_flip: bool,
    pub strong_noise_sigma: f64,
    /// Per-channel gains drawn from `[1 − j, 1 + j]` in the strong view.
    pub strong_channel_jitter: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            sample_ratio: 0.25,
            ema_momentum: 0.999,
            burn_in_iters: None,
            total_iters: 5000,
            lr: DEFAULT_LR,
            lr_decay_iters: Vec::new(),
            lr_decay_factor: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            batch_unlabeled: 1,
            batch_labeled: 2,
            hidden: DEFAULT_HIDDEN,
            sinkhorn: SinkhornConfig::default(),
            score_threshold: 0.05,
            nms_iou: 0.1,
            nms_pre: 256,
            weighted_by_score: false,
            use_raw: true,
            use_gc: true,
            cost_use_dist: true,
            cost_use_score: true,
            raw_normalize: RawNormalize::None,
            gap_mode: AngleGapMode::Literal,
            raw_weight_grad: true,
            random_flip: true,
            strong_noise_sigma: 0.2,
            strong_channel_jitter: 0.2,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn burn_in(&self) -> u64 {
        self.burn_in_iters.unwrap_or(self.total_iters / 10)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return bad("ema_momentum must be in (0,1)");
        }
        if self.total_iters == 0 || self.burn_in() >= self.total_iters {
            return bad("burn_in_iters must be < total_iters");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || !(self.weight_decay >= 0.0) {
            return bad("sgd_momentum must be in [0,1) and weight_decay >= 0");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be >= 0");
        }
        if self.batch_labeled == 0 {
            return bad("batch_labeled must be >= 1");
        }
        if !(self.strong_noise_sigma >= 0.0) || !(0.0..1.0).contains(&self.strong_channel_jitter) {
            return bad("strong_noise_sigma must be >= 0 and strong_channel_jitter in [0,1)");
        }
        self.sinkhorn.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.sampler().validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            score_threshold: self.score_threshold,
            nms_iou: self.nms_iou,
            sample_ratio: self.sample_ratio,
            nms_pre: self.nms_pre,
            weighted_by_score: self.weighted_by_score,
            seed: self.seed,
        }
    }

    pub fn unsup(&self) -> UnsupConfig {
        UnsupConfig {
            alpha: self.alpha,
            use_raw: self.use_raw,
            use_gc: self.use_gc,
            cost: CostComposition {
                use_dist: self.cost_use_dist,
                use_score: self.cost_use_score,
            },
            sinkhorn: self.sinkhorn,
            raw_normalize: self.raw_normalize,
            gap_mode: self.gap_mode,
            raw_weight_grad: self.raw_weight_grad,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        let drops = self.lr_decay_iters.iter().filter(|&&d| iteration >= d).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingImage {
    pub scene: Scene,
    pub features: FeatureField,
    pub targets: TargetMap,
}

/// Renders features and encodes targets for each scene; image `i` uses its
/// own noise stream.
pub fn build_images(scenes: &[Scene], grid: GridSpec, num_classes: usize, render: &RenderConfig, seed: u64) -> Vec<TrainingImage> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = scene_rng(seed ^ RENDER_SALT, i as u64);
            TrainingImage {
                scene: s.clone(),
                features: render_features_with(s, grid, num_classes, render, &mut rng),
                targets: encode_targets(s, grid, num_classes),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<TrainingImage>,
    pub unlabeled: Vec<TrainingImage>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labeled.first().map(|i| i.targets.num_classes).unwrap_or(0)
    }

    pub fn num_features(&self) -> usize {
        self.labeled.first().map(|i| i.features.channels).unwrap_or(0)
    }
}

/// Element-wise `m·θ_t + (1 − m)·θ_s`.
pub fn ema_update(teacher: &ParamVector, student: &ParamVector, m: f64) -> Result<ParamVector> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::invalid(format!("EMA momentum must be in (0,1), got {m}")));
    }
    Ok(ParamVector(
        teacher
            .0
            .iter()
            .zip(&student.0)
            .map(|(&t, &s)| (t + (1.0 - m) * (s - t)).clamp(t.min(s), t.max(s)))
            .collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BurnIn,
    SemiSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub phase: Phase,
    pub losses: LossBreakdown,
    pub num_pairs: usize,
    pub label_free_images: usize,
    /// L2 norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Not serialized, so metric records stay byte-identical across runs.
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub iteration: u64,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Loss, gradient and the transport plans used, for one batch.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub losses: LossBreakdown,
    pub grad: ParamVector,
    pub num_pairs: usize,
    pub label_free_images: usize,
    pub transports: Vec<Option<TransportSolution>>,
}

mod purpose {
    pub const INIT: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const WEAK: u64 = 3;
    pub const STRONG: u64 = 4;
    pub const SAMPLE: u64 = 5;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, iteration: u64, slot: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix(splitmix(splitmix(iteration) ^ slot) ^ purpose));
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub velocity: ParamVector,
    /// Number of completed steps.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainerConfig, num_features: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0, 0, purpose::INIT);
        let student = ToyModel::init(num_features, config.hidden, num_classes, &mut rng)?;
        let teacher = student.clone();
        let velocity = ParamVector::zeros(student.params.len());
        Ok(Self {
            config,
            student,
            teacher,
            velocity,
            iteration: 0,
        })
    }

    pub fn is_burning_in(&self) -> bool {
        self.iteration < self.config.burn_in()
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.total_iters
    }

    pub fn select_batch(&self, data: &Dataset, iteration: u64) -> Batch {
        let mut rng = stream_rng(self.config.seed, iteration, 0, purpose::BATCH);
        let labeled = (0..self.config.batch_labeled)
            .map(|_| rng.random_range(0..data.labeled.len()))
            .collect();
        let unlabeled = if data.unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..self.config.batch_unlabeled)
                .map(|_| rng.random_range(0..data.unlabeled.len()))
                .collect()
        };
        Batch {
            iteration,
            labeled,
            unlabeled,
        }
    }

    /// One step of either phase; copies the student into the teacher at
    /// the end of burn-in.
    pub fn step(&mut self, data: &Dataset) -> Result<StepReport> {
        if data.labeled.is_empty() {
            return Err(Error::invalid("dataset has no labeled images"));
        }
        if self.iteration == self.config.burn_in() {
            self.teacher = self.student.clone();
        }
        let batch = self.select_batch(data, self.iteration);
        let mut batch = batch;
        if self.is_burning_in() {
            batch.unlabeled.clear();
        }
        self.train_step(data, &batch)
    }

    /// Supervised-only steps until the burn-in length is reached, then the
    /// teacher becomes an exact copy of the student.
    pub fn burn_in(&mut self, data: &Dataset) -> Result<Vec<StepReport>> {
        let mut reports = Vec::new();
        while self.is_burning_in() {
            reports.push(self.step(data)?);
        }
        self.teacher = self.student.clone();
        Ok(reports)
    }

    pub fn train_step(&mut self, data: &Dataset, batch: &Batch) -> Result<StepReport> {
        let start = Instant::now();
        let it = self.iteration;
        let eval = self.evaluate_batch(&self.student, data, batch, None)?;
        if !eval.losses.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                reason: format!("non-finite loss {:?}", eval.losses),
            });
        }
        let lr = self.config.lr_at(it);
        let grad_norm = eval.grad.norm();
        let mut step_grad = eval.grad.clone();
        if self.config.grad_clip > 0.0 && grad_norm > self.config.grad_clip {
            step_grad.scale(self.config.grad_clip / grad_norm);
        }
        sgd_step(
            &mut self.student.params,
            &mut self.velocity,
            &step_grad,
            lr,
            self.config.sgd_momentum,
            self.config.weight_decay,
        )
        .map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { iteration: it, reason },
            e => e,
        })?;
        let phase = if batch.unlabeled.is_empty() && it < self.config.burn_in() {
            Phase::BurnIn
        } else {
            self.teacher.params = ema_update(&self.teacher.params, &self.student.params, self.config.ema_momentum)?;
            Phase::SemiSupervised
        };
        self.iteration += 1;
        Ok(StepReport {
            iteration: it,
            phase,
            losses: eval.losses,
            num_pairs: eval.num_pairs,
            label_free_images: eval.label_free_images,
            grad_norm,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    pub fn weak_view(&self, features: &FeatureField, iteration: u64, slot: u64) -> (FeatureField, bool) {
        let mut rng = stream_rng(self.config.seed, iteration, slot, purpose::WEAK);
        let flip = self.config.random_flip && rng.random::<bool>();
        (if flip { features.flip_horizontal() } else { features.clone() }, flip)
    }

    pub fn strong_view(&self, features: &FeatureField, iteration: u64, slot: u64) -> (FeatureField, bool) {
        let mut rng = stream_rng(self.config.seed, iteration, slot, purpose::STRONG);
        let flip = self.config.random_flip && rng.random::<bool>();
        let mut f = if flip { features.flip_horizontal() } else { features.clone() };
        let j = self.config.strong_channel_jitter;
        if j > 0.0 {
            let gains: Vec<f64> = (0..f.channels).map(|_| rng.random_range(1.0 - j..=1.0 + j)).collect();
            for cell in f.data.chunks_mut(f.channels) {
                for (x, g) in cell.iter_mut().zip(&gains) {
                    *x *= g;
                }
            }
        }
        let sigma = self.config.strong_noise_sigma;
        if sigma > 0.0 {
            for x in f.data.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * z;
            }
        }
        (f, flip)
    }

    /// Loss and student gradient for `batch` evaluated at `student`, with the
    /// current teacher. `frozen` replaces the per-image transport solves.
    pub fn evaluate_batch(
        &self,
        student: &ToyModel,
        data: &Dataset,
        batch: &Batch,
        frozen: Option<&[Option<TransportSolution>]>,
    ) -> Result<BatchEval> {
        let n_l = batch.labeled.len();
        let n_u = batch.unlabeled.len();
        let sup: Vec<(f64, ParamVector)> = batch
            .labeled
            .par_iter()
            .map(|&i| {
                let img = data
                    .labeled
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("labeled index {i} out of range")))?;
                let map = student.forward(&img.features)?;
                let (l, g) = supervised_loss(&map, &img.targets)?;
                Ok((l.total(), student.backward(&img.features, &g)?))
            })
            .collect::<Result<_>>()?;
        let unsup: Vec<UnlabeledTerms> = batch
            .unlabeled
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let img = data
                    .unlabeled
                    .get(i)
                    .ok_or_else(|| Error::invalid(format!("unlabeled index {i} out of range")))?;
                let fz = frozen.and_then(|f| f.get(slot)).and_then(|t| t.as_ref());
                self.unlabeled_terms(student, &img.features, batch.iteration, slot as u64, fz)
            })
            .collect::<Result<_>>()?;

        let mut grad = ParamVector::zeros(student.params.len());
        let mut losses = LossBreakdown::default();
        for (l, g) in &sup {
            losses.sup += l / n_l as f64;
            grad.axpy(1.0 / n_l as f64, g);
        }
        let mut num_pairs = 0;
        let mut label_free = 0;
        let mut transports = Vec::with_capacity(n_u);
        for u in unsup {
            let w = 1.0 / n_u as f64;
            losses.cls += w * u.cls;
            losses.reg += w * u.reg;
            losses.ctr += w * u.ctr;
            losses.raw += w * u.raw;
            losses.gc += w * u.gc;
            num_pairs += u.num_pairs;
            label_free += usize::from(u.num_pairs == 0);
            if let Some(g) = &u.grad {
                grad.axpy(w, g);
            }
            transports.push(u.transport);
        }
        losses.unsup = losses.raw + losses.gc;
        losses.total = losses.unsup + losses.sup;
        Ok(BatchEval {
            losses,
            grad,
            num_pairs,
            label_free_images: label_free,
            transports,
        })
    }

    fn unlabeled_terms(
        &self,
        student: &ToyModel,
        features: &FeatureField,
        iteration: u64,
        slot: u64,
        frozen: Option<&TransportSolution>,
    ) -> Result<UnlabeledTerms> {
        let (weak, weak_flip) = self.weak_view(features, iteration, slot);
        let (strong, strong_flip) = self.strong_view(features, iteration, slot);
        let mut tmap = self.teacher.forward(&weak)?;
        if weak_flip != strong_flip {
            tmap = tmap.flip_horizontal();
        }
        let smap = student.forward(&strong)?;
        let sampler = self.config.sampler();
        let boxes = teacher_boxes(&tmap, &sampler);
        let mut rng = stream_rng(self.config.seed, iteration, slot, purpose::SAMPLE);
        let positions = sample_dense_labels(&tmap, &boxes, &sampler, &mut rng);
        let pairs = pair_with_student(&positions, &tmap, &smap)?;
        let out = unsup_loss_with(&pairs, &self.config.unsup(), frozen)?;
        let grad = if pairs.is_empty() {
            None
        } else {
            let mut up = MapGrad::zeros(smap.num_cells(), smap.num_classes);
            for (p, g) in pairs.iter().zip(&out.grads) {
                up.add_cell(p.cell, g, 1.0);
            }
            Some(student.backward(&strong, &up)?)
        };
        Ok(UnlabeledTerms {
            cls: out.cls,
            reg: out.reg,
            ctr: out.ctr,
            raw: out.raw,
            gc: out.gc,
            num_pairs: out.num_pairs,
            grad,
            transport: out.transport,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            config: self.config.clone(),
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.config.validate()?;
        if ck.student.params.len() != ck.teacher.params.len() || ck.velocity.len() != ck.student.params.len() {
            return Err(Error::invalid("checkpoint parameter vectors differ in length"));
        }
        Ok(Self {
            config: ck.config,
            student: ck.student,
            teacher: ck.teacher,
            velocity: ck.velocity,
            iteration: ck.iteration,
        })
    }
}

struct UnlabeledTerms {
    cls: f64,
    reg: f64,
    ctr: f64,
    raw: f64,
    gc: f64,
    num_pairs: usize,
    grad: Option<ParamVector>,
    transport: Option<TransportSolution>,
}

/// Both parameter vectors, the optimizer velocity and the step counter.
/// Step randomness is derived from `(config.seed, iteration)`, so no
/// generator state needs saving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub config: TrainerConfig,
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub velocity: ParamVector,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
