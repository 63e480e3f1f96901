//! Training loop: one optimizer step consumes a labeled source batch and an
//! unlabeled (steering-only) target batch. Both batches run through the
//! network on a single tape so the combined objective backpropagates once;
//! the generator then takes an SGD step, and the patch discriminators take
//! an Adam step on detached probability maps.
//!
//! Everything random is drawn from per-purpose streams keyed by absolute
//! step, so training resumes from a checkpoint bitwise-identically.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use indexmap::IndexMap;
use ndarray::{ArrayD, Axis, IxDyn};

use crate::adversarial::{discriminator_loss, DiscriminatorPair, Stream};
use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta, Sections};
use crate::config::RunConfig;
use crate::data::imgproc::resize_bilinear;
use crate::data::preprocess::{flip_augment, flip_augment_pair, photometric_augment, resize_and_random_crop};
use crate::data::{BatchIterator, DatasetManifest};
use crate::error::{Error, Result};
use crate::losses::{source_loss, target_loss, SourceLossBreakdown, TargetLossBreakdown};
use crate::metrics::{threshold_probs, EvalReport, SampleMetrics, ROAD_THRESHOLD};
use crate::model::{DatasetKind, Model};
use crate::nn::{Adam, BatchNorm2d, Binding, Mode, ParamStore, SgdNesterov};
use crate::rng;
use crate::tensor::{ArrayDyn, Tape};

/// Which parts of the objective a run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainVariant {
    /// Source segmentation objective only; target data is never read.
    SingleTask,
    /// Adds target batches with adversarial alignment and memory
    /// regularization, but no steering supervision.
    TransferLearning,
    /// The full objective including the steering task.
    MultiTask,
}

impl TrainVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "st" | "single_task" => Ok(Self::SingleTask),
            "tl" | "transfer_learning" => Ok(Self::TransferLearning),
            "mtl" | "multi_task" => Ok(Self::MultiTask),
            other => Err(Error::Config(format!(
                "unknown training variant {other:?} (expected st, tl or mtl)"
            ))),
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Self::SingleTask => "st",
            Self::TransferLearning => "tl",
            Self::MultiTask => "mtl",
        }
    }

    pub fn uses_target(self) -> bool {
        !matches!(self, Self::SingleTask)
    }

    pub fn steer_enabled(self) -> bool {
        matches!(self, Self::MultiTask)
    }
}

/// A collated labeled batch: `images [N,3,H,W]`, `masks [N,1,H,W]`.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub images: ArrayDyn,
    pub masks: ArrayDyn,
}

/// A collated steering batch: `images [N,3,H,W]`, one normalized angle per
/// image.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub images: ArrayDyn,
    pub angles: Vec<f64>,
}

/// Everything logged about one optimizer step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: u64,
    pub source: SourceLossBreakdown,
    pub target: Option<TargetLossBreakdown>,
    /// Discriminator losses (primary, auxiliary) for this step.
    pub disc: Option<(f64, f64)>,
    pub lr: f64,
}

pub const RUN_LOG_HEADER: &str = "step\tseg_p\tseg_a\tdeep_seg\tsfseg\tdeep_sfseg\tsrc_total\tsteer\tdeep_steer\tadv_p\tadv_a\tmr\ttgt_total\td_p\td_a\tlr";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "-".to_string(),
    }
}

impl StepRecord {
    /// One tab-separated line matching [`RUN_LOG_HEADER`]; absent components
    /// (single-task runs, gated regularizers) render as `-`.
    pub fn render(&self) -> String {
        let s = &self.source;
        let t = self.target.as_ref();
        let cols = [
            format!("{}", self.step),
            format!("{}", s.seg_p),
            format!("{}", s.seg_a),
            format!("{}", s.deep_seg),
            format!("{}", s.sfseg),
            format!("{}", s.deep_sfseg),
            format!("{}", s.total),
            fmt_opt(t.map(|t| t.steer)),
            fmt_opt(t.map(|t| t.deep_steer)),
            fmt_opt(t.map(|t| t.adv_p)),
            fmt_opt(t.map(|t| t.adv_a)),
            fmt_opt(t.and_then(|t| t.mr)),
            fmt_opt(t.map(|t| t.total)),
            fmt_opt(self.disc.map(|d| d.0)),
            fmt_opt(self.disc.map(|d| d.1)),
            format!("{}", self.lr),
        ];
        cols.join("\t")
    }
}

/// Artifacts and outcome of a [`Trainer::fit`] run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub final_step: u64,
    pub best_val_miou: f64,
    pub best_step: u64,
    pub final_val_miou: f64,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub run_log: PathBuf,
    pub val_log: PathBuf,
}

pub struct Trainer {
    run: RunConfig,
    variant: TrainVariant,
    model: Model,
    model_store: ParamStore,
    discs: DiscriminatorPair,
    disc_store: ParamStore,
    sgd: SgdNesterov,
    disc_adam: Adam,
    /// Seed actually used for data order and augmentation; differs from the
    /// configured seed only when `deterministic = false`.
    data_seed: u64,
    step: u64,
    best_val_miou: f64,
    best_step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig, variant: TrainVariant) -> Result<Self> {
        run.validate()?;
        let seed = run.train.seed;
        let data_seed = if run.train.deterministic {
            seed
        } else {
            let nanos =
                SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.subsec_nanos()).unwrap_or(0);
            seed ^ ((nanos as u64) << 16) ^ std::process::id() as u64
        };

        let mut model_store = ParamStore::new();
        let mut mrng = rng::stream(seed, "model_init", 0);
        let model = Model::new(&mut model_store, &mut mrng, run.backbone.clone(), run.model.clone())?;

        let mut disc_store = ParamStore::new();
        let mut drng = rng::stream(seed, "disc_init", 0);
        let discs = DiscriminatorPair::new(&mut disc_store, &mut drng, run.discriminator.clone())?;

        let sgd = SgdNesterov::new(run.train.sgd_lr, run.train.nesterov_momentum, run.train.weight_decay);
        let disc_adam = Adam::new(
            run.discriminator.adam_lr,
            run.discriminator.adam_beta1,
            run.discriminator.adam_beta2,
        );

        Ok(Self {
            run,
            variant,
            model,
            model_store,
            discs,
            disc_store,
            sgd,
            disc_adam,
            data_seed,
            step: 0,
            best_val_miou: -1.0,
            best_step: 0,
        })
    }

    /// Build a trainer and load every store and optimizer slot from a
    /// checkpoint, ready to continue from its step.
    pub fn resume_from(run: RunConfig, variant: TrainVariant, path: &Path) -> Result<Self> {
        let mut t = Self::new(run, variant)?;
        t.restore(&read_checkpoint(path)?)?;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn variant(&self) -> TrainVariant {
        self.variant
    }

    pub fn best_val_miou(&self) -> f64 {
        self.best_val_miou
    }

    pub fn best_step(&self) -> u64 {
        self.best_step
    }

    pub fn config(&self) -> &RunConfig {
        &self.run
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_store(&self) -> &ParamStore {
        &self.model_store
    }

    pub fn model_store_mut(&mut self) -> &mut ParamStore {
        &mut self.model_store
    }

    pub fn disc_store(&self) -> &ParamStore {
        &self.disc_store
    }

    fn check_source_batch(&self, source: &SourceBatch) -> Result<()> {
        let si = source.images.shape();
        let sm = source.masks.shape();
        if si.len() != 4 || si[1] != 3 {
            return Err(Error::shape("train_step", format!("source images must be [N,3,H,W], got {si:?}")));
        }
        if si[0] != self.run.train.source_batch {
            return Err(Error::contract(
                "train_step",
                format!("source batch has {} images, config says {}", si[0], self.run.train.source_batch),
            ));
        }
        if sm != [si[0], 1, si[2], si[3]] {
            return Err(Error::shape(
                "train_step",
                format!("source masks {sm:?} do not match images {si:?}"),
            ));
        }
        Ok(())
    }

    fn check_target_batch(&self, target: &TargetBatch) -> Result<()> {
        let ti = target.images.shape();
        if ti.len() != 4 || ti[1] != 3 {
            return Err(Error::shape("train_step", format!("target images must be [N,3,H,W], got {ti:?}")));
        }
        if ti[0] != self.run.train.target_batch {
            return Err(Error::contract(
                "train_step",
                format!("target batch has {} images, config says {}", ti[0], self.run.train.target_batch),
            ));
        }
        if target.angles.len() != ti[0] {
            return Err(Error::contract(
                "train_step",
                format!("target batch has {} angles for {} images", target.angles.len(), ti[0]),
            ));
        }
        Ok(())
    }

    /// Run one optimizer step. `target` must be given exactly when the
    /// variant consumes target data.
    pub fn train_step(&mut self, source: &SourceBatch, target: Option<&TargetBatch>) -> Result<StepRecord> {
        self.check_source_batch(source)?;
        match (self.variant.uses_target(), target) {
            (true, None) => {
                return Err(Error::contract(
                    "train_step",
                    format!("variant {} requires a target batch", self.variant.code()),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::contract("train_step", "single-task training takes no target batch"))
            }
            _ => {}
        }
        if let Some(t) = target {
            self.check_target_batch(t)?;
        }

        let step_number = self.step + 1;
        let lr = self.run.train.lr_at(step_number);

        // Generator pass: source and (optionally) target forwards share one
        // tape so shared parameters accumulate gradients from both.
        let tape = Tape::new();
        let (bound, bn_updates, grads, src_bd, tgt_bd, prob_maps) = {
            let gen_b = Binding::new(&self.model_store, &tape, Mode::Train);
            let outs_s = self.model.forward(&gen_b, &source.images, DatasetKind::Source)?;
            let (mut total, src_bd) = source_loss(&outs_s, &source.masks, &self.run.loss_weights)?;
            let mut tgt_bd = None;
            let mut prob_maps = None;
            if let Some(tb) = target {
                // Discriminators run frozen here: their scores steer the
                // generator, their own weights receive no gradient.
                let disc_b = Binding::frozen(&self.disc_store, &tape, Mode::Eval);
                let outs_t = self.model.forward(&gen_b, &tb.images, DatasetKind::Target)?;
                let p_prob = outs_t.primary_seg_logits.sigmoid();
                let a_prob = outs_t.aux_seg_logits.sigmoid();
                let d_p = self.discs.discriminate(&disc_b, Stream::Primary, &p_prob)?;
                let d_a = self.discs.discriminate(&disc_b, Stream::Auxiliary, &a_prob)?;
                let (total_t, bd) = target_loss(
                    &outs_t,
                    &tb.angles,
                    &d_p,
                    &d_a,
                    &self.run.loss_weights,
                    step_number,
                    self.variant.steer_enabled(),
                )?;
                total = total.add(&total_t)?;
                tgt_bd = Some(bd);
                // Detached maps for the discriminator update; the "real"
                // reference for both streams is the source primary map.
                let real = outs_s.primary_seg_logits.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
                prob_maps = Some((real, p_prob.value(), a_prob.value()));
            }
            let grads = tape.backward(&total)?;
            (gen_b.bound_map(), gen_b.take_bn_updates(), grads, src_bd, tgt_bd, prob_maps)
        };
        self.sgd.lr = lr;
        self.sgd.step(&mut self.model_store, &bound, &grads)?;
        for (prefix, stats) in bn_updates {
            self.model_store.apply_bn_update(&prefix, &stats, BatchNorm2d::DEFAULT_MOMENTUM)?;
        }

        // Discriminator pass on constants: no gradient reaches the network.
        let disc = match prob_maps {
            None => None,
            Some((real, fake_p, fake_a)) => {
                let tape2 = Tape::new();
                let (bound2, grads2, d_p_loss, d_a_loss) = {
                    let db = Binding::new(&self.disc_store, &tape2, Mode::Train);
                    let real = tape2.constant(real);
                    let fake_p = tape2.constant(fake_p);
                    let fake_a = tape2.constant(fake_a);
                    let loss_p = discriminator_loss(
                        &self.discs.discriminate(&db, Stream::Primary, &real)?,
                        &self.discs.discriminate(&db, Stream::Primary, &fake_p)?,
                    );
                    let loss_a = discriminator_loss(
                        &self.discs.discriminate(&db, Stream::Auxiliary, &real)?,
                        &self.discs.discriminate(&db, Stream::Auxiliary, &fake_a)?,
                    );
                    let total_d = loss_p.add(&loss_a)?;
                    let grads2 = tape2.backward(&total_d)?;
                    (db.bound_map(), grads2, loss_p.scalar_value(), loss_a.scalar_value())
                };
                self.disc_adam.step(&mut self.disc_store, &bound2, &grads2)?;
                Some((d_p_loss, d_a_loss))
            }
        };

        self.step = step_number;
        Ok(StepRecord { step: step_number, source: src_bd, target: tgt_bd, disc, lr })
    }

    /// Evaluate the primary segmentation on every sample of a manifest.
    /// Runs in eval mode and mutates nothing.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<EvalReport> {
        evaluate_model(&self.model, &self.model_store, manifest)
    }

    /// Load and augment one source batch for an absolute step index.
    fn assemble_source_batch(&self, manifest: &DatasetManifest, iter: &BatchIterator, step: u64) -> Result<SourceBatch> {
        let aug = &self.run.data.augment;
        let res = self.run.data.source_resolution;
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for (slot, idx) in iter.batch_indices(step).into_iter().enumerate() {
            let s = manifest.load_sample(idx)?;
            let mask = s.road_mask.ok_or_else(|| {
                Error::Data(format!("source training sample {} has no road mask", s.id))
            })?;
            let draw = step * self.run.train.source_batch as u64 + slot as u64;
            let mut r = rng::stream(self.data_seed, "aug_source", draw);
            let (img, mask) = flip_augment_pair(&s.image, &mask, &mut r, aug.flip_p);
            let (img, mask) = resize_and_random_crop(&img, &mask, res, aug.scale_jitter, &mut r)?;
            let img = photometric_augment(&img, &aug.photometric, &mut r)?;
            images.push(img);
            masks.push(mask);
        }
        Ok(SourceBatch { images: stack_batch(&images)?, masks: stack_batch(&masks)? })
    }

    /// Load and augment one target batch for an absolute step index.
    fn assemble_target_batch(&self, manifest: &DatasetManifest, iter: &BatchIterator, step: u64) -> Result<TargetBatch> {
        let aug = &self.run.data.augment;
        let (th, tw) = self.run.model.target_resolution;
        let mut images = Vec::new();
        let mut angles = Vec::new();
        for (slot, idx) in iter.batch_indices(step).into_iter().enumerate() {
            let s = manifest.load_sample(idx)?;
            let angle = s.steer_angle.ok_or_else(|| {
                Error::Data(format!("target training sample {} has no steering angle", s.id))
            })?;
            let draw = step * self.run.train.target_batch as u64 + slot as u64;
            let mut r = rng::stream(self.data_seed, "aug_target", draw);
            let img = if s.image.shape()[1] == th && s.image.shape()[2] == tw {
                s.image
            } else {
                resize_bilinear(&s.image, th, tw)?
            };
            let (img, angle) = flip_augment(&img, angle, &mut r, aug.flip_p);
            let img = photometric_augment(&img, &aug.photometric, &mut r)?;
            images.push(img);
            angles.push(angle);
        }
        Ok(TargetBatch { images: stack_batch(&images)?, angles })
    }

    /// Train to `total_steps`, validating and checkpointing every
    /// `val_every` steps. Artifacts land under `out_dir`. Resuming a
    /// restored trainer continues the same logs and reproduces an
    /// uninterrupted run exactly (in deterministic mode).
    pub fn fit(
        &mut self,
        source_train: &DatasetManifest,
        target_train: Option<&DatasetManifest>,
        target_val: &DatasetManifest,
        out_dir: &Path,
    ) -> Result<FitReport> {
        let tcfg = self.run.train.clone();
        if source_train.len() == 0 {
            return Err(Error::Data("source training manifest is empty".into()));
        }
        let target_train = if self.variant.uses_target() {
            let m = target_train.ok_or_else(|| {
                Error::contract("fit", format!("variant {} requires target training data", self.variant.code()))
            })?;
            if m.len() == 0 {
                return Err(Error::Data("target training manifest is empty".into()));
            }
            Some(m)
        } else {
            None
        };

        std::fs::create_dir_all(out_dir)
            .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
        let ckpt_dir = out_dir.join(&tcfg.checkpoint_dir);
        std::fs::create_dir_all(&ckpt_dir)
            .map_err(|e| Error::io(format!("creating {}", ckpt_dir.display()), e))?;

        let run_log_path = out_dir.join("run_log.tsv");
        let val_log_path = out_dir.join("val_log.tsv");
        let mut run_log = LogFile::open(&run_log_path, RUN_LOG_HEADER, self.step)?;
        let mut val_log = LogFile::open(&val_log_path, "step\tmiou\tprecision\trecall", self.step)?;

        let src_iter = BatchIterator::new(source_train.len(), tcfg.source_batch, self.data_seed, "source_batches")?;
        let tgt_iter = BatchIterator::new(
            target_train.map(|m| m.len()).unwrap_or(0),
            tcfg.target_batch,
            self.data_seed,
            "target_batches",
        )?;

        let mut best_path = ckpt_dir.join("best.rmtl");
        if self.step > 0 && !best_path.exists() {
            // resumed into a fresh directory: seed it with the current state
            self.save_checkpoint(&best_path)?;
        }
        let mut last_path = checkpoint_name(&ckpt_dir, self.step);
        let mut final_val_miou = self.best_val_miou.max(0.0);

        while self.step < tcfg.total_steps {
            let step = self.step; // batch index for this upcoming step
            let source = self.assemble_source_batch(source_train, &src_iter, step)?;
            let target = match target_train {
                Some(m) => Some(self.assemble_target_batch(m, &tgt_iter, step)?),
                None => None,
            };
            let record = self.train_step(&source, target.as_ref())?;
            run_log.append(&record.render())?;

            if self.step % tcfg.val_every == 0 {
                let report = self.validate(target_val)?;
                final_val_miou = report.miou;
                val_log.append(&format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}",
                    self.step, report.miou, report.precision, report.recall
                ))?;
                if report.miou > self.best_val_miou {
                    self.best_val_miou = report.miou;
                    self.best_step = self.step;
                }
                last_path = checkpoint_name(&ckpt_dir, self.step);
                self.save_checkpoint(&last_path)?;
                if self.best_step == self.step {
                    best_path = ckpt_dir.join("best.rmtl");
                    std::fs::copy(&last_path, &best_path)
                        .map_err(|e| Error::io(format!("writing {}", best_path.display()), e))?;
                }
                run_log.flush()?;
                val_log.flush()?;
                log::info!(
                    "step {} miou {:.4} (best {:.4} @ {})",
                    self.step,
                    report.miou,
                    self.best_val_miou,
                    self.best_step
                );
            }
        }
        run_log.flush()?;
        val_log.flush()?;

        Ok(FitReport {
            final_step: self.step,
            best_val_miou: self.best_val_miou,
            best_step: self.best_step,
            final_val_miou,
            best_checkpoint: best_path,
            final_checkpoint: last_path,
            run_log: run_log_path,
            val_log: val_log_path,
        })
    }

    /// Snapshot every store and optimizer slot.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut sections = Sections::new();
        sections.insert("model.params".into(), collect_params(&self.model_store));
        sections.insert("model.buffers".into(), collect_buffers(&self.model_store));
        sections.insert("disc.params".into(), collect_params(&self.disc_store));
        let mut vel = IndexMap::new();
        for (name, v) in self.sgd.velocity_entries() {
            vel.insert(name.to_string(), v.clone());
        }
        sections.insert("sgd.velocity".into(), vel);
        let (mut am, mut av, mut at) = (IndexMap::new(), IndexMap::new(), IndexMap::new());
        for (name, m, v, t) in self.disc_adam.slot_entries() {
            am.insert(name.to_string(), m.clone());
            av.insert(name.to_string(), v.clone());
            at.insert(name.to_string(), ArrayD::from_elem(IxDyn(&[1]), t as f64));
        }
        sections.insert("adam.m".into(), am);
        sections.insert("adam.v".into(), av);
        sections.insert("adam.t".into(), at);
        Checkpoint {
            meta: CheckpointMeta {
                step: self.step,
                best_val_miou: self.best_val_miou,
                best_step: self.best_step,
                variant: self.variant.code().to_string(),
            },
            sections,
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.checkpoint())
    }

    /// Restore stores, optimizer slots and progress counters. The
    /// checkpoint must come from the same architecture and variant.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.meta.variant != self.variant.code() {
            return Err(Error::Config(format!(
                "checkpoint was trained as {:?}, trainer mode is {:?}",
                ckpt.meta.variant,
                self.variant.code()
            )));
        }
        restore_params(&mut self.model_store, ckpt.section("model.params")?)?;
        restore_buffers(&mut self.model_store, ckpt.section("model.buffers")?)?;
        restore_params(&mut self.disc_store, ckpt.section("disc.params")?)?;
        for (name, v) in ckpt.section("sgd.velocity")? {
            self.sgd.restore_velocity(name, v.clone());
        }
        let am = ckpt.section("adam.m")?;
        let av = ckpt.section("adam.v")?;
        let at = ckpt.section("adam.t")?;
        for (name, m) in am {
            let v = av.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("adam slot {name} missing second moment"))
            })?;
            let t = at
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("adam slot {name} missing step count")))?;
            self.disc_adam.restore_slot(name, m.clone(), v.clone(), t[[0]] as u64);
        }
        self.step = ckpt.meta.step;
        self.best_val_miou = ckpt.meta.best_val_miou;
        self.best_step = ckpt.meta.best_step;
        Ok(())
    }
}

/// Evaluate a model's primary segmentation on every sample of a manifest,
/// in eval mode, without mutating anything.
pub fn evaluate_model(model: &Model, store: &ParamStore, manifest: &DatasetManifest) -> Result<EvalReport> {
    let mut per_sample = Vec::with_capacity(manifest.len());
    for i in 0..manifest.len() {
        let s = manifest.load_sample(i)?;
        let gt = s
            .road_mask
            .as_ref()
            .ok_or_else(|| Error::Data(format!("evaluation sample {} has no road mask", s.id)))?;
        let image = s.image.clone().insert_axis(Axis(0));
        let tape = Tape::new();
        let b = Binding::frozen(store, &tape, Mode::Eval);
        let outs = model.forward(&b, &image, s.kind)?;
        let probs = outs.primary_seg_logits.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let probs = probs.index_axis(Axis(0), 0).to_owned().into_dyn();
        let pred = threshold_probs(&probs, ROAD_THRESHOLD);
        let gt_bool = threshold_probs(gt, 0.5);
        per_sample.push(SampleMetrics::compute(&s.id, &pred, &gt_bool)?);
    }
    EvalReport::from_samples(per_sample)
}

/// Load a checkpoint's network weights (parameters and batch-norm buffers)
/// into a freshly built store, e.g. for evaluation or visualization.
pub fn load_model_weights(store: &mut ParamStore, ckpt: &Checkpoint) -> Result<()> {
    restore_params(store, ckpt.section("model.params")?)?;
    restore_buffers(store, ckpt.section("model.buffers")?)
}

/// Stack `[C,H,W]` arrays into `[N,C,H,W]`; all shapes must agree.
pub fn stack_batch(arrays: &[ArrayDyn]) -> Result<ArrayDyn> {
    if arrays.is_empty() {
        return Err(Error::contract("stack_batch", "empty batch"));
    }
    let views: Vec<_> = arrays.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views)
        .map(|a| a.into_dyn())
        .map_err(|_| Error::shape("stack_batch", "batch samples have differing shapes"))
}

fn collect_params(store: &ParamStore) -> IndexMap<String, ArrayDyn> {
    let mut out = IndexMap::new();
    for name in store.param_names() {
        out.insert(name.to_string(), store.param(name).expect("listed name").clone());
    }
    out
}

fn collect_buffers(store: &ParamStore) -> IndexMap<String, ArrayDyn> {
    let mut out = IndexMap::new();
    for name in store.buffer_names() {
        out.insert(name.to_string(), store.buffer(name).expect("listed name").clone());
    }
    out
}

fn restore_params(store: &mut ParamStore, section: &IndexMap<String, ArrayDyn>) -> Result<()> {
    let expected = store.param_names().count();
    if section.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model has {expected}",
            section.len()
        )));
    }
    for (name, value) in section {
        store
            .set_param(name, value.clone())
            .map_err(|e| Error::Checkpoint(format!("restoring {name}: {e}")))?;
    }
    Ok(())
}

fn restore_buffers(store: &mut ParamStore, section: &IndexMap<String, ArrayDyn>) -> Result<()> {
    let expected = store.buffer_names().count();
    if section.len() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} buffers, model has {expected}",
            section.len()
        )));
    }
    for (name, value) in section {
        store
            .set_buffer(name, value.clone())
            .map_err(|e| Error::Checkpoint(format!("restoring {name}: {e}")))?;
    }
    Ok(())
}

fn checkpoint_name(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step{step:08}.rmtl"))
}

/// Append-oriented log file. On resume, lines recorded after the restored
/// step are dropped so the log never double-counts replayed steps.
struct LogFile {
    writer: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl LogFile {
    fn open(path: &Path, header: &str, resume_step: u64) -> Result<Self> {
        let mut lines = vec![header.to_string()];
        if resume_step > 0 && path.exists() {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            for line in text.lines().skip(1) {
                let step: u64 = line.split('\t').next().unwrap_or("").parse().unwrap_or(u64::MAX);
                if step <= resume_step {
                    lines.push(line.to_string());
                }
            }
        }
        let mut body = lines.join("\n");
        body.push('\n');
        std::fs::write(path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Self { writer: std::io::BufWriter::new(file), path: path.to_path_buf() })
    }

    fn append(&mut self, line: &str) -> Result<()> {
        writeln!(self.writer, "{line}")
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }

    fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io(format!("flushing {}", self.path.display()), e))
    }
}
