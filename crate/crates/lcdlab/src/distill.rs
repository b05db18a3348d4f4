//! Training loops: teacher diffusion pretraining, latent consistency
//! distillation with a fixed guidance scale, EMA maintenance, and control
//! adapter training with gradient accumulation.
//!
//! Per-sample randomness is drawn in a fixed order (timestep, noise, dropout)
//! from a derived stream, and batch order comes from its own stream, so runs
//! are exactly reproducible and checkpoints can resume mid-stream.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifacts::{write_pgm_grid, RunDir};
use crate::checkpoint::Checkpoint;
use crate::config::{Config, DistanceKind, TrainKind};
use crate::control::{
    ControlTransformerAdapter, ControlUnetAdapter, ControlVariant, ControlledAdapter,
    ControlledModel,
};
use crate::data::{gen_dataset, sobel_edges_batch, BatchStream, Dataset, Encoder};
use crate::error::{Error, Result};
use crate::model::{
    consistency_forward, init_student_from_teacher, predict_x0, Cond, ConsistencyHead,
    DiffusionTransformer, EpsModel,
};
use crate::schedule::NoiseSchedule;
use crate::solver::{ddim_sample, lcm_sample, ConsistencyFn, SamplerConfig, SamplerKind};
use crate::tensor::{AdamW, Rng, Tensor};

const LOSS_HISTORY_CAP: usize = 100;

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f32,
    pub grad_norm: f32,
}

fn grad_norm(params: &[(String, Tensor)]) -> f32 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flat_map(|g| g.into_iter())
        .map(|v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt() as f32
}

fn distance(a: &Tensor, b: &Tensor, kind: DistanceKind, delta: f32) -> Result<Tensor> {
    match kind {
        DistanceKind::PseudoHuber => a.pseudo_huber(b, delta),
        DistanceKind::L2 => a.mse(b),
    }
}

/// Exact EMA blend `ema = mu * ema + (1 - mu) * student`, elementwise, with
/// no gradient graph.
pub fn ema_update(
    ema_params: &[(String, Tensor)],
    student_params: &[(String, Tensor)],
    mu: f32,
) -> Result<()> {
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::InvalidArg {
            op: "ema_update",
            msg: format!("mu = {mu} outside [0, 1)"),
        });
    }
    if ema_params.len() != student_params.len() {
        return Err(Error::InvalidArg {
            op: "ema_update",
            msg: "parameter list length mismatch".into(),
        });
    }
    for ((en, e), (sn, s)) in ema_params.iter().zip(student_params) {
        if e.shape() != s.shape() {
            return Err(Error::ShapeMismatch {
                op: "ema_update",
                lhs: e.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        debug_assert_eq!(en, sn);
        let blended: Vec<f32> = e
            .to_vec()
            .iter()
            .zip(s.to_vec())
            .map(|(ev, sv)| mu * ev + (1.0 - mu) * sv)
            .collect();
        e.set_data(blended);
    }
    Ok(())
}

/// Per-sample training draws, in fixed order: timestep, noise image, dropout.
fn draw_batch(
    rng: &mut Rng,
    batch: usize,
    latent: usize,
    t_lo: u64,
    t_hi: u64,
    p_drop: f32,
    classes: &[usize],
) -> (Vec<usize>, Tensor, Vec<Cond>) {
    let mut ts = Vec::with_capacity(batch);
    let mut eps = Vec::with_capacity(batch * latent * latent);
    let mut cs = Vec::with_capacity(batch);
    for i in 0..batch {
        ts.push(rng.int_range(t_lo, t_hi) as usize);
        eps.extend(rng.normal_vec(latent * latent));
        let drop = p_drop > 0.0 && rng.uniform() < p_drop;
        cs.push(if drop { Cond::Null } else { Cond::Class(classes[i]) });
    }
    let eps = Tensor::from_vec(&[batch, latent, latent], eps).unwrap();
    (ts, eps, cs)
}

fn noised_rows(
    schedule: &NoiseSchedule,
    z0: &Tensor,
    eps: &Tensor,
    ts: &[usize],
) -> Result<Tensor> {
    let alphas: Vec<f32> = ts
        .iter()
        .map(|&t| schedule.alpha(t).map(|a| a as f32))
        .collect::<Result<_>>()?;
    let sigmas: Vec<f32> = ts
        .iter()
        .map(|&t| schedule.sigma(t).map(|s| s as f32))
        .collect::<Result<_>>()?;
    z0.mul_rows(&alphas)?.add(&eps.mul_rows(&sigmas)?)
}

// ── teacher pretraining ───────────────────────────────────────────────

pub struct TeacherTrainer {
    pub model: DiffusionTransformer,
    pub opt: AdamW,
    pub schedule: NoiseSchedule,
    pub encoder: Encoder,
    pub dataset: Dataset,
    pub stream: BatchStream,
    pub rng: Rng,
    pub lr: f32,
    pub p_drop: f32,
    pub step: u64,
    pub loss_history: VecDeque<f32>,
    params: Vec<(String, Tensor)>,
    latent: usize,
}

impl TeacherTrainer {
    pub fn new(cfg: &Config) -> Result<TeacherTrainer> {
        cfg.validate()?;
        let schedule = cfg.build_schedule()?;
        let dataset = gen_dataset(&cfg.dataset_spec())?;
        let encoder = Encoder::new(cfg.data.encoder);
        let mut init_rng = Rng::derive(cfg.train.seed, "teacher-init");
        let model = DiffusionTransformer::new(cfg.model, &mut init_rng)?;
        let params = model.named_params();
        let opt = AdamW::new(&params, cfg.train.weight_decay);
        let stream = BatchStream::new(dataset.spec.n_samples, cfg.train.batch, cfg.train.seed)?;
        Ok(TeacherTrainer {
            latent: cfg.model.image_size,
            model,
            opt,
            schedule,
            encoder,
            dataset,
            stream,
            rng: Rng::derive(cfg.train.seed, "teacher-train"),
            lr: cfg.train.lr,
            p_drop: cfg.train.p_drop,
            step: 0,
            loss_history: VecDeque::new(),
            params,
        })
    }

    pub fn step_on(&mut self, indices: &[usize]) -> Result<StepStats> {
        let x = self.dataset.batch_tensor(indices);
        let z0 = self.encoder.encode(&x)?;
        let classes = self.dataset.batch_classes(indices);
        let (ts, eps, cs) = draw_batch(
            &mut self.rng,
            indices.len(),
            self.latent,
            1,
            self.schedule.t_max as u64,
            self.p_drop,
            &classes,
        );
        let z_t = noised_rows(&self.schedule, &z0, &eps, &ts)?;
        let eps_hat = self
            .model
            .forward_eps(&z_t.detach(), &ts, &cs, self.schedule.t_max)?;
        let loss = eps_hat.mse(&eps)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        loss.backward()?;
        let gn = grad_norm(&self.params);
        self.opt.step(&self.params, self.lr)?;
        self.step += 1;
        push_history(&mut self.loss_history, loss_val);
        Ok(StepStats {
            loss: loss_val,
            grad_norm: gn,
        })
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let indices = self.stream.next_batch();
        self.step_on(&indices)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }
}

// ── latent consistency distillation ──────────────────────────────────

pub struct LcdTrainer {
    pub teacher: DiffusionTransformer,
    pub student: DiffusionTransformer,
    pub ema: DiffusionTransformer,
    pub head: ConsistencyHead,
    pub opt: AdamW,
    pub schedule: NoiseSchedule,
    pub encoder: Encoder,
    pub dataset: Dataset,
    pub stream: BatchStream,
    pub rng: Rng,
    pub lr: f32,
    pub omega_fix: f32,
    pub k: usize,
    pub mu: f32,
    pub distance_kind: DistanceKind,
    pub huber_delta: f32,
    pub step: u64,
    pub loss_history: VecDeque<f32>,
    student_params: Vec<(String, Tensor)>,
    ema_params: Vec<(String, Tensor)>,
    latent: usize,
}

impl LcdTrainer {
    /// `teacher` is frozen inside; student and EMA start as copies of it.
    pub fn new(cfg: &Config, teacher: &DiffusionTransformer) -> Result<LcdTrainer> {
        cfg.validate()?;
        if teacher.config != cfg.model {
            return Err(Error::Config(
                "teacher model config differs from config.model".into(),
            ));
        }
        let schedule = cfg.build_schedule()?;
        let dataset = gen_dataset(&cfg.dataset_spec())?;
        let encoder = Encoder::new(cfg.data.encoder);
        let teacher = teacher.frozen_clone();
        let student = init_student_from_teacher(&teacher);
        let ema = teacher.frozen_clone();
        let student_params = student.named_params();
        let ema_params = ema.named_params();
        let opt = AdamW::new(&student_params, cfg.train.weight_decay);
        let stream = BatchStream::new(dataset.spec.n_samples, cfg.train.batch, cfg.train.seed)?;
        Ok(LcdTrainer {
            latent: cfg.model.image_size,
            head: ConsistencyHead::for_t_max(schedule.t_max),
            teacher,
            student,
            ema,
            opt,
            schedule,
            encoder,
            dataset,
            stream,
            rng: Rng::derive(cfg.train.seed, "lcd-train"),
            lr: cfg.train.lr,
            omega_fix: cfg.lcd.omega_fix,
            k: cfg.lcd.k,
            mu: cfg.lcd.mu,
            distance_kind: cfg.lcd.distance,
            huber_delta: cfg.lcd.huber_delta,
            step: 0,
            loss_history: VecDeque::new(),
            student_params,
            ema_params,
        })
    }

    pub fn step_on(&mut self, indices: &[usize]) -> Result<StepStats> {
        let x = self.dataset.batch_tensor(indices);
        let z0 = self.encoder.encode(&x)?;
        let classes = self.dataset.batch_classes(indices);
        // per-sample: n ~ U[1, T-k], then the noise image (no dropout here;
        // the unconditional branch enters through the teacher's guidance).
        let (ns, eps, cs) = draw_batch(
            &mut self.rng,
            indices.len(),
            self.latent,
            1,
            (self.schedule.t_max - self.k) as u64,
            0.0,
            &classes,
        );
        let ts_high: Vec<usize> = ns.iter().map(|&n| n + self.k).collect();
        let z_high = noised_rows(&self.schedule, &z0, &eps, &ts_high)?.detach();

        let target_state = lcd_solved_target(
            &self.teacher,
            &self.schedule,
            &z_high,
            &ts_high,
            &ns,
            &cs,
            self.omega_fix,
        )?;
        let student_out =
            consistency_forward(&self.student, &self.head, &self.schedule, &z_high, &ts_high, &cs)?;
        let ema_out =
            consistency_forward(&self.ema, &self.head, &self.schedule, &target_state, &ns, &cs)?;
        debug_assert!(!ema_out.requires_grad());

        let loss = distance(&student_out, &ema_out, self.distance_kind, self.huber_delta)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        loss.backward()?;
        let gn = grad_norm(&self.student_params);
        self.opt.step(&self.student_params, self.lr)?;
        ema_update(&self.ema_params, &self.student_params, self.mu)?;
        self.step += 1;
        push_history(&mut self.loss_history, loss_val);
        Ok(StepStats {
            loss: loss_val,
            grad_norm: gn,
        })
    }

    pub fn step(&mut self) -> Result<StepStats> {
        let indices = self.stream.next_batch();
        self.step_on(&indices)
    }

    pub fn student_params(&self) -> &[(String, Tensor)] {
        &self.student_params
    }

    pub fn ema_params(&self) -> &[(String, Tensor)] {
        &self.ema_params
    }
}

/// The guidance-merged solver target for per-sample timestep pairs, detached
/// so no gradient reaches the teacher. Exactly two teacher evaluations per
/// sample (conditional and null); equals the two-increment form by linearity
/// of the solver step in epsilon.
pub fn lcd_solved_target<M: EpsModel + ?Sized>(
    teacher: &M,
    schedule: &NoiseSchedule,
    z_high: &Tensor,
    ts_high: &[usize],
    ts_low: &[usize],
    cs: &[Cond],
    omega: f32,
) -> Result<Tensor> {
    let b = z_high.shape()[0];
    let eps_c = teacher.eps(z_high, ts_high, cs, schedule.t_max)?;
    let eps_cfg = if omega == 0.0 {
        eps_c
    } else {
        let eps_u = teacher.eps(z_high, ts_high, &vec![Cond::Null; b], schedule.t_max)?;
        eps_c.scale(1.0 + omega)?.sub(&eps_u.scale(omega)?)?
    };
    let x0 = predict_x0(schedule, z_high, ts_high, &eps_cfg)?;
    Ok(noised_rows(schedule, &x0, &eps_cfg, ts_low)?.detach())
}

/// The EMA model as a consistency function (the deployable artifact).
pub struct ConsistencyStudent<'a> {
    pub model: &'a DiffusionTransformer,
    pub head: ConsistencyHead,
    pub schedule: &'a NoiseSchedule,
}

impl ConsistencyFn for ConsistencyStudent<'_> {
    fn consistency(&self, z: &Tensor, ts: &[usize], cs: &[Cond]) -> Result<Tensor> {
        consistency_forward(self.model, &self.head, self.schedule, z, ts, cs)
    }
}

// ── control adapter training ──────────────────────────────────────────

pub enum AnyAdapter {
    Transformer(ControlTransformerAdapter),
    Unet(ControlUnetAdapter),
}

impl AnyAdapter {
    pub fn build(
        base: &DiffusionTransformer,
        variant: ControlVariant,
        n_copy: usize,
        rng: &mut Rng,
    ) -> Result<AnyAdapter> {
        Ok(match variant {
            ControlVariant::Transformer => {
                AnyAdapter::Transformer(ControlTransformerAdapter::new(base, n_copy, rng)?)
            }
            ControlVariant::Unet => AnyAdapter::Unet(ControlUnetAdapter::new(base, rng)?),
        })
    }

    pub fn forward(
        &self,
        z: &Tensor,
        ts: &[usize],
        cs: &[Cond],
        cond_map: &Tensor,
        t_max: usize,
    ) -> Result<Tensor> {
        match self {
            AnyAdapter::Transformer(a) => a.forward(z, ts, cs, cond_map, t_max),
            AnyAdapter::Unet(a) => a.forward(z, ts, cs, cond_map, t_max),
        }
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        match self {
            AnyAdapter::Transformer(a) => a.named_params(),
            AnyAdapter::Unet(a) => a.named_params(),
        }
    }

    pub fn base(&self) -> &DiffusionTransformer {
        match self {
            AnyAdapter::Transformer(a) => a.base(),
            AnyAdapter::Unet(a) => a.base(),
        }
    }

    pub fn controlled<'a>(&'a self, cond_map: Tensor) -> ControlledModel<'a> {
        let adapter = match self {
            AnyAdapter::Transformer(a) => ControlledAdapter::Transformer(a),
            AnyAdapter::Unet(a) => ControlledAdapter::Unet(a),
        };
        ControlledModel { adapter, cond_map }
    }
}

pub struct ControlTrainer {
    pub adapter: AnyAdapter,
    pub opt: AdamW,
    pub schedule: NoiseSchedule,
    pub encoder: Encoder,
    pub dataset: Dataset,
    pub stream: BatchStream,
    pub rng: Rng,
    pub lr: f32,
    pub p_drop: f32,
    pub grad_accum: usize,
    pub step: u64,
    pub loss_history: VecDeque<f32>,
    params: Vec<(String, Tensor)>,
    latent: usize,
}

impl ControlTrainer {
    pub fn new(cfg: &Config, base: &DiffusionTransformer) -> Result<ControlTrainer> {
        cfg.validate()?;
        if base.config != cfg.model {
            return Err(Error::Config("base model config differs from config.model".into()));
        }
        let schedule = cfg.build_schedule()?;
        let dataset = gen_dataset(&cfg.dataset_spec())?;
        let encoder = Encoder::new(cfg.data.encoder);
        let mut init_rng = Rng::derive(cfg.train.seed, "control-init");
        let adapter = AnyAdapter::build(base, cfg.control.variant, cfg.effective_n_copy(), &mut init_rng)?;
        let params = adapter.named_params();
        let opt = AdamW::new(&params, cfg.train.weight_decay);
        let stream = BatchStream::new(dataset.spec.n_samples, cfg.train.batch, cfg.train.seed)?;
        Ok(ControlTrainer {
            latent: cfg.model.image_size,
            adapter,
            opt,
            schedule,
            encoder,
            dataset,
            stream,
            rng: Rng::derive(cfg.train.seed, "control-train"),
            lr: cfg.train.lr,
            p_drop: cfg.train.p_drop,
            grad_accum: cfg.train.grad_accum,
            step: 0,
            loss_history: VecDeque::new(),
            params,
        })
    }

    /// Forward/backward on one micro-batch with the loss scaled by `scale`
    /// (gradients accumulate across calls until the optimizer step).
    pub fn micro_batch(&mut self, indices: &[usize], scale: f32) -> Result<f32> {
        let x = self.dataset.batch_tensor(indices);
        let z0 = self.encoder.encode(&x)?;
        // condition maps are Sobel edges of the (encoded) training images
        let cond_maps = sobel_edges_batch(&z0)?;
        let classes = self.dataset.batch_classes(indices);
        let (ts, eps, cs) = draw_batch(
            &mut self.rng,
            indices.len(),
            self.latent,
            1,
            self.schedule.t_max as u64,
            self.p_drop,
            &classes,
        );
        let z_t = noised_rows(&self.schedule, &z0, &eps, &ts)?.detach();
        let eps_hat = self
            .adapter
            .forward(&z_t, &ts, &cs, &cond_maps, self.schedule.t_max)?;
        let loss = eps_hat.mse(&eps)?.scale(scale)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        loss.backward()?;
        Ok(loss_val)
    }

    /// One optimizer step over `grad_accum` accumulated micro-batches.
    pub fn step(&mut self) -> Result<StepStats> {
        let scale = 1.0 / self.grad_accum as f32;
        let mut total = 0.0f32;
        for _ in 0..self.grad_accum {
            let indices = self.stream.next_batch();
            total += self.micro_batch(&indices, scale)?;
        }
        let gn = grad_norm(&self.params);
        self.opt.step(&self.params, self.lr)?;
        self.step += 1;
        push_history(&mut self.loss_history, total);
        Ok(StepStats {
            loss: total,
            grad_norm: gn,
        })
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }
}

fn push_history(h: &mut VecDeque<f32>, v: f32) {
    if h.len() == LOSS_HISTORY_CAP {
        h.pop_front();
    }
    h.push_back(v);
}

// ── run orchestration ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    step: u64,
    trainer_rng: u64,
    batch_rng: u64,
    batch_order: Vec<usize>,
    batch_cursor: usize,
    loss_history: Vec<f32>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub steps_run: u64,
    pub final_loss: f32,
    pub out_dir: std::path::PathBuf,
}

enum Trainer {
    Teacher(TeacherTrainer),
    Lcd(LcdTrainer),
    Control(ControlTrainer),
}

impl Trainer {
    fn step(&mut self) -> Result<StepStats> {
        match self {
            Trainer::Teacher(t) => t.step(),
            Trainer::Lcd(t) => t.step(),
            Trainer::Control(t) => t.step(),
        }
    }

    fn step_count(&self) -> u64 {
        match self {
            Trainer::Teacher(t) => t.step,
            Trainer::Lcd(t) => t.step,
            Trainer::Control(t) => t.step,
        }
    }

    fn streams(&mut self) -> (&mut Rng, &mut BatchStream, &mut u64, &mut VecDeque<f32>) {
        match self {
            Trainer::Teacher(t) => (&mut t.rng, &mut t.stream, &mut t.step, &mut t.loss_history),
            Trainer::Lcd(t) => (&mut t.rng, &mut t.stream, &mut t.step, &mut t.loss_history),
            Trainer::Control(t) => (&mut t.rng, &mut t.stream, &mut t.step, &mut t.loss_history),
        }
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        match self {
            Trainer::Teacher(t) => {
                ckpt.push_params(&with_prefix("model.", t.params()));
                for (name, data) in t.opt.export_state(t.params()) {
                    let shape = vec![data.len()];
                    ckpt.push(&format!("model.{}", name), &shape, data);
                }
            }
            Trainer::Lcd(t) => {
                ckpt.push_params(&with_prefix("student.", t.student_params()));
                ckpt.push_params(&with_prefix("ema.", t.ema_params()));
                for (name, data) in t.opt.export_state(t.student_params()) {
                    let shape = vec![data.len()];
                    ckpt.push(&format!("student.{}", name), &shape, data);
                }
            }
            Trainer::Control(t) => {
                ckpt.push_params(&with_prefix("adapter.", t.params()));
                for (name, data) in t.opt.export_state(t.params()) {
                    let shape = vec![data.len()];
                    ckpt.push(&format!("adapter.{}", name), &shape, data);
                }
            }
        }
        ckpt
    }

    fn restore(&mut self, ckpt: &Checkpoint, state: &ResumeState) -> Result<()> {
        let import = |opt: &mut AdamW,
                      params: &[(String, Tensor)],
                      prefix: &'static str,
                      step: u64|
         -> Result<()> {
            let lookup = |name: &str| -> Option<Vec<f32>> {
                ckpt.get(&format!("{prefix}{name}")).map(|(_, d)| d.to_vec())
            };
            opt.import_state(params, &lookup, step)
        };
        match self {
            Trainer::Teacher(t) => {
                ckpt.load_into(&with_prefix("model.", t.params()))?;
                let params = t.params().to_vec();
                import(&mut t.opt, &params, "model.", state.step)?;
            }
            Trainer::Lcd(t) => {
                ckpt.load_into(&with_prefix("student.", t.student_params()))?;
                ckpt.load_into(&with_prefix("ema.", t.ema_params()))?;
                let params = t.student_params().to_vec();
                import(&mut t.opt, &params, "student.", state.step)?;
            }
            Trainer::Control(t) => {
                ckpt.load_into(&with_prefix("adapter.", t.params()))?;
                let params = t.params().to_vec();
                import(&mut t.opt, &params, "adapter.", state.step)?;
            }
        }
        let (rng, stream, step, history) = self.streams();
        rng.set_state(state.trainer_rng);
        stream.restore(state.batch_rng, state.batch_order.clone(), state.batch_cursor);
        *step = state.step;
        *history = state.loss_history.iter().copied().collect();
        Ok(())
    }

    fn resume_state(&mut self) -> ResumeState {
        let step = self.step_count();
        let (rng, stream, _, history) = self.streams();
        let (batch_rng, batch_order, batch_cursor) = stream.state();
        ResumeState {
            step,
            trainer_rng: rng.state(),
            batch_rng,
            batch_order,
            batch_cursor,
            loss_history: history.iter().copied().collect(),
        }
    }

    /// Periodic diagnostic sample grid.
    fn sample_grid(&mut self, cfg: &Config) -> Result<Option<Tensor>> {
        let n = 16usize;
        match self {
            Trainer::Teacher(t) => {
                let sc = SamplerConfig {
                    kind: SamplerKind::Ddim,
                    steps: 25,
                    guidance: cfg.lcd.omega_fix,
                    seed: cfg.train.seed ^ 0x5A17,
                };
                let imgs = ddim_sample(&t.model, &t.schedule, &sc, Cond::Class(0), n, t.model.config.image_size)?;
                Ok(Some(t.encoder.decode(&imgs)?))
            }
            Trainer::Lcd(t) => {
                let sc = SamplerConfig {
                    kind: SamplerKind::Consistency,
                    steps: 4,
                    guidance: 0.0,
                    seed: cfg.train.seed ^ 0x5A17,
                };
                let student = ConsistencyStudent {
                    model: &t.ema,
                    head: t.head,
                    schedule: &t.schedule,
                };
                let imgs = lcm_sample(&student, &t.schedule, &sc, Cond::Class(0), n, t.student.config.image_size)?;
                Ok(Some(t.encoder.decode(&imgs)?))
            }
            Trainer::Control(t) => {
                // held-out condition maps from the tail of the dataset
                let held: Vec<usize> = (t.dataset.spec.n_samples - n..t.dataset.spec.n_samples).collect();
                let x = t.dataset.batch_tensor(&held);
                let z0 = t.encoder.encode(&x)?;
                let cond_maps = sobel_edges_batch(&z0)?;
                let classes = t.dataset.batch_classes(&held);
                let model = t.adapter.controlled(cond_maps);
                let sc = SamplerConfig {
                    kind: SamplerKind::Ddim,
                    steps: 10,
                    guidance: 0.0,
                    seed: cfg.train.seed ^ 0x5A17,
                };
                // per-sample classes: sample each image with its own class
                let mut outs = Vec::with_capacity(n);
                for (i, &c) in classes.iter().enumerate() {
                    let one = sample_controlled_one(&model, &t.schedule, &sc, c, i, t.latent)?;
                    outs.push(one);
                }
                let grid = Tensor::concat(&outs, 0)?;
                Ok(Some(t.encoder.decode(&grid)?))
            }
        }
    }
}

/// Sample one image through a controlled model bound to a batch of condition
/// maps, using the `idx`-th map.
fn sample_controlled_one(
    model: &ControlledModel,
    schedule: &NoiseSchedule,
    sc: &SamplerConfig,
    class: usize,
    idx: usize,
    size: usize,
) -> Result<Tensor> {
    // bind the single condition map
    let maps = model.cond_map.to_vec();
    let one = Tensor::from_vec(&[1, size, size], maps[idx * size * size..(idx + 1) * size * size].to_vec())?;
    let bound = ControlledModel {
        adapter: clone_adapter_ref(&model.adapter),
        cond_map: one,
    };
    let sc = SamplerConfig {
        seed: sc.seed ^ (idx as u64).wrapping_mul(0x9E37),
        ..*sc
    };
    ddim_sample(&bound, schedule, &sc, Cond::Class(class), 1, size)
}

fn clone_adapter_ref<'a>(a: &ControlledAdapter<'a>) -> ControlledAdapter<'a> {
    match a {
        ControlledAdapter::Transformer(t) => ControlledAdapter::Transformer(t),
        ControlledAdapter::Unet(u) => ControlledAdapter::Unet(u),
    }
}

fn with_prefix(prefix: &str, params: &[(String, Tensor)]) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
        .collect()
}

/// Full training run: emits metrics, periodic sample grids and checkpoints
/// under `out_dir`, and persists the final state. `base` supplies the frozen
/// teacher for LCD and control runs. `resume_from` restarts exactly from a
/// checkpoint tag previously written by this function.
pub fn run_training(
    cfg: &Config,
    out_dir: &Path,
    base: Option<&DiffusionTransformer>,
    resume_from: Option<&str>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut trainer = match cfg.train.kind {
        TrainKind::Teacher => Trainer::Teacher(TeacherTrainer::new(cfg)?),
        TrainKind::Lcd => {
            let teacher = base.ok_or_else(|| {
                Error::Config("lcd training requires a teacher checkpoint (--base)".into())
            })?;
            Trainer::Lcd(LcdTrainer::new(cfg, teacher)?)
        }
        TrainKind::Controlnet => {
            let b = base.ok_or_else(|| {
                Error::Config("control training requires a base checkpoint (--base)".into())
            })?;
            Trainer::Control(ControlTrainer::new(cfg, b)?)
        }
    };

    let resuming = resume_from.is_some();
    let mut run = RunDir::create(out_dir, &cfg.to_json_pretty(), resuming)?;
    if let Some(tag) = resume_from {
        let ckpt = Checkpoint::load(&run.checkpoint_path(tag))?;
        let state: ResumeState =
            serde_json::from_str(&std::fs::read_to_string(run.state_path(tag))?)?;
        trainer.restore(&ckpt, &state)?;
    }

    let t0 = Instant::now();
    let mut last_loss = f32::NAN;
    while trainer.step_count() < cfg.train.steps {
        let stats = match trainer.step() {
            Ok(s) => s,
            Err(e) => {
                // leave the last good checkpoint in place and surface the abort
                run.flush()?;
                return Err(e);
            }
        };
        let step = trainer.step_count();
        last_loss = stats.loss;
        run.append_metrics(
            step,
            t0.elapsed().as_secs_f64() * 1e3,
            stats.loss,
            match &trainer {
                Trainer::Teacher(t) => t.lr,
                Trainer::Lcd(t) => t.lr,
                Trainer::Control(t) => t.lr,
            },
            stats.grad_norm,
        )?;
        if cfg.train.sample_every > 0 && step % cfg.train.sample_every == 0 {
            if let Some(grid) = trainer.sample_grid(cfg)? {
                write_pgm_grid(&run.sample_path(step), &grid)?;
            }
        }
        if cfg.train.checkpoint_every > 0 && step % cfg.train.checkpoint_every == 0 {
            save_state(&mut trainer, &mut run, &format!("step_{step:07}"))?;
        }
    }
    save_state(&mut trainer, &mut run, "final")?;
    run.flush()?;
    Ok(RunOutcome {
        steps_run: trainer.step_count(),
        final_loss: last_loss,
        out_dir: out_dir.to_path_buf(),
    })
}

fn save_state(trainer: &mut Trainer, run: &mut RunDir, tag: &str) -> Result<()> {
    trainer.checkpoint().save(&run.checkpoint_path(tag))?;
    let state = trainer.resume_state();
    std::fs::write(run.state_path(tag), serde_json::to_string(&state)?)?;
    Ok(())
}

/// Extract a plain model from a teacher training checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint, cfg: &Config) -> Result<DiffusionTransformer> {
    let mut rng = Rng::new(0);
    let model = DiffusionTransformer::new(cfg.model, &mut rng)?;
    let params = model.named_params();
    // teacher checkpoints hold `model.*`; lcd checkpoints hold the EMA
    // consistency weights under `ema.*`
    let prefix = if ckpt.get("model.patch_embed.w").is_some() {
        "model."
    } else if ckpt.get("ema.patch_embed.w").is_some() {
        "ema."
    } else {
        return Err(Error::Checkpoint(
            "checkpoint holds neither `model.*` nor `ema.*` tensors".into(),
        ));
    };
    ckpt.load_into(&with_prefix(prefix, &params))?;
    Ok(model)
}

/// Extract a trained adapter from a control training checkpoint.
pub fn adapter_from_checkpoint(
    ckpt: &Checkpoint,
    cfg: &Config,
    base: &DiffusionTransformer,
) -> Result<AnyAdapter> {
    let mut rng = Rng::derive(cfg.train.seed, "control-init");
    let adapter = AnyAdapter::build(base, cfg.control.variant, cfg.effective_n_copy(), &mut rng)?;
    ckpt.load_into(&with_prefix("adapter.", &adapter.named_params()))?;
    Ok(adapter)
}
