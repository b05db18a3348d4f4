//! Miniature class-conditional diffusion transformer (epsilon-prediction)
//! and the consistency head that wraps it into a consistency function with
//! the exact boundary condition f(z, 0) = z.
//!
//! Architecture: patch embedding plus fixed sinusoidal position embeddings,
//! sinusoidal timestep embedding through a two-layer MLP, a class-embedding
//! table with one extra null row for the unconditional branch, and a stack of
//! pre-norm transformer blocks conditioned via adaptive layer-norm
//! modulation (shift/scale/gate for both the attention and MLP branches).
//! The modulation projections are zero-initialized so every block starts as
//! the identity.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Rng, Tensor};

/// Conditioning input: a class label or the explicit null condition used by
/// classifier-free guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Class(usize),
    Null,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            image_size: 16,
            patch_size: 2,
            width: 128,
            depth: 8,
            heads: 4,
            num_classes: 3,
            mlp_ratio: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Error::Config(msg);
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(bad(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.depth < 2 || self.depth % 2 != 0 {
            return Err(bad(format!("depth {} must be even and >= 2", self.depth)));
        }
        if self.num_classes < 1 {
            return Err(bad("num_classes must be >= 1".into()));
        }
        if self.mlp_ratio < 1 {
            return Err(bad("mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// One transformer block's parameters.
#[derive(Debug, Clone)]
pub struct Block {
    pub mod_w: Tensor, // [6*width, width], zero-init
    pub mod_b: Tensor, // [6*width]
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub w1: Tensor, // [hidden, width]
    pub b1: Tensor,
    pub w2: Tensor, // [width, hidden]
    pub b2: Tensor,
}

impl Block {
    fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        let pairs: [(&str, &Tensor); 14] = [
            ("mod.w", &self.mod_w),
            ("mod.b", &self.mod_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("mlp.w1", &self.w1),
            ("mlp.b1", &self.b1),
            ("mlp.w2", &self.w2),
            ("mlp.b2", &self.b2),
        ];
        for (n, t) in pairs {
            out.push((format!("{prefix}.{n}"), t.clone()));
        }
    }

    fn map(&self, f: &impl Fn(&Tensor) -> Tensor) -> Block {
        Block {
            mod_w: f(&self.mod_w),
            mod_b: f(&self.mod_b),
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

/// The epsilon-prediction denoiser.
#[derive(Debug, Clone)]
pub struct DiffusionTransformer {
    pub config: DenoiserConfig,
    pub patch_w: Tensor, // [width, patch_dim]
    pub patch_b: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
    pub class_table: Tensor, // [num_classes + 1, width]; last row = null cond
    pub blocks: Vec<Block>,
    pub final_mod_w: Tensor, // [2*width, width], zero-init
    pub final_mod_b: Tensor,
    pub head_w: Tensor, // [patch_dim, width]
    pub head_b: Tensor,
    pos_emb: Tensor,  // constant [tokens * width]
    ln_gain: Tensor,  // constant ones (layer norm without learnable affine)
    ln_bias: Tensor,  // constant zeros
}

fn init_mat(rng: &mut Rng, rows: usize, cols: usize, std: f32, trainable: bool) -> Tensor {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.normal() * std).collect();
    if trainable {
        Tensor::param(&[rows, cols], data).unwrap()
    } else {
        Tensor::from_vec(&[rows, cols], data).unwrap()
    }
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::param(shape, vec![0.0; shape.iter().product()]).unwrap()
}

/// Fixed 2-D sin/cos grid position embedding, flattened to `[tokens * width]`.
fn position_embedding(grid: usize, width: usize) -> Vec<f32> {
    let quarter = width / 4;
    let mut out = vec![0.0f32; grid * grid * width];
    for gy in 0..grid {
        for gx in 0..grid {
            let tok = gy * grid + gx;
            for i in 0..quarter {
                let freq = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                let (ay, ax) = (gy as f64 * freq, gx as f64 * freq);
                let base = tok * width;
                out[base + i] = ay.sin() as f32;
                out[base + quarter + i] = ay.cos() as f32;
                out[base + 2 * quarter + i] = ax.sin() as f32;
                out[base + 3 * quarter + i] = ax.cos() as f32;
            }
        }
    }
    out
}

/// Sinusoidal embedding of integer timesteps, `[batch, width]`.
fn timestep_embedding(ts: &[usize], width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(ts.len() * width);
    for &t in ts {
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
            data.push(((t as f64) * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = 1.0 / 10000f64.powf(i as f64 / half as f64);
            data.push(((t as f64) * freq).cos() as f32);
        }
    }
    Tensor::from_vec(&[ts.len(), width], data).unwrap()
}

impl DiffusionTransformer {
    pub fn new(config: DenoiserConfig, rng: &mut Rng) -> Result<DiffusionTransformer> {
        config.validate()?;
        let d = config.width;
        let p = config.patch_dim();
        let hidden = d * config.mlp_ratio;
        let std = 0.02f32;

        let blocks = (0..config.depth)
            .map(|_| Block {
                mod_w: zeros_param(&[6 * d, d]),
                mod_b: zeros_param(&[6 * d]),
                wq: init_mat(rng, d, d, std, true),
                bq: zeros_param(&[d]),
                wk: init_mat(rng, d, d, std, true),
                bk: zeros_param(&[d]),
                wv: init_mat(rng, d, d, std, true),
                bv: zeros_param(&[d]),
                wo: init_mat(rng, d, d, std, true),
                bo: zeros_param(&[d]),
                w1: init_mat(rng, hidden, d, std, true),
                b1: zeros_param(&[hidden]),
                w2: init_mat(rng, d, hidden, std, true),
                b2: zeros_param(&[d]),
            })
            .collect();

        let grid = config.image_size / config.patch_size;
        Ok(DiffusionTransformer {
            patch_w: init_mat(rng, d, p, std, true),
            patch_b: zeros_param(&[d]),
            time_w1: init_mat(rng, d, d, std, true),
            time_b1: zeros_param(&[d]),
            time_w2: init_mat(rng, d, d, std, true),
            time_b2: zeros_param(&[d]),
            class_table: init_mat(rng, config.num_classes + 1, d, std, true),
            blocks,
            final_mod_w: zeros_param(&[2 * d, d]),
            final_mod_b: zeros_param(&[2 * d]),
            head_w: zeros_param(&[p, d]),
            head_b: zeros_param(&[p]),
            pos_emb: Tensor::from_vec(&[grid * grid * d], position_embedding(grid, d))?,
            ln_gain: Tensor::full(&[d], 1.0),
            ln_bias: Tensor::zeros(&[d]),
            config,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("patch_embed.w".to_string(), self.patch_w.clone()),
            ("patch_embed.b".to_string(), self.patch_b.clone()),
            ("time_mlp.w1".to_string(), self.time_w1.clone()),
            ("time_mlp.b1".to_string(), self.time_b1.clone()),
            ("time_mlp.w2".to_string(), self.time_w2.clone()),
            ("time_mlp.b2".to_string(), self.time_b2.clone()),
            ("class_embed.table".to_string(), self.class_table.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            b.named(&format!("blocks.{i}"), &mut out);
        }
        out.push(("final.mod.w".to_string(), self.final_mod_w.clone()));
        out.push(("final.mod.b".to_string(), self.final_mod_b.clone()));
        out.push(("head.w".to_string(), self.head_w.clone()));
        out.push(("head.b".to_string(), self.head_b.clone()));
        out
    }

    /// Deep copy with trainable parameters (student initialization).
    pub fn trainable_clone(&self) -> DiffusionTransformer {
        self.map_params(|t| t.detach_trainable())
    }

    /// Deep copy with frozen parameters (teacher role).
    pub fn frozen_clone(&self) -> DiffusionTransformer {
        self.map_params(|t| t.detach())
    }

    fn map_params(&self, f: impl Fn(&Tensor) -> Tensor) -> DiffusionTransformer {
        DiffusionTransformer {
            config: self.config,
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            time_w1: f(&self.time_w1),
            time_b1: f(&self.time_b1),
            time_w2: f(&self.time_w2),
            time_b2: f(&self.time_b2),
            class_table: f(&self.class_table),
            blocks: self.blocks.iter().map(|b| b.map(&f)).collect(),
            final_mod_w: f(&self.final_mod_w),
            final_mod_b: f(&self.final_mod_b),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            pos_emb: self.pos_emb.clone(),
            ln_gain: self.ln_gain.clone(),
            ln_bias: self.ln_bias.clone(),
        }
    }

    /// Overwrite this model's parameter values from another (shape-checked).
    pub fn load_from(&self, src: &DiffusionTransformer) -> Result<()> {
        if self.config != src.config {
            return Err(Error::Config("model config mismatch".into()));
        }
        for ((_, dst), (_, s)) in self.named_params().iter().zip(src.named_params()) {
            dst_set(dst, s.to_vec());
        }
        Ok(())
    }

    fn class_index(&self, c: Cond) -> Result<usize> {
        match c {
            Cond::Class(i) if i >= self.config.num_classes => Err(Error::ClassOutOfRange {
                c: i,
                num_classes: self.config.num_classes,
            }),
            Cond::Class(i) => Ok(i),
            Cond::Null => Ok(self.config.num_classes),
        }
    }

    /// Patchify + linear embed + position embedding: `[b, h, w]` -> `[b, tokens, width]`.
    pub fn embed_tokens(&self, z: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (hw, p) = (cfg.image_size, cfg.patch_size);
        if z.shape().len() != 3 || z.shape()[1] != hw || z.shape()[2] != hw {
            return Err(Error::ShapeMismatch {
                op: "embed_tokens",
                lhs: z.shape().to_vec(),
                rhs: vec![0, hw, hw],
            });
        }
        let b = z.shape()[0];
        let g = hw / p;
        let tokens = cfg.tokens();
        // [b,h,w] -> [b,g,p,g,p] -> [b,g,g,p,p] -> [b*tokens, p*p]
        let patches = z
            .reshape(&[b, g, p, g, p])?
            .permute(&[0, 1, 3, 2, 4])?
            .reshape(&[b * tokens, p * p])?;
        let emb = patches.linear(&self.patch_w, &self.patch_b)?;
        // add fixed position embedding, broadcast over batch
        emb.reshape(&[b, tokens * cfg.width])?
            .add_bias(&self.pos_emb)?
            .reshape(&[b, tokens, cfg.width])
    }

    /// Tokens back to an image: `[b, tokens, patch_dim]` -> `[b, h, w]`.
    fn unpatchify(&self, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let (hw, p) = (cfg.image_size, cfg.patch_size);
        let g = hw / p;
        let b = x.shape()[0];
        x.reshape(&[b, g, g, p, p])?
            .permute(&[0, 1, 3, 2, 4])?
            .reshape(&[b, hw, hw])
    }

    /// [`DiffusionTransformer::condition`] with timestep range validation.
    pub fn condition_checked(&self, ts: &[usize], cs: &[Cond], t_max: usize) -> Result<Tensor> {
        self.check_ts(ts, t_max)?;
        self.condition(ts, cs)
    }

    /// Combined timestep + class conditioning vector, `[b, width]`.
    pub fn condition(&self, ts: &[usize], cs: &[Cond]) -> Result<Tensor> {
        let temb = timestep_embedding(ts, self.config.width);
        let t_hidden = temb
            .linear(&self.time_w1, &self.time_b1)?
            .silu()?
            .linear(&self.time_w2, &self.time_b2)?;
        let idx: Vec<usize> = cs
            .iter()
            .map(|&c| self.class_index(c))
            .collect::<Result<_>>()?;
        let cemb = Tensor::index_rows(&self.class_table, &idx)?;
        t_hidden.add(&cemb)
    }

    fn ln(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.ln_gain, &self.ln_bias, 1e-5)
    }

    /// One transformer block with adaptive-norm modulation.
    ///
    /// `x: [b, tokens, width]`, `cond: [b, width]` (pre-activation).
    pub fn block_forward(&self, block: &Block, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let m = cond.silu()?.linear(&block.mod_w, &block.mod_b)?; // [b, 6d]
        let shift1 = m.narrow_cols(0, d)?.expand_mid(t)?;
        let scale1 = m.narrow_cols(d, d)?.expand_mid(t)?;
        let gate1 = m.narrow_cols(2 * d, d)?.expand_mid(t)?;
        let shift2 = m.narrow_cols(3 * d, d)?.expand_mid(t)?;
        let scale2 = m.narrow_cols(4 * d, d)?.expand_mid(t)?;
        let gate2 = m.narrow_cols(5 * d, d)?.expand_mid(t)?;

        // attention branch
        let xn = self.ln(x)?;
        let xm = xn.mul(&scale1.add_scalar(1.0)?)?.add(&shift1)?;
        let flat = xm.reshape(&[b * t, d])?;
        let heads = self.config.heads;
        let dh = d / heads;
        let to_heads = |y: Tensor| -> Result<Tensor> {
            y.reshape(&[b, t, heads, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[b * heads, t, dh])
        };
        let q = to_heads(flat.linear(&block.wq, &block.bq)?)?;
        let k = to_heads(flat.linear(&block.wk, &block.bk)?)?;
        let v = to_heads(flat.linear(&block.wv, &block.bv)?)?;
        let attn = Tensor::sdpa(&q, &k, &v)?
            .reshape(&[b, heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b * t, d])?
            .linear(&block.wo, &block.bo)?
            .reshape(&[b, t, d])?;
        let x = x.add(&gate1.mul(&attn)?)?;

        // mlp branch
        let xn = self.ln(&x)?;
        let xm = xn.mul(&scale2.add_scalar(1.0)?)?.add(&shift2)?;
        let mlp = xm
            .reshape(&[b * t, d])?
            .linear(&block.w1, &block.b1)?
            .gelu()?
            .linear(&block.w2, &block.b2)?
            .reshape(&[b, t, d])?;
        x.add(&gate2.mul(&mlp)?)
    }

    /// Final norm + modulation + linear head + unpatchify.
    pub fn head_forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let m = cond.silu()?.linear(&self.final_mod_w, &self.final_mod_b)?;
        let shift = m.narrow_cols(0, d)?.expand_mid(t)?;
        let scale = m.narrow_cols(d, d)?.expand_mid(t)?;
        let xn = self.ln(x)?;
        let xm = xn.mul(&scale.add_scalar(1.0)?)?.add(&shift)?;
        let out = xm
            .reshape(&[b * t, d])?
            .linear(&self.head_w, &self.head_b)?
            .reshape(&[b, t, self.config.patch_dim()])?;
        self.unpatchify(&out)
    }

    fn check_ts(&self, ts: &[usize], t_max: usize) -> Result<()> {
        for &t in ts {
            if t < 1 || t > t_max {
                return Err(Error::TimestepOutOfRange { t, lo: 1, hi: t_max });
            }
        }
        Ok(())
    }

    /// Predicted noise for a batch: `z: [b, h, w]`, per-sample timesteps and
    /// conditions. `t_max` bounds the admissible timesteps.
    pub fn forward_eps(
        &self,
        z: &Tensor,
        ts: &[usize],
        cs: &[Cond],
        t_max: usize,
    ) -> Result<Tensor> {
        let b = z.shape()[0];
        if ts.len() != b || cs.len() != b {
            return Err(Error::InvalidArg {
                op: "forward_eps",
                msg: format!("batch {b} with {} timesteps / {} conditions", ts.len(), cs.len()),
            });
        }
        self.check_ts(ts, t_max)?;
        let cond = self.condition(ts, cs)?;
        let mut x = self.embed_tokens(z)?;
        for block in &self.blocks {
            x = self.block_forward(block, &x, &cond)?;
        }
        self.head_forward(&x, &cond)
    }
}

fn dst_set(dst: &Tensor, data: Vec<f32>) {
    dst.set_data(data);
}

/// Models usable by the DDIM solver and guidance machinery.
pub trait EpsModel {
    fn eps(&self, z: &Tensor, ts: &[usize], cs: &[Cond], t_max: usize) -> Result<Tensor>;
}

impl EpsModel for DiffusionTransformer {
    fn eps(&self, z: &Tensor, ts: &[usize], cs: &[Cond], t_max: usize) -> Result<Tensor> {
        self.forward_eps(z, ts, cs, t_max)
    }
}

/// Invert the forward noising: `x0 = (z_t - sigma_t * eps) / alpha_t`.
/// Per-sample timesteps; `t = 0` returns `z_t` unchanged.
pub fn predict_x0(
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    ts: &[usize],
    eps_hat: &Tensor,
) -> Result<Tensor> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "predict_x0",
            lhs: z_t.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        });
    }
    let mut inv_alpha = Vec::with_capacity(ts.len());
    let mut sig_over_alpha = Vec::with_capacity(ts.len());
    for &t in ts {
        let a = schedule.alpha(t)?;
        let s = schedule.sigma(t)?;
        inv_alpha.push((1.0 / a) as f32);
        sig_over_alpha.push((s / a) as f32);
    }
    z_t.mul_rows(&inv_alpha)?
        .sub(&eps_hat.mul_rows(&sig_over_alpha)?)
}

/// Boundary-respecting consistency parameterization coefficients.
#[derive(Debug, Clone, Copy)]
pub struct ConsistencyHead {
    pub sigma_data: f32,
    pub timestep_scaling: f32,
}

impl ConsistencyHead {
    /// Default scaling normalized so T = 1000 gives 10.
    pub fn for_t_max(t_max: usize) -> ConsistencyHead {
        ConsistencyHead {
            sigma_data: 0.5,
            timestep_scaling: 10.0 * 1000.0 / t_max as f32,
        }
    }

    pub fn c_skip(&self, t: usize) -> f32 {
        let st = self.timestep_scaling * t as f32;
        let s2 = self.sigma_data * self.sigma_data;
        s2 / (st * st + s2)
    }

    pub fn c_out(&self, t: usize) -> f32 {
        let st = self.timestep_scaling * t as f32;
        let s2 = self.sigma_data * self.sigma_data;
        st / (st * st + s2).sqrt()
    }
}

/// The consistency function `f(z_t, t, c) = c_skip(t) z_t + c_out(t) x0_hat`.
/// At `t = 0` it returns `z_t` exactly (no network evaluation).
pub fn consistency_forward(
    model: &DiffusionTransformer,
    head: &ConsistencyHead,
    schedule: &NoiseSchedule,
    z_t: &Tensor,
    ts: &[usize],
    cs: &[Cond],
) -> Result<Tensor> {
    if ts.iter().all(|&t| t == 0) {
        return z_t.scale(1.0);
    }
    if ts.iter().any(|&t| t == 0) {
        // mixed batches would need per-sample short-circuits; the trainers
        // never produce t = 0, so reject rather than approximate.
        return Err(Error::InvalidArg {
            op: "consistency_forward",
            msg: "mixed zero and nonzero timesteps in one batch".into(),
        });
    }
    let eps_hat = model.forward_eps(z_t, ts, cs, schedule.t_max)?;
    let x0_hat = predict_x0(schedule, z_t, ts, &eps_hat)?;
    let skip: Vec<f32> = ts.iter().map(|&t| head.c_skip(t)).collect();
    let out: Vec<f32> = ts.iter().map(|&t| head.c_out(t)).collect();
    z_t.mul_rows(&skip)?.add(&x0_hat.mul_rows(&out)?)
}

/// Student initialization: a trainable deep copy of the teacher.
pub fn init_student_from_teacher(teacher: &DiffusionTransformer) -> DiffusionTransformer {
    teacher.trainable_clone()
}

/// CRC32 checksum of a parameter list's little-endian bytes, for
/// frozen-parameter immutability assertions.
pub fn params_checksum(params: &[(String, Tensor)]) -> u32 {
    let mut bytes = Vec::new();
    for (name, t) in params {
        bytes.extend_from_slice(name.as_bytes());
        for v in t.to_vec() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::checkpoint::crc32(&bytes)
}

/// Structural census: parameter names of `a` must be a strict subset of the
/// names of `b` (used by the adapter capacity test).
pub fn param_names_subset(a: &[(String, Tensor)], b: &[(String, Tensor)]) -> bool {
    let bn: HashSet<&str> = b.iter().map(|(n, _)| n.as_str()).collect();
    a.len() < b.len() && a.iter().all(|(n, _)| bn.contains(n.as_str()))
}
