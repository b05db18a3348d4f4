//! Control adapters over a frozen base denoiser.
//!
//! Two wirings are provided. The transformer variant copies the first N base
//! blocks; each copy's output passes through a zero-initialized linear gate
//! and is added to the matching frozen block's output, which then feeds the
//! next frozen block. The UNet-style variant treats the first half of the
//! blocks as an encoder: gated copy outputs are added, in mirrored order, to
//! the inputs of the second-half "decoder" blocks.
//!
//! Because every gate starts at exactly zero, a freshly attached adapter is a
//! bit-exact no-op on the base model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Block, Cond, DiffusionTransformer, EpsModel};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlVariant {
    Transformer,
    Unet,
}

/// Linear gate with weight and bias constructed at exactly zero.
#[derive(Debug, Clone)]
pub struct ZeroLinear {
    pub w: Tensor, // [width, width]
    pub b: Tensor, // [width]
}

impl ZeroLinear {
    pub fn new(width: usize) -> ZeroLinear {
        ZeroLinear {
            w: Tensor::param(&[width, width], vec![0.0; width * width]).unwrap(),
            b: Tensor::param(&[width], vec![0.0; width]).unwrap(),
        }
    }

    fn apply(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
        tokens
            .reshape(&[b * t, d])?
            .linear(&self.w, &self.b)?
            .reshape(&[b, t, d])
    }
}

/// Patch-embedding of the condition map into token width.
#[derive(Debug, Clone)]
pub struct CondEmbedder {
    pub w: Tensor, // [width, patch_dim]
    pub b: Tensor, // [width]
}

impl CondEmbedder {
    fn new(width: usize, patch_dim: usize, rng: &mut Rng) -> CondEmbedder {
        let data: Vec<f32> = (0..width * patch_dim).map(|_| rng.normal() * 0.02).collect();
        CondEmbedder {
            w: Tensor::param(&[width, patch_dim], data).unwrap(),
            b: Tensor::param(&[width], vec![0.0; width]).unwrap(),
        }
    }
}

/// First-N block-copy adapter (transformer wiring).
#[derive(Debug)]
pub struct ControlTransformerAdapter {
    base: DiffusionTransformer,
    pub n_copy: usize,
    pub copies: Vec<Block>,
    pub gates: Vec<ZeroLinear>,
    pub embedder: CondEmbedder,
}

/// Half-depth encoder-copy adapter with mirrored skip additions (UNet wiring).
#[derive(Debug)]
pub struct ControlUnetAdapter {
    base: DiffusionTransformer,
    pub copies: Vec<Block>,
    pub gates: Vec<ZeroLinear>,
    pub embedder: CondEmbedder,
}

/// Paper-ratio default for the number of copied blocks (13 of 28), rounded.
pub fn default_n_copy(depth: usize) -> usize {
    ((depth as f64 * 13.0 / 28.0).round() as usize).clamp(1, depth)
}

fn trainable_block_copy(b: &Block) -> Block {
    Block {
        mod_w: b.mod_w.detach_trainable(),
        mod_b: b.mod_b.detach_trainable(),
        wq: b.wq.detach_trainable(),
        bq: b.bq.detach_trainable(),
        wk: b.wk.detach_trainable(),
        bk: b.bk.detach_trainable(),
        wv: b.wv.detach_trainable(),
        bv: b.bv.detach_trainable(),
        wo: b.wo.detach_trainable(),
        bo: b.bo.detach_trainable(),
        w1: b.w1.detach_trainable(),
        b1: b.b1.detach_trainable(),
        w2: b.w2.detach_trainable(),
        b2: b.b2.detach_trainable(),
    }
}

impl ControlTransformerAdapter {
    /// Freezes the base and copies its first `n_copy` blocks as trainable.
    pub fn new(base: &DiffusionTransformer, n_copy: usize, rng: &mut Rng) -> Result<Self> {
        let depth = base.config.depth;
        if n_copy == 0 || n_copy > depth {
            return Err(Error::InvalidArg {
                op: "control_transformer",
                msg: format!("n_copy {n_copy} outside [1, {depth}]"),
            });
        }
        let frozen = base.frozen_clone();
        let copies: Vec<Block> = frozen.blocks[..n_copy]
            .iter()
            .map(trainable_block_copy)
            .collect();
        let gates = (0..n_copy).map(|_| ZeroLinear::new(base.config.width)).collect();
        let embedder = CondEmbedder::new(base.config.width, base.config.patch_dim(), rng);
        Ok(ControlTransformerAdapter {
            base: frozen,
            n_copy,
            copies,
            gates,
            embedder,
        })
    }

    pub fn base(&self) -> &DiffusionTransformer {
        &self.base
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        named_adapter_params(&self.copies, &self.gates, &self.embedder)
    }

    pub fn forward(
        &self,
        z: &Tensor,
        ts: &[usize],
        cs: &[Cond],
        cond_map: &Tensor,
        t_max: usize,
    ) -> Result<Tensor> {
        let cond = self.base.condition_checked(ts, cs, t_max)?;
        let x0 = self.base.embed_tokens(z)?;
        let mut y = x0.add(&embed_condition(&self.base, &self.embedder, cond_map)?)?;
        let mut x = x0;
        for (i, block) in self.base.blocks.iter().enumerate() {
            x = self.base.block_forward(block, &x, &cond)?;
            if i < self.n_copy {
                y = self.base.block_forward(&self.copies[i], &y, &cond)?;
                x = x.add(&self.gates[i].apply(&y)?)?;
            }
        }
        self.base.head_forward(&x, &cond)
    }
}

impl ControlUnetAdapter {
    /// Freezes the base and copies its encoder half (depth must be even).
    pub fn new(base: &DiffusionTransformer, rng: &mut Rng) -> Result<Self> {
        let depth = base.config.depth;
        if depth % 2 != 0 {
            return Err(Error::InvalidArg {
                op: "control_unet",
                msg: format!("depth {depth} must be even"),
            });
        }
        let half = depth / 2;
        let frozen = base.frozen_clone();
        let copies: Vec<Block> = frozen.blocks[..half]
            .iter()
            .map(trainable_block_copy)
            .collect();
        let gates = (0..half).map(|_| ZeroLinear::new(base.config.width)).collect();
        let embedder = CondEmbedder::new(base.config.width, base.config.patch_dim(), rng);
        Ok(ControlUnetAdapter {
            base: frozen,
            copies,
            gates,
            embedder,
        })
    }

    pub fn base(&self) -> &DiffusionTransformer {
        &self.base
    }

    pub fn half(&self) -> usize {
        self.copies.len()
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        named_adapter_params(&self.copies, &self.gates, &self.embedder)
    }

    pub fn forward(
        &self,
        z: &Tensor,
        ts: &[usize],
        cs: &[Cond],
        cond_map: &Tensor,
        t_max: usize,
    ) -> Result<Tensor> {
        Ok(self.forward_traced(z, ts, cs, cond_map, t_max)?.0)
    }

    /// Forward pass returning each frozen block's output, for wiring probes.
    pub fn forward_traced(
        &self,
        z: &Tensor,
        ts: &[usize],
        cs: &[Cond],
        cond_map: &Tensor,
        t_max: usize,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let depth = self.base.config.depth;
        let half = self.half();
        let cond = self.base.condition_checked(ts, cs, t_max)?;
        let x0 = self.base.embed_tokens(z)?;

        // copy stream over the encoder half, gate output after each copy
        let mut y = x0.add(&embed_condition(&self.base, &self.embedder, cond_map)?)?;
        let mut skips = Vec::with_capacity(half);
        for copy in &self.copies {
            y = self.base.block_forward(copy, &y, &cond)?;
            skips.push(y.clone());
        }

        let mut trace = Vec::with_capacity(depth);
        let mut x = x0;
        for (bi, block) in self.base.blocks.iter().enumerate() {
            if bi >= half {
                // mirrored skip order: copy 1 feeds the last block,
                // copy `half` feeds block half+1 (1-based)
                let gi = depth - bi - 1;
                x = x.add(&self.gates[gi].apply(&skips[gi])?)?;
            }
            x = self.base.block_forward(block, &x, &cond)?;
            trace.push(x.clone());
        }
        Ok((self.base.head_forward(&x, &cond)?, trace))
    }
}

fn named_adapter_params(
    copies: &[Block],
    gates: &[ZeroLinear],
    embedder: &CondEmbedder,
) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, c) in copies.iter().enumerate() {
        push_block_params(c, &format!("copies.{i}"), &mut out);
    }
    for (i, g) in gates.iter().enumerate() {
        out.push((format!("gates.{i}.w"), g.w.clone()));
        out.push((format!("gates.{i}.b"), g.b.clone()));
    }
    out.push(("cond_embed.w".to_string(), embedder.w.clone()));
    out.push(("cond_embed.b".to_string(), embedder.b.clone()));
    out
}

fn push_block_params(b: &Block, prefix: &str, out: &mut Vec<(String, Tensor)>) {
    let pairs: [(&str, &Tensor); 14] = [
        ("mod.w", &b.mod_w),
        ("mod.b", &b.mod_b),
        ("attn.wq", &b.wq),
        ("attn.bq", &b.bq),
        ("attn.wk", &b.wk),
        ("attn.bk", &b.bk),
        ("attn.wv", &b.wv),
        ("attn.bv", &b.bv),
        ("attn.wo", &b.wo),
        ("attn.bo", &b.bo),
        ("mlp.w1", &b.w1),
        ("mlp.b1", &b.b1),
        ("mlp.w2", &b.w2),
        ("mlp.b2", &b.b2),
    ];
    for (n, t) in pairs {
        out.push((format!("{prefix}.{n}"), t.clone()));
    }
}

/// Patchify the condition map and project to token width. Values must lie in
/// [0, 1]; the embedding is added once to the copy stream's input tokens.
pub fn embed_condition(
    base: &DiffusionTransformer,
    embedder: &CondEmbedder,
    cond_map: &Tensor,
) -> Result<Tensor> {
    let cfg = &base.config;
    let (hw, p) = (cfg.image_size, cfg.patch_size);
    if cond_map.shape().len() != 3 || cond_map.shape()[1] != hw || cond_map.shape()[2] != hw {
        return Err(Error::ShapeMismatch {
            op: "embed_condition",
            lhs: cond_map.shape().to_vec(),
            rhs: vec![0, hw, hw],
        });
    }
    if cond_map.to_vec().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidArg {
            op: "embed_condition",
            msg: "condition map values must lie in [0, 1]".into(),
        });
    }
    let b = cond_map.shape()[0];
    let g = hw / p;
    let tokens = cfg.tokens();
    cond_map
        .reshape(&[b, g, p, g, p])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape(&[b * tokens, p * p])?
        .linear(&embedder.w, &embedder.b)?
        .reshape(&[b, tokens, cfg.width])
}

/// An adapter bound to a fixed condition map, usable as a denoiser.
pub struct ControlledModel<'a> {
    pub adapter: ControlledAdapter<'a>,
    pub cond_map: Tensor,
}

pub enum ControlledAdapter<'a> {
    Transformer(&'a ControlTransformerAdapter),
    Unet(&'a ControlUnetAdapter),
}

impl EpsModel for ControlledModel<'_> {
    fn eps(&self, z: &Tensor, ts: &[usize], cs: &[Cond], t_max: usize) -> Result<Tensor> {
        match &self.adapter {
            ControlledAdapter::Transformer(a) => a.forward(z, ts, cs, &self.cond_map, t_max),
            ControlledAdapter::Unet(a) => a.forward(z, ts, cs, &self.cond_map, t_max),
        }
    }
}
