//! ViT model definition and forward pass.
//!
//! Blocks are pre-norm residual (DeiT layout): x += MHSA(LN(x)), then
//! x += FFN(LN(x)), with a final LayerNorm before the classifier head.
//! Attention weights are stored per head so heads can take different
//! (but block-uniform) dimensions after structural pruning. Merge layers
//! and compactors are optional attachments; the forward pass routes
//! through them when present.

use std::collections::BTreeMap;

use crate::autograd::{Tape, ValId};
use crate::error::{Error, Result};
use crate::merge::{MergeLayer, MergePlan};
use crate::prune::Compactors;
use crate::rng::Prng;
use crate::tensor::Tensor;

/// Architecture description. `dim == heads * head_dim` at baseline; folded
/// models keep the baseline figures here and carry reduced shapes in the
/// weights themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub patch: usize,
    pub img: usize,
    pub classes: usize,
    pub use_cls: bool,
}

impl ViTConfig {
    pub fn new(
        blocks: usize,
        dim: usize,
        heads: usize,
        patch: usize,
        img: usize,
        classes: usize,
    ) -> Result<Self> {
        let cfg = ViTConfig {
            blocks,
            dim,
            heads,
            head_dim: if heads > 0 { dim / heads } else { 0 },
            patch,
            img,
            classes,
            use_cls: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.img == 0 || self.img % self.patch != 0 {
            return Err(Error::Config(format!(
                "image side {} not divisible by patch side {}",
                self.img, self.patch
            )));
        }
        if self.heads == 0 || self.dim != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "dim {} != heads {} * head_dim {}",
                self.dim, self.heads, self.head_dim
            )));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.img / self.patch
    }

    pub fn spatial_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Token count at input, CLS included when enabled.
    pub fn tokens(&self) -> usize {
        self.spatial_tokens() + usize::from(self.use_cls)
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.dim
    }

    // Published DeiT sizes, 224x224 inputs, 1000 classes.
    pub fn deit_tiny() -> Self {
        ViTConfig::new(12, 192, 3, 16, 224, 1000).expect("valid preset")
    }

    pub fn deit_small() -> Self {
        ViTConfig::new(12, 384, 6, 16, 224, 1000).expect("valid preset")
    }

    pub fn deit_base() -> Self {
        ViTConfig::new(12, 768, 12, 16, 224, 1000).expect("valid preset")
    }

    /// Small model that trains in minutes on a CPU.
    pub fn desk() -> Self {
        ViTConfig::new(4, 64, 4, 4, 32, 10).expect("valid preset")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "deit-tiny" => Ok(Self::deit_tiny()),
            "deit-small" => Ok(Self::deit_small()),
            "deit-base" => Ok(Self::deit_base()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown architecture '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![d_in, d_out]).trained(),
            b: Tensor::zeros(vec![d_out]).trained(),
        }
    }

    /// Glorot-normal weights, zero bias. Fan-scaled init keeps attention
    /// logits and classifier outputs at unit order even at small widths,
    /// which the desk-scale budgets rely on.
    pub fn init(rng: &mut Prng, d_in: usize, d_out: usize) -> Self {
        let std = (2.0 / (d_in + d_out) as f32).sqrt();
        Linear {
            w: crate::rng::normal_tensor(rng, vec![d_in, d_out], std).trained(),
            b: Tensor::zeros(vec![d_out]).trained(),
        }
    }

    pub fn d_out(&self) -> usize {
        self.w.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn identity(dim: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::full(vec![dim], 1.0).trained(),
            beta: Tensor::zeros(vec![dim]).trained(),
        }
    }
}

pub const LN_EPS: f32 = 1e-6;

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1: LayerNormParams,
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub proj: Linear,
    /// Residual columns the proj output feeds; None means all of them.
    pub proj_out_idx: Option<Vec<usize>>,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BlockWeights {
    fn init(rng: &mut Prng, cfg: &ViTConfig) -> Self {
        let (c, d, f) = (cfg.dim, cfg.head_dim, cfg.ffn_dim());
        BlockWeights {
            ln1: LayerNormParams::identity(c),
            q: (0..cfg.heads).map(|_| Linear::init(rng, c, d)).collect(),
            k: (0..cfg.heads).map(|_| Linear::init(rng, c, d)).collect(),
            v: (0..cfg.heads).map(|_| Linear::init(rng, c, d)).collect(),
            proj: Linear::init(rng, c, c),
            proj_out_idx: None,
            ln2: LayerNormParams::identity(c),
            fc1: Linear::init(rng, c, f),
            fc2: Linear::init(rng, f, c),
        }
    }

    pub fn head_q_dim(&self, h: usize) -> usize {
        self.q[h].d_out()
    }

    pub fn head_v_dim(&self, h: usize) -> usize {
        self.v[h].d_out()
    }
}

#[derive(Debug, Clone)]
pub struct ViTModel {
    pub config: ViTConfig,
    pub patch_embed: Linear,
    /// [1, C] row prepended to the token sequence.
    pub cls: Option<Tensor>,
    /// [tokens, C], added once at input.
    pub pos: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNormParams,
    pub head: Linear,
    /// Merge layers keyed by the last block index run at the old resolution.
    pub merges: BTreeMap<usize, MergeLayer>,
    pub compactors: Option<Compactors>,
}

impl ViTModel {
    pub fn new(config: ViTConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        let c = config.dim;
        let std = 0.02;
        let patch_in = 3 * config.patch * config.patch;
        Ok(ViTModel {
            patch_embed: Linear::init(rng, patch_in, c),
            cls: config
                .use_cls
                .then(|| crate::rng::normal_tensor(rng, vec![1, c], std).trained()),
            pos: crate::rng::normal_tensor(rng, vec![config.tokens(), c], std).trained(),
            blocks: (0..config.blocks)
                .map(|_| BlockWeights::init(rng, &config))
                .collect(),
            final_norm: LayerNormParams::identity(c),
            head: Linear::init(rng, c, config.classes),
            merges: BTreeMap::new(),
            compactors: None,
            config,
        })
    }

    /// Attach merge layers for a plan, pair-averaging initialization.
    pub fn insert_merges(&mut self, plan: &MergePlan) -> Result<()> {
        plan.validate(&self.config)?;
        for entry in &plan.entries {
            self.merges
                .insert(entry.block, MergeLayer::averaging_init(self.config.dim));
        }
        Ok(())
    }

    /// Attach identity compactors to every q/k/v/proj/fc1 weight.
    pub fn insert_compactors(&mut self) {
        self.compactors = Some(Compactors::identity(self));
    }

    pub fn merge_plan(&self) -> MergePlan {
        MergePlan::from_blocks(self.merges.iter().map(|(&b, _)| b))
    }

    /// Walk every trainable tensor in canonical order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("patch_embed.w", &self.patch_embed.w);
        f("patch_embed.b", &self.patch_embed.b);
        if let Some(cls) = &self.cls {
            f("cls", cls);
        }
        f("pos", &self.pos);
        for (l, blk) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block.{l}.{s}");
            f(&p("ln1.g"), &blk.ln1.gamma);
            f(&p("ln1.b"), &blk.ln1.beta);
            for (h, lin) in blk.q.iter().enumerate() {
                f(&p(&format!("attn.q.{h}.w")), &lin.w);
                f(&p(&format!("attn.q.{h}.b")), &lin.b);
            }
            for (h, lin) in blk.k.iter().enumerate() {
                f(&p(&format!("attn.k.{h}.w")), &lin.w);
                f(&p(&format!("attn.k.{h}.b")), &lin.b);
            }
            for (h, lin) in blk.v.iter().enumerate() {
                f(&p(&format!("attn.v.{h}.w")), &lin.w);
                f(&p(&format!("attn.v.{h}.b")), &lin.b);
            }
            f(&p("attn.proj.w"), &blk.proj.w);
            f(&p("attn.proj.b"), &blk.proj.b);
            f(&p("ln2.g"), &blk.ln2.gamma);
            f(&p("ln2.b"), &blk.ln2.beta);
            f(&p("ffn.fc1.w"), &blk.fc1.w);
            f(&p("ffn.fc1.b"), &blk.fc1.b);
            f(&p("ffn.fc2.w"), &blk.fc2.w);
            f(&p("ffn.fc2.b"), &blk.fc2.b);
            if let Some(c) = &self.compactors {
                let bc = &c.blocks[l];
                for (h, comp) in bc.q.iter().enumerate() {
                    f(&p(&format!("attn.q.{h}.compactor")), &comp.m);
                }
                for (h, comp) in bc.k.iter().enumerate() {
                    f(&p(&format!("attn.k.{h}.compactor")), &comp.m);
                }
                for (h, comp) in bc.v.iter().enumerate() {
                    f(&p(&format!("attn.v.{h}.compactor")), &comp.m);
                }
                f(&p("attn.proj.compactor"), &bc.proj.m);
                f(&p("ffn.fc1.compactor"), &bc.fc1.m);
            }
            if let Some(m) = self.merges.get(&l) {
                f(&format!("merge.{l}.ln.g"), &m.norm.gamma);
                f(&format!("merge.{l}.ln.b"), &m.norm.beta);
                f(&format!("merge.{l}.fc.w"), &m.fuse.w);
                f(&format!("merge.{l}.fc.b"), &m.fuse.b);
            }
        }
        f("final_ln.g", &self.final_norm.gamma);
        f("final_ln.b", &self.final_norm.beta);
        f("head.w", &self.head.w);
        f("head.b", &self.head.b);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("patch_embed.w", &mut self.patch_embed.w);
        f("patch_embed.b", &mut self.patch_embed.b);
        if let Some(cls) = &mut self.cls {
            f("cls", cls);
        }
        f("pos", &mut self.pos);
        let merges = &mut self.merges;
        let compactors = &mut self.compactors;
        for (l, blk) in self.blocks.iter_mut().enumerate() {
            f(&format!("block.{l}.ln1.g"), &mut blk.ln1.gamma);
            f(&format!("block.{l}.ln1.b"), &mut blk.ln1.beta);
            for (h, lin) in blk.q.iter_mut().enumerate() {
                f(&format!("block.{l}.attn.q.{h}.w"), &mut lin.w);
                f(&format!("block.{l}.attn.q.{h}.b"), &mut lin.b);
            }
            for (h, lin) in blk.k.iter_mut().enumerate() {
                f(&format!("block.{l}.attn.k.{h}.w"), &mut lin.w);
                f(&format!("block.{l}.attn.k.{h}.b"), &mut lin.b);
            }
            for (h, lin) in blk.v.iter_mut().enumerate() {
                f(&format!("block.{l}.attn.v.{h}.w"), &mut lin.w);
                f(&format!("block.{l}.attn.v.{h}.b"), &mut lin.b);
            }
            f(&format!("block.{l}.attn.proj.w"), &mut blk.proj.w);
            f(&format!("block.{l}.attn.proj.b"), &mut blk.proj.b);
            f(&format!("block.{l}.ln2.g"), &mut blk.ln2.gamma);
            f(&format!("block.{l}.ln2.b"), &mut blk.ln2.beta);
            f(&format!("block.{l}.ffn.fc1.w"), &mut blk.fc1.w);
            f(&format!("block.{l}.ffn.fc1.b"), &mut blk.fc1.b);
            f(&format!("block.{l}.ffn.fc2.w"), &mut blk.fc2.w);
            f(&format!("block.{l}.ffn.fc2.b"), &mut blk.fc2.b);
            if let Some(c) = compactors {
                let bc = &mut c.blocks[l];
                for (h, comp) in bc.q.iter_mut().enumerate() {
                    f(&format!("block.{l}.attn.q.{h}.compactor"), &mut comp.m);
                }
                for (h, comp) in bc.k.iter_mut().enumerate() {
                    f(&format!("block.{l}.attn.k.{h}.compactor"), &mut comp.m);
                }
                for (h, comp) in bc.v.iter_mut().enumerate() {
                    f(&format!("block.{l}.attn.v.{h}.compactor"), &mut comp.m);
                }
                f(&format!("block.{l}.attn.proj.compactor"), &mut bc.proj.m);
                f(&format!("block.{l}.ffn.fc1.compactor"), &mut bc.fc1.m);
            }
            if let Some(m) = merges.get_mut(&l) {
                f(&format!("merge.{l}.ln.g"), &mut m.norm.gamma);
                f(&format!("merge.{l}.ln.b"), &mut m.norm.beta);
                f(&format!("merge.{l}.fc.w"), &mut m.fuse.w);
                f(&format!("merge.{l}.fc.b"), &mut m.fuse.b);
            }
        }
        f("final_ln.g", &mut self.final_norm.gamma);
        f("final_ln.b", &mut self.final_norm.beta);
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t| n += t.numel());
        n
    }
}

/// Forward-pass options. Masks are never applied during training; the
/// masked view exists for evaluation and fold-equivalence checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub apply_masks: bool,
}

/// Cut an image [3, img, img] into flattened patch rows [N_spatial, 3*p*p].
/// Within a row the layout is channel-major: (c, dy, dx).
pub fn extract_patches(cfg: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    let (p, img) = (cfg.patch, cfg.img);
    if image.shape() != [3, img, img] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match config [3, {img}, {img}]",
            image.shape()
        )));
    }
    let g = cfg.grid_side();
    let mut data = Vec::with_capacity(g * g * 3 * p * p);
    for gy in 0..g {
        for gx in 0..g {
            for c in 0..3 {
                for dy in 0..p {
                    let y = gy * p + dy;
                    let base = (c * img + y) * img + gx * p;
                    data.extend_from_slice(&image.data()[base..base + p]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, 3 * p * p], data)
}

/// Handles to one model's parameters registered on a tape, in the same
/// canonical order as `visit_params`.
pub struct BoundModel {
    pub names: Vec<String>,
    pub ids: Vec<ValId>,
    by_name: std::collections::HashMap<String, ValId>,
}

impl BoundModel {
    pub fn bind(model: &ViTModel, tape: &mut Tape) -> Self {
        let mut names = Vec::new();
        let mut tensors: Vec<Tensor> = Vec::new();
        model.visit_params(&mut |name, t| {
            names.push(name.to_string());
            tensors.push(t.clone());
        });
        let ids: Vec<ValId> = tensors.iter().map(|t| tape.param(t)).collect();
        let by_name = names.iter().cloned().zip(ids.iter().copied()).collect();
        BoundModel {
            names,
            ids,
            by_name,
        }
    }

    pub fn id(&self, name: &str) -> ValId {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    fn linear(&self, tape: &mut Tape, x: ValId, prefix: &str) -> Result<ValId> {
        let h = tape.matmul(x, self.id(&format!("{prefix}.w")))?;
        tape.add_row_broadcast(h, self.id(&format!("{prefix}.b")))
    }

    fn layer_norm(&self, tape: &mut Tape, x: ValId, g: &str, b: &str) -> Result<ValId> {
        tape.layer_norm(x, self.id(g), self.id(b), LN_EPS)
    }
}

/// Effective q/k dim for the softmax scale: the structural width, reduced
/// to the unmasked count when masks are applied.
fn effective_qk_dim(
    model: &ViTModel,
    l: usize,
    h: usize,
    opts: ForwardOpts,
) -> Result<usize> {
    let structural = model.blocks[l].head_q_dim(h);
    let structural_k = model.blocks[l].k[h].d_out();
    if structural != structural_k {
        return Err(Error::Consistency(format!(
            "block {l} head {h}: q dim {structural} != k dim {structural_k}"
        )));
    }
    if !opts.apply_masks {
        return Ok(structural);
    }
    match &model.compactors {
        None => Ok(structural),
        Some(c) => {
            let qm = c.blocks[l].q[h].unmasked();
            let km = c.blocks[l].k[h].unmasked();
            if qm != km {
                return Err(Error::Consistency(format!(
                    "block {l} head {h}: {qm} unmasked q dims vs {km} unmasked k dims"
                )));
            }
            Ok(qm)
        }
    }
}

/// Apply a compactor: y = x @ M, columns zeroed first when masks apply.
fn apply_compactor(
    tape: &mut Tape,
    bound: &BoundModel,
    x: ValId,
    name: &str,
    mask: &[bool],
    opts: ForwardOpts,
) -> Result<ValId> {
    if opts.apply_masks && mask.iter().any(|&m| !m) {
        let full = tape.value(bound.id(name)).clone();
        let d = full.shape()[1];
        let mut data = full.data().to_vec();
        for (j, &keep) in mask.iter().enumerate() {
            if !keep {
                for row in data.chunks_exact_mut(d) {
                    row[j] = 0.0;
                }
            }
        }
        let masked = tape.constant(Tensor::new(full.shape().to_vec(), data)?);
        tape.matmul(x, masked)
    } else {
        tape.matmul(x, bound.id(name))
    }
}

/// One attention sub-block on already-normalized input.
fn mhsa(
    model: &ViTModel,
    bound: &BoundModel,
    tape: &mut Tape,
    l: usize,
    x_norm: ValId,
    opts: ForwardOpts,
) -> Result<ValId> {
    let blk = &model.blocks[l];
    let mut head_outs = Vec::with_capacity(model.config.heads);
    for h in 0..blk.q.len() {
        let mut q = bound.linear(tape, x_norm, &format!("block.{l}.attn.q.{h}"))?;
        let mut k = bound.linear(tape, x_norm, &format!("block.{l}.attn.k.{h}"))?;
        let mut v = bound.linear(tape, x_norm, &format!("block.{l}.attn.v.{h}"))?;
        if let Some(c) = &model.compactors {
            let bc = &c.blocks[l];
            q = apply_compactor(
                tape,
                bound,
                q,
                &format!("block.{l}.attn.q.{h}.compactor"),
                &bc.q[h].mask,
                opts,
            )?;
            k = apply_compactor(
                tape,
                bound,
                k,
                &format!("block.{l}.attn.k.{h}.compactor"),
                &bc.k[h].mask,
                opts,
            )?;
            v = apply_compactor(
                tape,
                bound,
                v,
                &format!("block.{l}.attn.v.{h}.compactor"),
                &bc.v[h].mask,
                opts,
            )?;
        }
        let dq = effective_qk_dim(model, l, h, opts)?;
        let logits = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(logits, 1.0 / (dq.max(1) as f32).sqrt());
        let att = tape.softmax_rows(scaled)?;
        head_outs.push(tape.matmul(att, v)?);
    }
    let concat = tape.concat_cols(&head_outs)?;
    let mut out = bound.linear(tape, concat, &format!("block.{l}.attn.proj"))?;
    if let Some(c) = &model.compactors {
        out = apply_compactor(
            tape,
            bound,
            out,
            &format!("block.{l}.attn.proj.compactor"),
            &c.blocks[l].proj.mask,
            opts,
        )?;
    }
    if let Some(idx) = &blk.proj_out_idx {
        out = tape.scatter_cols(out, idx.clone(), model.config.dim)?;
    }
    Ok(out)
}

fn ffn(
    model: &ViTModel,
    bound: &BoundModel,
    tape: &mut Tape,
    l: usize,
    x_norm: ValId,
    opts: ForwardOpts,
) -> Result<ValId> {
    let mut h = bound.linear(tape, x_norm, &format!("block.{l}.ffn.fc1"))?;
    if let Some(c) = &model.compactors {
        h = apply_compactor(
            tape,
            bound,
            h,
            &format!("block.{l}.ffn.fc1.compactor"),
            &c.blocks[l].fc1.mask,
            opts,
        )?;
    }
    let h = tape.gelu(h);
    bound.linear(tape, h, &format!("block.{l}.ffn.fc2"))
}

/// Tokens entering the network: patch embeddings (+ CLS) + positions.
pub fn embed_tokens(
    model: &ViTModel,
    bound: &BoundModel,
    tape: &mut Tape,
    image: &Tensor,
) -> Result<ValId> {
    let patches = extract_patches(&model.config, image)?;
    let patches = tape.constant(patches);
    let x = bound.linear(tape, patches, "patch_embed")?;
    let x = if model.config.use_cls {
        let cls = bound.id("cls");
        tape.concat_rows(&[cls, x])?
    } else {
        x
    };
    tape.add(x, bound.id("pos"))
}

/// Full forward pass to logits [classes] for one image [3, img, img].
pub fn forward(
    model: &ViTModel,
    bound: &BoundModel,
    tape: &mut Tape,
    image: &Tensor,
    opts: ForwardOpts,
) -> Result<ValId> {
    let mut x = embed_tokens(model, bound, tape, image)?;
    let mut grid = (model.config.grid_side(), model.config.grid_side());
    for l in 0..model.config.blocks {
        let n1 = bound.layer_norm(tape, x, &format!("block.{l}.ln1.g"), &format!("block.{l}.ln1.b"))?;
        let att = mhsa(model, bound, tape, l, n1, opts)?;
        x = tape.add(x, att)?;
        let n2 = bound.layer_norm(tape, x, &format!("block.{l}.ln2.g"), &format!("block.{l}.ln2.b"))?;
        let f = ffn(model, bound, tape, l, n2, opts)?;
        x = tape.add(x, f)?;
        if model.merges.contains_key(&l) {
            let entry_dir = model
                .merge_plan()
                .entries
                .iter()
                .find(|e| e.block == l)
                .map(|e| e.direction)
                .expect("merge key implies plan entry");
            x = crate::merge::merge_forward(
                model, bound, tape, l, entry_dir, x, &mut grid,
            )?;
        }
    }
    let x = bound.layer_norm(tape, x, "final_ln.g", "final_ln.b")?;
    let pooled = if model.config.use_cls {
        tape.slice_rows(x, 0, 1)?
    } else {
        tape.mean_rows(x)?
    };
    let logits = bound.linear(tape, pooled, "head")?;
    tape.reshape(logits, vec![model.config.classes])
}

/// Standalone inference producing a plain tensor; no gradients recorded.
/// Returns the logits and the MAC count of the forward pass.
pub fn infer(model: &ViTModel, image: &Tensor, opts: ForwardOpts) -> Result<(Tensor, u64)> {
    let mut tape = Tape::new(false);
    let bound = BoundModel::bind(model, &mut tape);
    let logits = forward(model, &bound, &mut tape, image, opts)?;
    Ok((tape.value(logits).clone(), tape.macs()))
}

/// One attention sub-block as a standalone operation on a token matrix.
pub fn mhsa_forward(
    model: &ViTModel,
    l: usize,
    x: &Tensor,
    opts: ForwardOpts,
) -> Result<Tensor> {
    let mut tape = Tape::new(false);
    let bound = BoundModel::bind(model, &mut tape);
    let xid = tape.constant(x.clone());
    let out = mhsa(model, &bound, &mut tape, l, xid, opts)?;
    Ok(tape.value(out).clone())
}

/// Token embedding as a standalone operation.
pub fn patchify(model: &ViTModel, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(false);
    let bound = BoundModel::bind(model, &mut tape);
    let x = embed_tokens(model, &bound, &mut tape, image)?;
    Ok(tape.value(x).clone())
}
