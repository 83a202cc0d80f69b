//! Analytical multiply-accumulate accounting.
//!
//! Counts matmul MACs only; layer norms, softmax, GELU, and bias adds are
//! excluded, and 1 MAC is reported as 1 FLOP (the common counter
//! convention for transformer tables). The analytical totals agree exactly
//! with the tape's recorded forward MAC counter on structural models
//! because both count the same matmuls.

use crate::error::Result;
use crate::merge::MergePlan;
use crate::vit::{ViTConfig, ViTModel};

/// Per-head and per-width retained dimensions of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockChannelState {
    /// Retained q (= k) dims per head.
    pub qk_dims: Vec<usize>,
    /// Retained v dims per head.
    pub v_dims: Vec<usize>,
    /// Retained proj output channels.
    pub proj_out: usize,
    /// Retained fc1 width.
    pub fc1: usize,
}

/// Retained-channel accounting for a whole model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelState {
    pub blocks: Vec<BlockChannelState>,
}

impl ChannelState {
    /// Nothing pruned.
    pub fn full(cfg: &ViTConfig) -> Self {
        ChannelState {
            blocks: (0..cfg.blocks)
                .map(|_| BlockChannelState {
                    qk_dims: vec![cfg.head_dim; cfg.heads],
                    v_dims: vec![cfg.head_dim; cfg.heads],
                    proj_out: cfg.dim,
                    fc1: cfg.ffn_dim(),
                })
                .collect(),
        }
    }

    /// Structural dims of an existing (possibly folded) model.
    pub fn from_model(model: &ViTModel) -> Self {
        ChannelState {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockChannelState {
                    qk_dims: b.q.iter().map(|l| l.d_out()).collect(),
                    v_dims: b.v.iter().map(|l| l.d_out()).collect(),
                    proj_out: b.proj.d_out(),
                    fc1: b.fc1.d_out(),
                })
                .collect(),
        }
    }

    /// Hypothetical dims if every masked compactor column were removed.
    pub fn from_masks(model: &ViTModel) -> Self {
        match &model.compactors {
            None => Self::from_model(model),
            Some(c) => ChannelState {
                blocks: c
                    .blocks
                    .iter()
                    .map(|bc| BlockChannelState {
                        qk_dims: bc.q.iter().map(|comp| comp.unmasked()).collect(),
                        v_dims: bc.v.iter().map(|comp| comp.unmasked()).collect(),
                        proj_out: bc.proj.unmasked(),
                        fc1: bc.fc1.unmasked(),
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct BlockFlops {
    pub tokens: u64,
    pub qkv: u64,
    pub attention: u64,
    pub proj: u64,
    pub ffn: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.qkv + self.attention + self.proj + self.ffn
    }
}

#[derive(Debug, Clone)]
pub struct FlopsReport {
    pub patch_embed: u64,
    pub blocks: Vec<BlockFlops>,
    /// (block index the merge follows, MACs of its fusion linear)
    pub merges: Vec<(usize, u64)>,
    pub head: u64,
    pub total: u64,
    pub baseline_total: u64,
    pub reduction_ratio: f64,
}

impl FlopsReport {
    pub fn giga(&self) -> f64 {
        self.total as f64 / 1e9
    }

    /// Aligned human-readable table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<14} {:>16}\n", "component", "MACs"));
        s.push_str(&format!("{:<14} {:>16}\n", "patch_embed", self.patch_embed));
        for (l, b) in self.blocks.iter().enumerate() {
            s.push_str(&format!(
                "{:<14} {:>16}   (N={} qkv={} attn={} proj={} ffn={})\n",
                format!("block.{l}"),
                b.total(),
                b.tokens,
                b.qkv,
                b.attention,
                b.proj,
                b.ffn
            ));
        }
        for (l, m) in &self.merges {
            s.push_str(&format!("{:<14} {:>16}\n", format!("merge.{l}"), m));
        }
        s.push_str(&format!("{:<14} {:>16}\n", "head", self.head));
        s.push_str(&format!("{:<14} {:>16}\n", "total", self.total));
        s.push_str(&format!("{:<14} {:>16}\n", "baseline", self.baseline_total));
        s.push_str(&format!(
            "{:<14} {:>15.2}%\n",
            "reduction",
            self.reduction_ratio * 100.0
        ));
        s
    }

    /// Machine-readable key-value lines.
    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("patch_embed {}\n", self.patch_embed));
        for (l, b) in self.blocks.iter().enumerate() {
            s.push_str(&format!(
                "block.{l}.tokens {}\nblock.{l}.qkv {}\nblock.{l}.attention {}\nblock.{l}.proj {}\nblock.{l}.ffn {}\n",
                b.tokens, b.qkv, b.attention, b.proj, b.ffn
            ));
        }
        for (l, m) in &self.merges {
            s.push_str(&format!("merge.{l} {m}\n"));
        }
        s.push_str(&format!("head {}\n", self.head));
        s.push_str(&format!("total {}\n", self.total));
        s.push_str(&format!("baseline {}\n", self.baseline_total));
        s.push_str(&format!("reduction_ratio {:.6}\n", self.reduction_ratio));
        s
    }
}

/// MAC audit of (config, merge plan, channel state).
pub fn model_flops(
    cfg: &ViTConfig,
    plan: &MergePlan,
    state: Option<&ChannelState>,
) -> Result<FlopsReport> {
    plan.validate(cfg)?;
    let full = ChannelState::full(cfg);
    let state = state.unwrap_or(&full);
    let c = cfg.dim as u64;
    let patch_embed = cfg.spatial_tokens() as u64 * (3 * cfg.patch * cfg.patch) as u64 * c;
    let head = c * cfg.classes as u64;

    let mut blocks = Vec::with_capacity(cfg.blocks);
    let mut merges = Vec::new();
    let mut spatial = cfg.spatial_tokens() as u64;
    let cls = u64::from(cfg.use_cls);
    for l in 0..cfg.blocks {
        let n = spatial + cls;
        let bs = &state.blocks[l];
        let sum_qk: u64 = bs.qk_dims.iter().map(|&d| d as u64).sum();
        let sum_v: u64 = bs.v_dims.iter().map(|&d| d as u64).sum();
        blocks.push(BlockFlops {
            tokens: n,
            qkv: n * c * (2 * sum_qk + sum_v),
            attention: n * n * sum_qk + n * n * sum_v,
            proj: n * sum_v * bs.proj_out as u64,
            ffn: n * c * bs.fc1 as u64 + n * bs.fc1 as u64 * c,
        });
        if plan.entries.iter().any(|e| e.block == l) {
            spatial /= 2;
            merges.push((l, spatial * 2 * c * c));
        }
    }

    let total = patch_embed
        + head
        + blocks.iter().map(|b| b.total()).sum::<u64>()
        + merges.iter().map(|(_, m)| m).sum::<u64>();

    let baseline_total = if plan.entries.is_empty() && *state == full {
        total
    } else {
        model_flops(cfg, &MergePlan::empty(), None)?.total
    };

    Ok(FlopsReport {
        patch_embed,
        blocks,
        merges,
        head,
        total,
        baseline_total,
        reduction_ratio: 1.0 - total as f64 / baseline_total as f64,
    })
}

/// Reduction attributable to channel pruning alone, merge plan held fixed.
pub fn channel_reduction(cfg: &ViTConfig, plan: &MergePlan, state: &ChannelState) -> Result<f64> {
    let pruned = model_flops(cfg, plan, Some(state))?.total;
    let unpruned = model_flops(cfg, plan, None)?.total;
    Ok(1.0 - pruned as f64 / unpruned as f64)
}

/// Exact parameter count of the folded model for (config, plan, state).
pub fn model_params(cfg: &ViTConfig, plan: &MergePlan, state: Option<&ChannelState>) -> u64 {
    let full = ChannelState::full(cfg);
    let state = state.unwrap_or(&full);
    let c = cfg.dim as u64;
    let mut n = (3 * cfg.patch * cfg.patch) as u64 * c + c; // patch embed
    if cfg.use_cls {
        n += c;
    }
    n += cfg.tokens() as u64 * c; // positions
    for bs in &state.blocks {
        let sum_qk: u64 = bs.qk_dims.iter().map(|&d| d as u64).sum();
        let sum_v: u64 = bs.v_dims.iter().map(|&d| d as u64).sum();
        n += 2 * (c * sum_qk + sum_qk); // q and k
        n += c * sum_v + sum_v;
        n += sum_v * bs.proj_out as u64 + bs.proj_out as u64;
        n += c * bs.fc1 as u64 + bs.fc1 as u64; // fc1
        n += bs.fc1 as u64 * c + c; // fc2
        n += 4 * c; // two layer norms
    }
    n += plan.entries.len() as u64 * (2 * (2 * c) + 2 * c * c + c); // merge fusion
    n += 2 * c; // final norm
    n += c * cfg.classes as u64 + cfg.classes as u64; // head
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::vit::{infer, ForwardOpts, ViTModel};

    #[test]
    fn deit_baselines_match_published_tables() {
        let small = model_flops(&ViTConfig::deit_small(), &MergePlan::empty(), None).unwrap();
        assert!((small.giga() - 4.6).abs() / 4.6 <= 0.02, "{}", small.giga());
        let base = model_flops(&ViTConfig::deit_base(), &MergePlan::empty(), None).unwrap();
        assert!((base.giga() - 17.6).abs() / 17.6 <= 0.02, "{}", base.giga());
        // closed-form check of the per-component decomposition (tiny)
        let tiny = model_flops(&ViTConfig::deit_tiny(), &MergePlan::empty(), None).unwrap();
        let n = 197u64;
        let c = 192u64;
        let per_block = n * c * 3 * c + 2 * n * n * c + n * c * c + 8 * n * c * c;
        assert_eq!(tiny.blocks[0].total(), per_block);
        assert_eq!(tiny.total, 12 * per_block + 196 * 768 * 192 + 192_000);
        assert_eq!(tiny.reduction_ratio, 0.0);
    }

    #[test]
    fn deit_small_worked_merge_ratios() {
        let cfg = ViTConfig::deit_small();
        let uniform = model_flops(&cfg, &MergePlan::parse("3h,7v").unwrap(), None).unwrap();
        assert!(
            (uniform.reduction_ratio - 0.411).abs() <= 0.005,
            "{}",
            uniform.reduction_ratio
        );
        let adjusted = model_flops(&cfg, &MergePlan::parse("3h,6v").unwrap(), None).unwrap();
        assert!(
            (adjusted.reduction_ratio - 0.433).abs() <= 0.005,
            "{}",
            adjusted.reduction_ratio
        );
    }

    #[test]
    fn param_counts_match_published_tables() {
        let p = |cfg: &ViTConfig| model_params(cfg, &MergePlan::empty(), None) as f64;
        assert!((p(&ViTConfig::deit_tiny()) - 5.7e6).abs() / 5.7e6 <= 0.01);
        assert!((p(&ViTConfig::deit_small()) - 22.1e6).abs() / 22.1e6 <= 0.01);
        assert!((p(&ViTConfig::deit_base()) - 86.4e6).abs() / 86.4e6 <= 0.01);
        // two merges on tiny land within the published 5.9M
        let two = model_params(&ViTConfig::deit_tiny(), &MergePlan::parse("2h,5v").unwrap(), None);
        assert!(
            (two as f64 - 5.9e6).abs() <= 0.05e6,
            "{two}"
        );
    }

    #[test]
    fn zero_block_config_closed_form() {
        let cfg = ViTConfig {
            blocks: 0,
            dim: 16,
            heads: 2,
            head_dim: 8,
            patch: 4,
            img: 8,
            classes: 5,
            use_cls: true,
        };
        let n = model_params(&cfg, &MergePlan::empty(), None);
        // patch (48*16+16) + cls 16 + pos 5*16 + final ln 32 + head (16*5+5)
        assert_eq!(n, 784 + 16 + 80 + 32 + 85);
    }

    #[test]
    fn analytical_params_equal_constructed_model() {
        let cfg = ViTConfig::new(3, 24, 3, 4, 16, 7).unwrap();
        let mut rng = rng::seeded(2);
        let mut model = ViTModel::new(cfg.clone(), &mut rng).unwrap();
        assert_eq!(
            model.param_count() as u64,
            model_params(&cfg, &MergePlan::empty(), None)
        );
        let plan = MergePlan::parse("0h,1v").unwrap();
        model.insert_merges(&plan).unwrap();
        assert_eq!(
            model.param_count() as u64,
            model_params(&cfg, &plan, None)
        );
    }

    #[test]
    fn instrumented_forward_agrees_with_analytical() {
        let cfg = ViTConfig::new(3, 16, 2, 4, 16, 5).unwrap();
        let mut rng = rng::seeded(3);
        let mut model = ViTModel::new(cfg.clone(), &mut rng).unwrap();
        let plan = MergePlan::parse("0h,1v").unwrap();
        model.insert_merges(&plan).unwrap();
        let image = rng::uniform_tensor(&mut rng, vec![3, 16, 16], 0.5);
        let (_, macs) = infer(&model, &image, ForwardOpts::default()).unwrap();
        let report = model_flops(&cfg, &plan, None).unwrap();
        assert_eq!(macs, report.total);
    }

    #[test]
    fn monotone_under_merges_and_pruning() {
        let cfg = ViTConfig::new(4, 16, 2, 4, 16, 5).unwrap();
        let base = model_flops(&cfg, &MergePlan::empty(), None).unwrap().total;
        let merged = model_flops(&cfg, &MergePlan::parse("1h").unwrap(), None)
            .unwrap()
            .total;
        assert!(merged < base);
        let mut state = ChannelState::full(&cfg);
        state.blocks[0].fc1 -= 1;
        let pruned = model_flops(&cfg, &MergePlan::empty(), Some(&state))
            .unwrap()
            .total;
        assert!(pruned < base);
    }
}
