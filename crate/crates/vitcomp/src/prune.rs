//! Compactors and consistency-constrained channel selection.
//!
//! Every q/k/v/proj/fc1 weight carries a learnable square compactor that
//! post-multiplies its output. Column L2 norms score channel importance;
//! a global greedy pass marks the lowest-scoring channels for removal
//! until the FLOPs budget is met, expanding each pick so that
//!   * all heads of a block prune the same number of channels per kind, and
//!   * q and k of the same head prune identical column index sets.
//! Masked columns keep shrinking under the group-lasso gradient during
//! fine-tuning and are hard-zeroed only when the model is folded.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::flops::ChannelState;
use crate::tensor::Tensor;
use crate::vit::{Linear, ViTModel};

/// Compactor owner kinds in global tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CompactorKind {
    Q,
    K,
    V,
    Proj,
    Fc1,
}

impl CompactorKind {
    pub fn per_head(self) -> bool {
        matches!(self, CompactorKind::Q | CompactorKind::K | CompactorKind::V)
    }

    pub fn label(self) -> &'static str {
        match self {
            CompactorKind::Q => "q",
            CompactorKind::K => "k",
            CompactorKind::V => "v",
            CompactorKind::Proj => "proj",
            CompactorKind::Fc1 => "fc1",
        }
    }
}

/// Address of one output channel (compactor column).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChannelRef {
    pub block: usize,
    pub kind: CompactorKind,
    pub head: Option<usize>,
    pub col: usize,
}

/// Learnable square transformation with per-column prune masks.
#[derive(Debug, Clone)]
pub struct Compactor {
    /// [d, d], identity at insertion.
    pub m: Tensor,
    /// mask[j] = false exactly when column j is currently marked for pruning.
    pub mask: Vec<bool>,
}

impl Compactor {
    pub fn identity(d: usize) -> Self {
        Compactor {
            m: Tensor::eye(d).trained(),
            mask: vec![true; d],
        }
    }

    pub fn d(&self) -> usize {
        self.mask.len()
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        let d = self.d();
        (0..d)
            .map(|i| {
                let v = self.m.data()[i * d + j] as f64;
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn retained_cols(&self) -> Vec<usize> {
        (0..self.d()).filter(|&j| self.mask[j]).collect()
    }

    fn zero_column(&mut self, j: usize) {
        let d = self.d();
        for i in 0..d {
            self.m.data_mut()[i * d + j] = 0.0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockCompactors {
    pub q: Vec<Compactor>,
    pub k: Vec<Compactor>,
    pub v: Vec<Compactor>,
    pub proj: Compactor,
    pub fc1: Compactor,
}

#[derive(Debug, Clone)]
pub struct Compactors {
    pub blocks: Vec<BlockCompactors>,
}

impl Compactors {
    pub fn identity(model: &ViTModel) -> Self {
        Compactors {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockCompactors {
                    q: b.q.iter().map(|l| Compactor::identity(l.d_out())).collect(),
                    k: b.k.iter().map(|l| Compactor::identity(l.d_out())).collect(),
                    v: b.v.iter().map(|l| Compactor::identity(l.d_out())).collect(),
                    proj: Compactor::identity(b.proj.d_out()),
                    fc1: Compactor::identity(b.fc1.d_out()),
                })
                .collect(),
        }
    }

    pub fn get(&self, block: usize, kind: CompactorKind, head: Option<usize>) -> &Compactor {
        let b = &self.blocks[block];
        match kind {
            CompactorKind::Q => &b.q[head.expect("q is per-head")],
            CompactorKind::K => &b.k[head.expect("k is per-head")],
            CompactorKind::V => &b.v[head.expect("v is per-head")],
            CompactorKind::Proj => &b.proj,
            CompactorKind::Fc1 => &b.fc1,
        }
    }

    pub fn get_mut(
        &mut self,
        block: usize,
        kind: CompactorKind,
        head: Option<usize>,
    ) -> &mut Compactor {
        let b = &mut self.blocks[block];
        match kind {
            CompactorKind::Q => &mut b.q[head.expect("q is per-head")],
            CompactorKind::K => &mut b.k[head.expect("k is per-head")],
            CompactorKind::V => &mut b.v[head.expect("v is per-head")],
            CompactorKind::Proj => &mut b.proj,
            CompactorKind::Fc1 => &mut b.fc1,
        }
    }

    /// Reset every mask to kept, then clear the channels in `p`.
    pub fn set_masks(&mut self, p: &BTreeSet<ChannelRef>) {
        for b in &mut self.blocks {
            for c in b
                .q
                .iter_mut()
                .chain(b.k.iter_mut())
                .chain(b.v.iter_mut())
                .chain([&mut b.proj, &mut b.fc1])
            {
                c.mask.iter_mut().for_each(|m| *m = true);
            }
        }
        for r in p {
            self.get_mut(r.block, r.kind, r.head).mask[r.col] = false;
        }
    }

    pub fn masked_refs(&self) -> BTreeSet<ChannelRef> {
        let mut p = BTreeSet::new();
        for (block, b) in self.blocks.iter().enumerate() {
            let mut push = |kind: CompactorKind, head: Option<usize>, c: &Compactor| {
                for (col, &keep) in c.mask.iter().enumerate() {
                    if !keep {
                        p.insert(ChannelRef {
                            block,
                            kind,
                            head,
                            col,
                        });
                    }
                }
            };
            for (h, c) in b.q.iter().enumerate() {
                push(CompactorKind::Q, Some(h), c);
            }
            for (h, c) in b.k.iter().enumerate() {
                push(CompactorKind::K, Some(h), c);
            }
            for (h, c) in b.v.iter().enumerate() {
                push(CompactorKind::V, Some(h), c);
            }
            push(CompactorKind::Proj, None, &b.proj);
            push(CompactorKind::Fc1, None, &b.fc1);
        }
        p
    }
}

/// Eq-style compactor column gradient: mask gates the task term, the
/// group-lasso term pulls along the unit column direction. A numerically
/// dead column (norm < 1e-12) gets no lasso pull.
pub fn compactor_grad(c: &[f32], mask: bool, g_cls: &[f32], lambda: f32) -> Vec<f32> {
    let norm = c
        .iter()
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    let inv = if norm < 1e-12 { 0.0 } else { 1.0 / norm };
    c.iter()
        .zip(g_cls.iter())
        .map(|(&cv, &gv)| {
            let task = if mask { gv } else { 0.0 };
            task + lambda * ((cv as f64) * inv) as f32
        })
        .collect()
}

/// Replace a compactor's raw task gradient column by column.
pub fn eq_gradient(comp: &Compactor, g_cls: &Tensor, lambda: f32) -> Tensor {
    let d = comp.d();
    let mut out = vec![0.0f32; d * d];
    let mut col = vec![0.0f32; d];
    let mut gcol = vec![0.0f32; d];
    for j in 0..d {
        for i in 0..d {
            col[i] = comp.m.data()[i * d + j];
            gcol[i] = g_cls.data()[i * d + j];
        }
        let g = compactor_grad(&col, comp.mask[j], &gcol, lambda);
        for i in 0..d {
            out[i * d + j] = g[i];
        }
    }
    Tensor::new(vec![d, d], out).expect("square")
}

// ── Scoring ──────────────────────────────────────────────────────────

/// Global score set with deterministic ordered argmin. Scores are column
/// norms; q/k partners share the mean of their two norms.
pub struct ScoreBoard {
    scores: BTreeMap<ChannelRef, f64>,
    ordered: BTreeSet<(u64, ChannelRef)>,
}

impl ScoreBoard {
    pub fn from_model(model: &ViTModel) -> Result<Self> {
        let comps = model
            .compactors
            .as_ref()
            .ok_or_else(|| Error::Config("model has no compactors to score".into()))?;
        let mut board = ScoreBoard {
            scores: BTreeMap::new(),
            ordered: BTreeSet::new(),
        };
        for (block, b) in comps.blocks.iter().enumerate() {
            for (h, (qc, kc)) in b.q.iter().zip(b.k.iter()).enumerate() {
                if qc.d() != kc.d() {
                    return Err(Error::Consistency(format!(
                        "block {block} head {h}: q dim {} != k dim {}",
                        qc.d(),
                        kc.d()
                    )));
                }
                for col in 0..qc.d() {
                    let s = 0.5 * (qc.column_norm(col) + kc.column_norm(col));
                    board.insert(
                        ChannelRef {
                            block,
                            kind: CompactorKind::Q,
                            head: Some(h),
                            col,
                        },
                        s,
                    );
                    board.insert(
                        ChannelRef {
                            block,
                            kind: CompactorKind::K,
                            head: Some(h),
                            col,
                        },
                        s,
                    );
                }
            }
            for (h, vc) in b.v.iter().enumerate() {
                for col in 0..vc.d() {
                    board.insert(
                        ChannelRef {
                            block,
                            kind: CompactorKind::V,
                            head: Some(h),
                            col,
                        },
                        vc.column_norm(col),
                    );
                }
            }
            for col in 0..b.proj.d() {
                board.insert(
                    ChannelRef {
                        block,
                        kind: CompactorKind::Proj,
                        head: None,
                        col,
                    },
                    b.proj.column_norm(col),
                );
            }
            for col in 0..b.fc1.d() {
                board.insert(
                    ChannelRef {
                        block,
                        kind: CompactorKind::Fc1,
                        head: None,
                        col,
                    },
                    b.fc1.column_norm(col),
                );
            }
        }
        Ok(board)
    }

    fn insert(&mut self, r: ChannelRef, s: f64) {
        // norms are non-negative, so the IEEE bit pattern orders numerically
        self.ordered.insert((s.to_bits(), r));
        self.scores.insert(r, s);
    }

    pub fn score(&self, r: &ChannelRef) -> Option<f64> {
        self.scores.get(r).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Remove a channel's score from the board (all views at once).
    pub fn remove(&mut self, r: &ChannelRef) -> Option<f64> {
        let s = self.scores.remove(r)?;
        self.ordered.remove(&(s.to_bits(), *r));
        Some(s)
    }

    /// Lowest score, ties broken by (block, kind q<k<v<proj<fc1, head, col).
    pub fn global_argmin(&self) -> Option<ChannelRef> {
        self.ordered.iter().next().map(|&(_, r)| r)
    }

    /// Lowest score skipping candidates rejected by the filter.
    pub fn global_argmin_where(&self, keep: impl Fn(&ChannelRef) -> bool) -> Option<ChannelRef> {
        self.ordered
            .iter()
            .map(|&(_, r)| r)
            .find(|r| keep(r))
    }

    /// Lowest score within one compactor's local view.
    pub fn local_argmin(
        &self,
        block: usize,
        kind: CompactorKind,
        head: Option<usize>,
    ) -> Option<ChannelRef> {
        self.ordered
            .iter()
            .map(|&(_, r)| r)
            .find(|r| r.block == block && r.kind == kind && r.head == head)
    }
}

/// Expand a per-head pick so every sibling head of the same block and kind
/// loses its own lowest-scoring channel. Scores of all returned channels
/// leave the board.
pub fn head_consistency_expand(
    c: ChannelRef,
    board: &mut ScoreBoard,
    heads: usize,
) -> Result<Vec<ChannelRef>> {
    debug_assert!(c.kind.per_head());
    let own = c.head.expect("per-head channel");
    board.remove(&c);
    let mut out = vec![c];
    for h in 0..heads {
        if h == own {
            continue;
        }
        let sibling = board
            .local_argmin(c.block, c.kind, Some(h))
            .ok_or_else(|| {
                Error::MinRetention(format!(
                    "block {} {} head {h} has no remaining prunable channel",
                    c.block,
                    c.kind.label()
                ))
            })?;
        board.remove(&sibling);
        out.push(sibling);
    }
    Ok(out)
}

/// Pair a q or k channel with the same column of the opposite kind.
/// The partner's score leaves the board; if it is already gone the
/// expansion is a no-op for the partner beyond returning it.
pub fn attention_consistency_expand(c: ChannelRef, board: &mut ScoreBoard) -> Vec<ChannelRef> {
    debug_assert!(matches!(c.kind, CompactorKind::Q | CompactorKind::K));
    let partner = ChannelRef {
        kind: if c.kind == CompactorKind::Q {
            CompactorKind::K
        } else {
            CompactorKind::Q
        },
        ..c
    };
    board.remove(&c);
    board.remove(&partner);
    vec![c, partner]
}

/// Channels marked for removal plus the ratio bookkeeping around them.
#[derive(Debug, Clone, Default)]
pub struct PruneState {
    pub p: BTreeSet<ChannelRef>,
    pub r_current: f64,
    pub r_target: f64,
    /// Ratio gain of the final selection step; the target overshoot is
    /// strictly below this.
    pub last_step: f64,
}

impl PruneState {
    pub fn empty() -> Self {
        PruneState {
            p: BTreeSet::new(),
            r_current: 0.0,
            r_target: 0.0,
            last_step: 0.0,
        }
    }
}

/// Greedy channel selection under head- and attention-level consistency.
///
/// P is rebuilt from scratch on every invocation: fresh score board, empty
/// P, so previously masked channels whose norms recovered are free to stay.
/// `flops_fn` maps a retained-channel state to the channel-attributable
/// FLOPs reduction ratio. Every compactor keeps at least one column.
pub fn select_channels<F>(
    model: &ViTModel,
    r_target: f64,
    flops_fn: F,
) -> Result<PruneState>
where
    F: Fn(&ChannelState) -> Result<f64>,
{
    let mut state = PruneState::empty();
    state.r_target = r_target;
    if r_target <= 0.0 {
        return Ok(state);
    }
    let mut board = ScoreBoard::from_model(model)?;
    let heads = model.config.heads;
    let mut dims = ChannelState::from_model(model);

    while state.r_current < r_target {
        let feasible = |r: &ChannelRef| -> bool {
            let b = &dims.blocks[r.block];
            match r.kind {
                CompactorKind::Q | CompactorKind::K => b.qk_dims.iter().all(|&d| d >= 2),
                CompactorKind::V => b.v_dims.iter().all(|&d| d >= 2),
                CompactorKind::Proj => b.proj_out >= 2,
                CompactorKind::Fc1 => b.fc1 >= 2,
            }
        };
        let Some(c) = board.global_argmin_where(feasible) else {
            return Err(Error::Selection {
                target: r_target,
                max_achievable: state.r_current,
            });
        };
        let batch: Vec<ChannelRef> = match c.kind {
            CompactorKind::Proj | CompactorKind::Fc1 => {
                board.remove(&c);
                vec![c]
            }
            CompactorKind::V => head_consistency_expand(c, &mut board, heads)?,
            CompactorKind::Q | CompactorKind::K => {
                let head_set = head_consistency_expand(c, &mut board, heads)?;
                let mut all = Vec::with_capacity(2 * head_set.len());
                for member in head_set {
                    all.extend(attention_consistency_expand(member, &mut board));
                }
                all
            }
        };
        for r in &batch {
            state.p.insert(*r);
            let b = &mut dims.blocks[r.block];
            match r.kind {
                // the q/k pair counts once per head
                CompactorKind::Q => b.qk_dims[r.head.unwrap()] -= 1,
                CompactorKind::K => {}
                CompactorKind::V => b.v_dims[r.head.unwrap()] -= 1,
                CompactorKind::Proj => b.proj_out -= 1,
                CompactorKind::Fc1 => b.fc1 -= 1,
            }
        }
        let r_new = flops_fn(&dims)?;
        state.last_step = r_new - state.r_current;
        state.r_current = r_new;
    }
    Ok(state)
}

// ── Folding ──────────────────────────────────────────────────────────

/// M restricted to the retained columns: [d, d] -> [d, kept].
pub fn restrict_columns(m: &Tensor, retained: &[usize]) -> Tensor {
    let d = m.shape()[0];
    let k = retained.len();
    let mut out = vec![0.0f32; d * k];
    for i in 0..d {
        for (jj, &j) in retained.iter().enumerate() {
            out[i * k + jj] = m.data()[i * d + j];
        }
    }
    Tensor::new(vec![d, k], out).expect("restricted shape")
}

/// W_bar = W @ M_bar and b_bar = b @ M_bar.
pub fn fold(w: &Tensor, b: &Tensor, m_bar: &Tensor) -> Result<(Tensor, Tensor)> {
    let (w_bar, _) = crate::tensor::matmul(w, m_bar)?;
    let b_row = b.reshaped(vec![1, b.numel()])?;
    let (b_bar, _) = crate::tensor::matmul(&b_row, m_bar)?;
    let kept = m_bar.shape()[1];
    Ok((w_bar, b_bar.reshaped(vec![kept])?))
}

fn fold_linear(lin: &Linear, comp: &Compactor) -> Result<Linear> {
    let m_bar = restrict_columns(&comp.m, &comp.retained_cols());
    let (w, b) = fold(&lin.w, &lin.b, &m_bar)?;
    Ok(Linear {
        w: w.trained(),
        b: b.trained(),
    })
}

fn drop_rows(w: &Tensor, keep: &[usize]) -> Tensor {
    let cols = w.shape()[1];
    let mut data = Vec::with_capacity(keep.len() * cols);
    for &r in keep {
        data.extend_from_slice(&w.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(vec![keep.len(), cols], data)
        .expect("row subset")
        .trained()
}

/// Post-selection audits plus per-compactor norm extremes.
#[derive(Debug, Clone)]
pub struct PruneReportRow {
    pub block: usize,
    pub kind: CompactorKind,
    pub head: Option<usize>,
    pub total: usize,
    pub pruned: usize,
    pub min_retained_norm: f64,
    pub max_retained_norm: f64,
    pub max_pruned_norm: f64,
}

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub rows: Vec<PruneReportRow>,
    pub r_current: f64,
    pub r_target: f64,
    pub head_counts_uniform: bool,
    pub qk_sets_aligned: bool,
    pub max_pruned_norm: f64,
}

impl PruneReport {
    pub fn audits_pass(&self) -> bool {
        self.head_counts_uniform && self.qk_sets_aligned && self.r_current >= self.r_target
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<6} {:<5} {:<5} {:>6} {:>7} {:>14} {:>14} {:>14}\n",
            "block", "kind", "head", "total", "pruned", "min_ret_norm", "max_ret_norm", "max_prune_norm"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<6} {:<5} {:<5} {:>6} {:>7} {:>14.6} {:>14.6} {:>14.6}\n",
                r.block,
                r.kind.label(),
                r.head.map(|h| h.to_string()).unwrap_or_else(|| "-".into()),
                r.total,
                r.pruned,
                r.min_retained_norm,
                r.max_retained_norm,
                r.max_pruned_norm
            ));
        }
        s.push_str(&format!(
            "r_current {:.6}\nr_target {:.6}\nhead_counts_uniform {}\nqk_sets_aligned {}\nmax_pruned_norm {:.6}\naudits_pass {}\n",
            self.r_current,
            self.r_target,
            self.head_counts_uniform,
            self.qk_sets_aligned,
            self.max_pruned_norm,
            self.audits_pass()
        ));
        s
    }

    pub fn render_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let head = r.head.map(|h| h.to_string()).unwrap_or_else(|| "-".into());
            s.push_str(&format!(
                "row block={} kind={} head={} total={} pruned={} min_ret={:.6} max_ret={:.6} max_pruned={:.6}\n",
                r.block,
                r.kind.label(),
                head,
                r.total,
                r.pruned,
                r.min_retained_norm,
                r.max_retained_norm,
                r.max_pruned_norm
            ));
        }
        s.push_str(&format!("r_current {:.6}\n", self.r_current));
        s.push_str(&format!("r_target {:.6}\n", self.r_target));
        s.push_str(&format!("head_counts_uniform {}\n", self.head_counts_uniform));
        s.push_str(&format!("qk_sets_aligned {}\n", self.qk_sets_aligned));
        s.push_str(&format!("max_pruned_norm {:.6}\n", self.max_pruned_norm));
        s.push_str(&format!("audits_pass {}\n", self.audits_pass()));
        s
    }
}

/// Audit the masks of a compacted model against the consistency rules and
/// collect norm extremes per compactor.
pub fn prune_report(model: &ViTModel, r_current: f64, r_target: f64) -> Result<PruneReport> {
    let comps = model
        .compactors
        .as_ref()
        .ok_or_else(|| Error::Config("prune report needs compactors".into()))?;
    let mut rows = Vec::new();
    let mut head_counts_uniform = true;
    let mut qk_sets_aligned = true;
    let mut max_pruned_norm = 0.0f64;
    for (block, b) in comps.blocks.iter().enumerate() {
        for (kind, comps_of_kind) in [
            (CompactorKind::Q, &b.q),
            (CompactorKind::K, &b.k),
            (CompactorKind::V, &b.v),
        ] {
            let counts: Vec<usize> = comps_of_kind
                .iter()
                .map(|c| c.d() - c.unmasked())
                .collect();
            if counts.windows(2).any(|w| w[0] != w[1]) {
                head_counts_uniform = false;
            }
            for (h, c) in comps_of_kind.iter().enumerate() {
                rows.push(report_row(block, kind, Some(h), c));
            }
        }
        for (qc, kc) in b.q.iter().zip(b.k.iter()) {
            if qc.mask != kc.mask {
                qk_sets_aligned = false;
            }
        }
        rows.push(report_row(block, CompactorKind::Proj, None, &b.proj));
        rows.push(report_row(block, CompactorKind::Fc1, None, &b.fc1));
    }
    for r in &rows {
        max_pruned_norm = max_pruned_norm.max(r.max_pruned_norm);
    }
    Ok(PruneReport {
        rows,
        r_current,
        r_target,
        head_counts_uniform,
        qk_sets_aligned,
        max_pruned_norm,
    })
}

fn report_row(
    block: usize,
    kind: CompactorKind,
    head: Option<usize>,
    c: &Compactor,
) -> PruneReportRow {
    let mut min_ret = f64::INFINITY;
    let mut max_ret = 0.0f64;
    let mut max_pruned = 0.0f64;
    for j in 0..c.d() {
        let n = c.column_norm(j);
        if c.mask[j] {
            min_ret = min_ret.min(n);
            max_ret = max_ret.max(n);
        } else {
            max_pruned = max_pruned.max(n);
        }
    }
    if min_ret.is_infinite() {
        min_ret = 0.0;
    }
    PruneReportRow {
        block,
        kind,
        head,
        total: c.d(),
        pruned: c.d() - c.unmasked(),
        min_retained_norm: min_ret,
        max_retained_norm: max_ret,
        max_pruned_norm: max_pruned,
    }
}

/// Diagnostics from `prune_model`.
#[derive(Debug, Clone)]
pub struct FoldDiagnostics {
    /// Largest L2 norm among pruned columns before hard-zeroing.
    pub max_prezero_norm: f64,
    pub pruned_channels: usize,
}

/// Hard-zero every masked compactor column in place, fold all compactors
/// into their preceding weights, and structurally remove the dead
/// dimensions. The input keeps its compactors (now with zeroed columns),
/// so it remains the masked reference model; the returned model is the
/// folded structural one.
pub fn prune_model(model: &mut ViTModel) -> Result<(ViTModel, FoldDiagnostics)> {
    let comps = model
        .compactors
        .as_ref()
        .ok_or_else(|| Error::Config("prune_model needs compactors".into()))?
        .clone();

    // consistency audits must hold before any structural change
    for (block, b) in comps.blocks.iter().enumerate() {
        for (qc, kc) in b.q.iter().zip(b.k.iter()) {
            if qc.mask != kc.mask {
                return Err(Error::Consistency(format!(
                    "block {block}: q/k pruned index sets differ"
                )));
            }
        }
        for set in [&b.q, &b.v] {
            let counts: Vec<usize> = set.iter().map(|c| c.unmasked()).collect();
            if counts.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Consistency(format!(
                    "block {block}: per-head retained counts are not uniform ({counts:?})"
                )));
            }
        }
    }

    let mut diag = FoldDiagnostics {
        max_prezero_norm: 0.0,
        pruned_channels: 0,
    };
    {
        let comps = model.compactors.as_mut().expect("checked above");
        for b in &mut comps.blocks {
            for c in b
                .q
                .iter_mut()
                .chain(b.k.iter_mut())
                .chain(b.v.iter_mut())
                .chain([&mut b.proj, &mut b.fc1])
            {
                for j in 0..c.d() {
                    if !c.mask[j] {
                        diag.max_prezero_norm = diag.max_prezero_norm.max(c.column_norm(j));
                        diag.pruned_channels += 1;
                        c.zero_column(j);
                    }
                }
            }
        }
    }

    let comps = model.compactors.as_ref().expect("checked above");
    let mut folded = model.clone();
    folded.compactors = None;
    for (l, blk) in folded.blocks.iter_mut().enumerate() {
        let bc = &comps.blocks[l];
        for h in 0..blk.q.len() {
            blk.q[h] = fold_linear(&model.blocks[l].q[h], &bc.q[h])?;
            blk.k[h] = fold_linear(&model.blocks[l].k[h], &bc.k[h])?;
            blk.v[h] = fold_linear(&model.blocks[l].v[h], &bc.v[h])?;
        }
        // rows of proj follow the concatenated per-head v dims
        let head_dim = model.blocks[l].v.iter().map(|v| v.d_out()).collect::<Vec<_>>();
        let mut keep_rows = Vec::new();
        let mut base = 0;
        for (h, &d) in head_dim.iter().enumerate() {
            for j in bc.v[h].retained_cols() {
                keep_rows.push(base + j);
            }
            base += d;
        }
        let proj_rows = drop_rows(&model.blocks[l].proj.w, &keep_rows);
        let reduced = Linear {
            w: proj_rows,
            b: model.blocks[l].proj.b.clone(),
        };
        blk.proj = fold_linear(&reduced, &bc.proj)?;
        let retained_proj = bc.proj.retained_cols();
        blk.proj_out_idx = if retained_proj.len() == bc.proj.d() {
            None
        } else {
            Some(retained_proj)
        };
        blk.fc1 = fold_linear(&model.blocks[l].fc1, &bc.fc1)?;
        let keep_fc1 = bc.fc1.retained_cols();
        blk.fc2 = Linear {
            w: drop_rows(&model.blocks[l].fc2.w, &keep_fc1),
            b: model.blocks[l].fc2.b.clone(),
        };
    }
    Ok((folded, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merge::MergePlan;
    use crate::rng;
    use crate::vit::{infer, ForwardOpts, ViTConfig, ViTModel};

    fn toy_model(seed: u64) -> ViTModel {
        let cfg = ViTConfig::new(1, 8, 2, 4, 8, 3).unwrap();
        let mut rng = rng::seeded(seed);
        let mut model = ViTModel::new(cfg, &mut rng).unwrap();
        model.insert_compactors();
        model
    }

    fn jitter_compactors(model: &mut ViTModel, seed: u64) {
        let mut rng = rng::seeded(seed);
        if let Some(c) = &mut model.compactors {
            for b in &mut c.blocks {
                for comp in b
                    .q
                    .iter_mut()
                    .chain(b.k.iter_mut())
                    .chain(b.v.iter_mut())
                    .chain([&mut b.proj, &mut b.fc1])
                {
                    let noise =
                        rng::uniform_tensor(&mut rng, comp.m.shape().to_vec(), 0.3);
                    for (m, n) in comp.m.data_mut().iter_mut().zip(noise.data()) {
                        *m += n;
                    }
                }
            }
        }
    }

    #[test]
    fn compactor_grad_cases() {
        // lasso off: task gradient unchanged
        let g = compactor_grad(&[1.0, 2.0], true, &[0.3, -0.4], 0.0);
        assert_eq!(g, vec![0.3, -0.4]);
        // masked column: pure unit-direction lasso
        let g = compactor_grad(&[3.0, 4.0], false, &[9.0, 9.0], 1e-5);
        assert!((g[0] - 1e-5 * 0.6).abs() < 1e-12);
        assert!((g[1] - 1e-5 * 0.8).abs() < 1e-12);
        // dead column: no pull at all
        let g = compactor_grad(&[0.0, 0.0], false, &[1.0, 1.0], 1e-5);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn lasso_term_matches_finite_difference() {
        let mut rng = rng::seeded(21);
        let c = rng::uniform_tensor(&mut rng, vec![6], 1.0);
        let lambda = 1e-2f32;
        let g = compactor_grad(c.data(), false, &vec![0.0; 6], lambda);
        let h = 1e-3f32;
        for i in 0..6 {
            let mut plus = c.data().to_vec();
            plus[i] += h;
            let mut minus = c.data().to_vec();
            minus[i] -= h;
            let f = |v: &[f32]| {
                lambda * v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!(
                (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-6) <= 1e-3,
                "elem {i}: {} vs {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn qk_scores_are_pair_means() {
        let mut model = toy_model(1);
        jitter_compactors(&mut model, 2);
        let board = ScoreBoard::from_model(&model).unwrap();
        let comps = model.compactors.as_ref().unwrap();
        let q = ChannelRef {
            block: 0,
            kind: CompactorKind::Q,
            head: Some(0),
            col: 1,
        };
        let k = ChannelRef {
            kind: CompactorKind::K,
            ..q
        };
        let want =
            0.5 * (comps.blocks[0].q[0].column_norm(1) + comps.blocks[0].k[0].column_norm(1));
        assert_eq!(board.score(&q).unwrap(), board.score(&k).unwrap());
        assert!((board.score(&q).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn head_expand_takes_sibling_argmin() {
        let mut model = toy_model(3);
        // hand-set v compactor norms for head 1: cols {0.1, 0.2, ...}
        {
            let comps = model.compactors.as_mut().unwrap();
            let d = comps.blocks[0].v[1].d();
            let m = &mut comps.blocks[0].v[1].m;
            for i in 0..d {
                for j in 0..d {
                    m.data_mut()[i * d + j] = if i == j { 0.1 * (j as f32 + 1.0) } else { 0.0 };
                }
            }
        }
        let mut board = ScoreBoard::from_model(&model).unwrap();
        let pick = ChannelRef {
            block: 0,
            kind: CompactorKind::V,
            head: Some(0),
            col: 2,
        };
        let expanded = head_consistency_expand(pick, &mut board, 2).unwrap();
        assert_eq!(expanded.len(), 2);
        assert_eq!(expanded[1].head, Some(1));
        assert_eq!(expanded[1].col, 0, "head 1 argmin is its 0.1-norm column");
        // scores removed from the shared board
        assert!(board.score(&pick).is_none());
        assert!(board.score(&expanded[1]).is_none());
    }

    #[test]
    fn head_expand_single_head_returns_self() {
        let cfg = ViTConfig::new(1, 6, 1, 4, 4, 3).unwrap();
        let mut rng = rng::seeded(4);
        let mut model = ViTModel::new(cfg, &mut rng).unwrap();
        model.insert_compactors();
        let mut board = ScoreBoard::from_model(&model).unwrap();
        let pick = ChannelRef {
            block: 0,
            kind: CompactorKind::V,
            head: Some(0),
            col: 3,
        };
        let expanded = head_consistency_expand(pick, &mut board, 1).unwrap();
        assert_eq!(expanded, vec![pick]);
    }

    #[test]
    fn attention_expand_mirrors_index_and_is_symmetric() {
        let model = toy_model(5);
        let q = ChannelRef {
            block: 0,
            kind: CompactorKind::Q,
            head: Some(0),
            col: 5,
        };
        let k = ChannelRef {
            kind: CompactorKind::K,
            ..q
        };
        let mut board = ScoreBoard::from_model(&model).unwrap();
        let a: BTreeSet<_> = attention_consistency_expand(q, &mut board)
            .into_iter()
            .collect();
        let mut board2 = ScoreBoard::from_model(&model).unwrap();
        let b: BTreeSet<_> = attention_consistency_expand(k, &mut board2)
            .into_iter()
            .collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.contains(&q) && a.contains(&k));
    }

    #[test]
    fn select_zero_target_is_empty() {
        let model = toy_model(6);
        let state = select_channels(&model, 0.0, |_| Ok(0.0)).unwrap();
        assert!(state.p.is_empty());
        assert_eq!(state.r_current, 0.0);
    }

    #[test]
    fn select_unreachable_target_reports_max() {
        let model = toy_model(7);
        let cfg = model.config.clone();
        let plan = MergePlan::empty();
        let err = select_channels(&model, 0.999, |s| {
            crate::flops::channel_reduction(&cfg, &plan, s)
        })
        .unwrap_err();
        match err {
            Error::Selection { max_achievable, .. } => {
                assert!(max_achievable > 0.0 && max_achievable < 0.999)
            }
            other => panic!("wrong error {other}"),
        }
    }

    #[test]
    fn selection_invariants_on_random_model() {
        let cfg = ViTConfig::new(2, 12, 3, 4, 8, 3).unwrap();
        let mut rng = rng::seeded(8);
        let mut model = ViTModel::new(cfg.clone(), &mut rng).unwrap();
        model.insert_compactors();
        jitter_compactors(&mut model, 9);
        let plan = MergePlan::empty();
        let state = select_channels(&model, 0.30, |s| {
            crate::flops::channel_reduction(&cfg, &plan, s)
        })
        .unwrap();
        assert!(state.r_current >= 0.30);
        // per-head pruned counts uniform; q/k sets aligned
        for block in 0..cfg.blocks {
            for kind in [CompactorKind::Q, CompactorKind::K, CompactorKind::V] {
                let counts: Vec<usize> = (0..cfg.heads)
                    .map(|h| {
                        state
                            .p
                            .iter()
                            .filter(|r| r.block == block && r.kind == kind && r.head == Some(h))
                            .count()
                    })
                    .collect();
                assert!(counts.windows(2).all(|w| w[0] == w[1]), "{kind:?} {counts:?}");
            }
            for h in 0..cfg.heads {
                let cols = |kind: CompactorKind| -> BTreeSet<usize> {
                    state
                        .p
                        .iter()
                        .filter(|r| r.block == block && r.kind == kind && r.head == Some(h))
                        .map(|r| r.col)
                        .collect()
                };
                assert_eq!(cols(CompactorKind::Q), cols(CompactorKind::K));
            }
        }
    }

    #[test]
    fn fold_identity_compactor_is_noop() {
        let mut rng = rng::seeded(10);
        let w = rng::uniform_tensor(&mut rng, vec![5, 4], 1.0);
        let b = rng::uniform_tensor(&mut rng, vec![4], 1.0);
        let (wf, bf) = fold(&w, &b, &Tensor::eye(4)).unwrap();
        assert_eq!(wf.data(), w.data());
        assert_eq!(bf.data(), b.data());
    }

    #[test]
    fn fold_equals_two_matmul_path() {
        let mut rng = rng::seeded(11);
        let w = rng::uniform_tensor(&mut rng, vec![5, 4], 1.0);
        let b = rng::uniform_tensor(&mut rng, vec![4], 1.0);
        let m = rng::uniform_tensor(&mut rng, vec![4, 4], 1.0);
        let x = rng::uniform_tensor(&mut rng, vec![3, 5], 1.0);
        let (wf, bf) = fold(&w, &b, &m).unwrap();
        let (one, _) = crate::tensor::matmul(&x, &wf).unwrap();
        let one = crate::tensor::add_row_broadcast(&one, &bf).unwrap();
        let (h, _) = crate::tensor::matmul(&x, &w).unwrap();
        let h = crate::tensor::add_row_broadcast(&h, &b).unwrap();
        let (two, _) = crate::tensor::matmul(&h, &m).unwrap();
        for (a, bb) in one.data().iter().zip(two.data().iter()) {
            assert!((a - bb).abs() <= 1e-5);
        }
    }

    #[test]
    fn prune_model_empty_p_equals_compacted() {
        let mut model = toy_model(12);
        jitter_compactors(&mut model, 13);
        let mut rng = rng::seeded(14);
        let image = rng::uniform_tensor(&mut rng, vec![3, 8, 8], 0.5);
        let (before, _) = infer(&model, &image, ForwardOpts::default()).unwrap();
        let (folded, diag) = prune_model(&mut model).unwrap();
        assert_eq!(diag.pruned_channels, 0);
        let (after, _) = infer(&folded, &image, ForwardOpts::default()).unwrap();
        for (x, y) in before.data().iter().zip(after.data().iter()) {
            assert!((x - y).abs() <= 1e-4);
        }
    }

    #[test]
    fn fold_equivalence_with_masked_channels() {
        let cfg = ViTConfig::new(2, 12, 3, 4, 8, 4).unwrap();
        let mut rng = rng::seeded(15);
        let mut model = ViTModel::new(cfg.clone(), &mut rng).unwrap();
        model.insert_compactors();
        jitter_compactors(&mut model, 16);
        let plan = MergePlan::empty();
        let state = select_channels(&model, 0.25, |s| {
            crate::flops::channel_reduction(&cfg, &plan, s)
        })
        .unwrap();
        model.compactors.as_mut().unwrap().set_masks(&state.p);
        let (folded, diag) = prune_model(&mut model).unwrap();
        assert!(diag.pruned_channels > 0);
        assert!(diag.max_prezero_norm > 0.0);
        for trial in 0..10 {
            let image = rng::uniform_tensor(&mut rng, vec![3, 8, 8], 0.5);
            let (masked, _) = infer(&model, &image, ForwardOpts { apply_masks: true }).unwrap();
            let (pruned, _) = infer(&folded, &image, ForwardOpts::default()).unwrap();
            for (x, y) in masked.data().iter().zip(pruned.data().iter()) {
                assert!((x - y).abs() <= 1e-4, "trial {trial}: {x} vs {y}");
            }
        }
        // structural parameter count matches the analytical audit
        let dims = crate::flops::ChannelState::from_model(&folded);
        assert_eq!(
            folded.param_count() as u64,
            crate::flops::model_params(&cfg, &plan, Some(&dims))
        );
    }

    #[test]
    fn prune_model_rejects_misaligned_qk() {
        let mut model = toy_model(17);
        {
            let comps = model.compactors.as_mut().unwrap();
            comps.blocks[0].q[0].mask[1] = false; // no matching k mask
        }
        assert!(matches!(
            prune_model(&mut model),
            Err(Error::Consistency(_))
        ));
    }
}
