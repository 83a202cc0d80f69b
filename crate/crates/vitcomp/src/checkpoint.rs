//! Bit-exact model checkpoint format.
//!
//! Layout: a versioned text header followed by raw little-endian f32
//! payload. The header carries the config, run metadata, the merge plan,
//! retained-channel index lists (folded models), and a manifest of named
//! tensors with shapes and byte offsets; payload tensors appear in
//! manifest order. Baseline, compacted, and folded models all use the
//! same format.
//!
//!   vitcomp-checkpoint v1
//!   kind baseline|compacted|folded
//!   seed <u64>                  (optional)
//!   config_hash <hex>           (optional)
//!   r_target <f64>              (optional)
//!   r_current <f64>             (optional)
//!   config.blocks <n> ... config.use_cls <0|1>
//!   merge <block> <h|v>         (one per merge entry)
//!   retained <block> <q|v|proj|fc1> <head|-> <i,j,...>   (folded)
//!   tensor <name> f32 <d0>x<d1> <offset>
//!   end
//!   <payload>

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::merge::{MergeDirection, MergeEntry, MergeLayer, MergePlan};
use crate::prune::{BlockCompactors, Compactor, Compactors};
use crate::tensor::Tensor;
use crate::vit::{BlockWeights, LayerNormParams, Linear, ViTConfig, ViTModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Baseline,
    Compacted,
    Folded,
}

impl CheckpointKind {
    fn label(self) -> &'static str {
        match self {
            CheckpointKind::Baseline => "baseline",
            CheckpointKind::Compacted => "compacted",
            CheckpointKind::Folded => "folded",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(CheckpointKind::Baseline),
            "compacted" => Ok(CheckpointKind::Compacted),
            "folded" => Ok(CheckpointKind::Folded),
            other => Err(Error::Checkpoint(format!("unknown kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
    pub r_target: Option<f64>,
    pub r_current: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind) -> Self {
        CheckpointMeta {
            kind,
            seed: None,
            config_hash: None,
            r_target: None,
            r_current: None,
        }
    }
}

fn tensor_entries(model: &ViTModel) -> Vec<(String, Tensor)> {
    let mut entries = Vec::new();
    model.visit_params(&mut |name, t| entries.push((name.to_string(), t.clone())));
    if let Some(c) = &model.compactors {
        for (l, b) in c.blocks.iter().enumerate() {
            let mut push_mask = |name: String, comp: &Compactor| {
                let data: Vec<f32> = comp.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                entries.push((
                    name,
                    Tensor::new(vec![comp.d()], data).expect("mask length"),
                ));
            };
            for (h, comp) in b.q.iter().enumerate() {
                push_mask(format!("block.{l}.attn.q.{h}.mask"), comp);
            }
            for (h, comp) in b.k.iter().enumerate() {
                push_mask(format!("block.{l}.attn.k.{h}.mask"), comp);
            }
            for (h, comp) in b.v.iter().enumerate() {
                push_mask(format!("block.{l}.attn.v.{h}.mask"), comp);
            }
            push_mask(format!("block.{l}.attn.proj.mask"), &b.proj);
            push_mask(format!("block.{l}.ffn.fc1.mask"), &b.fc1);
        }
    }
    entries
}

fn retained_lines(model: &ViTModel) -> Vec<String> {
    // folded models record what survived; q covers k by construction
    let mut lines = Vec::new();
    let cfg = &model.config;
    for (l, blk) in model.blocks.iter().enumerate() {
        for (h, lin) in blk.q.iter().enumerate() {
            if lin.d_out() != cfg.head_dim {
                lines.push(format!(
                    "retained {l} q {h} {}",
                    join_indices(0..lin.d_out())
                ));
            }
        }
        for (h, lin) in blk.v.iter().enumerate() {
            if lin.d_out() != cfg.head_dim {
                lines.push(format!(
                    "retained {l} v {h} {}",
                    join_indices(0..lin.d_out())
                ));
            }
        }
        if let Some(idx) = &blk.proj_out_idx {
            lines.push(format!(
                "retained {l} proj - {}",
                join_indices(idx.iter().copied())
            ));
        }
        if blk.fc1.d_out() != cfg.ffn_dim() {
            lines.push(format!(
                "retained {l} fc1 - {}",
                join_indices(0..blk.fc1.d_out())
            ));
        }
    }
    lines
}

fn join_indices(iter: impl IntoIterator<Item = usize>) -> String {
    iter.into_iter()
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Serialize a model. Deterministic: same model and meta give identical
/// bytes.
pub fn to_bytes(model: &ViTModel, meta: &CheckpointMeta) -> Vec<u8> {
    let cfg = &model.config;
    let mut header = String::new();
    header.push_str("vitcomp-checkpoint v1\n");
    header.push_str(&format!("kind {}\n", meta.kind.label()));
    if let Some(seed) = meta.seed {
        header.push_str(&format!("seed {seed}\n"));
    }
    if let Some(hash) = &meta.config_hash {
        header.push_str(&format!("config_hash {hash}\n"));
    }
    if let Some(r) = meta.r_target {
        header.push_str(&format!("r_target {r}\n"));
    }
    if let Some(r) = meta.r_current {
        header.push_str(&format!("r_current {r}\n"));
    }
    header.push_str(&format!("config.blocks {}\n", cfg.blocks));
    header.push_str(&format!("config.dim {}\n", cfg.dim));
    header.push_str(&format!("config.heads {}\n", cfg.heads));
    header.push_str(&format!("config.head_dim {}\n", cfg.head_dim));
    header.push_str(&format!("config.patch {}\n", cfg.patch));
    header.push_str(&format!("config.img {}\n", cfg.img));
    header.push_str(&format!("config.classes {}\n", cfg.classes));
    header.push_str(&format!("config.use_cls {}\n", u8::from(cfg.use_cls)));
    for entry in &model.merge_plan().entries {
        header.push_str(&format!(
            "merge {} {}\n",
            entry.block,
            entry.direction.short()
        ));
    }
    for line in retained_lines(model) {
        header.push_str(&line);
        header.push('\n');
    }
    let entries = tensor_entries(model);
    let mut offset = 0usize;
    for (name, t) in &entries {
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        header.push_str(&format!("tensor {name} f32 {shape} {offset}\n"));
        offset += t.numel() * 4;
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, t) in &entries {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save(model: &ViTModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ViTModel, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

struct ManifestEntry {
    shape: Vec<usize>,
    offset: usize,
}

/// Parse and validate a checkpoint. Structural coherence (head counts,
/// q/k widths, proj/fc2 input rows, token counts) is enforced, so the
/// returned model is safe to run.
pub fn from_bytes(bytes: &[u8]) -> Result<(ViTModel, CheckpointMeta)> {
    const END: &[u8] = b"\nend\n";
    let pos = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::Checkpoint("missing end marker".into()))?;
    let header = std::str::from_utf8(&bytes[..pos])
        .map_err(|_| Error::Checkpoint("header is not utf-8".into()))?;
    let payload = &bytes[pos + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some("vitcomp-checkpoint v1") {
        return Err(Error::Checkpoint("bad magic line".into()));
    }

    let mut kind = None;
    let mut seed = None;
    let mut config_hash = None;
    let mut r_target = None;
    let mut r_current = None;
    let mut cfg_fields: BTreeMap<String, usize> = BTreeMap::new();
    let mut merge_entries: Vec<MergeEntry> = Vec::new();
    let mut retained: BTreeMap<(usize, String, Option<usize>), Vec<usize>> = BTreeMap::new();
    let mut manifest: Vec<(String, ManifestEntry)> = Vec::new();
    let mut expected_offset = 0usize;

    for line in lines {
        let mut parts = line.split(' ');
        let key = parts.next().unwrap_or_default();
        match key {
            "kind" => kind = Some(CheckpointKind::parse(next(&mut parts, line)?)?),
            "seed" => {
                seed = Some(
                    next(&mut parts, line)?
                        .parse::<u64>()
                        .map_err(|_| bad(line))?,
                )
            }
            "config_hash" => config_hash = Some(next(&mut parts, line)?.to_string()),
            "r_target" => {
                r_target = Some(
                    next(&mut parts, line)?
                        .parse::<f64>()
                        .map_err(|_| bad(line))?,
                )
            }
            "r_current" => {
                r_current = Some(
                    next(&mut parts, line)?
                        .parse::<f64>()
                        .map_err(|_| bad(line))?,
                )
            }
            k if k.starts_with("config.") => {
                let v = next(&mut parts, line)?
                    .parse::<usize>()
                    .map_err(|_| bad(line))?;
                cfg_fields.insert(k["config.".len()..].to_string(), v);
            }
            "merge" => {
                let block = next(&mut parts, line)?
                    .parse::<usize>()
                    .map_err(|_| bad(line))?;
                let direction = match next(&mut parts, line)? {
                    "h" => MergeDirection::Horizontal,
                    "v" => MergeDirection::Vertical,
                    _ => return Err(bad(line)),
                };
                merge_entries.push(MergeEntry { block, direction });
            }
            "retained" => {
                let block = next(&mut parts, line)?
                    .parse::<usize>()
                    .map_err(|_| bad(line))?;
                let kind_s = next(&mut parts, line)?.to_string();
                let head_s = next(&mut parts, line)?;
                let head = if head_s == "-" {
                    None
                } else {
                    Some(head_s.parse::<usize>().map_err(|_| bad(line))?)
                };
                let idx_s = next(&mut parts, line)?;
                let mut idx = Vec::new();
                for part in idx_s.split(',') {
                    if part.is_empty() {
                        continue;
                    }
                    idx.push(part.parse::<usize>().map_err(|_| bad(line))?);
                }
                retained.insert((block, kind_s, head), idx);
            }
            "tensor" => {
                let name = next(&mut parts, line)?.to_string();
                let dtype = next(&mut parts, line)?;
                if dtype != "f32" {
                    return Err(Error::Checkpoint(format!("unsupported dtype '{dtype}'")));
                }
                let shape_s = next(&mut parts, line)?;
                let mut shape = Vec::new();
                for d in shape_s.split('x') {
                    let d = d.parse::<usize>().map_err(|_| bad(line))?;
                    if d == 0 {
                        return Err(Error::Checkpoint(format!("zero dim in '{line}'")));
                    }
                    shape.push(d);
                }
                let offset = next(&mut parts, line)?
                    .parse::<usize>()
                    .map_err(|_| bad(line))?;
                if offset != expected_offset {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: offset {offset}, expected {expected_offset}"
                    )));
                }
                let numel = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
                expected_offset = numel
                    .checked_mul(4)
                    .and_then(|b| b.checked_add(offset))
                    .ok_or_else(|| Error::Checkpoint("offset overflow".into()))?;
                if expected_offset > payload.len() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} extends to byte {expected_offset}, payload has {}",
                        payload.len()
                    )));
                }
                if manifest.iter().any(|(n, _)| n == &name) {
                    return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
                }
                manifest.push((name, ManifestEntry { shape, offset }));
            }
            "" => return Err(Error::Checkpoint("empty header line".into())),
            other => {
                return Err(Error::Checkpoint(format!("unknown header key '{other}'")));
            }
        }
    }
    if payload.len() != expected_offset {
        return Err(Error::Checkpoint(format!(
            "payload length mismatch: manifest needs {expected_offset} bytes, got {}",
            payload.len()
        )));
    }

    let kind = kind.ok_or_else(|| Error::Checkpoint("missing kind".into()))?;
    let get = |k: &str| -> Result<usize> {
        cfg_fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing config.{k}")))
    };
    let config = ViTConfig {
        blocks: get("blocks")?,
        dim: get("dim")?,
        heads: get("heads")?,
        head_dim: get("head_dim")?,
        patch: get("patch")?,
        img: get("img")?,
        classes: get("classes")?,
        use_cls: get("use_cls")? != 0,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, entry) in manifest {
        let numel: usize = entry.shape.iter().product();
        let raw = &payload[entry.offset..entry.offset + numel * 4];
        let mut data = Vec::with_capacity(numel);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
        }
        tensors.insert(
            name,
            Tensor::new(entry.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
    }

    let model = assemble(config, merge_entries, retained, tensors)?;
    Ok((
        model,
        CheckpointMeta {
            kind,
            seed,
            config_hash,
            r_target,
            r_current,
        },
    ))
}

fn next<'a>(parts: &mut std::str::Split<'a, char>, line: &str) -> Result<&'a str> {
    parts
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("malformed line '{line}'")))
}

fn bad(line: &str) -> Error {
    Error::Checkpoint(format!("malformed line '{line}'"))
}

fn take(tensors: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .remove(name)
        .map(|t| t.trained())
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
}

fn expect_2d(t: &Tensor, name: &str) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::Checkpoint(format!(
            "tensor '{name}' must be 2-d, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn take_linear(
    tensors: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    d_in: usize,
    d_out: Option<usize>,
) -> Result<Linear> {
    let w = take(tensors, &format!("{prefix}.w"))?;
    expect_2d(&w, prefix)?;
    if w.shape()[0] != d_in {
        return Err(Error::Checkpoint(format!(
            "{prefix}.w input dim {} != expected {d_in}",
            w.shape()[0]
        )));
    }
    if let Some(d) = d_out {
        if w.shape()[1] != d {
            return Err(Error::Checkpoint(format!(
                "{prefix}.w output dim {} != expected {d}",
                w.shape()[1]
            )));
        }
    }
    let b = take(tensors, &format!("{prefix}.b"))?;
    if b.shape() != [w.shape()[1]] {
        return Err(Error::Checkpoint(format!(
            "{prefix}.b shape {:?} != [{}]",
            b.shape(),
            w.shape()[1]
        )));
    }
    Ok(Linear { w, b })
}

fn take_norm(
    tensors: &mut BTreeMap<String, Tensor>,
    g: &str,
    b: &str,
    dim: usize,
) -> Result<LayerNormParams> {
    let gamma = take(tensors, g)?;
    let beta = take(tensors, b)?;
    if gamma.shape() != [dim] || beta.shape() != [dim] {
        return Err(Error::Checkpoint(format!(
            "layer norm {g}/{b} must have shape [{dim}]"
        )));
    }
    Ok(LayerNormParams { gamma, beta })
}

fn assemble(
    config: ViTConfig,
    merge_entries: Vec<MergeEntry>,
    retained: BTreeMap<(usize, String, Option<usize>), Vec<usize>>,
    mut tensors: BTreeMap<String, Tensor>,
) -> Result<ViTModel> {
    let c = config.dim;
    let plan = MergePlan {
        entries: merge_entries,
    };
    plan.validate(&config)
        .map_err(|e| Error::Checkpoint(format!("invalid merge plan: {e}")))?;

    let patch_embed = take_linear(
        &mut tensors,
        "patch_embed",
        3 * config.patch * config.patch,
        Some(c),
    )?;
    let cls = if config.use_cls {
        let t = take(&mut tensors, "cls")?;
        if t.shape() != [1, c] {
            return Err(Error::Checkpoint(format!(
                "cls shape {:?} != [1, {c}]",
                t.shape()
            )));
        }
        Some(t)
    } else {
        None
    };
    let pos = take(&mut tensors, "pos")?;
    if pos.shape() != [config.tokens(), c] {
        return Err(Error::Checkpoint(format!(
            "pos shape {:?} != [{}, {c}]",
            pos.shape(),
            config.tokens()
        )));
    }

    let has_compactors = tensors.keys().any(|k| k.ends_with(".compactor"));
    let mut blocks = Vec::with_capacity(config.blocks);
    let mut comp_blocks = Vec::with_capacity(config.blocks);
    for l in 0..config.blocks {
        let p = |s: &str| format!("block.{l}.{s}");
        let ln1 = take_norm(&mut tensors, &p("ln1.g"), &p("ln1.b"), c)?;
        let mut q = Vec::with_capacity(config.heads);
        let mut k = Vec::with_capacity(config.heads);
        let mut v = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            q.push(take_linear(&mut tensors, &p(&format!("attn.q.{h}")), c, None)?);
            k.push(take_linear(&mut tensors, &p(&format!("attn.k.{h}")), c, None)?);
            v.push(take_linear(&mut tensors, &p(&format!("attn.v.{h}")), c, None)?);
        }
        for h in 0..config.heads {
            if q[h].d_out() != k[h].d_out() {
                return Err(Error::Checkpoint(format!(
                    "block {l} head {h}: q width {} != k width {}",
                    q[h].d_out(),
                    k[h].d_out()
                )));
            }
            if q[h].d_out() > config.head_dim || v[h].d_out() > config.head_dim {
                return Err(Error::Checkpoint(format!(
                    "block {l} head {h}: head width exceeds config head_dim"
                )));
            }
        }
        let sum_v: usize = v.iter().map(|lin| lin.d_out()).sum();
        let proj = take_linear(&mut tensors, &p("attn.proj"), sum_v, None)?;
        let proj_out = proj.d_out();
        let proj_out_idx = match retained.get(&(l, "proj".to_string(), None)) {
            Some(idx) => {
                if idx.len() != proj_out
                    || idx.iter().any(|&i| i >= c)
                    || idx.windows(2).any(|w| w[0] >= w[1])
                {
                    return Err(Error::Checkpoint(format!(
                        "block {l}: retained proj list inconsistent with width {proj_out}"
                    )));
                }
                Some(idx.clone())
            }
            None => {
                if proj_out != c {
                    return Err(Error::Checkpoint(format!(
                        "block {l}: proj width {proj_out} != {c} but no retained list"
                    )));
                }
                None
            }
        };
        let ln2 = take_norm(&mut tensors, &p("ln2.g"), &p("ln2.b"), c)?;
        let fc1 = take_linear(&mut tensors, &p("ffn.fc1"), c, None)?;
        if fc1.d_out() > config.ffn_dim() {
            return Err(Error::Checkpoint(format!(
                "block {l}: fc1 width {} exceeds 4C",
                fc1.d_out()
            )));
        }
        let fc2 = take_linear(&mut tensors, &p("ffn.fc2"), fc1.d_out(), Some(c))?;

        if has_compactors {
            let mut take_comp = |name: String, d: usize| -> Result<Compactor> {
                let m = take(&mut tensors, &name)?;
                if m.shape() != [d, d] {
                    return Err(Error::Checkpoint(format!(
                        "compactor {name} shape {:?} != [{d}, {d}]",
                        m.shape()
                    )));
                }
                let mask_name = name.replace(".compactor", ".mask");
                let mask = match tensors.remove(&mask_name) {
                    None => vec![true; d],
                    Some(t) => {
                        if t.shape() != [d] {
                            return Err(Error::Checkpoint(format!(
                                "mask {mask_name} shape {:?} != [{d}]",
                                t.shape()
                            )));
                        }
                        t.data()
                            .iter()
                            .map(|&x| {
                                if x == 1.0 {
                                    Ok(true)
                                } else if x == 0.0 {
                                    Ok(false)
                                } else {
                                    Err(Error::Checkpoint(format!(
                                        "mask {mask_name} holds non-binary value {x}"
                                    )))
                                }
                            })
                            .collect::<Result<Vec<bool>>>()?
                    }
                };
                Ok(Compactor { m, mask })
            };
            let mut cq = Vec::new();
            let mut ck = Vec::new();
            let mut cv = Vec::new();
            for h in 0..config.heads {
                cq.push(take_comp(p(&format!("attn.q.{h}.compactor")), q[h].d_out())?);
                ck.push(take_comp(p(&format!("attn.k.{h}.compactor")), k[h].d_out())?);
                cv.push(take_comp(p(&format!("attn.v.{h}.compactor")), v[h].d_out())?);
            }
            let cproj = take_comp(p("attn.proj.compactor"), proj_out)?;
            let cfc1 = take_comp(p("ffn.fc1.compactor"), fc1.d_out())?;
            comp_blocks.push(BlockCompactors {
                q: cq,
                k: ck,
                v: cv,
                proj: cproj,
                fc1: cfc1,
            });
        }

        blocks.push(BlockWeights {
            ln1,
            q,
            k,
            v,
            proj,
            proj_out_idx,
            ln2,
            fc1,
            fc2,
        });
    }

    let final_norm = take_norm(&mut tensors, "final_ln.g", "final_ln.b", c)?;
    let head = take_linear(&mut tensors, "head", c, Some(config.classes))?;

    let mut merges = BTreeMap::new();
    for entry in &plan.entries {
        let l = entry.block;
        let norm = take_norm(
            &mut tensors,
            &format!("merge.{l}.ln.g"),
            &format!("merge.{l}.ln.b"),
            2 * c,
        )?;
        let fuse = take_linear(&mut tensors, &format!("merge.{l}.fc"), 2 * c, Some(c))?;
        merges.insert(l, MergeLayer { norm, fuse });
    }

    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!(
            "unexpected tensor '{name}' in manifest"
        )));
    }

    Ok(ViTModel {
        config,
        patch_embed,
        cls,
        pos,
        blocks,
        final_norm,
        head,
        merges,
        compactors: if has_compactors {
            Some(Compactors {
                blocks: comp_blocks,
            })
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::vit::{infer, ForwardOpts};

    fn model_with_everything(seed: u64) -> ViTModel {
        let cfg = ViTConfig::new(3, 12, 3, 4, 8, 4).unwrap();
        let mut r = rng::seeded(seed);
        let mut model = ViTModel::new(cfg, &mut r).unwrap();
        model
            .insert_merges(&MergePlan::parse("0h,1v").unwrap())
            .unwrap();
        model.insert_compactors();
        model.compactors.as_mut().unwrap().blocks[1].fc1.mask[3] = false;
        model
    }

    #[test]
    fn roundtrip_bit_identical() {
        let model = model_with_everything(1);
        let mut meta = CheckpointMeta::new(CheckpointKind::Compacted);
        meta.seed = Some(42);
        meta.r_target = Some(0.25);
        let bytes = to_bytes(&model, &meta);
        let (back, meta2) = from_bytes(&bytes).unwrap();
        assert_eq!(meta2.seed, Some(42));
        assert_eq!(meta2.r_target, Some(0.25));
        assert_eq!(to_bytes(&back, &meta), bytes);
        assert_eq!(
            back.compactors.as_ref().unwrap().blocks[1].fc1.mask[3],
            false
        );
        // behavior identical too
        let mut r = rng::seeded(9);
        let img = rng::uniform_tensor(&mut r, vec![3, 8, 8], 0.5);
        let (a, _) = infer(&model, &img, ForwardOpts::default()).unwrap();
        let (b, _) = infer(&back, &img, ForwardOpts::default()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn folded_model_roundtrip_with_retained_lists() {
        let mut model = model_with_everything(2);
        {
            let comps = model.compactors.as_mut().unwrap();
            // structured masks: q/k aligned, per-head uniform counts
            for b in 0..3 {
                for h in 0..3 {
                    comps.blocks[b].q[h].mask[1] = false;
                    comps.blocks[b].k[h].mask[1] = false;
                    comps.blocks[b].v[h].mask[0] = false;
                }
                comps.blocks[b].proj.mask[5] = false;
                comps.blocks[b].fc1.mask[7] = false;
            }
        }
        let (folded, _) = crate::prune::prune_model(&mut model).unwrap();
        let bytes = to_bytes(&folded, &CheckpointMeta::new(CheckpointKind::Folded));
        let (back, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(meta.kind, CheckpointKind::Folded);
        assert_eq!(back.blocks[0].q[0].d_out(), 3);
        assert_eq!(back.blocks[0].proj_out_idx, folded.blocks[0].proj_out_idx);
        let mut r = rng::seeded(10);
        let img = rng::uniform_tensor(&mut r, vec![3, 8, 8], 0.5);
        let (a, _) = infer(&folded, &img, ForwardOpts::default()).unwrap();
        let (b, _) = infer(&back, &img, ForwardOpts::default()).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn rejects_corrupt_headers() {
        let model = model_with_everything(3);
        let bytes = to_bytes(&model, &CheckpointMeta::new(CheckpointKind::Baseline));
        // truncate payload
        let mut cut = bytes.clone();
        cut.truncate(cut.len() - 3);
        assert!(from_bytes(&cut).is_err());
        // corrupt a config line
        let text = String::from_utf8_lossy(&bytes[..200]).into_owned();
        assert!(text.contains("config.dim"));
        let mut corrupted = bytes.clone();
        let pos = text.find("config.dim 12").unwrap();
        corrupted[pos + "config.dim ".len()] = b'7';
        assert!(from_bytes(&corrupted).is_err());
        // unknown keys rejected
        let mut weird = b"vitcomp-checkpoint v1\nbogus 3\nend\n".to_vec();
        weird.extend_from_slice(&[]);
        assert!(from_bytes(&weird).is_err());
    }
}
