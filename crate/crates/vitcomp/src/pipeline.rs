//! End-to-end orchestration: plan, pretrain, finetune, fold, eval.
//!
//! Every artifact lands under the run's output directory and records the
//! config hash and seed, so a run is reproducible from (config, seed)
//! alone. Stage failures surface with the stage name attached.

use std::path::{Path, PathBuf};

use crate::checkpoint::{self, CheckpointKind, CheckpointMeta};
use crate::config::ResolvedConfig;
use crate::data::{synth_with_split, Dataset};
use crate::error::{Error, Result};
use crate::flops::{self, ChannelState};
use crate::merge::{plan_merges, MergePlan, PlannedMerges};
use crate::prune::{prune_model, prune_report};
use crate::trainer::{evaluate, finetune, pretrain, EpochStats, TrainReport};
use crate::vit::{ForwardOpts, ViTModel};

#[derive(Debug, Clone)]
pub struct PipelineArtifacts {
    pub out_dir: PathBuf,
    pub plan: MergePlan,
    pub token_ratio: f64,
    pub channel_target: f64,
    pub joint_ratio: f64,
    pub baseline_acc: f64,
    pub masked_acc: f64,
    pub folded_acc: f64,
    pub folded_path: PathBuf,
    pub compacted_path: PathBuf,
    pub audits_pass: bool,
    pub r_current: f64,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

fn artifact_header(cfg: &ResolvedConfig) -> String {
    format!("config_hash {}\nseed {}\n", cfg.config_hash, cfg.raw.seed)
}

fn write_artifact(cfg: &ResolvedConfig, path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, format!("{}{body}", artifact_header(cfg)))?;
    Ok(())
}

/// Dataset for a run: synthesized from the seed or loaded from a manifest.
pub fn load_data(cfg: &ResolvedConfig) -> Result<Dataset> {
    match cfg.raw.data.source.as_str() {
        "synth" => synth_with_split(
            cfg.raw.seed,
            cfg.raw.data.n_train,
            cfg.raw.data.n_val,
            cfg.vit.img,
            cfg.vit.classes,
        ),
        "manifest" => {
            let path = cfg
                .raw
                .data
                .manifest
                .as_ref()
                .expect("validated at resolve time");
            let d = Dataset::load(path)?;
            if d.img != cfg.vit.img || d.classes != cfg.vit.classes {
                return Err(Error::Config(format!(
                    "manifest is {}px/{} classes but the model wants {}px/{}",
                    d.img, d.classes, cfg.vit.img, cfg.vit.classes
                )));
            }
            Ok(d)
        }
        _ => unreachable!("validated at resolve time"),
    }
}

/// Merge plan for a run: explicit entries or the planner against the
/// token target; no section means no merges.
pub fn resolve_plan(cfg: &ResolvedConfig) -> Result<PlannedMerges> {
    let vit = &cfg.vit;
    if let Some(spec) = &cfg.raw.merge.entries {
        let plan = MergePlan::parse(spec)?;
        plan.validate(vit)?;
        let achieved = flops::model_flops(vit, &plan, None)?.reduction_ratio;
        return Ok(PlannedMerges {
            plan,
            achieved_ratio: achieved,
        });
    }
    match cfg.raw.merge.token_target {
        Some(target) => plan_merges(vit, target, |p| {
            Ok(flops::model_flops(vit, p, None)?.reduction_ratio)
        }),
        None => Ok(PlannedMerges {
            plan: MergePlan::empty(),
            achieved_ratio: 0.0,
        }),
    }
}

/// Channel budget: explicit, or what the joint target leaves after the
/// merge plan's reduction.
pub fn channel_budget(cfg: &ResolvedConfig, token_ratio: f64) -> f64 {
    if let Some(r) = cfg.raw.prune.final_ratio {
        return r;
    }
    match cfg.raw.prune.joint_target {
        Some(joint) => {
            if joint <= token_ratio {
                0.0
            } else {
                1.0 - (1.0 - joint) / (1.0 - token_ratio)
            }
        }
        None => 0.0,
    }
}

pub fn plan_report_body(planned: &PlannedMerges, vit: &crate::vit::ViTConfig) -> String {
    let mut s = String::new();
    s.push_str(&format!("plan {}\n", planned.plan.to_compact_string()));
    s.push_str(&format!("achieved_ratio {:.6}\n", planned.achieved_ratio));
    let mut grid = (vit.grid_side(), vit.grid_side());
    s.push_str(&format!("grid {}x{}\n", grid.0, grid.1));
    for e in &planned.plan.entries {
        match e.direction {
            crate::merge::MergeDirection::Horizontal => grid.1 /= 2,
            crate::merge::MergeDirection::Vertical => grid.0 /= 2,
        }
        s.push_str(&format!(
            "after_block {} grid {}x{}\n",
            e.block, grid.0, grid.1
        ));
    }
    s
}

fn train_lines(report: &TrainReport) -> String {
    report.render_lines()
}

/// Run every stage and leave all artifacts in the output directory.
pub fn run_pipeline(
    cfg: &ResolvedConfig,
    mut progress: Option<&mut dyn FnMut(&str)>,
) -> Result<PipelineArtifacts> {
    let out = &cfg.out_dir;
    std::fs::create_dir_all(out)?;
    let mut say = |msg: String| {
        if let Some(cb) = progress.as_deref_mut() {
            cb(&msg);
        }
    };

    // plan
    let planned = stage("plan", resolve_plan(cfg))?;
    let token_ratio = planned.achieved_ratio;
    let channel_target = channel_budget(cfg, token_ratio);
    write_artifact(
        cfg,
        &out.join("plan.txt"),
        &plan_report_body(&planned, &cfg.vit),
    )?;
    write_artifact(
        cfg,
        &out.join("plan.kv"),
        &format!(
            "plan {}\ntoken_ratio {:.6}\nchannel_target {:.6}\n",
            planned.plan.to_compact_string(),
            token_ratio,
            channel_target
        ),
    )?;
    say(format!(
        "plan: [{}] token reduction {:.2}%, channel target {:.2}%",
        planned.plan.to_compact_string(),
        token_ratio * 100.0,
        channel_target * 100.0
    ));

    // data
    let data = stage("data", load_data(cfg))?;
    if cfg.raw.data.source == "synth" {
        stage("data", data.save(&out.join("data.bin")))?;
    }

    // baseline: load or pretrain
    let mut baseline = match &cfg.raw.model.baseline {
        Some(path) => {
            let (model, _) = stage("pretrain", checkpoint::load(path))?;
            if model.config != cfg.vit {
                return Err(Error::Stage {
                    stage: "pretrain",
                    source: Box::new(Error::Config(
                        "baseline checkpoint config differs from run config".into(),
                    )),
                });
            }
            model
        }
        None => {
            let mut rng = crate::rng::substream(cfg.raw.seed, "init");
            let mut model = stage("pretrain", ViTModel::new(cfg.vit.clone(), &mut rng))?;
            let sched = stage("pretrain", cfg.raw.schedule.pretrain_schedule())?;
            let report = stage(
                "pretrain",
                pretrain(
                    &mut model,
                    &data,
                    &sched,
                    crate::rng::derive(cfg.raw.seed, "pretrain"),
                    None,
                ),
            )?;
            write_artifact(cfg, &out.join("pretrain_report.txt"), &train_lines(&report))?;
            let mut meta = CheckpointMeta::new(CheckpointKind::Baseline);
            meta.seed = Some(cfg.raw.seed);
            meta.config_hash = Some(cfg.config_hash.clone());
            stage(
                "pretrain",
                checkpoint::save(&model, &meta, &out.join("baseline.ckpt")),
            )?;
            model
        }
    };
    let (baseline_acc, _) = stage(
        "pretrain",
        evaluate(&baseline, &data, data.val_indices(), ForwardOpts::default()),
    )?;
    say(format!("baseline: val top-1 {:.4}", baseline_acc));

    // finetune with compactors
    let sched = stage("finetune", cfg.raw.schedule.to_schedule(channel_target))?;
    let teacher: Option<ViTModel> = if sched.distill_alpha > 0.0 {
        match &cfg.raw.schedule.teacher {
            Some(path) => Some(stage("finetune", checkpoint::load(path))?.0),
            None => Some(baseline.clone()),
        }
    } else {
        None
    };
    let ckpt_every = cfg.raw.schedule.checkpoint_every;
    let mut epoch_sink: Vec<EpochStats> = Vec::new();
    let report = {
        let out_dir = out.clone();
        let hash = cfg.config_hash.clone();
        let seed = cfg.raw.seed;
        let mut on_epoch = |stats: &EpochStats, model: &ViTModel| {
            epoch_sink.push(stats.clone());
            if let Some(every) = ckpt_every {
                if every > 0 && (stats.epoch + 1) % every == 0 {
                    let mut meta = CheckpointMeta::new(CheckpointKind::Compacted);
                    meta.seed = Some(seed);
                    meta.config_hash = Some(hash.clone());
                    meta.r_target = Some(stats.r_target);
                    meta.r_current = Some(stats.r_current);
                    let _ = checkpoint::save(
                        model,
                        &meta,
                        &out_dir.join(format!("compacted-epoch{}.ckpt", stats.epoch)),
                    );
                }
            }
        };
        stage(
            "finetune",
            finetune(
                &mut baseline,
                &planned.plan,
                &data,
                &sched,
                crate::rng::derive(cfg.raw.seed, "finetune"),
                teacher.as_ref(),
                Some(&mut on_epoch),
            ),
        )?
    };
    let mut compacted = baseline;
    write_artifact(cfg, &out.join("train_report.txt"), &train_lines(&report))?;
    let final_state = report.final_prune.clone().unwrap_or_default();
    say(format!(
        "finetune: train top-1 {:.4}, r_current {:.4} (target {:.4})",
        report.last_acc(),
        final_state.r_current,
        channel_target
    ));

    // fold
    let (folded, diag) = stage("fold", prune_model(&mut compacted))?;
    let mut meta = CheckpointMeta::new(CheckpointKind::Compacted);
    meta.seed = Some(cfg.raw.seed);
    meta.config_hash = Some(cfg.config_hash.clone());
    meta.r_target = Some(channel_target);
    meta.r_current = Some(final_state.r_current);
    let compacted_path = out.join("compacted.ckpt");
    stage("fold", checkpoint::save(&compacted, &meta, &compacted_path))?;
    let mut fmeta = meta.clone();
    fmeta.kind = CheckpointKind::Folded;
    let folded_path = out.join("folded.ckpt");
    stage("fold", checkpoint::save(&folded, &fmeta, &folded_path))?;
    let preport = stage(
        "fold",
        prune_report(&compacted, final_state.r_current, channel_target),
    )?;
    write_artifact(cfg, &out.join("prune_report.txt"), &preport.render_table())?;
    write_artifact(cfg, &out.join("prune_report.kv"), &preport.render_kv())?;
    say(format!(
        "fold: {} channels removed, max pre-zero norm {:.5}, audits {}",
        diag.pruned_channels,
        diag.max_prezero_norm,
        if preport.audits_pass() { "pass" } else { "FAIL" }
    ));

    // flops audit of the folded model
    let dims = ChannelState::from_model(&folded);
    let audit = stage(
        "report",
        flops::model_flops(&cfg.vit, &planned.plan, Some(&dims)),
    )?;
    write_artifact(cfg, &out.join("flops.txt"), &audit.render_table())?;
    write_artifact(cfg, &out.join("flops.kv"), &audit.render_kv())?;

    // eval: masked-compacted and folded must agree
    let (masked_acc, _) = stage(
        "eval",
        evaluate(
            &compacted,
            &data,
            data.val_indices(),
            ForwardOpts { apply_masks: true },
        ),
    )?;
    let (folded_acc, _) = stage(
        "eval",
        evaluate(&folded, &data, data.val_indices(), ForwardOpts::default()),
    )?;
    let eval_body = format!(
        "baseline_acc {:.6}\nmasked_acc {:.6}\nfolded_acc {:.6}\nmasked_equals_folded {}\njoint_ratio {:.6}\nr_current {:.6}\nr_target {:.6}\naudits_pass {}\n",
        baseline_acc,
        masked_acc,
        folded_acc,
        masked_acc == folded_acc,
        audit.reduction_ratio,
        final_state.r_current,
        channel_target,
        preport.audits_pass()
    );
    write_artifact(cfg, &out.join("eval.kv"), &eval_body)?;
    write_artifact(
        cfg,
        &out.join("eval.txt"),
        &format!(
            "baseline val top-1   {baseline_acc:.4}\nmasked val top-1     {masked_acc:.4}\nfolded val top-1     {folded_acc:.4}\njoint FLOPs reduction {:.2}%\n",
            audit.reduction_ratio * 100.0
        ),
    )?;
    say(format!(
        "eval: baseline {:.4}, folded {:.4}, joint reduction {:.2}%",
        baseline_acc,
        folded_acc,
        audit.reduction_ratio * 100.0
    ));

    Ok(PipelineArtifacts {
        out_dir: out.clone(),
        plan: planned.plan,
        token_ratio,
        channel_target,
        joint_ratio: audit.reduction_ratio,
        baseline_acc,
        masked_acc,
        folded_acc,
        folded_path,
        compacted_path,
        audits_pass: preport.audits_pass(),
        r_current: final_state.r_current,
    })
}

/// Fold a compacted checkpoint into a structural one next to it.
pub fn fold_checkpoint(input: &Path, out_prefix: &Path) -> Result<(PathBuf, PathBuf)> {
    let (mut model, meta) = checkpoint::load(input)?;
    if model.compactors.is_none() {
        return Err(Error::Config(
            "checkpoint has no compactors to fold".into(),
        ));
    }
    let (folded, _diag) = prune_model(&mut model)?;
    let report = prune_report(
        &model,
        meta.r_current.unwrap_or(0.0),
        meta.r_target.unwrap_or(0.0),
    )?;
    let mut fmeta = meta.clone();
    fmeta.kind = CheckpointKind::Folded;
    let folded_path = out_prefix.with_extension("ckpt");
    checkpoint::save(&folded, &fmeta, &folded_path)?;
    let report_path = out_prefix.with_extension("prune.txt");
    std::fs::write(&report_path, report.render_table())?;
    std::fs::write(out_prefix.with_extension("prune.kv"), report.render_kv())?;
    Ok((folded_path, report_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn mini_config(dir: &Path) -> ResolvedConfig {
        let text = format!(
            r#"
seed = 33
out_dir = "{}"

[model]
blocks = 2
dim = 16
heads = 2
patch = 4
img = 8
classes = 3

[data]
source = "synth"
n_train = 24
n_val = 12

[merge]
entries = "0h"

[prune]
final_ratio = 0.05

[schedule]
pretrain_epochs = 1
epochs = 2
batch = 8
"#,
            dir.display()
        );
        RunConfig::parse(&text).unwrap().resolve("testhash".into()).unwrap()
    }

    #[test]
    fn pipeline_emits_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = mini_config(dir.path());
        let art = run_pipeline(&cfg, None).unwrap();
        for name in [
            "plan.txt",
            "plan.kv",
            "data.bin",
            "baseline.ckpt",
            "pretrain_report.txt",
            "train_report.txt",
            "compacted.ckpt",
            "folded.ckpt",
            "prune_report.txt",
            "prune_report.kv",
            "flops.txt",
            "flops.kv",
            "eval.kv",
            "eval.txt",
        ] {
            assert!(dir.path().join(name).is_file(), "missing {name}");
        }
        assert!(art.audits_pass);
        assert_eq!(art.masked_acc, art.folded_acc);
        // artifacts carry the config hash
        let text = std::fs::read_to_string(dir.path().join("eval.kv")).unwrap();
        assert!(text.starts_with("config_hash testhash\nseed 33\n"));
    }

    #[test]
    fn pipeline_bitwise_deterministic() {
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let cfg = mini_config(dir.path());
            run_pipeline(&cfg, None).unwrap();
            std::fs::read(dir.path().join("folded.ckpt")).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fold_subcommand_on_identity_compactors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = crate::vit::ViTConfig::new(1, 8, 2, 4, 8, 3).unwrap();
        let mut rng = crate::rng::seeded(3);
        let mut model = ViTModel::new(cfg, &mut rng).unwrap();
        model.insert_compactors();
        let input = dir.path().join("in.ckpt");
        checkpoint::save(
            &model,
            &CheckpointMeta::new(CheckpointKind::Compacted),
            &input,
        )
        .unwrap();
        let (folded_path, _) = fold_checkpoint(&input, &dir.path().join("out")).unwrap();
        let (folded, meta) = checkpoint::load(&folded_path).unwrap();
        assert_eq!(meta.kind, CheckpointKind::Folded);
        // P = empty: folded logits equal compacted logits
        let img = crate::rng::uniform_tensor(&mut rng, vec![3, 8, 8], 0.5);
        let (a, _) = crate::vit::infer(&model, &img, ForwardOpts::default()).unwrap();
        let (b, _) = crate::vit::infer(&folded, &img, ForwardOpts::default()).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() <= 1e-4);
        }
    }
}
