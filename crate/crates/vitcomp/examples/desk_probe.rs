use std::time::Instant;
use vitcomp::data::synth_with_split;
use vitcomp::merge::MergePlan;
use vitcomp::trainer::{evaluate, finetune, pretrain, Schedule};
use vitcomp::vit::{ForwardOpts, ViTConfig, ViTModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pre_epochs: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(12);
    let ft_epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let lr: f32 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(3e-3);

    let t0 = Instant::now();
    let data = synth_with_split(42, 512, 256, 32, 10).unwrap();
    let cfg = ViTConfig::desk();
    let mut rng = vitcomp::rng::seeded(42);
    let mut model = ViTModel::new(cfg.clone(), &mut rng).unwrap();
    let mut sched = Schedule::desk(pre_epochs, 32, 0.0);
    sched.base_lr = lr;
    let report = pretrain(&mut model, &data, &sched, 42, Some(&mut |e: &vitcomp::trainer::EpochStats, _m: &ViTModel| {
        eprintln!("{}", e.render_line());
    })).unwrap();
    let (val_acc, _) = evaluate(&model, &data, data.val_indices(), ForwardOpts::default()).unwrap();
    println!("pretrain: {} epochs, train_acc {:.4}, val_acc {:.4}, elapsed {:.1}s",
        pre_epochs, report.last_acc(), val_acc, t0.elapsed().as_secs_f64());

    let t1 = Instant::now();
    let plan = MergePlan::parse("1h,2v").unwrap();
    let mut sched_ft = Schedule::desk(ft_epochs, 32, 0.179);
    sched_ft.base_lr = lr;
    let report = finetune(&mut model, &plan, &data, &sched_ft, 42, None, Some(&mut |e: &vitcomp::trainer::EpochStats, _m| {
        eprintln!("{}", e.render_line());
    })).unwrap();
    let (ft_val, _) = evaluate(&model, &data, data.val_indices(), ForwardOpts::default()).unwrap();
    println!("finetune: train_acc {:.4}, val_acc {:.4} (unmasked fwd), elapsed {:.1}s",
        report.last_acc(), ft_val, t1.elapsed().as_secs_f64());

    // fold and check
    let state = report.final_prune.clone().unwrap();
    println!("final r_current {:.4}, masked {}, max_masked_norm {:.5}",
        state.r_current, state.p.len(),
        report.epochs.last().unwrap().max_masked_norm);
    let (folded, diag) = vitcomp::prune::prune_model(&mut model).unwrap();
    let (fold_acc, _) = evaluate(&folded, &data, data.val_indices(), ForwardOpts::default()).unwrap();
    println!("folded: val_acc {:.4}, max_prezero_norm {:.5}, pruned {}",
        fold_acc, diag.max_prezero_norm, diag.pruned_channels);
    println!("total elapsed {:.1}s", t0.elapsed().as_secs_f64());
}
