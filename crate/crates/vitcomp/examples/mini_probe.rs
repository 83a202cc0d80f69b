use vitcomp::data::synth_with_split;
use vitcomp::trainer::{evaluate, pretrain, Schedule};
use vitcomp::vit::{ForwardOpts, ViTConfig, ViTModel};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(5);
    let data = synth_with_split(42, 256, 64, 16, 4).unwrap();
    println!("centroid acc: {:.3}", vitcomp::data::centroid_accuracy(&data));
    let cfg = ViTConfig::new(2, 32, 2, 4, 16, 4).unwrap();
    let mut rng = vitcomp::rng::seeded(42);
    let mut model = ViTModel::new(cfg.clone(), &mut rng).unwrap();
    let mut sched = Schedule::desk(epochs, 32, 0.0);
    sched.base_lr = lr;
    pretrain(&mut model, &data, &sched, 42, Some(&mut |e: &vitcomp::trainer::EpochStats, _m: &ViTModel| {
        println!("{}", e.render_line());
    })).unwrap();
    let (val_acc, vl) = evaluate(&model, &data, data.val_indices(), ForwardOpts::default()).unwrap();
    println!("val acc {:.3} loss {:.4}", val_acc, vl);
}
