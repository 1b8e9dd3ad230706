// experiment: AdamW epsilon/lr sweep for the fine-tune stage
use fieldgen::dataio::gen_advecting_gaussian;
use fieldgen::finetune::{finetune_loop, FinetuneConfig, FinetuneParams};
use fieldgen::rng::Rng;
use fieldgen::train::{TrainConfig, Trainer};

fn main() {
    let pack = gen_advecting_gaussian(200, 100, 5, 0.05, [0.3, 0.1], 0.2, 42);
    let cfg = TrainConfig::default();
    let mut trainer = Trainer::new(cfg).unwrap();
    trainer.run_steps(std::slice::from_ref(&pack), 800).unwrap();

    for eps in [1e-3, 1e-2] {
        for lr in [1e-3, 3e-3, 1e-2] {
            let mut rng = Rng::new(5);
            let mut ft = FinetuneParams::init(&mut rng, &trainer.cfg.model);
            let fcfg = FinetuneConfig { xi: 0.5, steps: 200, lr, adam_eps: eps, ..FinetuneConfig::default() };
            let hist = finetune_loop(&trainer.params, &trainer.cfg.model, &mut ft, &pack, &fcfg, true).unwrap();
            let r = |e: &fieldgen::finetune::HistoryEntry| {
                (e.r_continuity + e.r_momentum.iter().sum::<f64>()) / (1.0 + e.r_momentum.len() as f64)
            };
            let m0 = hist[0].mse_vs_gt.unwrap();
            let r0 = r(&hist[0]);
            print!("eps {eps:.0e} lr {lr:.0e}:");
            for s in [50usize, 100, 200] {
                let e = &hist[s];
                print!("  s{s}: R x{:.1} mse {:+.0}%", r0 / r(e), (e.mse_vs_gt.unwrap() / m0 - 1.0) * 100.0);
            }
            println!();
        }
    }
}
