// experiment: criterion 7 timing and loss-drop at spec sizes
use fieldgen::dataio::gen_advecting_gaussian;
use fieldgen::train::{TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let pack = gen_advecting_gaussian(200, 100, 5, 0.05, [0.3, 0.1], 0.2, 42);
    let cfg = TrainConfig::default(); // toy defaults: n_c 16, n_g 64, 2/2 layers, k 8
    let mut trainer = Trainer::new(cfg).unwrap();
    let t0 = Instant::now();
    let mut first = None;
    let dataset = std::slice::from_ref(&pack);
    for chunk in 0..20 {
        let log = trainer.run_steps(dataset, 100).unwrap();
        let best = log.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
        if first.is_none() { first = Some(log[0].loss); }
        let f = first.unwrap();
        println!("steps {:4}  loss {:.6}  best {:.6}  ratio {:.1}  elapsed {:.1}s",
                 (chunk+1)*100, log.last().unwrap().loss, best, f / best, t0.elapsed().as_secs_f64());
        if f / best >= 10.0 { println!("10x reached at <= {} steps", (chunk+1)*100); break; }
    }
}
