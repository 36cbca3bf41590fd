use manvid_core::data::RunConfig;
use manvid_core::train::Trainer;
use std::time::Instant;

fn main() {
    let cfg = RunConfig::default();
    let mut trainer = Trainer::new(cfg).unwrap();
    let t0 = Instant::now();
    let data = trainer.dataset().unwrap();
    println!("dataset build: {:.2?}", t0.elapsed());
    let mut log = std::io::sink();
    let t1 = Instant::now();
    trainer.train(&data, 5, &mut log, None).unwrap();
    println!("5 default steps: {:.2?} ({:.2?}/step)", t1.elapsed(), t1.elapsed() / 5);
}
