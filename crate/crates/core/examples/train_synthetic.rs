//! Trains on generated synthetic data and prints per-epoch progress.
//!
//! `cargo run --release --example train_synthetic -- [config.toml] [modalities] [seed] [spec.toml]`

use std::time::Instant;

use hgmamba::config::ModelConfig;
use hgmamba::data::{generate_synthetic, SyntheticSpec};
use hgmamba::fusion::Modality;
use hgmamba::model::PreparedDataset;
use hgmamba::train::Trainer;

fn main() -> hgmamba::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut config = match args.first() {
        Some(p) => ModelConfig::load(p.as_ref())?,
        None => ModelConfig::default(),
    };
    let modalities = match args.get(1) {
        Some(s) => Modality::parse_list(s)?,
        None => config.data.modalities.clone(),
    };
    let mut spec: SyntheticSpec = match args.get(3) {
        Some(p) => SyntheticSpec::load(p.as_ref())?,
        None => SyntheticSpec::default(),
    };
    spec.seed = args.get(2).map_or(0, |s| s.parse().expect("seed"));
    config.train.seed = spec.seed;
    let data = PreparedDataset::new(generate_synthetic(&spec)?, &config.msgraph.scales)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(&config, &modalities, &data)?;
    trainer.fit(&data, |r| {
        println!(
            "epoch {:3}  loss {:.4}  train acc {:.3}  val acc {:.3}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.train_metrics.accuracy,
            r.val.as_ref().map_or(f64::NAN, |v| v.metrics.accuracy),
            start.elapsed().as_secs_f64()
        )
    })?;
    let test = trainer.finish(&data)?;
    let best = trainer.best_store();
    let train = trainer
        .model
        .evaluate(&best, &data, &trainer.split.train, config.train.batch_size)?;
    println!(
        "best epoch {:?}  train acc {:.4}  test acc {:.4}  mcc {:.4}  {:.1}s",
        trainer.best.as_ref().map(|b| b.epoch),
        train.metrics.accuracy,
        test.metrics.accuracy,
        test.metrics.mcc,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
