use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use hgmamba::checkpoint::Checkpoint;
use hgmamba::config::ModelConfig;
use hgmamba::data::io::write_dataset;
use hgmamba::data::{generate_synthetic, DatasetFiles, SyntheticSpec};
use hgmamba::fusion::Modality;
use hgmamba::metrics::MetricsReport;
use hgmamba::model::PreparedDataset;
use hgmamba::numerics::set_matmul_backward_fault;
use hgmamba::train::Trainer;
use hgmamba::verify::{check_module, CheckedModule, TOLERANCE};
use hgmamba::{Error, Result};

use crate::SplitChoice;

pub const CHECKPOINT_FILE: &str = "checkpoint.hgmb";
pub const METRICS_FILE: &str = "metrics.csv";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn gen_data(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    let records = generate_synthetic(&spec)?;
    let files = write_dataset(out, &records)?;
    println!(
        "wrote {} records ({} classes) to {}{}",
        records.len(),
        spec.num_classes,
        out.display(),
        if files.expression.is_some() { "" } else { " without expression" }
    );
    Ok(())
}

fn load_data(dir: &Path, config: &ModelConfig) -> Result<PreparedDataset> {
    PreparedDataset::new(DatasetFiles::in_dir(dir).load()?, &config.msgraph.scales)
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, modalities: Option<&str>) -> Result<()> {
    let mut config = match config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    config.apply_seed_env()?;
    let modalities = match modalities {
        Some(s) => Modality::parse_list(s)?,
        None => config.data.modalities.clone(),
    };
    let data = load_data(data, &config)?;
    let mut trainer = Trainer::new(&config, &modalities, &data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let start = Instant::now();
    trainer.fit(&data, |r| {
        let val = r
            .val
            .as_ref()
            .map_or(String::new(), |v| format!("  val loss {:.4} acc {:.4}", v.loss, v.metrics.accuracy));
        println!(
            "epoch {:3}  train loss {:.4} acc {:.4}{val}  {:.1}s",
            r.epoch,
            r.train_loss,
            r.train_metrics.accuracy,
            start.elapsed().as_secs_f64()
        );
    })?;
    let test = trainer.finish(&data)?;
    trainer.to_checkpoint()?.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(METRICS_FILE), &trainer.log)?;
    if let Some(best) = &trainer.best {
        println!("best epoch {}", best.epoch);
    }
    println!("test accuracy {}", test.metrics.accuracy);
    Ok(())
}

fn restore(checkpoint: &Path, data: &Path) -> Result<(Trainer, PreparedDataset)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = Trainer::checkpoint_config(&ckpt)?;
    let data = load_data(data, &config)?;
    let trainer = Trainer::from_checkpoint(&ckpt, &data)?;
    Ok((trainer, data))
}

fn print_metrics(split: &str, n: usize, loss: f64, m: &MetricsReport) {
    println!("split {split} ({n} records)");
    println!("loss {loss}");
    println!("accuracy {}", m.accuracy);
    println!("mcc {}", m.mcc);
    println!("f1 {}", m.f1);
    println!("recall {}", m.recall);
    println!("precision {}", m.precision);
}

pub fn eval(checkpoint: &Path, data: &Path, split: SplitChoice) -> Result<()> {
    let (trainer, data) = restore(checkpoint, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (name, indices) = match split {
        SplitChoice::Train => ("train", &trainer.split.train),
        SplitChoice::Val => ("val", &trainer.split.val),
        SplitChoice::Test => ("test", &trainer.split.test),
        SplitChoice::All => ("all", &all),
    };
    let store = trainer.best_store();
    let ev = trainer
        .model
        .evaluate(&store, &data, indices, trainer.model.config.train.batch_size)?;
    print_metrics(name, indices.len(), ev.loss, &ev.metrics);
    Ok(())
}

pub fn gradcheck(module: &str, inject_sign_flip: bool) -> Result<()> {
    let modules = CheckedModule::parse_selection(module)?;
    set_matmul_backward_fault(inject_sign_flip);
    println!("{:<8} {:>14} {:>12}  status", "module", "max_rel_error", "coordinates");
    let mut failed = Vec::new();
    for m in modules {
        let r = check_module(m)?;
        let ok = r.max_rel_error < TOLERANCE;
        if !ok {
            failed.push(m.name());
        }
        println!(
            "{:<8} {:>14.3e} {:>12}  {}",
            m.name(),
            r.max_rel_error,
            r.coordinates,
            if ok { "ok" } else { "FAIL" }
        );
    }
    set_matmul_backward_fault(false);
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}

enum Stage {
    Encoder(Modality),
    Fused,
}

fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "fused" => Ok(Stage::Fused),
        other => Modality::parse(other)
            .map(Stage::Encoder)
            .map_err(|_| Error::Usage(format!("unknown stage {other:?} (expected seq, str, exp or fused)"))),
    }
}

pub fn export_embeddings(checkpoint: &Path, data: &Path, stage: &str, out: &Path) -> Result<()> {
    let stage = parse_stage(stage)?;
    let (trainer, data) = restore(checkpoint, data)?;
    let model = &trainer.model;
    if let Stage::Encoder(m) = stage {
        if !model.modalities.contains(&m) {
            return Err(Error::ModalityAbsent(format!("{m} (checkpoint was trained without it)")));
        }
    }
    let store = trainer.best_store();
    let all: Vec<usize> = (0..data.len()).collect();
    let chunks = model.map_batches(&store, &data, &all, model.config.train.batch_size, |chunk, batch, out| {
        let features = match stage {
            Stage::Fused => out.fusion.fused,
            Stage::Encoder(m) => out
                .encoded
                .iter()
                .find(|e| e.0 == m)
                .map(|e| e.1)
                .ok_or_else(|| Error::ModalityAbsent(m.name().into()))?,
        };
        let value = features.value();
        let mut text = String::new();
        for (r, &i) in chunk.iter().enumerate() {
            let _ = write!(text, "{},{}", data.records[i].id, batch.labels[r]);
            for v in value.row(r) {
                let _ = write!(text, ",{v}");
            }
            text.push('\n');
        }
        Ok((value.shape()[1], text))
    })?;
    let width = chunks.first().map_or(0, |c| c.0);
    let mut csv = String::from("id,label");
    for k in 0..width {
        let _ = write!(csv, ",f{k}");
    }
    csv.push('\n');
    for (_, text) in chunks {
        csv.push_str(&text);
    }
    write_file(out, &csv)?;
    println!("wrote {} rows of width {width} to {}", data.len(), out.display());
    Ok(())
}

pub fn export_attention(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let (trainer, data) = restore(checkpoint, data)?;
    let model = &trainer.model;
    if !model.modalities.contains(&Modality::Str) {
        return Err(Error::ModalityAbsent("str (checkpoint was trained without it)".into()));
    }
    let store = trainer.best_store();
    let all: Vec<usize> = (0..data.len()).collect();
    let chunks = model.map_batches(&store, &data, &all, model.config.train.batch_size, |chunk, batch, out| {
        let graphs = batch.graphs.as_ref().ok_or_else(|| Error::ModalityAbsent("str".into()))?;
        let layers = out
            .graph_attention
            .as_ref()
            .ok_or_else(|| Error::ModalityAbsent("str".into()))?;
        let mut text = String::new();
        for (l, alpha) in layers.iter().enumerate() {
            for e in 0..graphs.attn_dst.len() {
                let (dst, src) = (graphs.attn_dst[e], graphs.attn_src[e]);
                let g = graphs.node_graph[dst];
                let base = graphs.graph_offsets[g];
                for (h, a) in alpha.row(e).iter().enumerate() {
                    let _ = writeln!(
                        text,
                        "{},{l},{h},{},{},{a}",
                        data.records[chunk[g]].id,
                        dst - base,
                        src - base
                    );
                }
            }
        }
        Ok(text)
    })?;
    let mut csv = String::from("id,layer,head,target,source,alpha\n");
    for text in chunks {
        csv.push_str(&text);
    }
    write_file(out, &csv)?;
    println!("wrote attention weights for {} records to {}", data.len(), out.display());
    Ok(())
}
