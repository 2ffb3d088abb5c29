//! Training loop, data splits, metrics log and resumable checkpoints.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::Modality;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::model::{argmax, Evaluation, Model, ModelDims, PreparedDataset};
use crate::numerics::nn::{cross_entropy, ForwardCtx};
use crate::numerics::params::split_rng;
use crate::numerics::{NDArray, ParamStore, Tape};
use crate::optim::Adam;

pub const METRICS_HEADER: &str = "epoch,split,loss,acc,mcc,f1,recall,precision";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class shuffled split; every class with at least one record contributes at
/// least one training record. Each part is returned in ascending index order.
pub fn stratified_split(labels: &[usize], train_fraction: f64, val_fraction: f64, seed: u64) -> Result<Split> {
    if labels.is_empty() {
        return Err(Error::Ingestion("cannot split an empty dataset".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = split_rng(seed, "split");
    let mut split = Split::default();
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n);
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train);
        split.train.extend(&members[..n_train]);
        split.val.extend(&members[n_train..n_train + n_val]);
        split.test.extend(&members[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

fn log_row(epoch: usize, split: &str, loss: f64, m: &MetricsReport) -> String {
    format!(
        "{epoch},{split},{loss},{},{},{},{},{}\n",
        m.accuracy, m.mcc, m.f1, m.recall, m.precision
    )
}

/// Parameters and validation score of the best epoch so far.
#[derive(Clone, Debug, PartialEq)]
pub struct BestState {
    pub epoch: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub params: Vec<NDArray>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metrics: MetricsReport,
    pub val: Option<Evaluation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    modalities: Vec<Modality>,
    dims: ModelDims,
    epoch: usize,
    adam_step: u64,
    best_epoch: Option<usize>,
    log: String,
    config: ModelConfig,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub split: Split,
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
    pub best: Option<BestState>,
    /// Metrics log text, header included.
    pub log: String,
}

impl Trainer {
    pub fn new(config: &ModelConfig, modalities: &[Modality], data: &PreparedDataset) -> Result<Self> {
        let dims = Model::dims_for(config, data);
        let (model, store) = Model::build(config, modalities, dims)?;
        let t = &config.train;
        let split = stratified_split(&data.labels(), t.train_fraction, t.val_fraction, t.seed)?;
        let adam = Adam::new(t.adam(), &store);
        Ok(Self {
            model,
            store,
            adam,
            split,
            epoch: 0,
            loss_history: Vec::new(),
            best: None,
            log: format!("{METRICS_HEADER}\n"),
        })
    }

    fn check_data(&self, data: &PreparedDataset) -> Result<()> {
        if data.classes() != self.model.dims.classes {
            return Err(Error::Usage(format!(
                "data has {} classes but the model was built for {}",
                data.classes(),
                self.model.dims.classes
            )));
        }
        Ok(())
    }

    /// One pass over the shuffled training split followed by validation.
    pub fn train_epoch(&mut self, data: &PreparedDataset) -> Result<EpochReport> {
        self.check_data(data)?;
        let t = self.model.config.train.clone();
        let epoch = self.epoch + 1;
        let mut order = self.split.train.clone();
        order.shuffle(&mut split_rng(t.seed, &format!("epoch.{epoch}")));

        let mut total = 0.0;
        let mut predictions = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        for (b, chunk) in order.chunks(t.batch_size).enumerate() {
            let batch = data.batch(chunk, &self.model.modalities, &self.model.dims)?;
            let ctx = ForwardCtx::train(split_rng(t.seed, &format!("dropout.{epoch}.{b}")));
            let tape = Tape::new();
            let out = self.model.forward(&tape, &self.store, &ctx, &batch)?;
            let loss = cross_entropy(out.logits, &batch.labels)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at epoch {epoch}, batch {b}")));
            }
            let logits = out.logits.value();
            predictions.extend((0..chunk.len()).map(|r| argmax(logits.row(r))));
            labels.extend_from_slice(&batch.labels);
            let grads = tape.backward(loss).for_params(&self.store);
            self.adam.step(&mut self.store, &grads)?;
            ctx.apply_stat_updates(&mut self.store);
            total += value * chunk.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        let train_metrics = compute_metrics(&predictions, &labels, self.model.dims.classes)?;
        self.log.push_str(&log_row(epoch, "train", train_loss, &train_metrics));

        let val = if self.split.val.is_empty() {
            None
        } else {
            Some(self.model.evaluate(&self.store, data, &self.split.val, t.batch_size)?)
        };
        let (score_acc, score_loss) = match &val {
            Some(v) => {
                self.log.push_str(&log_row(epoch, "val", v.loss, &v.metrics));
                (v.metrics.accuracy, v.loss)
            }
            None => (train_metrics.accuracy, train_loss),
        };
        let improved = self
            .best
            .as_ref()
            .is_none_or(|b| score_acc > b.accuracy || (score_acc == b.accuracy && score_loss < b.loss));
        if improved {
            self.best = Some(BestState {
                epoch,
                accuracy: score_acc,
                loss: score_loss,
                params: self.store.iter().map(|(_, p)| p.value.clone()).collect(),
            });
        }
        self.epoch = epoch;
        self.loss_history.push(train_loss);
        Ok(EpochReport {
            epoch,
            train_loss,
            train_metrics,
            val,
        })
    }

    /// Trains until `[train] epochs` epochs have completed.
    pub fn fit(&mut self, data: &PreparedDataset, mut on_epoch: impl FnMut(&EpochReport)) -> Result<()> {
        while self.epoch < self.model.config.train.epochs {
            let report = self.train_epoch(data)?;
            on_epoch(&report);
        }
        Ok(())
    }

    /// Copy of the store holding the best-validation parameters.
    pub fn best_store(&self) -> ParamStore {
        let mut store = self.store.clone();
        if let Some(best) = &self.best {
            for ((id, _), value) in self.store.iter().zip(&best.params) {
                store.get_mut(id).value = value.clone();
            }
        }
        store
    }

    /// Evaluates the best parameters on the test split and appends the final log row.
    pub fn finish(&mut self, data: &PreparedDataset) -> Result<Evaluation> {
        self.check_data(data)?;
        let indices = if self.split.test.is_empty() { &self.split.val } else { &self.split.test };
        let store = self.best_store();
        let ev = self
            .model
            .evaluate(&store, data, indices, self.model.config.train.batch_size)?;
        let epoch = self.best.as_ref().map_or(self.epoch, |b| b.epoch);
        self.log.push_str(&log_row(epoch, "test", ev.loss, &ev.metrics));
        Ok(ev)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            modalities: self.model.modalities.clone(),
            dims: self.model.dims,
            epoch: self.epoch,
            adam_step: self.adam.step,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            log: self.log.clone(),
            config: self.model.config.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut ckpt = Checkpoint::default();
        ckpt.push_text("meta", &text);
        for (id, p) in self.store.iter() {
            ckpt.push_array(format!("param/{}", p.name), p.value.clone());
            if p.trainable {
                ckpt.push_array(format!("adam.m/{}", p.name), self.adam.m[id.index()].clone());
                ckpt.push_array(format!("adam.v/{}", p.name), self.adam.v[id.index()].clone());
            }
        }
        if let Some(best) = &self.best {
            ckpt.push_array("state.best_score", NDArray::vector(vec![best.accuracy, best.loss]));
            for ((_, p), value) in self.store.iter().zip(&best.params) {
                ckpt.push_array(format!("best/{}", p.name), value.clone());
            }
        }
        ckpt.push_array("state.loss_history", NDArray::vector(self.loss_history.clone()));
        Ok(ckpt)
    }

    /// Configuration stored in a checkpoint, needed to prepare data before [`Self::from_checkpoint`].
    pub fn checkpoint_config(ckpt: &Checkpoint) -> Result<ModelConfig> {
        Ok(read_meta(ckpt)?.config)
    }

    /// Rebuilds a trainer from a checkpoint; `data` must be the dataset it was trained on.
    pub fn from_checkpoint(ckpt: &Checkpoint, data: &PreparedDataset) -> Result<Self> {
        let meta = read_meta(ckpt)?;
        let (model, mut store) = Model::build(&meta.config, &meta.modalities, meta.dims)?;
        let t = &meta.config.train;
        let mut adam = Adam::new(t.adam(), &store);
        adam.step = meta.adam_step;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for &id in &ids {
            let (name, trainable) = {
                let p = store.get(id);
                (p.name.clone(), p.trainable)
            };
            store.get_mut(id).value = checked(ckpt, &format!("param/{name}"), store.get(id).value.shape())?;
            if trainable {
                let shape = store.get(id).value.shape().to_vec();
                adam.m[id.index()] = checked(ckpt, &format!("adam.m/{name}"), &shape)?;
                adam.v[id.index()] = checked(ckpt, &format!("adam.v/{name}"), &shape)?;
            }
        }
        let best = match meta.best_epoch {
            Some(epoch) => {
                let score = ckpt.array("state.best_score")?.data().to_vec();
                let params = ids
                    .iter()
                    .map(|&id| {
                        let p = store.get(id);
                        checked(ckpt, &format!("best/{}", p.name), p.value.shape())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(BestState {
                    epoch,
                    accuracy: score[0],
                    loss: score[1],
                    params,
                })
            }
            None => None,
        };
        let split = stratified_split(&data.labels(), t.train_fraction, t.val_fraction, t.seed)?;
        let trainer = Self {
            model,
            store,
            adam,
            split,
            epoch: meta.epoch,
            loss_history: ckpt.array("state.loss_history")?.data().to_vec(),
            best,
            log: meta.log,
        };
        trainer.check_data(data)?;
        Ok(trainer)
    }
}

fn read_meta(ckpt: &Checkpoint) -> Result<CheckpointMeta> {
    toml::from_str(ckpt.text("meta")?).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))
}

fn checked(ckpt: &Checkpoint, name: &str, shape: &[usize]) -> Result<NDArray> {
    let a = ckpt.array(name)?;
    if a.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "{name} has shape {:?}, model expects {shape:?}",
            a.shape()
        )));
    }
    Ok(a.clone())
}
