//! Full classifier: per-modality encoders, fusion and head, plus batch assembly.

use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::cpkan::Cpkan;
use crate::data::{build_structure_graph, class_count, RnaRecord, StructureGraph};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionOutput, Modality};
use crate::head::Head;
use crate::metrics::{compute_metrics, MetricsReport};
use crate::mkcl::{encode_batch, Mkcl, MkclOutput};
use crate::msgraph::{GraphBatch, MsGraph};
use crate::numerics::nn::{cross_entropy, ForwardCtx};
use crate::numerics::{NDArray, ParamStore, Tape, Var};

/// Sizes fixed by the training data rather than the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// 0 when the data carries no expression profiles.
    pub expression_dim: usize,
    pub max_len: usize,
    pub classes: usize,
}

/// Records with their structure graphs built once.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub records: Vec<RnaRecord>,
    graphs: Vec<StructureGraph>,
    scales: Vec<usize>,
}

impl PreparedDataset {
    pub fn new(records: Vec<RnaRecord>, scales: &[usize]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Ingestion("dataset has no records".into()));
        }
        let graphs = records
            .iter()
            .map(|r| {
                build_structure_graph(&r.sequence, &r.structure, scales).map_err(|e| Error::Record {
                    id: r.id.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dim = records[0].expression.as_ref().map(Vec::len);
        if let Some(bad) = records.iter().find(|r| r.expression.as_ref().map(Vec::len) != dim) {
            return Err(Error::Record {
                id: bad.id.clone(),
                message: "expression profile width differs from the first record".into(),
            });
        }
        Ok(Self {
            records,
            graphs,
            scales: scales.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn classes(&self) -> usize {
        class_count(&self.records)
    }

    pub fn expression_dim(&self) -> usize {
        self.records[0].expression.as_ref().map_or(0, Vec::len)
    }

    pub fn max_sequence_len(&self) -> usize {
        self.records.iter().map(|r| r.sequence.len()).max().unwrap_or(0)
    }

    pub fn graph(&self, i: usize) -> &StructureGraph {
        &self.graphs[i]
    }

    /// Inputs for the records at `indices`, limited to `modalities`.
    pub fn batch(&self, indices: &[usize], modalities: &[Modality], dims: &ModelDims) -> Result<Batch> {
        let records: Vec<&RnaRecord> = indices.iter().map(|&i| &self.records[i]).collect();
        let sequence = if modalities.contains(&Modality::Seq) {
            let seqs: Vec<&str> = records.iter().map(|r| r.sequence.as_str()).collect();
            Some(encode_batch(&seqs, dims.max_len)?)
        } else {
            None
        };
        let graphs = if modalities.contains(&Modality::Str) {
            let gs: Vec<&StructureGraph> = indices.iter().map(|&i| &self.graphs[i]).collect();
            Some(GraphBatch::new(&gs, &self.scales)?)
        } else {
            None
        };
        let expression = if modalities.contains(&Modality::Exp) {
            let mut data = Vec::with_capacity(records.len() * dims.expression_dim);
            for r in &records {
                match &r.expression {
                    Some(e) if e.len() == dims.expression_dim && !e.is_empty() => data.extend_from_slice(e),
                    _ => return Err(Error::ModalityAbsent(format!("exp (record {})", r.id))),
                }
            }
            Some(NDArray::new(vec![records.len(), dims.expression_dim], data)?)
        } else {
            None
        };
        Ok(Batch {
            labels: records.iter().map(|r| r.label).collect(),
            sequence,
            graphs,
            expression,
        })
    }
}

/// Model inputs for one mini-batch.
pub struct Batch {
    pub labels: Vec<usize>,
    pub sequence: Option<(NDArray, Rc<Vec<bool>>)>,
    pub graphs: Option<GraphBatch>,
    pub expression: Option<NDArray>,
}

pub struct ModelOutput<'t> {
    pub logits: Var<'t>,
    /// Encoder features per modality, canonical order.
    pub encoded: Vec<(Modality, Var<'t>)>,
    pub fusion: FusionOutput<'t>,
    /// Per attention layer `[entries, heads]`, when structure is present.
    pub graph_attention: Option<Vec<Rc<NDArray>>>,
    /// CNN/LSTM gate weight `[B, 1]`, when sequence is present.
    pub gate: Option<Var<'t>>,
}

/// Predictions and loss over a set of records.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub modalities: Vec<Modality>,
    pub mkcl: Option<Mkcl>,
    pub msgraph: Option<MsGraph>,
    pub cpkan: Option<Cpkan>,
    pub fusion: Fusion,
    pub head: Head,
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

impl Model {
    /// Registers every parameter in a fresh store seeded with `[train] seed`.
    pub fn build(config: &ModelConfig, modalities: &[Modality], dims: ModelDims) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut modalities = modalities.to_vec();
        modalities.sort();
        modalities.dedup();
        if modalities.len() < 2 {
            return Err(Error::Usage(format!(
                "fusion needs at least two modalities, got {}",
                modalities.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")
            )));
        }
        let mut store = ParamStore::new(config.train.seed);
        let mut encoders = Vec::new();
        let (mut mkcl, mut msgraph, mut cpkan) = (None, None, None);
        for &m in &modalities {
            let width = match m {
                Modality::Seq => {
                    if dims.max_len < config.mkcl.max_kernel() {
                        return Err(Error::config(
                            "data",
                            "max_len",
                            format!("{} is shorter than kernel {}", dims.max_len, config.mkcl.max_kernel()),
                        ));
                    }
                    let enc = Mkcl::register(&mut store, "seq", config.mkcl.clone())?;
                    mkcl = Some(enc);
                    config.mkcl.d_seq
                }
                Modality::Str => {
                    msgraph = Some(MsGraph::register(&mut store, "str", config.msgraph.clone())?);
                    config.msgraph.d
                }
                Modality::Exp => {
                    if dims.expression_dim == 0 {
                        return Err(Error::ModalityAbsent("exp (data has no expression profiles)".into()));
                    }
                    let c = config.cpkan.to_config(dims.expression_dim);
                    let out = c.output_dim();
                    cpkan = Some(Cpkan::register(&mut store, "exp", c)?);
                    out
                }
            };
            encoders.push((m, width));
        }
        let fusion = Fusion::register(&mut store, "fusion", config.fusion.clone(), &encoders)?;
        let head = Head::register(&mut store, "head", fusion.output_dim(), &config.head, dims.classes)?;
        Ok((
            Self {
                config: config.clone(),
                dims,
                modalities,
                mkcl,
                msgraph,
                cpkan,
                fusion,
                head,
            },
            store,
        ))
    }

    /// Dimensions for `data` under `config`.
    pub fn dims_for(config: &ModelConfig, data: &PreparedDataset) -> ModelDims {
        let max_len = match config.data.max_len {
            0 => data.max_sequence_len().max(config.mkcl.max_kernel()),
            n => n,
        };
        ModelDims {
            expression_dim: data.expression_dim(),
            max_len,
            classes: data.classes(),
        }
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &ForwardCtx,
        batch: &Batch,
    ) -> Result<ModelOutput<'t>> {
        let mut encoded = Vec::with_capacity(self.modalities.len());
        let mut graph_attention = None;
        let mut gate = None;
        for &m in &self.modalities {
            let absent = || Error::ModalityAbsent(m.name().into());
            let f = match m {
                Modality::Seq => {
                    let (x, mask) = batch.sequence.as_ref().ok_or_else(absent)?;
                    let enc = self.mkcl.as_ref().ok_or_else(absent)?;
                    let MkclOutput { features, alpha, .. } = enc.forward(tape, store, ctx, tape.constant(x.clone()), mask)?;
                    gate = Some(alpha);
                    features
                }
                Modality::Str => {
                    let graphs = batch.graphs.as_ref().ok_or_else(absent)?;
                    let enc = self.msgraph.as_ref().ok_or_else(absent)?;
                    let out = enc.forward(tape, store, ctx, graphs)?;
                    graph_attention = Some(out.attention);
                    out.features
                }
                Modality::Exp => {
                    let x = batch.expression.as_ref().ok_or_else(absent)?;
                    let enc = self.cpkan.as_ref().ok_or_else(absent)?;
                    enc.forward(tape, store, tape.constant(x.clone()))?
                }
            };
            encoded.push((m, f));
        }
        let features: Vec<Var> = encoded.iter().map(|e| e.1).collect();
        let fusion = self.fusion.forward(tape, store, &features)?;
        let logits = self.head.forward(tape, store, ctx, fusion.fused)?;
        Ok(ModelOutput {
            logits,
            encoded,
            fusion,
            graph_attention,
            gate,
        })
    }

    /// Runs `f` on the eval-mode output of each chunk of `indices`, in parallel over
    /// chunks, returning results in order.
    pub fn map_batches<T, F>(
        &self,
        store: &ParamStore,
        data: &PreparedDataset,
        indices: &[usize],
        batch_size: usize,
        f: F,
    ) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&[usize], &Batch, &ModelOutput<'_>) -> Result<T> + Sync,
    {
        indices
            .par_chunks(batch_size.max(1))
            .map(|chunk| {
                let batch = data.batch(chunk, &self.modalities, &self.dims)?;
                let tape = Tape::new();
                let out = self.forward(&tape, store, &ForwardCtx::eval(), &batch)?;
                f(chunk, &batch, &out)
            })
            .collect()
    }

    /// Eval-mode loss, predictions and metrics on `indices`.
    pub fn evaluate(
        &self,
        store: &ParamStore,
        data: &PreparedDataset,
        indices: &[usize],
        batch_size: usize,
    ) -> Result<Evaluation> {
        if indices.is_empty() {
            return Err(Error::Shape("cannot evaluate an empty split".into()));
        }
        let parts = self.map_batches(store, data, indices, batch_size, |chunk, batch, out| {
            let loss = cross_entropy(out.logits, &batch.labels)?.item();
            let logits = out.logits.value();
            let preds: Vec<usize> = (0..chunk.len()).map(|r| argmax(logits.row(r))).collect();
            Ok((loss * chunk.len() as f64, preds, batch.labels.clone()))
        })?;
        let mut total = 0.0;
        let (mut predictions, mut labels) = (Vec::new(), Vec::new());
        for (l, p, y) in parts {
            total += l;
            predictions.extend(p);
            labels.extend(y);
        }
        let loss = total / indices.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("evaluation loss is {loss}")));
        }
        let metrics = compute_metrics(&predictions, &labels, self.dims.classes)?;
        Ok(Evaluation {
            loss,
            predictions,
            labels,
            metrics,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    pub(crate) fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.cpkan.hidden = vec![6];
        c.cpkan.d_exp = 5;
        c.msgraph.d = 6;
        c.msgraph.heads = 2;
        c.msgraph.layers = 1;
        c.mkcl.kernels = vec![3, 5];
        c.mkcl.channels = 6;
        c.mkcl.hidden = 5;
        c.mkcl.lstm_layers = 1;
        c.mkcl.gate_hidden = 4;
        c.mkcl.d_seq = 6;
        c.fusion.tokens = 3;
        c.fusion.d_model = 6;
        c.fusion.d_state = 3;
        c.fusion.virtual_nodes = 2;
        c.fusion.residual_layers = 1;
        c.fusion.d_fuse = 4;
        c.head.hidden = vec![8];
        c
    }

    fn tiny_data(expression_dim: usize) -> PreparedDataset {
        let spec = SyntheticSpec {
            samples_per_class: 4,
            seq_len: 48,
            expression_dim,
            ..SyntheticSpec::default()
        };
        PreparedDataset::new(generate_synthetic(&spec).unwrap(), &[1, 2, 3]).unwrap()
    }

    #[test]
    fn forward_shapes_for_every_pair_and_triple() {
        let data = tiny_data(7);
        let config = tiny_config();
        let dims = Model::dims_for(&config, &data);
        assert_eq!(dims, ModelDims { expression_dim: 7, max_len: 48, classes: 4 });
        for mods in [
            vec![Modality::Seq, Modality::Str, Modality::Exp],
            vec![Modality::Seq, Modality::Str],
            vec![Modality::Seq, Modality::Exp],
            vec![Modality::Str, Modality::Exp],
        ] {
            let (model, store) = Model::build(&config, &mods, dims).unwrap();
            let batch = data.batch(&[0, 5, 9], &model.modalities, &dims).unwrap();
            let tape = Tape::new();
            let out = model.forward(&tape, &store, &ForwardCtx::eval(), &batch).unwrap();
            assert_eq!(out.logits.shape(), vec![3, 4]);
            assert_eq!(out.fusion.fused.shape(), vec![3, mods.len() * 4]);
            assert_eq!(out.encoded.len(), mods.len());
        }
    }

    #[test]
    fn single_modality_is_a_usage_error() {
        let data = tiny_data(7);
        let dims = Model::dims_for(&tiny_config(), &data);
        let err = Model::build(&tiny_config(), &[Modality::Exp], dims).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn expression_free_data() {
        let data = tiny_data(0);
        let dims = Model::dims_for(&tiny_config(), &data);
        assert!(matches!(
            Model::build(&tiny_config(), &Modality::ALL, dims),
            Err(Error::ModalityAbsent(_))
        ));
        let (model, store) = Model::build(&tiny_config(), &[Modality::Seq, Modality::Str], dims).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let ev = model.evaluate(&store, &data, &all, 5).unwrap();
        assert_eq!(ev.predictions.len(), 16);
    }

    #[test]
    fn evaluation_does_not_depend_on_batch_size() {
        let data = tiny_data(7);
        let dims = Model::dims_for(&tiny_config(), &data);
        let (model, store) = Model::build(&tiny_config(), &Modality::ALL, dims).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        let a = model.evaluate(&store, &data, &all, 3).unwrap();
        let b = model.evaluate(&store, &data, &all, 16).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }
}
