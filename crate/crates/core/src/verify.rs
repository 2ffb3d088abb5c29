//! Finite-difference gradient checks of each module on small fixed fixtures.
//!
//! Every fixture keeps widths at most 16 and moves parameters that start at trivial
//! values (zero biases, unit LayerNorm gains, unit running variances) to seeded random
//! values, so the checked gradients are generic.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cpkan::{Cpkan, CpkanConfig};
use crate::data::build_structure_graph;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, Modality};
use crate::head::{Head, HeadConfig};
use crate::mkcl::{encode_batch, Mkcl, MkclConfig};
use crate::msgraph::{GraphBatch, MsGraph, MsGraphConfig};
use crate::numerics::gradcheck::DEFAULT_EPS;
use crate::numerics::nn::{cross_entropy, ForwardCtx};
use crate::numerics::params::split_rng;
use crate::numerics::{grad_check, grad_check_inputs, GradCheckReport, NDArray, ParamStore, Var};

/// Relative error bound used by the harness.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedModule {
    Cpkan,
    Msgraph,
    Mkcl,
    Fusion,
    Head,
}

impl CheckedModule {
    pub const ALL: [CheckedModule; 5] = [
        CheckedModule::Cpkan,
        CheckedModule::Msgraph,
        CheckedModule::Mkcl,
        CheckedModule::Fusion,
        CheckedModule::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedModule::Cpkan => "cpkan",
            CheckedModule::Msgraph => "msgraph",
            CheckedModule::Mkcl => "mkcl",
            CheckedModule::Fusion => "fusion",
            CheckedModule::Head => "head",
        }
    }

    /// `all` or one module name.
    pub fn parse_selection(s: &str) -> Result<Vec<Self>> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .map(|m| vec![m])
            .ok_or_else(|| Error::Usage(format!("unknown module {s:?} (expected all, cpkan, msgraph, mkcl, fusion or head)")))
    }
}

impl fmt::Display for CheckedModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn uniform(shape: &[usize], seed: u64) -> NDArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    NDArray::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

fn randomize(store: &mut ParamStore, name: &str, seed: u64, f: impl Fn(f64) -> f64) {
    let v = store.value_mut(name);
    *v = uniform(v.shape(), seed).map(f);
}

/// `Σ w ⊙ y` with fixed random weights.
fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Var<'t> {
    let w = uniform(&y.shape(), seed);
    (y * y.tape().constant(w)).sum()
}

fn worse(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let coordinates = a.coordinates + b.coordinates;
    let mut out = if b.max_rel_error > a.max_rel_error { b } else { a };
    out.coordinates = coordinates;
    out
}

/// Checks parameter and input gradients of one module.
pub fn check_module(module: CheckedModule) -> Result<GradCheckReport> {
    match module {
        CheckedModule::Cpkan => check_cpkan(),
        CheckedModule::Msgraph => check_msgraph(),
        CheckedModule::Mkcl => check_mkcl(),
        CheckedModule::Fusion => check_fusion(),
        CheckedModule::Head => check_head(),
    }
}

fn check_cpkan() -> Result<GradCheckReport> {
    let mut store = ParamStore::new(1);
    let config = CpkanConfig {
        widths: vec![6, 8, 5],
        ..CpkanConfig::new(6, 5)
    };
    let net = Cpkan::register(&mut store, "exp", config)?;
    for l in 0..2 {
        randomize(&mut store, &format!("exp.layer{l}.b"), 10 + l as u64, |v| v);
    }
    let x = uniform(&[3, 6], 2).map(|v| 2.0 * v);
    let params = grad_check(&store, DEFAULT_EPS, |t, s| {
        Ok(weighted_sum(net.forward(t, s, t.constant(x.clone()))?, 3))
    })?;
    let inputs = grad_check_inputs(&[x.clone()], DEFAULT_EPS, |t, v| {
        Ok(weighted_sum(net.forward(t, &store, v[0])?, 4))
    })?;
    Ok(worse(params, inputs))
}

fn check_msgraph() -> Result<GradCheckReport> {
    let mut store = ParamStore::new(10);
    let config = MsGraphConfig {
        d: 8,
        heads: 2,
        layers: 2,
        ..MsGraphConfig::default()
    };
    let net = MsGraph::register(&mut store, "str", config)?;
    for l in 0..2 {
        for (name, seed) in [("ln.gamma", 1), ("ln.beta", 2), ("out.bias", 3)] {
            randomize(&mut store, &format!("str.attn{l}.{name}"), 10 * l as u64 + seed, |v| v);
        }
    }
    *store.value_mut("str.scale_logits") = NDArray::vector(vec![0.3, -0.2, 0.1]);
    let hairpin = build_structure_graph("GGAUCC", "((..))", &net.config.scales)?;
    let batch = GraphBatch::new(&[&hairpin], &net.config.scales)?;
    grad_check(&store, DEFAULT_EPS, |t, s| {
        let out = net.forward(t, s, &ForwardCtx::eval(), &batch)?;
        Ok(weighted_sum(out.features, 11))
    })
}

fn check_mkcl() -> Result<GradCheckReport> {
    let mut store = ParamStore::new(3);
    let config = MkclConfig {
        kernels: vec![3, 5],
        channels: 6,
        branch_channels: None,
        hidden: 5,
        lstm_layers: 2,
        gate_hidden: 4,
        d_seq: 6,
    };
    let net = Mkcl::register(&mut store, "seq", config)?;
    // Larger recurrent weights keep LSTM gradients well above roundoff.
    for l in 0..2 {
        for (part, seed) in [("w_ih", 30), ("w_hh", 40), ("bias", 50)] {
            randomize(&mut store, &format!("seq.lstm.layer{l}.{part}"), seed + l as u64, |v| 2.0 * v);
        }
    }
    for k in [3, 5] {
        randomize(&mut store, &format!("seq.branch{k}.bn.running_mean"), k as u64, |v| v);
        randomize(&mut store, &format!("seq.branch{k}.bn.running_var"), 10 + k as u64, |v| 1.0 + 0.5 * v);
    }
    for name in ["seq.ln.gamma", "seq.ln.beta", "seq.gate.l1.bias", "seq.compress.bias"] {
        randomize(&mut store, name, 99, |v| 1.0 + v);
    }
    let (x, mask) = encode_batch(&["GAUUACAGGCUA", "ACGUAGGUC"], 12)?;
    let eval = grad_check(&store, DEFAULT_EPS, |t, s| {
        let out = net.forward(t, s, &ForwardCtx::eval(), t.constant(x.clone()), &mask)?;
        Ok(weighted_sum(out.features, 6))
    })?;
    // Training-mode batch norm cancels the preceding conv bias, whose true gradient is
    // then exactly zero; those coordinates are left out of the training-mode pass.
    for k in [3, 5] {
        let id = store
            .id(&format!("seq.branch{k}.conv.bias"))
            .expect("registered above");
        store.get_mut(id).trainable = false;
    }
    let train = grad_check(&store, DEFAULT_EPS, |t, s| {
        let ctx = ForwardCtx::train(split_rng(0, "gradcheck"));
        let out = net.forward(t, s, &ctx, t.constant(x.clone()), &mask)?;
        Ok(weighted_sum(out.features, 7))
    })?;
    Ok(worse(eval, train))
}

fn check_fusion() -> Result<GradCheckReport> {
    let mut store = ParamStore::new(4);
    let config = FusionConfig {
        tokens: 3,
        d_model: 8,
        d_state: 4,
        virtual_nodes: 2,
        residual_layers: 2,
        d_fuse: 5,
        tie_directions: false,
    };
    let dims = [(Modality::Seq, 4), (Modality::Str, 6), (Modality::Exp, 3)];
    let net = Fusion::register(&mut store, "fusion", config, &dims)?;
    *store.value_mut("fusion.depth_logits") = NDArray::vector(vec![0.3, -0.5, 0.1]);
    for (i, (m, _)) in dims.iter().enumerate() {
        randomize(&mut store, &format!("fusion.{m}.tok.bias"), 20 + i as u64, |v| 0.5 * v);
        randomize(&mut store, &format!("fusion.{m}.readout.bias"), 30 + i as u64, |v| v);
    }
    let features: Vec<NDArray> = dims
        .iter()
        .enumerate()
        .map(|(i, &(_, d))| uniform(&[2, d], 40 + i as u64))
        .collect();
    let params = grad_check(&store, DEFAULT_EPS, |t, s| {
        let vars: Vec<Var> = features.iter().map(|f| t.constant(f.clone())).collect();
        Ok(weighted_sum(net.forward(t, s, &vars)?.fused, 8))
    })?;
    let inputs = grad_check_inputs(&features, DEFAULT_EPS, |t, vars| {
        Ok(weighted_sum(net.forward(t, &store, vars)?.fused, 9))
    })?;
    Ok(worse(params, inputs))
}

fn check_head() -> Result<GradCheckReport> {
    let mut store = ParamStore::new(5);
    let hidden = vec![8, 5];
    let net = Head::register(&mut store, "head", 12, &HeadConfig { hidden: hidden.clone() }, 3)?;
    for (l, _) in hidden.iter().enumerate() {
        let p = format!("head.layer{l}");
        randomize(&mut store, &format!("{p}.bn.running_mean"), 10 + l as u64, |v| v);
        randomize(&mut store, &format!("{p}.bn.running_var"), 20 + l as u64, |v| 1.0 + 0.5 * v);
        randomize(&mut store, &format!("{p}.bias"), 30 + l as u64, |v| v);
    }
    let x = uniform(&[4, 12], 6);
    let labels = [0, 2, 1, 1];
    let params = grad_check(&store, DEFAULT_EPS, |t, s| {
        cross_entropy(net.forward(t, s, &ForwardCtx::eval(), t.constant(x.clone()))?, &labels)
    })?;
    let inputs = grad_check_inputs(&[x.clone()], DEFAULT_EPS, |t, v| {
        cross_entropy(net.forward(t, &store, &ForwardCtx::eval(), v[0])?, &labels)
    })?;
    Ok(worse(params, inputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_module_passes() {
        for m in CheckedModule::ALL {
            let r = check_module(m).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{m}: {r:?}");
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(CheckedModule::parse_selection("all").unwrap().len(), 5);
        assert_eq!(CheckedModule::parse_selection("head").unwrap(), vec![CheckedModule::Head]);
        assert!(CheckedModule::parse_selection("lstm").is_err());
    }
}
