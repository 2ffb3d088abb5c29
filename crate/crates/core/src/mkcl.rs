//! Sequence encoder: parallel multi-kernel convolutions and an LSTM, mixed by a learned
//! gate and projected to `F_seq`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{
    self, conv1d_same, layer_norm, lstm_forward, masked_max_pool, register_lstm, BatchNorm, ForwardCtx,
    LstmLayerNames, LAYER_NORM_EPS,
};
use crate::numerics::{concat, InitSpec, NDArray, ParamStore, Tape, Var};

/// One-hot nucleotide width.
pub const SEQ_FEATURES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MkclConfig {
    pub kernels: Vec<usize>,
    /// Total branch channels `C_out`, split by [`allocate_channels`].
    pub channels: usize,
    /// Explicit per-branch channel counts; overrides the inverse-kernel split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_channels: Option<Vec<usize>>,
    /// Width of the compressed CNN features and of the LSTM state.
    pub hidden: usize,
    pub lstm_layers: usize,
    pub gate_hidden: usize,
    pub d_seq: usize,
}

impl Default for MkclConfig {
    fn default() -> Self {
        Self {
            kernels: vec![3, 5, 7, 9],
            channels: 128,
            branch_channels: None,
            hidden: 64,
            lstm_layers: 2,
            gate_hidden: 32,
            d_seq: 64,
        }
    }
}

impl MkclConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, msg: String| Err(Error::config("mkcl", key, msg));
        if self.kernels.is_empty() {
            return err("kernels", "need at least one kernel".into());
        }
        for (i, &k) in self.kernels.iter().enumerate() {
            if k % 2 == 0 {
                return err("kernels", format!("kernel size {k} is not odd"));
            }
            if self.kernels[..i].contains(&k) {
                return err("kernels", format!("kernel size {k} repeated"));
            }
        }
        if let Some(list) = &self.branch_channels {
            if list.len() != self.kernels.len() || list.contains(&0) {
                return err("branch_channels", "need one positive count per kernel".into());
            }
        } else if self.channels < self.kernels.len() {
            return err(
                "channels",
                format!("{} channels for {} branches", self.channels, self.kernels.len()),
            );
        }
        for (key, v) in [
            ("hidden", self.hidden),
            ("lstm_layers", self.lstm_layers),
            ("gate_hidden", self.gate_hidden),
            ("d_seq", self.d_seq),
        ] {
            if v == 0 {
                return err(key, "must be positive".into());
            }
        }
        Ok(())
    }

    pub fn branch_channels(&self) -> Result<Vec<usize>> {
        match &self.branch_channels {
            Some(list) => Ok(list.clone()),
            None => Ok(allocate_channels(&self.kernels, self.channels)?.counts),
        }
    }

    pub fn max_kernel(&self) -> usize {
        self.kernels.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAllocation {
    pub counts: Vec<usize>,
    /// `Σ_j 1/(k_j + 1)`.
    pub normalizer: f64,
}

/// Splits `c_out` channels across branches in proportion to `1/(k+1)`.
///
/// Floors the ideal shares, hands the remainder to the largest fractional parts
/// (ties to the smaller kernel), then lifts any empty branch by taking a channel
/// from the largest one.
pub fn allocate_channels(kernels: &[usize], c_out: usize) -> Result<ChannelAllocation> {
    let n = kernels.len();
    if n == 0 || c_out < n {
        return Err(Error::Shape(format!("{c_out} channels cannot cover {n} branches")));
    }
    // Exact rational shares: c_out · w_i / Σw with w_i = L / (k_i + 1) for a common multiple L.
    let lcm = kernels.iter().fold(1u128, |acc, &k| {
        let k = k as u128 + 1;
        acc / gcd(acc, k) * k
    });
    let weights: Vec<u128> = kernels.iter().map(|&k| lcm / (k as u128 + 1)).collect();
    let total: u128 = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| (c_out as u128 * w / total) as usize).collect();
    let remainders: Vec<u128> = weights.iter().map(|w| c_out as u128 * w % total).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(kernels[a].cmp(&kernels[b])));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(c_out - assigned) {
        counts[i] += 1;
    }
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..n).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("non-empty");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(ChannelAllocation {
        counts,
        normalizer: kernels.iter().map(|&k| 1.0 / (k as f64 + 1.0)).sum(),
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `α·F_cnn + (1 − α)·F_lstm`, `α[B, 1]` the first of two softmax gate probabilities.
pub fn gate_fusion<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    prefix: &str,
    f_cnn: Var<'t>,
    f_lstm: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if f_cnn.shape() != f_lstm.shape() {
        return Err(Error::Shape(format!(
            "gate inputs {:?} and {:?} differ",
            f_cnn.shape(),
            f_lstm.shape()
        )));
    }
    let z = concat(&[f_cnn, f_lstm], 1);
    let hidden = nn::linear(tape, store, &format!("{prefix}.l1"), z)?.tanh();
    let probs = nn::linear(tape, store, &format!("{prefix}.l2"), hidden)?.softmax();
    let alpha = probs.slice(1, 0, 1);
    let fused = f_cnn * alpha + f_lstm * (tape.constant(NDArray::scalar(1.0)) - alpha);
    Ok((fused, alpha))
}

/// Encoder output for a batch.
pub struct MkclOutput<'t> {
    pub features: Var<'t>,
    pub f_cnn: Var<'t>,
    pub f_lstm: Var<'t>,
    /// Gate weight on the CNN branch, `[B, 1]`.
    pub alpha: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct Mkcl {
    pub config: MkclConfig,
    pub prefix: String,
    pub branch_channels: Vec<usize>,
    branch_norms: Vec<BatchNorm>,
    lstm: Vec<LstmLayerNames>,
}

impl Mkcl {
    pub fn register(store: &mut ParamStore, prefix: &str, config: MkclConfig) -> Result<Self> {
        config.validate()?;
        let branch_channels = config.branch_channels()?;
        let mut branch_norms = Vec::with_capacity(config.kernels.len());
        for (&k, &c) in config.kernels.iter().zip(&branch_channels) {
            let bp = format!("{prefix}.branch{k}");
            store.register(
                &format!("{bp}.conv.weight"),
                &[c, k, SEQ_FEATURES],
                InitSpec::KaimingFanIn {
                    fan_in: k * SEQ_FEATURES,
                    gain: 1.0,
                },
            )?;
            store.register(&format!("{bp}.conv.bias"), &[c], InitSpec::Constant(0.0))?;
            branch_norms.push(BatchNorm::register(store, &format!("{bp}.bn"), c)?);
        }
        let total: usize = branch_channels.iter().sum();
        let bound = 1.0 / (total as f64).sqrt();
        store.register(
            &format!("{prefix}.compress.weight"),
            &[config.hidden, 1, total],
            InitSpec::Uniform { lo: -bound, hi: bound },
        )?;
        store.register(&format!("{prefix}.compress.bias"), &[config.hidden], InitSpec::Constant(0.0))?;
        let lstm = register_lstm(store, &format!("{prefix}.lstm"), SEQ_FEATURES, config.hidden, config.lstm_layers)?;
        nn::register_linear(store, &format!("{prefix}.gate.l1"), 2 * config.hidden, config.gate_hidden, true)?;
        nn::register_linear(store, &format!("{prefix}.gate.l2"), config.gate_hidden, 2, true)?;
        nn::register_linear(store, &format!("{prefix}.proj"), config.hidden, config.d_seq, false)?;
        store.register(&format!("{prefix}.ln.gamma"), &[config.d_seq], InitSpec::Constant(1.0))?;
        store.register(&format!("{prefix}.ln.beta"), &[config.d_seq], InitSpec::Constant(0.0))?;
        Ok(Self {
            config,
            prefix: prefix.to_string(),
            branch_channels,
            branch_norms,
            lstm,
        })
    }

    /// `x[B, L, 4]`, `mask[b·L + l]` → pooled CNN features `[B, hidden]`.
    pub fn multiscale_cnn<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &ForwardCtx,
        x: Var<'t>,
        mask: &Rc<Vec<bool>>,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != SEQ_FEATURES || mask.len() != shape[0] * shape[1] {
            return Err(Error::Shape(format!(
                "sequence input {shape:?} with mask of {}",
                mask.len()
            )));
        }
        let (b, l) = (shape[0], shape[1]);
        if l < self.config.max_kernel() {
            return Err(Error::Shape(format!(
                "sequence length {l} is shorter than kernel {}",
                self.config.max_kernel()
            )));
        }
        let mut branches = Vec::with_capacity(self.config.kernels.len());
        for ((&k, &c), bn) in self.config.kernels.iter().zip(&self.branch_channels).zip(&self.branch_norms) {
            let bp = format!("{}.branch{k}", self.prefix);
            let w = tape.param(store, &format!("{bp}.conv.weight"));
            let bias = tape.param(store, &format!("{bp}.conv.bias"));
            let y = conv1d_same(x, w, bias)?.relu().reshape(&[b * l, c]);
            let y = bn.forward(tape, store, ctx, y, Some(mask.clone()));
            branches.push(y.reshape(&[b, l, c]));
        }
        let cat = concat(&branches, 2);
        let w = tape.param(store, &format!("{}.compress.weight", self.prefix));
        let bias = tape.param(store, &format!("{}.compress.bias", self.prefix));
        let compressed = conv1d_same(cat, w, bias)?;
        Ok(masked_max_pool(compressed, mask))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &ForwardCtx,
        x: Var<'t>,
        mask: &Rc<Vec<bool>>,
    ) -> Result<MkclOutput<'t>> {
        let f_cnn = self.multiscale_cnn(tape, store, ctx, x, mask)?;
        let (_, f_lstm) = lstm_forward(tape, store, &self.lstm, x, Some(mask))?;
        let (fused, alpha) = gate_fusion(tape, store, &format!("{}.gate", self.prefix), f_cnn, f_lstm)?;
        let projected = nn::linear(tape, store, &format!("{}.proj", self.prefix), fused)?.relu();
        let features = layer_norm(
            projected,
            tape.param(store, &format!("{}.ln.gamma", self.prefix)),
            tape.param(store, &format!("{}.ln.beta", self.prefix)),
            LAYER_NORM_EPS,
        );
        Ok(MkclOutput {
            features,
            f_cnn,
            f_lstm,
            alpha,
        })
    }
}

/// One-hot batch `[B, max_len, 4]` and flattened mask for a set of sequences.
pub fn encode_batch(sequences: &[&str], max_len: usize) -> Result<(NDArray, Rc<Vec<bool>>)> {
    let mut data = Vec::with_capacity(sequences.len() * max_len * SEQ_FEATURES);
    let mut mask = Vec::with_capacity(sequences.len() * max_len);
    for s in sequences {
        let (x, m) = crate::data::encode_sequence(s, max_len)?;
        data.extend_from_slice(x.data());
        mask.extend(m);
    }
    Ok((
        NDArray::new(vec![sequences.len(), max_len, SEQ_FEATURES], data)?,
        Rc::new(mask),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, params::split_rng};
    use crate::testutil::{random_seeded, weighted_sum};
    use proptest::prelude::*;

    fn small() -> MkclConfig {
        MkclConfig {
            kernels: vec![3, 5],
            channels: 6,
            branch_channels: None,
            hidden: 4,
            lstm_layers: 2,
            gate_hidden: 3,
            d_seq: 5,
        }
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_channels(&[3, 5, 7, 9], 77).unwrap().counts, vec![30, 20, 15, 12]);
        assert_eq!(allocate_channels(&[3], 10).unwrap().counts, vec![10]);
        assert_eq!(allocate_channels(&[3, 5, 7, 9], 4).unwrap().counts, vec![1, 1, 1, 1]);
        assert!(allocate_channels(&[3, 5, 7, 9], 3).is_err());
        let z = allocate_channels(&[3, 5, 7, 9], 77).unwrap().normalizer;
        assert!((z - 77.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn allocation_is_exact_for_every_total() {
        for c_out in 4..=512 {
            let a = allocate_channels(&[3, 5, 7, 9], c_out).unwrap();
            assert_eq!(a.counts.iter().sum::<usize>(), c_out, "C_out={c_out}");
            assert!(a.counts.iter().all(|&c| c >= 1));
            for (c, k) in a.counts.iter().zip([3.0, 5.0, 7.0, 9.0]) {
                let ideal = c_out as f64 / (k + 1.0) / a.normalizer;
                assert!((*c as f64 - ideal).abs() < 1.0, "C_out={c_out}");
            }
        }
    }

    #[test]
    fn branch_widths_follow_allocation() {
        let mut store = ParamStore::new(0);
        let net = Mkcl::register(&mut store, "seq", MkclConfig::default()).unwrap();
        let expected = allocate_channels(&[3, 5, 7, 9], 128).unwrap().counts;
        assert_eq!(net.branch_channels, expected);
        for (k, c) in [3, 5, 7, 9].iter().zip(&expected) {
            assert_eq!(store.value(&format!("seq.branch{k}.conv.weight")).shape(), &[*c, *k, 4]);
        }
        let cfg = MkclConfig {
            branch_channels: Some(vec![2, 3, 4, 5]),
            ..MkclConfig::default()
        };
        let net = Mkcl::register(&mut ParamStore::new(0), "seq", cfg).unwrap();
        assert_eq!(net.branch_channels, vec![2, 3, 4, 5]);
    }

    #[test]
    fn config_rejects_even_or_repeated_kernels() {
        let even = MkclConfig { kernels: vec![3, 4], ..small() };
        assert!(even.validate().is_err());
        let dup = MkclConfig { kernels: vec![3, 3], ..small() };
        assert!(dup.validate().is_err());
    }

    fn cnn(net: &Mkcl, store: &ParamStore, seqs: &[&str], len: usize) -> Result<NDArray> {
        let (x, mask) = encode_batch(seqs, len)?;
        let tape = Tape::new();
        let y = net.multiscale_cnn(&tape, store, &ForwardCtx::eval(), tape.constant(x), &mask)?;
        Ok((*y.value()).clone())
    }

    #[test]
    fn zero_weights_give_constant_cnn_features() {
        let mut store = ParamStore::new(1);
        let net = Mkcl::register(&mut store, "seq", small()).unwrap();
        for (name, v) in store.iter().map(|(_, p)| (p.name.clone(), p.value.len())).collect::<Vec<_>>() {
            if name.ends_with("conv.weight") || name.ends_with("compress.weight") {
                *store.value_mut(&name) = NDArray::zeros(store.value(&name).shape());
            }
            if name.ends_with("bias") && name.contains("branch") {
                *store.value_mut(&name) = NDArray::full(&[v], 0.3);
            }
        }
        let a = cnn(&net, &store, &["ACGUACGU"], 8).unwrap();
        let b = cnn(&net, &store, &["GGGGUUUU"], 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hand_set_filter_detects_motif() {
        let cfg = MkclConfig {
            kernels: vec![3],
            channels: 1,
            hidden: 1,
            ..small()
        };
        let mut store = ParamStore::new(2);
        let net = Mkcl::register(&mut store, "seq", cfg).unwrap();
        // Responds to A at each of the three taps; threshold so only AAA survives ReLU.
        let mut w = NDArray::zeros(&[1, 3, 4]);
        for t in 0..3 {
            w.set(&[0, t, 0], 1.0);
        }
        *store.value_mut("seq.branch3.conv.weight") = w;
        *store.value_mut("seq.branch3.conv.bias") = NDArray::vector(vec![-2.5]);
        *store.value_mut("seq.compress.weight") = NDArray::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let with = cnn(&net, &store, &["CGAAAGCU"], 8).unwrap();
        let without = cnn(&net, &store, &["CGAAGACU"], 8).unwrap();
        assert!(with.item() > without.item(), "{} vs {}", with.item(), without.item());
    }

    #[test]
    fn short_sequence_is_an_error() {
        let mut store = ParamStore::new(3);
        let net = Mkcl::register(&mut store, "seq", small()).unwrap();
        assert!(matches!(cnn(&net, &store, &["ACG"], 4), Err(Error::Shape(_))));
    }

    fn gate_store(hidden: usize) -> ParamStore {
        let mut store = ParamStore::new(4);
        nn::register_linear(&mut store, "g.l1", 2 * hidden, 3, true).unwrap();
        nn::register_linear(&mut store, "g.l2", 3, 2, true).unwrap();
        store
    }

    #[test]
    fn gate_limits_and_convexity() {
        let mut store = gate_store(3);
        let tape = Tape::new();
        let a = tape.constant(random_seeded(&[2, 3], 5));
        let b = tape.constant(random_seeded(&[2, 3], 6));
        *store.value_mut("g.l2.bias") = NDArray::vector(vec![15.0, -15.0]);
        let (fused, alpha) = gate_fusion(&tape, &store, "g", a, b).unwrap();
        assert!(fused.value().max_abs_diff(&a.value()) < 1e-10);
        assert!(alpha.value().data().iter().all(|&v| v < 1.0));

        let (same, _) = gate_fusion(&tape, &store, "g", a, a).unwrap();
        assert!(same.value().max_abs_diff(&a.value()) < 1e-15);

        *store.value_mut("g.l2.weight") = NDArray::zeros(&[3, 2]);
        *store.value_mut("g.l2.bias") = NDArray::zeros(&[2]);
        let (mean, alpha) = gate_fusion(&tape, &store, "g", a, b).unwrap();
        assert!(alpha.value().data().iter().all(|&v| v == 0.5));
        let expected = a.value().zip_map(&b.value(), |x, y| (x + y) / 2.0);
        assert!(mean.value().max_abs_diff(&expected) < 1e-15);
    }

    fn encode(net: &Mkcl, store: &ParamStore, seqs: &[&str], len: usize) -> NDArray {
        let (x, mask) = encode_batch(seqs, len).unwrap();
        let tape = Tape::new();
        let out = net.forward(&tape, store, &ForwardCtx::eval(), tape.constant(x), &mask).unwrap();
        (*out.features.value()).clone()
    }

    fn trained_like_store(seed: u64) -> (ParamStore, Mkcl) {
        let mut store = ParamStore::new(seed);
        let net = Mkcl::register(&mut store, "seq", small()).unwrap();
        // Larger recurrent weights than the default init keep the LSTM state, and so its
        // gradients, well above finite-difference roundoff.
        for l in 0..2 {
            for (part, off) in [("w_ih", 30), ("w_hh", 40), ("bias", 50)] {
                let name = format!("seq.lstm.layer{l}.{part}");
                let v = store.value_mut(&name);
                *v = random_seeded(v.shape(), seed + off + l as u64).map(|x| 2.0 * x);
            }
        }
        // Non-trivial running statistics so eval-mode BN is not the identity.
        for k in [3, 5] {
            let c = store.value(&format!("seq.branch{k}.bn.running_mean")).len();
            *store.value_mut(&format!("seq.branch{k}.bn.running_mean")) = random_seeded(&[c], seed + k as u64);
            *store.value_mut(&format!("seq.branch{k}.bn.running_var")) =
                random_seeded(&[c], seed + 10 + k as u64).map(|v| 1.0 + 0.5 * v);
        }
        (store, net)
    }

    #[test]
    fn identical_sequences_give_identical_rows() {
        let (store, net) = trained_like_store(7);
        let y = encode(&net, &store, &["ACGUAGGCUA", "ACGUAGGCUA"], 12);
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn padding_length_does_not_change_features() {
        let (store, net) = trained_like_store(8);
        let a = encode(&net, &store, &["GAUUACAGGC", "ACGUAGG"], 12);
        let b = encode(&net, &store, &["GAUUACAGGC", "ACGUAGG"], 20);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn alpha_is_strictly_inside_unit_interval() {
        let (store, net) = trained_like_store(9);
        let (x, mask) = encode_batch(&["GAUUACAGGC", "ACGUAGG"], 12).unwrap();
        let tape = Tape::new();
        let out = net.forward(&tape, &store, &ForwardCtx::eval(), tape.constant(x), &mask).unwrap();
        assert!(out.alpha.value().data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn end_to_end_grad_check() {
        let (mut store, net) = trained_like_store(10);
        for name in ["seq.ln.gamma", "seq.ln.beta", "seq.gate.l1.bias", "seq.compress.bias"] {
            let v = store.value_mut(name);
            *v = random_seeded(v.shape(), 99).map(|x| 1.0 + x);
        }
        let (x, mask) = encode_batch(&["GAUUACAGGCUA", "ACGUAGGUC"], 12).unwrap();
        let r = grad_check(&store, 1e-5, |t, s| {
            let out = net.forward(t, s, &ForwardCtx::eval(), t.constant(x.clone()), &mask)?;
            Ok(weighted_sum(out.features, 3))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn training_mode_grad_check_with_masked_batch_norm() {
        let (mut store, net) = trained_like_store(11);
        // A bias feeding straight into training-mode batch norm is cancelled by the
        // mean subtraction: its true gradient is zero and a numeric estimate is pure
        // roundoff, so those coordinates are frozen for this check.
        for k in [3, 5] {
            let id = store.id(&format!("seq.branch{k}.conv.bias")).unwrap();
            store.get_mut(id).trainable = false;
        }
        let (x, mask) = encode_batch(&["GAUUACAGGCUA", "ACGUAGGUC"], 12).unwrap();
        let r = grad_check(&store, 1e-5, |t, s| {
            let ctx = ForwardCtx::train(split_rng(0, "dropout"));
            let out = net.forward(t, s, &ctx, t.constant(x.clone()), &mask)?;
            Ok(weighted_sum(out.features, 4))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn gradient_reaches_both_branches() {
        let (store, net) = trained_like_store(12);
        let (x, mask) = encode_batch(&["GAUUACAGGCUA", "ACGUAGGUC"], 12).unwrap();
        let tape = Tape::new();
        let out = net.forward(&tape, &store, &ForwardCtx::eval(), tape.constant(x), &mask).unwrap();
        let loss = weighted_sum(out.features, 5);
        let grads = tape.backward(loss);
        let g = grads.for_params(&store);
        let norm = |name: &str| {
            let id = store.id(name).unwrap();
            g[id.index()].as_ref().map_or(0.0, |a| a.max_abs())
        };
        assert!(norm("seq.branch3.conv.weight") > 1e-8);
        assert!(norm("seq.lstm.layer0.w_ih") > 1e-8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        // Scales keep the two logits within f64 resolution of each other; beyond that a
        // probability of 1 - 1e-17 rounds to exactly 1.
        fn gate_alpha_in_open_interval(seed in 0u64..1000, scale in 0.1f64..4.0) {
            let mut store = gate_store(3);
            for name in ["g.l1.weight", "g.l1.bias", "g.l2.weight", "g.l2.bias"] {
                let v = store.value_mut(name);
                *v = random_seeded(v.shape(), seed).map(|x| x * scale);
            }
            let tape = Tape::new();
            let a = tape.constant(random_seeded(&[4, 3], seed + 1));
            let b = tape.constant(random_seeded(&[4, 3], seed + 2));
            let (_, alpha) = gate_fusion(&tape, &store, "g", a, b).unwrap();
            prop_assert!(alpha.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}
