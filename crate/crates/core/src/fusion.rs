//! Fusion stage: per-modality tokens refined by a bidirectional state-space scan,
//! mixed across modalities by a per-token similarity graph with virtual nodes, then
//! read out from the `[CLS]` token and the token mean.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{self, NUMERIC_GUARD};
use crate::numerics::{concat, stack, InitSpec, NDArray, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Seq,
    Str,
    Exp,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Seq, Modality::Str, Modality::Exp];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Seq => "seq",
            Modality::Str => "str",
            Modality::Exp => "exp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "seq" => Ok(Modality::Seq),
            "str" => Ok(Modality::Str),
            "exp" => Ok(Modality::Exp),
            other => Err(Error::Usage(format!("unknown modality {other:?} (expected seq, str or exp)"))),
        }
    }

    /// Parses a comma-separated list into canonical order without duplicates.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = s.split(',').map(Self::parse).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Tokens per modality including `[CLS]`.
    pub tokens: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub virtual_nodes: usize,
    pub residual_layers: usize,
    pub d_fuse: usize,
    /// Share one parameter set between the forward and backward scans.
    pub tie_directions: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tokens: 8,
            d_model: 64,
            d_state: 16,
            virtual_nodes: 4,
            residual_layers: 2,
            d_fuse: 64,
            tie_directions: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens < 2 {
            return Err(Error::config("fusion", "tokens", "need [CLS] plus at least one content token"));
        }
        for (key, v) in [("d_model", self.d_model), ("d_state", self.d_state), ("d_fuse", self.d_fuse)] {
            if v == 0 {
                return Err(Error::config("fusion", key, "must be positive"));
            }
        }
        Ok(())
    }
}

/// `λ = exp(−softplus(a))`, always in `(0, 1)`.
pub fn decay<'t>(a: Var<'t>) -> Var<'t> {
    a.softplus().scale(-1.0).exp()
}

/// `h_t = λ ⊙ h_{t−1} + u_t` from `h_0 = 0` over `u[B, T, S]` with `λ[S]`.
pub fn linear_scan<'t>(u: Var<'t>, lambda: Var<'t>) -> Var<'t> {
    let uv = u.value();
    let lv = lambda.value();
    let (b, t, s) = (uv.shape()[0], uv.shape()[1], uv.shape()[2]);
    assert_eq!(lv.shape(), [s], "decay width");
    let mut h = vec![0.0; uv.len()];
    for bi in 0..b {
        for ti in 0..t {
            let row = (bi * t + ti) * s;
            for k in 0..s {
                let prev = if ti == 0 { 0.0 } else { h[row - s + k] };
                h[row + k] = lv.data()[k] * prev + uv.data()[row + k];
            }
        }
    }
    u.tape().record(
        NDArray::from_parts(vec![b, t, s], h),
        &[u, lambda],
        Box::new(move |c| {
            let (lam, h, g) = (c.inputs[1].data(), c.output.data(), c.grad.data());
            let mut gu = vec![0.0; g.len()];
            let mut gl = vec![0.0; s];
            for bi in 0..b {
                let mut carry = vec![0.0; s];
                for ti in (0..t).rev() {
                    let row = (bi * t + ti) * s;
                    for k in 0..s {
                        let total = g[row + k] + carry[k];
                        gu[row + k] = total;
                        if ti > 0 {
                            gl[k] += total * h[row - s + k];
                        }
                        carry[k] = lam[k] * total;
                    }
                }
            }
            vec![
                Some(NDArray::from_parts(vec![b, t, s], gu)),
                Some(NDArray::from_parts(vec![s], gl)),
            ]
        }),
    )
}

/// Names of one scan direction's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmNames {
    pub a: String,
    pub b_in: String,
    pub c_out: String,
    pub w_g: String,
    pub d_skip: String,
}

impl SsmNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            a: format!("{prefix}.a"),
            b_in: format!("{prefix}.B_in"),
            c_out: format!("{prefix}.C_out"),
            w_g: format!("{prefix}.W_g"),
            d_skip: format!("{prefix}.D_skip"),
        }
    }
}

pub fn register_ssm(store: &mut ParamStore, prefix: &str, d_model: usize, d_state: usize) -> Result<SsmNames> {
    let n = SsmNames::new(prefix);
    let bm = 1.0 / (d_model as f64).sqrt();
    let bs = 1.0 / (d_state as f64).sqrt();
    store.register(&n.a, &[d_state], InitSpec::Uniform { lo: -3.0, hi: 0.0 })?;
    store.register(&n.b_in, &[d_state, d_model], InitSpec::Uniform { lo: -bm, hi: bm })?;
    store.register(&n.c_out, &[d_model, d_state], InitSpec::Uniform { lo: -bs, hi: bs })?;
    store.register(&n.w_g, &[d_model, d_model], InitSpec::Uniform { lo: -bm, hi: bm })?;
    store.register(&n.d_skip, &[d_model], InitSpec::Constant(1.0))?;
    Ok(n)
}

/// One scan direction over `z[B, T, d]`:
/// `y_t = g_t ⊙ (C_out h_t) + (1 − g_t) ⊙ (D_skip ⊙ z_t)`, `g_t = σ(W_g z_t)`.
pub fn ssm_scan<'t>(tape: &'t Tape, store: &ParamStore, names: &SsmNames, z: Var<'t>) -> Result<Var<'t>> {
    if z.shape().len() != 3 {
        return Err(Error::Shape(format!("scan input must be [B, T, d], got {:?}", z.shape())));
    }
    let lambda = decay(tape.param(store, &names.a));
    let u = z.matmul_t(tape.param(store, &names.b_in))?;
    let h = linear_scan(u, lambda);
    let out = h.matmul_t(tape.param(store, &names.c_out))?;
    let gate = z.matmul_t(tape.param(store, &names.w_g))?.sigmoid();
    let skip = z * tape.param(store, &names.d_skip);
    Ok(gate * out + (tape.constant(NDArray::scalar(1.0)) - gate) * skip)
}

/// `SSM→(Z) + flip(SSM←(flip Z))` along the token axis of `z[B, T, d]`.
pub fn bidirectional_ssm<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    forward: &SsmNames,
    backward: &SsmNames,
    z: Var<'t>,
) -> Result<Var<'t>> {
    let fwd = ssm_scan(tape, store, forward, z)?;
    let bwd = ssm_scan(tape, store, backward, z.flip(1))?.flip(1);
    Ok(fwd + bwd)
}

/// Per-graph normalized similarity `L[G, N, N]` of node features `v[G, N, d]`:
/// `s = (1 + cos)/2`, `L_ij = s_ij / √(r_i r_j)`, `r_i = Σ_k s_ik`.
pub fn build_laplacian<'t>(v: Var<'t>) -> Result<Var<'t>> {
    if v.shape().len() != 3 {
        return Err(Error::Shape(format!("node features must be [G, N, d], got {:?}", v.shape())));
    }
    let unit = v.l2_normalize(NUMERIC_GUARD);
    let cos = unit.bmm(unit, true)?;
    let s = cos.add_scalar(1.0).scale(0.5);
    let (g, n) = (v.shape()[0], v.shape()[1]);
    let r = s.sum_axis(2);
    // One division by √(r_i r_j) keeps L exactly symmetric and within [0, 1] in floating point.
    Ok(s.div((r.reshape(&[g, n, 1]) * r.reshape(&[g, 1, n])).sqrt()))
}

/// Per-modality outputs of the fusion stage.
pub struct FusionOutput<'t> {
    /// Concatenated readouts, `[B, M·d_fuse]`, modalities in canonical order.
    pub fused: Var<'t>,
    /// Per present modality, `[B, d_fuse]`.
    pub per_modality: Vec<(Modality, Var<'t>)>,
    /// Softmax weights over the `R + 1` propagation depths.
    pub depth_weights: Rc<NDArray>,
    /// `[B, T, N, N]` per-token Laplacians; the first `M` nodes are the modalities.
    pub laplacian: Rc<NDArray>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub config: FusionConfig,
    pub modalities: Vec<Modality>,
    pub prefix: String,
    pub input_dims: Vec<usize>,
    ssm: Vec<(SsmNames, SsmNames)>,
}

impl Fusion {
    /// Registers tokenizers, scans and readouts for `modalities` (canonical order, ≥ 2)
    /// with encoder widths `input_dims`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        config: FusionConfig,
        modalities: &[(Modality, usize)],
    ) -> Result<Self> {
        config.validate()?;
        let mut sorted = modalities.to_vec();
        sorted.sort_by_key(|m| m.0);
        sorted.dedup_by_key(|m| m.0);
        if sorted.len() < 2 {
            return Err(Error::Usage(format!(
                "fusion needs at least two modalities, got {}",
                sorted.len()
            )));
        }
        let d = config.d_model;
        let content = config.tokens - 1;
        let mut ssm = Vec::new();
        for &(m, d_in) in &sorted {
            let mp = format!("{prefix}.{m}");
            nn::register_linear(store, &format!("{mp}.tok"), d_in, content * d, true)?;
            store.register(&format!("{mp}.pos"), &[content, d], InitSpec::Normal { mean: 0.0, std: 0.02 })?;
            store.register(&format!("{mp}.cls"), &[1, 1, d], InitSpec::Normal { mean: 0.0, std: 0.02 })?;
            let fwd = register_ssm(store, &format!("{mp}.ssm_fwd"), d, config.d_state)?;
            let bwd = if config.tie_directions {
                fwd.clone()
            } else {
                register_ssm(store, &format!("{mp}.ssm_bwd"), d, config.d_state)?
            };
            ssm.push((fwd, bwd));
            nn::register_linear(store, &format!("{mp}.readout"), 2 * d, config.d_fuse, true)?;
        }
        if config.virtual_nodes > 0 {
            store.register(
                &format!("{prefix}.virtual"),
                &[config.virtual_nodes, d],
                InitSpec::Normal {
                    mean: 0.0,
                    std: 1.0 / (d as f64).sqrt(),
                },
            )?;
        }
        let bd = 1.0 / (d as f64).sqrt();
        for r in 0..config.residual_layers {
            store.register(&format!("{prefix}.W_r{r}"), &[d, d], InitSpec::Uniform { lo: -bd, hi: bd })?;
        }
        store.register(
            &format!("{prefix}.depth_logits"),
            &[config.residual_layers + 1],
            InitSpec::Constant(0.0),
        )?;
        Ok(Self {
            config,
            modalities: sorted.iter().map(|m| m.0).collect(),
            input_dims: sorted.iter().map(|m| m.1).collect(),
            prefix: prefix.to_string(),
            ssm,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.modalities.len() * self.config.d_fuse
    }

    /// `F_m[B, d_m] -> [B, T, d_model]` with `[CLS]` at token 0.
    pub fn tokenize<'t>(&self, tape: &'t Tape, store: &ParamStore, m: Modality, f: Var<'t>) -> Result<Var<'t>> {
        let mp = format!("{}.{m}", self.prefix);
        let b = f.shape()[0];
        let (t, d) = (self.config.tokens, self.config.d_model);
        let content = nn::linear(tape, store, &format!("{mp}.tok"), f)?.reshape(&[b, t - 1, d])
            + tape.param(store, &format!("{mp}.pos"));
        let cls = tape.param(store, &format!("{mp}.cls")).broadcast_to(&[b, 1, d]);
        Ok(concat(&[cls, content], 1))
    }

    /// Propagates `tokens[m]` (each `[B, T, d]`, canonical modality order) through the
    /// per-token graph. Returns the updated tokens, the Laplacians and depth weights.
    pub fn hypergraph_fuse<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        tokens: &[Var<'t>],
    ) -> Result<(Vec<Var<'t>>, Var<'t>, Var<'t>)> {
        let m = tokens.len();
        if m < 2 {
            return Err(Error::Usage(format!("fusion needs at least two modalities, got {m}")));
        }
        let shape = tokens[0].shape();
        if let Some(bad) = tokens.iter().find(|z| z.shape() != shape) {
            return Err(Error::Shape(format!("modality tokens {:?} and {:?} differ", shape, bad.shape())));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let k = self.config.virtual_nodes;
        let n = m + k;
        let mut nodes = stack(tokens, 2);
        if k > 0 {
            let virt = tape
                .param(store, &format!("{}.virtual", self.prefix))
                .broadcast_to(&[b, t, k, d]);
            nodes = concat(&[nodes, virt], 2);
        }
        let h0 = nodes.reshape(&[b * t, n, d]);
        let lap = build_laplacian(h0)?;
        let mut layers = vec![h0];
        let mut h = h0;
        for r in 0..self.config.residual_layers {
            let w = tape.param(store, &format!("{}.W_r{r}", self.prefix));
            h = h + lap.bmm(h, false)?.matmul(w)?.relu();
            layers.push(h);
        }
        let beta = tape.param(store, &format!("{}.depth_logits", self.prefix)).softmax();
        let depth = layers.len();
        let mixed = (stack(&layers, 0) * beta.reshape(&[depth, 1, 1, 1])).sum_axis(0);
        let mixed = mixed.reshape(&[b, t, n, d]);
        let out = (0..m).map(|i| mixed.select(2, i)).collect();
        Ok((out, lap.reshape(&[b, t, n, n]), beta))
    }

    /// `Linear([Z[CLS] ‖ mean_t Z])` for one modality's tokens `[B, T, d]`.
    pub fn readout<'t>(&self, tape: &'t Tape, store: &ParamStore, m: Modality, z: Var<'t>) -> Result<Var<'t>> {
        let pooled = concat(&[z.select(1, 0), z.mean_axis(1)], 1);
        nn::linear(tape, store, &format!("{}.{m}.readout", self.prefix), pooled)
    }

    /// Fuses encoder features given in the same order as `self.modalities`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, features: &[Var<'t>]) -> Result<FusionOutput<'t>> {
        if features.len() != self.modalities.len() {
            return Err(Error::Shape(format!(
                "{} feature sets for {} modalities",
                features.len(),
                self.modalities.len()
            )));
        }
        let mut intra = Vec::with_capacity(features.len());
        for ((&m, f), (fwd, bwd)) in self.modalities.iter().zip(features).zip(&self.ssm) {
            let z = self.tokenize(tape, store, m, *f)?;
            intra.push(bidirectional_ssm(tape, store, fwd, bwd, z)?);
        }
        let (hyper, lap, beta) = self.hypergraph_fuse(tape, store, &intra)?;
        let per_modality = self
            .modalities
            .iter()
            .zip(hyper)
            .map(|(&m, z)| Ok((m, self.readout(tape, store, m, z)?)))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<Var> = per_modality.iter().map(|p| p.1).collect();
        Ok(FusionOutput {
            fused: concat(&parts, 1),
            per_modality,
            depth_weights: beta.value(),
            laplacian: lap.value(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, grad_check_inputs};
    use crate::testutil::{random_seeded, weighted_sum};
    use proptest::prelude::*;

    fn small(k: usize, r: usize) -> FusionConfig {
        FusionConfig {
            tokens: 3,
            d_model: 8,
            d_state: 4,
            virtual_nodes: k,
            residual_layers: r,
            d_fuse: 5,
            tie_directions: false,
        }
    }

    fn ssm_store(seed: u64) -> (ParamStore, SsmNames, SsmNames) {
        let mut store = ParamStore::new(seed);
        let f = register_ssm(&mut store, "f", 6, 4).unwrap();
        let b = register_ssm(&mut store, "b", 6, 4).unwrap();
        store.value_mut("f.D_skip").data_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.3, 1.5, -0.7]);
        (store, f, b)
    }

    fn run_scan(store: &ParamStore, names: &SsmNames, z: &NDArray) -> NDArray {
        let tape = Tape::new();
        (*ssm_scan(&tape, store, names, tape.constant(z.clone())).unwrap().value()).clone()
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Direct evaluation of one output step from a given hidden state.
    fn step_reference(store: &ParamStore, names: &SsmNames, z: &[f64], h: &[f64]) -> Vec<f64> {
        let (c, wg, dk) = (store.value(&names.c_out), store.value(&names.w_g), store.value(&names.d_skip));
        (0..z.len())
            .map(|i| {
                let ch: f64 = (0..h.len()).map(|k| c.at(&[i, k]) * h[k]).sum();
                let g = sigmoid((0..z.len()).map(|j| wg.at(&[i, j]) * z[j]).sum());
                g * ch + (1.0 - g) * dk.data()[i] * z[i]
            })
            .collect()
    }

    fn b_times(store: &ParamStore, names: &SsmNames, z: &[f64]) -> Vec<f64> {
        let b = store.value(&names.b_in);
        (0..b.shape()[0]).map(|k| (0..z.len()).map(|j| b.at(&[k, j]) * z[j]).sum()).collect()
    }

    #[test]
    fn zero_input_scans_to_zero() {
        let (store, f, b) = ssm_store(1);
        let z = NDArray::zeros(&[2, 5, 6]);
        assert!(run_scan(&store, &f, &z).data().iter().all(|&v| v == 0.0));
        let tape = Tape::new();
        let h = bidirectional_ssm(&tape, &store, &f, &b, tape.constant(z)).unwrap();
        assert!(h.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_matches_direct_formula() {
        let (store, f, _) = ssm_store(2);
        let z = random_seeded(&[1, 1, 6], 3);
        let y = run_scan(&store, &f, &z);
        let expected = step_reference(&store, &f, z.data(), &b_times(&store, &f, z.data()));
        for (a, e) in y.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let (mut store, f, _) = ssm_store(4);
        // softplus(a) → ∞ drives λ to exactly zero.
        *store.value_mut(&f.a) = NDArray::full(&[4], 800.0);
        let tape = Tape::new();
        assert!(decay(tape.param(&store, &f.a)).value().data().iter().all(|&l| l == 0.0));
        let z = random_seeded(&[1, 4, 6], 5);
        let y = run_scan(&store, &f, &z);
        for t in 0..4 {
            let zt = &z.data()[t * 6..(t + 1) * 6];
            let expected = step_reference(&store, &f, zt, &b_times(&store, &f, zt));
            for (a, e) in y.data()[t * 6..(t + 1) * 6].iter().zip(&expected) {
                assert!((a - e).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_token_sums_both_directions() {
        let (store, f, b) = ssm_store(6);
        let z = random_seeded(&[1, 1, 6], 7);
        let tape = Tape::new();
        let h = bidirectional_ssm(&tape, &store, &f, &b, tape.constant(z.clone())).unwrap();
        let expected = run_scan(&store, &f, &z).zip_map(&run_scan(&store, &b, &z), |x, y| x + y);
        assert!(h.value().max_abs_diff(&expected) < 1e-15);
    }

    fn bidir(store: &ParamStore, f: &SsmNames, b: &SsmNames, z: &NDArray) -> NDArray {
        let tape = Tape::new();
        (*bidirectional_ssm(&tape, store, f, b, tape.constant(z.clone())).unwrap().value()).clone()
    }

    fn flip_tokens(z: &NDArray) -> NDArray {
        let tape = Tape::new();
        (*tape.constant(z.clone()).flip(1).value()).clone()
    }

    #[test]
    fn tied_directions_are_flip_equivariant() {
        let (store, f, _) = ssm_store(8);
        let z = random_seeded(&[1, 5, 6], 9);
        let lhs = bidir(&store, &f, &f, &flip_tokens(&z));
        let rhs = flip_tokens(&bidir(&store, &f, &f, &z));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn untied_directions_swap_under_flip() {
        let (store, f, b) = ssm_store(10);
        let z = random_seeded(&[1, 5, 6], 11);
        let lhs = bidir(&store, &f, &b, &flip_tokens(&z));
        let rhs = flip_tokens(&bidir(&store, &b, &f, &z));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        // Without swapping, independent directions are not equivariant.
        let naive = flip_tokens(&bidir(&store, &f, &b, &z));
        assert!(lhs.max_abs_diff(&naive) > 1e-6);
    }

    #[test]
    fn long_constant_stream_stays_bounded() {
        let (mut store, f, _) = ssm_store(12);
        // λ close to 1 is the slowest-converging case.
        *store.value_mut(&f.a) = NDArray::full(&[4], -8.0);
        let z = NDArray::full(&[1, 10_000, 6], 1.0);
        let tape = Tape::new();
        let lambda = decay(tape.param(&store, &f.a)).value();
        let u = tape.constant(z.clone()).matmul_t(tape.param(&store, &f.b_in)).unwrap();
        let h = linear_scan(u, tape.constant((*lambda).clone())).value();
        let u0 = b_times(&store, &f, &[1.0; 6]);
        for (k, (&l, &uk)) in lambda.data().iter().zip(&u0).enumerate() {
            assert!(l < 1.0);
            let bound = uk.abs() / (1.0 - l);
            for t in 0..10_000 {
                let v = h.data()[t * 4 + k];
                assert!(v.is_finite() && v.abs() <= bound * (1.0 + 1e-9), "t={t} k={k}");
            }
        }
        assert!(run_scan(&store, &f, &z).all_finite());
    }

    #[test]
    fn scan_passes_grad_check() {
        let (store, f, b) = ssm_store(13);
        let z = random_seeded(&[2, 4, 6], 14);
        let r = grad_check(&store, 1e-5, |t, s| {
            Ok(weighted_sum(bidirectional_ssm(t, s, &f, &b, t.constant(z.clone()))?, 15))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check_inputs(&[z.clone()], 1e-5, |t, v| {
            Ok(weighted_sum(bidirectional_ssm(t, &store, &f, &b, v[0])?, 16))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn laplacian(v: NDArray) -> NDArray {
        let tape = Tape::new();
        let n = v.shape()[0];
        let d = v.shape()[1];
        let l = build_laplacian(tape.constant(v.reshape(&[1, n, d]).unwrap())).unwrap();
        (*l.value()).clone().reshape(&[n, n]).unwrap()
    }

    #[test]
    fn laplacian_examples() {
        let same = NDArray::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        for v in laplacian(same).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = laplacian(NDArray::from_rows(&[vec![0.3, -0.1, 2.0]]).unwrap());
        assert!((single.item() - 1.0).abs() < 1e-15);
        // A zero vector has cosine 0 against everything, itself included.
        let with_zero = laplacian(NDArray::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let s = [[0.5, 0.5], [0.5, 1.0]];
        let r = [1.0, 1.5];
        for i in 0..2 {
            for j in 0..2 {
                let e = s[i][j] / (r[i] as f64).sqrt() / (r[j] as f64).sqrt();
                assert!((with_zero.at(&[i, j]) - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn laplacian_passes_grad_check() {
        let v = random_seeded(&[2, 5, 4], 17);
        let r = grad_check_inputs(&[v], 1e-5, |_, x| Ok(weighted_sum(build_laplacian(x[0])?, 18))).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    fn fusion(k: usize, r: usize, seed: u64) -> (ParamStore, Fusion) {
        let mut store = ParamStore::new(seed);
        let f = Fusion::register(
            &mut store,
            "fusion",
            small(k, r),
            &[(Modality::Seq, 4), (Modality::Str, 6), (Modality::Exp, 3)],
        )
        .unwrap();
        (store, f)
    }

    fn tokens(b: usize, t: usize, d: usize, seed: u64, m: usize) -> Vec<NDArray> {
        (0..m).map(|i| random_seeded(&[b, t, d], seed + i as u64)).collect()
    }

    fn hyper(f: &Fusion, store: &ParamStore, toks: &[NDArray]) -> Vec<NDArray> {
        let tape = Tape::new();
        let vars: Vec<Var> = toks.iter().map(|z| tape.constant(z.clone())).collect();
        let (out, _, _) = f.hypergraph_fuse(&tape, store, &vars).unwrap();
        out.iter().map(|v| (*v.value()).clone()).collect()
    }

    #[test]
    fn no_virtual_nodes_and_no_layers_is_identity() {
        let (store, f) = fusion(0, 0, 1);
        let toks = tokens(2, 3, 8, 2, 3);
        for (a, b) in hyper(&f, &store, &toks).iter().zip(&toks) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_propagation_weights_keep_tokens() {
        let (mut store, f) = fusion(2, 2, 3);
        for r in 0..2 {
            *store.value_mut(&format!("fusion.W_r{r}")) = NDArray::zeros(&[8, 8]);
        }
        *store.value_mut("fusion.depth_logits") = NDArray::vector(vec![0.4, -1.0, 2.0]);
        let toks = tokens(2, 3, 8, 4, 3);
        for (a, b) in hyper(&f, &store, &toks).iter().zip(&toks) {
            assert!(a.max_abs_diff(b) < 1e-15);
        }
    }

    #[test]
    fn hypergraph_passes_grad_check() {
        let (mut store, f) = fusion(2, 2, 5);
        *store.value_mut("fusion.depth_logits") = NDArray::vector(vec![0.3, -0.5, 0.1]);
        let toks = tokens(1, 3, 8, 6, 3);
        let r = grad_check(&store, 1e-5, |t, s| {
            let vars: Vec<Var> = toks.iter().map(|z| t.constant(z.clone())).collect();
            let (out, _, _) = f.hypergraph_fuse(t, s, &vars)?;
            Ok(weighted_sum(stack(&out, 0), 7))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check_inputs(&toks, 1e-5, |t, vars| {
            let (out, _, _) = f.hypergraph_fuse(t, &store, vars)?;
            Ok(weighted_sum(stack(&out, 0), 8))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn fewer_than_two_modalities_is_an_error() {
        let mut store = ParamStore::new(0);
        assert!(Fusion::register(&mut store, "f", small(2, 2), &[(Modality::Seq, 4)]).is_err());
        let (store, f) = fusion(2, 2, 9);
        let tape = Tape::new();
        let one = vec![tape.constant(NDArray::zeros(&[1, 3, 8]))];
        assert!(f.hypergraph_fuse(&tape, &store, &one).is_err());
    }

    #[test]
    fn tokenize_examples() {
        let (mut store, f) = fusion(2, 2, 10);
        *store.value_mut("fusion.seq.tok.weight") = NDArray::zeros(&[4, 16]);
        let tape = Tape::new();
        let z = f.tokenize(&tape, &store, Modality::Seq, tape.constant(NDArray::zeros(&[1, 4]))).unwrap();
        let z = z.value();
        assert_eq!(z.shape(), &[1, 3, 8]);
        assert_eq!(&z.data()[..8], store.value("fusion.seq.cls").data());
        assert_eq!(&z.data()[8..], store.value("fusion.seq.pos").data());

        let (store, f) = fusion(2, 2, 11);
        let a = f.tokenize(&tape, &store, Modality::Str, tape.constant(random_seeded(&[1, 6], 1))).unwrap();
        let b = f.tokenize(&tape, &store, Modality::Str, tape.constant(random_seeded(&[1, 6], 2))).unwrap();
        let (a, b) = (a.value(), b.value());
        assert_eq!(&a.data()[..8], &b.data()[..8]);
        assert!(a.data()[8..].iter().zip(&b.data()[8..]).any(|(x, y)| x != y));
    }

    #[test]
    fn two_tokens_hold_the_full_projection() {
        let cfg = FusionConfig { tokens: 2, ..small(0, 0) };
        let mut store = ParamStore::new(0);
        let f = Fusion::register(&mut store, "f", cfg, &[(Modality::Seq, 4), (Modality::Exp, 3)]).unwrap();
        *store.value_mut("f.seq.pos") = NDArray::zeros(&[1, 8]);
        let x = random_seeded(&[1, 4], 3);
        let tape = Tape::new();
        let z = f.tokenize(&tape, &store, Modality::Seq, tape.constant(x.clone())).unwrap();
        let proj = nn::linear(&tape, &store, "f.seq.tok", tape.constant(x)).unwrap();
        assert_eq!(&z.value().data()[8..], proj.value().data());
    }

    #[test]
    fn readout_examples() {
        let (mut store, f) = fusion(0, 0, 12);
        let mut eye = NDArray::zeros(&[16, 5]);
        for i in 0..5 {
            eye.set(&[i, i], 1.0);
        }
        *store.value_mut("fusion.seq.readout.weight") = eye;
        let tape = Tape::new();
        let z = NDArray::new(vec![1, 2, 8], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = f.readout(&tape, &store, Modality::Seq, tape.constant(z)).unwrap();
        // First five coordinates of [c ‖ (c+m)/2] = the CLS token itself.
        assert_eq!(y.value().data(), &[0.0, 1.0, 2.0, 3.0, 4.0]);

        let mut full = NDArray::zeros(&[16, 5]);
        for i in 0..5 {
            full.set(&[8 + i, i], 1.0);
        }
        *store.value_mut("fusion.seq.readout.weight") = full;
        let z = NDArray::new(vec![1, 2, 8], (0..16).map(|v| v as f64).collect()).unwrap();
        let y = f.readout(&tape, &store, Modality::Seq, tape.constant(z)).unwrap();
        assert_eq!(y.value().data(), &[4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn fused_width_follows_modality_count() {
        let (store, f) = fusion(2, 2, 13);
        let tape = Tape::new();
        let feats = [4, 6, 3].map(|d| tape.constant(random_seeded(&[2, d], d as u64)));
        let out = f.forward(&tape, &store, &feats).unwrap();
        assert_eq!(out.fused.shape(), vec![2, 15]);
        assert_eq!(out.laplacian.shape(), &[2, 3, 5, 5]);

        let mut store = ParamStore::new(0);
        let bi = Fusion::register(&mut store, "f", small(2, 2), &[(Modality::Exp, 3), (Modality::Seq, 4)]).unwrap();
        assert_eq!(bi.modalities, vec![Modality::Seq, Modality::Exp]);
        let feats = [4, 3].map(|d| tape.constant(random_seeded(&[2, d], d as u64)));
        assert_eq!(bi.forward(&tape, &store, &feats).unwrap().fused.shape(), vec![2, 10]);
    }

    #[test]
    fn full_fusion_passes_grad_check() {
        let (mut store, f) = fusion(2, 2, 14);
        *store.value_mut("fusion.depth_logits") = NDArray::vector(vec![0.3, -0.5, 0.1]);
        let feats: Vec<NDArray> = [4, 6, 3].iter().map(|&d| random_seeded(&[2, d], 20 + d as u64)).collect();
        let r = grad_check(&store, 1e-5, |t, s| {
            let vars: Vec<Var> = feats.iter().map(|x| t.constant(x.clone())).collect();
            Ok(weighted_sum(f.forward(t, s, &vars)?.fused, 21))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn modality_lists_parse_canonically() {
        assert_eq!(
            Modality::parse_list("exp,seq,exp").unwrap(),
            vec![Modality::Seq, Modality::Exp]
        );
        assert!(Modality::parse_list("seq,rna").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn laplacian_is_symmetric_and_bounded(seed in 0u64..10_000, n in 1usize..8, d in 1usize..6) {
            let l = laplacian(random_seeded(&[n, d], seed));
            for i in 0..n {
                prop_assert!(l.at(&[i, i]) > 0.0);
                for j in 0..n {
                    let v = l.at(&[i, j]);
                    prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v));
                    prop_assert_eq!(v, l.at(&[j, i]));
                }
            }
        }

        #[test]
        fn flip_equivariance_holds_for_random_parameters(seed in 0u64..10_000, t in 1usize..9) {
            let (store, f, b) = ssm_store(seed);
            let z = random_seeded(&[2, t, 6], seed + 1);
            let tied = bidir(&store, &f, &f, &flip_tokens(&z));
            prop_assert!(tied.max_abs_diff(&flip_tokens(&bidir(&store, &f, &f, &z))) < 1e-12);
            let untied = bidir(&store, &f, &b, &flip_tokens(&z));
            prop_assert!(untied.max_abs_diff(&flip_tokens(&bidir(&store, &b, &f, &z))) < 1e-12);
        }

        #[test]
        fn readout_mean_half_ignores_content_order(seed in 0u64..1000) {
            let z = random_seeded(&[1, 3, 8], seed);
            // Swap the two content tokens, keep CLS.
            let mut p = z.clone();
            p.data_mut()[8..16].copy_from_slice(&z.data()[16..24]);
            p.data_mut()[16..24].copy_from_slice(&z.data()[8..16]);
            let tape = Tape::new();
            let pool = |x: &NDArray| {
                let v = tape.constant(x.clone());
                (v.select(1, 0).value(), v.mean_axis(1).value())
            };
            let (ca, ma) = pool(&z);
            let (cb, mb) = pool(&p);
            prop_assert_eq!(&ca, &cb);
            prop_assert!(ma.max_abs_diff(&mb) < 1e-15);
            // Moving a content token into position 0 changes the CLS half.
            let mut q = z.clone();
            q.data_mut()[..8].copy_from_slice(&z.data()[8..16]);
            q.data_mut()[8..16].copy_from_slice(&z.data()[..8]);
            let (cq, mq) = pool(&q);
            prop_assert!(cq.max_abs_diff(&ca) > 0.0);
            prop_assert!(mq.max_abs_diff(&ma) < 1e-15);
        }
    }
}
