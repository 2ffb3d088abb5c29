//! Classification head: `[Linear → BN → ReLU]*` then a linear output layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::{self, BatchNorm, ForwardCtx};
use crate::numerics::{ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: Vec<usize>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: vec![128, 64] }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::config("head", "hidden", "widths must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub prefix: String,
    /// `[d_in, hidden..., classes]`.
    pub widths: Vec<usize>,
    norms: Vec<BatchNorm>,
}

impl Head {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        config: &HeadConfig,
        classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        if classes == 0 {
            return Err(Error::Shape("head needs at least one class".into()));
        }
        let mut widths = vec![d_in];
        widths.extend(&config.hidden);
        widths.push(classes);
        let mut norms = Vec::new();
        for (l, pair) in widths.windows(2).enumerate().take(config.hidden.len()) {
            nn::register_linear(store, &format!("{prefix}.layer{l}"), pair[0], pair[1], true)?;
            norms.push(BatchNorm::register(store, &format!("{prefix}.layer{l}.bn"), pair[1])?);
        }
        let last = widths.len() - 2;
        nn::register_linear(store, &format!("{prefix}.out"), widths[last], classes, true)?;
        Ok(Self {
            prefix: prefix.to_string(),
            widths,
            norms,
        })
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    /// `x[B, d_in] -> logits[B, C]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, ctx: &ForwardCtx, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.widths[0] {
            return Err(Error::Shape(format!(
                "head expects [B, {}] features, got {shape:?}",
                self.widths[0]
            )));
        }
        let mut h = x;
        for (l, bn) in self.norms.iter().enumerate() {
            let z = nn::linear(tape, store, &format!("{}.layer{l}", self.prefix), h)?;
            h = bn.forward(tape, store, ctx, z, None).relu();
        }
        nn::linear(tape, store, &format!("{}.out", self.prefix), h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::nn::cross_entropy;
    use crate::numerics::{grad_check, grad_check_inputs, NDArray};
    use crate::testutil::{random_seeded, weighted_sum};

    fn head(hidden: Vec<usize>, seed: u64) -> (ParamStore, Head) {
        let mut store = ParamStore::new(seed);
        let h = Head::register(&mut store, "head", 6, &HeadConfig { hidden }, 3).unwrap();
        (store, h)
    }

    fn logits(h: &Head, store: &ParamStore, ctx: &ForwardCtx, x: NDArray) -> NDArray {
        let tape = Tape::new();
        (*h.forward(&tape, store, ctx, tape.constant(x)).unwrap().value()).clone()
    }

    #[test]
    fn zero_hidden_weights_give_output_bias() {
        let (mut store, h) = head(vec![5, 4], 1);
        for l in 0..2 {
            let w = store.value_mut(&format!("head.layer{l}.weight"));
            *w = NDArray::zeros(w.shape());
            let b = store.value_mut(&format!("head.layer{l}.bias"));
            *b = random_seeded(b.shape(), l as u64);
        }
        *store.value_mut("head.out.bias") = NDArray::vector(vec![0.1, -0.2, 0.3]);
        // Training-mode BN maps a batch-constant column to beta = 0, ReLU keeps it 0.
        let ctx = ForwardCtx::train(crate::numerics::params::split_rng(0, "t"));
        let y = logits(&h, &store, &ctx, random_seeded(&[4, 6], 2));
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.1, -0.2, 0.3]);
        }
        // Eval-mode BN maps it to a constant, so every row gets the same logits.
        let y = logits(&h, &store, &ForwardCtx::eval(), random_seeded(&[4, 6], 3));
        for r in 1..4 {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn depth_zero_is_linear() {
        let (store, h) = head(vec![], 4);
        let x = random_seeded(&[3, 6], 5);
        let tape = Tape::new();
        let expected = tape
            .constant(x.clone())
            .matmul(tape.constant(store.value("head.out.weight").clone()))
            .unwrap()
            + tape.constant(store.value("head.out.bias").clone());
        assert_eq!(logits(&h, &store, &ForwardCtx::eval(), x), *expected.value());
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let (store, h) = head(vec![4], 6);
        let tape = Tape::new();
        let x = tape.constant(NDArray::zeros(&[2, 5]));
        assert!(h.forward(&tape, &store, &ForwardCtx::eval(), x).is_err());
    }

    /// Eval-mode batch norm with non-trivial running statistics; training-mode batch
    /// norm cancels the preceding bias exactly, which leaves a zero gradient that
    /// finite differences can only resolve to roundoff.
    #[test]
    fn head_passes_grad_check() {
        let (mut store, h) = head(vec![8, 5], 7);
        for (l, w) in [8, 5].iter().enumerate() {
            *store.value_mut(&format!("head.layer{l}.bn.running_mean")) = random_seeded(&[*w], 10 + l as u64);
            *store.value_mut(&format!("head.layer{l}.bn.running_var")) =
                random_seeded(&[*w], 20 + l as u64).map(|v| 1.0 + 0.5 * v);
            let b = store.value_mut(&format!("head.layer{l}.bias"));
            *b = random_seeded(b.shape(), 30 + l as u64);
        }
        let x = random_seeded(&[4, 6], 8);
        let r = grad_check(&store, 1e-5, |t, s| {
            let y = h.forward(t, s, &ForwardCtx::eval(), t.constant(x.clone()))?;
            cross_entropy(y, &[0, 2, 1, 1])
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        let r = grad_check_inputs(&[x], 1e-5, |t, v| {
            Ok(weighted_sum(h.forward(t, &store, &ForwardCtx::eval(), v[0])?, 9))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let uniform = cross_entropy(tape.constant(NDArray::zeros(&[2, 4])), &[0, 3]).unwrap();
        assert!((uniform.item() - 4f64.ln()).abs() < 1e-15);
        let p: [f64; 4] = [0.7, 0.1, 0.1, 0.1];
        let logits = NDArray::new(vec![1, 4], p.iter().map(|v| v.ln()).collect()).unwrap();
        let l = cross_entropy(tape.constant(logits), &[0]).unwrap();
        assert!((l.item() - 0.356675).abs() < 1e-6);
        let peaked = NDArray::new(vec![1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(tape.constant(peaked), &[0]).unwrap().item() < 1e-25);
        assert!(cross_entropy(tape.constant(NDArray::zeros(&[0, 3])), &[]).is_err());
    }
}
