//! Expression encoder: stacked Chebyshev KAN layers.
//!
//! Each layer computes `SiLU(x)·Wᵀ + T(tanh x)·W_chebyᵀ + b`, where `T` expands every
//! input dimension into Chebyshev polynomials `T_0..T_N`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{InitSpec, NDArray, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpkanConfig {
    /// `[E, ..., d_exp]`; one layer per consecutive pair.
    pub widths: Vec<usize>,
    pub degree: usize,
    pub scale_base: f64,
    pub scale_cheby: f64,
}

impl CpkanConfig {
    /// Two layers `[input → 64 → output]`, degree 5, unit scales.
    pub fn new(input: usize, output: usize) -> Self {
        Self {
            widths: vec![input, 64, output],
            degree: 5,
            scale_base: 1.0,
            scale_cheby: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("cpkan", "widths", "need at least input and output width"));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("cpkan", "widths", "widths must be positive"));
        }
        if !(self.scale_base.is_finite() && self.scale_cheby.is_finite() && self.scale_cheby >= 0.0) {
            return Err(Error::config("cpkan", "scale_cheby", "scales must be finite, scale_cheby ≥ 0"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// `[T_0(x̃), ..., T_N(x̃)]` by the three-term recurrence.
pub fn chebyshev_basis(x: f64, degree: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(degree + 1);
    t.push(1.0);
    if degree >= 1 {
        t.push(x);
    }
    for n in 1..degree {
        t.push(2.0 * x * t[n] - t[n - 1]);
    }
    t
}

/// Derivatives `T_n'(x̃)` matching [`chebyshev_basis`].
fn chebyshev_derivs(x: f64, t: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(t.len());
    d.push(0.0);
    if t.len() > 1 {
        d.push(1.0);
    }
    for n in 1..t.len().saturating_sub(1) {
        d.push(2.0 * t[n] + 2.0 * x * d[n] - d[n - 1]);
    }
    d
}

/// Expands `x[.., d]` to `[.., d·(N+1)]`: per dimension `[T_0(tanh x), ..., T_N(tanh x)]`.
pub fn cheby_expand<'t>(x: Var<'t>, degree: usize) -> Var<'t> {
    let xv = x.value();
    let k = degree + 1;
    let mut out = Vec::with_capacity(xv.len() * k);
    for &v in xv.data() {
        out.extend(chebyshev_basis(v.tanh(), degree));
    }
    let mut shape = xv.shape().to_vec();
    if let Some(last) = shape.last_mut() {
        *last *= k;
    }
    x.tape().record(
        NDArray::from_parts(shape, out),
        &[x],
        Box::new(move |c| {
            let (xs, t, g) = (c.inputs[0].data(), c.output.data(), c.grad.data());
            let gx = xs
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let xt = v.tanh();
                    let ti = &t[i * k..(i + 1) * k];
                    let dt = chebyshev_derivs(xt, ti);
                    let dot: f64 = dt.iter().zip(&g[i * k..(i + 1) * k]).map(|(a, b)| a * b).sum();
                    dot * (1.0 - xt * xt)
                })
                .collect();
            vec![Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), gx))]
        }),
    )
}

pub fn register_cpkan_layer(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    config: &CpkanConfig,
) -> Result<()> {
    let k = config.degree + 1;
    store.register(
        &format!("{prefix}.W"),
        &[d_out, d_in],
        InitSpec::KaimingFanIn {
            fan_in: d_in,
            gain: config.scale_base,
        },
    )?;
    store.register(
        &format!("{prefix}.W_cheby"),
        &[d_out, d_in * k],
        InitSpec::Normal {
            mean: 0.0,
            std: config.scale_cheby / (d_in as f64).sqrt(),
        },
    )?;
    store.register(&format!("{prefix}.b"), &[d_out], InitSpec::Constant(0.0))?;
    Ok(())
}

/// One layer on `x[B, d_in]`.
pub fn cpkan_layer_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    prefix: &str,
    degree: usize,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let w = tape.param(store, &format!("{prefix}.W"));
    let d_in = w.shape()[1];
    let width = x.shape().last().copied().unwrap_or(0);
    if x.shape().len() != 2 || width != d_in {
        return Err(Error::Shape(format!(
            "{prefix} expects [B, {d_in}] input, got {:?}",
            x.shape()
        )));
    }
    let w_cheby = tape.param(store, &format!("{prefix}.W_cheby"));
    let b = tape.param(store, &format!("{prefix}.b"));
    let base = x.silu().matmul_t(w)?;
    let poly = cheby_expand(x, degree).matmul_t(w_cheby)?;
    Ok(base + poly + b)
}

/// Registered CPKAN stack under `prefix.layer{l}`.
#[derive(Clone, Debug)]
pub struct Cpkan {
    pub config: CpkanConfig,
    pub prefix: String,
}

impl Cpkan {
    pub fn register(store: &mut ParamStore, prefix: &str, config: CpkanConfig) -> Result<Self> {
        config.validate()?;
        for (l, pair) in config.widths.windows(2).enumerate() {
            register_cpkan_layer(store, &format!("{prefix}.layer{l}"), pair[0], pair[1], &config)?;
        }
        Ok(Self {
            config,
            prefix: prefix.to_string(),
        })
    }

    pub fn layer_prefix(&self, l: usize) -> String {
        format!("{}.layer{l}", self.prefix)
    }

    /// `x[B, E] -> F_exp[B, d_exp]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for l in 0..self.config.num_layers() {
            h = cpkan_layer_forward(tape, store, &self.layer_prefix(l), self.config.degree, h)?;
        }
        Ok(h)
    }

    /// Coefficients `α[d_out, d_in, N+1]` of layer `l`.
    pub fn coefficients(&self, store: &ParamStore, l: usize) -> Result<NDArray> {
        let w = store.value(&format!("{}.W_cheby", self.layer_prefix(l)));
        let (d_out, d_in) = (self.config.widths[l + 1], self.config.widths[l]);
        w.clone().reshape(&[d_out, d_in, self.config.degree + 1])
    }
}
