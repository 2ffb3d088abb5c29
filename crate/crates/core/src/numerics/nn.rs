//! Layer-level building blocks with fused backward passes.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ops::{sigmoid, softmax_slice, stack};
use super::params::{InitSpec, ParamStore};
use super::tape::{Tape, Var};
use super::NDArray;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
/// Guard for divisions by norms or sums that may vanish.
pub const NUMERIC_GUARD: f64 = 1e-8;

/// Per-forward-pass state: training flag, dropout randomness and pending
/// batch-norm statistic updates. Parameters stay read-only during a pass.
pub struct ForwardCtx {
    pub training: bool,
    rng: RefCell<Option<ChaCha8Rng>>,
    stat_updates: RefCell<Vec<StatUpdate>>,
}

/// Batch statistics observed by one batch-norm layer in training mode.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            training: false,
            rng: RefCell::new(None),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: RefCell::new(Some(rng)),
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn take_stat_updates(&self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }

    /// Folds recorded batch statistics into the running estimates.
    pub fn apply_stat_updates(&self, store: &mut ParamStore) {
        for u in self.take_stat_updates() {
            let rm = store.value_mut(&format!("{}.running_mean", u.prefix));
            for (r, m) in rm.data_mut().iter_mut().zip(&u.mean) {
                *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * m;
            }
            let rv = store.value_mut(&format!("{}.running_var", u.prefix));
            for (r, v) in rv.data_mut().iter_mut().zip(&u.var) {
                *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * v;
            }
        }
    }
}

/// Registers `prefix.weight` `[d_in, d_out]` and optionally `prefix.bias`.
pub fn register_linear(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
) -> Result<()> {
    // Uniform(±1/√d_in), the common default for dense layers.
    let bound = 1.0 / (d_in.max(1) as f64).sqrt();
    store.register(
        &format!("{prefix}.weight"),
        &[d_in, d_out],
        InitSpec::Uniform { lo: -bound, hi: bound },
    )?;
    if bias {
        store.register(&format!("{prefix}.bias"), &[d_out], InitSpec::Constant(0.0))?;
    }
    Ok(())
}

/// `x · weight (+ bias)` for parameters registered by [`register_linear`].
pub fn linear<'t>(tape: &'t Tape, store: &ParamStore, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let w = tape.param(store, &format!("{prefix}.weight"));
    let y = x.matmul(w)?;
    let bias = format!("{prefix}.bias");
    Ok(match store.id(&bias) {
        Some(_) => y + tape.param(store, &bias),
        None => y,
    })
}

/// Normalizes each last-axis vector to zero mean and unit variance, then applies `gamma`, `beta`.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
    let xv = x.value();
    let d = *xv.shape().last().expect("layer_norm of a scalar");
    let (g, b) = (gamma.value(), beta.value());
    assert_eq!(g.shape(), [d], "layer_norm gamma width");
    assert_eq!(b.shape(), [d], "layer_norm beta width");
    let mut xhat = Vec::with_capacity(xv.len());
    let mut inv_std = Vec::with_capacity(xv.len() / d);
    for row in xv.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std.push(s);
        xhat.extend(row.iter().map(|v| (v - mean) * s));
    }
    let y: Vec<f64> = xhat
        .chunks(d)
        .flat_map(|r| r.iter().zip(g.data()).zip(b.data()).map(|((x, g), b)| x * g + b))
        .collect();
    let y = NDArray::from_parts(xv.shape().to_vec(), y);
    x.tape.record(
        y,
        &[x, gamma, beta],
        Box::new(move |c| {
            let gamma = c.inputs[1].data();
            let grad = c.grad.data();
            let mut gx = Vec::with_capacity(grad.len());
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for (r, (gr, xr)) in grad.chunks(d).zip(xhat.chunks(d)).enumerate() {
                let h: Vec<f64> = gr.iter().zip(gamma).map(|(g, w)| g * w).collect();
                let mh = h.iter().sum::<f64>() / d as f64;
                let mhx = h.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                gx.extend(h.iter().zip(xr).map(|(h, x)| inv_std[r] * (h - mh - x * mhx)));
                for j in 0..d {
                    gg[j] += gr[j] * xr[j];
                    gb[j] += gr[j];
                }
            }
            vec![
                Some(NDArray::from_parts(c.inputs[0].shape().to_vec(), gx)),
                Some(NDArray::from_parts(vec![d], gg)),
                Some(NDArray::from_parts(vec![d], gb)),
            ]
        }),
    )
}

/// Training-mode batch norm over the rows of `x[N, C]`. Statistics use only rows with
/// `valid[r] == true` (all rows when `valid` is `None`); every row is normalized with them.
/// Returns the output, the batch mean and the unbiased batch variance.
pub fn batch_norm_train<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    eps: f64,
    valid: Option<Rc<Vec<bool>>>,
) -> (Var<'t>, Vec<f64>, Vec<f64>) {
    let xv = x.value();
    assert_eq!(xv.rank(), 2, "batch_norm expects [N, C]");
    let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
    let is_valid = |r: usize| valid.as_ref().is_none_or(|v| v[r]);
    let n = (0..rows).filter(|&r| is_valid(r)).count();
    let mut mean = vec![0.0; cols];
    let mut var = vec![0.0; cols];
    if n > 0 {
        for r in (0..rows).filter(|&r| is_valid(r)) {
            for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in (0..rows).filter(|&r| is_valid(r)) {
            for ((s, v), m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (g, b) = (gamma.value(), beta.value());
    let mut y = Vec::with_capacity(xv.len());
    for r in 0..rows {
        for j in 0..cols {
            let xh = (xv.data()[r * cols + j] - mean[j]) * inv_std[j];
            y.push(xh * g.data()[j] + b.data()[j]);
        }
    }
    let unbiased: Vec<f64> = var
        .iter()
        .map(|v| if n > 1 { v * n as f64 / (n - 1) as f64 } else { *v })
        .collect();
    let mean_out = mean.clone();
    let out = x.tape.record(
        NDArray::from_parts(vec![rows, cols], y),
        &[x, gamma, beta],
        Box::new(move |c| {
            let (xd, gamma, grad) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let mut gx = vec![0.0; rows * cols];
            let mut gg = vec![0.0; cols];
            let mut gb = vec![0.0; cols];
            let is_valid = |r: usize| valid.as_ref().is_none_or(|v| v[r]);
            for j in 0..cols {
                let s = inv_std[j];
                let mut sum_h = 0.0;
                let mut sum_hc = 0.0;
                for r in 0..rows {
                    let i = r * cols + j;
                    let centered = xd[i] - mean[j];
                    let h = grad[i] * gamma[j];
                    sum_h += h;
                    sum_hc += h * centered;
                    gg[j] += grad[i] * centered * s;
                    gb[j] += grad[i];
                    gx[i] = h * s;
                }
                if n == 0 {
                    continue;
                }
                let d_var = -0.5 * s * s * s * sum_hc;
                let d_mean = -s * sum_h;
                for r in (0..rows).filter(|&r| is_valid(r)) {
                    let i = r * cols + j;
                    gx[i] += d_var * 2.0 * (xd[i] - mean[j]) / n as f64 + d_mean / n as f64;
                }
            }
            vec![
                Some(NDArray::from_parts(vec![rows, cols], gx)),
                Some(NDArray::from_parts(vec![cols], gg)),
                Some(NDArray::from_parts(vec![cols], gb)),
            ]
        }),
    );
    (out, mean_out, unbiased)
}

/// Eval-mode batch norm with fixed running statistics.
pub fn batch_norm_eval<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running_mean: &NDArray,
    running_var: &NDArray,
    eps: f64,
) -> Var<'t> {
    let tape = x.tape;
    let inv_std = running_var.map(|v| 1.0 / (v + eps).sqrt());
    let shift = tape.constant(running_mean.clone());
    let scale = tape.constant(inv_std);
    (x - shift) * scale * gamma + beta
}

/// Batch-norm layer with parameters `prefix.{gamma,beta}` and buffers
/// `prefix.{running_mean,running_var}`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub prefix: String,
    pub width: usize,
}

impl BatchNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        store.register(&format!("{prefix}.gamma"), &[width], InitSpec::Constant(1.0))?;
        store.register(&format!("{prefix}.beta"), &[width], InitSpec::Constant(0.0))?;
        store.register_buffer(&format!("{prefix}.running_mean"), NDArray::zeros(&[width]))?;
        store.register_buffer(&format!("{prefix}.running_var"), NDArray::ones(&[width]))?;
        Ok(Self {
            prefix: prefix.to_string(),
            width,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ctx: &ForwardCtx,
        x: Var<'t>,
        valid: Option<Rc<Vec<bool>>>,
    ) -> Var<'t> {
        let gamma = tape.param(store, &format!("{}.gamma", self.prefix));
        let beta = tape.param(store, &format!("{}.beta", self.prefix));
        if ctx.training {
            let (y, mean, var) = batch_norm_train(x, gamma, beta, BATCH_NORM_EPS, valid);
            ctx.stat_updates.borrow_mut().push(StatUpdate {
                prefix: self.prefix.clone(),
                mean,
                var,
            });
            y
        } else {
            batch_norm_eval(
                x,
                gamma,
                beta,
                store.value(&format!("{}.running_mean", self.prefix)),
                store.value(&format!("{}.running_var", self.prefix)),
                BATCH_NORM_EPS,
            )
        }
    }
}

/// Inverted dropout; identity outside training or when `p == 0`.
pub fn dropout<'t>(x: Var<'t>, p: f64, ctx: &ForwardCtx) -> Var<'t> {
    if !ctx.training || p <= 0.0 {
        return x;
    }
    let mut rng = ctx.rng.borrow_mut();
    let Some(rng) = rng.as_mut() else { return x };
    let shape = x.shape();
    let keep = 1.0 - p;
    let data = (0..shape.iter().product::<usize>())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    x.mask_mul(&NDArray::from_parts(shape, data))
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, computed in the log domain.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let lv = logits.value();
    if lv.rank() != 2 {
        return Err(Error::Shape(format!("logits must be [B, C], got {:?}", lv.shape())));
    }
    let (b, c) = (lv.shape()[0], lv.shape()[1]);
    if b == 0 || labels.is_empty() {
        return Err(Error::Shape("cross entropy of an empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), b)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Shape(format!("label {bad} outside [0, {c})")));
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(b * c);
    for (row, &y) in lv.data().chunks(c).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        probs.extend(softmax_slice(row));
    }
    let labels = labels.to_vec();
    Ok(logits.tape.record(
        NDArray::scalar(loss / b as f64),
        &[logits],
        Box::new(move |ctx| {
            let g = ctx.grad.item() / b as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * g).collect();
            for (r, &y) in labels.iter().enumerate() {
                gx[r * c + y] -= g;
            }
            vec![Some(NDArray::from_parts(vec![b, c], gx))]
        }),
    ))
}

/// Same-padded 1-D convolution: `x[B, L, C_in]`, `weight[C_out, k, C_in]`, `bias[C_out]`.
pub fn conv1d_same<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), weight.value());
    let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
    if xs.len() != 3 || ws.len() != 3 || xs[2] != ws[2] || bias.shape() != [ws[0]] {
        return Err(Error::Shape(format!(
            "conv1d input {xs:?} with weight {ws:?} and bias {:?}",
            bias.shape()
        )));
    }
    let (b, l, cin) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[1]);
    let half = (k / 2) as isize;
    let bv = bias.value();
    let mut out = vec![0.0; b * l * cout];
    for s in 0..b {
        for p in 0..l {
            let o = &mut out[(s * l + p) * cout..(s * l + p + 1) * cout];
            o.copy_from_slice(bv.data());
            for t in 0..k {
                let q = p as isize + t as isize - half;
                if q < 0 || q >= l as isize {
                    continue;
                }
                let xrow = &xv.data()[(s * l + q as usize) * cin..(s * l + q as usize + 1) * cin];
                for (co, ov) in o.iter_mut().enumerate() {
                    let wrow = &wv.data()[(co * k + t) * cin..(co * k + t + 1) * cin];
                    *ov += wrow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    Ok(x.tape.record(
        NDArray::from_parts(vec![b, l, cout], out),
        &[x, weight, bias],
        Box::new(move |c| {
            let (xd, wd, g) = (c.inputs[0].data(), c.inputs[1].data(), c.grad.data());
            let mut gx = c.needs[0].then(|| vec![0.0; b * l * cin]);
            let mut gw = vec![0.0; cout * k * cin];
            let mut gb = vec![0.0; cout];
            for s in 0..b {
                for p in 0..l {
                    let grow = &g[(s * l + p) * cout..(s * l + p + 1) * cout];
                    for (co, gv) in grow.iter().enumerate() {
                        gb[co] += gv;
                    }
                    for t in 0..k {
                        let q = p as isize + t as isize - half;
                        if q < 0 || q >= l as isize {
                            continue;
                        }
                        let xoff = (s * l + q as usize) * cin;
                        for (co, &gv) in grow.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let woff = (co * k + t) * cin;
                            for ci in 0..cin {
                                gw[woff + ci] += gv * xd[xoff + ci];
                            }
                            if let Some(gx) = gx.as_mut() {
                                for ci in 0..cin {
                                    gx[xoff + ci] += gv * wd[woff + ci];
                                }
                            }
                        }
                    }
                }
            }
            vec![
                gx.map(|d| NDArray::from_parts(vec![b, l, cin], d)),
                Some(NDArray::from_parts(vec![cout, k, cin], gw)),
                Some(NDArray::from_parts(vec![cout], gb)),
            ]
        }),
    ))
}

/// Max over positions of `x[B, L, C]` restricted to `mask[b·L + l] == true`.
/// Samples without any valid position pool to zero.
pub fn masked_max_pool<'t>(x: Var<'t>, mask: &[bool]) -> Var<'t> {
    let xv = x.value();
    let (b, l, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    assert_eq!(mask.len(), b * l, "mask covers [B, L]");
    let mut out = vec![0.0; b * c];
    let mut arg: Vec<Option<usize>> = vec![None; b * c];
    for s in 0..b {
        for p in (0..l).filter(|&p| mask[s * l + p]) {
            for ch in 0..c {
                let i = (s * l + p) * c + ch;
                let slot = s * c + ch;
                if arg[slot].is_none_or(|a| xv.data()[i] > xv.data()[a]) {
                    arg[slot] = Some(i);
                    out[slot] = xv.data()[i];
                }
            }
        }
    }
    x.tape.record(
        NDArray::from_parts(vec![b, c], out),
        &[x],
        Box::new(move |ctx| {
            let mut gx = vec![0.0; b * l * c];
            for (slot, a) in arg.iter().enumerate() {
                if let Some(i) = a {
                    gx[*i] += ctx.grad.data()[slot];
                }
            }
            vec![Some(NDArray::from_parts(vec![b, l, c], gx))]
        }),
    )
}

/// Parameter names of one LSTM layer.
#[derive(Clone, Debug)]
pub struct LstmLayerNames {
    pub w_ih: String,
    pub w_hh: String,
    pub bias: String,
}

/// Registers a stacked LSTM with gate order (input, forget, candidate, output).
pub fn register_lstm(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    layers: usize,
) -> Result<Vec<LstmLayerNames>> {
    let bound = 1.0 / (hidden.max(1) as f64).sqrt();
    let init = InitSpec::Uniform { lo: -bound, hi: bound };
    (0..layers)
        .map(|l| {
            let names = LstmLayerNames {
                w_ih: format!("{prefix}.layer{l}.w_ih"),
                w_hh: format!("{prefix}.layer{l}.w_hh"),
                bias: format!("{prefix}.layer{l}.bias"),
            };
            let input = if l == 0 { d_in } else { hidden };
            store.register(&names.w_ih, &[input, 4 * hidden], init)?;
            store.register(&names.w_hh, &[hidden, 4 * hidden], init)?;
            store.register(&names.bias, &[4 * hidden], InitSpec::Constant(0.0))?;
            Ok(names)
        })
        .collect()
}

/// Stacked LSTM over `x[B, L, C]` from a zero state.
///
/// Positions with `mask[b·L + t] == false` leave the state of sample `b` untouched, so
/// the returned final hidden state is the one at the last valid position.
/// Returns the last layer's outputs `[B, L, h]` and its final hidden state `[B, h]`.
pub fn lstm_forward<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    layers: &[LstmLayerNames],
    x: Var<'t>,
    mask: Option<&[bool]>,
) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("lstm input must be [B, L, C], got {shape:?}")));
    }
    let (b, l) = (shape[0], shape[1]);
    if l == 0 {
        return Err(Error::Shape("lstm over an empty sequence".into()));
    }
    if layers.is_empty() {
        return Err(Error::Shape("lstm needs at least one layer".into()));
    }
    let step_masks: Option<Vec<(Var<'t>, Var<'t>)>> = mask.map(|m| {
        (0..l)
            .map(|t| {
                let keep: Vec<f64> = (0..b).map(|s| if m[s * l + t] { 1.0 } else { 0.0 }).collect();
                let hold: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
                (
                    tape.constant(NDArray::from_parts(vec![b, 1], keep)),
                    tape.constant(NDArray::from_parts(vec![b, 1], hold)),
                )
            })
            .collect()
    });
    let mut input = x;
    let mut last_h = None;
    for names in layers {
        let w_ih = tape.param(store, &names.w_ih);
        let w_hh = tape.param(store, &names.w_hh);
        let bias = tape.param(store, &names.bias);
        let hidden = w_hh.shape()[0];
        let projected = input.matmul(w_ih)? + bias;
        let mut h = tape.constant(NDArray::zeros(&[b, hidden]));
        let mut c = tape.constant(NDArray::zeros(&[b, hidden]));
        let mut outputs = Vec::with_capacity(l);
        for t in 0..l {
            let gates = projected.select(1, t) + h.matmul(w_hh)?;
            let i = gates.slice(1, 0, hidden).sigmoid();
            let f = gates.slice(1, hidden, 2 * hidden).sigmoid();
            let g = gates.slice(1, 2 * hidden, 3 * hidden).tanh();
            let o = gates.slice(1, 3 * hidden, 4 * hidden).sigmoid();
            let c_new = f * c + i * g;
            let h_new = o * c_new.tanh();
            match &step_masks {
                Some(ms) => {
                    let (keep, hold) = ms[t];
                    c = c_new * keep + c * hold;
                    h = h_new * keep + h * hold;
                }
                None => {
                    c = c_new;
                    h = h_new;
                }
            }
            outputs.push(h);
        }
        input = stack(&outputs, 1);
        last_h = Some(h);
    }
    Ok((input, last_h.expect("at least one layer")))
}

/// Single LSTM cell step on plain values, used to cross-check [`lstm_forward`].
pub fn lstm_cell_reference(
    x: &[f64],
    h: &[f64],
    c: &[f64],
    w_ih: &NDArray,
    w_hh: &NDArray,
    bias: &NDArray,
) -> (Vec<f64>, Vec<f64>) {
    let hidden = h.len();
    let gate = |j: usize| -> f64 {
        let mut v = bias.data()[j];
        for (p, xv) in x.iter().enumerate() {
            v += xv * w_ih.at(&[p, j]);
        }
        for (p, hv) in h.iter().enumerate() {
            v += hv * w_hh.at(&[p, j]);
        }
        v
    };
    let mut h2 = vec![0.0; hidden];
    let mut c2 = vec![0.0; hidden];
    for k in 0..hidden {
        let i = sigmoid(gate(k));
        let f = sigmoid(gate(hidden + k));
        let g = gate(2 * hidden + k).tanh();
        let o = sigmoid(gate(3 * hidden + k));
        c2[k] = f * c[k] + i * g;
        h2[k] = o * c2[k].tanh();
    }
    (h2, c2)
}
