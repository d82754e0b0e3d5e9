//! Checks that the attention mask really confines information flow and that
//! analytic gradients agree with finite differences.

use rand::Rng;

use super::{forward, Decoder, ForwardInput, ParamLayout, Result};
use crate::corpus::{PAD, SEP};
use crate::numkernel::{Graph, Real, Tensor};
use crate::pipeline::DataPoint;

/// Outcome of [`leakage_audit`] on one datapoint.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LeakageReport {
    /// Rows compared after a perturbation.
    pub rows_checked: usize,
    /// Rows whose logits changed although they could not see the change.
    pub rows_changed: usize,
    /// Embedding rows whose gradient should be exactly zero.
    pub grads_checked: usize,
    /// Of those, rows carrying any non-zero entry.
    pub grads_nonzero: usize,
}

impl LeakageReport {
    pub fn clean(&self) -> bool {
        self.rows_changed == 0 && self.grads_nonzero == 0
    }

    pub fn merge(&mut self, other: &Self) {
        self.rows_checked += other.rows_checked;
        self.rows_changed += other.rows_changed;
        self.grads_checked += other.grads_checked;
        self.grads_nonzero += other.grads_nonzero;
    }
}

fn random_item<R: Rng>(rng: &mut R, vocab: usize, avoid: usize) -> usize {
    loop {
        let t = rng.random_range(SEP as usize + 1..vocab);
        if t != avoid {
            return t;
        }
    }
}

fn bit_equal(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Perturbs hidden positions and compares logits bit for bit.
///
/// Three probes per datapoint:
/// * one random position `j` gets a new token; every row that may not see
///   `j` must keep its logits;
/// * for a random row `i`, every position `i` may not see gets a new token
///   at once; row `i` must keep its logits;
/// * the gradient of a random linear functional of row `i`'s logits must be
///   exactly zero on the embeddings of every position `i` may not see.
pub fn leakage_audit<R: Rng>(decoder: &Decoder, dp: &DataPoint, rng: &mut R) -> Result<LeakageReport> {
    let cfg = &decoder.config;
    let input = ForwardInput::from_datapoint(dp, cfg)?;
    let n = input.len();
    let base = decoder.logits_for(&input)?;
    let v = base.last_dim();
    let mut report = LeakageReport::default();
    let real: Vec<usize> = (0..n).filter(|&k| input.tokens[k] != PAD as usize).collect();
    if real.is_empty() {
        return Ok(report);
    }

    let j = real[rng.random_range(0..real.len())];
    let mut probe = input.clone();
    probe.tokens[j] = random_item(rng, cfg.vocab_size, input.tokens[j]);
    let out = decoder.logits_for(&probe)?;
    for i in (0..n).filter(|&i| !input.mask.allowed(i, j)) {
        report.rows_checked += 1;
        if !bit_equal(base.row(i), out.row(i)) {
            report.rows_changed += 1;
        }
    }

    let i = real[rng.random_range(0..real.len())];
    let hidden: Vec<usize> = (0..n).filter(|&k| !input.mask.allowed(i, k)).collect();
    let mut probe = input.clone();
    for &k in &hidden {
        probe.tokens[k] = random_item(rng, cfg.vocab_size, input.tokens[k]);
    }
    let out = decoder.logits_for(&probe)?;
    report.rows_checked += 1;
    if !bit_equal(base.row(i), out.row(i)) {
        report.rows_changed += 1;
    }

    let mut g = Graph::new(&decoder.params);
    let f = forward(&mut g, cfg, &input, None)?;
    let mut weights = vec![0f32; n * v];
    for w in &mut weights[i * v..(i + 1) * v] {
        *w = rng.random_range(-1.0..1.0);
    }
    let w = g.constant(Tensor::new(vec![n, v], weights)?)?;
    let picked = g.mul(f.logits, w)?;
    let root = g.sum(picked)?;
    let grads = g.backward(root)?;
    let d = cfg.d_model;
    let zero = Tensor::zeros(&[n, d]);
    let emb = grads.get(f.embeddings).unwrap_or(&zero);
    for &k in &hidden {
        report.grads_checked += 1;
        if emb.data()[k * d..(k + 1) * d].iter().any(|&x| x != 0.0) {
            report.grads_nonzero += 1;
        }
    }
    Ok(report)
}

/// Largest relative disagreement between analytic and numerical gradients
/// within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_error: f64,
}

fn loss_of<T: Real>(params: &[Tensor<T>], decoder: &Decoder, input: &ForwardInput, dp: &DataPoint) -> Result<(T, Vec<Tensor<T>>)> {
    let mut g = Graph::new(params);
    let f = forward(&mut g, &decoder.config, input, None)?;
    let loss = g.cross_entropy_masked(f.logits, &dp.targets(), &dp.loss_mask)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.into_param_grads(params);
    Ok((value, grads))
}

/// Compares `f32` backpropagation of the masked next-token loss with central
/// differences computed in `f64` from the same `f32` parameter values.
///
/// Relative error is `|a - b| / max(|a|, |b|, floor)`; up to `per_tensor`
/// randomly chosen entries of every tensor are probed.
pub fn gradient_check<R: Rng>(
    decoder: &Decoder,
    dp: &DataPoint,
    step: f64,
    floor: f64,
    per_tensor: usize,
    rng: &mut R,
) -> Result<Vec<GradientCheck>> {
    let input = ForwardInput::from_datapoint(dp, &decoder.config)?;
    let (_, analytic) = loss_of(&decoder.params, decoder, &input, dp)?;
    let mut wide: Vec<Tensor<f64>> = decoder.cast();
    let names = ParamLayout::new(&decoder.config).names();
    let mut out = Vec::with_capacity(names.len());
    for (p, name) in names.into_iter().enumerate() {
        let len = wide[p].len();
        let mut entries: Vec<usize> = (0..len).collect();
        if len > per_tensor {
            entries = rand::seq::index::sample(rng, len, per_tensor).into_vec();
        }
        let mut worst = 0f64;
        for &e in &entries {
            let orig = wide[p].data()[e];
            wide[p].data_mut()[e] = orig + step;
            let (plus, _) = loss_of(&wide, decoder, &input, dp)?;
            wide[p].data_mut()[e] = orig - step;
            let (minus, _) = loss_of(&wide, decoder, &input, dp)?;
            wide[p].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[p].data()[e] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
        out.push(GradientCheck {
            name,
            entries_checked: entries.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}
