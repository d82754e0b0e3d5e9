use rand::RngCore;

use super::{DecoderConfig, MaskMatrix, ModelError, ParamLayout, PositionScheme, Result, LAYER_NORM_EPS};
use crate::corpus::SEP;
use crate::numkernel::{Graph, Real, Var};
use crate::pipeline::DataPoint;

/// Everything the network reads from one datapoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardInput {
    pub tokens: Vec<usize>,
    /// Row of the position table per position; unused when positions are
    /// disabled.
    pub positions: Vec<usize>,
    pub mask: MaskMatrix,
}

impl ForwardInput {
    pub fn from_datapoint(dp: &DataPoint, cfg: &DecoderConfig) -> Result<Self> {
        let mask = MaskMatrix::for_datapoint(dp, cfg.mask_mode)?;
        let positions = match cfg.positions {
            PositionScheme::Absolute | PositionScheme::Disabled => (0..dp.len()).collect(),
            PositionScheme::SegmentRestart => {
                let mut next = 0;
                dp.tokens
                    .iter()
                    .map(|&t| {
                        let p = next;
                        next = if t == SEP { 0 } else { next + 1 };
                        p
                    })
                    .collect()
            }
        };
        Ok(Self {
            tokens: dp.tokens.iter().map(|&t| t as usize).collect(),
            positions,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Handles into the recorded graph.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Summed token and position embeddings `[len, d_model]`.
    pub embeddings: Var,
    /// Next-token logits `[len, vocab]`.
    pub logits: Var,
}

/// Records the pre-norm decoder on `g`, whose parameters follow
/// [`ParamLayout`]. Dropout is applied only when `dropout` is given.
pub fn forward<T: Real>(
    g: &mut Graph<'_, T>,
    cfg: &DecoderConfig,
    input: &ForwardInput,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Forward> {
    let n = input.len();
    if n == 0 {
        return Err(ModelError::Contract("empty datapoint".into()));
    }
    if n > cfg.max_len {
        return Err(ModelError::Contract(format!("datapoint of {n} positions exceeds max length {}", cfg.max_len)));
    }
    if input.positions.len() != n || input.mask.len() != n {
        return Err(ModelError::Contract("positions and mask must match the token count".into()));
    }
    if let Some(&t) = input.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(ModelError::Contract(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let layout = ParamLayout::new(cfg);
    let rate = if dropout.is_some() { cfg.dropout } else { 0.0 };
    let mut drop = |g: &mut Graph<'_, T>, x: Var| -> Result<Var> {
        match dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => Ok(g.dropout(x, rate, rng)?),
            _ => Ok(x),
        }
    };

    let tok_table = g.param(ParamLayout::TOKEN_EMBEDDING);
    let tok = g.gather(tok_table, &input.tokens)?;
    let embeddings = match cfg.positions {
        PositionScheme::Disabled => tok,
        _ => {
            let pos_table = g.param(ParamLayout::POSITION_EMBEDDING);
            let pos = g.gather(pos_table, &input.positions)?;
            g.add(tok, pos)?
        }
    };
    let mut x = drop(g, embeddings)?;
    let allow = input.mask.as_shared();
    let inv_sqrt_dk = T::from_f64(1.0 / (cfg.d_k as f64).sqrt());

    for l in 0..cfg.num_layers {
        let p = layout.layer(l);
        let h = g.layer_norm(x, g.param(p.ln1_gain), g.param(p.ln1_bias), LAYER_NORM_EPS)?;
        let project = |g: &mut Graph<'_, T>, w: usize, b: usize| -> Result<Var> {
            let y = g.matmul(h, g.param(w))?;
            Ok(g.add_bias(y, g.param(b))?)
        };
        let q = project(g, p.wq, p.bq)?;
        let k = project(g, p.wk, p.bk)?;
        let v = project(g, p.wv, p.bv)?;
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let off = head * cfg.d_k;
            let qh = g.slice_cols(q, off, cfg.d_k)?;
            let kh = g.slice_cols(k, off, cfg.d_k)?;
            let vh = g.slice_cols(v, off, cfg.d_k)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt_dk)?;
            let weights = g.masked_softmax(scores, allow.clone(), cfg.mask_application)?;
            let weights = drop(g, weights)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn = g.matmul(attn, g.param(p.wo))?;
        let attn = g.add_bias(attn, g.param(p.bo))?;
        let attn = drop(g, attn)?;
        x = g.add(x, attn)?;

        let h = g.layer_norm(x, g.param(p.ln2_gain), g.param(p.ln2_bias), LAYER_NORM_EPS)?;
        let f = g.matmul(h, g.param(p.w1))?;
        let f = g.add_bias(f, g.param(p.b1))?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, g.param(p.w2))?;
        let f = g.add_bias(f, g.param(p.b2))?;
        let f = drop(g, f)?;
        x = g.add(x, f)?;
    }
    let h = g.layer_norm(
        x,
        g.param(layout.final_gain()),
        g.param(layout.final_bias()),
        LAYER_NORM_EPS,
    )?;
    let logits = g.matmul_nt(h, tok_table)?;
    let logits = g.add_bias(logits, g.param(layout.output_bias()))?;
    Ok(Forward { embeddings, logits })
}
