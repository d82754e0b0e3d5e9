use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{forward, DecoderConfig, ForwardInput, ModelError, Result};
use crate::numkernel::{read_checkpoint, write_checkpoint, Graph, NamedTensor, Real, Tensor};
use crate::pipeline::DataPoint;
use crate::rng::{self, salt};

/// Index of every parameter tensor inside the flat parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    num_layers: usize,
}

const PER_LAYER: usize = 16;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2",
    "b2",
];

/// Per-layer parameter indices.
#[derive(Debug, Clone, Copy)]
pub struct LayerIndex {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

impl ParamLayout {
    pub fn new(cfg: &DecoderConfig) -> Self {
        Self {
            num_layers: cfg.num_layers,
        }
    }

    pub const TOKEN_EMBEDDING: usize = 0;
    pub const POSITION_EMBEDDING: usize = 1;

    pub fn layer(&self, l: usize) -> LayerIndex {
        assert!(l < self.num_layers);
        let b = 2 + PER_LAYER * l;
        LayerIndex {
            ln1_gain: b,
            ln1_bias: b + 1,
            wq: b + 2,
            bq: b + 3,
            wk: b + 4,
            bk: b + 5,
            wv: b + 6,
            bv: b + 7,
            wo: b + 8,
            bo: b + 9,
            ln2_gain: b + 10,
            ln2_bias: b + 11,
            w1: b + 12,
            b1: b + 13,
            w2: b + 14,
            b2: b + 15,
        }
    }

    pub fn final_gain(&self) -> usize {
        2 + PER_LAYER * self.num_layers
    }

    pub fn final_bias(&self) -> usize {
        self.final_gain() + 1
    }

    /// Bias added to the tied output projection.
    pub fn output_bias(&self) -> usize {
        self.final_gain() + 2
    }

    pub fn len(&self) -> usize {
        self.final_gain() + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        for l in 0..self.num_layers {
            names.extend(LAYER_NAMES.iter().map(|n| format!("layer{l}.{n}")));
        }
        names.extend(["final_gain", "final_bias", "output_bias"].map(String::from));
        names
    }

    pub fn shapes(&self, cfg: &DecoderConfig) -> Vec<Vec<usize>> {
        let (d, f) = (cfg.d_model, cfg.ff_width);
        let mut shapes = vec![vec![cfg.vocab_size, d], vec![cfg.max_len, d]];
        for _ in 0..self.num_layers {
            shapes.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ]);
        }
        shapes.extend([vec![d], vec![d], vec![cfg.vocab_size]]);
        shapes
    }
}

/// A configuration plus its parameters. Immutable once trained; inference
/// borrows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: Vec<Tensor>,
}

impl Decoder {
    /// Gaussian weights and embeddings, zero biases, unit layer-norm gains.
    /// Residual output projections are scaled down by `sqrt(2 * layers)`.
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut rng = rng::stream(seed, &[salt::INIT]);
        let std = config.init_std;
        let residual_std = std / ((2 * config.num_layers.max(1)) as f64).sqrt();
        let names = layout.names();
        let params = layout
            .shapes(&config)
            .into_iter()
            .zip(&names)
            .map(|(shape, name)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name.ends_with("gain") {
                    vec![1.0; n]
                } else if shape.len() == 1 {
                    vec![0.0; n]
                } else {
                    let s = if name.ends_with(".wo") || name.ends_with(".w2") { residual_std } else { std };
                    gaussian(&mut rng, n, s)
                };
                Tensor::new(shape, data).map_err(ModelError::from)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, params })
    }

    /// All parameters zero, including layer-norm gains.
    pub fn zeros(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = layout.shapes(&config).iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { config, params })
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Real>(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(Tensor::cast).collect()
    }

    /// Next-token logits `[len, vocab]` for one datapoint, without dropout.
    pub fn logits(&self, dp: &DataPoint) -> Result<Tensor> {
        let input = ForwardInput::from_datapoint(dp, &self.config)?;
        self.logits_for(&input)
    }

    pub fn logits_for(&self, input: &ForwardInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.params);
        let out = forward(&mut g, &self.config, input, None)?;
        Ok(g.value(out.logits).clone())
    }

    pub fn save(&self, checkpoint: &Path, sidecar: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(checkpoint)?);
        write_decoder(&mut f, self)?;
        f.flush()?;
        std::fs::write(sidecar, self.config.to_sidecar())?;
        Ok(())
    }

    pub fn load(checkpoint: &Path, sidecar: &Path) -> Result<Self> {
        let config = DecoderConfig::from_sidecar(&std::fs::read_to_string(sidecar)?)?;
        read_decoder(std::io::BufReader::new(std::fs::File::open(checkpoint)?), config)
    }
}

fn gaussian<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f32> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| normal.sample(rng) as f32).collect()
}

pub fn write_decoder<W: Write>(out: W, decoder: &Decoder) -> Result<()> {
    let named: Vec<NamedTensor> = decoder
        .layout()
        .names()
        .into_iter()
        .zip(&decoder.params)
        .map(|(name, t)| NamedTensor {
            name,
            tensor: t.clone(),
        })
        .collect();
    write_checkpoint(out, &named)?;
    Ok(())
}

/// Reads parameters and checks them against `config` by name and shape.
pub fn read_decoder<R: Read>(input: R, config: DecoderConfig) -> Result<Decoder> {
    let layout = ParamLayout::new(&config);
    let named = read_checkpoint(input)?;
    let (names, shapes) = (layout.names(), layout.shapes(&config));
    if named.len() != names.len() {
        return Err(ModelError::Contract(format!(
            "checkpoint holds {} tensors, config expects {}",
            named.len(),
            names.len()
        )));
    }
    let mut params = Vec::with_capacity(named.len());
    for ((nt, name), shape) in named.into_iter().zip(&names).zip(&shapes) {
        if &nt.name != name || nt.tensor.shape() != shape.as_slice() {
            return Err(ModelError::Contract(format!(
                "checkpoint tensor {} {:?} does not match {} {:?}",
                nt.name,
                nt.tensor.shape(),
                name,
                shape
            )));
        }
        if !nt.tensor.is_finite() {
            return Err(ModelError::Contract(format!("checkpoint tensor {name} is not finite")));
        }
        params.push(nt.tensor);
    }
    Ok(Decoder { config, params })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DecoderConfig {
        DecoderConfig {
            num_layers: 2,
            num_heads: 2,
            d_model: 8,
            d_k: 4,
            ff_width: 16,
            vocab_size: 12,
            max_len: 10,
            ..DecoderConfig::default()
        }
    }

    #[test]
    fn layout_is_consistent() {
        let cfg = small();
        let layout = ParamLayout::new(&cfg);
        assert_eq!(layout.names().len(), layout.len());
        assert_eq!(layout.shapes(&cfg).len(), layout.len());
        assert_eq!(layout.names()[layout.layer(1).w2], "layer1.w2");
        assert_eq!(layout.names()[layout.output_bias()], "output_bias");
    }

    #[test]
    fn init_is_seeded() {
        let a = Decoder::init(small(), 3).unwrap();
        assert_eq!(a, Decoder::init(small(), 3).unwrap());
        assert_ne!(a, Decoder::init(small(), 4).unwrap());
        assert!(a.params[a.layout().layer(0).ln1_gain].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let d = Decoder::init(small(), 1).unwrap();
        let mut buf = Vec::new();
        write_decoder(&mut buf, &d).unwrap();
        assert_eq!(read_decoder(buf.as_slice(), small()).unwrap(), d);
        let other = DecoderConfig { ff_width: 24, ..small() };
        assert!(read_decoder(buf.as_slice(), other).is_err());
    }
}
