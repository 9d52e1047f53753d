//! Toy convolutional backbone.
//!
//! A deterministic stand-in for a large pretrained encoder: a two-conv stem
//! followed by three stages, producing four feature levels at strides
//! 4/8/16/32. Plain ReLU, no normalization layers.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{ConvLayer, ConvLayerVars};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Backbone channel widths and trainability.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channels of the four feature levels (strides 4/8/16/32).
    pub channels: [usize; 4],
    /// When false the backbone is frozen during training.
    pub trainable: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: [16, 32, 64, 64],
            trainable: true,
        }
    }
}

/// The four backbone feature maps at strides 4/8/16/32.
#[derive(Debug, Clone)]
pub struct MultiLevelFeatures {
    pub x1: Tensor,
    pub x2: Tensor,
    pub x3: Tensor,
    pub x4: Tensor,
}

/// Backbone parameters. Init is a pure function of `(seed, config)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    /// Stem (two stride-2 convs), then per stage one stride-2 + one stride-1.
    pub layers: Vec<ConvLayer>,
}

pub fn init_encoder(seed: u64, config: &EncoderConfig) -> Result<EncoderWeights> {
    if config.channels.iter().any(|&c| c == 0) {
        return Err(Error::Config(format!(
            "encoder channels must be positive, got {:?}",
            config.channels
        )));
    }
    let [c1, c2, c3, c4] = config.channels;
    let mut rng = stream(seed, "encoder-init");
    let mut layers = Vec::with_capacity(8);
    layers.push(ConvLayer::init(&mut rng, 3, c1, 2));
    layers.push(ConvLayer::init(&mut rng, c1, c1, 2));
    for (cin, cout) in [(c1, c2), (c2, c3), (c3, c4)] {
        layers.push(ConvLayer::init(&mut rng, cin, cout, 2));
        layers.push(ConvLayer::init(&mut rng, cout, cout, 1));
    }
    Ok(EncoderWeights {
        config: config.clone(),
        layers,
    })
}

/// Recorded twin of the encoder.
pub struct EncoderVars<'t> {
    layers: Vec<ConvLayerVars<'t>>,
}

impl EncoderWeights {
    pub fn lift<'t>(
        &self,
        tape: &'t Tape,
        trainable: bool,
        leaves: &mut Vec<Var<'t>>,
    ) -> EncoderVars<'t> {
        EncoderVars {
            layers: self
                .layers
                .iter()
                .map(|l| l.lift(tape, trainable, leaves))
                .collect(),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("encoder.layer{i}.weight"), &l.weight));
            out.push((format!("encoder.layer{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("encoder.layer{i}.weight"), &mut l.weight));
            out.push((format!("encoder.layer{i}.bias"), &mut l.bias));
        }
        out
    }
}

fn check_dims(image_shape: &[usize]) -> Result<()> {
    if image_shape.len() != 3 || image_shape[0] != 3 {
        return Err(Error::shape(format!(
            "encode: 3×H×W image required, got {image_shape:?}"
        )));
    }
    let (h, w) = (image_shape[1], image_shape[2]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!(
            "encode: dims must be divisible by 32, got {h}×{w}"
        )));
    }
    Ok(())
}

/// Recorded forward pass through the backbone.
pub fn encode_vars<'t>(enc: &EncoderVars<'t>, image: Var<'t>) -> Result<MultiLevelFeatureVars<'t>> {
    check_dims(&image.shape())?;
    let mut feats = Vec::with_capacity(4);
    let mut x = image;
    for (i, layer) in enc.layers.iter().enumerate() {
        x = layer.forward(x)?.relu();
        // levels fall after the stem (layer 1) and after each stage's second conv
        if i >= 1 && i % 2 == 1 {
            feats.push(x);
        }
    }
    Ok(MultiLevelFeatureVars {
        x1: feats[0],
        x2: feats[1],
        x3: feats[2],
        x4: feats[3],
    })
}

#[derive(Clone, Copy)]
pub struct MultiLevelFeatureVars<'t> {
    pub x1: Var<'t>,
    pub x2: Var<'t>,
    pub x3: Var<'t>,
    pub x4: Var<'t>,
}

impl<'t> MultiLevelFeatureVars<'t> {
    pub fn values(&self) -> MultiLevelFeatures {
        MultiLevelFeatures {
            x1: self.x1.value(),
            x2: self.x2.value(),
            x3: self.x3.value(),
            x4: self.x4.value(),
        }
    }
}

/// Plain forward pass producing the four feature levels.
pub fn encode(weights: &EncoderWeights, image: &Tensor) -> Result<MultiLevelFeatures> {
    let tape = Tape::new();
    let mut leaves = Vec::new();
    let enc = weights.lift(&tape, false, &mut leaves);
    let image = tape.constant(image.clone());
    Ok(encode_vars(&enc, image)?.values())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = EncoderConfig::default();
        let a = init_encoder(11, &cfg).unwrap();
        let b = init_encoder(11, &cfg).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(12, &cfg).unwrap();
        assert_ne!(a.layers[0].weight.data(), c.layers[0].weight.data());
    }

    #[test]
    fn strides_are_4_8_16_32() {
        let cfg = EncoderConfig::default();
        let weights = init_encoder(0, &cfg).unwrap();
        let image = Tensor::zeros(&[3, 64, 64]);
        let f = encode(&weights, &image).unwrap();
        assert_eq!(f.x1.shape(), &[16, 16, 16]);
        assert_eq!(f.x2.shape(), &[32, 8, 8]);
        assert_eq!(f.x3.shape(), &[64, 4, 4]);
        assert_eq!(f.x4.shape(), &[64, 2, 2]);
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_features() {
        let weights = init_encoder(1, &EncoderConfig::default()).unwrap();
        let f = encode(&weights, &Tensor::zeros(&[3, 32, 32])).unwrap();
        for level in [&f.x1, &f.x2, &f.x3, &f.x4] {
            assert!(level.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let weights = init_encoder(2, &EncoderConfig::default()).unwrap();
        let mut rng = crate::rng::stream(3, "enc-image");
        use rand::Rng;
        let image = Tensor::from_vec(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let a = encode(&weights, &image).unwrap();
        let b = encode(&weights, &image).unwrap();
        assert_eq!(a.x4.data(), b.x4.data());
        assert!(a.x1.is_finite() && a.x4.is_finite());
    }

    #[test]
    fn indivisible_dims_rejected() {
        let weights = init_encoder(0, &EncoderConfig::default()).unwrap();
        let err = encode(&weights, &Tensor::zeros(&[3, 48, 64])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
