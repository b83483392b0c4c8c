//! Frozen VGG feature extractor.
//!
//! The network is `ImageNet normalisation -> 1x1 conv (3->3) -> VGG conv
//! blocks` with a ReLU after every 3x3 conv and 2x2 max pooling between
//! blocks, stopping at conv5_1. Taps are the post-ReLU activations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{Eager, Exec};
use crate::imagery::Image;
use crate::nn::{Conv2d, Module};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Variance floor in channel statistics.
pub const STATS_EPS: f64 = 1e-5;

/// Name prefix of extractor parameters inside a model bundle.
pub const NAMESPACE: &str = "extractor/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerTag {
    L1_1,
    L1_2,
    L2_1,
    L2_2,
    L3_1,
    L3_2,
    L4_1,
    L5_1,
}

impl LayerTag {
    pub const ALL: [LayerTag; 8] = [
        LayerTag::L1_1,
        LayerTag::L1_2,
        LayerTag::L2_1,
        LayerTag::L2_2,
        LayerTag::L3_1,
        LayerTag::L3_2,
        LayerTag::L4_1,
        LayerTag::L5_1,
    ];

    /// `(block, index within block)`, both 1-based.
    pub fn position(self) -> (usize, usize) {
        match self {
            LayerTag::L1_1 => (1, 1),
            LayerTag::L1_2 => (1, 2),
            LayerTag::L2_1 => (2, 1),
            LayerTag::L2_2 => (2, 2),
            LayerTag::L3_1 => (3, 1),
            LayerTag::L3_2 => (3, 2),
            LayerTag::L4_1 => (4, 1),
            LayerTag::L5_1 => (5, 1),
        }
    }

    pub fn block(self) -> usize {
        self.position().0
    }

    pub fn channels(self) -> usize {
        BLOCK_WIDTH[self.block() - 1]
    }

    /// Required divisor of the input size to reach this tap.
    pub fn stride(self) -> usize {
        1 << (self.block() - 1)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerTag::L1_1 => "1_1",
            LayerTag::L1_2 => "1_2",
            LayerTag::L2_1 => "2_1",
            LayerTag::L2_2 => "2_2",
            LayerTag::L3_1 => "3_1",
            LayerTag::L3_2 => "3_2",
            LayerTag::L4_1 => "4_1",
            LayerTag::L5_1 => "5_1",
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LayerTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown layer tag {:?}", s)))
    }
}

const BLOCK_WIDTH: [usize; 5] = [64, 128, 256, 512, 512];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VggVariant {
    Vgg16,
    #[default]
    Vgg19,
}

impl VggVariant {
    /// Convolutions per block up to and including conv5_1.
    fn block_depths(self) -> [usize; 5] {
        match self {
            VggVariant::Vgg16 => [2, 2, 3, 3, 1],
            VggVariant::Vgg19 => [2, 2, 4, 4, 1],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VggVariant::Vgg16 => "vgg16",
            VggVariant::Vgg19 => "vgg19",
        }
    }
}

impl FromStr for VggVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(VggVariant::Vgg16),
            "vgg19" => Ok(VggVariant::Vgg19),
            other => Err(Error::Parameter(format!("unknown extractor variant {:?}", other))),
        }
    }
}

/// Feature maps keyed by tap; each value is an NCHW tensor.
pub type FeatureSet = BTreeMap<LayerTag, Tensor>;

#[derive(Debug, Clone)]
struct VggConv {
    block: usize,
    index: usize,
    conv: Conv2d,
}

/// Immutable after construction; no API hands out mutable parameters.
#[derive(Debug, Clone)]
pub struct Extractor {
    variant: VggVariant,
    pre: Conv2d,
    convs: Vec<VggConv>,
}

fn archive_key(block: usize, index: usize) -> String {
    format!("conv{}_{}", block, index)
}

impl Extractor {
    /// Randomly initialised extractor (Kaiming convs, identity 1x1 pre-conv).
    /// Useful for tests and for pipelines run without pretrained weights.
    pub fn random(variant: VggVariant, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pre = Conv2d::zeros(format!("{}conv0", NAMESPACE), 3, 3, 1, 1);
        {
            let w = std::sync::Arc::make_mut(&mut pre.weight);
            for c in 0..3 {
                w.data_mut()[c * 3 + c] = 1.0;
            }
        }
        let mut convs = Vec::new();
        let mut cin = 3;
        for (bi, &depth) in variant.block_depths().iter().enumerate() {
            for idx in 1..=depth {
                let cout = BLOCK_WIDTH[bi];
                let conv = Conv2d::kaiming(
                    format!("{}{}", NAMESPACE, archive_key(bi + 1, idx)),
                    cin,
                    cout,
                    3,
                    1,
                    &mut rng,
                );
                convs.push(VggConv {
                    block: bi + 1,
                    index: idx,
                    conv,
                });
                cin = cout;
            }
        }
        Extractor { variant, pre, convs }
    }

    pub fn variant(&self) -> VggVariant {
        self.variant
    }

    /// Reads a standalone weights archive (keys `conv0.*`, `conv1_1.*`, ...).
    /// The variant comes from the `variant` metadata entry, or is inferred
    /// from the presence of `conv3_4`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let archive = Archive::load(path)?;
        Self::from_archive(&archive, "")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut a = Archive::default();
        for (k, t) in self.named_tensors() {
            a.tensors.insert(k.trim_start_matches(NAMESPACE).to_string(), t.clone());
        }
        a.metadata.insert("format".into(), "vgg-extractor".into());
        a.metadata.insert("variant".into(), self.variant.name().into());
        a.save(path)
    }

    /// Builds from tensors stored under `prefix` (empty for standalone archives,
    /// [`NAMESPACE`] inside bundles).
    pub fn from_archive(archive: &Archive, prefix: &str) -> Result<Self> {
        let variant = match archive.metadata.get("variant") {
            Some(v) => v.parse()?,
            None if archive.tensors.contains_key(&format!("{}conv3_4.weight", prefix)) => VggVariant::Vgg19,
            None => VggVariant::Vgg16,
        };
        Self::from_archive_as(archive, prefix, variant)
    }

    /// Like [`Extractor::from_archive`] with the variant given explicitly.
    pub fn from_archive_as(archive: &Archive, prefix: &str, variant: VggVariant) -> Result<Self> {
        let fetch = |key: &str, layer: &str, shape: [usize; 4]| -> Result<Conv2d> {
            let w = archive
                .tensors
                .get(&format!("{}{}.weight", prefix, key))
                .ok_or_else(|| Error::Load {
                    layer: layer.to_string(),
                    reason: format!("missing tensor {}.weight", key),
                })?;
            let b = archive
                .tensors
                .get(&format!("{}{}.bias", prefix, key))
                .ok_or_else(|| Error::Load {
                    layer: layer.to_string(),
                    reason: format!("missing tensor {}.bias", key),
                })?;
            if w.shape() != shape {
                return Err(Error::Load {
                    layer: layer.to_string(),
                    reason: format!("weight shape mismatch: expected {:?}, found {:?}", shape, w.shape()),
                });
            }
            if b.shape() != [shape[0]] {
                return Err(Error::Load {
                    layer: layer.to_string(),
                    reason: format!("bias shape mismatch: expected [{}], found {:?}", shape[0], b.shape()),
                });
            }
            if !w.all_finite() || !b.all_finite() {
                return Err(Error::Load {
                    layer: layer.to_string(),
                    reason: "non-finite values".into(),
                });
            }
            Ok(Conv2d {
                name: format!("{}{}", NAMESPACE, key),
                weight: std::sync::Arc::new(w.clone()),
                bias: std::sync::Arc::new(b.clone()),
                stride: 1,
            })
        };
        let pre = fetch("conv0", "0 (1x1 input conv)", [3, 3, 1, 1])?;
        let mut convs = Vec::new();
        let mut cin = 3;
        for (bi, &depth) in variant.block_depths().iter().enumerate() {
            for idx in 1..=depth {
                let cout = BLOCK_WIDTH[bi];
                let layer = format!("{}_{}", bi + 1, idx);
                let conv = fetch(&archive_key(bi + 1, idx), &layer, [cout, cin, 3, 3])?;
                convs.push(VggConv {
                    block: bi + 1,
                    index: idx,
                    conv,
                });
                cin = cout;
            }
        }
        Ok(Extractor { variant, pre, convs })
    }

    /// Runs the network on `x` (NCHW, values in `[0, 1]`) up to the deepest
    /// requested tap and returns the requested post-ReLU activations.
    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::V, taps: &[LayerTag]) -> Result<BTreeMap<LayerTag, E::V>>
    where
        E::V: Clone,
    {
        let deepest = *taps
            .iter()
            .max()
            .ok_or_else(|| Error::Parameter("no feature taps requested".into()))?;
        let (_, c, h, w) = e.value(x).dims4();
        if c != 3 {
            return Err(Error::dim(format!("extractor expects 3 input channels, got {}", c)));
        }
        let m = deepest.stride();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::dim(format!(
                "{}x{} input cannot reach tap {} (needs multiples of {})",
                h, w, deepest, m
            )));
        }
        let scale: Vec<f32> = IMAGENET_STD.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f32> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| -m / s).collect();
        let mut h = e.affine_channels(x, &scale, &shift);
        h = e.conv2d(&h, &self.pre);
        let mut out = BTreeMap::new();
        let mut block = 1;
        for vc in &self.convs {
            if vc.block != block {
                h = e.max_pool2(&h);
                block = vc.block;
            }
            h = e.conv2d(&h, &vc.conv);
            h = e.relu(&h);
            if let Some(tag) = taps.iter().find(|t| t.position() == (vc.block, vc.index)) {
                out.insert(*tag, h.clone());
                if *tag == deepest {
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Eager feature extraction for a batch tensor.
    pub fn extract_tensor(&self, x: &Tensor, taps: &[LayerTag]) -> Result<FeatureSet> {
        self.forward(&mut Eager, x, taps)
    }

    pub fn extract(&self, img: &Image, taps: &[LayerTag]) -> Result<FeatureSet> {
        self.extract_tensor(&img.to_tensor(), taps)
    }
}

impl Module for Extractor {
    fn layers(&self) -> Vec<&Conv2d> {
        std::iter::once(&self.pre)
            .chain(self.convs.iter().map(|c| &c.conv))
            .collect()
    }

    /// Only crate-internal serialization paths touch this; the extractor is
    /// never handed to an optimizer.
    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        std::iter::once(&mut self.pre)
            .chain(self.convs.iter_mut().map(|c| &mut c.conv))
            .collect()
    }
}

/// Per-channel spatial mean and `sqrt(variance + eps)` of one feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Statistics of a `channels x positions` row-major slice.
    pub fn from_planes(data: &[f32], channels: usize) -> Result<Self> {
        if channels == 0 || data.is_empty() || data.len() % channels != 0 {
            return Err(Error::dim(format!(
                "{} values do not split into {} non-empty channels",
                data.len(),
                channels
            )));
        }
        let n = data.len() / channels;
        let mut mean = Vec::with_capacity(channels);
        let mut std = Vec::with_capacity(channels);
        for plane in data.chunks_exact(n) {
            let m = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = plane.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            mean.push(m as f32);
            std.push((var + STATS_EPS).sqrt() as f32);
        }
        Ok(ChannelStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics of batch item `b` of an NCHW feature map.
pub fn channel_stats(f: &Tensor, b: usize) -> Result<ChannelStats> {
    let (n, c, _, _) = f.dims4();
    if b >= n {
        return Err(Error::dim(format!("batch item {} of {}", b, n)));
    }
    ChannelStats::from_planes(f.item_slice(b), c)
}
