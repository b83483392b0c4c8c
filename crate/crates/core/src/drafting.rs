//! Low-resolution drafting network: AdaIN at three encoder taps feeding a
//! skip-connected decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::extractor::{channel_stats, ChannelStats, Extractor, LayerTag, STATS_EPS};
use crate::graph::{Eager, Exec};
use crate::imagery::Image;
use crate::nn::{Conv2d, Module};
use crate::tensor::Tensor;

pub const NAMESPACE: &str = "drafting/";

/// Encoder taps modulated by AdaIN, shallow to deep.
pub const SKIP_TAPS: [LayerTag; 3] = [LayerTag::L2_1, LayerTag::L3_1, LayerTag::L4_1];

/// Replaces each channel's mean and std (per batch item) with the style's.
pub fn adain(content: &Tensor, style: &ChannelStats) -> Result<Tensor> {
    let (n, c, h, w) = content.dims4();
    if c != style.channels() {
        return Err(Error::dim(format!(
            "adain: content has {} channels, style stats have {}",
            c,
            style.channels()
        )));
    }
    let plane = h * w;
    let mut out = content.clone();
    for b in 0..n {
        let stats = channel_stats(content, b)?;
        let dst = out.item_slice_mut(b);
        for ch in 0..c {
            let scale = style.std[ch] as f64 / stats.std[ch] as f64;
            let (mc, ms) = (stats.mean[ch] as f64, style.mean[ch] as f64);
            for v in &mut dst[ch * plane..(ch + 1) * plane] {
                *v = ((*v as f64 - mc) * scale + ms) as f32;
            }
        }
    }
    Ok(out)
}

/// Style statistics at the AdaIN taps, computed once per style image.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleContext {
    pub stats: BTreeMap<LayerTag, ChannelStats>,
}

impl StyleContext {
    pub fn new(extractor: &Extractor, style: &Image) -> Result<Self> {
        let feats = extractor.extract(style, &SKIP_TAPS)?;
        let stats = feats
            .iter()
            .map(|(t, f)| Ok((*t, channel_stats(f, 0)?)))
            .collect::<Result<_>>()?;
        Ok(StyleContext { stats })
    }

    pub fn get(&self, tag: LayerTag) -> Result<&ChannelStats> {
        self.stats
            .get(&tag)
            .ok_or_else(|| Error::Parameter(format!("style context lacks tap {}", tag)))
    }

    /// Stored as `[C]` tensors `drafting/style/<tap>/mean` and `.../std`.
    pub fn export(&self, archive: &mut Archive) {
        for (tag, s) in &self.stats {
            let c = s.channels();
            for (field, v) in [("mean", &s.mean), ("std", &s.std)] {
                let t = Tensor::from_vec(&[c], v.clone()).expect("sized");
                archive
                    .tensors
                    .insert(format!("{}style/{}/{}", NAMESPACE, tag, field), t);
            }
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut stats = BTreeMap::new();
        for tag in SKIP_TAPS {
            let get = |field: &str| -> Result<Vec<f32>> {
                let key = format!("{}style/{}/{}", NAMESPACE, tag, field);
                let t = archive.tensors.get(&key).ok_or_else(|| Error::Load {
                    layer: tag.to_string(),
                    reason: format!("missing style statistics {}", key),
                })?;
                if t.shape() != [tag.channels()] || !t.all_finite() {
                    return Err(Error::Load {
                        layer: tag.to_string(),
                        reason: format!("malformed style statistics {}", key),
                    });
                }
                Ok(t.data().to_vec())
            };
            let std = get("std")?;
            if std.iter().any(|&s| s < (STATS_EPS as f32).sqrt() * 0.5) {
                return Err(Error::Load {
                    layer: tag.to_string(),
                    reason: "style std below the eps floor".into(),
                });
            }
            stats.insert(
                tag,
                ChannelStats {
                    mean: get("mean")?,
                    std,
                },
            );
        }
        Ok(StyleContext { stats })
    }
}

/// Decoder weights. Stage names follow the decoder levels 4 (deepest) to 1.
#[derive(Clone, Debug)]
pub struct DraftingNet {
    f4_res_a: Conv2d,
    f4_res_b: Conv2d,
    f4_conv: Conv2d,
    f3_res_a: Conv2d,
    f3_res_b: Conv2d,
    f3_conv: Conv2d,
    f2_conv1: Conv2d,
    f2_conv2: Conv2d,
    f1_conv1: Conv2d,
    f1_conv2: Conv2d,
}

/// `(name, in, out, kernel)` for every decoder conv, in execution order.
const LAYOUT: [(&str, usize, usize, usize); 10] = [
    ("f4_res_a", 512, 512, 3),
    ("f4_res_b", 512, 512, 1),
    ("f4_conv", 512, 256, 3),
    ("f3_res_a", 256, 256, 3),
    ("f3_res_b", 256, 256, 1),
    ("f3_conv", 256, 128, 3),
    ("f2_conv1", 128, 128, 3),
    ("f2_conv2", 128, 64, 3),
    ("f1_conv1", 64, 64, 3),
    ("f1_conv2", 64, 3, 3),
];

/// Decoder activations at the end of each stage.
#[derive(Clone, Debug)]
pub struct DraftStages<V> {
    pub f4: V,
    pub f3: V,
    pub f2: V,
    pub output: V,
}

impl DraftingNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = LAYOUT
            .iter()
            .map(|&(name, cin, cout, k)| Conv2d::kaiming(format!("{}{}", NAMESPACE, name), cin, cout, k, 1, &mut rng));
        let mut next = || convs.next().expect("layout length");
        DraftingNet {
            f4_res_a: next(),
            f4_res_b: next(),
            f4_conv: next(),
            f3_res_a: next(),
            f3_res_b: next(),
            f3_conv: next(),
            f2_conv1: next(),
            f2_conv2: next(),
            f1_conv1: next(),
            f1_conv2: next(),
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let mut convs = Vec::with_capacity(LAYOUT.len());
        for &(name, cin, cout, k) in &LAYOUT {
            convs.push(Conv2d::from_archive(
                archive,
                &format!("{}{}", NAMESPACE, name),
                [cout, cin, k, k],
                1,
            )?);
        }
        let mut it = convs.into_iter();
        let mut next = || it.next().expect("layout length");
        Ok(DraftingNet {
            f4_res_a: next(),
            f4_res_b: next(),
            f4_conv: next(),
            f3_res_a: next(),
            f3_res_b: next(),
            f3_conv: next(),
            f2_conv1: next(),
            f2_conv2: next(),
            f1_conv1: next(),
            f1_conv2: next(),
        })
    }

    /// Decodes from AdaIN-modulated encoder features `[2_1, 3_1, 4_1]`.
    pub fn forward<E: Exec>(&self, e: &mut E, skips: [&E::V; 3]) -> DraftStages<E::V> {
        let [s2, s3, s4] = skips;
        let res = |e: &mut E, x: &E::V, a: &Conv2d, b: &Conv2d| {
            let h = e.conv2d(x, a);
            let h = e.relu(&h);
            let h = e.conv2d(&h, b);
            e.add(x, &h)
        };
        let h = res(e, s4, &self.f4_res_a, &self.f4_res_b);
        let h = e.conv2d(&h, &self.f4_conv);
        let f4 = e.relu(&h);

        let h = e.upsample_nearest2(&f4);
        let h = e.add(&h, s3);
        let h = res(e, &h, &self.f3_res_a, &self.f3_res_b);
        let h = e.conv2d(&h, &self.f3_conv);
        let f3 = e.relu(&h);

        let h = e.upsample_nearest2(&f3);
        let h = e.add(&h, s2);
        let h = e.conv2d(&h, &self.f2_conv1);
        let h = e.relu(&h);
        let h = e.conv2d(&h, &self.f2_conv2);
        let f2 = e.relu(&h);

        let h = e.upsample_nearest2(&f2);
        let h = e.conv2d(&h, &self.f1_conv1);
        let h = e.relu(&h);
        let output = e.conv2d(&h, &self.f1_conv2);
        DraftStages { f4, f3, f2, output }
    }
}

impl Module for DraftingNet {
    fn layers(&self) -> Vec<&Conv2d> {
        vec![
            &self.f4_res_a,
            &self.f4_res_b,
            &self.f4_conv,
            &self.f3_res_a,
            &self.f3_res_b,
            &self.f3_conv,
            &self.f2_conv1,
            &self.f2_conv2,
            &self.f1_conv1,
            &self.f1_conv2,
        ]
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        vec![
            &mut self.f4_res_a,
            &mut self.f4_res_b,
            &mut self.f4_conv,
            &mut self.f3_res_a,
            &mut self.f3_res_b,
            &mut self.f3_conv,
            &mut self.f2_conv1,
            &mut self.f2_conv2,
            &mut self.f1_conv1,
            &mut self.f1_conv2,
        ]
    }
}

/// Encoder pass plus AdaIN at the skip taps for a batch `x` (NCHW in `[0, 1]`).
pub fn modulated_skips(extractor: &Extractor, x: &Tensor, style: &StyleContext) -> Result<[Tensor; 3]> {
    let (_, _, h, w) = x.dims4();
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::dim(format!("drafting input {}x{} is not divisible by 16", h, w)));
    }
    let mut feats = extractor.extract_tensor(x, &SKIP_TAPS)?;
    let mut take = |tag: LayerTag| -> Result<Tensor> {
        let f = feats.remove(&tag).expect("requested tap");
        adain(&f, style.get(tag)?)
    };
    Ok([take(LayerTag::L2_1)?, take(LayerTag::L3_1)?, take(LayerTag::L4_1)?])
}

/// Batched draft: NCHW content in, NCHW 3-channel draft out (unclamped).
pub fn draft_tensor(extractor: &Extractor, x: &Tensor, style: &StyleContext, net: &DraftingNet) -> Result<Tensor> {
    let skips = modulated_skips(extractor, x, style)?;
    let mut e = Eager;
    Ok(net.forward(&mut e, [&skips[0], &skips[1], &skips[2]]).output)
}

/// Stylizes a low-resolution content image; dims must be divisible by 16.
pub fn draft_forward(content: &Image, style: &StyleContext, net: &DraftingNet, extractor: &Extractor) -> Result<Image> {
    Image::from_tensor(&draft_tensor(extractor, &content.to_tensor(), style, net)?, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::VggVariant;

    #[test]
    fn adain_examples() {
        let c = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = ChannelStats::from_planes(&[0.0, 2.0, 4.0], 1).unwrap();
        let out = adain(&c, &s).unwrap();
        for (o, want) in out.data().iter().zip([0.0, 2.0, 4.0]) {
            assert!((o - want).abs() < 1e-4, "{:?}", out.data());
        }
        // Fixed point when content supplies its own statistics.
        let own = channel_stats(&c, 0).unwrap();
        assert!(adain(&c, &own).unwrap().max_abs_diff(&c) < 1e-5);
        let wrong = ChannelStats::from_planes(&[0.0; 4], 2).unwrap();
        assert!(matches!(adain(&c, &wrong), Err(Error::Dimension(_))));
    }

    #[test]
    fn adain_is_idempotent() {
        let c = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|v| (v * v % 7) as f32).collect()).unwrap();
        let s = ChannelStats {
            mean: vec![0.3, -1.0],
            std: vec![2.0, 0.5],
        };
        let once = adain(&c, &s).unwrap();
        assert!(adain(&once, &s).unwrap().max_abs_diff(&once) < 1e-4);
    }

    #[test]
    fn stage_shapes_and_determinism() {
        let ex = Extractor::random(VggVariant::Vgg19, 1);
        let style = Image::from_fn(64, 64, |c, y, x| ((c + y * 3 + x) % 11) as f32 / 10.0);
        let ctx = StyleContext::new(&ex, &style).unwrap();
        let net = DraftingNet::new(2);
        let content = Image::from_fn(32, 48, |c, y, x| ((c * 5 + y + 2 * x) % 13) as f32 / 12.0);
        let skips = modulated_skips(&ex, &content.to_tensor(), &ctx).unwrap();
        let st = net.forward(&mut Eager, [&skips[0], &skips[1], &skips[2]]);
        assert_eq!(st.f4.shape(), [1, 256, 4, 6]);
        assert_eq!(st.f3.shape(), [1, 128, 8, 12]);
        assert_eq!(st.f2.shape(), [1, 64, 16, 24]);
        assert_eq!(st.output.shape(), [1, 3, 32, 48]);
        let a = draft_forward(&content, &ctx, &net, &ex).unwrap();
        let b = draft_forward(&content, &ctx, &net, &ex).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            draft_forward(&Image::filled(24, 32, 0.5), &ctx, &net, &ex),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn archive_round_trip() {
        let net = DraftingNet::new(3);
        let mut a = Archive::default();
        net.export(&mut a);
        let back = DraftingNet::from_archive(&a).unwrap();
        assert_eq!(net.fingerprint(), back.fingerprint());
        a.tensors.remove("drafting/f3_conv.bias");
        assert!(matches!(DraftingNet::from_archive(&a), Err(Error::Load { .. })));
    }
}
