//! Residual revision networks and the full pyramid stylization path.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::drafting::{draft_tensor, DraftingNet, StyleContext};
use crate::error::{Error, Result};
use crate::extractor::Extractor;
use crate::graph::{Eager, Exec};
use crate::imagery::{decompose, upsample, Image};
use crate::nn::{Conv2d, Module};
use crate::ops;
use crate::tensor::Tensor;

/// Channel order of the revision input: content residual, then upsampled
/// stylization.
pub const CONCAT_ORDER: &str = "residual,stylized";

pub fn namespace(level: usize) -> String {
    format!("revision/{}/", level)
}

/// `(name, in, out, kernel, stride)` in execution order.
const LAYOUT: [(&str, usize, usize, usize, usize); 6] = [
    ("r1_conv1", 6, 64, 3, 1),
    ("r1_conv2", 64, 64, 3, 2),
    ("r2_res_a", 64, 64, 3, 1),
    ("r2_res_b", 64, 64, 1, 1),
    ("r3_conv1", 64, 64, 3, 1),
    ("r3_conv2", 64, 3, 3, 1),
];

/// One pyramid level's residual generator. Level 1 runs at twice the draft
/// resolution, level 2 at four times, and so on.
#[derive(Clone, Debug)]
pub struct RevisionNet {
    level: usize,
    convs: Vec<Conv2d>,
}

/// Intermediate activations of one revision pass.
#[derive(Clone, Debug)]
pub struct RevisionStages<V> {
    pub r1: V,
    pub r2: V,
    pub output: V,
}

impl RevisionNet {
    /// Kaiming init except the last conv, which starts at zero so the
    /// untrained network emits a zero residual.
    pub fn new(level: usize, seed: u64) -> Self {
        assert!(level >= 1, "revision levels start at 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ns = namespace(level);
        let convs = LAYOUT
            .iter()
            .map(|&(name, cin, cout, k, s)| {
                let full = format!("{}{}", ns, name);
                if name == "r3_conv2" {
                    Conv2d::zeros(full, cin, cout, k, s)
                } else {
                    Conv2d::kaiming(full, cin, cout, k, s, &mut rng)
                }
            })
            .collect();
        RevisionNet { level, convs }
    }

    pub fn from_archive(archive: &Archive, level: usize) -> Result<Self> {
        let ns = namespace(level);
        let convs = LAYOUT
            .iter()
            .map(|&(name, cin, cout, k, s)| {
                Conv2d::from_archive(archive, &format!("{}{}", ns, name), [cout, cin, k, k], s)
            })
            .collect::<Result<_>>()?;
        Ok(RevisionNet { level, convs })
    }

    pub fn level(&self) -> usize {
        self.level
    }

    /// `x` is the 6-channel concatenation `[residual ; stylized_up]`.
    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::V) -> RevisionStages<E::V> {
        let c = &self.convs;
        let h = e.conv2d(x, &c[0]);
        let h = e.relu(&h);
        let h = e.conv2d(&h, &c[1]);
        let r1 = e.relu(&h);

        let h = e.conv2d(&r1, &c[2]);
        let h = e.relu(&h);
        let h = e.conv2d(&h, &c[3]);
        let r2 = e.add(&r1, &h);

        let h = e.upsample_nearest2(&r2);
        let h = e.conv2d(&h, &c[4]);
        let h = e.relu(&h);
        let output = e.conv2d(&h, &c[5]);
        RevisionStages { r1, r2, output }
    }
}

impl Module for RevisionNet {
    fn layers(&self) -> Vec<&Conv2d> {
        self.convs.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        self.convs.iter_mut().collect()
    }
}

fn check_pair(residual: (usize, usize), up: (usize, usize)) -> Result<()> {
    if residual != up {
        return Err(Error::dim(format!(
            "residual {:?} and stylized {:?} differ in size",
            residual, up
        )));
    }
    if residual.0 % 2 != 0 || residual.1 % 2 != 0 {
        return Err(Error::dim(format!("revision input {:?} must have even dims", residual)));
    }
    Ok(())
}

/// Emits the stylized residual `r_cs` for one level.
pub fn revise_forward(residual: &Image, stylized_up: &Image, net: &RevisionNet) -> Result<Image> {
    check_pair(residual.dims(), stylized_up.dims())?;
    let x = ops::concat_channels(&residual.to_tensor(), &stylized_up.to_tensor());
    Image::from_tensor(&net.forward(&mut Eager, &x).output, 0)
}

/// Batched [`revise_forward`] on NCHW tensors.
pub fn revise_tensor(residual: &Tensor, stylized_up: &Tensor, net: &RevisionNet) -> Result<Tensor> {
    let (_, _, h, w) = residual.dims4();
    let (_, _, h2, w2) = stylized_up.dims4();
    check_pair((h, w), (h2, w2))?;
    Ok(net
        .forward(&mut Eager, &ops::concat_channels(residual, stylized_up))
        .output)
}

/// Everything needed for inference: frozen extractor, style statistics,
/// drafting decoder and zero or more revision levels (level `k` at index
/// `k - 1`).
#[derive(Clone, Debug)]
pub struct StylizationStack {
    pub extractor: Arc<Extractor>,
    pub style: StyleContext,
    pub drafting: DraftingNet,
    pub revisions: Vec<RevisionNet>,
}

/// Result of a pyramid pass.
#[derive(Clone, Debug)]
pub struct Stylization {
    /// Unclamped final image.
    pub image: Image,
    /// Unclamped output of every stage, draft first.
    pub stages: Vec<Image>,
    /// Residual emitted by each revision level.
    pub residuals: Vec<Image>,
    /// Wall time per stage (`"pyramid"`, `"draft"`, `"revision/<k>"`).
    pub timings: Vec<(String, Duration)>,
}

impl Stylization {
    /// Final image clamped to `[0, 1]` for export.
    pub fn clamped(&self) -> Image {
        self.image.clamped()
    }
}

impl StylizationStack {
    pub fn levels(&self) -> usize {
        self.revisions.len()
    }

    /// Side-length multiple required for `levels` revision levels.
    pub fn size_multiple(levels: usize) -> usize {
        16 << levels
    }

    /// Draft at the pyramid base, then revise through `levels` levels.
    pub fn stylize(&self, content: &Image, levels: usize) -> Result<Stylization> {
        if levels > self.revisions.len() {
            return Err(Error::Config(format!(
                "requested {} revision levels but the stack has {} (available: 0..={})",
                levels,
                self.revisions.len(),
                self.revisions.len()
            )));
        }
        let m = Self::size_multiple(levels);
        let (h, w) = content.dims();
        if h % m != 0 || w % m != 0 {
            return Err(Error::dim(format!(
                "content {}x{} must be divisible by {} for {} revision levels",
                h, w, m, levels
            )));
        }
        let mut timings = Vec::with_capacity(levels + 2);
        let t = Instant::now();
        let pyr = decompose(content, levels + 1)?;
        timings.push(("pyramid".to_string(), t.elapsed()));

        let t = Instant::now();
        let draft = Image::from_tensor(
            &draft_tensor(&self.extractor, &pyr.base.to_tensor(), &self.style, &self.drafting)?,
            0,
        )?;
        timings.push(("draft".to_string(), t.elapsed()));

        let mut stages = vec![draft];
        let mut residuals = Vec::with_capacity(levels);
        for (net, residual) in self.revisions.iter().zip(&pyr.residuals).take(levels) {
            let t = Instant::now();
            let up = upsample(stages.last().expect("draft"), 2)?;
            let r = revise_forward(residual, &up, net)?;
            let next = up.add(&r)?;
            residuals.push(r);
            stages.push(next);
            timings.push((format!("revision/{}", net.level()), t.elapsed()));
        }
        Ok(Stylization {
            image: stages.last().expect("draft").clone(),
            stages,
            residuals,
            timings,
        })
    }
}

/// Runs every level of `stack` on `content`.
pub fn stylize_pyramid(content: &Image, stack: &StylizationStack) -> Result<Stylization> {
    stack.stylize(content, stack.levels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::VggVariant;

    fn stack(levels: usize) -> StylizationStack {
        let ex = Arc::new(Extractor::random(VggVariant::Vgg16, 4));
        let style = Image::from_fn(32, 32, |c, y, x| ((c + y + 3 * x) % 7) as f32 / 6.0);
        StylizationStack {
            style: StyleContext::new(&ex, &style).unwrap(),
            extractor: ex,
            drafting: DraftingNet::new(5),
            revisions: (1..=levels).map(|k| RevisionNet::new(k, 10 + k as u64)).collect(),
        }
    }

    fn content(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| ((c * 7 + y * 5 + x * 3) % 17) as f32 / 16.0)
    }

    #[test]
    fn revision_shapes_and_identity_init() {
        let net = RevisionNet::new(1, 0);
        let x = ops::concat_channels(&content(32, 16).to_tensor(), &content(32, 16).to_tensor());
        let st = net.forward(&mut Eager, &x);
        assert_eq!(st.r1.shape(), [1, 64, 16, 8]);
        assert_eq!(st.output.shape(), [1, 3, 32, 16]);
        assert!(st.output.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            revise_forward(&content(32, 16), &content(16, 16), &net),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_levels_is_the_draft() {
        let s = stack(0);
        let c = content(32, 32);
        let out = stylize_pyramid(&c, &s).unwrap();
        let d = draft_tensor(&s.extractor, &c.to_tensor(), &s.style, &s.drafting).unwrap();
        assert_eq!(out.image, Image::from_tensor(&d, 0).unwrap());
    }

    #[test]
    fn untrained_levels_pass_the_draft_through() {
        let s = stack(2);
        let out = s.stylize(&content(64, 64), 2).unwrap();
        let dims: Vec<_> = out.stages.iter().map(|i| i.dims()).collect();
        assert_eq!(dims, [(16, 16), (32, 32), (64, 64)]);
        let up = upsample(&upsample(&out.stages[0], 2).unwrap(), 2).unwrap();
        assert_eq!(out.image.max_abs_diff(&up), 0.0);
        assert!(matches!(s.stylize(&content(64, 64), 3), Err(Error::Config(_))));
        assert!(matches!(s.stylize(&content(48, 64), 2), Err(Error::Dimension(_))));
    }
}
