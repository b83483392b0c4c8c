//! Two-stage training: the drafting decoder first, then each revision level
//! with everything below it frozen.

use std::collections::VecDeque;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{file_sha256, Manifest, ModelBundle, FORMAT_VERSION};
use crate::data::iterate_content;
use crate::discriminator::Discriminator;
use crate::drafting::{self, adain, DraftingNet, StyleContext, SKIP_TAPS};
use crate::error::{Error, Result};
use crate::extractor::{Extractor, FeatureSet, LayerTag, VggVariant};
use crate::graph::{Eager, Exec, Graph, Var};
use crate::imagery::{decompose, upsample, Image};
use crate::losses::{lsgan_term, LayerSchedule, LossBreakdown, LossWeights, Objective};
use crate::ops;
use crate::optim::{Adam, AdamConfig};
use crate::revision::{self, RevisionNet, CONCAT_ORDER};
use crate::tensor::Tensor;

/// Resolution of the drafting stage unless configured otherwise.
pub const DRAFT_RESOLUTION: usize = 128;

/// Checkpoints retained per run.
pub const KEEP_CHECKPOINTS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Stage {
    Draft,
    /// Revision level `k >= 1`.
    Revision(usize),
}

impl Stage {
    /// Number of pyramid levels above the base.
    pub fn level(self) -> usize {
        match self {
            Stage::Draft => 0,
            Stage::Revision(k) => k,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Draft => f.write_str("draft"),
            Stage::Revision(k) => write!(f, "revision-{}", k),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "draft" {
            return Ok(Stage::Draft);
        }
        s.strip_prefix("revision-")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(Stage::Revision)
            .ok_or_else(|| Error::Config(format!("unknown stage {:?} (expected draft or revision-<k>)", s)))
    }
}

impl TryFrom<String> for Stage {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Stage> for String {
    fn from(s: Stage) -> String {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub content_dir: PathBuf,
    pub style_image: PathBuf,
    pub stage: Stage,
    /// Stage resolution; defaults to `128 * 2^level`.
    pub resolution: Option<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Pretrained extractor archive for the drafting stage. Without one a
    /// randomly initialised extractor is used.
    pub extractor: Option<PathBuf>,
    pub extractor_variant: VggVariant,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            content_dir: PathBuf::new(),
            style_image: PathBuf::new(),
            stage: Stage::Draft,
            resolution: None,
            iterations: 30_000,
            batch_size: 5,
            learning_rate: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            checkpoint_dir: None,
            log_path: None,
            extractor: None,
            extractor_variant: VggVariant::Vgg19,
        }
    }
}

impl TrainingConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn resolution(&self) -> usize {
        self.resolution.unwrap_or(DRAFT_RESOLUTION << self.stage.level())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.content_dir.as_os_str().is_empty() {
            return Err(Error::Config("content_dir is required".into()));
        }
        if self.style_image.as_os_str().is_empty() {
            return Err(Error::Config("style_image is required".into()));
        }
        let res = self.resolution();
        let m = 16 << self.stage.level();
        if res == 0 || res % m != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be a positive multiple of {} for stage {}",
                res, m, self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.adam().validate()?;
        self.weights.validate()
    }

    fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

/// One `step=<n> component=<name> value=<float>` line.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: usize,
    pub component: String,
    pub value: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} component={} value={}",
            self.step, self.component, self.value
        )
    }
}

impl FromStr for LogRecord {
    type Err = Error;
    fn from_str(line: &str) -> Result<Self> {
        let bad = || Error::Data(format!("malformed log line {:?}", line));
        let mut parts = line.split_whitespace();
        let mut field = |name: &str| -> Result<String> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(name))
                .and_then(|p| p.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(bad)
        };
        let step = field("step")?.parse().map_err(|_| bad())?;
        let component = field("component")?;
        let value = field("value")?.parse().map_err(|_| bad())?;
        Ok(LogRecord { step, component, value })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LogRecord>,
}

impl LossLog {
    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_>>()?;
        Ok(LossLog { records })
    }

    pub fn values(&self, component: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.component == component)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// Mean of `component` over the given steps, if any were logged.
    pub fn mean(&self, component: &str, steps: RangeInclusive<usize>) -> Option<f64> {
        let v: Vec<f64> = self
            .values(component)
            .into_iter()
            .filter(|(s, _)| steps.contains(s))
            .map(|(_, v)| v)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl fmt::Display for LossLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            writeln!(f, "{}", r)?;
        }
        Ok(())
    }
}

/// A finished run: the trained bundle and every logged record.
#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub bundle: ModelBundle,
    pub log: LossLog,
}

struct Recorder {
    log: LossLog,
    file: Option<BufWriter<File>>,
}

impl Recorder {
    fn new(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?)),
            None => None,
        };
        Ok(Recorder {
            log: LossLog::default(),
            file,
        })
    }

    /// Logs every component of one step, failing on the first non-finite one.
    fn step(&mut self, step: usize, components: &[(&str, f64)], path: Option<&Path>) -> Result<()> {
        for &(name, value) in components {
            let rec = LogRecord {
                step,
                component: name.to_string(),
                value,
            };
            log::debug!("{}", rec);
            if let Some(f) = self.file.as_mut() {
                writeln!(f, "{}", rec).map_err(|e| Error::io(path.unwrap_or(Path::new("log")), e))?;
            }
            self.log.records.push(rec);
        }
        if let Some(f) = self.file.as_mut() {
            f.flush().map_err(|e| Error::io(path.unwrap_or(Path::new("log")), e))?;
        }
        if let Some(&(name, _)) = components.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                step,
                component: name.to_string(),
            });
        }
        Ok(())
    }
}

struct Checkpointer {
    dir: Option<PathBuf>,
    every: usize,
    stage: Stage,
    kept: VecDeque<PathBuf>,
}

impl Checkpointer {
    fn new(cfg: &TrainingConfig) -> Result<Self> {
        if let Some(d) = &cfg.checkpoint_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Checkpointer {
            dir: cfg.checkpoint_dir.clone(),
            every: cfg.checkpoint_every,
            stage: cfg.stage,
            kept: VecDeque::new(),
        })
    }

    fn maybe_save(&mut self, step: usize, bundle: impl FnOnce() -> ModelBundle) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        if self.every == 0 || step % self.every != 0 {
            return Ok(());
        }
        let path = dir.join(format!("{}-step{:07}.bundle", self.stage, step));
        bundle().save(&path)?;
        log::info!("checkpoint {}", path.display());
        self.kept.push_back(path);
        while self.kept.len() > KEEP_CHECKPOINTS {
            let old = self.kept.pop_front().expect("non-empty");
            if let Err(e) = std::fs::remove_file(&old) {
                log::warn!("could not remove old checkpoint {}: {}", old.display(), e);
            }
        }
        Ok(())
    }
}

fn sub_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rand::Rng::gen(&mut rng)
}

const SALT_DRAFTING: u64 = 1;
const SALT_REVISION: u64 = 2;
const SALT_DISCRIMINATOR: u64 = 3;
const SALT_LOSS: u64 = 4;
const SALT_DATA: u64 = 5;
const SALT_EXTRACTOR: u64 = 6;

fn load_style(cfg: &TrainingConfig, resolution: usize) -> Result<(Image, String)> {
    let img = Image::load(&cfg.style_image)?;
    Ok((img.resize(resolution, resolution), file_sha256(&cfg.style_image)?))
}

/// Adds one graph scalar per loss layer and returns them with weight 1.
fn loss_terms(
    g: &mut Graph,
    objective: &Objective,
    content: &FeatureSet,
    feats: &std::collections::BTreeMap<LayerTag, Var>,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<(Var, f64)>)> {
    let eval = {
        let refs = feats.iter().map(|(k, v)| (*k, g.value(v))).collect();
        objective.evaluate(content, &refs, true, rng)?
    };
    let mut terms = Vec::with_capacity(eval.grads.len());
    for (tag, grad) in eval.grads {
        let s = g.scalar(feats[&tag], eval.layer_totals[&tag], grad);
        terms.push((s, 1.0));
    }
    Ok((eval.breakdown, terms))
}

fn components(b: &LossBreakdown) -> Vec<(&'static str, f64)> {
    b.components().to_vec()
}

/// Trains the drafting decoder from `cfg`, loading or creating the extractor.
pub fn train_drafting(cfg: &TrainingConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let extractor = match &cfg.extractor {
        Some(p) => Extractor::load(p)?,
        None => {
            log::warn!(
                "no extractor weights given; using a randomly initialised {}",
                cfg.extractor_variant.name()
            );
            Extractor::random(cfg.extractor_variant, sub_seed(cfg.seed, SALT_EXTRACTOR))
        }
    };
    train_drafting_with(cfg, Arc::new(extractor))
}

/// Trains the drafting decoder against a given frozen extractor.
pub fn train_drafting_with(cfg: &TrainingConfig, extractor: Arc<Extractor>) -> Result<TrainingRun> {
    cfg.validate()?;
    if cfg.stage != Stage::Draft {
        return Err(Error::Config(format!(
            "train_drafting needs stage draft, got {}",
            cfg.stage
        )));
    }
    let res = cfg.resolution();
    let (style, style_sha) = load_style(cfg, res)?;
    let style_ctx = StyleContext::new(&extractor, &style)?;
    let objective = Objective::new(&extractor, &style, cfg.weights, LayerSchedule::default())?;
    let taps = objective.schedule.taps();
    let mut net = DraftingNet::new(sub_seed(cfg.seed, SALT_DRAFTING));
    let mut adam = Adam::new(cfg.adam());
    let mut rec = Recorder::new(cfg.log_path.as_deref())?;
    let mut ckpt = Checkpointer::new(cfg)?;
    let mut loss_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SALT_LOSS));
    let make_bundle = |net: &DraftingNet| ModelBundle {
        manifest: Manifest {
            format_version: FORMAT_VERSION,
            style_sha256: style_sha.clone(),
            stage_resolutions: vec![res],
            concat_order: CONCAT_ORDER.into(),
            extractor_variant: extractor.variant(),
            adam: cfg.adam(),
            config_snapshots: vec![cfg.snapshot()],
            payload_sha256: String::new(),
        },
        extractor: Arc::clone(&extractor),
        style: style_ctx.clone(),
        drafting: net.clone(),
        revisions: Vec::new(),
        discriminators: Default::default(),
    };

    if cfg.iterations > 0 {
        let mut stream = iterate_content(&cfg.content_dir, res, cfg.batch_size, sub_seed(cfg.seed, SALT_DATA))?;
        for step in 1..=cfg.iterations {
            let x = Image::batch_to_tensor(&stream.next_batch()?)?;
            let content = extractor.extract_tensor(&x, &taps)?;
            let mut g = Graph::new(&[drafting::NAMESPACE]);
            let mut skips = Vec::with_capacity(3);
            for tag in SKIP_TAPS {
                let s = adain(&content[&tag], style_ctx.get(tag)?)?;
                skips.push(g.constant(s));
            }
            let out = net.forward(&mut g, [&skips[0], &skips[1], &skips[2]]).output;
            let feats = extractor.forward(&mut g, &out, &taps)?;
            let (breakdown, terms) = loss_terms(&mut g, &objective, &content, &feats, &mut loss_rng)?;
            let root = g.weighted_sum(&terms);
            let mut comps = components(&breakdown);
            comps.push(("total", breakdown.total(&cfg.weights)));
            rec.step(step, &comps, cfg.log_path.as_deref())?;
            let grads = g.backward(root);
            adam.step(&mut net, &grads);
            ckpt.maybe_save(step, || make_bundle(&net))?;
        }
    }
    Ok(TrainingRun {
        bundle: make_bundle(&net),
        log: rec.log,
    })
}

fn map_items(t: &Tensor, f: impl Fn(&Image) -> Result<Image>) -> Result<Tensor> {
    let n = t.dims4().0;
    let items = (0..n)
        .map(|b| Ok(f(&Image::from_tensor(t, b)?)?.to_tensor()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Frozen lower stages for a batch: returns `(Up(x_{k-1}), r_c^k)` for
/// level `k`, where `x_{k-1}` is the stylization after `k - 1` revisions.
fn lower_stages(prior: &ModelBundle, batch: &[Image], level: usize) -> Result<(Tensor, Tensor)> {
    let pyramids = batch
        .iter()
        .map(|img| decompose(img, level + 1))
        .collect::<Result<Vec<_>>>()?;
    let bases: Vec<Image> = pyramids.iter().map(|p| p.base.clone()).collect();
    let mut cur = drafting::draft_tensor(
        &prior.extractor,
        &Image::batch_to_tensor(&bases)?,
        &prior.style,
        &prior.drafting,
    )?;
    let residual_batch = |j: usize| -> Result<Tensor> {
        let rs: Vec<Image> = pyramids.iter().map(|p| p.residuals[j].clone()).collect();
        Image::batch_to_tensor(&rs)
    };
    for (j, net) in prior.revisions.iter().take(level - 1).enumerate() {
        let up = map_items(&cur, |i| upsample(i, 2))?;
        let r = net
            .forward(&mut Eager, &ops::concat_channels(&residual_batch(j)?, &up))
            .output;
        cur = up;
        cur.add_assign(&r);
    }
    Ok((map_items(&cur, |i| upsample(i, 2))?, residual_batch(level - 1)?))
}

/// Trains revision level `level` on top of `prior`, whose drafting decoder
/// and lower revision levels stay frozen.
pub fn train_revision(cfg: &TrainingConfig, prior: &ModelBundle, level: usize) -> Result<TrainingRun> {
    cfg.validate()?;
    if level == 0 || cfg.stage != Stage::Revision(level) {
        return Err(Error::Config(format!(
            "train_revision for level {} needs stage revision-{}, got {}",
            level, level, cfg.stage
        )));
    }
    if prior.levels() + 1 < level {
        return Err(Error::Config(format!(
            "prior bundle lacks {} (it has {} revision levels)",
            (prior.levels() + 1..level)
                .map(revision::namespace)
                .collect::<Vec<_>>()
                .join(", "),
            prior.levels()
        )));
    }
    if prior.levels() >= level {
        log::warn!(
            "prior already has level {}; it and any higher levels are replaced",
            level
        );
    }
    let res = cfg.resolution();
    let extractor = Arc::clone(&prior.extractor);
    let (style, style_sha) = load_style(cfg, res)?;
    if style_sha != prior.manifest.style_sha256 {
        log::warn!("style image differs from the one the prior bundle was trained on");
    }
    let objective = Objective::new(&extractor, &style, cfg.weights, LayerSchedule::default())?;
    let taps = objective.schedule.taps();
    let beta = cfg.weights.beta;
    let mut net = RevisionNet::new(level, sub_seed(cfg.seed, SALT_REVISION));
    let mut disc = (beta > 0.0).then(|| Discriminator::new(level, sub_seed(cfg.seed, SALT_DISCRIMINATOR)));
    if let Some(d) = &disc {
        d.check_input(res, res)?;
    }
    let real = style.to_tensor();
    let mut adam_g = Adam::new(cfg.adam());
    let mut adam_d = Adam::new(cfg.adam());
    let mut rec = Recorder::new(cfg.log_path.as_deref())?;
    let mut ckpt = Checkpointer::new(cfg)?;
    let mut loss_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, SALT_LOSS));

    let make_bundle = |net: &RevisionNet, disc: &Option<Discriminator>| {
        let mut b = prior.clone();
        b.revisions.truncate(level - 1);
        b.revisions.push(net.clone());
        b.discriminators.retain(|k, _| *k < level);
        if let Some(d) = disc {
            b.discriminators.insert(level, d.clone());
        }
        let m = &mut b.manifest;
        m.stage_resolutions.truncate(level);
        m.stage_resolutions.push(res);
        m.config_snapshots.truncate(level);
        m.config_snapshots.push(cfg.snapshot());
        b
    };

    if cfg.iterations > 0 {
        let mut stream = iterate_content(&cfg.content_dir, res, cfg.batch_size, sub_seed(cfg.seed, SALT_DATA))?;
        for step in 1..=cfg.iterations {
            let batch = stream.next_batch()?;
            let (up, residual) = lower_stages(prior, &batch, level)?;
            let content = extractor.extract_tensor(&Image::batch_to_tensor(&batch)?, &taps)?;

            let mut g = Graph::new(&[revision::namespace(level)]);
            let input = g.constant(ops::concat_channels(&residual, &up));
            let r_cs = net.forward(&mut g, &input).output;
            let up_v = g.constant(up);
            let x_cs = g.add(&up_v, &r_cs);

            let mut d_loss = 0.0;
            if let Some(d) = disc.as_mut() {
                let mut gd = Graph::new(&[crate::discriminator::namespace(level)]);
                let real_v = gd.constant(real.clone());
                let fake_v = gd.constant(g.value(&x_cs).clone());
                let sr = d.forward(&mut gd, &real_v);
                let sf = d.forward(&mut gd, &fake_v);
                let (lr, gr) = lsgan_term(gd.value(&sr).data(), 1.0)?;
                let (lf, gf) = lsgan_term(gd.value(&sf).data(), 0.0)?;
                let gr = Tensor::from_vec(gd.value(&sr).shape(), gr)?;
                let gf = Tensor::from_vec(gd.value(&sf).shape(), gf)?;
                let tr = gd.scalar(sr, lr, gr);
                let tf = gd.scalar(sf, lf, gf);
                let root = gd.weighted_sum(&[(tr, 1.0), (tf, 1.0)]);
                d_loss = lr + lf;
                let grads = gd.backward(root);
                adam_d.step(d, &grads);
            }

            let feats = extractor.forward(&mut g, &x_cs, &taps)?;
            let (breakdown, mut terms) = loss_terms(&mut g, &objective, &content, &feats, &mut loss_rng)?;
            let base = breakdown.total(&cfg.weights);
            let mut adv = 0.0;
            if let Some(d) = &disc {
                let score = d.forward(&mut g, &x_cs);
                let (v, grad) = lsgan_term(g.value(&score).data(), 1.0)?;
                let grad = Tensor::from_vec(g.value(&score).shape(), grad)?;
                adv = v;
                let s = g.scalar(score, v, grad);
                terms.push((s, beta));
            }
            let root = g.weighted_sum(&terms);
            let mut comps = components(&breakdown);
            comps.extend([
                ("base", base),
                ("adversarial", adv),
                ("discriminator", d_loss),
                ("total", base + beta * adv),
            ]);
            rec.step(step, &comps, cfg.log_path.as_deref())?;
            let grads = g.backward(root);
            adam_g.step(&mut net, &grads);
            ckpt.maybe_save(step, || make_bundle(&net, &disc))?;
        }
    }
    Ok(TrainingRun {
        bundle: make_bundle(&net, &disc),
        log: rec.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names() {
        assert_eq!("draft".parse::<Stage>().unwrap(), Stage::Draft);
        assert_eq!("revision-2".parse::<Stage>().unwrap(), Stage::Revision(2));
        assert!("revision-0".parse::<Stage>().is_err());
        assert_eq!(Stage::Revision(1).to_string(), "revision-1");
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = TrainingConfig::from_toml_str(
            "content_dir = \"c\"\nstyle_image = \"s.png\"\nstage = \"revision-1\"\n[weights]\nbeta = 0.0\n",
        )
        .unwrap();
        assert_eq!(cfg.resolution(), 256);
        assert_eq!((cfg.iterations, cfg.batch_size, cfg.learning_rate), (30_000, 5, 1e-4));
        assert_eq!(cfg.weights.alpha, 3.0);
        assert_eq!(cfg.weights.beta, 0.0);
        cfg.validate().unwrap();
        let bad = TrainingConfig {
            resolution: Some(40),
            ..cfg.clone()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(TrainingConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn log_lines_round_trip() {
        let r = LogRecord {
            step: 3,
            component: "remd".into(),
            value: 0.125,
        };
        assert_eq!(r.to_string(), "step=3 component=remd value=0.125");
        let log = LossLog::parse(&format!("{}\n{}\n", r, r)).unwrap();
        assert_eq!(log.mean("remd", 1..=5), Some(0.125));
        assert!(LossLog::parse("step=x").is_err());
    }
}
