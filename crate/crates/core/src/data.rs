//! Content image ingestion: seeded shuffling, resize-and-crop, prefetching.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagery::Image;

/// Short side is resized to `resolution * CROP_MARGIN` before cropping.
pub const CROP_MARGIN: f64 = 1.12;

const CROP_STREAM_SALT: u64 = 0x5eed_c409;

/// Files in `dir` (non-recursive, sorted) whose image header decodes.
/// Unreadable files are skipped with a warning.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut ok = Vec::with_capacity(paths.len());
    for p in paths {
        match image::image_dimensions(&p) {
            Ok(_) => ok.push(p),
            Err(e) => log::warn!("skipping {}: {}", p.display(), e),
        }
    }
    if ok.is_empty() {
        return Err(Error::Data(format!("no decodable images in {}", dir.display())));
    }
    Ok(ok)
}

/// `(height, width)` after scaling the short side to
/// `round(resolution * CROP_MARGIN)`, keeping the aspect ratio.
pub fn resized_dims(height: usize, width: usize, resolution: usize) -> (usize, usize) {
    let short = (resolution as f64 * CROP_MARGIN).round() as usize;
    let scale = |long: usize, s: usize| ((long as f64 * short as f64 / s as f64).round() as usize).max(short);
    if height <= width {
        (short, scale(width, height))
    } else {
        (scale(height, width), short)
    }
}

/// Resizes then takes a uniformly placed `resolution` square crop.
pub fn resize_and_crop<R: Rng>(img: &Image, resolution: usize, rng: &mut R) -> Result<Image> {
    let (h, w) = resized_dims(img.height(), img.width(), resolution);
    let resized = img.resize(h, w);
    let top = rng.gen_range(0..=h - resolution);
    let left = rng.gen_range(0..=w - resolution);
    resized.crop(top, left, resolution, resolution)
}

/// Deterministic batch generator. Each epoch visits every file once in a
/// seeded order; batches continue across epoch boundaries so small corpora
/// repeat images within a batch.
#[derive(Debug)]
pub struct ContentSampler {
    paths: Vec<PathBuf>,
    resolution: usize,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    epoch: u64,
    cursor: usize,
    drawn: u64,
}

impl ContentSampler {
    pub fn new(paths: Vec<PathBuf>, resolution: usize, batch: usize, seed: u64) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Data("content corpus is empty".into()));
        }
        if batch == 0 || resolution == 0 {
            return Err(Error::Config("batch size and resolution must be positive".into()));
        }
        let mut s = ContentSampler {
            order: Vec::new(),
            paths,
            resolution,
            batch,
            seed,
            epoch: 0,
            cursor: 0,
            drawn: 0,
        };
        s.shuffle();
        Ok(s)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order = (0..self.paths.len()).collect();
        self.order.shuffle(&mut rng);
    }

    fn next_path(&mut self) -> &Path {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        &self.paths[i]
    }

    /// Next sample; files that fail to decode are skipped with a warning.
    /// Gives up with a data error once a full epoch's worth fail in a row.
    pub fn next_image(&mut self) -> Result<Image> {
        let mut failures = 0;
        loop {
            let path = self.next_path().to_path_buf();
            match Image::load(&path) {
                Ok(img) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ CROP_STREAM_SALT);
                    rng.set_stream(self.drawn);
                    self.drawn += 1;
                    return resize_and_crop(&img, self.resolution, &mut rng);
                }
                Err(e) => {
                    log::warn!("skipping {}: {}", path.display(), e);
                    failures += 1;
                    if failures >= self.paths.len() {
                        return Err(Error::Data("no content image could be decoded".into()));
                    }
                }
            }
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<Image>> {
        (0..self.batch).map(|_| self.next_image()).collect()
    }
}

/// Background producer of content batches over a bounded queue.
pub struct ContentStream {
    rx: Option<Receiver<Result<Vec<Image>>>>,
    worker: Option<JoinHandle<()>>,
}

impl ContentStream {
    pub fn spawn(mut sampler: ContentSampler, depth: usize) -> Self {
        let (tx, rx) = sync_channel(depth.max(1));
        let worker = std::thread::spawn(move || loop {
            let b = sampler.next_batch();
            let stop = b.is_err();
            if tx.send(b).is_err() || stop {
                break;
            }
        });
        ContentStream {
            rx: Some(rx),
            worker: Some(worker),
        }
    }

    pub fn next_batch(&mut self) -> Result<Vec<Image>> {
        self.rx
            .as_ref()
            .and_then(|rx| rx.recv().ok())
            .unwrap_or_else(|| Err(Error::Data("content loader stopped".into())))
    }
}

impl Drop for ContentStream {
    fn drop(&mut self) {
        // Closing the receiver unblocks the producer.
        self.rx.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// Opens `content_dir` as an endless prefetched stream of
/// `batch x resolution^2` batches.
pub fn iterate_content(
    content_dir: impl AsRef<Path>,
    resolution: usize,
    batch: usize,
    seed: u64,
) -> Result<ContentStream> {
    let sampler = ContentSampler::new(list_images(content_dir)?, resolution, batch, seed)?;
    Ok(ContentStream::spawn(sampler, 2))
}
