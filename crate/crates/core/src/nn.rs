use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named convolution layer. The name is the archive key prefix; weights are
/// stored as `<name>.weight` (`[out, in, k, k]`) and `<name>.bias` (`[out]`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub weight: Arc<Tensor>,
    pub bias: Arc<Tensor>,
    pub stride: usize,
}

impl Conv2d {
    /// Kaiming-normal (fan-in) weights, zero bias.
    pub fn kaiming<R: Rng>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
        let n = cout * cin * k * k;
        let w: Vec<f32> = (0..n).map(|_| normal.sample(rng)).collect();
        Conv2d {
            name: name.into(),
            weight: Arc::new(Tensor::from_vec(&[cout, cin, k, k], w).expect("sized")),
            bias: Arc::new(Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn zeros(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Conv2d {
            name: name.into(),
            weight: Arc::new(Tensor::zeros(&[cout, cin, k, k])),
            bias: Arc::new(Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Reads `<name>.weight` / `<name>.bias` from `archive`, checking shapes
    /// (`[out, in, k, k]`) and finiteness.
    pub fn from_archive(archive: &Archive, name: &str, shape: [usize; 4], stride: usize) -> Result<Self> {
        let load_err = |reason: String| Error::Load {
            layer: name.to_string(),
            reason,
        };
        let get = |key: String| {
            archive
                .tensors
                .get(&key)
                .ok_or_else(|| load_err(format!("missing tensor {}", key)))
        };
        let w = get(format!("{}.weight", name))?;
        let b = get(format!("{}.bias", name))?;
        if w.shape() != shape {
            return Err(load_err(format!(
                "weight shape mismatch: expected {:?}, found {:?}",
                shape,
                w.shape()
            )));
        }
        if b.shape() != [shape[0]] {
            return Err(load_err(format!(
                "bias shape mismatch: expected [{}], found {:?}",
                shape[0],
                b.shape()
            )));
        }
        if !w.all_finite() || !b.all_finite() {
            return Err(load_err("non-finite values".into()));
        }
        Ok(Conv2d {
            name: name.to_string(),
            weight: Arc::new(w.clone()),
            bias: Arc::new(b.clone()),
            stride,
        })
    }

    fn shape4(&self) -> [usize; 4] {
        let s = self.weight.shape();
        [s[0], s[1], s[2], s[3]]
    }

    /// Reloads this layer's tensors from `archive`, keeping its name, shape
    /// and stride.
    pub fn reload(&self, archive: &Archive) -> Result<Self> {
        Conv2d::from_archive(archive, &self.name, self.shape4(), self.stride)
    }
}

/// Anything that owns convolution layers.
pub trait Module {
    fn layers(&self) -> Vec<&Conv2d>;
    fn layers_mut(&mut self) -> Vec<&mut Conv2d>;

    fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// `(key, tensor)` pairs in layer order.
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in self.layers() {
            out.push((l.weight_key(), &*l.weight));
            out.push((l.bias_key(), &*l.bias));
        }
        out
    }

    /// Inserts every parameter into `archive` under its key.
    fn export(&self, archive: &mut Archive) {
        for (k, t) in self.named_tensors() {
            archive.tensors.insert(k, t.clone());
        }
    }

    /// SHA-256 over names, shapes and values of every parameter.
    fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, t) in self.named_tensors() {
            h.update(k.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
