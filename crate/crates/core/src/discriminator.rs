//! Shallow patch discriminator with an 11-pixel receptive field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::graph::{Eager, Exec};
use crate::imagery::Image;
use crate::nn::{Conv2d, Module};
use crate::tensor::Tensor;

pub const HIDDEN: usize = 32;
pub const DEPTH: usize = 5;
pub const LEAKY_SLOPE: f32 = 0.2;

/// One discriminator per revision level.
pub fn namespace(level: usize) -> String {
    format!("discriminator/{}/", level)
}

/// Receptive field of a stack of `(kernel, stride)` layers.
pub fn receptive_field_of(layers: &[(usize, usize)]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for &(k, s) in layers {
        rf += (k - 1) * jump;
        jump *= s;
    }
    rf
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

fn layer_name(level: usize, i: usize) -> String {
    format!("{}conv{}", namespace(level), i + 1)
}

fn widths(i: usize) -> (usize, usize) {
    let cin = if i == 0 { 3 } else { HIDDEN };
    let cout = if i + 1 == DEPTH { 1 } else { HIDDEN };
    (cin, cout)
}

impl Discriminator {
    pub fn new(level: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = (0..DEPTH)
            .map(|i| {
                let (cin, cout) = widths(i);
                Conv2d::kaiming(layer_name(level, i), cin, cout, 3, 1, &mut rng)
            })
            .collect();
        Discriminator { convs }
    }

    pub fn from_archive(archive: &Archive, level: usize) -> Result<Self> {
        let convs = (0..DEPTH)
            .map(|i| {
                let (cin, cout) = widths(i);
                Conv2d::from_archive(archive, &layer_name(level, i), [cout, cin, 3, 3], 1)
            })
            .collect::<Result<_>>()?;
        Ok(Discriminator { convs })
    }

    pub fn receptive_field(&self) -> usize {
        let layers: Vec<_> = self.convs.iter().map(|c| (c.kernel(), c.stride)).collect();
        receptive_field_of(&layers)
    }

    /// Score map with the input's spatial size; no activation on the output.
    pub fn forward<E: Exec>(&self, e: &mut E, x: &E::V) -> E::V {
        let mut h = e.conv2d(x, &self.convs[0]);
        for conv in &self.convs[1..] {
            h = e.leaky_relu(&h, LEAKY_SLOPE);
            h = e.conv2d(&h, conv);
        }
        h
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let rf = self.receptive_field();
        if h < rf || w < rf {
            return Err(Error::dim(format!(
                "discriminator input {}x{} is smaller than its {}-pixel receptive field",
                h, w, rf
            )));
        }
        Ok(())
    }
}

impl Module for Discriminator {
    fn layers(&self) -> Vec<&Conv2d> {
        self.convs.iter().collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        self.convs.iter_mut().collect()
    }
}

/// Realness scores `[1, 1, H, W]` for one image.
pub fn disc_forward(x: &Image, d: &Discriminator) -> Result<Tensor> {
    d.check_input(x.height(), x.width())?;
    Ok(d.forward(&mut Eager, &x.to_tensor()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn receptive_field_examples() {
        assert_eq!(receptive_field_of(&[(3, 1)]), 3);
        assert_eq!(receptive_field_of(&[(3, 1); 2]), 5);
        assert_eq!(receptive_field_of(&[(3, 1); 5]), 11);
        assert_eq!(Discriminator::new(1, 0).receptive_field(), 11);
    }

    #[test]
    fn shapes_and_small_inputs() {
        let d = Discriminator::new(1, 0);
        let s = disc_forward(&Image::filled(16, 12, 0.3), &d).unwrap();
        assert_eq!(s.shape(), [1, 1, 16, 12]);
        assert!(matches!(
            disc_forward(&Image::filled(10, 40, 0.3), &d),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_weights_give_the_bias() {
        let mut d = Discriminator::new(1, 0);
        for c in d.layers_mut() {
            c.weight = Arc::new(Tensor::zeros(c.weight.shape()));
        }
        let last = d.layers_mut().pop().unwrap();
        last.bias = Arc::new(Tensor::full(&[1], 0.25));
        let s = disc_forward(&Image::filled(12, 12, 0.9), &d).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.25));
    }
}
