//! Two-scale patch discriminator.
//!
//! Each scale is `conv4×4/2 → lrelu → conv4×4/2 → lrelu → conv4×4/1 → lrelu
//! → conv4×4/1` producing a one-channel logit map. The second scale sees the
//! image average-pooled by two.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ParamScope, Parameters};
use crate::tensor::{Element, Tensor, Var};

const SLOPE: f64 = 0.2;

/// Smallest accepted image extent.
pub const MIN_EXTENT: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    width: usize,
    scales: [[ConvLayer<T>; 4]; 2],
}

impl<T: Element> Discriminator<T> {
    pub fn random_init<R: Rng>(width: usize, rng: &mut R) -> Self {
        let w = width;
        let mut scale = |s: usize| -> [ConvLayer<T>; 4] {
            let name = |i: usize| format!("disc.scale{s}.conv{i}");
            let gain = 2f64.sqrt();
            [
                ConvLayer::gaussian(name(1), 3, w, 4, 2, 1, gain, rng),
                ConvLayer::gaussian(name(2), w, 2 * w, 4, 2, 1, gain, rng),
                ConvLayer::gaussian(name(3), 2 * w, 4 * w, 4, 1, 1, gain, rng),
                ConvLayer::gaussian(name(4), 4 * w, 1, 4, 1, 1, 1.0, rng),
            ]
        };
        let first = scale(0);
        let second = scale(1);
        Discriminator {
            width,
            scales: [first, second],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cast<U: Element>(&self) -> Discriminator<U> {
        let cast = |s: &[ConvLayer<T>; 4]| std::array::from_fn(|i| s[i].cast());
        Discriminator {
            width: self.width,
            scales: [cast(&self.scales[0]), cast(&self.scales[1])],
        }
    }

    /// Patch logits at full and half resolution for an image in `(-1, 1)`.
    pub fn forward<'t>(&self, scope: &ParamScope<'t, T>, img: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        match img.shape()[..] {
            [h, w, 3] if h >= MIN_EXTENT && w >= MIN_EXTENT && h % 4 == 0 && w % 4 == 0 => {}
            ref s => {
                return Err(Error::shape(
                    "discriminator",
                    format!("image {s:?} must be RGB with extents ≥ {MIN_EXTENT} and divisible by 4"),
                ))
            }
        }
        let slope = T::lit(SLOPE);
        let mut outputs = Vec::with_capacity(2);
        let mut input = img;
        for (i, layers) in self.scales.iter().enumerate() {
            if i > 0 {
                input = input.avg_pool2x2()?;
            }
            let mut x = input;
            for (j, layer) in layers.iter().enumerate() {
                x = layer.forward(scope, x)?;
                if j + 1 < layers.len() {
                    x = x.leaky_relu(slope);
                }
            }
            outputs.push(x);
        }
        Ok(outputs)
    }
}

impl<T: Element> Parameters<T> for Discriminator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for s in &self.scales {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for s in &mut self.scales {
            s.visit_mut(f);
        }
    }
}
