//! Residual upsampling decoder from `[h, w, C]` features to `[8h, 8w, 3]` images.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::nn::{ConvLayer, ParamScope, Parameters};
use crate::tensor::{Element, Tensor, Var};

/// `relu → conv3×3 (C → C/2) → relu → conv3×3`, summed with a 1×1 projection of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct ResStage<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub skip: ConvLayer<T>,
}

impl<T: Element> ResStage<T> {
    fn random_init<R: Rng>(name: &str, cin: usize, rng: &mut R) -> Self {
        let cout = cin / 2;
        let gain = 2f64.sqrt();
        ResStage {
            conv1: ConvLayer::gaussian(format!("{name}.conv1"), cin, cout, 3, 1, 1, gain, rng),
            conv2: ConvLayer::gaussian(format!("{name}.conv2"), cout, cout, 3, 1, 1, gain, rng),
            skip: ConvLayer::gaussian(format!("{name}.skip"), cin, cout, 1, 1, 0, 1.0, rng),
        }
    }

    pub fn forward<'t>(&self, scope: &ParamScope<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let branch = self.conv1.forward(scope, x.relu())?.relu();
        let branch = self.conv2.forward(scope, branch)?;
        branch.add(self.skip.forward(scope, x)?)
    }

    fn cast<U: Element>(&self) -> ResStage<U> {
        ResStage {
            conv1: self.conv1.cast(),
            conv2: self.conv2.cast(),
            skip: self.skip.cast(),
        }
    }
}

impl<T: Element> Parameters<T> for ResStage<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.skip.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.skip.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    channels: usize,
    pub stages: [ResStage<T>; 3],
    pub output: ConvLayer<T>,
}

impl<T: Element> Decoder<T> {
    pub fn random_init<R: Rng>(channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % 8 != 0 {
            return Err(Error::shape(
                "decoder",
                format!("input channels must be a positive multiple of 8, got {channels}"),
            ));
        }
        let c = channels;
        let stages = [
            ResStage::random_init("decoder.res1", c, rng),
            ResStage::random_init("decoder.res2", c / 2, rng),
            ResStage::random_init("decoder.res3", c / 4, rng),
        ];
        let output = ConvLayer::gaussian("decoder.out", c / 8, 3, 3, 1, 1, 1.0, rng);
        Ok(Decoder {
            channels,
            stages,
            output,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cast<U: Element>(&self) -> Decoder<U> {
        Decoder {
            channels: self.channels,
            stages: [self.stages[0].cast(), self.stages[1].cast(), self.stages[2].cast()],
            output: self.output.cast(),
        }
    }

    /// Image in `(-1, 1)` with eight times the spatial extent of `z`.
    pub fn decode<'t>(&self, scope: &ParamScope<'t, T>, z: Var<'t, T>) -> Result<Var<'t, T>> {
        match z.shape()[..] {
            [_, _, c] if c == self.channels => {}
            ref s => {
                return Err(Error::shape(
                    "decode",
                    format!("feature {s:?} does not have {} channels", self.channels),
                ))
            }
        }
        let mut x = z;
        for stage in &self.stages {
            x = stage.forward(scope, x)?.upsample_nearest2x()?;
        }
        Ok(self.output.forward(scope, x.relu())?.tanh())
    }
}

impl<T: Element> Parameters<T> for Decoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stages.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stages.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Maps `[-1, 1]` to 8-bit values, rounding half away from zero. Values
/// outside the range are clamped; the second result counts them.
pub fn to_image(x: &Tensor<f32>) -> Result<(RgbImage, usize)> {
    let (h, w, c) = x.dims3()?;
    if c != 3 {
        return Err(Error::shape("to_image", format!("expected 3 channels, got {c}")));
    }
    let mut clamped = 0;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let v = if v.is_nan() { 0.0 } else { v };
            if !(-1.0..=1.0).contains(&v) {
                clamped += 1;
            }
            ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8
        })
        .collect();
    if clamped > 0 {
        log::warn!("to_image: clamped {clamped} out-of-range values");
    }
    Ok((RgbImage::new(w, h, data)?, clamped))
}

/// Maps 8-bit values to `[-1, 1]`.
pub fn from_image(img: &RgbImage) -> Tensor<f32> {
    let data = img.data().iter().map(|&p| p as f32 / 127.5 - 1.0).collect();
    Tensor::new([img.height(), img.width(), 3], data).expect("rgb buffer matches extents")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn to_image_endpoints_and_rounding() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 1.0]).reshape([1, 1, 3]).unwrap();
        let (img, clamped) = to_image(&x).unwrap();
        assert_eq!(img.data(), &[0, 128, 255]);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn to_image_counts_clamps() {
        let x = Tensor::from_vec(vec![-1.5, 0.25, 2.0]).reshape([1, 1, 3]).unwrap();
        let (img, clamped) = to_image(&x).unwrap();
        assert_eq!(img.data()[0], 0);
        assert_eq!(img.data()[2], 255);
        assert_eq!(clamped, 2);
    }

    #[test]
    fn pixel_round_trip_is_within_one() {
        let data: Vec<u8> = (0..=255).flat_map(|v| [v, v, v]).collect();
        let img = RgbImage::new(256, 1, data).unwrap();
        let (back, _) = to_image(&from_image(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!(a.abs_diff(*b) <= 1);
        }
    }
}
