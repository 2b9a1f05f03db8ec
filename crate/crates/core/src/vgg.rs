//! Fixed VGG-16 feature extractor. All thirteen conv layers are stored so
//! standard weight files load unchanged; evaluation stops at relu5_1.

use rand::Rng;

use crate::error::{Error, Result, StoreError};
use crate::nn::{ConvLayer, ParamScope, Parameters};
use crate::store::WeightStore;
use crate::tensor::{Element, Tensor, Var};

/// Standard first-block width of VGG-16.
pub const VGG_WIDTH: usize = 64;

const MEAN_NAME: &str = "encoder.input_mean";
const STD_NAME: &str = "encoder.input_std";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Conv(&'static str, usize, usize),
    Pool,
}

/// Layer names with input and output width multipliers (`0` marks RGB input).
const STAGES: [Stage; 17] = [
    Stage::Conv("conv1_1", 0, 1),
    Stage::Conv("conv1_2", 1, 1),
    Stage::Pool,
    Stage::Conv("conv2_1", 1, 2),
    Stage::Conv("conv2_2", 2, 2),
    Stage::Pool,
    Stage::Conv("conv3_1", 2, 4),
    Stage::Conv("conv3_2", 4, 4),
    Stage::Conv("conv3_3", 4, 4),
    Stage::Pool,
    Stage::Conv("conv4_1", 4, 8),
    Stage::Conv("conv4_2", 8, 8),
    Stage::Conv("conv4_3", 8, 8),
    Stage::Pool,
    Stage::Conv("conv5_1", 8, 8),
    Stage::Conv("conv5_2", 8, 8),
    Stage::Conv("conv5_3", 8, 8),
];

/// Encoder weights: thirteen 3×3 convolutions plus per-channel input
/// normalization applied to pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    width: usize,
    convs: Vec<ConvLayer<T>>,
    mean: Tensor<T>,
    std: Tensor<T>,
}

/// The four relu taps used by the losses. `relu4_1` is the main feature.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid<'t, T: Element> {
    pub relu2_1: Var<'t, T>,
    pub relu3_1: Var<'t, T>,
    pub relu4_1: Var<'t, T>,
    pub relu5_1: Var<'t, T>,
}

impl<'t, T: Element> FeaturePyramid<'t, T> {
    pub fn taps(&self) -> [Var<'t, T>; 4] {
        [self.relu2_1, self.relu3_1, self.relu4_1, self.relu5_1]
    }
}

fn layer_shapes(width: usize) -> impl Iterator<Item = (&'static str, usize, usize)> {
    STAGES.iter().filter_map(move |s| match *s {
        Stage::Conv(name, i, o) => Some((name, if i == 0 { 3 } else { i * width }, o * width)),
        Stage::Pool => None,
    })
}

impl<T: Element> Encoder<T> {
    /// He-scaled Gaussian weights with zero bias; normalization mean and std 0.5.
    pub fn random_init<R: Rng>(width: usize, rng: &mut R) -> Self {
        let convs = layer_shapes(width)
            .map(|(name, cin, cout)| {
                ConvLayer::gaussian(format!("encoder.{name}"), cin, cout, 3, 1, 1, 2f64.sqrt(), rng)
            })
            .collect();
        Encoder {
            width,
            convs,
            mean: Tensor::full([3], T::lit(0.5)),
            std: Tensor::full([3], T::lit(0.5)),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Channel count of the relu4_1 tap.
    pub fn feature_channels(&self) -> usize {
        8 * self.width
    }

    pub fn cast<U: Element>(&self) -> Encoder<U> {
        Encoder {
            width: self.width,
            convs: self.convs.iter().map(ConvLayer::cast).collect(),
            mean: self.mean.cast(),
            std: self.std.cast(),
        }
    }

    fn check_input(x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        match shape[..] {
            [h, w, 3] if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => Ok(()),
            [h, w, 3] => Err(Error::shape(
                "encode",
                format!("image extents {h}×{w} must be positive multiples of 16; pad or resize the input"),
            )),
            _ => Err(Error::shape("encode", format!("expected an [H, W, 3] image, got {shape:?}"))),
        }
    }

    /// `(p − mean) / std` as a pointwise convolution with a diagonal weight.
    fn normalize<'t>(&self, scope: &ParamScope<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut w = Tensor::zeros([3, 3, 1, 1]);
        let mut b = Tensor::zeros([3]);
        for c in 0..3 {
            let inv = T::one() / self.std.data()[c];
            w.data_mut()[c * 3 + c] = inv;
            b.data_mut()[c] = -self.mean.data()[c] * inv;
        }
        let w = scope.bind("encoder.input_norm.weight", &w);
        let b = scope.bind("encoder.input_norm.bias", &b);
        x.conv2d(w, b, 1, 0)
    }

    fn run<'t>(
        &self,
        scope: &ParamScope<'t, T>,
        pixels: Var<'t, T>,
        stop_after: &str,
    ) -> Result<Vec<Var<'t, T>>> {
        Self::check_input(&pixels)?;
        let mut x = self.normalize(scope, pixels)?;
        let mut convs = self.convs.iter();
        let mut taps = Vec::new();
        for stage in STAGES {
            match stage {
                Stage::Pool => x = x.max_pool2x2()?,
                Stage::Conv(name, _, _) => {
                    let layer = convs.next().expect("one layer per conv stage");
                    x = layer.forward(scope, x)?.relu();
                    if name.ends_with("_1") && name != "conv1_1" {
                        taps.push(x);
                    }
                    if name == stop_after {
                        break;
                    }
                }
            }
        }
        Ok(taps)
    }

    /// Full pyramid of an `[H, W, 3]` image with pixels in `[0, 1]`.
    pub fn encode<'t>(&self, scope: &ParamScope<'t, T>, pixels: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        let taps = self.run(scope, pixels, "conv5_1")?;
        Ok(FeaturePyramid {
            relu2_1: taps[0],
            relu3_1: taps[1],
            relu4_1: taps[2],
            relu5_1: taps[3],
        })
    }

    /// Only the relu4_1 feature, skipping the last block.
    pub fn encode_main<'t>(&self, scope: &ParamScope<'t, T>, pixels: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.run(scope, pixels, "conv4_1")?[2])
    }
}

impl Encoder<f32> {
    /// CRC32 over every weight byte, for checking the encoder stays frozen.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        self.visit(&mut |name, t| {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        });
        h.finalize()
    }

    /// Reads the encoder tensors from a store, checking every layer shape.
    pub fn from_store(store: &WeightStore, width: usize) -> Result<Self, StoreError> {
        let mut enc = Encoder {
            width,
            convs: layer_shapes(width)
                .map(|(name, cin, cout)| ConvLayer::zeros(format!("encoder.{name}"), cin, cout, 3, 1, 1))
                .collect(),
            mean: Tensor::zeros([3]),
            std: Tensor::zeros([3]),
        };
        store.fill(&mut enc)?;
        if let Some(extra) = store
            .names()
            .filter(|n| n.starts_with("encoder.conv"))
            .find(|n| !enc.convs.iter().any(|c| n.starts_with(&format!("{}.", c.name))))
        {
            return Err(StoreError::ShapeMismatch {
                name: extra.to_owned(),
                expected: Vec::new(),
                found: store.get(extra).map(|t| t.shape().to_vec()).unwrap_or_default(),
            });
        }
        Ok(enc)
    }

    pub fn load(path: impl AsRef<std::path::Path>, width: usize) -> Result<Self> {
        Ok(Self::from_store(&WeightStore::load(path)?, width)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut store = WeightStore::new();
        store.put_all(self);
        store.save(path)
    }
}

impl<T: Element> Parameters<T> for Encoder<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(MEAN_NAME, &self.mean);
        f(STD_NAME, &self.std);
        self.convs.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(MEAN_NAME, &mut self.mean);
        f(STD_NAME, &mut self.std);
        self.convs.visit_mut(f);
    }
}
