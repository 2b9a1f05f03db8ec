//! The full stylization network and inference entry points.

use rand::Rng;

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::losses::to_unit;
use crate::nn::{ParamScope, Parameters};
use crate::sae::{Sae, SaeConfig};
use crate::skg::{dynamic_modulation, grouped_shuffle, GroupPermutation, Skg};
use crate::store::WeightStore;
use crate::tensor::{Element, MacCounter, Tape, Tensor, Var};
use crate::vgg::{Encoder, VGG_WIDTH};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// First-block width of the encoder; the main feature has `8 × vgg_width` channels.
    pub vgg_width: usize,
    pub sae: SaeConfig,
    /// Dynamic filter length.
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vgg_width: VGG_WIDTH,
            sae: SaeConfig::default(),
            k: 3,
        }
    }
}

/// The trainable part: attention, kernel prediction and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub sae: Sae<T>,
    pub skg: Skg<T>,
    pub decoder: Decoder<T>,
}

/// Intermediate results of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput<'t, T: Element> {
    pub zcs: Var<'t, T>,
    pub zbar: Var<'t, T>,
    pub image: Var<'t, T>,
}

impl<T: Element> Generator<T> {
    pub fn random_init<R: Rng>(channels: usize, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        Ok(Generator {
            sae: Sae::random_init(channels, config.sae.clone(), rng)?,
            skg: Skg::random_init(channels, config.k, rng)?,
            decoder: Decoder::random_init(channels, rng)?,
        })
    }

    pub fn cast<U: Element>(&self) -> Generator<U> {
        Generator {
            sae: self.sae.cast(),
            skg: self.skg.cast(),
            decoder: self.decoder.cast(),
        }
    }

    /// Kernels from `zcs`, modulation of the shuffled content feature, decoding.
    pub fn from_aligned<'t>(
        &self,
        scope: &ParamScope<'t, T>,
        zc: Var<'t, T>,
        zcs: Var<'t, T>,
        perm: &GroupPermutation,
        counter: Option<&MacCounter>,
    ) -> Result<GeneratorOutput<'t, T>> {
        let kernels = self.skg.predict_kernels(scope, zcs)?;
        let shuffled = grouped_shuffle(zc, perm)?;
        let zbar = dynamic_modulation(shuffled, &kernels, counter)?;
        let image = self.decoder.decode(scope, zbar)?;
        Ok(GeneratorOutput { zcs, zbar, image })
    }

    pub fn forward<'t>(
        &self,
        scope: &ParamScope<'t, T>,
        zc: Var<'t, T>,
        zs: Var<'t, T>,
        perm: &GroupPermutation,
    ) -> Result<GeneratorOutput<'t, T>> {
        let zcs = self.sae.forward(scope, zc, zs)?;
        self.from_aligned(scope, zc, zcs, perm, None)
    }
}

impl<T: Element> Parameters<T> for Generator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.sae.visit(f);
        self.skg.visit(f);
        self.decoder.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.sae.visit_mut(f);
        self.skg.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// `α·a + (1 − α)·b`.
pub fn blend<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "interpolation weight {alpha} is outside [0, 1]"
        )));
    }
    a.mul_scalar(T::lit(alpha)).add(b.mul_scalar(T::lit(1.0 - alpha)))
}

/// Encoder plus generator in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModel {
    pub config: ModelConfig,
    pub encoder: Encoder<f32>,
    pub generator: Generator<f32>,
}

impl StyleModel {
    /// Encoder first, then generator, drawn from one generator in that order.
    pub fn random_init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let encoder = Encoder::random_init(config.vgg_width, rng);
        let generator = Generator::random_init(encoder.feature_channels(), &config, rng)?;
        Ok(StyleModel {
            config,
            encoder,
            generator,
        })
    }

    /// [`StyleModel::random_init`] from a ChaCha8 generator seeded with `seed`.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::random_init(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed))
    }

    /// Loads every model tensor from a store. Encoder width, `k` and the gate
    /// sharing mode are taken from the stored shapes; other settings come
    /// from `config`.
    pub fn from_store(store: &WeightStore, mut config: ModelConfig) -> Result<Self> {
        if let Some(&[w, 3, 3, 3]) = store.get("encoder.conv1_1.weight").map(|t| t.shape()) {
            config.vgg_width = w;
        }
        let encoder = Encoder::from_store(store, config.vgg_width)?;
        let c = encoder.feature_channels();
        if let Some(phi2) = store.get("skg.phi2.bias") {
            let per = phi2.len() / c.max(1);
            if phi2.len() % c.max(1) == 0 && per % 2 == 1 {
                config.k = per / 2;
            }
        }
        if let Some(g3) = store.get("sae.gate3.bias") {
            config.sae.shared_gate = g3.len() == 2 && config.sae.heads != 1;
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut generator = Generator::random_init(c, &config, &mut rng)?;
        store.fill(&mut generator)?;
        Ok(StyleModel {
            config,
            encoder,
            generator,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>, config: ModelConfig) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?, config)
    }

    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        store.put_all(&self.encoder);
        store.put_all(&self.generator);
        store
    }

    fn check_image(img: &Tensor<f32>) -> Result<()> {
        match img.shape()[..] {
            [h, w, 3] if h % 16 == 0 && w % 16 == 0 && h > 0 && w > 0 => Ok(()),
            ref s => Err(Error::shape(
                "stylize",
                format!("image {s:?} must be RGB with extents divisible by 16 (try --pad-to-16)"),
            )),
        }
    }

    /// Stylizes a model-domain `[H, W, 3]` content image with a style image.
    pub fn stylize(&self, content: &Tensor<f32>, style: &Tensor<f32>, perm: &GroupPermutation) -> Result<Tensor<f32>> {
        Self::check_image(content)?;
        Self::check_image(style)?;
        let tape = Tape::new();
        let scope = ParamScope::frozen(&tape);
        let zc = self.encode_main(&scope, content)?;
        let zs = self.encode_main(&scope, style)?;
        let out = self.generator.forward(&scope, zc, zs, perm)?;
        Ok((*out.image.value()).clone())
    }

    fn encode_main<'t>(&self, scope: &ParamScope<'t, f32>, img: &Tensor<f32>) -> Result<Var<'t, f32>> {
        let x = scope.tape().constant(img.clone());
        self.encoder.encode_main(scope, to_unit(x))
    }

    /// One image per weight `α`, blending the aligned features of two styles.
    pub fn interpolate(
        &self,
        content: &Tensor<f32>,
        style_a: &Tensor<f32>,
        style_b: &Tensor<f32>,
        alphas: &[f64],
        perm: &GroupPermutation,
    ) -> Result<Vec<Tensor<f32>>> {
        Self::check_image(content)?;
        Self::check_image(style_a)?;
        Self::check_image(style_b)?;
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!(
                "interpolation weight {a} is outside [0, 1]"
            )));
        }
        let tape = Tape::new();
        let scope = ParamScope::frozen(&tape);
        let zc = self.encode_main(&scope, content)?;
        let za = self.generator.sae.forward(&scope, zc, self.encode_main(&scope, style_a)?)?;
        let zb = self.generator.sae.forward(&scope, zc, self.encode_main(&scope, style_b)?)?;
        alphas
            .iter()
            .map(|&alpha| {
                let zcs = blend(za, zb, alpha)?;
                let out = self.generator.from_aligned(&scope, zc, zcs, perm, None)?;
                Ok((*out.image.value()).clone())
            })
            .collect()
    }
}
