//! Training loop, update schedule, checkpoints and RNG ownership.
//!
//! All randomness comes from ChaCha8 seeded with the run seed. Stream 0
//! initializes the weights; step `n` (0-based) draws from stream `n + 1` in a
//! fixed order: content indices, style indices, crop offsets, then the group
//! permutation. A resumed run therefore replays the same draws without
//! storing generator state.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::Adam;
use crate::decoder::from_image;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::losses::{
    content_loss, d_hinge_loss, g_hinge_loss, reconstruction_loss, remd_loss, style_loss, to_unit,
    total_loss, LossTerms, LossWeights, Reconstruction, StyleLossKind,
};
use crate::model::{ModelConfig, StyleModel};
use crate::nn::{ParamScope, Parameters};
use crate::skg::GroupPermutation;
use crate::store::{tensor_to_u64, u64_to_tensor, WeightStore};
use crate::tensor::{Tape, Tensor};
use crate::vgg::Encoder;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: u64,
    pub crop: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// Generator steps per discriminator step.
    pub d_every: u64,
    /// Base channel width of the discriminator.
    pub disc_width: usize,
    pub style_loss: StyleLossKind,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch: 2,
            steps: 200,
            crop: 64,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            d_every: 2,
            disc_width: 64,
            style_loss: StyleLossKind::Stats,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.crop == 0 || self.crop % 16 != 0 {
            return bad(format!("crop size must be a positive multiple of 16, got {}", self.crop));
        }
        if self.crop < crate::discriminator::MIN_EXTENT {
            return bad(format!(
                "crop size must be at least {}, got {}",
                crate::discriminator::MIN_EXTENT,
                self.crop
            ));
        }
        if self.batch == 0 {
            return bad("batch size must be positive".into());
        }
        if self.d_every == 0 {
            return bad("d_every must be positive".into());
        }
        self.weights.validate()
    }
}

/// Per-step loss values, averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// 1-based index of the step that produced this report.
    pub step: u64,
    pub adv: f64,
    pub rec: f64,
    pub cont: f64,
    pub sty: f64,
    pub remd: f64,
    pub total: f64,
    /// Discriminator loss on steps that update it.
    pub d_loss: Option<f64>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,adv,rec,cont,sty,remd,total,d_loss";

    pub fn csv_row(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},",
            self.step, self.adv, self.rec, self.cont, self.sty, self.remd, self.total
        );
        if let Some(d) = self.d_loss {
            let _ = write!(s, "{d}");
        }
        s
    }
}

/// Content and style image collections.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub content: Vec<RgbImage>,
    pub style: Vec<RgbImage>,
}

impl Dataset {
    pub fn new(content: Vec<RgbImage>, style: Vec<RgbImage>, crop: usize) -> Result<Self> {
        if content.is_empty() || style.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "dataset needs at least one content and one style image, got {} and {}",
                content.len(),
                style.len()
            )));
        }
        if let Some(img) = content.iter().chain(&style).find(|i| i.width() < crop || i.height() < crop) {
            return Err(Error::InvalidArgument(format!(
                "image of {}×{} is smaller than the {crop} crop",
                img.width(),
                img.height()
            )));
        }
        Ok(Dataset { content, style })
    }
}

/// A batch drawn for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub content: Vec<Tensor<f32>>,
    pub style: Vec<Tensor<f32>>,
    pub perm: GroupPermutation,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: StyleModel,
    pub disc: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// Completed steps.
    step: u64,
    encoder_checksum: u32,
}

fn step_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_finite(term: &'static str, v: f64, step: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

impl Trainer {
    /// Fresh weights from stream 0 of the seed. A supplied encoder replaces
    /// the random one, which is still drawn so the rest of the init is unchanged.
    pub fn new(config: TrainConfig, encoder: Option<Encoder<f32>>) -> Result<Self> {
        config.validate()?;
        let mut rng = step_rng(config.seed, 0);
        let mut model = StyleModel::random_init(config.model.clone(), &mut rng)?;
        let disc = Discriminator::random_init(config.disc_width, &mut rng);
        if let Some(enc) = encoder {
            if enc.width() != config.model.vgg_width {
                return Err(Error::InvalidArgument(format!(
                    "encoder width {} does not match configured width {}",
                    enc.width(),
                    config.model.vgg_width
                )));
            }
            model.encoder = enc;
        }
        let encoder_checksum = model.encoder.checksum();
        Ok(Trainer {
            opt_g: Adam::new(config.lr),
            opt_d: Adam::new(config.lr),
            config,
            model,
            disc,
            step: 0,
            encoder_checksum,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Checksum of the encoder taken when the trainer was built.
    pub fn initial_encoder_checksum(&self) -> u32 {
        self.encoder_checksum
    }

    /// Draws the batch for the next step.
    pub fn sample_batch(&self, data: &Dataset) -> Result<Batch> {
        let mut rng = step_rng(self.config.seed, self.step + 1);
        let b = self.config.batch;
        let ci: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.content.len())).collect();
        let si: Vec<usize> = (0..b).map(|_| rng.random_range(0..data.style.len())).collect();
        let crop = self.config.crop;
        let mut crop_of = |img: &RgbImage| -> Result<Tensor<f32>> {
            let x = rng.random_range(0..=img.width() - crop);
            let y = rng.random_range(0..=img.height() - crop);
            Ok(from_image(&img.crop(x, y, crop)?))
        };
        let content = ci.iter().map(|&i| crop_of(&data.content[i])).collect::<Result<Vec<_>>>()?;
        let style = si.iter().map(|&i| crop_of(&data.style[i])).collect::<Result<Vec<_>>>()?;
        let perm = GroupPermutation::random(&mut rng);
        Ok(Batch { content, style, perm })
    }

    /// One generator update, plus a discriminator update every `d_every` steps.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossReport> {
        let batch = self.sample_batch(data)?;
        self.train_on_batch(&batch)
    }

    pub fn train_on_batch(&mut self, batch: &Batch) -> Result<LossReport> {
        let step = self.step + 1;
        let n = batch.content.len();
        let inv = 1.0 / n as f64;
        let mut grads: HashMap<String, Tensor<f32>> = HashMap::new();
        let mut sums = [0.0f64; 6];
        let mut fakes = Vec::with_capacity(n);
        for (ic, is) in batch.content.iter().zip(&batch.style) {
            let (terms, image) = self.generator_pass(ic, is, &batch.perm, inv, &mut grads, step)?;
            for (s, t) in sums.iter_mut().zip(terms) {
                *s += t * inv;
            }
            fakes.push(image);
        }
        self.opt_g.step(&mut self.model.generator, &grads)?;

        let d_loss = if step % self.config.d_every == 0 {
            Some(self.discriminator_step(&fakes, &batch.style, step)?)
        } else {
            None
        };
        self.step = step;
        let [adv, rec, cont, sty, remd, total] = sums;
        Ok(LossReport {
            step,
            adv,
            rec,
            cont,
            sty,
            remd,
            total,
            d_loss,
        })
    }

    /// Forward and backward for one content/style pair; adds the batch-scaled
    /// gradients into `grads` and returns the unscaled term values and output image.
    fn generator_pass(
        &self,
        ic: &Tensor<f32>,
        is: &Tensor<f32>,
        perm: &GroupPermutation,
        scale: f64,
        grads: &mut HashMap<String, Tensor<f32>>,
        step: u64,
    ) -> Result<([f64; 6], Tensor<f32>)> {
        let tape = Tape::<f32>::new();
        let frozen = ParamScope::frozen(&tape);
        let gen_scope = ParamScope::trainable(&tape);
        let encoder = &self.model.encoder;
        let generator = &self.model.generator;

        let ic = tape.constant(ic.clone());
        let is = tape.constant(is.clone());
        let fc = encoder.encode(&frozen, to_unit(ic))?;
        let fs = encoder.encode(&frozen, to_unit(is))?;

        let out = generator.forward(&gen_scope, fc.relu4_1, fs.relu4_1, perm)?;
        let icc = generator.forward(&gen_scope, fc.relu4_1, fc.relu4_1, perm)?.image;
        let iss = generator.forward(&gen_scope, fs.relu4_1, fs.relu4_1, perm)?.image;
        let f_ics = encoder.encode(&frozen, to_unit(out.image))?;
        let f_icc = encoder.encode(&frozen, to_unit(icc))?;
        let f_iss = encoder.encode(&frozen, to_unit(iss))?;

        let w = &self.config.weights;
        let terms = LossTerms {
            adv: g_hinge_loss(&self.disc.forward(&frozen, out.image)?)?,
            rec: reconstruction_loss(
                &Reconstruction {
                    icc,
                    ic,
                    iss,
                    is,
                    icc_feats: &f_icc,
                    ic_feats: &fc,
                    iss_feats: &f_iss,
                    is_feats: &fs,
                },
                w,
            )?,
            cont: content_loss(&f_ics, &fc)?,
            sty: style_loss(&f_ics, &fs, self.config.style_loss)?,
            remd: remd_loss(out.zcs, fs.relu4_1)?,
        };
        let total = total_loss(&terms, w)?;
        let values = [
            check_finite("adversarial", terms.adv.value().item() as f64, step)?,
            check_finite("reconstruction", terms.rec.value().item() as f64, step)?,
            check_finite("content", terms.cont.value().item() as f64, step)?,
            check_finite("style", terms.sty.value().item() as f64, step)?,
            check_finite("remd", terms.remd.value().item() as f64, step)?,
            check_finite("total", total.value().item() as f64, step)?,
        ];
        let g = tape.backward(total.mul_scalar(scale as f32))?;
        accumulate(grads, gen_scope.gradients(&g));
        Ok((values, (*out.image.value()).clone()))
    }

    fn discriminator_step(&mut self, fakes: &[Tensor<f32>], reals: &[Tensor<f32>], step: u64) -> Result<f64> {
        let inv = 1.0 / fakes.len() as f64;
        let mut grads = HashMap::new();
        let mut loss = 0.0;
        for (fake, real) in fakes.iter().zip(reals) {
            let tape = Tape::<f32>::new();
            let scope = ParamScope::trainable(&tape);
            let real_logits = self.disc.forward(&scope, tape.constant(real.clone()))?;
            let fake_logits = self.disc.forward(&scope, tape.constant(fake.clone()))?;
            let d = d_hinge_loss(&real_logits, &fake_logits)?;
            loss += check_finite("discriminator", d.value().item() as f64, step)? * inv;
            let g = tape.backward(d.mul_scalar(inv as f32))?;
            accumulate(&mut grads, scope.gradients(&g));
        }
        self.opt_d.step(&mut self.disc, &grads)?;
        Ok(loss)
    }

    /// Model, discriminator, both optimizers, step and seed.
    pub fn to_store(&self) -> WeightStore {
        let mut store = self.model.to_store();
        store.put_all(&self.disc);
        self.opt_g.save_into(&mut store, "g");
        self.opt_d.save_into(&mut store, "d");
        store.insert("trainer.step", u64_to_tensor(self.step));
        store.insert("trainer.seed", u64_to_tensor(self.config.seed));
        store
    }

    pub fn save_checkpoint(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_store().save(path)
    }

    /// Restores a trainer from a checkpoint. The stored seed overrides the
    /// configured one so the step draws continue unchanged. A missing
    /// optimizer section reinitializes that optimizer with a warning.
    pub fn from_store(store: &WeightStore, mut config: TrainConfig) -> Result<Self> {
        if let Some(seed) = store.get("trainer.seed").and_then(tensor_to_u64) {
            if seed != config.seed {
                log::warn!("checkpoint seed {seed} overrides configured seed {}", config.seed);
            }
            config.seed = seed;
        }
        config.validate()?;
        let model = StyleModel::from_store(store, config.model.clone())?;
        config.model = model.config.clone();
        let mut disc = Discriminator::random_init(config.disc_width, &mut step_rng(config.seed, 0));
        store.fill(&mut disc)?;
        let optimizer = |tag: &str, params: &dyn Parameters<f32>| -> Result<Adam<f32>> {
            Ok(match Adam::load_from(store, tag, config.lr, params)? {
                Some(opt) => opt,
                None => {
                    log::warn!("checkpoint has no optimizer.{tag} section; starting that optimizer fresh");
                    Adam::new(config.lr)
                }
            })
        };
        let opt_g = optimizer("g", &model.generator)?;
        let opt_d = optimizer("d", &disc)?;
        let step = store.get("trainer.step").and_then(tensor_to_u64).unwrap_or(0);
        let encoder_checksum = model.encoder.checksum();
        Ok(Trainer {
            config,
            model,
            disc,
            opt_g,
            opt_d,
            step,
            encoder_checksum,
        })
    }

    pub fn load_checkpoint(path: impl AsRef<std::path::Path>, config: TrainConfig) -> Result<Self> {
        Self::from_store(&WeightStore::load(path)?, config)
    }
}

fn accumulate(into: &mut HashMap<String, Tensor<f32>>, from: HashMap<String, Tensor<f32>>) {
    for (name, g) in from {
        match into.get_mut(&name) {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => {
                into.insert(name, g);
            }
        }
    }
}

/// Mean of `values[range]`, for windowed loss comparisons.
pub fn window_mean(values: &[f64], range: std::ops::Range<usize>) -> f64 {
    let w = &values[range];
    w.iter().sum::<f64>() / w.len() as f64
}
