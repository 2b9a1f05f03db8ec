//! Inference timing over image sizes and filter lengths.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Generator, ModelConfig, StyleModel};
use crate::skg::{flops_dynamic, flops_vanilla, GroupPermutation};
use crate::tensor::Tensor;
use crate::vgg::Encoder;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub k: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    /// Analytic cost of the dynamic filter at the feature resolution.
    pub flops_dynamic: u64,
    /// Analytic cost of a dense `k×k` convolution at the same resolution.
    pub flops_vanilla: u64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "size,k,mean_ms,std_ms,flops_dynamic,flops_vanilla,ratio";

    pub fn ratio(&self) -> f64 {
        self.flops_dynamic as f64 / self.flops_vanilla as f64
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{},{},{:.6}",
            self.size,
            self.k,
            self.mean_ms,
            self.std_ms,
            self.flops_dynamic,
            self.flops_vanilla,
            self.ratio()
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{}\n", BenchRow::CSV_HEADER);
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Times `stylize` for every `(size, k)` pair. Only model compute is timed.
/// Generator weights are random since they do not affect the cost; the
/// encoder is shared across all runs.
pub fn run(
    encoder: &Encoder<f32>,
    base: &ModelConfig,
    sizes: &[usize],
    ks: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = encoder.feature_channels();
    let mut rows = Vec::with_capacity(sizes.len() * ks.len());
    for &k in ks {
        let config = ModelConfig { k, ..base.clone() };
        let model = StyleModel {
            generator: Generator::random_init(c, &config, &mut rng)?,
            encoder: encoder.clone(),
            config,
        };
        for &size in sizes {
            let mut image = || Tensor::from_fn([size, size, 3], |_| rng.random_range(-1.0f32..1.0));
            let (content, style) = (image(), image());
            let perm = GroupPermutation::identity();
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t = Instant::now();
                model.stylize(&content, &style, &perm)?;
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times.iter().sum::<f64>() / repeats as f64;
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / repeats as f64;
            let f = size / 8;
            rows.push(BenchRow {
                size,
                k,
                mean_ms: mean,
                std_ms: var.sqrt(),
                flops_dynamic: flops_dynamic(f, f, c, k),
                flops_vanilla: flops_vanilla(f, f, c, c, k),
            });
        }
    }
    Ok(rows)
}
