//! Training objective: content, style, reconstruction, relaxed EMD and hinge
//! adversarial terms, and their weighted sum.

use crate::error::{Error, Result};
use crate::nn::ParamScope;
use crate::sae::{COSINE_FLOOR, IN_EPS};
use crate::tensor::{Element, Var};
use crate::vgg::{Encoder, FeaturePyramid};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub adv: f64,
    pub rec: f64,
    pub cont: f64,
    pub sty: f64,
    pub remd: f64,
    /// Pixel term inside the reconstruction loss.
    pub rec1: f64,
    /// Feature term inside the reconstruction loss.
    pub rec2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            rec: 1.0,
            cont: 1.0,
            sty: 1.0,
            remd: 3.0,
            rec1: 20.0,
            rec2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.adv, self.rec, self.cont, self.sty, self.remd, self.rec1, self.rec2];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StyleLossKind {
    /// Per-channel mean and standard deviation matching.
    #[default]
    Stats,
    /// Normalized Gram matrix matching.
    Gram,
}

/// The five generator terms of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t, T: Element> {
    pub adv: Var<'t, T>,
    pub rec: Var<'t, T>,
    pub cont: Var<'t, T>,
    pub sty: Var<'t, T>,
    pub remd: Var<'t, T>,
}

pub fn mse<'t, T: Element>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(a.sub(b)?.square().mean())
}

fn sum_all<'t, T: Element>(terms: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc)
}

/// MSE between instance-normalized relu4_1 and relu5_1 taps, summed.
pub fn content_loss<'t, T: Element>(
    out: &FeaturePyramid<'t, T>,
    content: &FeaturePyramid<'t, T>,
) -> Result<Var<'t, T>> {
    let eps = T::lit(IN_EPS);
    let terms = [(out.relu4_1, content.relu4_1), (out.relu5_1, content.relu5_1)]
        .into_iter()
        .map(|(a, b)| mse(a.instance_normalize(eps), b.instance_normalize(eps)))
        .collect::<Result<Vec<_>>>()?;
    sum_all(&terms)
}

fn check_channels<T: Element>(op: &'static str, a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if a.shape().last() != b.shape().last() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

/// Normalized Gram matrix `FᵀF / N` of an `[H, W, C]` map.
fn gram<'t, T: Element>(f: Var<'t, T>) -> Result<Var<'t, T>> {
    let (h, w, c) = f.value().dims3()?;
    let flat = f.reshape([h * w, c])?;
    Ok(flat.transpose()?.matmul(flat)?.mul_scalar(T::one() / T::from_count(h * w)))
}

/// Sum over all four taps of the squared distance between channel statistics.
pub fn style_loss<'t, T: Element>(
    out: &FeaturePyramid<'t, T>,
    style: &FeaturePyramid<'t, T>,
    kind: StyleLossKind,
) -> Result<Var<'t, T>> {
    let eps = T::lit(IN_EPS);
    let mut terms = Vec::with_capacity(8);
    for (a, b) in out.taps().into_iter().zip(style.taps()) {
        check_channels("style_loss", &a, &b)?;
        match kind {
            StyleLossKind::Stats => {
                let (mu_a, sd_a) = a.instance_norm_stats(eps);
                let (mu_b, sd_b) = b.instance_norm_stats(eps);
                terms.push(mu_a.sub(mu_b)?.square().sum());
                terms.push(sd_a.sub(sd_b)?.square().sum());
            }
            StyleLossKind::Gram => terms.push(mse(gram(a)?, gram(b)?)?),
        }
    }
    sum_all(&terms)
}

/// Reconstruction loss from images and their pyramids. Images are compared
/// by pixel MSE weighted by `rec1`, features by per-tap MSE weighted by `rec2`.
pub struct Reconstruction<'a, 't, T: Element> {
    pub icc: Var<'t, T>,
    pub ic: Var<'t, T>,
    pub iss: Var<'t, T>,
    pub is: Var<'t, T>,
    pub icc_feats: &'a FeaturePyramid<'t, T>,
    pub ic_feats: &'a FeaturePyramid<'t, T>,
    pub iss_feats: &'a FeaturePyramid<'t, T>,
    pub is_feats: &'a FeaturePyramid<'t, T>,
}

pub fn reconstruction_loss<'t, T: Element>(r: &Reconstruction<'_, 't, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    let pixel = mse(r.icc, r.ic)?.add(mse(r.iss, r.is)?)?;
    let mut feats = Vec::with_capacity(8);
    for (a, b) in r.icc_feats.taps().into_iter().zip(r.ic_feats.taps()) {
        feats.push(mse(a, b)?);
    }
    for (a, b) in r.iss_feats.taps().into_iter().zip(r.is_feats.taps()) {
        feats.push(mse(a, b)?);
    }
    pixel
        .mul_scalar(T::lit(w.rec1))
        .add(sum_all(&feats)?.mul_scalar(T::lit(w.rec2)))
}

/// Pixels in `[0, 1]` from model-domain images in `(-1, 1)`.
pub fn to_unit<'t, T: Element>(x: Var<'t, T>) -> Var<'t, T> {
    x.add_scalar(T::one()).mul_scalar(T::lit(0.5))
}

/// Encodes the four images, then evaluates [`reconstruction_loss`].
pub fn reconstruction_loss_encoded<'t, T: Element>(
    encoder: &Encoder<T>,
    scope: &ParamScope<'t, T>,
    [icc, ic, iss, is]: [Var<'t, T>; 4],
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let enc = |x| encoder.encode(scope, to_unit(x));
    let (f_icc, f_ic, f_iss, f_is) = (enc(icc)?, enc(ic)?, enc(iss)?, enc(is)?);
    reconstruction_loss(
        &Reconstruction {
            icc,
            ic,
            iss,
            is,
            icc_feats: &f_icc,
            ic_feats: &f_ic,
            iss_feats: &f_iss,
            is_feats: &f_is,
        },
        w,
    )
}

/// Relaxed earth mover's distance between two feature sets under cosine
/// distance: the larger of the mean nearest-neighbour distance from each side.
pub fn remd_loss<'t, T: Element>(zcs: Var<'t, T>, zs: Var<'t, T>) -> Result<Var<'t, T>> {
    check_channels("remd_loss", &zcs, &zs)?;
    let flat = |z: Var<'t, T>| -> Result<Var<'t, T>> {
        let s = z.shape();
        let c = *s.last().expect("checked rank");
        z.reshape([s.iter().product::<usize>() / c.max(1), c])
    };
    let floor = T::lit(COSINE_FLOOR);
    let a = flat(zcs)?.l2_normalize_rows(floor);
    let b = flat(zs)?.l2_normalize_rows(floor);
    let cost = a.matmul(b.transpose()?)?.neg().add_scalar(T::one());
    let from_out = cost.min_rows()?.mean();
    let from_style = cost.transpose()?.min_rows()?.mean();
    from_out.maximum(from_style)
}

/// Hinge discriminator loss summed over scales.
pub fn d_hinge_loss<'t, T: Element>(real: &[Var<'t, T>], fake: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let mut terms = Vec::with_capacity(2 * real.len());
    for (&r, &f) in real.iter().zip(fake) {
        terms.push(r.neg().add_scalar(T::one()).relu().mean());
        terms.push(f.add_scalar(T::one()).relu().mean());
    }
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no discriminator outputs".into()));
    }
    sum_all(&terms)
}

/// Generator adversarial loss `-mean(D(fake))` summed over scales.
pub fn g_hinge_loss<'t, T: Element>(fake: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let terms: Vec<_> = fake.iter().map(|f| f.mean().neg()).collect();
    if terms.is_empty() {
        return Err(Error::InvalidArgument("no discriminator outputs".into()));
    }
    sum_all(&terms)
}

/// `L_adv·λ_adv + λ_rec·L_rec + λ_cont·L_cont + λ_sty·L_sty + λ_remd·L_remd`.
pub fn total_loss<'t, T: Element>(terms: &LossTerms<'t, T>, w: &LossWeights) -> Result<Var<'t, T>> {
    let weighted = [
        terms.adv.mul_scalar(T::lit(w.adv)),
        terms.rec.mul_scalar(T::lit(w.rec)),
        terms.cont.mul_scalar(T::lit(w.cont)),
        terms.sty.mul_scalar(T::lit(w.sty)),
        terms.remd.mul_scalar(T::lit(w.remd)),
    ];
    sum_all(&weighted)
}
