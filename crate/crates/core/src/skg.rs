//! Style kernel generation: per-position separable filters predicted from the
//! aligned feature, grouped channel shuffling, and the dynamic modulation of
//! the content feature.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ParamScope, Parameters};
use crate::sae::IN_EPS;
use crate::tensor::{Element, MacCounter, Tensor, Var};

/// Number of channel groups used by the shuffle.
pub const GROUPS: usize = 8;

/// Vertical taps, horizontal taps and bias for every position and channel.
/// `f1` and `f2` are `[H, W, C, k]`, `bias` is `[H, W, C, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct DynamicKernels<'t, T: Element> {
    pub f1: Var<'t, T>,
    pub f2: Var<'t, T>,
    pub bias: Var<'t, T>,
}

/// Kernel-prediction network φ: two 3×3 convolutions `C → C/2 → C(2k+1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Skg<T> {
    channels: usize,
    k: usize,
    phi: [ConvLayer<T>; 2],
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "kernel size k must be odd and at least 1, got {k}"
        )));
    }
    Ok(())
}

impl<T: Element> Skg<T> {
    /// The output layer has small random weights and a bias placing 1 on the
    /// centre tap of both 1-D filters, so modulation starts near the identity.
    pub fn random_init<R: Rng>(channels: usize, k: usize, rng: &mut R) -> Result<Self> {
        check_k(k)?;
        if channels < 2 {
            return Err(Error::shape("skg", format!("need at least 2 channels, got {channels}")));
        }
        let hidden = channels / 2;
        let first = ConvLayer::gaussian("skg.phi1", channels, hidden, 3, 1, 1, 2f64.sqrt(), rng);
        let mut second = ConvLayer::gaussian("skg.phi2", hidden, channels * (2 * k + 1), 3, 1, 1, 0.01, rng);
        for c in 0..channels {
            second.bias.data_mut()[c * k + k / 2] = T::one();
            second.bias.data_mut()[channels * k + c * k + k / 2] = T::one();
        }
        Ok(Skg {
            channels,
            k,
            phi: [first, second],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn phi_mut(&mut self) -> &mut [ConvLayer<T>; 2] {
        &mut self.phi
    }

    pub fn cast<U: Element>(&self) -> Skg<U> {
        Skg {
            channels: self.channels,
            k: self.k,
            phi: [self.phi[0].cast(), self.phi[1].cast()],
        }
    }

    /// Runs φ on `Z_cs` and splits its `C(2k+1)` channels into F1, F2 and B
    /// in that order.
    pub fn predict_kernels<'t>(&self, scope: &ParamScope<'t, T>, zcs: Var<'t, T>) -> Result<DynamicKernels<'t, T>> {
        let (h, w, c) = match zcs.shape()[..] {
            [h, w, c] if c == self.channels => (h, w, c),
            ref s => {
                return Err(Error::shape(
                    "predict_kernels",
                    format!("feature {s:?} does not have {} channels", self.channels),
                ))
            }
        };
        let k = self.k;
        let x = self.phi[0].forward(scope, zcs)?.relu();
        let raw = self.phi[1].forward(scope, x)?;
        Ok(DynamicKernels {
            f1: raw.slice_channels(0, c * k)?.reshape([h, w, c, k])?,
            f2: raw.slice_channels(c * k, c * k)?.reshape([h, w, c, k])?,
            bias: raw.slice_channels(2 * c * k, c)?.reshape([h, w, c, 1])?,
        })
    }
}

impl<T: Element> Parameters<T> for Skg<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.phi.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.phi.visit_mut(f);
    }
}

/// Order in which the eight channel groups are re-concatenated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPermutation {
    order: [usize; GROUPS],
    seed: Option<u64>,
}

impl GroupPermutation {
    pub fn identity() -> Self {
        GroupPermutation {
            order: std::array::from_fn(|i| i),
            seed: None,
        }
    }

    pub fn from_order(order: [usize; GROUPS]) -> Result<Self> {
        let mut seen = [false; GROUPS];
        for &g in &order {
            if g >= GROUPS || std::mem::replace(&mut seen[g], true) {
                return Err(Error::InvalidArgument(format!(
                    "{order:?} is not a permutation of 0..{GROUPS}"
                )));
            }
        }
        Ok(GroupPermutation { order, seed: None })
    }

    /// Uniformly random order drawn from `rng`.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut order: [usize; GROUPS] = std::array::from_fn(|i| i);
        order.shuffle(rng);
        GroupPermutation { order, seed: None }
    }

    /// Random order from a dedicated generator seeded with `seed`.
    pub fn from_seed(seed: u64) -> Self {
        use rand::SeedableRng;
        let mut p = Self::random(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        p.seed = Some(seed);
        p
    }

    pub fn order(&self) -> &[usize; GROUPS] {
        &self.order
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &g)| i == g)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = [0; GROUPS];
        for (pos, &g) in self.order.iter().enumerate() {
            inv[g] = pos;
        }
        GroupPermutation { order: inv, seed: None }
    }

    /// Channel gather index for `channels` split into eight contiguous groups.
    pub fn channel_index(&self, channels: usize) -> Result<Vec<usize>> {
        if channels % GROUPS != 0 {
            return Err(Error::shape(
                "grouped_shuffle",
                format!("{channels} channels are not divisible into {GROUPS} groups"),
            ));
        }
        let size = channels / GROUPS;
        Ok(self
            .order
            .iter()
            .flat_map(|&g| g * size..(g + 1) * size)
            .collect())
    }
}

/// Splits the channels into eight groups and re-concatenates them in `perm` order.
pub fn grouped_shuffle<'t, T: Element>(z: Var<'t, T>, perm: &GroupPermutation) -> Result<Var<'t, T>> {
    let channels = *z.shape().last().ok_or_else(|| Error::shape("grouped_shuffle", "scalar input"))?;
    let index = perm.channel_index(channels)?;
    z.gather_channels(&index)
}

/// Instance-normalizes `zc`, then applies the per-position separable filters.
pub fn dynamic_modulation<'t, T: Element>(
    zc: Var<'t, T>,
    kernels: &DynamicKernels<'t, T>,
    counter: Option<&MacCounter>,
) -> Result<Var<'t, T>> {
    zc.instance_normalize(T::lit(IN_EPS))
        .dynamic_separable_conv_counted(kernels.f1, kernels.f2, kernels.bias, counter)
}

/// Multiply-accumulates of the separable dynamic filter: `H·W·C·(2k+1)`.
pub fn flops_dynamic(h: usize, w: usize, c: usize, k: usize) -> u64 {
    (h * w * c) as u64 * (2 * k + 1) as u64
}

/// Multiply-accumulates of a dense `k×k` convolution: `H·W·Cout·(Cin·k²+1)`.
pub fn flops_vanilla(h: usize, w: usize, cin: usize, cout: usize, k: usize) -> u64 {
    (h * w * cout) as u64 * (cin * k * k + 1) as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flop_formulas() {
        assert_eq!(flops_dynamic(8, 8, 512, 3), 229_376);
        assert_eq!(flops_vanilla(8, 8, 512, 512, 3), 151_027_712);
    }

    #[test]
    fn rejects_non_permutations() {
        assert!(GroupPermutation::from_order([0, 1, 2, 3, 4, 5, 6, 6]).is_err());
        assert!(GroupPermutation::from_order([0, 1, 2, 3, 4, 5, 6, 8]).is_err());
        let p = GroupPermutation::from_order([2, 3, 5, 4, 6, 1, 7, 0]).unwrap();
        assert_eq!(p.inverse().inverse(), p);
    }

    #[test]
    fn rejects_even_kernel() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(Skg::<f32>::random_init(16, 2, &mut rng).is_err());
        assert!(Skg::<f32>::random_init(16, 0, &mut rng).is_err());
    }
}
