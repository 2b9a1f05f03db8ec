//! Style alignment encoding: multi-head content-to-style attention with
//! content-based gating.
//!
//! Each head projects the content feature into queries and the style feature
//! into keys and values, scores every query against every key by sharpened
//! cosine similarity, and zeroes the entries that fall at or below a
//! per-query threshold predicted from the content feature. The surviving
//! weights average the value vectors; head outputs are concatenated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ParamScope, Parameters};
use crate::tensor::{Element, Tensor, Var};

pub const COSINE_FLOOR: f64 = 1e-8;
pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct SaeConfig {
    pub heads: usize,
    /// Softmax sharpness applied to cosine similarities.
    pub alpha: f64,
    /// One `(λ, β)` pair per query shared by all heads instead of one per head.
    pub shared_gate: bool,
    /// Kernel size of the query/key/value projections.
    pub proj_kernel: usize,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            heads: 8,
            alpha: 10.0,
            shared_gate: false,
            proj_kernel: 3,
        }
    }
}

/// Projection and gate-network weights.
///
/// The query, key and value projections are stored as single `C → C`
/// convolutions; head `g` owns output channels `g·C/G .. (g+1)·C/G`, which is
/// the same as `G` separate `C → C/G` convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sae<T> {
    pub config: SaeConfig,
    channels: usize,
    query: ConvLayer<T>,
    key: ConvLayer<T>,
    value: ConvLayer<T>,
    /// Gate network ψ. Output channel `2g` is λ and `2g + 1` is β of head `g`.
    gate: [ConvLayer<T>; 3],
}

/// Per-query gate parameters, each `[N_c]`.
#[derive(Clone, Copy, Debug)]
pub struct Gate<'t, T: Element> {
    pub lambda: Var<'t, T>,
    pub beta: Var<'t, T>,
}

/// Intermediate maps of one head, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct HeadMaps<'t, T: Element> {
    pub attention: Var<'t, T>,
    pub masked: Var<'t, T>,
}

impl SaeConfig {
    /// Checks the settings against the feature channel count.
    pub fn validate(&self, channels: usize) -> Result<()> {
        check_divisible(channels, self.heads)?;
        if channels < 4 {
            return Err(Error::shape("sae", format!("need at least 4 channels, got {channels}")));
        }
        if self.proj_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "projection kernel must be odd, got {}",
                self.proj_kernel
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!("alpha must be finite, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_divisible(c: usize, g: usize) -> Result<()> {
    if g == 0 || c % g != 0 {
        return Err(Error::shape(
            "sae",
            format!("{c} channels cannot be split into {g} heads"),
        ));
    }
    Ok(())
}

/// `softmax_v(alpha · cos(q_u, k_v))` for query rows `[N_c, d]` and key rows `[N_s, d]`.
pub fn alignment_attention<'t, T: Element>(q: Var<'t, T>, k: Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::ShapeMismatch {
            op: "alignment_attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let floor = T::lit(COSINE_FLOOR);
    let qn = q.l2_normalize_rows(floor);
    let kn = k.l2_normalize_rows(floor);
    Ok(qn.matmul(kn.transpose()?)?.mul_scalar(T::lit(alpha)).softmax_rows())
}

/// Keeps `A(u, v)` where `A(u, v) > λ(u)·mean_v A(u, ·) + β(u)` and zeroes the rest.
pub fn cgm_mask<'t, T: Element>(a: Var<'t, T>, gate: Gate<'t, T>) -> Result<Var<'t, T>> {
    let shape = a.shape();
    let [nc, ns] = shape[..] else {
        return Err(Error::shape("cgm_mask", format!("expected a matrix, got {shape:?}")));
    };
    let tau = gate.lambda.mul(a.row_mean())?.add(gate.beta)?;
    if tau.shape() != [nc] {
        return Err(Error::ShapeMismatch {
            op: "cgm_mask",
            lhs: vec![nc],
            rhs: tau.shape(),
        });
    }
    a.mul(a.sub(tau.repeat_cols(ns))?.sign())
}

/// `Z(u) = Σ_v Ā(u, v)·V(v)`.
pub fn aggregate<'t, T: Element>(a: Var<'t, T>, values: Var<'t, T>) -> Result<Var<'t, T>> {
    a.matmul(values)
}

impl<T: Element> Sae<T> {
    /// Random projections; the last gate layer starts at zero so every
    /// threshold is zero and the mask is open.
    pub fn random_init<R: Rng>(channels: usize, config: SaeConfig, rng: &mut R) -> Result<Self> {
        config.validate(channels)?;
        let (c, pk) = (channels, config.proj_kernel);
        let hidden = c / 4;
        let gate_out = if config.shared_gate { 2 } else { 2 * config.heads };
        let query = ConvLayer::gaussian("sae.query", c, c, pk, 1, pk / 2, 1.0, rng);
        let key = ConvLayer::gaussian("sae.key", c, c, pk, 1, pk / 2, 1.0, rng);
        let value = ConvLayer::gaussian("sae.value", c, c, pk, 1, pk / 2, 1.0, rng);
        let gate = [
            ConvLayer::gaussian("sae.gate1", c, hidden, 3, 1, 1, 2f64.sqrt(), rng),
            ConvLayer::gaussian("sae.gate2", hidden, hidden, 3, 1, 1, 2f64.sqrt(), rng),
            ConvLayer::zeros("sae.gate3", hidden, gate_out, 3, 1, 1),
        ];
        Ok(Sae {
            config,
            channels,
            query,
            key,
            value,
            gate,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cast<U: Element>(&self) -> Sae<U> {
        Sae {
            config: self.config.clone(),
            channels: self.channels,
            query: self.query.cast(),
            key: self.key.cast(),
            value: self.value.cast(),
            gate: [self.gate[0].cast(), self.gate[1].cast(), self.gate[2].cast()],
        }
    }

    pub fn gate_layers_mut(&mut self) -> &mut [ConvLayer<T>; 3] {
        &mut self.gate
    }

    pub fn projections_mut(&mut self) -> [&mut ConvLayer<T>; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }

    fn check_feature(&self, name: &str, z: &Var<'_, T>) -> Result<(usize, usize)> {
        match z.shape()[..] {
            [h, w, c] if c == self.channels => Ok((h, w)),
            ref s => Err(Error::shape(
                "sae",
                format!("{name} feature {s:?} does not have {} channels", self.channels),
            )),
        }
    }

    /// Gate network output reshaped to `[N_c, G', 2]` with `G'` = 1 when shared.
    pub fn cgm_params<'t>(&self, scope: &ParamScope<'t, T>, zc: Var<'t, T>) -> Result<Var<'t, T>> {
        let (h, w) = self.check_feature("content", &zc)?;
        let x = self.gate[0].forward(scope, zc)?.relu();
        let x = self.gate[1].forward(scope, x)?.relu();
        let x = self.gate[2].forward(scope, x)?;
        let groups = x.shape()[2] / 2;
        x.reshape([h * w, groups, 2])
    }

    fn head_gate<'t>(params: Var<'t, T>, head: usize, shared: bool) -> Result<Gate<'t, T>> {
        let s = params.shape();
        let (n, groups) = (s[0], s[1]);
        let g = if shared { 0 } else { head };
        let flat = params.reshape([n, groups * 2])?;
        Ok(Gate {
            lambda: flat.slice_channels(2 * g, 1)?.reshape([n])?,
            beta: flat.slice_channels(2 * g + 1, 1)?.reshape([n])?,
        })
    }

    /// Aligned feature `Z_cs`, shaped like `zc`.
    pub fn forward<'t>(&self, scope: &ParamScope<'t, T>, zc: Var<'t, T>, zs: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_maps(scope, zc, zs)?.0)
    }

    /// Like [`Sae::forward`], also returning each head's attention before and after masking.
    #[allow(clippy::type_complexity)]
    pub fn forward_with_maps<'t>(
        &self,
        scope: &ParamScope<'t, T>,
        zc: Var<'t, T>,
        zs: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Vec<HeadMaps<'t, T>>)> {
        let (hc, wc) = self.check_feature("content", &zc)?;
        let (hs, ws) = self.check_feature("style", &zs)?;
        let (nc, ns) = (hc * wc, hs * ws);
        let eps = T::lit(IN_EPS);
        let q = self.query.forward(scope, zc.instance_normalize(eps))?;
        let k = self.key.forward(scope, zs.instance_normalize(eps))?;
        let v = self.value.forward(scope, zs)?;
        let (q, k, v) = (q.reshape([nc, self.channels])?, k.reshape([ns, self.channels])?, v.reshape([ns, self.channels])?);
        let params = self.cgm_params(scope, zc)?;

        let d = self.channels / self.config.heads;
        let mut outputs = Vec::with_capacity(self.config.heads);
        let mut maps = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let a = alignment_attention(q.slice_channels(h * d, d)?, k.slice_channels(h * d, d)?, self.config.alpha)?;
            let masked = cgm_mask(a, Self::head_gate(params, h, self.config.shared_gate)?)?;
            outputs.push(aggregate(masked, v.slice_channels(h * d, d)?)?);
            maps.push(HeadMaps { attention: a, masked });
        }
        let z = if outputs.len() == 1 {
            outputs[0]
        } else {
            Var::concat_channels(&outputs)?
        };
        Ok((z.reshape([hc, wc, self.channels])?, maps))
    }
}

impl<T: Element> Parameters<T> for Sae<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.gate.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.gate.visit_mut(f);
    }
}
