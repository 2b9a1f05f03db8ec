//! Named convolution layers and their binding onto a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Element, Gradients, Tape, Tensor, Var};

/// Visits named parameter tensors in a fixed order.
pub trait Parameters<T: Element> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

/// A 2-D convolution with weight `[Cout, Cin, k, k]` and bias `[Cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub name: String,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> ConvLayer<T> {
    pub fn zeros(name: impl Into<String>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        ConvLayer {
            name: name.into(),
            weight: Tensor::zeros([cout, cin, k, k]),
            bias: Tensor::zeros([cout]),
            stride,
            pad,
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(fan_in)`, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn gaussian<R: Rng>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(name, cin, cout, k, stride, pad);
        let std = gain / ((cin * k * k) as f64).sqrt();
        fill_normal(&mut layer.weight, std, rng);
        layer
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<'t>(&self, scope: &ParamScope<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = scope.bind(&self.weight_name(), &self.weight);
        let b = scope.bind(&self.bias_name(), &self.bias);
        x.conv2d(w, b, self.stride, self.pad)
    }

    pub fn cast<U: Element>(&self) -> ConvLayer<U> {
        ConvLayer {
            name: self.name.clone(),
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

impl<T: Element> Parameters<T> for ConvLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&self.weight_name(), &self.weight);
        f(&self.bias_name(), &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let (wn, bn) = (self.weight_name(), self.bias_name());
        f(&wn, &mut self.weight);
        f(&bn, &mut self.bias);
    }
}

impl<T: Element, P: Parameters<T>> Parameters<T> for [P] {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.iter().for_each(|p| p.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.iter_mut().for_each(|p| p.visit_mut(f));
    }
}

impl<T: Element, P: Parameters<T>> Parameters<T> for Vec<P> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.as_slice().visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.as_mut_slice().visit_mut(f);
    }
}

pub(crate) fn fill_normal<T: Element, R: Rng>(t: &mut Tensor<T>, std: f64, rng: &mut R) {
    if std == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    for v in t.data_mut() {
        *v = T::lit(normal.sample(rng));
    }
}

/// Binds parameter tensors onto a tape by name.
///
/// Binding the same name twice returns the same leaf, so a layer used by
/// several forward passes on one tape accumulates a single gradient.
/// Frozen scopes bind constants, which also skips weight gradients inside
/// the convolution backward.
pub struct ParamScope<'t, T: Element> {
    tape: &'t Tape<T>,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
}

impl<'t, T: Element> ParamScope<'t, T> {
    pub fn trainable(tape: &'t Tape<T>) -> Self {
        Self::new(tape, true)
    }

    pub fn frozen(tape: &'t Tape<T>) -> Self {
        Self::new(tape, false)
    }

    fn new(tape: &'t Tape<T>, trainable: bool) -> Self {
        ParamScope {
            tape,
            trainable,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn bind(&self, name: &str, value: &Tensor<T>) -> Var<'t, T> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return v;
        }
        let v = self.tape.leaf(value.clone(), self.trainable);
        self.bound.borrow_mut().insert(name.to_owned(), v);
        v
    }

    /// Gradient for every bound parameter, zeros for unused ones.
    pub fn gradients(&self, grads: &Gradients<T>) -> HashMap<String, Tensor<T>> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, &v)| (name.clone(), grads.wrt(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rebinding_shares_the_leaf_and_accumulates() {
        let tape = Tape::<f64>::new();
        let scope = ParamScope::trainable(&tape);
        let mut layer = ConvLayer::zeros("c", 1, 1, 1, 1, 0);
        layer.weight.data_mut()[0] = 2.0;
        let x = tape.constant(Tensor::full([2, 2, 1], 1.0));
        let a = layer.forward(&scope, x).unwrap();
        let b = layer.forward(&scope, x).unwrap();
        let grads = tape.backward(a.add(b).unwrap().sum()).unwrap();
        let g = scope.gradients(&grads);
        assert_eq!(g["c.weight"].data(), &[8.0]);
        assert_eq!(g["c.bias"].data(), &[8.0]);
    }

    #[test]
    fn gaussian_init_is_seeded() {
        let a = ConvLayer::<f32>::gaussian("c", 3, 4, 3, 1, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let b = ConvLayer::<f32>::gaussian("c", 3, 4, 3, 1, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let c = ConvLayer::<f32>::gaussian("c", 3, 4, 3, 1, 1, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
