//! Adam with bias correction, keyed by parameter name.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::store::{tensor_to_u64, u64_to_tensor, WeightStore};
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Element> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `params`. Parameters without an entry
    /// in `grads` are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut dyn Parameters<T>, grads: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut mismatch = None;
        params.visit(&mut |name, p| {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() && mismatch.is_none() {
                    mismatch = Some(Error::ShapeMismatch {
                        op: "adam",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
        });
        if let Some(e) = mismatch {
            return Err(e);
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let (one_b1, one_b2) = (T::lit(1.0 - BETA1), T::lit(1.0 - BETA2));
        let (inv_c1, inv_c2) = (T::lit(1.0 / c1), T::lit(1.0 / c2));
        let (lr, eps) = (T::lit(self.lr), T::lit(EPSILON));
        let moments = &mut self.moments;
        params.visit_mut(&mut |name, p| {
            let (m, v) = moments
                .entry(name.to_owned())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let g = grads.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi * inv_c1;
                let v_hat = vi * inv_c2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

impl Adam<f32> {
    /// Writes moments and the step count under `optimizer.<tag>.`.
    pub fn save_into(&self, store: &mut WeightStore, tag: &str) {
        store.insert(format!("optimizer.{tag}.step"), u64_to_tensor(self.step));
        for (name, (m, v)) in &self.moments {
            store.insert(format!("optimizer.{tag}.m.{name}"), m.clone());
            store.insert(format!("optimizer.{tag}.v.{name}"), v.clone());
        }
    }

    /// Reads the state written by [`Adam::save_into`]; `None` if the section is absent.
    pub fn load_from(store: &WeightStore, tag: &str, lr: f64, params: &dyn Parameters<f32>) -> Result<Option<Self>> {
        let Some(step) = store.get(&format!("optimizer.{tag}.step")) else {
            return Ok(None);
        };
        let step = tensor_to_u64(step)
            .ok_or_else(|| Error::InvalidArgument(format!("optimizer.{tag}.step is malformed")))?;
        let mut moments = BTreeMap::new();
        let mut err = None;
        params.visit(&mut |name, p| {
            let m = store.expect(&format!("optimizer.{tag}.m.{name}"), p.shape());
            let v = store.expect(&format!("optimizer.{tag}.v.{name}"), p.shape());
            match (m, v) {
                (Ok(m), Ok(v)) => {
                    moments.insert(name.to_owned(), (m.clone(), v.clone()));
                }
                (Err(e), _) | (_, Err(e)) => {
                    // A step count with no moments means nothing was updated yet.
                    if step > 0 && err.is_none() {
                        err = Some(e);
                    }
                }
            }
        });
        if let Some(e) = err {
            return Err(e.into());
        }
        Ok(Some(Adam { lr, step, moments }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Tensor<f64>);

    impl Parameters<f64> for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("x", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("x", &mut self.0);
        }
    }

    fn grad(v: f64) -> HashMap<String, Tensor<f64>> {
        HashMap::from([("x".to_owned(), Tensor::from_vec(vec![v]))])
    }

    #[test]
    fn zero_gradient_first_step_is_a_no_op() {
        let mut p = Scalar(Tensor::from_vec(vec![1.5]));
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.0.data(), &[1.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [-3.0, 1e-3, 42.0] {
            let mut p = Scalar(Tensor::from_vec(vec![0.0]));
            let mut opt = Adam::new(0.01);
            opt.step(&mut p, &grad(g)).unwrap();
            let update = p.0.data()[0];
            assert!((update + 0.01 * f64::signum(g)).abs() < 1e-6, "{update}");
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = Scalar(Tensor::from_vec(vec![1.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..100 {
            let x = p.0.data()[0];
            opt.step(&mut p, &grad(2.0 * x)).unwrap();
        }
        assert!(p.0.data()[0].abs() < 0.05, "{}", p.0.data()[0]);
    }

    #[test]
    fn gradient_shape_is_checked() {
        let mut p = Scalar(Tensor::from_vec(vec![1.0]));
        let bad = HashMap::from([("x".to_owned(), Tensor::from_vec(vec![1.0, 2.0]))]);
        assert!(Adam::new(0.1).step(&mut p, &bad).is_err());
    }
}
