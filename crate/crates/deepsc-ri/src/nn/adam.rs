//! Adam optimizer driven by the parameter visitor.
//!
//! Moment buffers are created on the first step in visitation order and keyed
//! by parameter path, so the optimizer state can be checkpointed and restored
//! alongside the model.

use super::{fl, Module, ParamVisitor};
use ndarray::{ArrayD, ArrayViewMutD, NdFloat};

#[derive(Debug, Clone)]
pub struct Adam<F> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    entries: Vec<AdamEntry<F>>,
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamEntry<F> {
    pub name: String,
    pub m: ArrayD<F>,
    pub v: ArrayD<F>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            entries: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Change the learning rate (used by the schedule between steps).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn entries(&self) -> &[AdamEntry<F>] {
        &self.entries
    }

    /// Rebuild optimizer state from a checkpoint.
    pub fn restore(lr: f64, t: u64, entries: Vec<AdamEntry<F>>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t,
            entries,
        }
    }

    /// Apply one update using the gradients currently accumulated in the
    /// model. Does not clear the gradients.
    pub fn step(&mut self, model: &mut dyn Module<F>) {
        self.t += 1;
        let mut visitor = StepVisitor {
            lr: fl(self.lr),
            beta1: fl(self.beta1),
            beta2: fl(self.beta2),
            eps: fl(self.eps),
            bc1: fl(1.0 - self.beta1.powi(self.t as i32)),
            bc2: fl(1.0 - self.beta2.powi(self.t as i32)),
            entries: &mut self.entries,
            idx: 0,
            first_step: self.t == 1,
        };
        model.visit_params("", &mut visitor);
        assert_eq!(
            visitor.idx,
            visitor.entries.len(),
            "model exposed fewer parameters than the optimizer state holds"
        );
    }
}

struct StepVisitor<'a, F> {
    lr: F,
    beta1: F,
    beta2: F,
    eps: F,
    /// 1 - beta1^t and 1 - beta2^t, the bias-correction denominators.
    bc1: F,
    bc2: F,
    entries: &'a mut Vec<AdamEntry<F>>,
    idx: usize,
    first_step: bool,
}

impl<F: NdFloat> ParamVisitor<F> for StepVisitor<'_, F> {
    fn visit(&mut self, name: &str, v: &mut ArrayViewMutD<F>, g: &mut ArrayViewMutD<F>) {
        if self.first_step && self.idx == self.entries.len() {
            self.entries.push(AdamEntry {
                name: name.to_string(),
                m: ArrayD::zeros(v.raw_dim()),
                v: ArrayD::zeros(v.raw_dim()),
            });
        }
        let entry = self
            .entries
            .get_mut(self.idx)
            .unwrap_or_else(|| panic!("no optimizer state for parameter {name}"));
        assert_eq!(
            entry.name, name,
            "parameter order changed between optimizer steps"
        );
        self.idx += 1;

        let one = F::one();
        ndarray::Zip::from(v)
            .and(&mut entry.m)
            .and(&mut entry.v)
            .and(&*g)
            .for_each(|p, m, s, &grad| {
                *m = self.beta1 * *m + (one - self.beta1) * grad;
                *s = self.beta2 * *s + (one - self.beta2) * grad * grad;
                let m_hat = *m / self.bc1;
                let s_hat = *s / self.bc2;
                *p = *p - self.lr * m_hat / (s_hat.sqrt() + self.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Param, ParamVisitor};
    use ndarray::{arr1, Ix1};

    struct Scalar(Param<f64, Ix1>);
    impl Module<f64> for Scalar {
        fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<f64>) {
            self.0.visit(&crate::nn::path(prefix, "w"), visitor);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the very first update is lr * g / (|g| + eps),
        // i.e. essentially lr in the direction of the gradient sign.
        let mut model = Scalar(Param::new(arr1(&[1.0f64])));
        model.0.g[0] = 0.5;
        let mut opt = Adam::new(0.1);
        opt.step(&mut model);
        assert!((model.0.v[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut model = Scalar(Param::new(arr1(&[5.0f64])));
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            model.0.g[0] = 2.0 * (model.0.v[0] - 3.0);
            opt.step(&mut model);
        }
        assert!((model.0.v[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    #[should_panic(expected = "parameter order changed")]
    fn renamed_parameter_is_rejected() {
        struct Renamed(Param<f64, Ix1>, &'static str);
        impl Module<f64> for Renamed {
            fn visit_params(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<f64>) {
                self.0.visit(&crate::nn::path(prefix, self.1), visitor);
            }
        }
        let mut model = Renamed(Param::new(arr1(&[1.0f64])), "a");
        let mut opt = Adam::new(0.1);
        opt.step(&mut model);
        model.1 = "b";
        opt.step(&mut model);
    }
}
