//! Central finite-difference verification of analytic gradients.
//!
//! These helpers run the model in whatever float type it was built with;
//! the acceptance checks build toy models in f64 where central differences
//! resolve relative errors well below 1e-3.

use super::{Module, ParamVisitor};
use ndarray::{Array2, ArrayViewMutD, NdFloat};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked_entries: usize,
    pub worst_param: String,
}

struct CollectGrads<F> {
    grads: Vec<(String, Vec<F>)>,
}
impl<F: NdFloat> ParamVisitor<F> for CollectGrads<F> {
    fn visit(&mut self, name: &str, _v: &mut ArrayViewMutD<F>, g: &mut ArrayViewMutD<F>) {
        self.grads.push((name.to_string(), g.iter().cloned().collect()));
    }
}

struct PerturbEntry<F> {
    target_param: usize,
    target_entry: usize,
    delta: F,
    seen: usize,
    old_value: Option<F>,
}
impl<F: NdFloat> ParamVisitor<F> for PerturbEntry<F> {
    fn visit(&mut self, _name: &str, v: &mut ArrayViewMutD<F>, _g: &mut ArrayViewMutD<F>) {
        if self.seen == self.target_param {
            let slot = v.iter_mut().nth(self.target_entry).expect("entry index in range");
            self.old_value = Some(*slot);
            *slot = *slot + self.delta;
        }
        self.seen += 1;
    }
}

struct RestoreEntry<F> {
    target_param: usize,
    target_entry: usize,
    value: F,
    seen: usize,
}
impl<F: NdFloat> ParamVisitor<F> for RestoreEntry<F> {
    fn visit(&mut self, _name: &str, v: &mut ArrayViewMutD<F>, _g: &mut ArrayViewMutD<F>) {
        if self.seen == self.target_param {
            *v.iter_mut().nth(self.target_entry).expect("entry index in range") = self.value;
        }
        self.seen += 1;
    }
}

fn rel_err(fd: f64, analytic: f64) -> f64 {
    let scale = fd.abs().max(analytic.abs());
    if scale < 1e-7 {
        // Both effectively zero; count as exact agreement.
        0.0
    } else {
        (fd - analytic).abs() / scale.max(1e-7)
    }
}

/// Verify parameter gradients against central finite differences.
///
/// `loss_fn` must zero nothing and mutate nothing except the accumulated
/// gradients: it runs forward + backward on fixed data and returns the
/// loss. Gradients are cleared here before each evaluation. When
/// `entries_per_param` is 0 every entry of every parameter is checked.
pub fn check_parameter_grads<F: NdFloat, M: Module<F>>(
    model: &mut M,
    mut loss_fn: impl FnMut(&mut M) -> F,
    eps: f64,
    entries_per_param: usize,
) -> GradCheckReport {
    super::zero_grads(model);
    let _ = loss_fn(model);
    let mut collect = CollectGrads { grads: Vec::new() };
    model.visit_params("", &mut collect);
    let analytic = collect.grads;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked_entries: 0,
        worst_param: String::new(),
    };

    for (pidx, (name, grads)) in analytic.iter().enumerate() {
        let len = grads.len();
        let indices: Vec<usize> = if entries_per_param == 0 || len <= entries_per_param {
            (0..len).collect()
        } else {
            // Deterministic spread across the parameter.
            (0..entries_per_param)
                .map(|i| i * len / entries_per_param)
                .collect()
        };
        for &eidx in &indices {
            let mut perturb = PerturbEntry {
                target_param: pidx,
                target_entry: eidx,
                delta: F::from(eps).unwrap(),
                seen: 0,
                old_value: None,
            };
            model.visit_params("", &mut perturb);
            let old = perturb.old_value.expect("parameter entry exists");
            super::zero_grads(model);
            let l_plus = loss_fn(model);

            let mut restore = RestoreEntry {
                target_param: pidx,
                target_entry: eidx,
                value: old - F::from(eps).unwrap(),
                seen: 0,
            };
            model.visit_params("", &mut restore);
            super::zero_grads(model);
            let l_minus = loss_fn(model);

            let mut restore = RestoreEntry {
                target_param: pidx,
                target_entry: eidx,
                value: old,
                seen: 0,
            };
            model.visit_params("", &mut restore);

            let fd = (l_plus.to_f64().unwrap() - l_minus.to_f64().unwrap()) / (2.0 * eps);
            let err = rel_err(fd, grads[eidx].to_f64().unwrap());
            report.checked_entries += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{name}[{eidx}]");
            }
        }
    }
    report
}

/// Verify the gradient w.r.t. a 2-D input tensor. `run` performs
/// forward + backward and returns (loss, input gradient).
pub fn check_input_grads<F: NdFloat, M>(
    model: &mut M,
    x: &Array2<F>,
    mut run: impl FnMut(&mut M, &Array2<F>) -> (F, Array2<F>),
    eps: f64,
) -> f64 {
    let (_, gx) = run(model, x);
    let mut max_err = 0.0f64;
    for i in 0..x.len() {
        let (r, c) = (i / x.dim().1, i % x.dim().1);
        let mut xp = x.clone();
        xp[[r, c]] = xp[[r, c]] + F::from(eps).unwrap();
        let (lp, _) = run(model, &xp);
        let mut xm = x.clone();
        xm[[r, c]] = xm[[r, c]] - F::from(eps).unwrap();
        let (lm, _) = run(model, &xm);
        let fd = (lp.to_f64().unwrap() - lm.to_f64().unwrap()) / (2.0 * eps);
        max_err = max_err.max(rel_err(fd, gx[[r, c]].to_f64().unwrap()));
    }
    max_err
}
