//! First-order optimizers over a [`ModelState`](crate::models::ModelState)
//! parameter map. Updates are evaluated in `f64` and rounded once to `T`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{GradientTape, KernelWeights, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd { momentum: f64 },
}

impl Optimizer {
    pub const ADAM: Optimizer = Optimizer::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    pub const SGD: Optimizer = Optimizer::Sgd { momentum: 0.9 };

    pub fn name(&self) -> &'static str {
        match self {
            Optimizer::Adam { .. } => "adam",
            Optimizer::Sgd { .. } => "sgd",
        }
    }
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::ADAM
    }
}

/// Moment accumulators keyed like the parameters they follow.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub optimizer: Optimizer,
    /// Adam first moment, or SGD momentum buffer.
    pub first: BTreeMap<String, KernelWeights<T>>,
    /// Adam second moment; empty for SGD.
    pub second: BTreeMap<String, KernelWeights<T>>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(optimizer: Optimizer, params: &BTreeMap<String, KernelWeights<T>>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.clone(), KernelWeights::zeros(p.spec)))
                .collect()
        };
        Self {
            optimizer,
            first: zeros(),
            second: match optimizer {
                Optimizer::Adam { .. } => zeros(),
                Optimizer::Sgd { .. } => BTreeMap::new(),
            },
            step: 0,
        }
    }

    /// Applies one update to `params`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, KernelWeights<T>>,
        grads: &GradientTape<T>,
        lr: f64,
    ) -> Result<()> {
        match self.optimizer {
            Optimizer::Adam { .. } => adam_step(params, grads, self, lr),
            Optimizer::Sgd { .. } => sgd_step(params, grads, self, lr),
        }
    }
}

fn aligned<'a, T: Real>(
    params: &BTreeMap<String, KernelWeights<T>>,
    grads: &'a GradientTape<T>,
    moments: &BTreeMap<String, KernelWeights<T>>,
) -> Result<Vec<&'a KernelWeights<T>>> {
    let mut out = Vec::with_capacity(params.len());
    for (name, p) in params {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::ModelMismatch(format!("no gradient for {name}")))?;
        let m = moments
            .get(name)
            .ok_or_else(|| Error::ModelMismatch(format!("no optimizer state for {name}")))?;
        for (what, n) in [("gradient", g.param_count()), ("optimizer state", m.param_count())] {
            if n != p.param_count() {
                return Err(Error::shape(
                    "optimizer",
                    format!("{what} of {name}"),
                    p.param_count(),
                    n,
                ));
            }
        }
        if g.values().any(|&v| !v.to_f64().is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        out.push(g);
    }
    Ok(out)
}

/// Bias-corrected Adam update.
pub fn adam_step<T: Real>(
    params: &mut BTreeMap<String, KernelWeights<T>>,
    grads: &GradientTape<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let Optimizer::Adam { beta1, beta2, eps } = state.optimizer else {
        return Err(Error::InvalidConfig("adam_step on a non-Adam optimizer state".into()));
    };
    let gs = aligned(params, grads, &state.first)?;
    aligned(params, grads, &state.second)?;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for ((p, g), (m, v)) in params
        .values_mut()
        .zip(gs)
        .zip(state.first.values_mut().zip(state.second.values_mut()))
    {
        for (((p, g), m), v) in p.values_mut().zip(g.values()).zip(m.values_mut()).zip(v.values_mut()) {
            let g = (*g).to_f64();
            let m1 = beta1 * m.to_f64() + (1.0 - beta1) * g;
            let v1 = beta2 * v.to_f64() + (1.0 - beta2) * g * g;
            *m = T::from_f64(m1);
            *v = T::from_f64(v1);
            let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
            *p = T::from_f64(p.to_f64() - update);
        }
    }
    Ok(())
}

/// Heavy-ball SGD: `v = momentum * v + g`, `p -= lr * v`.
pub fn sgd_step<T: Real>(
    params: &mut BTreeMap<String, KernelWeights<T>>,
    grads: &GradientTape<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    let Optimizer::Sgd { momentum } = state.optimizer else {
        return Err(Error::InvalidConfig("sgd_step on a non-SGD optimizer state".into()));
    };
    let gs = aligned(params, grads, &state.first)?;
    state.step += 1;
    for ((p, g), buf) in params.values_mut().zip(gs).zip(state.first.values_mut()) {
        for ((p, g), b) in p.values_mut().zip(g.values()).zip(buf.values_mut()) {
            let b1 = momentum * b.to_f64() + (*g).to_f64();
            *b = T::from_f64(b1);
            *p = T::from_f64(p.to_f64() - lr * b1);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    fn scalar(v: f64) -> BTreeMap<String, KernelWeights<f64>> {
        let mut w = KernelWeights::zeros(ConvSpec::same(1, 1));
        w.weights[0] = v;
        BTreeMap::from([("p".to_owned(), w)])
    }

    fn tape(g: f64) -> GradientTape<f64> {
        let mut w = KernelWeights::zeros(ConvSpec::same(1, 1));
        w.weights[0] = g;
        let mut t = GradientTape::new();
        t.accumulate("p", w).unwrap();
        t
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = scalar(0.5);
        let mut s = OptimizerState::new(Optimizer::ADAM, &p);
        adam_step(&mut p, &tape(1.0), &mut s, 0.1).unwrap();
        let moved = 0.5 - p["p"].weights[0];
        assert!((moved - 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{moved}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for opt in [Optimizer::ADAM, Optimizer::SGD] {
            let mut p = scalar(0.25);
            let mut s = OptimizerState::new(opt, &p);
            s.step(&mut p, &tape(0.0), 1e-2).unwrap();
            assert_eq!(p["p"].weights[0].to_bits(), 0.25f64.to_bits());
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_before_any_update() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(Optimizer::ADAM, &p);
        let err = adam_step(&mut p, &tape(f64::NAN), &mut s, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(n) if n == "p"));
        assert_eq!(s.step, 0);
        assert_eq!(p["p"].weights[0], 1.0);
    }

    #[test]
    fn sgd_momentum_closed_form() {
        let mut p = scalar(0.0);
        let mut s = OptimizerState::new(Optimizer::Sgd { momentum: 0.5 }, &p);
        for _ in 0..3 {
            s.step(&mut p, &tape(1.0), 0.1).unwrap();
        }
        // Buffers 1, 1.5, 1.75.
        assert!((p["p"].weights[0] + 0.425).abs() < 1e-15);
    }
}
