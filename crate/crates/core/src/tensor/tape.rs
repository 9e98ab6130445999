use std::collections::BTreeMap;

use super::{KernelWeights, Real};
use crate::error::{Error, Result};

/// Per-parameter gradient accumulators filled in by a backward pass.
///
/// Activations needed by backward are held by each model's own forward cache;
/// the tape only owns the gradients so that they can be handed to an optimizer.
#[derive(Clone, Debug, Default)]
pub struct GradientTape<T = f32> {
    grads: BTreeMap<String, KernelWeights<T>>,
}

impl<T: Real> GradientTape<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    /// Adds `grad` into the accumulator for `name`.
    pub fn accumulate(&mut self, name: &str, grad: KernelWeights<T>) -> Result<()> {
        match self.grads.get_mut(name) {
            None => {
                self.grads.insert(name.to_owned(), grad);
            }
            Some(acc) => {
                if acc.spec != grad.spec {
                    return Err(Error::ModelMismatch(format!(
                        "gradient for {name} accumulated with two layer shapes"
                    )));
                }
                for (a, g) in acc.values_mut().zip(grad.values()) {
                    *a += *g;
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&KernelWeights<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &KernelWeights<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Checks that every parameter has a gradient of exactly its shape.
    pub fn check_covers(&self, params: &BTreeMap<String, KernelWeights<T>>) -> Result<()> {
        for (name, p) in params {
            let g = self
                .grads
                .get(name)
                .ok_or_else(|| Error::ModelMismatch(format!("no gradient for {name}")))?;
            if g.spec != p.spec || g.param_count() != p.param_count() {
                return Err(Error::shape(
                    "gradient tape",
                    name.clone(),
                    p.param_count(),
                    g.param_count(),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvSpec;

    #[test]
    fn accumulate_sums() {
        let spec = ConvSpec::same(1, 1);
        let mut tape = GradientTape::<f64>::new();
        let mut g = KernelWeights::zeros(spec);
        g.weights[0] = 1.0;
        tape.accumulate("a", g.clone()).unwrap();
        tape.accumulate("a", g).unwrap();
        assert_eq!(tape.get("a").unwrap().weights[0], 2.0);
        let other = KernelWeights::zeros(ConvSpec::same(2, 1));
        assert!(tape.accumulate("a", other).is_err());
    }
}
