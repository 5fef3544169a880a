use super::{AutodiffError, Gradients, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub momentum: Tensor,
    pub grad: Option<Tensor>,
    /// Frozen parameters are stored and checkpointed but never updated.
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> ParamId {
        self.push(name, value, false)
    }

    fn push(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.to_string(),
            momentum: Tensor::zeros(value.dims()),
            value,
            grad: None,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Resets every trainable gradient to zeros.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = p.trainable.then(|| Tensor::zeros(p.value.dims()));
        }
    }

    /// Adds the gradients of every parameter bound on `tape`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) {
        for &(var, id) in tape.bound_params() {
            let p = &mut self.params[id.0];
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(var) else { continue };
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.dims()));
            for (b, v) in buf.data_mut().iter_mut().zip(g) {
                *b += v;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.99,
            weight_decay: 1e-4,
        }
    }
}

/// `v = momentum * v + g + decay * theta; theta -= lr * v`, then clears gradients.
pub fn sgd_step(store: &mut ParamStore, cfg: &SgdConfig) -> Result<(), AutodiffError> {
    if let Some(p) = store.params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(AutodiffError::MissingGradient(p.name.clone()));
    }
    for p in store.params.iter_mut().filter(|p| p.trainable) {
        let g = p.grad.take().expect("checked above");
        let (theta, v) = (p.value.data_mut(), p.momentum.data_mut());
        for k in 0..theta.len() {
            v[k] = cfg.momentum * v[k] + g.data()[k] + cfg.weight_decay * theta[k];
            theta[k] -= cfg.lr * v[k];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(theta: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::scalar(theta));
        (s, id)
    }

    fn set_grad(s: &mut ParamStore, id: ParamId, g: f64) {
        s.get_mut(id).grad = Some(Tensor::scalar(g));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = one_param(0.7);
        set_grad(&mut s, id, 0.0);
        sgd_step(
            &mut s,
            &SgdConfig {
                weight_decay: 0.0,
                ..SgdConfig::default()
            },
        )
        .unwrap();
        assert_eq!(s.get(id).value.item(), 0.7);
    }

    #[test]
    fn single_step_closed_form() {
        let (mut s, id) = one_param(1.0);
        set_grad(&mut s, id, 1.0);
        sgd_step(
            &mut s,
            &SgdConfig {
                lr: 0.1,
                ..SgdConfig::default()
            },
        )
        .unwrap();
        assert!((s.get(id).momentum.item() - 1.0001).abs() < 1e-12);
        assert!((s.get(id).value.item() - 0.89999).abs() < 1e-12);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn momentum_recurrence() {
        let (mut s, id) = one_param(1.0);
        let cfg = SgdConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        for _ in 0..2 {
            set_grad(&mut s, id, 1.0);
            sgd_step(&mut s, &cfg).unwrap();
        }
        assert!((s.get(id).momentum.item() - 1.99).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_reported() {
        let (mut s, _) = one_param(1.0);
        assert_eq!(
            sgd_step(&mut s, &SgdConfig::default()),
            Err(AutodiffError::MissingGradient("theta".into()))
        );
    }
}
