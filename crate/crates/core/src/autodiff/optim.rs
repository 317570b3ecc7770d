use crate::autodiff::param::ParamStore;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Classical momentum SGD: `v <- mu * v + g; p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Velocity buffer of a parameter, if it has been stepped.
    pub fn velocity(&self, index: usize) -> Option<&Tensor> {
        self.velocity.get(index).and_then(|v| v.as_ref())
    }

    pub fn set_velocity(&mut self, index: usize, v: Tensor) {
        if self.velocity.len() <= index {
            self.velocity.resize(index + 1, None);
        }
        self.velocity[index] = Some(v);
    }

    /// Applies one update to every non-frozen parameter, then clears all grads.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (_, p) in store.iter() {
            if !p.frozen && p.grad.is_none() {
                return Err(Error::Usage(format!("parameter `{}` has no gradient", p.name)));
            }
        }
        for (id, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let v = self.velocity[id.index()]
                .get_or_insert_with(|| Tensor::zeros(p.tensor.shape().to_vec()));
            for ((w, vi), g) in p.tensor.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vi = self.momentum * *vi + g;
                *w -= self.lr * *vi;
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(vec![value])).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        let id = s.find("w").unwrap();
        s.get_mut(id).grad = Some(Tensor::from_vec(vec![g]));
    }

    #[test]
    fn plain_step() {
        let mut s = single(1.0);
        set_grad(&mut s, 1.0);
        SgdMomentum::new(0.1, 0.0).step(&mut s).unwrap();
        assert!((s.get(s.find("w").unwrap()).tensor.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let mut s = single(0.0);
        let mut opt = SgdMomentum::new(0.1, 0.9);
        let id = s.find("w").unwrap();
        set_grad(&mut s, 1.0);
        opt.step(&mut s).unwrap();
        assert!((s.get(id).tensor.item() + 0.1).abs() < 1e-12);
        set_grad(&mut s, 1.0);
        opt.step(&mut s).unwrap();
        // v = 0.9 * 1 + 1 = 1.9
        assert!((s.get(id).tensor.item() + 0.29).abs() < 1e-12);
    }

    #[test]
    fn frozen_is_untouched() {
        let mut s = single(3.0);
        let id = s.find("w").unwrap();
        s.get_mut(id).frozen = true;
        set_grad(&mut s, 5.0);
        SgdMomentum::new(0.1, 0.9).step(&mut s).unwrap();
        assert_eq!(s.get(id).tensor.item(), 3.0);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = single(3.0);
        assert!(matches!(
            SgdMomentum::new(0.1, 0.9).step(&mut s),
            Err(Error::Usage(_))
        ));
    }
}
