use crate::tensor::{ParamStore, Scalar};

/// One step of SGD with classic momentum and L2 weight decay:
///
/// ```text
/// g   = grad + weight_decay * value
/// buf = momentum * buf + g
/// value -= lr * buf
/// ```
///
/// Frozen parameters keep their value and momentum untouched. Gradients of
/// every parameter, frozen or not, are cleared afterwards so stale gradients
/// can never leak into the next step.
pub fn sgd_step<E: Scalar>(store: &mut ParamStore<E>, lr: E, momentum: E, weight_decay: E) {
    for param in store.iter_mut() {
        if !param.frozen {
            let value = param.value.data_mut();
            let grad = param.grad.data();
            let buf = param.momentum.data_mut();
            for i in 0..value.len() {
                let g = grad[i] + weight_decay * value[i];
                buf[i] = momentum * buf[i] + g;
                value[i] = value[i] - lr * buf[i];
            }
        }
        param.clear_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> (ParamStore<f64>, crate::tensor::ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::full(vec![1], value));
        store.get_mut(id).grad = Tensor::full(vec![1], grad);
        (store, id)
    }

    #[test]
    fn plain_descent_without_momentum_or_decay() {
        let (mut store, id) = store_with(1.0, 0.5);
        sgd_step(&mut store, 0.1, 0.0, 0.0);
        assert!((store.value(id).data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn momentum_accumulates_over_two_steps() {
        // Constant gradient g: after two steps the total displacement is
        // lr*g + lr*(momentum*g + g) = lr*g*(2 + momentum) = lr*g*2.9.
        let (mut store, id) = store_with(0.0, 1.0);
        sgd_step(&mut store, 0.1, 0.9, 0.0);
        store.get_mut(id).grad = Tensor::full(vec![1], 1.0);
        sgd_step(&mut store, 0.1, 0.9, 0.0);
        assert!((store.value(id).data()[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        // No gradient: the only force is decay. value = 1 - lr*wd.
        let (mut store, id) = store_with(1.0, 0.0);
        sgd_step(&mut store, 0.1, 0.0, 0.01);
        assert!((store.value(id).data()[0] - 0.999).abs() < 1e-12);
    }

    #[test]
    fn frozen_parameters_do_not_move_but_grads_clear() {
        let (mut store, id) = store_with(1.0, 123.0);
        store.get_mut(id).frozen = true;
        sgd_step(&mut store, 0.1, 0.9, 0.01);
        assert_eq!(store.value(id).data(), &[1.0]);
        assert_eq!(store.get(id).momentum.data(), &[0.0]);
        assert_eq!(store.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn zero_hyperparameters_are_a_no_op() {
        let (mut store, id) = store_with(2.0, 5.0);
        sgd_step(&mut store, 0.0, 0.0, 0.0);
        assert_eq!(store.value(id).data(), &[2.0]);
    }
}
