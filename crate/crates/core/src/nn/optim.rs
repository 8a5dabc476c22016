use crate::scalar::Scalar;

use super::{ParamStore, Tensor};

/// `value <- value - lr * grad` for every parameter, then zero the gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, learning_rate: T) {
    for p in params.iter_mut() {
        for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= learning_rate * g;
        }
        p.grad.fill(T::zero());
    }
}

/// SGD with optional heavy-ball momentum.
///
/// With `momentum == 0` this is exactly [`sgd_step`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: T, momentum: T) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, params: &mut ParamStore<T>) {
        if self.momentum == T::zero() {
            sgd_step(params, self.learning_rate);
            return;
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        }
        let (lr, mu) = (self.learning_rate, self.momentum);
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            for ((v, &g), m) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.data_mut()) {
                *m = mu * *m + g;
                *v -= lr * *m;
            }
            p.grad.fill(T::zero());
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamStore<T>, max_norm: T) -> T {
    let norm = params.grad_norm();
    if norm > max_norm && norm > T::zero() {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    #[test]
    fn zero_learning_rate_keeps_values() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("p", Tensor::from_fn(&[3], |i| i as f32)).unwrap();
        s.get_mut(id).grad = Tensor::full(&[3], 5.0);
        sgd_step(&mut s, 0.0);
        assert_eq!(s.value(id).data(), &[0.0, 1.0, 2.0]);
        assert_eq!(s.get(id).grad.data(), &[0.0; 3]);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("p", Tensor::scalar(1.0)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(2.0);
        sgd_step(&mut s, 0.5);
        assert_eq!(s.value(id).item(), Some(0.0));
    }

    #[test]
    fn quadratic_converges_to_closed_form_minimum() {
        // f(p) = 3 (p - 1.25)^2, minimum at p = 1.25.
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::new(vec![1], vec![-4.0]).unwrap()).unwrap();
        let target = Tensor::new(vec![1], vec![-1.25]).unwrap();
        let mut steps = 0;
        while (s.value(id).data()[0] - 1.25).abs() > 1e-6 {
            let mut tape = Tape::new();
            let p = tape.param(&s, id).unwrap();
            let d = tape.add_const(p, &target).unwrap();
            let sq = tape.square(d).unwrap();
            let sum = tape.sum(sq).unwrap();
            let l = tape.scale(sum, 3.0).unwrap();
            tape.backward(l, &mut s).unwrap();
            sgd_step(&mut s, 0.1);
            steps += 1;
            assert!(steps <= 200, "did not converge");
        }
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let mut a = ParamStore::<f32>::new();
        let id = a.add("p", Tensor::from_fn(&[4], |i| i as f32 * 0.3)).unwrap();
        a.get_mut(id).grad = Tensor::from_fn(&[4], |i| 1.0 - i as f32);
        let mut b = a.clone();
        sgd_step(&mut a, 0.05);
        Sgd::new(0.05, 0.0).step(&mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::zeros(&[2])).unwrap();
        s.get_mut(id).grad = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let before = clip_grad_norm(&mut s, 1.0);
        assert_eq!(before, 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
