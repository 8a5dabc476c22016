//! Central finite differences, used as an independent oracle for
//! [`Tape::backward`](super::Tape::backward).
//!
//! Only forward evaluations of the loss are used here, never the tape's
//! backward rules.

use crate::scalar::Scalar;

use super::{NnError, ParamStore, Tensor};

/// Numerical gradient of `loss` with respect to every parameter value.
pub fn numerical_gradient<T, F>(store: &ParamStore<T>, step: T, mut loss: F) -> Result<Vec<Tensor<T>>, NnError>
where
    T: Scalar,
    F: FnMut(&ParamStore<T>) -> Result<T, NnError>,
{
    let mut probe = store.clone();
    let two = T::lit(2.0);
    let mut out = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let mut g = Tensor::zeros(store.value(id).shape());
        for i in 0..n {
            let orig = probe.value(id).data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let plus = loss(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let minus = loss(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / (two * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest per-coordinate relative error `|a - n| / max(|a|, |n|, floor)`.
///
/// Coordinates where both gradients are below `floor` in magnitude are
/// compared on the absolute scale of `floor`.
pub fn max_relative_error<T: Scalar>(analytic: &[Tensor<T>], numeric: &[Tensor<T>], floor: T) -> T {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tape;

    #[test]
    fn quadratic_numeric_gradient() {
        let mut s = ParamStore::<f64>::new();
        s.add("x", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
        let g = numerical_gradient(&s, 1e-5, |p| {
            let d = p.value(p.id_of("x").unwrap()).data();
            Ok(d[0] * d[0] + 3.0 * d[1])
        })
        .unwrap();
        assert!((g[0].data()[0] - 3.0).abs() < 1e-8);
        assert!((g[0].data()[1] - 3.0).abs() < 1e-8);
    }

    /// Small random network with 32-bit parameters and analytic gradients.
    /// The oracle evaluates the same network in f64 on the exact f32 values
    /// (step 1e-3), so rounding in the oracle does not mask errors.
    #[test]
    fn small_network_f32() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::<f32>::new();
        s.add("k", Tensor::from_fn(&[2, 1, 2, 2], |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        s.add("w", Tensor::from_fn(&[3, 2], |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        s.add("b", Tensor::from_fn(&[3], |_| rng.gen_range(-1.0..1.0))).unwrap();
        let img: Tensor<f32> = Tensor::from_fn(&[1, 3, 3], |_| rng.gen_range(-1.0..1.0));

        fn forward<T: Scalar>(
            p: &ParamStore<T>,
            img: &Tensor<T>,
            tape: &mut Tape<T>,
        ) -> Result<crate::nn::Var, NnError> {
            let (k, w, b) = (p.id_of("k").unwrap(), p.id_of("w").unwrap(), p.id_of("b").unwrap());
            let x = tape.constant(img.clone())?;
            let kv = tape.param(p, k)?;
            let c = tape.conv2d(x, kv, 1, 0)?;
            let sg = tape.sigmoid(c)?;
            let pool = tape.global_max_pool(sg)?;
            let wv = tape.param(p, w)?;
            let bv = tape.param(p, b)?;
            let a = tape.affine(pool, wv, bv)?;
            let sm = tape.softmax(a, 0)?;
            let sq = tape.square(sm)?;
            tape.sum(sq)
        }

        let mut tape = Tape::new();
        let l = forward(&s, &img, &mut tape).unwrap();
        tape.backward(l, &mut s).unwrap();
        let analytic: Vec<Tensor<f64>> = s.iter().map(|(_, p)| p.grad.cast()).collect();
        let img64 = img.cast::<f64>();
        let numeric = numerical_gradient(&s.cast::<f64>(), 1e-3, |p| {
            let mut t = Tape::new();
            let l = forward(p, &img64, &mut t)?;
            Ok(t.value(l).item().unwrap())
        })
        .unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-3, "relative error {err}");
    }
}
