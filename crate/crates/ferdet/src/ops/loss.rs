use crate::error::{FerError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{lit, Scalar, Tensor};

use super::basic::{sigmoid_scalar, softplus_scalar};

/// Numerically stable binary cross-entropy on raw logits, averaged over all
/// elements. Targets are constants in [0,1].
pub fn bce_with_logits<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &Tensor<T>) -> Result<Var> {
    let tz = g.rc(logits);
    if tz.shape() != targets.shape() {
        return Err(FerError::shape(format!(
            "bce_with_logits: logits {:?} vs targets {:?}",
            tz.shape(),
            targets.shape()
        )));
    }
    let n = tz.numel();
    let invn = lit::<T>(1.0 / n as f64);
    let mut acc = T::zero();
    for (&z, &t) in tz.data().iter().zip(targets.data()) {
        // max(z,0) - z*t + ln(1 + e^{-|z|})
        acc = acc + z.max(T::zero()) - z * t + softplus_scalar(-z.abs());
    }
    let targets = targets.clone();
    g.push_op(
        Tensor::scalar(acc * invn),
        &[logits],
        Box::new(move |gout| {
            let go = gout.data()[0] * invn;
            let data: Vec<T> = tz
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&z, &t)| go * (sigmoid_scalar(z) - t))
                .collect();
            vec![(logits, Tensor::new(tz.shape().to_vec(), data).unwrap())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[4]));
        let t = Tensor::full(&[4], 1.0);
        let l = bce_with_logits(&mut g, z, &t).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() {
        let mut g = Graph::<f64>::new();
        let z = g.leaf(Tensor::from_vec(&[2], vec![0.0, 2.0]).unwrap(), true);
        let t = Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let l = bce_with_logits(&mut g, z, &t).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(z);
        assert!((gr.data()[0] - (0.5 - 1.0) / 2.0).abs() < 1e-12);
        let s2 = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((gr.data()[1] - s2 / 2.0).abs() < 1e-12);
    }
}
