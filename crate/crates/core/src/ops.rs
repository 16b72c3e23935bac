//! Eager tensor functions for callers that do not need gradients.
//!
//! Each one records onto a throwaway [`Tape`], so the kernels are the same
//! ones used during training.

use crate::error::{Error, Result};
use crate::tape::{log_sum_exp, Tape};
use crate::tensor::{Scalar, Tensor};

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a)?, tape.constant(b)?);
    let out = tape.matmul(va, vb)?;
    Ok(tape.to_tensor(out))
}

pub fn elementwise_product<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a)?, tape.constant(b)?);
    let out = tape.mul(va, vb)?;
    Ok(tape.to_tensor(out))
}

/// Softmax of a vector (or of each row of a matrix).
pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            op: "softmax input",
        });
    }
    let mut tape = Tape::new();
    let v = tape.constant(x)?;
    let out = tape.softmax_rows(v)?;
    Ok(tape.to_tensor(out))
}

/// Index of the single 1 in a one-hot vector.
pub fn hot_index<T: Scalar>(t: &Tensor<T>) -> Result<usize> {
    let mut hot = None;
    for (i, &v) in t.data().iter().enumerate() {
        if v == T::one() {
            if hot.replace(i).is_some() {
                return Err(Error::NotOneHot("more than one hot entry".into()));
            }
        } else if v != T::zero() {
            return Err(Error::NotOneHot(format!("entry {i} is {v}")));
        }
    }
    hot.ok_or_else(|| Error::NotOneHot("no hot entry".into()))
}

/// `-Σ t[j]·log p[j]` for a probability vector `p` and one-hot `t`.
pub fn cross_entropy<T: Scalar>(p: &Tensor<T>, t: &Tensor<T>) -> Result<T> {
    if p.shape() != t.shape() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: p.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let hot = hot_index(t)?;
    let ph = p.data()[hot];
    if ph <= T::zero() {
        return Err(Error::ZeroProbability(hot));
    }
    Ok(-ph.ln())
}

/// Cross-entropy of `softmax(logits)` against class `target`, via log-sum-exp.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::NotOneHot(format!(
            "target index {target} outside {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "softmax input",
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

/// Smallest index attaining the maximum.
pub fn argmax<T: Scalar>(values: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(matmul(&eye, &m).unwrap().data(), m.data());
        let r = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn elementwise_product_cases() {
        let a = t(&[3], &[1., 2., 3.]);
        assert_eq!(
            elementwise_product(&a, &t(&[3], &[1., 1., 1.]))
                .unwrap()
                .data(),
            a.data()
        );
        let r = elementwise_product(&t(&[3], &[2., 0., -1.]), &t(&[3], &[3., 5., 4.])).unwrap();
        assert_eq!(r.data(), &[6., 0., -4.]);
        assert!(elementwise_product(&a, &t(&[2], &[1., 1.])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&t(&[4], &[0.; 4])).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        for c in [-3.0, 0.0, 7.5] {
            let s = softmax(&t(&[2], &[c, c + 3f64.ln()])).unwrap();
            assert!((s.data()[0] - 0.25).abs() < 1e-12);
            assert!((s.data()[1] - 0.75).abs() < 1e-12);
        }
        assert!(softmax(&t(&[2], &[f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let hot = t(&[3], &[0., 1., 0.]);
        assert_eq!(cross_entropy(&hot, &hot).unwrap(), 0.0);
        let uniform = t(&[12], &[1.0 / 12.0; 12]);
        let mut target = vec![0.0; 12];
        target[5] = 1.0;
        let ce = cross_entropy(&uniform, &t(&[12], &target)).unwrap();
        assert!((ce - 12f64.ln()).abs() < 1e-12);
        assert!((ce - 2.4849).abs() < 1e-4);

        assert!(matches!(
            cross_entropy(&t(&[2], &[1., 0.]), &t(&[2], &[0., 1.])),
            Err(Error::ZeroProbability(1))
        ));
        assert!(matches!(
            cross_entropy(&uniform, &t(&[12], &[0.5; 12])),
            Err(Error::NotOneHot(_))
        ));
        assert!(matches!(
            cross_entropy(&t(&[2], &[0.5, 0.5]), &t(&[2], &[1., 1.])),
            Err(Error::NotOneHot(_))
        ));
    }

    #[test]
    fn fused_matches_unfused() {
        let logits = [0.3, -1.2, 2.0, 0.7];
        let p = softmax(&t(&[4], &logits)).unwrap();
        let target = t(&[4], &[0., 0., 1., 0.]);
        let a = cross_entropy(&p, &target).unwrap();
        let b = softmax_cross_entropy(&logits, 2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn argmax_takes_lowest_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), Some(1));
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax(&[1.0 / 12.0; 12]), Some(0));
        assert_eq!(argmax::<f64>(&[]), None);
    }
}
