use crate::{Error, Result};

use super::{Scalar, Tensor};

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            layer: "mse_loss".into(),
            detail: format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.len() as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum::<f64>()
        / n;
    let scale = T::of(2.0 / n);
    let grad = Tensor::new(
        pred.shape().to_vec(),
        pred.data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| scale * (p - t))
            .collect(),
    )?;
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn trivial_cases() {
        let a = t(vec![1.0, -2.0, 3.5]);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let b = a.map(|v| v + 1.0);
        assert_eq!(mse_loss(&b, &a).unwrap().0, 1.0);
        assert!(mse_loss(&a, &t(vec![1.0])).is_err());
    }

    #[test]
    fn matches_two_pass_oracle_and_gradient() {
        let p: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let q: Vec<f64> = (0..50).map(|i| (i as f64 * 1.3).cos()).collect();
        let diffs: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
        let mut acc = 0.0;
        for d in &diffs {
            acc += d * d;
        }
        let (l, g) = mse_loss(&t(p.clone()), &t(q.clone())).unwrap();
        assert!((l - acc / 50.0).abs() < 1e-12);
        let h = 1e-6;
        for i in [0, 17, 49] {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd =
                (mse_loss(&t(pp), &t(q.clone())).unwrap().0 - mse_loss(&t(pm), &t(q.clone())).unwrap().0) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }
}
