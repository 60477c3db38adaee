use super::{Graph, Result, Tensor, TensorError, Var};

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the tracked input and must return a scalar.
/// Returns the largest `|analytic - cd| / max(|analytic|, |cd|, 1e-8)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {eps} outside (0, 1e-3]"),
        });
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t)?;
        let out = f(&mut g, v)?;
        let val = g.value(out);
        if val.numel() != 1 {
            return Err(TensorError::NotScalar(val.shape().to_vec()));
        }
        let y = val.item();
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone())?;
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let zeros = Tensor::zeros(x.shape());
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let cd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.7, 2.2, 0.01]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_passes_on_floor() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let z = g.scale(x, 0.0)?;
                g.sum(z)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::zeros(&[1]);
        assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
        assert!(grad_check(|g, x| g.sum(x), &x, 0.01).is_err());
    }

    #[test]
    fn rejects_non_finite_output() {
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let s = g.sum(x)?;
                g.log(s)
            },
            &x,
            1e-5,
        );
        assert!(r.is_err());
    }
}
