use super::gemm::{gemm, transpose};
use super::{expect_rank, Real, Result, Tensor, TensorError};

/// Affine map parameters: `weights (out_features, in_features)`, `bias (out_features)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> DenseParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        expect_rank("dense params", weights.shape(), 2)?;
        expect_rank("dense params", bias.shape(), 1)?;
        if bias.len() != weights.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "dense params",
                axis: "bias length",
                expected: weights.shape()[0],
                actual: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn cast<U: Real>(&self) -> DenseParams<U> {
        DenseParams {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads<T = f32> {
    pub input: Option<Tensor<T>>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn check_input<T: Real>(op: &'static str, input: &Tensor<T>, params: &DenseParams<T>) -> Result<()> {
    expect_rank(op, input.shape(), 2)?;
    if input.shape()[1] != params.in_features() {
        return Err(TensorError::ShapeMismatch {
            op,
            axis: "features",
            expected: params.in_features(),
            actual: input.shape()[1],
        });
    }
    Ok(())
}

/// `input · Wᵀ + b` for an `N × F` input.
pub fn dense<T: Real>(input: &Tensor<T>, params: &DenseParams<T>) -> Result<Tensor<T>> {
    check_input("dense", input, params)?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = params.out_features();
    let w_t = transpose(g, f, params.weights.data());
    let mut out = vec![T::zero(); n * g];
    gemm(n, g, f, input.data(), &w_t, &mut out, false);
    for row in out.chunks_mut(g) {
        for (v, &b) in row.iter_mut().zip(params.bias.data()) {
            *v += b;
        }
    }
    Ok(Tensor::from_parts(vec![n, g], out))
}

pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    params: &DenseParams<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<DenseGrads<T>> {
    const OP: &str = "dense_backward";
    check_input(OP, input, params)?;
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = params.out_features();
    expect_rank(OP, grad_out.shape(), 2)?;
    for (axis, e, a) in [("batch", n, grad_out.shape()[0]), ("features", g, grad_out.shape()[1])] {
        if e != a {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                axis,
                expected: e,
                actual: a,
            });
        }
    }

    let gy_t = transpose(n, g, grad_out.data());
    let mut dw = vec![T::zero(); g * f];
    gemm(g, f, n, &gy_t, input.data(), &mut dw, false);

    let mut db = vec![T::zero(); g];
    for row in grad_out.data().chunks(g) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }

    let input_grad = if need_input_grad {
        let mut dx = vec![T::zero(); n * f];
        gemm(n, f, g, grad_out.data(), params.weights.data(), &mut dx, false);
        Some(Tensor::from_parts(vec![n, f], dx))
    } else {
        None
    };

    Ok(DenseGrads {
        input: input_grad,
        weights: Tensor::from_parts(vec![g, f], dw),
        bias: Tensor::from_parts(vec![g], db),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights() {
        let x = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 - 2.0).unwrap();
        let w = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let p = DenseParams::new(w, Tensor::zeros(&[3]).unwrap()).unwrap();
        assert_eq!(dense(&x, &p).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let x = Tensor::<f32>::from_fn(&[4, 5], |i| i as f32).unwrap();
        let b = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let p = DenseParams::new(Tensor::zeros(&[2, 5]).unwrap(), b).unwrap();
        let y = dense(&x, &p).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, &[0.5, -1.5]);
        }
    }

    #[test]
    fn feature_mismatch_rejected() {
        let x = Tensor::<f32>::zeros(&[2, 4]).unwrap();
        let p = DenseParams::new(Tensor::zeros(&[3, 5]).unwrap(), Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(matches!(
            dense(&x, &p),
            Err(TensorError::ShapeMismatch {
                axis: "features",
                expected: 5,
                actual: 4,
                ..
            })
        ));
    }
}
