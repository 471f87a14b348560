use super::{same_shape, Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax over the last axis.
    Softmax,
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    if !input.all_finite() {
        return Err(TensorError::NonFinite { op: "activation" });
    }
    Ok(match kind {
        Activation::Relu => input.map(|x| if x > T::zero() { x } else { T::zero() }),
        Activation::Sigmoid => input.map(sigmoid),
        Activation::Softmax => {
            let last = *input.shape().last().expect("tensor rank >= 1");
            let mut out = input.clone();
            for row in out.data_mut().chunks_mut(last) {
                softmax_row(row);
            }
            out
        }
    })
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Gradient w.r.t. the activation input, given the forward `output` and the
/// upstream gradient.
pub fn activation_backward<T: Real>(
    kind: Activation,
    output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    same_shape("activation_backward", output.shape(), grad_out.shape())?;
    let mut grad = grad_out.clone();
    match kind {
        Activation::Relu => {
            for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                if y <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        Activation::Sigmoid => {
            for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
                *g *= y * (T::one() - y);
            }
        }
        Activation::Softmax => {
            let last = *output.shape().last().expect("tensor rank >= 1");
            for (g_row, y_row) in grad.data_mut().chunks_mut(last).zip(output.data().chunks(last)) {
                let mut inner = T::zero();
                for (&g, &y) in g_row.iter().zip(y_row) {
                    inner += g * y;
                }
                for (g, &y) in g_row.iter_mut().zip(y_row) {
                    *g = y * (*g - inner);
                }
            }
        }
    }
    Ok(grad)
}
