use super::{Result, Scalar, Tensor, TensorError};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU derivative is taken as 0 at exactly 0.
pub fn relu_vjp<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_same_shape("relu_vjp", upstream)?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Spatial mean of an `[H, W, C]` tensor, giving `[C]`.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank("global_avg_pool", 3)?;
    let c = input.shape()[2];
    let n = input.len() / c;
    let mut out = vec![T::zero(); c];
    for px in input.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(px) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::from_f64(n as f64);
    for o in &mut out {
        *o = *o * inv;
    }
    Tensor::new(vec![c], out)?.ensure_finite("global_avg_pool")
}

pub fn global_avg_pool_vjp<T: Scalar>(input_shape: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if input_shape.len() != 3 {
        return Err(TensorError::Rank {
            op: "global_avg_pool_vjp",
            expected: 3,
            shape: input_shape.to_vec(),
        });
    }
    let c = input_shape[2];
    if upstream.shape() != [c] {
        return Err(TensorError::Dimension {
            op: "global_avg_pool_vjp",
            axis: "channels",
            expected: c,
            actual: upstream.len(),
        });
    }
    let n = input_shape[0] * input_shape[1];
    let inv = T::one() / T::from_f64(n as f64);
    let mut data = Vec::with_capacity(n * c);
    for _ in 0..n {
        data.extend(upstream.data().iter().map(|&g| g * inv));
    }
    Tensor::new(input_shape.to_vec(), data)
}

fn linear_dims<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize)> {
    weight.expect_rank(op, 2)?;
    let (n, m) = (weight.shape()[0], weight.shape()[1]);
    if input.len() != n {
        return Err(TensorError::Dimension {
            op,
            axis: "features_in",
            expected: n,
            actual: input.len(),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [m] {
            return Err(TensorError::Dimension {
                op,
                axis: "bias",
                expected: m,
                actual: b.len(),
            });
        }
    }
    Ok((n, m))
}

/// `y = x · W (+ b)` with the input flattened to a vector and `W` of shape `[n, m]`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, m) = linear_dims("linear", input, weight, bias)?;
    let mut out = match bias {
        Some(b) => b.data().to_vec(),
        None => vec![T::zero(); m],
    };
    let w = weight.data();
    for (i, &xv) in input.data().iter().enumerate().take(n) {
        for (o, &wv) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
            *o = *o + xv * wv;
        }
    }
    Tensor::new(vec![m], out)?.ensure_finite("linear")
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_vjp<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    upstream: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let (n, m) = linear_dims("linear_vjp", input, weight, bias)?;
    if upstream.len() != m {
        return Err(TensorError::Dimension {
            op: "linear_vjp",
            axis: "features_out",
            expected: m,
            actual: upstream.len(),
        });
    }
    let w = weight.data();
    let g = upstream.data();
    let mut gw = Vec::with_capacity(n * m);
    let mut gx = Vec::with_capacity(n);
    for (i, &xv) in input.data().iter().enumerate() {
        let row = &w[i * m..(i + 1) * m];
        gw.extend(g.iter().map(|&gv| xv * gv));
        gx.push(row.iter().zip(g).map(|(&wv, &gv)| wv * gv).sum());
    }
    let grad_input = Tensor::new(input.shape().to_vec(), gx)?.ensure_finite("linear_vjp")?;
    let grad_weight = Tensor::new(vec![n, m], gw)?.ensure_finite("linear_vjp")?;
    let grad_bias = bias.map(|_| upstream.clone().reshape(vec![m])).transpose()?;
    Ok((grad_input, grad_weight, grad_bias))
}

pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let exp = logits.map(|v| (v - max).exp());
    let total = exp.sum();
    exp.map(|v| v / total)
}

/// Cross-entropy of `softmax(logits)` against a class index, with the gradient
/// `softmax(logits) - onehot(label)`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let classes = logits.len();
    if label >= classes {
        return Err(TensorError::LabelOutOfRange { label, classes });
    }
    if !logits.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax_xent" });
    }
    let max = logits
        .data()
        .iter()
        .copied()
        .fold(T::neg_infinity(), T::max);
    let lse = max + logits.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = lse - logits.data()[label];
    let mut grad = softmax(logits);
    grad.data_mut()[label] = grad.data()[label] - T::one();
    Ok((loss, grad.ensure_finite("softmax_xent")?))
}

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    pred.expect_same_shape("mse", target)?;
    let n = T::from_f64(pred.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let grad: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            loss = loss + d * d;
            two * d / n
        })
        .collect();
    let grad = Tensor::new(pred.shape().to_vec(), grad)?.ensure_finite("mse")?;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "mse" });
    }
    Ok((loss, grad))
}
