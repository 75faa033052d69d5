use serde::{Deserialize, Serialize};

use super::{Result, Scalar, Tensor, TensorError};

/// Spatial padding mode shared by convolution and transposed convolution.
///
/// `Same` pads with zeros so that the output extent is `ceil(n / stride)`;
/// when the total padding is odd the extra row/column goes on the high side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent of a convolution along one spatial axis.
pub fn conv2d_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    match padding {
        Padding::Same => Some(input.div_ceil(stride)),
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
    }
}

/// Output extent of a transposed convolution; the inverse of [`conv2d_output_len`].
pub fn deconv2d_output_len(input: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => input * stride,
        Padding::Valid => (input - 1) * stride + kernel,
    }
}

/// Leading (low side) padding for a convolution mapping `big` to `small`.
fn pad_low(big: usize, small: usize, kernel: usize, stride: usize, padding: Padding) -> usize {
    match padding {
        Padding::Same => {
            let needed = (small - 1) * stride + kernel;
            needed.saturating_sub(big) / 2
        }
        Padding::Valid => 0,
    }
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
}

fn check_stride(op: &'static str, stride: usize) -> Result<()> {
    if stride == 0 || stride > 2 {
        return Err(TensorError::Stride { op, stride });
    }
    Ok(())
}

fn conv_geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Geometry> {
    check_stride(op, stride)?;
    input.expect_rank(op, 3)?;
    kernel.expect_rank(op, 4)?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, kcin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(TensorError::Dimension {
            op,
            axis: "channels_in",
            expected: kcin,
            actual: cin,
        });
    }
    let oh = conv2d_output_len(h, kh, stride, padding).ok_or(TensorError::Dimension {
        op,
        axis: "height",
        expected: kh,
        actual: h,
    })?;
    let ow = conv2d_output_len(w, kw, stride, padding).ok_or(TensorError::Dimension {
        op,
        axis: "width",
        expected: kw,
        actual: w,
    })?;
    Ok(Geometry {
        h,
        w,
        cin,
        oh,
        ow,
        cout,
        kh,
        kw,
        stride,
        pad_y: pad_low(h, oh, kh, stride, padding),
        pad_x: pad_low(w, ow, kw, stride, padding),
    })
}

/// Input coordinate touched by output coordinate `o` and kernel tap `k`.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
    let pos = (o * stride + k).checked_sub(pad)?;
    (pos < extent).then_some(pos)
}

/// Cross-correlation of an `[H, W, Cin]` input with a `[kh, kw, Cin, Cout]` kernel.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry("conv2d", input, kernel, stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o_base = (oy * g.ow + ox) * g.cout;
            let acc = &mut out[o_base..o_base + g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_y, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_x, g.w) else { continue };
                    let x_base = (iy * g.w + ix) * g.cin;
                    for ci in 0..g.cin {
                        let xv = x[x_base + ci];
                        let k_base = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                        for (a, &kv) in acc.iter_mut().zip(&k[k_base..k_base + g.cout]) {
                            *a = *a + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.cout], out)?.ensure_finite("conv2d")
}

fn expect_upstream<T: Scalar>(op: &'static str, upstream: &Tensor<T>, shape: [usize; 3]) -> Result<()> {
    upstream.expect_rank(op, 3)?;
    for (axis, (&got, want)) in ["height", "width", "channels_out"]
        .into_iter()
        .zip(upstream.shape().iter().zip(shape))
    {
        if got != want {
            return Err(TensorError::Dimension {
                op,
                axis,
                expected: want,
                actual: got,
            });
        }
    }
    Ok(())
}

/// Vector-Jacobian product of [`conv2d_forward`]: returns `(grad_input, grad_kernel)`.
///
/// `grad_input` is skipped (returned as `None`) when `want_input` is false.
pub fn conv2d_vjp<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = conv_geometry("conv2d_vjp", input, kernel, stride, padding)?;
    expect_upstream("conv2d_vjp", upstream, [g.oh, g.ow, g.cout])?;
    let x = input.data();
    let k = kernel.data();
    let up = upstream.data();
    let mut gx = if want_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gk = vec![T::zero(); k.len()];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let o_base = (oy * g.ow + ox) * g.cout;
            let u = &up[o_base..o_base + g.cout];
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_y, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_x, g.w) else { continue };
                    let x_base = (iy * g.w + ix) * g.cin;
                    for ci in 0..g.cin {
                        let k_base = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                        let xv = x[x_base + ci];
                        for (gkv, &uv) in gk[k_base..k_base + g.cout].iter_mut().zip(u) {
                            *gkv = *gkv + xv * uv;
                        }
                        if want_input {
                            let s: T = k[k_base..k_base + g.cout]
                                .iter()
                                .zip(u)
                                .map(|(&kv, &uv)| kv * uv)
                                .sum();
                            gx[x_base + ci] = gx[x_base + ci] + s;
                        }
                    }
                }
            }
        }
    }
    let grad_input = if want_input {
        Some(Tensor::new(input.shape().to_vec(), gx)?.ensure_finite("conv2d_vjp")?)
    } else {
        None
    };
    let grad_kernel = Tensor::new(kernel.shape().to_vec(), gk)?.ensure_finite("conv2d_vjp")?;
    Ok((grad_input, grad_kernel))
}

struct DeconvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_y: usize,
    pad_x: usize,
}

fn deconv_geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<DeconvGeometry> {
    check_stride(op, stride)?;
    input.expect_rank(op, 3)?;
    kernel.expect_rank(op, 4)?;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, kcin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(TensorError::Dimension {
            op,
            axis: "channels_in",
            expected: kcin,
            actual: cin,
        });
    }
    let oh = deconv2d_output_len(h, kh, stride, padding);
    let ow = deconv2d_output_len(w, kw, stride, padding);
    Ok(DeconvGeometry {
        h,
        w,
        cin,
        oh,
        ow,
        cout,
        kh,
        kw,
        stride,
        // The transposed map shares the padding of the convolution oh -> h.
        pad_y: pad_low(oh, h, kh, stride, padding),
        pad_x: pad_low(ow, w, kw, stride, padding),
    })
}

/// Transposed convolution: each input pixel scatters `x · kernel[ky, kx]` into
/// output position `i * stride + k - pad`.
pub fn deconv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = deconv_geometry("deconv2d", input, kernel, stride, padding)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); g.oh * g.ow * g.cout];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let x_base = (iy * g.w + ix) * g.cin;
            for ky in 0..g.kh {
                let Some(oy) = tap(iy, ky, g.stride, g.pad_y, g.oh) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = tap(ix, kx, g.stride, g.pad_x, g.ow) else { continue };
                    let o_base = (oy * g.ow + ox) * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[x_base + ci];
                        let k_base = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                        for (o, &kv) in out[o_base..o_base + g.cout]
                            .iter_mut()
                            .zip(&k[k_base..k_base + g.cout])
                        {
                            *o = *o + xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.oh, g.ow, g.cout], out)?.ensure_finite("deconv2d")
}

/// Vector-Jacobian product of [`deconv2d_forward`]: `(grad_input, grad_kernel)`.
pub fn deconv2d_vjp<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    upstream: &Tensor<T>,
    stride: usize,
    padding: Padding,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let g = deconv_geometry("deconv2d_vjp", input, kernel, stride, padding)?;
    expect_upstream("deconv2d_vjp", upstream, [g.oh, g.ow, g.cout])?;
    let x = input.data();
    let k = kernel.data();
    let up = upstream.data();
    let mut gx = if want_input {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut gk = vec![T::zero(); k.len()];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let x_base = (iy * g.w + ix) * g.cin;
            for ky in 0..g.kh {
                let Some(oy) = tap(iy, ky, g.stride, g.pad_y, g.oh) else { continue };
                for kx in 0..g.kw {
                    let Some(ox) = tap(ix, kx, g.stride, g.pad_x, g.ow) else { continue };
                    let o_base = (oy * g.ow + ox) * g.cout;
                    let u = &up[o_base..o_base + g.cout];
                    for ci in 0..g.cin {
                        let xv = x[x_base + ci];
                        let k_base = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                        for (gkv, &uv) in gk[k_base..k_base + g.cout].iter_mut().zip(u) {
                            *gkv = *gkv + xv * uv;
                        }
                        if want_input {
                            let s: T = k[k_base..k_base + g.cout]
                                .iter()
                                .zip(u)
                                .map(|(&kv, &uv)| kv * uv)
                                .sum();
                            gx[x_base + ci] = gx[x_base + ci] + s;
                        }
                    }
                }
            }
        }
    }
    let grad_input = if want_input {
        Some(Tensor::new(input.shape().to_vec(), gx)?.ensure_finite("deconv2d_vjp")?)
    } else {
        None
    };
    let grad_kernel = Tensor::new(kernel.shape().to_vec(), gk)?.ensure_finite("deconv2d_vjp")?;
    Ok((grad_input, grad_kernel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{finite_difference, random_tensor};

    /// Zero-pads explicitly, then evaluates the textbook quadruple loop.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let (oh, ow, ph, pw) = match padding {
            Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let th = ((oh - 1) * stride + kh).saturating_sub(h);
                let tw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, th / 2, tw / 2)
            }
        };
        let hp = h + 2 * kh + 2;
        let wp = w + 2 * kw + 2;
        let mut padded = vec![0.0; hp * wp * cin];
        for y in 0..h {
            for xx in 0..w {
                for c in 0..cin {
                    padded[((y + ph) * wp + xx + pw) * cin + c] = x.data()[(y * w + xx) * cin + c];
                }
            }
        }
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ci in 0..cin {
                                let py = oy * stride + ky;
                                let px = ox * stride + kx;
                                s += padded[(py * wp + px) * cin + ci]
                                    * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * cout + co] = s;
                }
            }
        }
        out
    }

    /// Transposed convolution written as a gather over output pixels.
    fn naive_deconv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, cout) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let (oh, ow) = match padding {
            Padding::Same => (h * stride, w * stride),
            Padding::Valid => ((h - 1) * stride + kh, (w - 1) * stride + kw),
        };
        let (py, px) = match padding {
            Padding::Same => (
                ((h - 1) * stride + kh).saturating_sub(oh) / 2,
                ((w - 1) * stride + kw).saturating_sub(ow) / 2,
            ),
            Padding::Valid => (0, 0),
        };
        let mut out = Tensor::zeros(&[oh, ow, cout]);
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut s = 0.0;
                    for iy in 0..h {
                        for ix in 0..w {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    if iy * stride + ky != oy + py || ix * stride + kx != ox + px {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        s += x.data()[(iy * w + ix) * cin + ci]
                                            * k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                    }
                                }
                            }
                        }
                    }
                    out.data_mut()[(oy * ow + ox) * cout + co] = s;
                }
            }
        }
        out
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = Tensor::<f64>::full(&[1, 1, 1], 1.0);
        let k = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        let y = conv2d_forward(&x, &k, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[0.0]);
        let d = deconv2d_forward(&x, &k, 2, Padding::Same).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_padding_shapes() {
        let x = Tensor::<f64>::zeros(&[4, 4, 1]);
        let k = Tensor::<f64>::zeros(&[3, 3, 1, 5]);
        assert_eq!(conv2d_forward(&x, &k, 2, Padding::Same).unwrap().shape(), &[2, 2, 5]);
        let x = Tensor::<f64>::zeros(&[2, 2, 1]);
        assert_eq!(deconv2d_forward(&x, &k, 2, Padding::Same).unwrap().shape(), &[4, 4, 5]);
        for n in 1..12 {
            for s in 1..=2 {
                let small = conv2d_output_len(n * s, 3, s, Padding::Same).unwrap();
                assert_eq!(deconv2d_output_len(small, 3, s, Padding::Same), n * s);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f64>::zeros(&[4, 4, 2]);
        let k = Tensor::<f64>::zeros(&[3, 3, 3, 1]);
        match conv2d_forward(&x, &k, 1, Padding::Same).unwrap_err() {
            TensorError::Dimension { axis, .. } => assert_eq!(axis, "channels_in"),
            e => panic!("unexpected {e}"),
        }
        let up = Tensor::<f64>::zeros(&[3, 4, 1]);
        let k = Tensor::<f64>::zeros(&[3, 3, 2, 1]);
        match conv2d_vjp(&x, &k, &up, 1, Padding::Same, true).unwrap_err() {
            TensorError::Dimension { axis, .. } => assert_eq!(axis, "height"),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(
            conv2d_forward(&x, &k, 3, Padding::Same),
            Err(TensorError::Stride { stride: 3, .. })
        ));
    }

    #[test]
    fn conv_matches_naive_loop() {
        for (seed, stride, padding) in [
            (1, 1, Padding::Same),
            (2, 2, Padding::Same),
            (3, 1, Padding::Valid),
            (4, 2, Padding::Valid),
        ] {
            let x = random_tensor(&[8, 8, 2], seed);
            let k = random_tensor(&[3, 3, 2, 4], seed + 100);
            let fast = conv2d_forward(&x, &k, stride, padding).unwrap();
            let slow = naive_conv(&x, &k, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_naive_loop() {
        for (seed, stride, padding) in [
            (5, 1, Padding::Same),
            (6, 2, Padding::Same),
            (7, 2, Padding::Valid),
        ] {
            let x = random_tensor(&[4, 5, 3], seed);
            let k = random_tensor(&[3, 3, 3, 2], seed + 100);
            let fast = deconv2d_forward(&x, &k, stride, padding).unwrap();
            let slow = naive_deconv(&x, &k, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = random_tensor(&[5, 5, 1], 9);
        let k = random_tensor(&[3, 3, 1, 2], 10);
        let up = Tensor::zeros(&[5, 5, 2]);
        let (gx, gk) = conv2d_vjp(&x, &k, &up, 1, Padding::Same, true).unwrap();
        assert!(gx.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_vjp_matches_finite_differences() {
        for stride in [1, 2] {
            let x = random_tensor(&[5, 5, 1], 11);
            let k = random_tensor(&[3, 3, 1, 2], 12);
            let y = conv2d_forward(&x, &k, stride, Padding::Same).unwrap();
            let up = random_tensor(y.shape(), 13);
            let (gx, gk) = conv2d_vjp(&x, &k, &up, stride, Padding::Same, true).unwrap();
            let fd_x = finite_difference(&x, 1e-5, |x| {
                conv2d_forward(x, &k, stride, Padding::Same).unwrap().dot(&up).unwrap()
            });
            let fd_k = finite_difference(&k, 1e-5, |k| {
                conv2d_forward(&x, k, stride, Padding::Same).unwrap().dot(&up).unwrap()
            });
            assert!(crate::tensor::relative_error(&gx.unwrap(), &fd_x) <= 1e-6);
            assert!(crate::tensor::relative_error(&gk, &fd_k) <= 1e-6);
        }
    }

    #[test]
    fn deconv_vjp_matches_finite_differences() {
        for stride in [1, 2] {
            let x = random_tensor(&[3, 3, 2], 21);
            let k = random_tensor(&[3, 3, 2, 2], 22);
            let y = deconv2d_forward(&x, &k, stride, Padding::Same).unwrap();
            let up = random_tensor(y.shape(), 23);
            let (gx, gk) = deconv2d_vjp(&x, &k, &up, stride, Padding::Same, true).unwrap();
            let fd_x = finite_difference(&x, 1e-5, |x| {
                deconv2d_forward(x, &k, stride, Padding::Same).unwrap().dot(&up).unwrap()
            });
            let fd_k = finite_difference(&k, 1e-5, |k| {
                deconv2d_forward(&x, k, stride, Padding::Same).unwrap().dot(&up).unwrap()
            });
            assert!(crate::tensor::relative_error(&gx.unwrap(), &fd_x) <= 1e-6);
            assert!(crate::tensor::relative_error(&gk, &fd_k) <= 1e-6);
        }
    }

    #[test]
    fn strided_grad_input_follows_window_pattern() {
        // Valid padding, stride 2 on a 6x6 input: the 3x3 windows start at
        // rows/cols 0 and 2 and cover 0..=4, so row/col 5 is never touched.
        let x = random_tensor(&[6, 6, 1], 31);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let up = Tensor::full(&[2, 2, 1], 1.0);
        let (gx, _) = conv2d_vjp(&x, &k, &up, 2, Padding::Valid, true).unwrap();
        let gx = gx.unwrap();
        let mut touched = [[0usize; 6]; 6];
        for oy in 0..2 {
            for ox in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        touched[oy * 2 + ky][ox * 2 + kx] += 1;
                    }
                }
            }
        }
        for y in 0..6 {
            for xx in 0..6 {
                assert_eq!(gx.data()[y * 6 + xx], touched[y][xx] as f64);
            }
        }
    }
}
