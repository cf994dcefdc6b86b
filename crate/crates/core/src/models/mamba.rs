//! Causal depthwise convolution used on the Mamba input branch.

use std::collections::VecDeque;

use crate::autodiff::{BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `y[t, i] = b[i] + Σ_k w[i, k] · x[t − W + 1 + k, i]`, with zero padding
/// before the first row. `x` is N×E, `w` is E×W, `b` holds E values.
pub fn causal_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, e, width) = (x.rows(), x.cols(), w.cols());
    if w.rows() != e || b.numel() != e {
        return Err(Error::dim("causal_conv", x.shape(), w.shape()));
    }
    let mut out = Tensor::zeros(&[n, e]);
    for t in 0..n {
        let row = out.row_mut(t);
        row.copy_from_slice(b.data());
        for k in 0..width {
            let Some(s) = (t + k + 1).checked_sub(width) else { continue };
            let xs = x.row(s);
            for i in 0..e {
                row[i] += w.get2(i, k) * xs[i];
            }
        }
    }
    Ok(out)
}

struct ConvBackward;

impl BackwardOp for ConvBackward {
    fn name(&self) -> &'static str {
        "causal_conv"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (n, e, width) = (x.rows(), x.cols(), w.cols());
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(w.shape());
        let mut gb = vec![0.0; e];
        for t in 0..n {
            let g = grad.row(t);
            for (acc, &gi) in gb.iter_mut().zip(g) {
                *acc += gi;
            }
            for k in 0..width {
                let Some(s) = (t + k + 1).checked_sub(width) else { continue };
                for i in 0..e {
                    gx.row_mut(s)[i] += g[i] * w.get2(i, k);
                    gw.row_mut(i)[k] += g[i] * x.get2(s, i);
                }
            }
        }
        Ok(vec![Some(gx), Some(gw), Some(Tensor::new(b.shape().to_vec(), gb)?)])
    }
}

pub fn causal_conv_op(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let out = causal_conv(tape.value(x), tape.value(w), tape.value(b))?;
    Ok(tape.custom(&[x, w, b], out, Box::new(ConvBackward)))
}

/// Fresh conv history: `width − 1` zero rows of length `e`.
pub fn conv_history(width: usize, e: usize) -> VecDeque<Vec<f64>> {
    (0..width.saturating_sub(1)).map(|_| vec![0.0; e]).collect()
}

/// One streaming conv step. `history` holds the previous `W − 1` inputs,
/// oldest first, and is advanced by `x`.
pub fn causal_conv_step(history: &mut VecDeque<Vec<f64>>, w: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (e, width) = (w.rows(), w.cols());
    if x.len() != e || b.numel() != e || history.len() + 1 != width {
        return Err(Error::dim("causal_conv_step", &[history.len() + 1, e], &[width, x.len()]));
    }
    let mut y = b.data().to_vec();
    for (k, past) in history.iter().chain(std::iter::once(&x.to_vec())).enumerate() {
        for i in 0..e {
            y[i] += w.get2(i, k) * past[i];
        }
    }
    if width > 1 {
        history.pop_front();
        history.push_back(x.to_vec());
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn width_one_is_pointwise_scale() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap();
        let b = Tensor::row_vector(vec![0.5, 0.0]);
        let y = causal_conv(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[2.5, -2.0, 6.5, -4.0]);
    }

    #[test]
    fn matches_padded_oracle_and_streaming() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, e, width) = (9, 3, 4);
        let x = random(&mut rng, &[n, e]);
        let w = random(&mut rng, &[e, width]);
        let b = random(&mut rng, &[1, e]);
        let y = causal_conv(&x, &w, &b).unwrap();
        for t in 0..n {
            for i in 0..e {
                let mut s = b.data()[i];
                for lag in 0..width {
                    if t >= lag {
                        s += w.get2(i, width - 1 - lag) * x.get2(t - lag, i);
                    }
                }
                assert!((y.get2(t, i) - s).abs() < 1e-14);
            }
        }
        let mut hist = conv_history(width, e);
        for t in 0..n {
            let ys = causal_conv_step(&mut hist, &w, &b, x.row(t)).unwrap();
            for i in 0..e {
                assert!((ys[i] - y.get2(t, i)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [random(&mut rng, &[6, 3]), random(&mut rng, &[3, 4]), random(&mut rng, &[1, 3])];
        let err = max_rel_error(
            &inputs,
            &|tape, v| {
                let y = causal_conv_op(tape, v[0], v[1], v[2])?;
                let sq = tape.square(y);
                Ok(tape.sum(sq))
            },
            1e-5,
        );
        assert!(err < 1e-4, "{err}");
    }
}
