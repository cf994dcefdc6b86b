//! Softmax attention, kernelized (linear) attention and its feature maps.
//!
//! Each mixing kernel exists twice: as a plain function used for streaming
//! inference, and as a tape operation with a hand-written backward pass
//! used for full-sequence training.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{BackwardOp, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, dot, Tensor};

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if q.shape().len() != 2 || k.shape() != q.shape() {
        return Err(Error::dim("attention(q, k)", q.shape(), k.shape()));
    }
    if v.shape().len() != 2 || v.rows() != q.rows() {
        return Err(Error::dim("attention(q, v)", q.shape(), v.shape()));
    }
    Ok(())
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / √C)`, masked to `j ≤ t`
/// when `causal` (masked entries are exactly zero).
pub fn attention_weights(q: &Tensor, k: &Tensor, causal: bool) -> Result<Tensor> {
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut w = Tensor::zeros(&[n, n]);
    for t in 0..n {
        let visible = if causal { t + 1 } else { n };
        let logits: Vec<f64> = (0..visible).map(|j| dot(q.row(t), k.row(j))).collect();
        let p = tensor::softmax(&logits, scale)?;
        w.row_mut(t)[..visible].copy_from_slice(&p);
    }
    Ok(w)
}

/// `u_t = Σ_j softmax_j(Q_t K_jᵀ / √C) V_j` over the allowed `j`.
pub fn softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    if q.rows() == 0 {
        return Ok(Tensor::zeros(&[0, v.cols()]));
    }
    attention_weights(q, k, causal)?.matmul(v)
}

struct CausalAttentionBackward {
    weights: Tensor,
    scale: f64,
}

impl BackwardOp for CausalAttentionBackward {
    fn name(&self) -> &'static str {
        "causal_softmax_attention"
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let w = &self.weights;
        let n = q.rows();
        let gv = w.t_matmul(g)?;
        let gw = g.matmul_t(v)?;
        let mut gs = Tensor::zeros(&[n, n]);
        for t in 0..n {
            let wr = &w.row(t)[..=t];
            let gr = &gw.row(t)[..=t];
            let s = dot(wr, gr);
            for j in 0..=t {
                gs.row_mut(t)[j] = wr[j] * (gr[j] - s) * self.scale;
            }
        }
        let gq = gs.matmul(k)?;
        let gk = gs.t_matmul(q)?;
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }
}

/// Causal softmax attention recorded on the tape.
pub fn causal_attention_op(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    check_qkv(qv, kv, vv)?;
    let weights = attention_weights(qv, kv, true)?;
    let out = weights.matmul(vv)?;
    let scale = 1.0 / (qv.cols() as f64).sqrt();
    Ok(tape.custom(&[q, k, v], out, Box::new(CausalAttentionBackward { weights, scale })))
}

/// `φ(x) = elu(x) + 1`, elementwise.
pub fn feature_map_elu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| tensor::elu_plus_one(v)).collect()
}

/// Positive random features `exp(x W_pᵀ − ‖x‖²/2)` for `W_p` of shape m×C.
pub fn feature_map_favor(x: &[f64], w_p: &Tensor) -> Result<Vec<f64>> {
    if w_p.cols() != x.len() {
        return Err(Error::dim("feature_map_favor", &[x.len()], w_p.shape()));
    }
    let half_sq = 0.5 * dot(x, x);
    Ok((0..w_p.rows())
        .map(|r| (dot(x, w_p.row(r)) - half_sq).exp())
        .collect())
}

struct FavorBackward;

impl BackwardOp for FavorBackward {
    fn name(&self) -> &'static str {
        "favor_features"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        // y = exp(x Wᵀ − ‖x‖²/2): gx = (g ⊙ y) W − (Σ g ⊙ y) x
        let (x, w) = (inputs[0], inputs[1]);
        let gy = g.mul(out)?;
        let mut gx = gy.matmul(w)?;
        for i in 0..x.rows() {
            let s: f64 = gy.row(i).iter().sum();
            for (d, &xv) in gx.row_mut(i).iter_mut().zip(x.row(i)) {
                *d -= s * xv;
            }
        }
        Ok(vec![Some(gx), None])
    }
}

/// Row-wise FAVOR features on the tape; `w_p` is treated as frozen.
pub fn favor_op(tape: &mut Tape, x: Var, w_p: Var) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w_p));
    let mut data = Vec::with_capacity(xv.rows() * wv.rows());
    for i in 0..xv.rows() {
        data.extend(feature_map_favor(xv.row(i), wv)?);
    }
    let out = Tensor::matrix(xv.rows(), wv.rows(), data)?;
    Ok(tape.custom(&[x, w_p], out, Box::new(FavorBackward)))
}

/// `m × C` random feature matrix whose rows are mutually orthogonal within
/// each block of `C` rows, with Gaussian-distributed row norms.
pub fn orthogonal_features<R: Rng + ?Sized>(m: usize, c: usize, rng: &mut R) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    while rows.len() < m {
        let block_len = c.min(m - rows.len());
        let mut block: Vec<Vec<f64>> = Vec::with_capacity(block_len);
        while block.len() < block_len {
            let mut v: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            // modified Gram-Schmidt, applied twice for stability
            for _ in 0..2 {
                for b in &block {
                    let p = dot(&v, b);
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= p * y;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            block.push(v);
        }
        for mut b in block {
            let g: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            let len = dot(&g, &g).sqrt();
            b.iter_mut().for_each(|x| *x *= len);
            rows.push(b);
        }
    }
    Tensor::from_rows(&rows).expect("rows share a length")
}

/// Recurrent state of causal linear attention: `S = Σ k_jᵀ v_j` (C×M) and
/// `G = Σ k_jᵀ` (C).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearAttentionState {
    pub s: Tensor,
    pub g: Vec<f64>,
}

/// Denominators below this are rejected.
pub const LINEAR_ATTENTION_MIN_DENOM: f64 = 1e-12;

impl LinearAttentionState {
    pub fn new(c: usize, m: usize) -> Self {
        Self {
            s: Tensor::zeros(&[c, m]),
            g: vec![0.0; c],
        }
    }

    /// Folds `(k_t, v_t)` into the state and reads it out with `q_t`:
    /// `u_t = q_t S′ / q_t G′`. `q_t`, `k_t` must already be feature-mapped.
    pub fn step(&mut self, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let (c, m) = (self.g.len(), self.s.cols());
        if q.len() != c || k.len() != c || v.len() != m {
            return Err(Error::dim("linear_attention_step", &[c, m], &[q.len(), k.len(), v.len()]));
        }
        for (r, &kr) in k.iter().enumerate() {
            for (s, &vv) in self.s.row_mut(r).iter_mut().zip(v) {
                *s += kr * vv;
            }
            self.g[r] += kr;
        }
        let den = dot(q, &self.g);
        if !(den.abs() >= LINEAR_ATTENTION_MIN_DENOM) {
            return Err(Error::Numeric(format!("linear attention denominator {den} too small")));
        }
        let mut u = vec![0.0; m];
        for (r, &qr) in q.iter().enumerate() {
            for (o, &s) in u.iter_mut().zip(self.s.row(r)) {
                *o += qr * s;
            }
        }
        u.iter_mut().for_each(|x| *x /= den);
        Ok(u)
    }
}

/// Stateless form of [`LinearAttentionState::step`].
pub fn linear_attention_step(
    s: &Tensor,
    g: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> Result<(Vec<f64>, Tensor, Vec<f64>)> {
    let mut st = LinearAttentionState {
        s: s.clone(),
        g: g.to_vec(),
    };
    let u = st.step(q, k, v)?;
    Ok((u, st.s, st.g))
}

struct LinearAttentionBackward {
    den: Vec<f64>,
    final_state: LinearAttentionState,
}

impl BackwardOp for LinearAttentionBackward {
    fn name(&self) -> &'static str {
        "causal_linear_attention"
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let (n, c, m) = (q.rows(), q.cols(), v.cols());
        let mut s = self.final_state.s.clone();
        let mut gsum = self.final_state.g.clone();
        let mut rs = Tensor::zeros(&[c, m]);
        let mut rg = vec![0.0; c];
        let (mut gq, mut gk, mut gv) = (
            Tensor::zeros(&[n, c]),
            Tensor::zeros(&[n, c]),
            Tensor::zeros(&[n, m]),
        );
        for t in (0..n).rev() {
            let den = self.den[t];
            let gu = g.row(t);
            let gnum: Vec<f64> = gu.iter().map(|x| x / den).collect();
            let gden = -dot(gu, out.row(t)) / den;
            // gq_t = S_t gnum + G_t gden
            for r in 0..c {
                gq.row_mut(t)[r] = dot(s.row(r), &gnum) + gsum[r] * gden;
            }
            let qt = q.row(t);
            for r in 0..c {
                for (a, &b) in rs.row_mut(r).iter_mut().zip(&gnum) {
                    *a += qt[r] * b;
                }
                rg[r] += qt[r] * gden;
            }
            let (kt, vt) = (k.row(t), v.row(t));
            for r in 0..c {
                gk.row_mut(t)[r] = dot(rs.row(r), vt) + rg[r];
            }
            for r in 0..c {
                for (a, &b) in gv.row_mut(t).iter_mut().zip(rs.row(r)) {
                    *a += kt[r] * b;
                }
            }
            // roll the state back to S_{t-1}, G_{t-1}
            for r in 0..c {
                for (sv, &vv) in s.row_mut(r).iter_mut().zip(vt) {
                    *sv -= kt[r] * vv;
                }
                gsum[r] -= kt[r];
            }
        }
        Ok(vec![Some(gq), Some(gk), Some(gv)])
    }
}

/// Causal linear attention over feature-mapped `q`, `k`, computed with the
/// recurrent state update and recorded on the tape.
pub fn causal_linear_attention_op(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    check_qkv(qv, kv, vv)?;
    let (n, m) = (qv.rows(), vv.cols());
    let mut st = LinearAttentionState::new(qv.cols(), m);
    let mut out = Tensor::zeros(&[n, m]);
    let mut den = Vec::with_capacity(n);
    for t in 0..n {
        let u = st.step(qv.row(t), kv.row(t), vv.row(t))?;
        den.push(dot(qv.row(t), &st.g));
        out.row_mut(t).copy_from_slice(&u);
    }
    Ok(tape.custom(
        &[q, k, v],
        out,
        Box::new(LinearAttentionBackward {
            den,
            final_state: st,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Dense masked-softmax reference built from the formula directly.
    fn masked_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (n, m) = (q.rows(), v.cols());
        let d = q.cols() as f64;
        let mut out = Tensor::zeros(&[n, m]);
        for t in 0..n {
            let e: Vec<f64> = (0..=t).map(|j| (dot(q.row(t), k.row(j)) / d.sqrt()).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..=t {
                for c in 0..m {
                    out.row_mut(t)[c] += e[j] / z * v.row(j)[c];
                }
            }
        }
        out
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&[1, 4], &mut rng), random(&[1, 4], &mut rng), random(&[1, 3], &mut rng));
        let u = softmax_attention(&q, &k, &v, true).unwrap();
        assert!(u.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap();
        let k = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0]]).unwrap();
        let u = softmax_attention(&q, &k, &v, false).unwrap();
        for t in 0..2 {
            assert!((u.row(t)[0] - 2.0).abs() < 1e-14 && (u.row(t)[1] - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (random(&[3, 4], &mut rng), random(&[3, 4], &mut rng), random(&[3, 5], &mut rng));
        let u = softmax_attention(&q, &k, &v, true).unwrap();
        assert!(u.max_abs_diff(&masked_oracle(&q, &k, &v)) < 1e-10);
        let w = attention_weights(&q, &k, true).unwrap();
        for t in 0..3 {
            assert!((w.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let e = Tensor::zeros(&[0, 4]);
        let u = softmax_attention(&e, &e, &Tensor::zeros(&[0, 3]), true).unwrap();
        assert_eq!(u.shape(), &[0, 3]);
        let r = softmax_attention(&Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3]), true);
        assert!(r.is_err());
    }

    #[test]
    fn elu_feature_map_values() {
        let f = feature_map_elu(&[0.0, 2.0, -1.0]);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 3.0);
        assert!((f[2] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn favor_zero_input_is_ones_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal_features(8, 4, &mut rng);
        assert!(feature_map_favor(&[0.0; 4], &w).unwrap().iter().all(|&x| x == 1.0));
        let w2 = orthogonal_features(8, 4, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(w, w2);
    }

    #[test]
    fn orthogonal_rows_within_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = orthogonal_features(16, 16, &mut rng);
        for i in 0..16 {
            for j in 0..i {
                let d = dot(w.row(i), w.row(j)) / (dot(w.row(i), w.row(i)) * dot(w.row(j), w.row(j))).sqrt();
                assert!(d.abs() < 1e-10, "rows {i},{j}: {d}");
            }
        }
    }

    #[test]
    fn favor_estimates_exponential_kernel() {
        // φ(q)ᵀφ(k)/m is an unbiased estimate of exp(qᵀk)
        let (m, c) = (4096, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut q: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut k: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        for v in [&mut q, &mut k] {
            let n = dot(v, v).sqrt();
            v.iter_mut().for_each(|x| *x *= 0.9 / n);
        }
        let exact = dot(&q, &k).exp();
        let mut total_rel = 0.0;
        for _ in 0..20 {
            let w = orthogonal_features(m, c, &mut rng);
            let est = dot(&feature_map_favor(&q, &w).unwrap(), &feature_map_favor(&k, &w).unwrap()) / m as f64;
            total_rel += (est - exact).abs() / exact;
        }
        assert!(total_rel / 20.0 < 0.1, "mean relative error {}", total_rel / 20.0);
    }

    /// Quadratic masked form of causal linear attention.
    fn quadratic_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let (n, m) = (q.rows(), v.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for t in 0..n {
            let w: Vec<f64> = (0..=t).map(|j| dot(q.row(t), k.row(j))).collect();
            let z: f64 = w.iter().sum();
            for j in 0..=t {
                for c in 0..m {
                    out.row_mut(t)[c] += w[j] * v.row(j)[c] / z;
                }
            }
        }
        out
    }

    #[test]
    fn first_linear_step_returns_value() {
        let mut st = LinearAttentionState::new(3, 2);
        let u = st.step(&[0.5, 1.0, 2.0], &[1.5, 0.2, 0.7], &[3.0, -4.0]).unwrap();
        assert!((u[0] - 3.0).abs() < 1e-15 && (u[1] + 4.0).abs() < 1e-15);
    }

    #[test]
    fn recurrence_matches_quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&[16, 4], &mut rng).map(tensor::elu_plus_one);
        let k = random(&[16, 4], &mut rng).map(tensor::elu_plus_one);
        let v = random(&[16, 3], &mut rng);
        let mut st = LinearAttentionState::new(4, 3);
        let oracle = quadratic_oracle(&q, &k, &v);
        for t in 0..16 {
            let u = st.step(q.row(t), k.row(t), v.row(t)).unwrap();
            for c in 0..3 {
                assert!((u[c] - oracle.row(t)[c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn small_key_leaves_state_nearly_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut st = LinearAttentionState::new(3, 2);
        let q = feature_map_elu(&[0.1, 0.2, 0.3]);
        let u0 = st.step(&q, &feature_map_elu(&[0.5, 0.1, -0.2]), &[1.0, 2.0]).unwrap();
        let before = st.clone();
        let k = feature_map_elu(&[-40.0, -40.0, -40.0]);
        let v = [rng.random_range(-5.0..5.0), 7.0];
        let u1 = st.step(&q, &k, &v).unwrap();
        assert!(st.s.max_abs_diff(&before.s) < 1e-15);
        assert!((u1[0] - u0[0]).abs() < 1e-12 && (u1[1] - u0[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (q, k, v) = (random(&[5, 3], &mut rng), random(&[5, 3], &mut rng), random(&[5, 4], &mut rng));
        let w = random(&[5, 4], &mut rng);
        let f = |t: &mut Tape, x: &[Var]| {
            let u = causal_attention_op(t, x[0], x[1], x[2])?;
            let u = t.mul(u, x[3])?;
            Ok(t.sum(u))
        };
        let err = max_rel_error(&[q.clone(), k.clone(), v.clone(), w.clone()], &f, 1e-5);
        assert!(err < 1e-4, "softmax attention {err}");

        let f = |t: &mut Tape, x: &[Var]| {
            let qf = t.elu_plus_one(x[0]);
            let kf = t.elu_plus_one(x[1]);
            let u = causal_linear_attention_op(t, qf, kf, x[2])?;
            let u = t.mul(u, x[3])?;
            Ok(t.sum(u))
        };
        let err = max_rel_error(&[q.clone(), k.clone(), v.clone(), w.clone()], &f, 1e-5);
        assert!(err < 1e-4, "linear attention {err}");

        let wp = orthogonal_features(6, 3, &mut rng);
        let wp2 = wp.clone();
        let f = move |t: &mut Tape, x: &[Var]| {
            let wpv = t.constant(wp2.clone());
            let xs = t.scale(x[0], 0.5);
            let y = favor_op(t, xs, wpv)?;
            let s = t.square(y);
            Ok(t.sum(s))
        };
        let err = max_rel_error(&[q], &f, 1e-5);
        assert!(err < 1e-4, "favor {err}");
    }
}
