//! Dense mixture of two-layer MLP experts.

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// `W2 · silu(W1ᵀ u + b1) + b2`, borrowed from a parameter store.
#[derive(Clone, Copy, Debug)]
pub struct Expert<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
    pub w2: &'a Tensor,
    pub b2: &'a Tensor,
}

/// Linear router producing one logit per expert.
#[derive(Clone, Copy, Debug)]
pub struct Router<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
}

/// `u · W + b` for a single row.
pub fn affine(u: &[f64], w: &Tensor, b: Option<&Tensor>) -> Result<Vec<f64>> {
    if w.rows() != u.len() {
        return Err(Error::dim("affine", &[u.len()], w.shape()));
    }
    let mut out = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; w.cols()],
    };
    if out.len() != w.cols() {
        return Err(Error::dim("affine bias", w.shape(), &[out.len()]));
    }
    for (i, &x) in u.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += x * wv;
        }
    }
    Ok(out)
}

impl Expert<'_> {
    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = affine(u, self.w1, Some(self.b1))?
            .into_iter()
            .map(tensor::silu)
            .collect();
        affine(&h, self.w2, Some(self.b2))
    }
}

/// Dense routing weights `softmax(u · W_r + b_r)`.
pub fn router_weights(u: &[f64], router: &Router<'_>) -> Result<Vec<f64>> {
    let logits = affine(u, router.weight, Some(router.bias))?;
    tensor::softmax(&logits, 1.0)
}

/// `Σ_e w_e · expert_e(u)` with dense softmax router weights.
pub fn moe_layer_forward(u: &[f64], experts: &[Expert<'_>], router: &Router<'_>) -> Result<Vec<f64>> {
    if experts.is_empty() {
        return Err(Error::Config("mixture of experts needs at least one expert".into()));
    }
    let w = router_weights(u, router)?;
    if w.len() != experts.len() {
        return Err(Error::dim("moe router", &[w.len()], &[experts.len()]));
    }
    let mut out = vec![0.0; u.len()];
    for (e, &we) in experts.iter().zip(&w) {
        for (o, y) in out.iter_mut().zip(e.forward(u)?) {
            *o += we * y;
        }
    }
    Ok(out)
}
