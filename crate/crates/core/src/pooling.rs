//! Focal pooling: one learnable query attends over patch embeddings and
//! returns the attention weights and the weighted global descriptor.
//!
//! The projections are applied as `scores_i = (p_i W_Q)(q W_K)ᵀ / √d_k`, i.e.
//! `W_Q` projects the patches and `W_K` projects the query, the reverse of the
//! usual attention naming.

use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::losses::SimKind;
use crate::rng;
use crate::tape::{Graph, Var};

/// Initialisation scale for the query and projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct FocalPooling {
    /// `1 × d`.
    pub q_focal: Array,
    /// `d × d_k`.
    pub w_q: Array,
    /// `d × d_k`.
    pub w_k: Array,
    /// `d × d`.
    pub w_v: Array,
}

/// Pooling parameters bound onto a graph.
#[derive(Debug, Clone, Copy)]
pub struct PoolVars {
    pub q_focal: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PoolOutput {
    /// `1 × N` attention weights.
    pub alphas: Var,
    /// `1 × d` global descriptor.
    pub v_global: Var,
}

/// Plain-array pooling result.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolResult {
    pub alphas: Vec<f64>,
    pub v_global: Vec<f64>,
}

impl FocalPooling {
    pub fn new(q_focal: Array, w_q: Array, w_k: Array, w_v: Array) -> Result<Self> {
        if q_focal.rank() != 2 || q_focal.shape()[0] != 1 {
            return Err(Error::shape("focal pooling query", q_focal.shape(), &[1, 0]));
        }
        let d = q_focal.cols();
        if w_q.shape() != w_k.shape() || w_q.rank() != 2 || w_q.shape()[0] != d {
            return Err(Error::shape("focal pooling W_Q/W_K", w_q.shape(), w_k.shape()));
        }
        if w_v.shape() != [d, d] {
            return Err(Error::shape("focal pooling W_V", w_v.shape(), &[d, d]));
        }
        for a in [&q_focal, &w_q, &w_k, &w_v] {
            if !a.all_finite() {
                return Err(Error::Contract("focal pooling weights must be finite".into()));
            }
        }
        Ok(Self {
            q_focal,
            w_q,
            w_k,
            w_v,
        })
    }

    /// Gaussian initialisation with standard deviation [`INIT_STD`].
    pub fn init(d: usize, d_k: usize, rng: &mut rng::Rng) -> Result<Self> {
        if d == 0 || d_k == 0 {
            return Err(Error::param("d_k", "pooling dimensions must be positive"));
        }
        Self::new(
            rng::gaussian(rng, &[1, d], INIT_STD),
            rng::gaussian(rng, &[d, d_k], INIT_STD),
            rng::gaussian(rng, &[d, d_k], INIT_STD),
            rng::gaussian(rng, &[d, d], INIT_STD),
        )
    }

    pub fn dim(&self) -> usize {
        self.q_focal.cols()
    }

    pub fn d_k(&self) -> usize {
        self.w_q.cols()
    }

    /// Binds the weights as trainable leaves (or constants).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PoolVars {
        let mut leaf = |a: &Array| {
            if trainable {
                g.param(a.clone())
            } else {
                g.constant(a.clone())
            }
        };
        PoolVars {
            q_focal: leaf(&self.q_focal),
            w_q: leaf(&self.w_q),
            w_k: leaf(&self.w_k),
            w_v: leaf(&self.w_v),
        }
    }

    /// Evaluates the pooling on plain arrays.
    pub fn pool(&self, patches: &Array) -> Result<PoolResult> {
        let mut g = Graph::new();
        let p = g.constant(patches.clone());
        let vars = self.bind(&mut g, false);
        let out = focal_pool(&mut g, p, &vars)?;
        Ok(PoolResult {
            alphas: g.value(out.alphas).data().to_vec(),
            v_global: g.value(out.v_global).data().to_vec(),
        })
    }
}

/// `α = softmax_i((p_i W_Q)(q W_K)ᵀ / √d_k)` and `v_global = Σ_i α_i p_i W_V`.
pub fn focal_pool(g: &mut Graph, patches: Var, fp: &PoolVars) -> Result<PoolOutput> {
    let shape = g.value(patches).shape();
    if shape.len() != 2 {
        return Err(Error::shape("focal_pool", shape, &[0, 0]));
    }
    if shape[0] == 0 {
        return Err(Error::Empty("focal_pool patches"));
    }
    let d_k = g.value(fp.w_q).cols();
    let keys = g.matmul(patches, fp.w_q)?;
    let query = g.matmul(fp.q_focal, fp.w_k)?;
    let scores = g.matmul_nt(query, keys)?;
    let scores = g.scale(scores, 1.0 / libm::sqrt(d_k as f64));
    let alphas = g.softmax_rows(scores);
    let values = g.matmul(patches, fp.w_v)?;
    let v_global = g.matmul(alphas, values)?;
    Ok(PoolOutput { alphas, v_global })
}

/// `∂S/∂α_k` for the positive-pair logit `S = (v_global · t_global) / τ`,
/// with `α` treated as free coordinates at the evaluated point.
///
/// Computed by reverse-mode differentiation; by linearity it equals
/// `(1/τ)(p_k W_V)·t_global`. Only the dot-product similarity is supported.
pub fn grounding_gradient(
    pool: &PoolResult,
    patches: &Array,
    fp: &FocalPooling,
    t_global: &[f64],
    tau: f64,
    sim: SimKind,
) -> Result<Vec<f64>> {
    if sim != SimKind::Dot {
        return Err(Error::Unsupported(
            "grounding gradient is defined for dot-product similarity only",
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::param("tau", "temperature must be positive"));
    }
    let n = patches.shape()[0];
    if pool.alphas.len() != n {
        return Err(Error::shape("grounding_gradient", &[n], &[pool.alphas.len()]));
    }
    if t_global.len() != fp.dim() {
        return Err(Error::shape("grounding_gradient", &[fp.dim()], &[t_global.len()]));
    }
    let mut g = Graph::new();
    let alphas = g.param(Array::row_vector(&pool.alphas)?);
    let p = g.constant(patches.clone());
    let wv = g.constant(fp.w_v.clone());
    let t = g.constant(Array::row_vector(t_global)?);
    let values = g.matmul(p, wv)?;
    let v = g.matmul(alphas, values)?;
    let s = g.matmul_nt(v, t)?;
    let s = g.scale(s, 1.0 / tau);
    let s = g.sum(s);
    Ok(g.backward(s, &[alphas])?.remove(0).into_data())
}

/// Closed form `(1/τ)(p_k W_V)·t_global` for every patch.
pub fn grounding_closed_form(patches: &Array, fp: &FocalPooling, t_global: &[f64], tau: f64) -> Result<Vec<f64>> {
    let values = patches.matmul(&fp.w_v)?;
    Ok((0..values.rows())
        .map(|k| values.row(k).iter().zip(t_global).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect())
}

/// Index of the largest entry; lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
