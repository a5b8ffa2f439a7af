//! Focal, alignment, calibration and generation losses and their weighted sum.
//!
//! All losses are batch means, so the balancing weights do not depend on the
//! batch size.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::array::Array;
use crate::error::{Error, Result};
use crate::tape::{Graph, Var};

/// Weights on the alignment, calibration and generation terms. The focal term
/// always has weight one.
///
/// Only the generation weight default (0.5) has empirical backing; the other
/// two default to 1.0 as a neutral choice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Param {
                    name: "loss weight",
                    detail: alloc::format!("{name} = {v} must be a finite nonnegative number"),
                });
            }
        }
        Ok(())
    }
}

/// Focusing exponent and per-class balancing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalConfig {
    pub fn new(gamma: f64, alpha: Vec<f64>) -> Result<Self> {
        if !(gamma >= 0.0) {
            return Err(Error::param("gamma", "must be nonnegative"));
        }
        if alpha.is_empty() || alpha.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::param("alpha", "weights must be nonnegative"));
        }
        Ok(Self { gamma, alpha })
    }

    /// Plain cross-entropy: `gamma = 0`, unit weights.
    pub fn cross_entropy(classes: usize) -> Self {
        Self {
            gamma: 0.0,
            alpha: vec![1.0; classes],
        }
    }

    /// Inverse class frequency weights rescaled to mean one. Classes with no
    /// samples are treated as having one.
    pub fn inverse_frequency(counts: &[usize], gamma: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Empty("class counts"));
        }
        let inv: Vec<f64> = counts.iter().map(|&n| 1.0 / n.max(1) as f64).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        Self::new(gamma, inv.into_iter().map(|w| w / mean).collect())
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }
}

/// Similarity used by the alignment loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Cosine,
    Dot,
}

impl SimKind {
    pub fn name(self) -> &'static str {
        match self {
            SimKind::Cosine => "cosine",
            SimKind::Dot => "dot",
        }
    }
}

fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::shape("targets", &[rows], &[targets.len()]));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Index {
            what: "target class",
            index: t,
            bound: classes,
        });
    }
    Ok(())
}

fn matrix(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize)> {
    let s = g.value(v).shape();
    if s.len() != 2 {
        return Err(Error::shape(op, s, &[0, 0]));
    }
    Ok((s[0], s[1]))
}

/// `B × C` indicator matrix of `targets`, each row scaled by `weights[row]`.
fn weighted_onehot(targets: &[usize], classes: usize, weights: &[f64]) -> Array {
    let mut a = Array::zeros(&[targets.len(), classes]);
    for (r, &t) in targets.iter().enumerate() {
        a.set(r, t, weights[r]);
    }
    a
}

/// Log-probability of each row's target class, as a `B × 1` column.
fn target_log_probs(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let (b, c) = matrix(g, logits, "focal_loss")?;
    check_targets(targets, b, c)?;
    let logp = g.log_softmax_rows(logits);
    let mask = g.constant(weighted_onehot(targets, c, &vec![1.0; b]));
    let picked = g.mul(logp, mask)?;
    g.sum_axis(picked, 1)
}

/// Batch mean of `−α_t (1 − p_t)^γ log p_t` with `p = softmax(logits)`.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[usize], cfg: &FocalConfig) -> Result<Var> {
    let (b, c) = matrix(g, logits, "focal_loss")?;
    if cfg.classes() != c {
        return Err(Error::shape("focal_loss alpha", &[c], &[cfg.classes()]));
    }
    check_targets(targets, b, c)?;
    let logpt = target_log_probs(g, logits, targets)?;
    let nll = g.neg(logpt);
    let alpha_t: Vec<f64> = targets.iter().map(|&t| cfg.alpha[t]).collect();
    let alpha_t = g.constant(Array::new(&[b, 1], alpha_t)?);
    let mut per = g.mul(alpha_t, nll)?;
    if cfg.gamma != 0.0 {
        let pt = g.exp(logpt);
        let one_minus = g.neg(pt);
        let one_minus = g.add_scalar(one_minus, 1.0);
        // p_t can round to exactly 1; the base is then 0 and stays in range.
        let modulator = g.powf(one_minus, cfg.gamma)?;
        per = g.mul(modulator, per)?;
    }
    Ok(g.mean(per))
}

/// Symmetric InfoNCE between matched rows of `v` and `t`.
///
/// Row `i` of each side is the positive for row `i` of the other; all other
/// rows in the batch are negatives. The result averages the `v → t` and
/// `t → v` directions, each a batch mean.
pub fn align_loss(g: &mut Graph, v: Var, t: Var, tau: f64, sim: SimKind) -> Result<Var> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", "temperature must be positive"));
    }
    let (b, d) = matrix(g, v, "align_loss")?;
    let (bt, dt) = matrix(g, t, "align_loss")?;
    if (b, d) != (bt, dt) {
        return Err(Error::shape("align_loss", &[b, d], &[bt, dt]));
    }
    let (v, t) = match sim {
        SimKind::Cosine => (g.normalize_rows(v)?, g.normalize_rows(t)?),
        SimKind::Dot => (v, t),
    };
    let s = g.matmul_nt(v, t)?;
    let s = g.scale(s, 1.0 / tau);
    let eye = g.constant(Array::identity(b));
    let mut directions = [s, s];
    directions[1] = g.transpose(s)?;
    let mut total = None;
    for logits in directions {
        let logp = g.log_softmax_rows(logits);
        let diag = g.mul(logp, eye)?;
        let diag = g.sum_axis(diag, 1)?;
        let loss = g.mean(diag);
        let loss = g.neg(loss);
        total = Some(match total {
            None => loss,
            Some(prev) => g.add(prev, loss)?,
        });
    }
    Ok(g.scale(total.expect("two directions"), 0.5))
}

/// Brier score `(1/C) Σ_k (p_k − y_k)²`, averaged over the batch.
pub fn cal_loss(g: &mut Graph, logits: Var, onehot: &Array) -> Result<Var> {
    let (b, c) = matrix(g, logits, "cal_loss")?;
    if onehot.shape() != [b, c] {
        return Err(Error::shape("cal_loss", &[b, c], onehot.shape()));
    }
    for r in 0..b {
        let row = onehot.row(r);
        let ones = row.iter().filter(|&&x| x == 1.0).count();
        let zeros = row.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::Contract(alloc::format!(
                "target row {r} is not one-hot: {row:?}"
            )));
        }
    }
    let p = g.softmax_rows(logits);
    let y = g.constant(onehot.clone());
    let diff = g.sub(p, y)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// One-hot rows for `targets`.
pub fn onehot(targets: &[usize], classes: usize) -> Result<Array> {
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Index {
            what: "target class",
            index: t,
            bound: classes,
        });
    }
    if targets.is_empty() {
        return Err(Error::Empty("onehot"));
    }
    Ok(weighted_onehot(targets, classes, &vec![1.0; targets.len()]))
}

/// Mean next-token negative log-likelihood over unmasked positions.
/// `mask[t] == true` means position `t` counts.
pub fn gen_loss(g: &mut Graph, token_logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (t, vocab) = matrix(g, token_logits, "gen_loss")?;
    check_targets(targets, t, vocab)?;
    if mask.len() != t {
        return Err(Error::shape("gen_loss mask", &[t], &[mask.len()]));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::Empty("gen_loss: every position is masked"));
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 1.0 / active as f64 } else { 0.0 })
        .collect();
    let logp = g.log_softmax_rows(token_logits);
    let sel = g.constant(weighted_onehot(targets, vocab, &w));
    let picked = g.mul(logp, sel)?;
    let s = g.sum(picked);
    Ok(g.neg(s))
}

/// Components of the combined objective and the combined scalar.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub focal: Var,
    pub align: Var,
    pub cal: Var,
    pub gen: Var,
    pub total: Var,
    pub weights: LossWeights,
}

/// Plain values read off a [`LossBundle`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub focal: f64,
    pub align: f64,
    pub cal: f64,
    pub gen: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            focal: g.value(self.focal).item(),
            align: g.value(self.align).item(),
            cal: g.value(self.cal).item(),
            gen: g.value(self.gen).item(),
            total: g.value(self.total).item(),
        }
    }
}

impl LossValues {
    /// The weighted combination recomputed from the logged components.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        self.focal + w.lambda1 * self.align + w.lambda2 * self.cal + w.lambda3 * self.gen
    }
}

/// `focal + λ₁·align + λ₂·cal + λ₃·gen`.
pub fn cfa_total(
    g: &mut Graph,
    focal: Var,
    align: Var,
    cal: Var,
    gen: Var,
    w: LossWeights,
) -> Result<LossBundle> {
    w.validate()?;
    for (name, v) in [("focal", focal), ("align", align), ("cal", cal), ("gen", gen)] {
        let x = g.value(v);
        if !x.is_scalar() {
            return Err(Error::Contract(alloc::format!("{name} component is not scalar")));
        }
        if !x.item().is_finite() {
            return Err(Error::Contract(alloc::format!(
                "{name} component is not finite ({})",
                x.item()
            )));
        }
    }
    let a = g.scale(align, w.lambda1);
    let c = g.scale(cal, w.lambda2);
    let r = g.scale(gen, w.lambda3);
    let total = g.add(focal, a)?;
    let total = g.add(total, c)?;
    let total = g.add(total, r)?;
    Ok(LossBundle {
        focal,
        align,
        cal,
        gen,
        total,
        weights: w,
    })
}

/// Per-sample view of how the focal term rescales the classification
/// gradient next to the alignment gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationSample {
    pub target: usize,
    pub p_t: f64,
    /// `(1 − p_t)^γ`.
    pub focal_scale: f64,
    /// Norm of this sample's focal gradient with respect to its logits.
    pub focal_grad_norm: f64,
    /// Norm of `λ · ∂L_align/∂v_i` for this sample's visual embedding.
    pub align_grad_norm: f64,
    /// Largest deviation between the tape gradient and the closed form
    /// `α(1−p)^γ·∇CE + αγ·p(1−p)^{γ−1}·log p·(δ − p)`.
    pub closed_form_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationReport {
    pub samples: Vec<ModulationSample>,
}

impl ModulationReport {
    pub fn max_closed_form_error(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.closed_form_error)
            .fold(0.0, f64::max)
    }

    /// Mean focal scale over samples whose target is `class`, if any.
    pub fn mean_scale_for(&self, class: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .samples
            .iter()
            .filter(|s| s.target == class)
            .map(|s| s.focal_scale)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn mean_scale(&self) -> f64 {
        self.samples.iter().map(|s| s.focal_scale).sum::<f64>() / self.samples.len() as f64
    }
}

/// Gradient modulation diagnostic on a batch of logits and paired
/// visual/text embeddings.
///
/// Per-sample gradients are reported un-averaged (the batch-mean gradient
/// row times the batch size).
#[allow(clippy::too_many_arguments)]
pub fn grad_modulation_report(
    logits: &Array,
    targets: &[usize],
    cfg: &FocalConfig,
    v: &Array,
    t: &Array,
    tau: f64,
    sim: SimKind,
    lambda: f64,
) -> Result<ModulationReport> {
    if targets.is_empty() {
        return Err(Error::Empty("grad_modulation_report"));
    }
    let b = targets.len();
    let c = logits.cols();

    let mut g = Graph::new();
    let z = g.param(logits.clone());
    let focal = focal_loss(&mut g, z, targets, cfg)?;
    let gz = g.backward(focal, &[z])?.remove(0);

    let mut g = Graph::new();
    let vv = g.param(v.clone());
    let tv = g.constant(t.clone());
    let align = align_loss(&mut g, vv, tv, tau, sim)?;
    let gv = g.backward(align, &[vv])?.remove(0);

    let probs = crate::tape::softmax_rows(logits);
    let mut samples = Vec::with_capacity(b);
    for (i, &target) in targets.iter().enumerate() {
        let p = probs.row(i);
        let pt = p[target];
        let alpha = cfg.alpha[target];
        let one_minus = 1.0 - pt;
        let scale = libm::pow(one_minus, cfg.gamma);
        let correction = if cfg.gamma == 0.0 {
            0.0
        } else {
            let pw = if one_minus == 0.0 {
                if cfg.gamma == 1.0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                libm::pow(one_minus, cfg.gamma - 1.0)
            };
            alpha * cfg.gamma * pt * pw * libm::log(pt)
        };
        let mut err: f64 = 0.0;
        let mut norm2 = 0.0;
        for k in 0..c {
            let delta = if k == target { 1.0 } else { 0.0 };
            let ce = p[k] - delta;
            let closed = alpha * scale * ce + correction * (delta - p[k]);
            let tape = gz.get(i, k) * b as f64;
            err = err.max((tape - closed).abs());
            norm2 += tape * tape;
        }
        let align_norm = libm::sqrt(gv.row(i).iter().map(|x| x * x).sum::<f64>())
            * lambda.abs()
            * b as f64;
        samples.push(ModulationSample {
            target,
            p_t: pt,
            focal_scale: scale,
            focal_grad_norm: libm::sqrt(norm2),
            align_grad_norm: align_norm,
            closed_form_error: err,
        });
    }
    if samples.iter().any(|s| !s.focal_grad_norm.is_finite()) {
        return Err(Error::Contract("non-finite modulation gradient".to_string()));
    }
    Ok(ModulationReport { samples })
}
