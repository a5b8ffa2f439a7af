//! Finite-difference gate over every differentiable objective on seeded
//! inputs.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradientReport};
use crate::losses::{align_loss, cal_loss, cfa_total, focal_loss, gen_loss, onehot, FocalConfig, LossWeights, SimKind};
use crate::model::lora_forward;
use crate::pooling::{focal_pool, PoolVars};
use crate::rng;
use crate::tape::{Graph, Var};

pub const GATE_STEP: f64 = 1e-5;
pub const GATE_TOLERANCE: f64 = 1e-4;

/// Deliberate backward-rule defects used to prove the gate can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    None,
    /// Focal loss keeps its value but reports the negated gradient.
    FocalSignFlip,
}

#[derive(Debug, Clone)]
pub struct GateEntry {
    pub objective: &'static str,
    pub report: GradientReport,
}

#[derive(Debug, Clone)]
pub struct GateSummary {
    pub entries: Vec<GateEntry>,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateFailure {
    pub objective: &'static str,
    pub param: String,
    pub rel_error: f64,
}

impl GateSummary {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.report.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<GateFailure> {
        let mut out = Vec::new();
        for e in &self.entries {
            for p in &e.report.params {
                if !(p.max_rel_error <= self.tolerance) {
                    out.push(GateFailure {
                        objective: e.objective,
                        param: p.name.clone(),
                        rel_error: p.max_rel_error,
                    });
                }
            }
        }
        out
    }

    pub fn passes(&self) -> bool {
        self.failures().is_empty()
    }
}

fn focal_term(g: &mut Graph, logits: Var, targets: &[usize], cfg: &FocalConfig, mutation: Mutation) -> Result<Var> {
    let l = focal_loss(g, logits, targets, cfg)?;
    Ok(match mutation {
        Mutation::None => l,
        // 2·stop_grad(L) − L has the value of L and the gradient of −L.
        Mutation::FocalSignFlip => {
            let d = g.detach(l);
            let d2 = g.scale(d, 2.0);
            g.sub(d2, l)?
        }
    })
}

const B: usize = 4;
const C: usize = 3;
const D: usize = 5;
const TOKENS: usize = 6;
const VOCAB: usize = 7;

/// Checks focal, alignment (both similarities), calibration, generative,
/// pooling, LoRA and combined objectives at `h = 1e-5`.
pub fn gradcheck_all(seed: u64, mutation: Mutation) -> Result<GateSummary> {
    let mut r = rng::stream(seed, 7);
    let targets = [0usize, 2, 1, 2];
    let focal_cfg = FocalConfig::new(2.0, vec![0.5, 1.0, 1.5])?;
    let logits = rng::gaussian(&mut r, &[B, C], 1.0);
    let v = rng::gaussian(&mut r, &[B, D], 1.0);
    let t = rng::gaussian(&mut r, &[B, D], 1.0);
    let token_logits = rng::gaussian(&mut r, &[TOKENS, VOCAB], 1.0);
    let token_targets = [1usize, 4, 6, 0, 3, 2];
    let mask = [true, true, false, true, true, true];
    let y = onehot(&targets, C)?;
    let tau = 0.07;
    let mut entries = Vec::new();

    let fc = focal_cfg.clone();
    entries.push(GateEntry {
        objective: "focal_loss",
        report: finite_diff_check(
            move |g: &mut Graph, p: &[Var]| focal_term(g, p[0], &targets, &fc, mutation),
            &[("logits", logits.clone())],
            GATE_STEP,
        )?,
    });
    for (objective, sim) in [("align_loss_cosine", SimKind::Cosine), ("align_loss_dot", SimKind::Dot)] {
        let scale = if sim == SimKind::Dot { 0.2 } else { 1.0 };
        entries.push(GateEntry {
            objective,
            report: finite_diff_check(
                move |g: &mut Graph, p: &[Var]| align_loss(g, p[0], p[1], tau, sim),
                &[("v", v.scaled(scale)), ("t", t.scaled(scale))],
                GATE_STEP,
            )?,
        });
    }
    let yc = y.clone();
    entries.push(GateEntry {
        objective: "cal_loss",
        report: finite_diff_check(
            move |g: &mut Graph, p: &[Var]| cal_loss(g, p[0], &yc),
            &[("logits", logits.clone())],
            GATE_STEP,
        )?,
    });
    entries.push(GateEntry {
        objective: "gen_loss",
        report: finite_diff_check(
            move |g: &mut Graph, p: &[Var]| gen_loss(g, p[0], &token_targets, &mask),
            &[("token_logits", token_logits.clone())],
            GATE_STEP,
        )?,
    });

    let n_patches = 5;
    let d_k = 3;
    let patches = rng::gaussian(&mut r, &[n_patches, D], 1.0);
    let readout = rng::gaussian(&mut r, &[1, D], 1.0);
    let attn_readout = rng::gaussian(&mut r, &[1, n_patches], 1.0);
    entries.push(GateEntry {
        objective: "focal_pool",
        report: finite_diff_check(
            move |g: &mut Graph, p: &[Var]| {
                let fp = PoolVars {
                    q_focal: p[1],
                    w_q: p[2],
                    w_k: p[3],
                    w_v: p[4],
                };
                let out = focal_pool(g, p[0], &fp)?;
                let rv = g.constant(readout.clone());
                let ra = g.constant(attn_readout.clone());
                let a = g.mul(out.v_global, rv)?;
                let b = g.mul(out.alphas, ra)?;
                let a = g.sum(a);
                let b = g.sum(b);
                g.add(a, b)
            },
            &[
                ("patches", patches),
                ("q_focal", rng::gaussian(&mut r, &[1, D], 1.0)),
                ("w_q", rng::gaussian(&mut r, &[D, d_k], 0.7)),
                ("w_k", rng::gaussian(&mut r, &[D, d_k], 0.7)),
                ("w_v", rng::gaussian(&mut r, &[D, D], 0.7)),
            ],
            GATE_STEP,
        )?,
    });

    let rank = 2;
    let lora_readout = rng::gaussian(&mut r, &[B, C], 1.0);
    entries.push(GateEntry {
        objective: "lora_forward",
        report: finite_diff_check(
            move |g: &mut Graph, p: &[Var]| {
                let y = lora_forward(g, p[0], p[1], p[2], p[3], 1.5)?;
                let w = g.constant(lora_readout.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &[
                ("x", rng::gaussian(&mut r, &[B, D], 1.0)),
                ("base", rng::gaussian(&mut r, &[D, C], 1.0)),
                ("a", rng::gaussian(&mut r, &[rank, D], 1.0)),
                ("b", rng::gaussian(&mut r, &[C, rank], 1.0)),
            ],
            GATE_STEP,
        )?,
    });

    let weights = LossWeights::default();
    entries.push(GateEntry {
        objective: "cfa_total",
        report: finite_diff_check(
            move |g: &mut Graph, p: &[Var]| {
                let f = focal_term(g, p[0], &targets, &focal_cfg, mutation)?;
                let a = align_loss(g, p[1], p[2], tau, SimKind::Cosine)?;
                let c = cal_loss(g, p[0], &y)?;
                let l = gen_loss(g, p[3], &token_targets, &mask)?;
                Ok(cfa_total(g, f, a, c, l, weights)?.total)
            },
            &[
                ("logits", logits),
                ("v", v),
                ("t", t),
                ("token_logits", token_logits),
            ],
            GATE_STEP,
        )?,
    });

    Ok(GateSummary {
        entries,
        tolerance: GATE_TOLERANCE,
    })
}
