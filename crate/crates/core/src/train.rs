//! Mini-batch training of the combined objective, evaluation, and the
//! experiment arms that switch loss components on and off.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::{
    align_loss, cal_loss, cfa_total, focal_loss, gen_loss, grad_modulation_report, onehot, FocalConfig,
    LossValues, LossWeights, SimKind,
};
use crate::metrics::{evaluate_predictions, EvalReport, PredictionSet};
use crate::model::{teacher_inputs, EncodedSample, Model, ModelConfig, TuneMode};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng;
use crate::synth::{self, class_counts, DataConfig, Dataset, MetaVocab, SampleRecord, Split};
use crate::tape::Graph;

/// Which loss components are active and how the model is tuned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Arm {
    CeOnly,
    FocalOnly,
    FocalAlign,
    FocalCal,
    FullCfa,
    /// The full objective with every weight trainable.
    FullFt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    /// Focusing and class weights on; plain cross-entropy otherwise.
    pub focal: bool,
    pub align: bool,
    pub cal: bool,
    pub gen: bool,
}

impl Arm {
    pub const ALL: [Arm; 6] = [
        Arm::CeOnly,
        Arm::FocalOnly,
        Arm::FocalAlign,
        Arm::FocalCal,
        Arm::FullCfa,
        Arm::FullFt,
    ];
    /// Rows of the ablation table, in order.
    pub const ABLATION: [Arm; 5] = [Arm::CeOnly, Arm::FocalOnly, Arm::FocalAlign, Arm::FocalCal, Arm::FullCfa];

    pub fn name(self) -> &'static str {
        match self {
            Arm::CeOnly => "ce_only",
            Arm::FocalOnly => "focal_only",
            Arm::FocalAlign => "focal_align",
            Arm::FocalCal => "focal_cal",
            Arm::FullCfa => "full_cfa",
            Arm::FullFt => "full_ft",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "frozen_vs_fullft" {
            return Ok(Arm::FullFt);
        }
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Vocabulary {
            kind: "arm",
            value: s.into(),
        })
    }

    pub fn components(self) -> Components {
        let (focal, align, cal, gen) = match self {
            Arm::CeOnly => (false, false, false, false),
            Arm::FocalOnly => (true, false, false, false),
            Arm::FocalAlign => (true, true, false, false),
            Arm::FocalCal => (true, false, true, false),
            Arm::FullCfa | Arm::FullFt => (true, true, true, true),
        };
        Components { focal, align, cal, gen }
    }

    pub fn tune(self) -> TuneMode {
        match self {
            Arm::FullFt => TuneMode::Full,
            _ => TuneMode::Lora,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub gamma: f64,
    pub tau: f64,
    pub sim: SimKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            gamma: 2.0,
            tau: 0.07,
            sim: SimKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub adamw: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adamw: AdamWConfig::default(),
            epochs: 20,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub arm: Arm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            arm: Arm::FullCfa,
        }
    }
}

impl TrainConfig {
    /// Model configuration implied by the data shapes and the arm.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_v: self.data.d_v,
            n_patches: self.data.n_patches,
            vocab_size: self.data.vocab_size,
            desc_len: self.data.desc_len,
            classes: self.data.classes,
            tune: self.arm.tune(),
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model_config().validate()?;
        self.loss.weights.validate()?;
        self.optim.adamw.validate()?;
        if !(self.loss.gamma >= 0.0) {
            return Err(Error::param("gamma", "must be nonnegative"));
        }
        if !(self.loss.tau > 0.0) {
            return Err(Error::param("tau", "temperature must be positive"));
        }
        if self.optim.epochs == 0 {
            return Err(Error::param("epochs", "must be at least 1"));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch means of the logged components.
    pub losses: LossValues,
    pub val: Option<EvalReport>,
    /// Mean `(1 − p_t)^γ` over training samples of the majority classes.
    pub focal_scale_majority: f64,
    /// Mean `(1 − p_t)^γ` over training samples of the minority classes.
    pub focal_scale_minority: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub arm: Arm,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Largest `|total − recombined components|` seen over all steps.
    pub max_total_gap: f64,
    pub train_size: usize,
}

impl RunHistory {
    pub const CSV_HEADER: &'static str = "arm,seed,epoch,focal,align,cal,gen,total,val_b_acc,val_auroc,val_ece,scale_majority,scale_minority";

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for e in &self.epochs {
            let (b, a, c) = e
                .val
                .as_ref()
                .map(|r| (r.b_acc, r.auroc_macro, r.ece))
                .unwrap_or((f64::NAN, f64::NAN, f64::NAN));
            s.push_str(&format!(
                "{},{},{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                self.arm.name(),
                self.seed,
                e.epoch,
                e.losses.focal,
                e.losses.align,
                e.losses.cal,
                e.losses.gen,
                e.losses.total,
                b,
                a,
                c,
                e.focal_scale_majority,
                e.focal_scale_minority
            ));
        }
        s
    }
}

/// Converts records for `model`.
pub fn encode_all(model: &Model, records: &[&SampleRecord]) -> Result<Vec<EncodedSample>> {
    let vocab = MetaVocab::default();
    records.iter().map(|r| model.encode(r, &vocab)).collect()
}

const EVAL_CHUNK: usize = 64;

/// Discrimination and calibration metrics of `model` on `samples`.
pub fn evaluate_encoded(model: &Model, samples: &[EncodedSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let refs: Vec<&EncodedSample> = samples.iter().collect();
    let probs = model.predict_probs(&refs, EVAL_CHUNK)?;
    let labels = samples.iter().map(|s| s.class_id).collect();
    evaluate_predictions(&PredictionSet::new(probs, labels)?)
}

pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<EvalReport> {
    let records = data.split(split);
    if records.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    evaluate_encoded(model, &encode_all(model, &records)?)
}

/// Share of samples whose greedy rationale opens with their class signature.
pub fn generation_accuracy(model: &Model, samples: &[EncodedSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("generation split"));
    }
    let mut hits = 0;
    for part in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&EncodedSample> = part.iter().collect();
        let out = model.generate(&refs, synth::SIGNATURE_LEN)?;
        for (s, toks) in part.iter().zip(&out) {
            if toks.as_slice() == synth::signature(s.class_id) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Trains a fresh model on `train_set`, evaluating on `val_set` after every
/// epoch.
pub fn train(cfg: &TrainConfig, train_set: &[&SampleRecord], val_set: &[&SampleRecord]) -> Result<(Model, RunHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mcfg = cfg.model_config();
    let classes = mcfg.classes;
    let mut model = Model::new(mcfg, cfg.seed)?;
    let samples = encode_all(&model, train_set)?;
    let val = encode_all(&model, val_set)?;

    let counts = class_counts(train_set, classes);
    let comps = cfg.arm.components();
    let focal_cfg = if comps.focal {
        FocalConfig::inverse_frequency(&counts, cfg.loss.gamma)?
    } else {
        FocalConfig::cross_entropy(classes)
    };
    let mean_count = counts.iter().sum::<usize>() as f64 / classes as f64;
    let majority: Vec<bool> = counts.iter().map(|&n| n as f64 >= mean_count).collect();
    let weights = LossWeights {
        lambda1: if comps.align { cfg.loss.weights.lambda1 } else { 0.0 },
        lambda2: if comps.cal { cfg.loss.weights.lambda2 } else { 0.0 },
        lambda3: if comps.gen { cfg.loss.weights.lambda3 } else { 0.0 },
    };

    let mut opt = AdamW::new(cfg.optim.adamw, &model.params)?;
    let mut shuffle = rng::stream(cfg.seed, 6);
    let mut history = RunHistory {
        arm: cfg.arm,
        seed: cfg.seed,
        epochs: Vec::with_capacity(cfg.optim.epochs),
        max_total_gap: 0.0,
        train_size: samples.len(),
    };

    for epoch in 1..=cfg.optim.epochs {
        let order = rng::permutation(&mut shuffle, samples.len());
        let mut sums = LossValues::default();
        let mut batches = 0usize;
        let mut scale = [(0.0, 0usize), (0.0, 0usize)];
        for (bi, idx) in order.chunks(cfg.optim.batch_size).enumerate() {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|s| s.class_id).collect();
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let text = comps.gen.then(|| teacher_inputs(&batch));
            let out = model.forward(&mut g, &vars, &batch, text.as_deref())?;
            if !g.value(out.logits).all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                });
            }

            let focal = focal_loss(&mut g, out.logits, &targets, &focal_cfg)?;
            let align = if comps.align {
                align_loss(&mut g, out.v_global, out.t_global, cfg.loss.tau, cfg.loss.sim)?
            } else {
                g.scalar(0.0)
            };
            let cal = if comps.cal {
                cal_loss(&mut g, out.logits, &onehot(&targets, classes)?)?
            } else {
                g.scalar(0.0)
            };
            let gen = match out.token_logits {
                Some(tl) => {
                    let tt: Vec<usize> = batch.iter().flat_map(|s| s.desc.iter().copied()).collect();
                    let mask = vec![true; tt.len()];
                    gen_loss(&mut g, tl, &tt, &mask)?
                }
                None => g.scalar(0.0),
            };
            for part in [focal, align, cal, gen] {
                let v = g.value(part).item();
                if !v.is_finite() {
                    return Err(Error::Diverged { epoch, batch: bi, loss: v });
                }
            }
            let bundle = cfa_total(&mut g, focal, align, cal, gen, weights)?;
            let vals = bundle.values(&g);
            if !vals.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: vals.total,
                });
            }
            history.max_total_gap = history.max_total_gap.max((vals.total - vals.recombined(&weights)).abs());

            let report = grad_modulation_report(
                g.value(out.logits),
                &targets,
                &focal_cfg,
                g.value(out.v_global),
                g.value(out.t_global),
                cfg.loss.tau,
                cfg.loss.sim,
                weights.lambda1,
            )?;
            for s in &report.samples {
                let slot = &mut scale[usize::from(!majority[s.target])];
                slot.0 += s.focal_scale;
                slot.1 += 1;
            }

            let trainable: Vec<_> = model
                .params
                .entries()
                .iter()
                .zip(&vars)
                .filter(|(e, _)| e.trainable)
                .map(|(_, v)| *v)
                .collect();
            let grads = g.backward(bundle.total, &trainable)?;
            if grads.iter().any(|a| !a.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: vals.total,
                });
            }
            opt.step(&mut model.params, &grads)?;

            sums.focal += vals.focal;
            sums.align += vals.align;
            sums.cal += vals.cal;
            sums.gen += vals.gen;
            sums.total += vals.total;
            batches += 1;
        }
        let n = batches as f64;
        let losses = LossValues {
            focal: sums.focal / n,
            align: sums.align / n,
            cal: sums.cal / n,
            gen: sums.gen / n,
            total: sums.total / n,
        };
        let val_report = if val.is_empty() {
            None
        } else {
            Some(evaluate_encoded(&model, &val)?)
        };
        let mean = |(s, k): (f64, usize)| if k == 0 { f64::NAN } else { s / k as f64 };
        log::info!(
            "{} seed {} epoch {epoch}: total {:.4} focal {:.4} val b-acc {:.3}",
            cfg.arm.name(),
            cfg.seed,
            losses.total,
            losses.focal,
            val_report.as_ref().map_or(f64::NAN, |r| r.b_acc)
        );
        history.epochs.push(EpochRecord {
            epoch,
            losses,
            val: val_report,
            focal_scale_majority: mean(scale[0]),
            focal_scale_minority: mean(scale[1]),
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn small_cfg(arm: Arm) -> TrainConfig {
        let data = DataConfig {
            classes: 3,
            n_total: 60,
            n_patches: 4,
            d_v: 6,
            vocab_size: 20,
            desc_len: 5,
            eval_per_class: 4,
            imbalance_rho: 4.0,
            noise_sigma: 0.3,
            ..DataConfig::default()
        };
        TrainConfig {
            data,
            model: ModelConfig {
                d_enc: 6,
                d_llm: 8,
                d_k: 8,
                layers: 1,
                lora_rank: 2,
                ..ModelConfig::default()
            },
            optim: OptimConfig {
                adamw: AdamWConfig {
                    lr: 5e-3,
                    ..AdamWConfig::default()
                },
                epochs: 4,
                batch_size: 8,
            },
            arm,
            ..TrainConfig::default()
        }
    }

    fn run(cfg: &TrainConfig) -> Result<(Model, RunHistory)> {
        let ds = generate_dataset(&cfg.data)?;
        train(cfg, &ds.split(Split::Train), &ds.split(Split::Val))
    }

    #[test]
    fn zero_lr_keeps_initial_weights() {
        let mut cfg = small_cfg(Arm::FullCfa);
        cfg.optim.adamw.lr = 0.0;
        cfg.optim.epochs = 2;
        let (m, _) = run(&cfg).unwrap();
        let init = Model::new(cfg.model_config(), cfg.seed).unwrap();
        for (a, b) in m.params.entries().iter().zip(init.params.entries()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert!((x - y).abs() <= 1e-12, "{}", a.name);
            }
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = small_cfg(Arm::FullCfa);
        let (m1, h1) = run(&cfg).unwrap();
        let (m2, h2) = run(&cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.csv(), h2.csv());
        assert_eq!(m1, m2);
    }

    #[test]
    fn encoder_stays_frozen_and_total_is_consistent() {
        let cfg = small_cfg(Arm::FullCfa);
        let init = Model::new(cfg.model_config(), cfg.seed).unwrap();
        let (m, h) = run(&cfg).unwrap();
        assert_eq!(m.encoder(), init.encoder());
        assert!(h.max_total_gap <= 1e-10);
        assert_eq!(h.epochs.len(), cfg.optim.epochs);
        assert!(h.epochs.iter().enumerate().all(|(i, e)| e.epoch == i + 1));
        let (ft, _) = run(&small_cfg(Arm::FullFt)).unwrap();
        assert_ne!(ft.encoder(), init.encoder());
    }

    #[test]
    fn inactive_components_are_zero() {
        let (_, h) = run(&small_cfg(Arm::CeOnly)).unwrap();
        for e in &h.epochs {
            assert_eq!((e.losses.align, e.losses.cal, e.losses.gen), (0.0, 0.0, 0.0));
            assert_eq!(e.losses.total, e.losses.focal);
            assert_eq!(e.focal_scale_majority, 1.0);
        }
        let (_, h) = run(&small_cfg(Arm::FocalCal)).unwrap();
        assert!(h.epochs.iter().all(|e| e.losses.cal > 0.0 && e.losses.align == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small_cfg(Arm::FocalOnly);
        cfg.optim.adamw.lr = 1e300;
        cfg.optim.adamw.weight_decay = 0.0;
        match run(&cfg) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(Arm::parse(a.name()).unwrap(), a);
        }
        assert_eq!(Arm::parse("frozen_vs_fullft").unwrap(), Arm::FullFt);
        assert!(Arm::parse("bogus").is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let cfg = small_cfg(Arm::FocalOnly);
        let ds = generate_dataset(&cfg.data).unwrap();
        let m = Model::new(cfg.model_config(), 1).unwrap();
        let a = evaluate(&m, &ds, Split::Test).unwrap();
        assert_eq!(a, evaluate(&m, &ds, Split::Test).unwrap());
        assert_eq!(a.n_samples, 12);
    }
}
