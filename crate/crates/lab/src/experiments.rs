//! Ablation, data-efficiency and λ₃-sensitivity protocols over seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use cfa_core::metrics::EvalReport;
use cfa_core::model::Model;
use cfa_core::synth::{generate_dataset, subsample_stratified, SampleRecord, Split};
use cfa_core::train::{encode_all, evaluate_encoded, generation_accuracy, train, Arm, RunHistory, TrainConfig};

use crate::config::LabConfig;
use crate::dataset_io::{dataset_digest, load_dataset};
use crate::LabError;

/// Records used by one seed plus their digest.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub records: Vec<SampleRecord>,
    pub digest: String,
}

impl SeedData {
    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// Loads `data` when configured, otherwise generates from the seed's config.
pub fn seed_data(cfg: &LabConfig, train_cfg: &TrainConfig) -> Result<SeedData, LabError> {
    let records = match &cfg.data_path {
        Some(p) => load_dataset(p)?,
        None => generate_dataset(&train_cfg.data)?.records,
    };
    let digest = dataset_digest(&records);
    Ok(SeedData { records, digest })
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub arm: Arm,
    pub seed: u64,
    pub fraction: f64,
    pub lambda3: f64,
    pub dataset_digest: String,
    pub history: RunHistory,
    /// Metrics on the configured evaluation split.
    pub eval: EvalReport,
    pub gen_accuracy: Option<f64>,
    /// Classes with no training samples after subsampling; excluded from `eval`.
    pub dropped_classes: Vec<usize>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub fraction: f64,
    pub generation: bool,
}

/// Trains one configuration and evaluates it on `eval_split`.
pub fn run_once(
    train_cfg: &TrainConfig,
    data: &SeedData,
    eval_split: Split,
    opts: RunOptions,
) -> Result<(Model, RunOutcome), LabError> {
    let start = Instant::now();
    let classes = train_cfg.data.classes;
    let full = data.split(Split::Train);
    let (train_set, dropped) = if opts.fraction < 1.0 {
        subsample_stratified(&full, classes, opts.fraction, train_cfg.seed)?
    } else {
        (full, Vec::new())
    };
    if !dropped.is_empty() {
        log::warn!(
            "fraction {} leaves classes {:?} without training samples; excluding them from evaluation",
            opts.fraction,
            dropped
        );
    }
    let (model, history) = train(train_cfg, &train_set, &data.split(Split::Val))?;
    let eval_records: Vec<&SampleRecord> = data
        .split(eval_split)
        .into_iter()
        .filter(|r| !dropped.contains(&r.class_id))
        .collect();
    let encoded = encode_all(&model, &eval_records)?;
    let eval = evaluate_encoded(&model, &encoded)?;
    let gen_accuracy = if opts.generation {
        Some(generation_accuracy(&model, &encoded)?)
    } else {
        None
    };
    let outcome = RunOutcome {
        arm: train_cfg.arm,
        seed: train_cfg.seed,
        fraction: opts.fraction,
        lambda3: train_cfg.loss.weights.lambda3,
        dataset_digest: data.digest.clone(),
        history,
        eval,
        gen_accuracy,
        dropped_classes: dropped,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((model, outcome))
}

/// Median and range of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of an empty sample");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        (!xs.is_empty()).then(|| Self {
            median: median(xs),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunFailure {
    pub arm: Arm,
    pub seed: u64,
    pub message: String,
    pub diverged: bool,
}

fn failure(arm: Arm, seed: u64, e: LabError) -> RunFailure {
    let diverged = matches!(e, LabError::Core(cfa_core::Error::Diverged { .. }));
    log::warn!("{} seed {seed}: {e}", arm.name());
    RunFailure {
        arm,
        seed,
        message: e.to_string(),
        diverged,
    }
}

fn fmt_seeds(seeds: impl IntoIterator<Item = u64>) -> String {
    seeds.into_iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub b_acc: Stat,
    pub auroc: Stat,
    pub ece: Stat,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<RunFailure>,
    /// Dataset digest per seed, shared by every arm.
    pub digests: BTreeMap<u64, String>,
}

impl AblationTable {
    pub const CSV_HEADER: &'static str =
        "arm,seeds,B-ACC,AUROC,ECE,B-ACC_min,B-ACC_max,AUROC_min,AUROC_max,ECE_min,ECE_max";
    pub const RUNS_HEADER: &'static str = "arm,seed,dataset_sha256,status,B-ACC,AUROC,ECE";

    pub fn row(&self, arm: Arm) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.arm.name(),
                fmt_seeds(r.seeds.iter().copied()),
                r.b_acc.median,
                r.auroc.median,
                r.ece.median,
                r.b_acc.min,
                r.b_acc.max,
                r.auroc.min,
                r.auroc.max,
                r.ece.min,
                r.ece.max
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = format!("{}\n", Self::RUNS_HEADER);
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},ok,{:.6},{:.6},{:.6}",
                r.arm.name(),
                r.seed,
                r.dataset_digest,
                r.eval.b_acc,
                r.eval.auroc_macro,
                r.eval.ece
            );
        }
        for f in &self.failures {
            let digest = self.digests.get(&f.seed).map_or("", String::as_str);
            let status = if f.diverged { "diverged" } else { "failed" };
            let _ = writeln!(s, "{},{},{digest},{status},,,", f.arm.name(), f.seed);
        }
        s
    }
}

fn aggregate_rows(arms: &[Arm], runs: &[RunOutcome]) -> Vec<AblationRow> {
    arms.iter()
        .filter_map(|&arm| {
            let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.arm == arm).collect();
            let pick = |f: fn(&EvalReport) -> f64| Stat::of(&mine.iter().map(|r| f(&r.eval)).collect::<Vec<_>>());
            Some(AblationRow {
                arm,
                seeds: mine.iter().map(|r| r.seed).collect(),
                b_acc: pick(|e| e.b_acc)?,
                auroc: pick(|e| e.auroc_macro)?,
                ece: pick(|e| e.ece)?,
            })
        })
        .collect()
}

/// Runs every ablation arm for every seed on shared per-seed data. Failed
/// runs are recorded and the remaining arms continue.
pub fn ablate(cfg: &LabConfig) -> Result<AblationTable, LabError> {
    if cfg.seeds.len() < 3 {
        return Err(cfa_core::Error::Config("ablation needs at least 3 seeds".into()).into());
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut digests = BTreeMap::new();
    for &seed in &cfg.seeds {
        let base = cfg.for_seed(seed);
        let data = seed_data(cfg, &base)?;
        digests.insert(seed, data.digest.clone());
        for arm in Arm::ABLATION {
            let t = TrainConfig { arm, ..base.clone() };
            let opts = RunOptions {
                fraction: 1.0,
                generation: false,
            };
            match run_once(&t, &data, cfg.eval_split, opts) {
                Ok((_, o)) => runs.push(o),
                Err(e) => failures.push(failure(arm, seed, e)),
            }
        }
    }
    Ok(AblationTable {
        rows: aggregate_rows(&Arm::ABLATION, &runs),
        runs,
        failures,
        digests,
    })
}

#[derive(Debug, Clone)]
pub struct EfficiencyRow {
    pub arm: Arm,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub b_acc: Stat,
    /// Median over seeds of `B-ACC(1.0) − B-ACC(fraction)`.
    pub drop: f64,
}

#[derive(Debug, Clone)]
pub struct EfficiencyTable {
    pub rows: Vec<EfficiencyRow>,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<RunFailure>,
}

impl EfficiencyTable {
    pub const CSV_HEADER: &'static str = "arm,fraction,seeds,B-ACC,B-ACC_min,B-ACC_max,drop";

    pub fn row(&self, arm: Arm, fraction: f64) -> Option<&EfficiencyRow> {
        self.rows.iter().find(|r| r.arm == arm && r.fraction == fraction)
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.arm.name(),
                r.fraction,
                fmt_seeds(r.seeds.iter().copied()),
                r.b_acc.median,
                r.b_acc.min,
                r.b_acc.max,
                r.drop
            );
        }
        s
    }
}

/// Frozen encoder with adapters versus full fine-tuning at each training
/// fraction. Fraction 1.0 is always included as the reference.
pub fn data_efficiency(cfg: &LabConfig) -> Result<EfficiencyTable, LabError> {
    let mut fractions = cfg.fractions.clone();
    if !fractions.contains(&1.0) {
        fractions.insert(0, 1.0);
    }
    let lora_arm = if cfg.train.arm == Arm::FullFt { Arm::FullCfa } else { cfg.train.arm };
    let arms = [lora_arm, Arm::FullFt];
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let base = cfg.for_seed(seed);
        let data = seed_data(cfg, &base)?;
        for arm in arms {
            for &fraction in &fractions {
                let t = TrainConfig { arm, ..base.clone() };
                let opts = RunOptions {
                    fraction,
                    generation: false,
                };
                match run_once(&t, &data, cfg.eval_split, opts) {
                    Ok((_, o)) => runs.push(o),
                    Err(e) => failures.push(failure(arm, seed, e)),
                }
            }
        }
    }
    let mut rows = Vec::new();
    for arm in arms {
        for &fraction in &fractions {
            let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.arm == arm && r.fraction == fraction).collect();
            let Some(b_acc) = Stat::of(&mine.iter().map(|r| r.eval.b_acc).collect::<Vec<_>>()) else {
                continue;
            };
            let drops: Vec<f64> = mine
                .iter()
                .filter_map(|r| {
                    runs.iter()
                        .find(|x| x.arm == arm && x.seed == r.seed && x.fraction == 1.0)
                        .map(|full| full.eval.b_acc - r.eval.b_acc)
                })
                .collect();
            rows.push(EfficiencyRow {
                arm,
                fraction,
                seeds: mine.iter().map(|r| r.seed).collect(),
                b_acc,
                drop: if drops.is_empty() { f64::NAN } else { median(&drops) },
            });
        }
    }
    Ok(EfficiencyTable { rows, runs, failures })
}

#[derive(Debug, Clone)]
pub struct SensitivityRow {
    pub lambda3: f64,
    pub seeds: Vec<u64>,
    pub b_acc: Stat,
    pub gen_accuracy: Stat,
}

#[derive(Debug, Clone)]
pub struct SensitivityTable {
    pub rows: Vec<SensitivityRow>,
    /// Same protocol with the generation loss switched off.
    pub reference: Option<SensitivityRow>,
    pub runs: Vec<RunOutcome>,
    pub failures: Vec<RunFailure>,
}

impl SensitivityTable {
    pub const CSV_HEADER: &'static str = "lambda3,seeds,B-ACC,B-ACC_min,B-ACC_max,gen_accuracy";

    pub fn csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in self.reference.iter().chain(&self.rows) {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.lambda3,
                fmt_seeds(r.seeds.iter().copied()),
                r.b_acc.median,
                r.b_acc.min,
                r.b_acc.max,
                r.gen_accuracy.median
            );
        }
        s
    }

    /// Largest minus smallest median B-ACC over the grid.
    pub fn spread(&self) -> f64 {
        let m: Vec<f64> = self.rows.iter().map(|r| r.b_acc.median).collect();
        m.iter().copied().fold(f64::NEG_INFINITY, f64::max) - m.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Full objective at each λ₃ in `grid`, plus a λ₃ = 0 reference.
pub fn sensitivity(cfg: &LabConfig, grid: &[f64]) -> Result<SensitivityTable, LabError> {
    if grid.is_empty() {
        return Err(cfa_core::Error::Config("lambda3 grid is empty".into()).into());
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let base = cfg.for_seed(seed);
        let data = seed_data(cfg, &base)?;
        for &l3 in core::iter::once(&0.0).chain(grid) {
            let mut t = TrainConfig {
                arm: Arm::FullCfa,
                ..base.clone()
            };
            t.loss.weights.lambda3 = l3;
            let opts = RunOptions {
                fraction: 1.0,
                generation: true,
            };
            match run_once(&t, &data, cfg.eval_split, opts) {
                Ok((_, o)) => runs.push(o),
                Err(e) => failures.push(failure(Arm::FullCfa, seed, e)),
            }
        }
    }
    let row = |l3: f64| {
        let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.lambda3 == l3).collect();
        Some(SensitivityRow {
            lambda3: l3,
            seeds: mine.iter().map(|r| r.seed).collect(),
            b_acc: Stat::of(&mine.iter().map(|r| r.eval.b_acc).collect::<Vec<_>>())?,
            gen_accuracy: Stat::of(&mine.iter().filter_map(|r| r.gen_accuracy).collect::<Vec<_>>())?,
        })
    };
    let rows = grid.iter().filter(|&&l3| l3 != 0.0).filter_map(|&l3| row(l3)).collect();
    let reference = row(0.0);
    Ok(SensitivityTable {
        rows,
        reference,
        runs,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_range() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let s = Stat::of(&[0.2, 0.9, 0.5]).unwrap();
        assert_eq!((s.median, s.min, s.max), (0.5, 0.2, 0.9));
        assert!(Stat::of(&[]).is_none());
    }
}
