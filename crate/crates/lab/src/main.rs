use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use cfa_core::gate::{gradcheck_all, Mutation};
use cfa_core::synth::Split;
use cfa_core::train::{encode_all, evaluate_encoded};
use cfa_lab::checkpoint::Checkpoint;
use cfa_lab::config::LabConfig;
use cfa_lab::dataset_io::save_dataset;
use cfa_lab::experiments::{ablate, data_efficiency, run_once, seed_data, sensitivity, RunOptions, SeedData};
use cfa_lab::report::{params_txt, report_csv, report_md};
use cfa_lab::{write_file, LabError};

#[derive(Parser)]
#[command(name = "cfa-lab", version, about = "Train and evaluate the class-focused alignment model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides `seed`; multi-seed protocols use `seeds` consecutive seeds starting here.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as JSON Lines.
    GenData(Common),
    /// Train one arm and write a checkpoint, history, report and parameter counts.
    Train(Common),
    /// Evaluate a checkpoint on the validation, test and shifted splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run every ablation arm over the configured seeds.
    Ablate(Common),
    /// Compare adapters against full fine-tuning at reduced training fractions.
    DataEff(Common),
    /// Sweep the generation loss weight.
    Sensitivity(Common),
    /// Finite-difference check of every objective's gradient.
    Gradcheck(Common),
    /// Rebuild report.md from the artifacts in the output directory.
    Report(Common),
}

fn load_config(c: &Common, multi_seed: bool) -> Result<LabConfig, LabError> {
    let mut text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| LabError::io(p, e))?,
        None => String::new(),
    };
    for kv in &c.overrides {
        text.push('\n');
        text.push_str(kv);
    }
    let mut cfg = LabConfig::parse(&text)?;
    if let Some(s) = c.seed {
        if multi_seed {
            cfg.seeds = (s..).take(cfg.seeds.len()).collect();
        } else {
            cfg.train.seed = s;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_data(cfg: &LabConfig) -> Result<SeedData, LabError> {
    seed_data(cfg, &cfg.for_seed(cfg.train.seed))
}

const REPORT_SPLITS: [Split; 3] = [Split::Val, Split::Test, Split::Ood];

fn evaluate_splits(model: &cfa_core::model::Model, data: &SeedData) -> Result<Vec<(Split, cfa_core::metrics::EvalReport)>, LabError> {
    let mut rows = Vec::new();
    for split in REPORT_SPLITS {
        let records = data.split(split);
        if records.is_empty() {
            log::warn!("split {} is empty; skipped", split.name());
            continue;
        }
        rows.push((split, evaluate_encoded(model, &encode_all(model, &records)?)?));
    }
    Ok(rows)
}

fn finish_report(out: &Path, label: &str, start: Instant) -> Result<(), LabError> {
    let md = report_md(out, &[(label.to_string(), start.elapsed().as_secs_f64())])?;
    write_file(&out.join("report.md"), &md)
}

fn run(cmd: Command) -> Result<ExitCode, LabError> {
    let start = Instant::now();
    match cmd {
        Command::GenData(c) => {
            let cfg = load_config(&c, false)?;
            let data = single_data(&cfg)?;
            let path = c.out.join("dataset.jsonl");
            save_dataset(&data.records, &path)?;
            println!("{} records, sha256 {}", data.records.len(), data.digest);
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let cfg = load_config(&c, false)?;
            let data = single_data(&cfg)?;
            let t = cfg.for_seed(cfg.train.seed);
            let opts = RunOptions {
                fraction: 1.0,
                generation: false,
            };
            let (model, outcome) = run_once(&t, &data, cfg.eval_split, opts)?;
            write_file(&c.out.join("history.csv"), &outcome.history.csv())?;
            Checkpoint::from_model(&model, &cfg).save(&c.out.join("checkpoint.json"))?;
            write_file(&c.out.join("report.csv"), &report_csv(t.seed, &evaluate_splits(&model, &data)?))?;
            write_file(&c.out.join("params.txt"), &params_txt(&model))?;
            println!(
                "{} seed {}: B-ACC {:.4} AUROC {:.4} ECE {:.4} on {}",
                t.arm.name(),
                t.seed,
                outcome.eval.b_acc,
                outcome.eval.auroc_macro,
                outcome.eval.ece,
                cfg.eval_split.name()
            );
            finish_report(&c.out, "train", start)?;
        }
        Command::Eval { common: c, checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (model, mut cfg) = ck.model()?;
            if c.config.is_some() || !c.overrides.is_empty() {
                let given = load_config(&c, false)?;
                cfg.data_path = given.data_path;
            }
            let data = single_data(&cfg)?;
            let rows = evaluate_splits(&model, &data)?;
            for (split, r) in &rows {
                println!("{:<4} B-ACC {:.4} AUROC {:.4} ECE {:.4}", split.name(), r.b_acc, r.auroc_macro, r.ece);
            }
            write_file(&c.out.join("report.csv"), &report_csv(ck.payload.seed, &rows))?;
            write_file(&c.out.join("params.txt"), &params_txt(&model))?;
            if let Some((_, r)) = rows.iter().find(|(s, _)| *s == cfg.eval_split) {
                write_file(&c.out.join("reliability.txt"), &r.reliability_table())?;
            }
            finish_report(&c.out, "eval", start)?;
        }
        Command::Ablate(c) => {
            let cfg = load_config(&c, true)?;
            let table = ablate(&cfg)?;
            write_file(&c.out.join("ablation.csv"), &table.csv())?;
            write_file(&c.out.join("ablation_runs.csv"), &table.runs_csv())?;
            print!("{}", table.csv());
            finish_report(&c.out, "ablate", start)?;
            if table.rows.is_empty() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::DataEff(c) => {
            let cfg = load_config(&c, true)?;
            let table = data_efficiency(&cfg)?;
            write_file(&c.out.join("data_efficiency.csv"), &table.csv())?;
            print!("{}", table.csv());
            let base = cfa_core::model::Model::new(cfg.train.model_config(), cfg.train.model.pretrained_seed)?;
            write_file(&c.out.join("params.txt"), &params_txt(&base))?;
            finish_report(&c.out, "data-eff", start)?;
        }
        Command::Sensitivity(c) => {
            let cfg = load_config(&c, true)?;
            let table = sensitivity(&cfg, &cfg.lambda3_grid)?;
            write_file(&c.out.join("sensitivity.csv"), &table.csv())?;
            print!("{}", table.csv());
            finish_report(&c.out, "sensitivity", start)?;
        }
        Command::Gradcheck(c) => {
            let cfg = load_config(&c, false)?;
            let summary = gradcheck_all(cfg.train.seed, Mutation::None)?;
            let mut csv = String::from("objective,param,max_rel_error\n");
            for e in &summary.entries {
                for p in &e.report.params {
                    csv.push_str(&format!("{},{},{:.3e}\n", e.objective, p.name, p.max_rel_error));
                }
                println!("{:<18} max rel error {:.3e}", e.objective, e.report.max_rel_error());
            }
            write_file(&c.out.join("gradcheck.csv"), &csv)?;
            if !summary.passes() {
                for f in summary.failures() {
                    eprintln!("FAIL {} {} {:.3e}", f.objective, f.param, f.rel_error);
                }
                return Ok(ExitCode::from(1));
            }
            println!("all gradients within {:.0e}", summary.tolerance);
        }
        Command::Report(c) => {
            let md = report_md(&c.out, &[])?;
            write_file(&c.out.join("report.md"), &md)?;
            println!("wrote {}", c.out.join("report.md").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

