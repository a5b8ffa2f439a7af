//! Acceptance criteria 1–9. Runs as a plain binary so every criterion prints
//! one PASS/FAIL line; exits non-zero when any criterion fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use cfa_core::gate::{gradcheck_all, Mutation, GATE_STEP, GATE_TOLERANCE};
use cfa_core::losses::{align_loss, cal_loss, focal_loss, onehot, FocalConfig, SimKind};
use cfa_core::metrics::{auroc_macro, balanced_accuracy, ece, argmax_predict};
use cfa_core::model::{lora_forward, Model, TuneMode};
use cfa_core::pooling::{argmax, grounding_closed_form, grounding_gradient, FocalPooling};
use cfa_core::rng;
use cfa_core::synth::{generate_dataset, Split};
use cfa_core::tape::Graph;
use cfa_core::train::{train, Arm};
use cfa_core::Array;
use cfa_lab::config::LabConfig;
use cfa_lab::experiments::{ablate, data_efficiency, sensitivity};
use cfa_lab::report::{params_ratio, params_txt};
use rand::Rng as _;

const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

fn desk_config() -> LabConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.cfg");
    LabConfig::load(&path).expect("desk profile loads")
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_gate() -> Outcome {
    let start = Instant::now();
    let summary = gradcheck_all(0, Mutation::None).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = summary.max_rel_error();
    let failing: Vec<String> = summary
        .failures()
        .iter()
        .map(|f| format!("{}:{} {:.2e}", f.objective, f.param, f.rel_error))
        .collect();
    check(
        summary.tolerance == GATE_TOLERANCE
            && GATE_STEP == 1e-5
            && GATE_TOLERANCE == 1e-4
            && summary.passes()
            && elapsed < GRADCHECK_BUDGET,
        format!(
            "{} objectives, max rel error {worst:.2e} (tol 1e-4, h 1e-5), {:.1}s{}",
            summary.entries.len(),
            elapsed.as_secs_f64(),
            if failing.is_empty() { String::new() } else { format!(", failing {failing:?}") }
        ),
    )
}

/// `−log softmax(z)_y` averaged over rows, evaluated directly.
fn cross_entropy_oracle(logits: &Array, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / targets.len() as f64
}

fn degenerate_identities() -> Outcome {
    let mut r = rng::stream(11, 0);
    let mut focal_gap: f64 = 0.0;
    for _ in 0..200 {
        let b = r.random_range(1..=16);
        let c = r.random_range(2..=8);
        let logits = rng::gaussian(&mut r, &[b, c], 3.0);
        let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        let mut g = Graph::new();
        let z = g.constant(logits.clone());
        let cfg = FocalConfig::new(0.0, vec![1.0; c]).unwrap();
        let f = focal_loss(&mut g, z, &targets, &cfg).unwrap();
        focal_gap = focal_gap.max((g.value(f).data()[0] - cross_entropy_oracle(&logits, &targets)).abs());
    }

    let mut align_single = Vec::new();
    for sim in [SimKind::Cosine, SimKind::Dot] {
        for tau in [0.07, 1.0] {
            let mut g = Graph::new();
            let v = g.constant(rng::gaussian(&mut r, &[1, 8], 1.0));
            let t = g.constant(rng::gaussian(&mut r, &[1, 8], 1.0));
            let l = align_loss(&mut g, v, t, tau, sim).unwrap();
            align_single.push(g.value(l).data()[0]);
        }
    }

    let targets = [0usize, 2, 1];
    let mut confident = Array::zeros(&[3, 3]);
    for (i, &y) in targets.iter().enumerate() {
        confident.set(i, y, 1000.0);
    }
    let mut g = Graph::new();
    let z = g.constant(confident);
    let cal = cal_loss(&mut g, z, &onehot(&targets, 3).unwrap()).unwrap();
    let cal = g.value(cal).data()[0];

    let mut lora_gap: f64 = 0.0;
    for _ in 0..50 {
        let (n, d_in, d_out, rank) = (5, 12, 9, 4);
        let mut g = Graph::new();
        let x = g.constant(rng::gaussian(&mut r, &[n, d_in], 1.0));
        let base_w = rng::gaussian(&mut r, &[d_in, d_out], 1.0);
        let base = g.constant(base_w.clone());
        let a = g.constant(rng::gaussian(&mut r, &[rank, d_in], 1.0));
        let b = g.constant(Array::zeros(&[d_out, rank]));
        let y = lora_forward(&mut g, x, base, a, b, 4.0).unwrap();
        let reference = g.value(x).matmul(&base_w).unwrap();
        for (p, q) in g.value(y).data().iter().zip(reference.data()) {
            lora_gap = lora_gap.max((p - q).abs());
        }
    }

    let mut cfg = LabConfig::default();
    for (k, v) in [("n_total", "200"), ("eval_per_class", "4"), ("epochs", "2"), ("lr", "0.01")] {
        cfg.set(k, v).unwrap();
    }
    let t = cfg.for_seed(0);
    let data = generate_dataset(&t.data).unwrap();
    let before = Model::new(t.model_config(), t.model.pretrained_seed).unwrap();
    let (after, _) = train(&t, &data.split(Split::Train), &data.split(Split::Val)).map_err(|e| e.to_string())?;
    let bits = |m: &Model| m.encoder().data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let encoder_same = bits(&before) == bits(&after);
    let something_moved = before.params != after.params;

    check(
        focal_gap <= 1e-12
            && align_single.iter().all(|&x| x == 0.0)
            && cal == 0.0
            && lora_gap <= 1e-12
            && encoder_same
            && something_moved,
        format!(
            "focal−CE {focal_gap:.1e}, align(B=1) {align_single:?}, cal(p=y) {cal}, LoRA(B=0) gap {lora_gap:.1e}, encoder identical {encoder_same}"
        ),
    )
}

fn oracle_bacc(preds: &[usize], labels: &[usize], c: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for k in 0..c {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if !members.is_empty() {
            sum += members.iter().filter(|&&i| preds[i] == k).count() as f64 / members.len() as f64;
            present += 1;
        }
    }
    sum / present as f64
}

/// Pairwise win counting, ties one half.
fn oracle_auroc(probs: &Array, labels: &[usize]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..probs.cols() {
        let pos: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] == k).map(|i| probs.get(i, k)).collect();
        let neg: Vec<f64> = (0..labels.len()).filter(|&i| labels[i] != k).map(|i| probs.get(i, k)).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for &p in &pos {
            for &q in &neg {
                wins += if p > q { 1.0 } else if p == q { 0.5 } else { 0.0 };
            }
        }
        sum += wins / (pos.len() * neg.len()) as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Scans every bin `((b−1)/M, b/M]` and collects its members directly.
fn oracle_ece(probs: &Array, labels: &[usize], m: usize) -> f64 {
    let n = labels.len();
    let preds: Vec<usize> = (0..n)
        .map(|i| {
            let row = probs.row(i);
            let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter().position(|&x| x == top).unwrap()
        })
        .collect();
    let mut total = 0.0;
    for b in 1..=m {
        let lo = (b - 1) as f64 / m as f64;
        let hi = b as f64 / m as f64;
        let (mut cnt, mut hit, mut conf) = (0usize, 0usize, 0.0);
        for i in 0..n {
            let c = probs.get(i, preds[i]);
            if (b == 1 && c <= hi) || (c > lo && c <= hi) {
                cnt += 1;
                conf += c;
                hit += usize::from(preds[i] == labels[i]);
            }
        }
        if cnt > 0 {
            total += cnt as f64 / n as f64 * (hit as f64 / cnt as f64 - conf / cnt as f64).abs();
        }
    }
    total
}

fn metric_oracles() -> Outcome {
    let mut mismatches = 0;
    let mut instances = 0;
    let mut auroc_checked = 0;
    for seed in 0..1000u64 {
        let mut r = rng::stream(seed, 9);
        let b = r.random_range(1..=64);
        let c = r.random_range(2..=8);
        let coarse = r.random_bool(0.5);
        let mut data = Vec::with_capacity(b * c);
        for _ in 0..b {
            let raw: Vec<f64> = (0..c)
                .map(|_| {
                    let u: f64 = r.random();
                    if coarse { (u * 4.0).floor() + 1.0 } else { u + 1e-3 }
                })
                .collect();
            let s: f64 = raw.iter().sum();
            data.extend(raw.iter().map(|x| x / s));
        }
        let probs = Array::new(&[b, c], data).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..c)).collect();
        instances += 1;
        let preds = argmax_predict(&probs);
        if balanced_accuracy(&preds, &labels, c).unwrap() != oracle_bacc(&preds, &labels, c) {
            mismatches += 1;
        }
        match (auroc_macro(&probs, &labels).ok(), oracle_auroc(&probs, &labels)) {
            (Some(a), Some(o)) if a == o => auroc_checked += 1,
            (None, None) => {}
            _ => mismatches += 1,
        }
        if ece(&probs, &labels, 15).unwrap().0 != oracle_ece(&probs, &labels, 15) {
            mismatches += 1;
        }
    }
    let hand = Array::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]).unwrap();
    let (hand_ece, _) = ece(&hand, &[0, 1], 15).unwrap();
    check(
        mismatches == 0 && (hand_ece - 0.35).abs() < 1e-15,
        format!("{instances} instances ({auroc_checked} with AUROC defined), {mismatches} mismatches, hand-case ECE {hand_ece}"),
    )
}

fn grounding_property() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut argmax_mismatch = 0;
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, 10);
        let (n, d, d_k) = (r.random_range(2..=12), r.random_range(2..=10), 4);
        let fp = FocalPooling::new(
            rng::gaussian(&mut r, &[1, d], 1.0),
            rng::gaussian(&mut r, &[d, d_k], 1.0),
            rng::gaussian(&mut r, &[d, d_k], 1.0),
            rng::gaussian(&mut r, &[d, d], 1.0),
        )
        .unwrap();
        let patches = rng::gaussian(&mut r, &[n, d], 1.0);
        let t: Vec<f64> = rng::gaussian(&mut r, &[1, d], 1.0).into_data();
        let tau = 0.05 + r.random::<f64>();
        let pool = fp.pool(&patches).unwrap();
        let analytic = grounding_gradient(&pool, &patches, &fp, &t, tau, SimKind::Dot).unwrap();
        let closed = grounding_closed_form(&patches, &fp, &t, tau).unwrap();
        for (a, c) in analytic.iter().zip(&closed) {
            worst = worst.max((a - c).abs());
        }
        argmax_mismatch += usize::from(argmax(&analytic) != argmax(&closed));
    }
    check(
        worst <= 1e-10 && argmax_mismatch == 0,
        format!("100 instances, max |autodiff − closed form| {worst:.1e}, argmax mismatches {argmax_mismatch}"),
    )
}

fn ablation_ordering() -> Outcome {
    let cfg = desk_config();
    let start = Instant::now();
    let table = ablate(&cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let get = |arm: Arm| table.row(arm).ok_or_else(|| format!("{} produced no runs", arm.name()));
    let (ce, focal, align, cal, full) = (
        get(Arm::CeOnly)?,
        get(Arm::FocalOnly)?,
        get(Arm::FocalAlign)?,
        get(Arm::FocalCal)?,
        get(Arm::FullCfa)?,
    );
    let conditions = [
        ("B-ACC(ce)+0.03 ≤ B-ACC(focal)", ce.b_acc.median + 0.03 <= focal.b_acc.median),
        ("B-ACC(focal_align) ≥ B-ACC(focal)", align.b_acc.median >= focal.b_acc.median),
        ("ECE(focal_cal) ≤ 0.7·ECE(focal)", cal.ece.median <= 0.7 * focal.ece.median),
        ("ECE(full) ≤ 0.5·ECE(ce)", full.ece.median <= 0.5 * ce.ece.median),
        ("runtime < 10 min", elapsed < ABLATION_BUDGET),
        ("≥ 5 seeds", cfg.seeds.len() >= 5),
    ];
    let failed: Vec<&str> = conditions.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let mut detail = format!("{} seeds on {}, {:.0}s;", cfg.seeds.len(), cfg.eval_split.name(), elapsed.as_secs_f64());
    for row in &table.rows {
        detail.push_str(&format!(
            " {} B-ACC {:.3} ECE {:.4};",
            row.arm.name(),
            row.b_acc.median,
            row.ece.median
        ));
    }
    if !failed.is_empty() {
        detail.push_str(&format!(" unmet: {failed:?}"));
    }
    check(failed.is_empty() && table.failures.is_empty(), detail)
}

fn data_efficiency_trend() -> Outcome {
    let mut cfg = desk_config();
    cfg.fractions = vec![1.0, 0.12];
    cfg.seeds.truncate(3);
    let table = data_efficiency(&cfg).map_err(|e| e.to_string())?;
    let lora = table.row(Arm::FullCfa, 0.12).ok_or("adapter arm missing")?;
    let full = table.row(Arm::FullFt, 0.12).ok_or("full fine-tune arm missing")?;
    check(
        cfg.seeds.len() >= 3 && lora.drop + 0.05 <= full.drop,
        format!(
            "{} seeds, drop at 12%: adapters {:.3}, full fine-tune {:.3}",
            cfg.seeds.len(),
            lora.drop,
            full.drop
        ),
    )
}

fn sensitivity_plateau() -> Outcome {
    let mut cfg = desk_config();
    cfg.seeds.truncate(3);
    let grid = [0.1, 0.25, 0.5, 0.75, 1.0];
    let table = sensitivity(&cfg, &grid).map_err(|e| e.to_string())?;
    let spread = table.spread();
    let medians: Vec<String> = table.rows.iter().map(|r| format!("{}:{:.3}", r.lambda3, r.b_acc.median)).collect();
    check(
        table.rows.len() == grid.len() && spread <= 0.05,
        format!("median B-ACC {}, spread {spread:.3}", medians.join(" ")),
    )
}

fn parameter_accounting() -> Outcome {
    let cfg = desk_config();
    let mut mc = cfg.train.model_config();
    mc.tune = TuneMode::Lora;
    let lora = Model::new(mc.clone(), 0).map_err(|e| e.to_string())?;
    mc.tune = TuneMode::Full;
    let full = Model::new(mc.clone(), 0).map_err(|e| e.to_string())?;
    let lc = lora.count_parameters();
    let fc = full.count_parameters();
    let exact = !lc.adapters.is_empty()
        && lc
            .adapters
            .iter()
            .all(|a| a.trainable == mc.lora_rank * (a.d_in + a.d_out) && a.rank == mc.lora_rank);
    let text = params_txt(&lora);
    let printed = params_ratio(&text) == Some((lc.ratio * 1e6).round() / 1e6)
        && lc
            .adapters
            .iter()
            .all(|a| text.contains(&format!("adapter {} d_in {} d_out {} rank {} params {}", a.name, a.d_in, a.d_out, a.rank, a.trainable)));
    check(
        exact && printed && lc.ratio < fc.ratio && fc.adapters.is_empty(),
        format!(
            "{} adapters at r={} each r·(d_in+d_out), trainable ratio {:.4} (adapters) vs {:.4} (full)",
            lc.adapters.len(),
            mc.lora_rank,
            lc.ratio,
            fc.ratio
        ),
    )
}

fn cli(args: &[&str], out: &Path, extra: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_cfa-lab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("RUST_LOG", "error")
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} exited with {status}"))
    }
}

fn artifacts(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "report.md") {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = tmp.path().join("tiny.cfg");
    std::fs::write(
        &cfg_path,
        "n_total = 160\neval_per_class = 4\nepochs = 2\nlr = 0.005\nseeds = 0, 1, 2\nfractions = 1.0, 0.5\nlambda3_grid = 0.25, 1.0\n",
    )
    .map_err(|e| e.to_string())?;
    let cfg = cfg_path.to_str().unwrap();
    let run = |root: &Path| -> Result<(), String> {
        for cmd in ["gen-data", "train", "ablate", "data-eff", "sensitivity", "gradcheck"] {
            cli(&[cmd, "--config", cfg, "--seed", "3"], &root.join(cmd), &[])?;
        }
        let ck = root.join("train/checkpoint.json");
        cli(&["eval", "--checkpoint", ck.to_str().unwrap()], &root.join("eval"), &[])?;
        cli(&["report"], &root.join("train"), &[])
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a)?;
    run(&b)?;
    let (fa, fb) = (artifacts(&a), artifacts(&b));
    let csvs = fa.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "csv")).count();
    let differing: Vec<String> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    check(
        fa.len() == fb.len() && differing.is_empty() && csvs >= 7,
        format!("{} artifacts ({csvs} CSV) across 8 commands, differing {differing:?}", fa.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient gate", gradient_gate),
        ("degenerate identities", degenerate_identities),
        ("metric oracles", metric_oracles),
        ("grounding gradient", grounding_property),
        ("ablation ordering", ablation_ordering),
        ("data-efficiency trend", data_efficiency_trend),
        ("sensitivity plateau", sensitivity_plateau),
        ("parameter accounting", parameter_accounting),
        ("CLI reproducibility", cli_reproducibility),
    ];
    let filter: Vec<&String> = args.iter().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|p| *p == &id || name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {id} {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} {name} ({secs:.1}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
