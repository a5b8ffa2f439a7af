//! Evaluation tables, parameter listings and the markdown summary.

use std::fmt::Write as _;
use std::path::Path;

use cfa_core::metrics::EvalReport;
use cfa_core::model::{Model, ParamCount};
use cfa_core::synth::Split;

use crate::LabError;

pub const REPORT_HEADER: &str = "split,seed,n_samples,b_acc,auroc_macro,ece";

/// `report.csv` with one row per evaluated split.
pub fn report_csv(seed: u64, rows: &[(Split, EvalReport)]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (split, r) in rows {
        let _ = writeln!(s, "{},{seed},{}", split.name(), r.csv_row());
    }
    s
}

/// Trainable and frozen totals plus one line per adapter with its
/// `r·(d_in + d_out)` count.
pub fn params_txt(model: &Model) -> String {
    let ParamCount {
        trainable,
        frozen,
        ratio,
        adapters,
    } = model.count_parameters();
    let mut s = String::new();
    let _ = writeln!(s, "tune_mode {}", model.config.tune.name());
    let _ = writeln!(s, "trainable {trainable}");
    let _ = writeln!(s, "frozen {frozen}");
    let _ = writeln!(s, "total {}", trainable + frozen);
    let _ = writeln!(s, "trainable_ratio {ratio:.6}");
    for a in &adapters {
        let _ = writeln!(
            s,
            "adapter {} d_in {} d_out {} rank {} params {} base {}",
            a.name, a.d_in, a.d_out, a.rank, a.trainable, a.base
        );
    }
    s
}

/// Parses the `trainable_ratio` line written by [`params_txt`].
pub fn params_ratio(text: &str) -> Option<f64> {
    text.lines()
        .find_map(|l| l.strip_prefix("trainable_ratio "))
        .and_then(|v| v.trim().parse().ok())
}

fn read_if_present(path: &Path) -> Result<Option<String>, LabError> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(LabError::io(path, e)),
    }
}

fn csv_as_markdown(csv: &str) -> String {
    let mut out = String::new();
    for (i, line) in csv.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        let _ = writeln!(out, "| {} |", cells.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(cells.len()));
        }
    }
    out
}

/// Artifacts collected into `report.md`, in order.
pub const SECTIONS: [(&str, &str); 6] = [
    ("report.csv", "Evaluation"),
    ("ablation.csv", "Ablation"),
    ("data_efficiency.csv", "Data efficiency"),
    ("sensitivity.csv", "Generation weight sensitivity"),
    ("history.csv", "Training history"),
    ("params.txt", "Parameters"),
];

/// Renders every artifact found in `dir`, plus `wall_times` as
/// `(label, seconds)` pairs.
pub fn report_md(dir: &Path, wall_times: &[(String, f64)]) -> Result<String, LabError> {
    let mut s = String::from("# Run report\n\n");
    let mut found = 0;
    for (file, title) in SECTIONS {
        let Some(text) = read_if_present(&dir.join(file))? else {
            continue;
        };
        found += 1;
        let _ = writeln!(s, "## {title}\n");
        if file.ends_with(".csv") {
            s.push_str(&csv_as_markdown(&text));
        } else {
            let _ = write!(s, "```\n{text}```\n");
        }
        s.push('\n');
    }
    if found == 0 {
        s.push_str("No artifacts found.\n\n");
    }
    if !wall_times.is_empty() {
        s.push_str("## Wall time\n\n| step | seconds |\n|---|---|\n");
        for (label, secs) in wall_times {
            let _ = writeln!(s, "| {label} | {secs:.2} |");
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn markdown_table_has_separator() {
        let md = csv_as_markdown("a,b\n1,2\n");
        assert_eq!(md, "| a | b |\n|---|---|\n| 1 | 2 |\n");
    }

    #[test]
    fn ratio_is_parsed_back() {
        assert_eq!(params_ratio("trainable 3\ntrainable_ratio 0.250000\n"), Some(0.25));
        assert_eq!(params_ratio("nothing"), None);
    }
}
