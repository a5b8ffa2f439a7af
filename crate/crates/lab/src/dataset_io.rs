//! JSON Lines dataset files, one record per line in a fixed field order.

use std::fmt::Write as _;
use std::path::Path;

use cfa_core::synth::{Meta, SampleRecord, Split};
use cfa_core::Array;
use serde::Deserialize;

use crate::{sha256_hex, write_file, LabError};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    site: String,
    age: u32,
    sex: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    id: String,
    class_id: usize,
    patch_features: Vec<Vec<f64>>,
    meta: MetaLine,
    description_tokens: Vec<usize>,
    split: String,
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// 17 significant digits, enough to round-trip any `f64`.
fn float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Canonical single-line encoding of `r` (no trailing newline).
pub fn record_line(r: &SampleRecord) -> String {
    let mut s = String::with_capacity(64 + 24 * r.patch_features.len());
    let _ = write!(s, "{{\"id\":{},\"class_id\":{},\"patch_features\":[", json_str(&r.id), r.class_id);
    for i in 0..r.patch_features.rows() {
        if i > 0 {
            s.push(',');
        }
        s.push('[');
        let row: Vec<String> = r.patch_features.row(i).iter().map(|&x| float(x)).collect();
        s.push_str(&row.join(","));
        s.push(']');
    }
    let toks: Vec<String> = r.description_tokens.iter().map(ToString::to_string).collect();
    let _ = write!(
        s,
        "],\"meta\":{{\"site\":{},\"age\":{},\"sex\":{}}},\"description_tokens\":[{}],\"split\":{}}}",
        json_str(&r.meta.site),
        r.meta.age,
        json_str(&r.meta.sex),
        toks.join(","),
        json_str(r.split.name())
    );
    s
}

pub fn encode_records(records: &[SampleRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&record_line(r));
        s.push('\n');
    }
    s
}

/// SHA-256 of the canonical file contents.
pub fn dataset_digest(records: &[SampleRecord]) -> String {
    sha256_hex(encode_records(records).as_bytes())
}

fn parse_line(line: &str) -> Result<SampleRecord, String> {
    let r: RecordLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let rows = r.patch_features.len();
    let cols = r.patch_features.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 || r.patch_features.iter().any(|row| row.len() != cols) {
        return Err("patch_features must be a nonempty rectangular matrix".into());
    }
    let data: Vec<f64> = r.patch_features.into_iter().flatten().collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err("patch_features must be finite".into());
    }
    Ok(SampleRecord {
        id: r.id,
        class_id: r.class_id,
        patch_features: Array::new(&[rows, cols], data).map_err(|e| e.to_string())?,
        meta: Meta {
            site: r.meta.site,
            age: r.meta.age,
            sex: r.meta.sex,
        },
        description_tokens: r.description_tokens,
        split: Split::parse(&r.split).map_err(|e| e.to_string())?,
    })
}

/// Parses file contents; `origin` names the source in errors.
pub fn decode_records(text: &str, origin: &str) -> Result<Vec<SampleRecord>, LabError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(line).map_err(|message| LabError::Parse {
            path: origin.to_string(),
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn save_dataset(records: &[SampleRecord], path: &Path) -> Result<(), LabError> {
    write_file(path, &encode_records(records))
}

pub fn load_dataset(path: &Path) -> Result<Vec<SampleRecord>, LabError> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    decode_records(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfa_core::synth::{generate_dataset, DataConfig};

    fn small() -> Vec<SampleRecord> {
        let cfg = DataConfig {
            n_total: 60,
            eval_per_class: 2,
            ..DataConfig::default()
        };
        generate_dataset(&cfg).unwrap().records
    }

    #[test]
    fn round_trip_is_exact_and_canonical() {
        let records = small();
        let text = encode_records(&records);
        let back = decode_records(&text, "mem").unwrap();
        assert_eq!(back, records);
        assert_eq!(encode_records(&back), text);
    }

    #[test]
    fn awkward_floats_survive() {
        let mut records = small();
        records.truncate(1);
        let data = records[0].patch_features.data_mut();
        data[0] = 0.1 + 0.2;
        data[1] = -5e-324;
        data[2] = f64::MAX;
        data[3] = 1.0 / 3.0;
        let back = decode_records(&encode_records(&records), "mem").unwrap();
        assert_eq!(back[0].patch_features.data(), records[0].patch_features.data());
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(decode_records("", "mem").unwrap().is_empty());
        assert!(decode_records("\n\n", "mem").unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let records = small();
        let mut lines: Vec<String> = records.iter().take(3).map(record_line).collect();
        lines[2] = lines[2].replace("\"split\"", "\"splt\"");
        let e = decode_records(&lines.join("\n"), "d.jsonl").unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 3, .. }), "{e}");
        assert!(e.to_string().starts_with("d.jsonl: line 3"));
        let e = decode_records("{\"id\": 1", "d.jsonl").unwrap_err();
        assert!(matches!(e, LabError::Parse { line: 1, .. }));
    }

    #[test]
    fn ragged_features_are_rejected() {
        let line = record_line(&small()[0]).replacen("],[", ",0.5],[", 1);
        let e = decode_records(&line, "d").unwrap_err();
        assert!(e.to_string().contains("rectangular"), "{e}");
    }

    #[test]
    fn saved_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        save_dataset(&small(), &a).unwrap();
        save_dataset(&small(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_dataset(&a).unwrap(), small());
    }
}
