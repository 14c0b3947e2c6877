//! JSONL corpora of passages paired with gold tables.
//!
//! One JSON object per line: `{"id": ..., "text": ..., "table": ...}` where
//! `table` uses the canonical table JSON. Files ending in `.gz` are read
//! through a gzip decoder.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kind::DatasetKind;
use crate::table::{parse_flat, validate, Table};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub table: Table,
    pub kind: DatasetKind,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: invalid gold table: {message}")]
    InvalidGoldTable { line: usize, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    id: String,
    text: String,
    table: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<DatasetKind>,
}

impl Sample {
    /// The sample as one JSONL line (without the trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::json!({"id": self.id, "text": self.text, "table": self.table}).to_string()
    }
}

fn open(path: &Path) -> Result<Box<dyn BufRead>, CorpusError> {
    let file = File::open(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::FileNotFound(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let reader: Box<dyn Read> = if gz {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(reader)))
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, CorpusError> {
    let mut lines = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

/// Loads and validates every sample in `path`. The first bad line aborts
/// the load with its 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>, kind: DatasetKind) -> Result<Vec<Sample>, CorpusError> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    if lines.is_empty() {
        log::warn!("{} contains no samples", path.display());
    }
    lines
        .into_iter()
        .map(|(line, text)| parse_sample_line(&text, line, kind))
        .collect()
}

/// Parses JSONL text already in memory.
pub fn parse_jsonl(text: &str, kind: DatasetKind) -> Result<Vec<Sample>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_sample_line(l, i + 1, kind))
        .collect()
}

fn parse_sample_line(text: &str, line: usize, kind: DatasetKind) -> Result<Sample, CorpusError> {
    let schema = |message: String| CorpusError::Schema { line, message };
    let raw: SampleLine = serde_json::from_str(text).map_err(|e| schema(e.to_string()))?;
    if raw.id.trim().is_empty() {
        return Err(schema("empty id".into()));
    }
    if raw.text.trim().is_empty() {
        return Err(schema("empty text".into()));
    }
    if let Some(declared) = raw.kind {
        if declared != kind {
            return Err(schema(format!("sample kind {declared} in a {kind} corpus")));
        }
    }
    let table: Table =
        serde_json::from_value(raw.table).map_err(|e| schema(format!("table: {e}")))?;
    if table.orientation() != kind.orientation() {
        return Err(schema(format!(
            "{} table in a {kind} corpus",
            table.orientation()
        )));
    }
    let report = validate(&table);
    if !report.valid {
        return Err(CorpusError::InvalidGoldTable {
            line,
            message: report.to_string(),
        });
    }
    Ok(Sample {
        id: raw.id,
        text: raw.text,
        table,
        kind,
    })
}

pub fn write_jsonl<W: Write>(samples: &[Sample], mut out: W) -> std::io::Result<()> {
    for sample in samples {
        writeln!(out, "{}", sample.to_json_line())?;
    }
    Ok(())
}

/// A scored prediction. Files may give either `table` (canonical JSON,
/// `null` for no output) or `flat` (the flat encoding, parsed without
/// repair); extra fields are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub id: String,
    pub table: Option<Table>,
    pub errored: bool,
}

#[derive(Debug, Deserialize)]
struct PredictionLine {
    id: String,
    #[serde(default)]
    table: Option<serde_json::Value>,
    #[serde(default)]
    flat: Option<String>,
    #[serde(default)]
    errored: bool,
}

pub fn load_predictions(
    path: impl AsRef<Path>,
    kind: DatasetKind,
) -> Result<Vec<Prediction>, CorpusError> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(line, text)| parse_prediction_line(&text, line, kind))
        .collect()
}

fn parse_prediction_line(
    text: &str,
    line: usize,
    kind: DatasetKind,
) -> Result<Prediction, CorpusError> {
    let raw: PredictionLine = serde_json::from_str(text).map_err(|e| CorpusError::Schema {
        line,
        message: e.to_string(),
    })?;
    let (table, errored) = match (raw.table, raw.flat) {
        (Some(value), _) if !value.is_null() => match serde_json::from_value::<Table>(value) {
            Ok(t) if validate(&t).valid => (Some(t), raw.errored),
            _ => (None, true),
        },
        (_, Some(flat)) => match parse_flat(&flat, kind.orientation()) {
            Ok(t) => (Some(t), false),
            Err(_) => (None, true),
        },
        _ => (None, raw.errored),
    };
    Ok(Prediction {
        id: raw.id,
        table,
        errored,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindStats {
    pub samples: usize,
    pub mean_rows: f64,
    pub mean_cols: f64,
    /// Absent cells over all cell slots.
    pub sparsity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub splits: BTreeMap<String, usize>,
    pub kinds: BTreeMap<DatasetKind, KindStats>,
    pub total: usize,
}

/// Counts and shape aggregates over named splits. Attribute-value tables
/// count as `n` rows of one value column.
pub fn corpus_stats<'a>(splits: impl IntoIterator<Item = (&'a str, &'a [Sample])>) -> CorpusStats {
    #[derive(Default)]
    struct Acc {
        samples: usize,
        rows: usize,
        cols: usize,
        slots: usize,
        present: usize,
    }
    let mut stats = CorpusStats::default();
    let mut acc: BTreeMap<DatasetKind, Acc> = BTreeMap::new();
    for (name, samples) in splits {
        *stats.splits.entry(name.to_string()).or_default() += samples.len();
        stats.total += samples.len();
        for sample in samples {
            let a = acc.entry(sample.kind).or_default();
            let (rows, cols) = sample.table.shape();
            a.samples += 1;
            a.rows += rows;
            a.cols += cols;
            a.slots += sample.table.slot_count();
            a.present += sample.table.present_count();
        }
    }
    stats.kinds = acc
        .into_iter()
        .map(|(kind, a)| {
            let n = a.samples as f64;
            let sparsity = if a.slots == 0 {
                0.0
            } else {
                (a.slots - a.present) as f64 / a.slots as f64
            };
            (
                kind,
                KindStats {
                    samples: a.samples,
                    mean_rows: a.rows as f64 / n,
                    mean_cols: a.cols as f64 / n,
                    sparsity,
                },
            )
        })
        .collect();
    stats
}

impl CorpusStats {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<16} {:>8}\n", "split", "samples"));
        for (name, count) in &self.splits {
            out.push_str(&format!("{name:<16} {count:>8}\n"));
        }
        out.push_str(&format!("{:<16} {:>8}\n\n", "total", self.total));
        out.push_str(&format!(
            "{:<16} {:>8} {:>9} {:>9} {:>9}\n",
            "kind", "samples", "mean_rows", "mean_cols", "sparsity"
        ));
        for (kind, k) in &self.kinds {
            out.push_str(&format!(
                "{:<16} {:>8} {:>9.3} {:>9.3} {:>9.3}\n",
                kind.as_str(),
                k.samples,
                k.mean_rows,
                k.mean_cols,
                k.sparsity
            ));
        }
        out
    }
}

/// Small corpora compiled into the library for tests and demos.
pub mod fixtures {
    use super::{parse_jsonl, Sample};
    use crate::kind::DatasetKind;

    fn examples_text(kind: DatasetKind) -> &'static str {
        match kind {
            DatasetKind::E2e => include_str!("../fixtures/examples/e2e.jsonl"),
            DatasetKind::WikiTableText => include_str!("../fixtures/examples/wikitabletext.jsonl"),
            DatasetKind::WikiBio => include_str!("../fixtures/examples/wikibio.jsonl"),
            DatasetKind::RotowireTeam => include_str!("../fixtures/examples/rotowire-team.jsonl"),
            DatasetKind::RotowirePlayer => {
                include_str!("../fixtures/examples/rotowire-player.jsonl")
            }
        }
    }

    fn mini_text(kind: DatasetKind) -> &'static str {
        match kind {
            DatasetKind::E2e => include_str!("../fixtures/mini/e2e.jsonl"),
            DatasetKind::WikiTableText => include_str!("../fixtures/mini/wikitabletext.jsonl"),
            DatasetKind::WikiBio => include_str!("../fixtures/mini/wikibio.jsonl"),
            DatasetKind::RotowireTeam => include_str!("../fixtures/mini/rotowire-team.jsonl"),
            DatasetKind::RotowirePlayer => include_str!("../fixtures/mini/rotowire-player.jsonl"),
        }
    }

    /// The worked example for `kind`: one sample.
    pub fn examples(kind: DatasetKind) -> Vec<Sample> {
        parse_jsonl(examples_text(kind), kind).expect("bundled examples fixture is valid")
    }

    /// Ten samples for `kind`, the worked example first.
    pub fn mini(kind: DatasetKind) -> Vec<Sample> {
        parse_jsonl(mini_text(kind), kind).expect("bundled mini fixture is valid")
    }

    /// Raw JSONL of the mini split, for writing to disk.
    pub fn mini_jsonl(kind: DatasetKind) -> &'static str {
        mini_text(kind)
    }
}

#[cfg(test)]
mod tests {
    use std::io::Write as _;

    use flate2::write::GzEncoder;
    use flate2::Compression;

    use super::*;

    const ROW: &str = r#"{"id":"a","text":"The Eagle is a pub.","table":{"rows":[{"header":"Name","value":"The Eagle"}]}}"#;

    fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let path = dir.path().join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn loads_valid_lines() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!(
            "{ROW}\n{}\n\n{}\n",
            ROW.replace("\"a\"", "\"b\""),
            ROW.replace("\"a\"", "\"c\"")
        );
        let samples = load_jsonl(write_file(&dir, "c.jsonl", &body), DatasetKind::E2e).unwrap();
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[2].id, "c");
    }

    #[test]
    fn ragged_gold_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let ragged = r#"{"id":"r","text":"t","table":{"row_headers":["Magic","Hawks"],"col_headers":["Wins","Losses"],"cells":[["19","41"],["46"]]}}"#;
        let path = write_file(&dir, "r.jsonl", &format!("{ROW}\n{ragged}\n"));
        match load_jsonl(path, DatasetKind::RotowireTeam) {
            Err(CorpusError::Schema { line: 1, .. }) => {}
            other => panic!("first line is attribute-value in a matrix corpus: {other:?}"),
        }
        let path = write_file(&dir, "r2.jsonl", &format!("\n{ragged}\n"));
        match load_jsonl(path, DatasetKind::RotowireTeam) {
            Err(CorpusError::InvalidGoldTable { line: 2, .. }) => {}
            other => panic!("expected InvalidGoldTable at line 2, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "s.jsonl", &format!("{ROW}\n{{\"id\":\"x\"}}\n"));
        assert!(matches!(
            load_jsonl(path, DatasetKind::E2e),
            Err(CorpusError::Schema { line: 2, .. })
        ));
        let blank = ROW.replace("The Eagle is a pub.", "  ");
        assert!(matches!(
            parse_jsonl(&blank, DatasetKind::E2e),
            Err(CorpusError::Schema { line: 1, .. })
        ));
        let extra = ROW.replace("{\"id\"", "{\"extra\":1,\"id\"");
        assert!(matches!(
            parse_jsonl(&extra, DatasetKind::E2e),
            Err(CorpusError::Schema { .. })
        ));
        assert!(matches!(
            load_jsonl(dir.path().join("missing.jsonl"), DatasetKind::E2e),
            Err(CorpusError::FileNotFound(_))
        ));
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "e.jsonl", "");
        assert!(load_jsonl(path, DatasetKind::E2e).unwrap().is_empty());
        assert_eq!(corpus_stats([("test", &[][..])]).total, 0);
    }

    #[test]
    fn gzip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl.gz");
        let mut enc = GzEncoder::new(File::create(&path).unwrap(), Compression::default());
        writeln!(enc, "{ROW}").unwrap();
        enc.finish().unwrap();
        assert_eq!(load_jsonl(&path, DatasetKind::E2e).unwrap().len(), 1);
    }

    #[test]
    fn reserialization_is_semantically_identical() {
        for kind in DatasetKind::ALL {
            let text = fixtures::mini_jsonl(kind);
            let samples = fixtures::mini(kind);
            let mut out = Vec::new();
            write_jsonl(&samples, &mut out).unwrap();
            let again = String::from_utf8(out).unwrap();
            for (a, b) in text.lines().zip(again.lines()) {
                let a: serde_json::Value = serde_json::from_str(a).unwrap();
                let b: serde_json::Value = serde_json::from_str(b).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn fixture_counts_and_stats() {
        for kind in DatasetKind::ALL {
            assert_eq!(fixtures::examples(kind).len(), 1, "{kind}");
            assert_eq!(fixtures::mini(kind).len(), 10, "{kind}");
            assert_eq!(
                fixtures::mini(kind)[0].text,
                fixtures::examples(kind)[0].text
            );
        }
        let e2e = fixtures::mini(DatasetKind::E2e);
        let stats = corpus_stats([("mini", &e2e[..])]);
        assert_eq!(stats.total, 10);
        assert_eq!(stats.splits["mini"], 10);
        let examples = fixtures::examples(DatasetKind::RotowireTeam);
        let stats = corpus_stats([("examples", &examples[..])]);
        let team = &stats.kinds[&DatasetKind::RotowireTeam];
        assert_eq!((team.mean_rows, team.mean_cols), (2.0, 4.0));
        assert!((team.sparsity - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn predictions_accept_table_or_flat() {
        let dir = tempfile::tempdir().unwrap();
        let body = [
            r#"{"id":"1","table":{"rows":[{"header":"Name","value":"x"}]},"score":3}"#,
            r#"{"id":"2","flat":"Name | x<NEWLINE>Food | y"}"#,
            r#"{"id":"3","flat":"Name | x<NEWLINE>Food"}"#,
            r#"{"id":"4","table":null,"errored":true}"#,
        ]
        .join("\n");
        let preds = load_predictions(write_file(&dir, "p.jsonl", &body), DatasetKind::E2e).unwrap();
        assert_eq!(
            preds.iter().map(|p| p.errored).collect::<Vec<_>>(),
            [false, false, true, true]
        );
        assert_eq!(preds[1].table.as_ref().unwrap().shape(), (2, 1));
    }
}
