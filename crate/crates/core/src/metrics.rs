//! Exact-match header and cell scores, syntactic error rate, embedding
//! similarity and corpus aggregation.
//!
//! Per-sample scores are macro-averaged: every corpus figure is the
//! arithmetic mean of the per-sample figures.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{cosine, BackendError, Embedder, TextGenerator};
use crate::corpus::{Prediction, Sample};
use crate::pipeline::{HeaderMode, Pipeline};
use crate::table::{normalize_text, to_tuples, validate, Orientation, Table, ValidityReport};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };

    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }

    /// Scores from an overlap count and the two set sizes; an empty side
    /// gives zero for its ratio.
    pub fn from_counts(overlap: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |n: usize| {
            if n == 0 {
                0.0
            } else {
                overlap as f64 / n as f64
            }
        };
        Self::new(ratio(predicted), ratio(gold))
    }

    /// Componentwise arithmetic mean; zero for no input.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Prf>) -> Prf {
        let (mut p, mut r, mut f, mut n) = (0.0, 0.0, 0.0, 0usize);
        for x in items {
            p += x.precision;
            r += x.recall;
            f += x.f1;
            n += 1;
        }
        if n == 0 {
            return Prf::ZERO;
        }
        let n = n as f64;
        Prf {
            precision: p / n,
            recall: r / n,
            f1: f / n,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no outcomes to score")]
    Empty,
    #[error("{predicted} predictions for {gold} gold samples")]
    CountMismatch { predicted: usize, gold: usize },
    #[error("prediction {0:?} has no gold sample")]
    UnknownId(String),
    #[error("sample id {0:?} appears more than once")]
    DuplicateId(String),
    #[error("invalid table: {0}")]
    InvalidTable(ValidityReport),
}

pub fn exact_f1<T: Ord>(predicted: &BTreeSet<T>, gold: &BTreeSet<T>) -> Prf {
    let overlap = predicted.intersection(gold).count();
    Prf::from_counts(overlap, predicted.len(), gold.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Valid,
    Errored,
}

impl ParseOutcome {
    pub fn from_errored(errored: bool) -> Self {
        if errored {
            ParseOutcome::Errored
        } else {
            ParseOutcome::Valid
        }
    }
}

/// Fraction of errored outcomes.
pub fn error_rate(outcomes: &[ParseOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let errored = outcomes
        .iter()
        .filter(|o| **o == ParseOutcome::Errored)
        .count();
    Ok(errored as f64 / outcomes.len() as f64)
}

/// Greedy matching over embedding vectors: recall averages, over reference
/// vectors, the best cosine to any candidate; precision the converse.
pub fn greedy_match(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> Prf {
    if candidate.is_empty() || reference.is_empty() {
        return Prf::ZERO;
    }
    let best = |v: &Vec<f64>, pool: &[Vec<f64>]| {
        pool.iter()
            .map(|w| cosine(v, w))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let precision =
        candidate.iter().map(|c| best(c, reference)).sum::<f64>() / candidate.len() as f64;
    let recall = reference.iter().map(|r| best(r, candidate)).sum::<f64>() / reference.len() as f64;
    Prf::new(precision, recall)
}

/// Token-level similarity of two token sequences under `embedder`.
pub async fn semantic_score(
    candidate: &[String],
    reference: &[String],
    embedder: &dyn Embedder,
) -> Result<Prf, BackendError> {
    if candidate.is_empty() || reference.is_empty() {
        return Ok(Prf::ZERO);
    }
    let inputs: Vec<String> = candidate.iter().chain(reference).cloned().collect();
    let mut vectors = embedder.embed(&inputs).await?.vectors;
    let reference_vectors = vectors.split_off(candidate.len());
    Ok(greedy_match(&vectors, &reference_vectors))
}

/// Whitespace tokens of the headers, row headers first.
pub fn header_tokens(table: &Table) -> Vec<String> {
    table
        .row_headers()
        .into_iter()
        .chain(table.col_headers())
        .flat_map(|h| {
            normalize_text(h)
                .split_whitespace()
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Whitespace tokens of every present cell's tuple, in tuple order.
pub fn cell_tokens(table: &Table) -> Vec<String> {
    to_tuples(table)
        .map(|tuples| {
            tuples
                .iter()
                .flat_map(|t| {
                    [&t.row_header, &t.col_header, &t.value]
                        .into_iter()
                        .flat_map(|s| s.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                        .collect::<Vec<_>>()
                })
                .collect()
        })
        .unwrap_or_default()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticScores {
    pub header: Prf,
    pub cell: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    /// Mean of the row and column header scores for matrix tables.
    pub header: Prf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_header: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_header: Option<Prf>,
    pub cell: Prf,
    pub errored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticScores>,
}

fn header_set(headers: Vec<&str>) -> BTreeSet<String> {
    headers.into_iter().map(normalize_text).collect()
}

/// Exact-match scores of `pred` against `gold`. Both must be valid.
pub fn evaluate_sample(pred: &Table, gold: &Table) -> Result<SampleMetrics, MetricsError> {
    for table in [pred, gold] {
        let report = validate(table);
        if !report.valid {
            return Err(MetricsError::InvalidTable(report));
        }
    }
    let cell = exact_f1(
        &to_tuples(pred).expect("validated"),
        &to_tuples(gold).expect("validated"),
    );
    let (header, row_header, col_header) = match gold.orientation() {
        Orientation::AttributeValue => {
            let all = |t: &Table| {
                header_set(t.row_headers().into_iter().chain(t.col_headers()).collect())
            };
            (exact_f1(&all(pred), &all(gold)), None, None)
        }
        Orientation::Matrix => {
            let rows = exact_f1(
                &header_set(pred.row_headers()),
                &header_set(gold.row_headers()),
            );
            let cols = exact_f1(
                &header_set(pred.col_headers()),
                &header_set(gold.col_headers()),
            );
            (Prf::mean([&rows, &cols]), Some(rows), Some(cols))
        }
    };
    Ok(SampleMetrics {
        id: String::new(),
        header,
        row_header,
        col_header,
        cell,
        errored: false,
        semantic: None,
    })
}

/// Scores one prediction record. A missing or invalid prediction scores
/// zero everywhere.
pub fn score_prediction(prediction: &Prediction, gold: &Table) -> SampleMetrics {
    let scored = prediction
        .table
        .as_ref()
        .and_then(|t| evaluate_sample(t, gold).ok());
    let mut metrics = scored.unwrap_or_else(|| {
        let matrix = gold.orientation() == Orientation::Matrix;
        SampleMetrics {
            id: String::new(),
            header: Prf::ZERO,
            row_header: matrix.then_some(Prf::ZERO),
            col_header: matrix.then_some(Prf::ZERO),
            cell: Prf::ZERO,
            errored: false,
            semantic: None,
        }
    });
    metrics.id = prediction.id.clone();
    metrics.errored = prediction.errored;
    metrics
}

pub async fn semantic_scores(
    pred: Option<&Table>,
    gold: &Table,
    embedder: &dyn Embedder,
) -> Result<SemanticScores, BackendError> {
    let Some(pred) = pred else {
        return Ok(SemanticScores::default());
    };
    Ok(SemanticScores {
        header: semantic_score(&header_tokens(pred), &header_tokens(gold), embedder).await?,
        cell: semantic_score(&cell_tokens(pred), &cell_tokens(gold), embedder).await?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: HeaderMode,
    pub samples: usize,
    pub header: Prf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_header: Option<Prf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_header: Option<Prf>,
    pub cell: Prf,
    pub error_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticScores>,
    pub per_sample: Vec<SampleMetrics>,
}

/// Pairs predictions with gold samples by id, in gold order.
fn pair<'a>(
    predictions: &'a [Prediction],
    golds: &'a [Sample],
) -> Result<Vec<(&'a Prediction, &'a Sample)>, MetricsError> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::CountMismatch {
            predicted: predictions.len(),
            gold: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut by_id: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(&p.id, p).is_some() {
            return Err(MetricsError::DuplicateId(p.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(golds.len());
    for g in golds {
        if !seen.insert(g.id.as_str()) {
            return Err(MetricsError::DuplicateId(g.id.clone()));
        }
        // Counts are equal and ids unique, so a gold id without a
        // prediction implies a prediction without a gold id.
        let Some(p) = by_id.get(g.id.as_str()) else {
            let orphan = predictions
                .iter()
                .find(|p| !golds.iter().any(|g| g.id == p.id));
            return Err(MetricsError::UnknownId(
                orphan.map_or_else(|| g.id.clone(), |p| p.id.clone()),
            ));
        };
        pairs.push((*p, g));
    }
    Ok(pairs)
}

/// Macro-averaged report. `mode` records how the predictions were made.
pub fn evaluate_corpus(
    predictions: &[Prediction],
    golds: &[Sample],
    mode: HeaderMode,
) -> Result<EvalReport, MetricsError> {
    let per_sample: Vec<SampleMetrics> = pair(predictions, golds)?
        .into_iter()
        .map(|(p, g)| score_prediction(p, &g.table))
        .collect();
    aggregate(per_sample, mode)
}

pub async fn evaluate_corpus_semantic(
    predictions: &[Prediction],
    golds: &[Sample],
    mode: HeaderMode,
    embedder: &dyn Embedder,
) -> Result<EvalReport, EvalError> {
    let pairs = pair(predictions, golds)?;
    let mut per_sample = Vec::with_capacity(pairs.len());
    for (p, g) in pairs {
        let mut metrics = score_prediction(p, &g.table);
        metrics.semantic = Some(semantic_scores(p.table.as_ref(), &g.table, embedder).await?);
        per_sample.push(metrics);
    }
    Ok(aggregate(per_sample, mode)?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("embedding failed: {0}")]
    Backend(#[from] BackendError),
}

/// Folds per-sample metrics into a report.
pub fn aggregate(
    per_sample: Vec<SampleMetrics>,
    mode: HeaderMode,
) -> Result<EvalReport, MetricsError> {
    let outcomes: Vec<ParseOutcome> = per_sample
        .iter()
        .map(|m| ParseOutcome::from_errored(m.errored))
        .collect();
    let error_rate = error_rate(&outcomes)?;
    let axis = |get: fn(&SampleMetrics) -> Option<Prf>| {
        let values: Vec<Prf> = per_sample.iter().filter_map(get).collect();
        (!values.is_empty()).then(|| Prf::mean(&values))
    };
    let semantic = per_sample.iter().all(|m| m.semantic.is_some()).then(|| {
        let s: Vec<SemanticScores> = per_sample.iter().filter_map(|m| m.semantic).collect();
        SemanticScores {
            header: Prf::mean(s.iter().map(|x| &x.header)),
            cell: Prf::mean(s.iter().map(|x| &x.cell)),
        }
    });
    Ok(EvalReport {
        mode,
        samples: per_sample.len(),
        header: Prf::mean(per_sample.iter().map(|m| &m.header)),
        row_header: axis(|m| m.row_header),
        col_header: axis(|m| m.col_header),
        cell: Prf::mean(per_sample.iter().map(|m| &m.cell)),
        error_rate,
        semantic,
        per_sample,
    })
}

fn prf_line(out: &mut String, name: &str, prf: &Prf) {
    let _ = writeln!(
        out,
        "{name:<18} {:>9.4} {:>9.4} {:>9.4}",
        prf.precision, prf.recall, prf.f1
    );
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mode = match self.mode {
            HeaderMode::Predicted => "predicted",
            HeaderMode::Gold => "gold",
        };
        let _ = writeln!(out, "samples: {}  headers: {mode}", self.samples);
        let _ = writeln!(
            out,
            "{:<18} {:>9} {:>9} {:>9}",
            "metric", "precision", "recall", "f1"
        );
        prf_line(&mut out, "header", &self.header);
        if let Some(p) = &self.row_header {
            prf_line(&mut out, "row_header", p);
        }
        if let Some(p) = &self.col_header {
            prf_line(&mut out, "col_header", p);
        }
        prf_line(&mut out, "cell", &self.cell);
        if let Some(s) = &self.semantic {
            prf_line(&mut out, "semantic_header", &s.header);
            prf_line(&mut out, "semantic_cell", &s.cell);
        }
        let _ = writeln!(out, "{:<18} {:>9.4}", "error_rate", self.error_rate);
        out
    }

    /// Per-sample CSV: id, header and cell scores, errored flag.
    pub fn to_csv(&self) -> Result<String, csv::Error> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record([
            "id",
            "header_p",
            "header_r",
            "header_f1",
            "cell_p",
            "cell_r",
            "cell_f1",
            "errored",
        ])?;
        for m in &self.per_sample {
            writer.write_record([
                m.id.clone(),
                format!("{:.6}", m.header.precision),
                format!("{:.6}", m.header.recall),
                format!("{:.6}", m.header.f1),
                format!("{:.6}", m.cell.precision),
                format!("{:.6}", m.cell.recall),
                format!("{:.6}", m.cell.f1),
                m.errored.to_string(),
            ])?;
        }
        let bytes = writer.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// The same corpus generated with predicted and with gold headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub predicted: EvalReport,
    pub gold: EvalReport,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>11} {:>11}", "f1", "predicted", "gold");
        let mut row = |name: &str, a: f64, b: f64| {
            let _ = writeln!(out, "{name:<18} {a:>11.4} {b:>11.4}");
        };
        row("header", self.predicted.header.f1, self.gold.header.f1);
        if let (Some(a), Some(b)) = (&self.predicted.row_header, &self.gold.row_header) {
            row("row_header", a.f1, b.f1);
        }
        if let (Some(a), Some(b)) = (&self.predicted.col_header, &self.gold.col_header) {
            row("col_header", a.f1, b.f1);
        }
        row("cell", self.predicted.cell.f1, self.gold.cell.f1);
        row(
            "error_rate",
            self.predicted.error_rate,
            self.gold.error_rate,
        );
        out
    }
}

fn as_predictions(outputs: Vec<crate::pipeline::SampleOutput>) -> Vec<Prediction> {
    outputs
        .into_iter()
        .map(|o| Prediction {
            id: o.id,
            table: o.table,
            errored: o.errored,
        })
        .collect()
}

/// Runs the pipeline over `samples` in both header modes and scores each.
pub async fn run_ablation<G: TextGenerator>(
    pipeline: &Pipeline<G>,
    samples: &[Sample],
    jobs: usize,
) -> Result<AblationReport, MetricsError> {
    let predicted = as_predictions(
        pipeline
            .run_corpus(samples, HeaderMode::Predicted, jobs)
            .await,
    );
    let gold = as_predictions(pipeline.run_corpus(samples, HeaderMode::Gold, jobs).await);
    Ok(AblationReport {
        predicted: evaluate_corpus(&predicted, samples, HeaderMode::Predicted)?,
        gold: evaluate_corpus(&gold, samples, HeaderMode::Gold)?,
    })
}
