//! Two-stage table generation, the single-stage flat-format baseline and
//! incremental updates of existing tables.
//!
//! Stage one asks the backend for the header sequence and turns it into a
//! [`TableSkeleton`]. Stage two formulates one question per skeleton slot,
//! sends all of them as one batch and post-processes each answer into a
//! cell. The output table is assembled from the skeleton's shape, so it is
//! rectangular whatever the backend returns.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationRequest, PromptTask, TextGenerator};
use crate::corpus::Sample;
use crate::kind::DatasetKind;
use crate::qa::{
    extract_numeric, formulate_question, parse_header_sequence, NoAnswerSet, Prompts, QaError,
    AXIS_SEPARATOR, HEADER_SEPARATOR,
};
use crate::table::{
    dedup_headers, normalize_text, parse_flat, validate, Attribute, FlatParseError, Matrix,
    Orientation, Table, ValidityReport, COLUMN_SEPARATOR, ROW_SEPARATOR,
};

/// Row header used when a matrix header sequence carries no row axis. Its
/// cells are asked with the single-header question form.
pub const IMPLICIT_ROW_HEADER: &str = "(all)";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("no headers could be constructed")]
    NoHeaders,
    #[error(transparent)]
    Prompt(#[from] QaError),
    #[error("backend error: {0}")]
    Backend(#[from] BackendError),
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),
    #[error("invalid table: {0}")]
    InvalidTable(ValidityReport),
    #[error("invalid update: {0}")]
    InvalidDelta(String),
    #[error("flat output rejected: {0}")]
    Flat(#[from] FlatParseError),
}

/// Headers only: the output of stage one and the input of stage two.
/// Attribute-value skeletons keep their headers in `col_headers`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSkeleton {
    pub orientation: Orientation,
    #[serde(default)]
    pub row_headers: Vec<String>,
    pub col_headers: Vec<String>,
}

/// A slot in a skeleton. `row` is `None` for attribute-value tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellAddress {
    pub row: Option<usize>,
    pub col: usize,
}

impl TableSkeleton {
    pub fn attribute_value(headers: Vec<String>) -> Self {
        Self {
            orientation: Orientation::AttributeValue,
            row_headers: Vec::new(),
            col_headers: dedup_headers(headers),
        }
    }

    pub fn matrix(row_headers: Vec<String>, col_headers: Vec<String>) -> Self {
        Self {
            orientation: Orientation::Matrix,
            row_headers: dedup_headers(row_headers),
            col_headers: dedup_headers(col_headers),
        }
    }

    /// The headers of an existing table, e.g. a gold table for
    /// teacher-forced content generation.
    pub fn from_table(table: &Table) -> Self {
        Self {
            orientation: table.orientation(),
            row_headers: table
                .row_headers()
                .into_iter()
                .map(str::to_string)
                .collect(),
            col_headers: table
                .col_headers()
                .into_iter()
                .map(str::to_string)
                .collect(),
        }
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let axes: &[(&str, &Vec<String>)] = match self.orientation {
            Orientation::AttributeValue => {
                if !self.row_headers.is_empty() {
                    return Err(PipelineError::InvalidSkeleton(
                        "attribute-value skeleton with row headers".into(),
                    ));
                }
                &[("column", &self.col_headers)]
            }
            Orientation::Matrix => &[("row", &self.row_headers), ("column", &self.col_headers)],
        };
        for (axis, headers) in axes {
            if headers.is_empty() {
                return Err(PipelineError::InvalidSkeleton(format!("no {axis} headers")));
            }
            let mut seen = BTreeSet::new();
            for h in headers.iter() {
                let n = normalize_text(h);
                if n.is_empty() {
                    return Err(PipelineError::InvalidSkeleton(format!(
                        "empty {axis} header"
                    )));
                }
                if !seen.insert(n) {
                    return Err(PipelineError::InvalidSkeleton(format!(
                        "duplicate {axis} header {h:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every slot in row-major order.
    pub fn slots(&self) -> Vec<CellAddress> {
        match self.orientation {
            Orientation::AttributeValue => (0..self.col_headers.len())
                .map(|col| CellAddress { row: None, col })
                .collect(),
            Orientation::Matrix => (0..self.row_headers.len())
                .flat_map(|row| {
                    (0..self.col_headers.len()).map(move |col| CellAddress {
                        row: Some(row),
                        col,
                    })
                })
                .collect(),
        }
    }

    /// Row header used in the question for `address`, if any.
    fn question_row(&self, address: CellAddress) -> Option<&str> {
        address
            .row
            .and_then(|r| self.row_headers.get(r))
            .map(String::as_str)
            .filter(|h| *h != IMPLICIT_ROW_HEADER)
    }

    fn contains(&self, address: CellAddress) -> bool {
        let row_ok = match (self.orientation, address.row) {
            (Orientation::AttributeValue, None) => true,
            (Orientation::Matrix, Some(r)) => r < self.row_headers.len(),
            _ => false,
        };
        row_ok && address.col < self.col_headers.len()
    }
}

/// One skeleton slot's question, answer and outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellTrace {
    pub address: CellAddress,
    pub question: String,
    pub raw_answer: Option<String>,
    pub value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationTrace {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure_output: Option<String>,
    pub cells: Vec<CellTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_ms: Option<u64>,
}

impl GenerationTrace {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| c.error.is_some()).count()
    }

    /// Drops latencies and stage timings so traces of identical runs compare equal.
    pub fn without_timings(mut self) -> Self {
        self.structure_ms = None;
        self.content_ms = None;
        for cell in &mut self.cells {
            cell.latency_ms = None;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    pub table: Table,
    pub skeleton: TableSkeleton,
    pub trace: GenerationTrace,
}

/// Headers and cells to add to an existing table, and existing cells to ask
/// again. New attribute-value headers may be given in either list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkeletonDelta {
    pub row_headers: Vec<String>,
    pub col_headers: Vec<String>,
    pub reask: Vec<CellAddress>,
}

impl SkeletonDelta {
    pub fn is_empty(&self) -> bool {
        self.row_headers.is_empty() && self.col_headers.is_empty() && self.reask.is_empty()
    }
}

/// Where stage two takes its headers from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeaderMode {
    /// Headers come from stage one.
    #[default]
    Predicted,
    /// Stage two is seeded with the gold table's headers.
    Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLimits {
    pub structure: u32,
    pub answer: u32,
    pub flat_table: u32,
}

impl Default for TokenLimits {
    fn default() -> Self {
        Self {
            structure: 256,
            answer: 64,
            flat_table: 1024,
        }
    }
}

/// Per-sample result of a corpus run, as written to prediction files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub id: String,
    pub table: Option<Table>,
    /// The output could not be read as a table of the expected shape.
    #[serde(default)]
    pub errored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<GenerationTrace>,
}

/// Text outside the flat encoding's reserved tokens.
fn sanitize(text: &str) -> String {
    text.replace(ROW_SEPARATOR, " ")
        .replace(COLUMN_SEPARATOR, "/")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

pub struct Pipeline<G> {
    backend: G,
    prompts: Prompts,
    limits: TokenLimits,
    no_answer: NoAnswerSet,
}

impl<G: TextGenerator> Pipeline<G> {
    pub fn new(backend: G, kind: DatasetKind) -> Self {
        Self::with_prompts(backend, Prompts::new(kind))
    }

    pub fn with_prompts(backend: G, prompts: Prompts) -> Self {
        Self {
            backend,
            prompts,
            limits: TokenLimits::default(),
            no_answer: NoAnswerSet::default(),
        }
    }

    pub fn with_limits(mut self, limits: TokenLimits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_no_answer_set(mut self, set: NoAnswerSet) -> Self {
        self.no_answer = set;
        self
    }

    pub fn kind(&self) -> DatasetKind {
        self.prompts.kind()
    }

    pub fn backend(&self) -> &G {
        &self.backend
    }

    /// Stage one: one backend call, parsed into a deduplicated skeleton.
    pub async fn construct_structure(
        &self,
        passage: &str,
    ) -> Result<(TableSkeleton, String), PipelineError> {
        let kind = self.kind();
        let request =
            GenerationRequest::new(self.prompts.structure(passage)?, self.limits.structure)
                .with_hint(Arc::from(passage), PromptTask::Structure { kind });
        let raw = self.backend.generate(&request).await?.text;
        let skeleton = skeleton_from_output(&raw, kind.orientation())?;
        Ok((skeleton, raw))
    }

    /// Stage two: one question per slot, answered in one batch.
    pub async fn generate_content(
        &self,
        skeleton: &TableSkeleton,
        passage: &str,
    ) -> Result<Generated, PipelineError> {
        skeleton.check()?;
        let started = Instant::now();
        let cells = self
            .answer_slots(skeleton, &skeleton.slots(), passage)
            .await?;
        let table = assemble(skeleton, &cells);
        debug_assert!(validate(&table).valid);
        Ok(Generated {
            table,
            skeleton: skeleton.clone(),
            trace: GenerationTrace {
                structure_output: None,
                cells,
                structure_ms: None,
                content_ms: Some(started.elapsed().as_millis() as u64),
            },
        })
    }

    /// Both stages. The only failures are an unusable header sequence and a
    /// failed stage-one request; cell-level failures leave absent cells.
    pub async fn generate_table(&self, passage: &str) -> Result<Generated, PipelineError> {
        let started = Instant::now();
        let (skeleton, raw) = self.construct_structure(passage).await?;
        let structure_ms = started.elapsed().as_millis() as u64;
        let mut generated = self.generate_content(&skeleton, passage).await?;
        generated.trace.structure_output = Some(raw);
        generated.trace.structure_ms = Some(structure_ms);
        Ok(generated)
    }

    /// Single-stage baseline: the whole table in one request, parsed from
    /// the flat encoding without repair.
    pub async fn baseline_generate(&self, passage: &str) -> Result<Table, PipelineError> {
        let kind = self.kind();
        let request =
            GenerationRequest::new(self.prompts.flat_table(passage)?, self.limits.flat_table)
                .with_hint(Arc::from(passage), PromptTask::FlatTable { kind });
        let raw = self.backend.generate(&request).await?.text;
        Ok(parse_flat(&raw, kind.orientation())?)
    }

    /// Adds headers and re-asks cells of `table` against `passage`, asking
    /// only the new or designated slots. Every other cell is left as is. A
    /// re-asked cell keeps its old value when the new answer is empty.
    pub async fn update_table(
        &self,
        table: &Table,
        delta: &SkeletonDelta,
        passage: &str,
    ) -> Result<(Table, GenerationTrace), PipelineError> {
        let report = validate(table);
        if !report.valid {
            return Err(PipelineError::InvalidTable(report));
        }
        let old = TableSkeleton::from_table(table);
        let (old_rows, old_cols) = (old.row_headers.len(), old.col_headers.len());
        let mut skeleton = old.clone();
        match table.orientation() {
            Orientation::AttributeValue => {
                let mut headers = skeleton.col_headers;
                headers.extend(
                    delta
                        .row_headers
                        .iter()
                        .chain(&delta.col_headers)
                        .map(|h| sanitize(h)),
                );
                skeleton.col_headers = dedup_headers(headers);
            }
            Orientation::Matrix => {
                let mut rows = skeleton.row_headers;
                rows.extend(delta.row_headers.iter().map(|h| sanitize(h)));
                let mut cols = skeleton.col_headers;
                cols.extend(delta.col_headers.iter().map(|h| sanitize(h)));
                skeleton.row_headers = dedup_headers(rows);
                skeleton.col_headers = dedup_headers(cols);
            }
        }
        skeleton.check()?;
        if let Some(bad) = delta.reask.iter().find(|a| !old.contains(**a)) {
            return Err(PipelineError::InvalidDelta(format!(
                "cell {bad:?} is not in the table"
            )));
        }

        let reask: BTreeSet<CellAddress> = delta.reask.iter().copied().collect();
        let is_new = |a: &CellAddress| a.col >= old_cols || a.row.is_some_and(|r| r >= old_rows);
        let slots: Vec<CellAddress> = skeleton
            .slots()
            .into_iter()
            .filter(|a| is_new(a) || reask.contains(a))
            .collect();
        if slots.is_empty() {
            return Ok((table.clone(), GenerationTrace::default()));
        }

        let started = Instant::now();
        let cells = self.answer_slots(&skeleton, &slots, passage).await?;
        let mut grid = grid_of(table, &skeleton);
        for cell in &cells {
            let slot = slot_mut(&mut grid, cell.address);
            if cell.value.is_some() || is_new(&cell.address) {
                *slot = cell.value.clone();
            }
        }
        let updated = table_from_grid(&skeleton, grid);
        Ok((
            updated,
            GenerationTrace {
                structure_output: None,
                cells,
                structure_ms: None,
                content_ms: Some(started.elapsed().as_millis() as u64),
            },
        ))
    }

    async fn answer_slots(
        &self,
        skeleton: &TableSkeleton,
        slots: &[CellAddress],
        passage: &str,
    ) -> Result<Vec<CellTrace>, PipelineError> {
        let numeric = self.kind().numeric_answers();
        let shared: Arc<str> = Arc::from(passage);
        let questions: Vec<String> = slots
            .iter()
            .map(|&a| {
                formulate_question(
                    skeleton.question_row(a),
                    &skeleton.col_headers[a.col],
                    numeric,
                )
            })
            .collect();
        let requests = questions
            .iter()
            .map(|q| {
                Ok(
                    GenerationRequest::new(self.prompts.qa(passage, q)?, self.limits.answer)
                        .with_hint(
                            shared.clone(),
                            PromptTask::Cell {
                                question: q.clone(),
                            },
                        ),
                )
            })
            .collect::<Result<Vec<_>, QaError>>()?;

        let results = match self.backend.generate_batch(&requests).await {
            Ok(results) => results,
            Err(e) => {
                log::warn!("batch of {} cell questions failed: {e}", requests.len());
                vec![Err(e); requests.len()]
            }
        };
        Ok(slots
            .iter()
            .zip(questions)
            .zip(results)
            .map(|((&address, question), result)| match result {
                Ok(response) => CellTrace {
                    address,
                    question,
                    value: self.post_process(&response.text, numeric),
                    raw_answer: Some(response.text),
                    latency_ms: Some(response.latency_ms),
                    error: None,
                },
                Err(e) => CellTrace {
                    address,
                    question,
                    raw_answer: None,
                    value: None,
                    latency_ms: None,
                    error: Some(e.to_string()),
                },
            })
            .collect())
    }

    /// No-answer detection, then numeric extraction for count-valued kinds.
    pub fn post_process(&self, raw: &str, numeric: bool) -> Option<String> {
        let text = sanitize(raw);
        if self.no_answer.matches(&text) {
            return None;
        }
        if numeric {
            extract_numeric(&text)
        } else {
            Some(text).filter(|t| !t.is_empty())
        }
    }

    /// Runs every sample, `jobs` at a time, keeping input order.
    pub async fn run_corpus(
        &self,
        samples: &[Sample],
        mode: HeaderMode,
        jobs: usize,
    ) -> Vec<SampleOutput> {
        stream::iter(samples)
            .map(|sample| self.run_sample(sample, mode))
            .buffered(jobs.max(1))
            .collect()
            .await
    }

    pub async fn run_sample(&self, sample: &Sample, mode: HeaderMode) -> SampleOutput {
        let result = match mode {
            HeaderMode::Predicted => self.generate_table(&sample.text).await,
            HeaderMode::Gold => {
                self.generate_content(&TableSkeleton::from_table(&sample.table), &sample.text)
                    .await
            }
        };
        match result {
            Ok(generated) => {
                let failed = generated.trace.failed_cells();
                SampleOutput {
                    id: sample.id.clone(),
                    table: Some(generated.table),
                    errored: false,
                    error: (failed > 0).then(|| format!("{failed} cell requests failed")),
                    trace: Some(generated.trace),
                }
            }
            Err(e) => SampleOutput {
                id: sample.id.clone(),
                table: None,
                errored: false,
                error: Some(e.to_string()),
                trace: None,
            },
        }
    }

    pub async fn run_baseline_corpus(&self, samples: &[Sample], jobs: usize) -> Vec<SampleOutput> {
        stream::iter(samples)
            .map(|sample| async move {
                match self.baseline_generate(&sample.text).await {
                    Ok(table) => SampleOutput {
                        id: sample.id.clone(),
                        table: Some(table),
                        errored: false,
                        error: None,
                        trace: None,
                    },
                    Err(e) => SampleOutput {
                        id: sample.id.clone(),
                        table: None,
                        errored: matches!(e, PipelineError::Flat(_)),
                        error: Some(e.to_string()),
                        trace: None,
                    },
                }
            })
            .buffered(jobs.max(1))
            .collect()
            .await
    }
}

/// Parses a stage-one output. Matrix outputs split on `<ROWCOL>` into row
/// and column headers; without a usable split every header becomes a column
/// of a single implicit row.
pub fn skeleton_from_output(
    raw: &str,
    orientation: Orientation,
) -> Result<TableSkeleton, PipelineError> {
    let clean = sanitize(raw);
    let all = |text: &str| parse_header_sequence(&text.replace(AXIS_SEPARATOR, HEADER_SEPARATOR));
    match orientation {
        Orientation::AttributeValue => {
            let headers = all(&clean).map_err(|_| PipelineError::NoHeaders)?;
            Ok(TableSkeleton::attribute_value(headers))
        }
        Orientation::Matrix => {
            if let Some((rows, cols)) = clean.split_once(AXIS_SEPARATOR) {
                if let (Ok(rows), Ok(cols)) = (parse_header_sequence(rows), all(cols)) {
                    return Ok(TableSkeleton::matrix(rows, cols));
                }
            }
            let cols = all(&clean).map_err(|_| PipelineError::NoHeaders)?;
            Ok(TableSkeleton::matrix(
                vec![IMPLICIT_ROW_HEADER.to_string()],
                cols,
            ))
        }
    }
}

type Grid = Vec<Vec<Option<String>>>;

/// The table's cells laid out on `skeleton`, which extends the table's own
/// headers; new slots start absent.
fn grid_of(table: &Table, skeleton: &TableSkeleton) -> Grid {
    let rows = skeleton.row_headers.len().max(1);
    let cols = skeleton.col_headers.len();
    let mut grid: Grid = vec![vec![None; cols]; rows];
    match table {
        Table::AttributeValue(attrs) => {
            for (c, attr) in attrs.iter().enumerate() {
                grid[0][c] = attr.value.clone();
            }
        }
        Table::Matrix(m) => {
            for (r, row) in m.cells.iter().enumerate() {
                for (c, value) in row.iter().enumerate() {
                    grid[r][c] = value.clone();
                }
            }
        }
    }
    grid
}

fn slot_mut(grid: &mut Grid, address: CellAddress) -> &mut Option<String> {
    &mut grid[address.row.unwrap_or(0)][address.col]
}

fn table_from_grid(skeleton: &TableSkeleton, mut grid: Grid) -> Table {
    match skeleton.orientation {
        Orientation::AttributeValue => {
            let values = grid.swap_remove(0);
            Table::AttributeValue(
                skeleton
                    .col_headers
                    .iter()
                    .zip(values)
                    .map(|(header, value)| Attribute {
                        header: header.clone(),
                        value,
                    })
                    .collect(),
            )
        }
        Orientation::Matrix => Table::Matrix(Matrix {
            row_headers: skeleton.row_headers.clone(),
            col_headers: skeleton.col_headers.clone(),
            cells: grid,
        }),
    }
}

fn assemble(skeleton: &TableSkeleton, cells: &[CellTrace]) -> Table {
    let rows = skeleton.row_headers.len().max(1);
    let mut grid: Grid = vec![vec![None; skeleton.col_headers.len()]; rows];
    for cell in cells {
        *slot_mut(&mut grid, cell.address) = cell.value.clone();
    }
    table_from_grid(skeleton, grid)
}
