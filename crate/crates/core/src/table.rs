//! Table data model, rectangularity checks, the flat `|` / `<NEWLINE>`
//! encoding and projection of a table onto normalized cell tuples.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column separator of the flat encoding.
pub const COLUMN_SEPARATOR: &str = "|";
/// Row separator of the flat encoding. A literal tag, not a control character.
pub const ROW_SEPARATOR: &str = "<NEWLINE>";

const QUOTE_CHARS: &[char] = &[
    '"', '\'', '`', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '\u{ab}', '\u{bb}',
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// One `(header, value)` pair per row.
    AttributeValue,
    /// Row headers by column headers.
    Matrix,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Orientation::AttributeValue => f.write_str("attribute_value"),
            Orientation::Matrix => f.write_str("matrix"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub header: String,
    pub value: Option<String>,
}

impl Attribute {
    pub fn new(header: impl Into<String>, value: Option<impl Into<String>>) -> Self {
        Self {
            header: header.into(),
            value: value.map(Into::into),
        }
    }
}

/// Two-axis grid. `cells[r][c]` addresses row header `r` and column header `c`.
///
/// The fields are public so that malformed grids can be represented and
/// reported by [`validate`]; the constructors on [`Table`] only dedupe
/// headers and canonicalize empty cells.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matrix {
    pub row_headers: Vec<String>,
    pub col_headers: Vec<String>,
    pub cells: Vec<Vec<Option<String>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub enum Table {
    AttributeValue(Vec<Attribute>),
    Matrix(Matrix),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Row,
    Column,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableError {
    #[error("table is not rectangular: {0}")]
    InvalidTable(ValidityReport),
    #[error("empty {axis:?} header at index {index}")]
    EmptyHeader { axis: Axis, index: usize },
    #[error("cell text {0:?} contains a reserved separator token")]
    ReservedToken(String),
    #[error("{0}")]
    Schema(String),
}

/// Normalized `(row header, column header, value)` triple. `row_header` is
/// empty for attribute-value tables.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellTuple {
    pub row_header: String,
    pub col_header: String,
    pub value: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A grid row does not have one slot per column header.
    RowWidth,
    /// The number of grid rows differs from the number of row headers.
    ColumnHeight,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Offending row for [`ViolationKind::RowWidth`]; `None` for whole-grid violations.
    pub index: Option<usize>,
    pub expected: usize,
    pub observed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

impl fmt::Display for ValidityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.valid {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            match (v.kind, v.index) {
                (ViolationKind::RowWidth, Some(row)) => write!(
                    f,
                    "row {row} has {} cells, expected {}",
                    v.observed, v.expected
                )?,
                _ => write!(f, "grid has {} rows, expected {}", v.observed, v.expected)?,
            }
        }
        Ok(())
    }
}

impl Table {
    /// Builds an attribute-value table. Duplicate headers are suffixed and
    /// empty values become absent.
    pub fn attribute_value<H, V>(
        rows: impl IntoIterator<Item = (H, Option<V>)>,
    ) -> Result<Self, TableError>
    where
        H: Into<String>,
        V: Into<String>,
    {
        let (headers, values): (Vec<String>, Vec<Option<String>>) = rows
            .into_iter()
            .map(|(h, v)| (h.into(), canonical_cell(v.map(Into::into))))
            .unzip();
        check_headers(&headers, Axis::Row)?;
        let rows = dedup_headers(headers)
            .into_iter()
            .zip(values)
            .map(|(header, value)| Attribute { header, value })
            .collect();
        Ok(Table::AttributeValue(rows))
    }

    /// Builds a matrix table. Duplicate headers on either axis are suffixed
    /// and empty cells become absent. Rectangularity is not checked here.
    pub fn matrix<S: Into<String>>(
        row_headers: impl IntoIterator<Item = S>,
        col_headers: impl IntoIterator<Item = S>,
        cells: Vec<Vec<Option<String>>>,
    ) -> Result<Self, TableError> {
        let row_headers: Vec<String> = row_headers.into_iter().map(Into::into).collect();
        let col_headers: Vec<String> = col_headers.into_iter().map(Into::into).collect();
        check_headers(&row_headers, Axis::Row)?;
        check_headers(&col_headers, Axis::Column)?;
        let cells = cells
            .into_iter()
            .map(|row| row.into_iter().map(canonical_cell).collect())
            .collect();
        Ok(Table::Matrix(Matrix {
            row_headers: dedup_headers(row_headers),
            col_headers: dedup_headers(col_headers),
            cells,
        }))
    }

    pub fn orientation(&self) -> Orientation {
        match self {
            Table::AttributeValue(_) => Orientation::AttributeValue,
            Table::Matrix(_) => Orientation::Matrix,
        }
    }

    /// Row headers of a matrix; empty for attribute-value tables.
    pub fn row_headers(&self) -> Vec<&str> {
        match self {
            Table::AttributeValue(_) => Vec::new(),
            Table::Matrix(m) => m.row_headers.iter().map(String::as_str).collect(),
        }
    }

    /// Column headers of a matrix, or the attribute headers of an
    /// attribute-value table.
    pub fn col_headers(&self) -> Vec<&str> {
        match self {
            Table::AttributeValue(rows) => rows.iter().map(|r| r.header.as_str()).collect(),
            Table::Matrix(m) => m.col_headers.iter().map(String::as_str).collect(),
        }
    }

    /// Number of value slots, present or absent.
    pub fn slot_count(&self) -> usize {
        match self {
            Table::AttributeValue(rows) => rows.len(),
            Table::Matrix(m) => m.cells.iter().map(Vec::len).sum(),
        }
    }

    /// Number of present, non-blank cells.
    pub fn present_count(&self) -> usize {
        let present = |v: &Option<String>| v.as_deref().is_some_and(|s| !s.trim().is_empty());
        match self {
            Table::AttributeValue(rows) => rows.iter().filter(|r| present(&r.value)).count(),
            Table::Matrix(m) => m.cells.iter().flatten().filter(|v| present(v)).count(),
        }
    }

    /// `(rows, cols)`; attribute-value tables report one value column.
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Table::AttributeValue(rows) => (rows.len(), 1),
            Table::Matrix(m) => (m.row_headers.len(), m.col_headers.len()),
        }
    }

    pub fn validate(&self) -> ValidityReport {
        validate(self)
    }

    pub fn to_flat(&self) -> Result<String, TableError> {
        serialize_flat(self)
    }

    pub fn to_tuples(&self) -> Result<BTreeSet<CellTuple>, TableError> {
        to_tuples(self)
    }

    /// Pipe-table rendering for human inspection. Not parsed back.
    pub fn to_markdown(&self) -> String {
        fn esc(s: &str) -> String {
            s.replace('|', "\\|")
        }
        let mut out = String::new();
        let mut line = |cells: Vec<String>| {
            out.push_str("| ");
            out.push_str(&cells.join(" | "));
            out.push_str(" |\n");
        };
        match self {
            Table::AttributeValue(rows) => {
                line(vec!["Header".into(), "Value".into()]);
                line(vec!["---".into(), "---".into()]);
                for r in rows {
                    line(vec![esc(&r.header), esc(r.value.as_deref().unwrap_or(""))]);
                }
            }
            Table::Matrix(m) => {
                let mut head = vec![String::new()];
                head.extend(m.col_headers.iter().map(|h| esc(h)));
                line(head);
                line(vec!["---".to_string(); m.col_headers.len() + 1]);
                for (header, row) in m.row_headers.iter().zip(&m.cells) {
                    let mut cells = vec![esc(header)];
                    cells.extend(row.iter().map(|v| esc(v.as_deref().unwrap_or(""))));
                    line(cells);
                }
            }
        }
        out
    }
}

fn canonical_cell(value: Option<String>) -> Option<String> {
    value.filter(|v| !v.trim().is_empty())
}

fn check_headers(headers: &[String], axis: Axis) -> Result<(), TableError> {
    match headers.iter().position(|h| normalize_text(h).is_empty()) {
        Some(index) => Err(TableError::EmptyHeader { axis, index }),
        None => Ok(()),
    }
}

/// Lowercases, collapses whitespace runs and strips surrounding whitespace
/// and quote characters.
pub fn normalize_text(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    let mut s = collapsed.as_str();
    loop {
        let next = s.trim().trim_matches(QUOTE_CHARS);
        if next.len() == s.len() {
            break;
        }
        s = next;
    }
    s.to_string()
}

/// Suffixes repeated headers (compared after normalization) with ` #2`,
/// ` #3`, ... so that every header stays addressable.
pub fn dedup_headers(headers: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::with_capacity(headers.len());
    let mut out = Vec::with_capacity(headers.len());
    for header in headers {
        if seen.insert(normalize_text(&header)) {
            out.push(header);
            continue;
        }
        let mut n = 2usize;
        let unique = loop {
            let candidate = format!("{header} #{n}");
            if seen.insert(normalize_text(&candidate)) {
                break candidate;
            }
            n += 1;
        };
        out.push(unique);
    }
    out
}

/// Checks that every row has one slot per column header and that there is
/// one row per row header. Attribute-value tables are rectangular by type.
pub fn validate(table: &Table) -> ValidityReport {
    let mut violations = Vec::new();
    if let Table::Matrix(m) = table {
        let width = m.col_headers.len();
        for (i, row) in m.cells.iter().enumerate() {
            if row.len() != width {
                violations.push(Violation {
                    kind: ViolationKind::RowWidth,
                    index: Some(i),
                    expected: width,
                    observed: row.len(),
                });
            }
        }
        if m.cells.len() != m.row_headers.len() {
            violations.push(Violation {
                kind: ViolationKind::ColumnHeight,
                index: None,
                expected: m.row_headers.len(),
                observed: m.cells.len(),
            });
        }
    }
    ValidityReport {
        valid: violations.is_empty(),
        violations,
    }
}

fn ensure_valid(table: &Table) -> Result<(), TableError> {
    let report = validate(table);
    if report.valid {
        Ok(())
    } else {
        Err(TableError::InvalidTable(report))
    }
}

fn flat_cell(text: &str) -> Result<&str, TableError> {
    if text.contains(COLUMN_SEPARATOR) || text.contains(ROW_SEPARATOR) {
        return Err(TableError::ReservedToken(text.to_string()));
    }
    Ok(text)
}

fn flat_row<'a>(cells: impl IntoIterator<Item = &'a str>) -> Result<String, TableError> {
    let cells = cells
        .into_iter()
        .map(flat_cell)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cells.join(" | "))
}

/// Encodes a valid table as a single line: cells joined by ` | `, rows
/// joined by `<NEWLINE>`. Matrices lead with a header row whose corner cell
/// is empty. Absent cells are written as empty strings.
pub fn serialize_flat(table: &Table) -> Result<String, TableError> {
    ensure_valid(table)?;
    let rows = match table {
        Table::AttributeValue(rows) => rows
            .iter()
            .map(|r| flat_row([r.header.as_str(), r.value.as_deref().unwrap_or("")]))
            .collect::<Result<Vec<_>, _>>()?,
        Table::Matrix(m) => {
            let mut rows = Vec::with_capacity(m.row_headers.len() + 1);
            rows.push(flat_row(
                std::iter::once("").chain(m.col_headers.iter().map(String::as_str)),
            )?);
            for (header, cells) in m.row_headers.iter().zip(&m.cells) {
                let values = cells.iter().map(|v| v.as_deref().unwrap_or(""));
                rows.push(flat_row(std::iter::once(header.as_str()).chain(values))?);
            }
            rows
        }
    };
    Ok(rows.join(ROW_SEPARATOR))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlatParseError {
    #[error("empty input")]
    EmptyInput,
    #[error("ragged rows with widths {widths:?}")]
    Structural { widths: Vec<usize> },
    #[error("rows have {found} cells, expected {expected} for an attribute-value table")]
    Arity { expected: usize, found: usize },
    #[error("empty {axis:?} header at index {index}")]
    EmptyHeader { axis: Axis, index: usize },
}

impl FlatParseError {
    /// True for the width disagreement that defines a syntactically broken table.
    pub fn is_structural(&self) -> bool {
        matches!(self, FlatParseError::Structural { .. })
    }
}

/// Parses the flat encoding without repairing it. Cells are trimmed, empty
/// cells become absent and headers are deduplicated; rows of differing
/// widths yield [`FlatParseError::Structural`].
pub fn parse_flat(text: &str, orientation: Orientation) -> Result<Table, FlatParseError> {
    if text.trim().is_empty() {
        return Err(FlatParseError::EmptyInput);
    }
    let rows: Vec<Vec<&str>> = text
        .split(ROW_SEPARATOR)
        .map(|row| row.split(COLUMN_SEPARATOR).map(str::trim).collect())
        .collect();
    let widths: Vec<usize> = rows.iter().map(Vec::len).collect();
    if widths.iter().any(|&w| w != widths[0]) {
        return Err(FlatParseError::Structural { widths });
    }
    let value = |s: &str| (!s.is_empty()).then(|| s.to_string());

    match orientation {
        Orientation::AttributeValue => {
            if widths[0] != 2 {
                return Err(FlatParseError::Arity {
                    expected: 2,
                    found: widths[0],
                });
            }
            if let Some(index) = rows.iter().position(|r| r[0].is_empty()) {
                return Err(FlatParseError::EmptyHeader {
                    axis: Axis::Row,
                    index,
                });
            }
            let headers = dedup_headers(rows.iter().map(|r| r[0].to_string()).collect());
            let attributes = headers
                .into_iter()
                .zip(&rows)
                .map(|(header, r)| Attribute {
                    header,
                    value: value(r[1]),
                })
                .collect();
            Ok(Table::AttributeValue(attributes))
        }
        Orientation::Matrix => {
            let (head, body) = rows.split_first().expect("split yields at least one row");
            if let Some(index) = head[1..].iter().position(|h| h.is_empty()) {
                return Err(FlatParseError::EmptyHeader {
                    axis: Axis::Column,
                    index,
                });
            }
            if let Some(index) = body.iter().position(|r| r[0].is_empty()) {
                return Err(FlatParseError::EmptyHeader {
                    axis: Axis::Row,
                    index,
                });
            }
            Ok(Table::Matrix(Matrix {
                row_headers: dedup_headers(body.iter().map(|r| r[0].to_string()).collect()),
                col_headers: dedup_headers(head[1..].iter().map(|h| h.to_string()).collect()),
                cells: body
                    .iter()
                    .map(|r| r[1..].iter().map(|c| value(c)).collect())
                    .collect(),
            }))
        }
    }
}

/// Projects a valid table onto its normalized cell tuples, one per present
/// non-empty cell.
pub fn to_tuples(table: &Table) -> Result<BTreeSet<CellTuple>, TableError> {
    ensure_valid(table)?;
    let mut out = BTreeSet::new();
    let mut push = |row: &str, col: &str, value: &Option<String>| {
        let Some(value) = value
            .as_deref()
            .map(normalize_text)
            .filter(|v| !v.is_empty())
        else {
            return;
        };
        out.insert(CellTuple {
            row_header: normalize_text(row),
            col_header: normalize_text(col),
            value,
        });
    };
    match table {
        Table::AttributeValue(rows) => {
            for r in rows {
                push("", &r.header, &r.value);
            }
        }
        Table::Matrix(m) => {
            for (row_header, cells) in m.row_headers.iter().zip(&m.cells) {
                for (col_header, value) in m.col_headers.iter().zip(cells) {
                    push(row_header, col_header, value);
                }
            }
        }
    }
    Ok(out)
}

/// Wire form of [`Table`]. Orientation may be omitted and is then inferred
/// from which fields are present.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    row_headers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    col_headers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<Vec<Option<String>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rows: Option<Vec<Attribute>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        let has_matrix_fields =
            raw.row_headers.is_some() || raw.col_headers.is_some() || raw.cells.is_some();
        let orientation = match (raw.orientation, raw.rows.is_some(), has_matrix_fields) {
            (Some(o), _, _) => o,
            (None, true, false) => Orientation::AttributeValue,
            (None, false, true) => Orientation::Matrix,
            (None, true, true) => {
                return Err(TableError::Schema(
                    "table mixes \"rows\" with matrix fields".into(),
                ))
            }
            (None, false, false) => {
                return Err(TableError::Schema("table has no content fields".into()))
            }
        };
        match orientation {
            Orientation::AttributeValue => {
                if has_matrix_fields {
                    return Err(TableError::Schema(
                        "attribute_value table with matrix fields".into(),
                    ));
                }
                Table::attribute_value(
                    raw.rows
                        .unwrap_or_default()
                        .into_iter()
                        .map(|a| (a.header, a.value)),
                )
            }
            Orientation::Matrix => {
                if raw.rows.is_some() {
                    return Err(TableError::Schema(
                        "matrix table with \"rows\" field".into(),
                    ));
                }
                Table::matrix(
                    raw.row_headers.unwrap_or_default(),
                    raw.col_headers.unwrap_or_default(),
                    raw.cells.unwrap_or_default(),
                )
            }
        }
    }
}

impl From<Table> for RawTable {
    fn from(table: Table) -> Self {
        match table {
            Table::AttributeValue(rows) => RawTable {
                orientation: Some(Orientation::AttributeValue),
                row_headers: None,
                col_headers: None,
                cells: None,
                rows: Some(rows),
            },
            Table::Matrix(m) => RawTable {
                orientation: Some(Orientation::Matrix),
                row_headers: Some(m.row_headers),
                col_headers: Some(m.col_headers),
                cells: Some(m.cells),
                rows: None,
            },
        }
    }
}
