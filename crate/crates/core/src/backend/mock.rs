use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;

use super::{
    BackendError, GenerationRequest, GenerationResponse, PromptTask, TextGenerator,
    DEFAULT_CONCURRENCY,
};
use crate::qa::{formulate_question, AXIS_SEPARATOR, HEADER_SEPARATOR};
use crate::table::{serialize_flat, Table};

/// Offline backend that answers from gold tables.
///
/// Structure prompts get the gold header sequence, cell questions get the
/// gold value (or `unknown` when the slot is empty or the question names
/// headers the gold table lacks) and flat-table prompts get the gold table
/// in the flat encoding. The gold table is found through the request hint's
/// passage.
#[derive(Debug, Default)]
pub struct OracleBackend {
    golds: HashMap<Arc<str>, GoldEntry>,
    calls: AtomicUsize,
}

#[derive(Debug)]
struct GoldEntry {
    table: Table,
    answers: HashMap<String, String>,
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_gold(mut self, passage: &str, table: Table) -> Self {
        self.insert(passage, table);
        self
    }

    pub fn insert(&mut self, passage: &str, table: Table) {
        let answers = gold_answers(&table);
        self.golds
            .insert(Arc::from(passage), GoldEntry { table, answers });
    }

    /// Number of `generate` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// The answer the oracle gives for a structure request on `table`.
    pub fn header_sequence(table: &Table) -> String {
        let sep = format!(" {HEADER_SEPARATOR} ");
        match table {
            Table::AttributeValue(_) => table.col_headers().join(&sep),
            Table::Matrix(m) => format!(
                "{} {AXIS_SEPARATOR} {}",
                m.row_headers.join(&sep),
                m.col_headers.join(&sep)
            ),
        }
    }
}

/// Every phrasing of every slot question mapped to the slot's gold value.
fn gold_answers(table: &Table) -> HashMap<String, String> {
    let mut answers = HashMap::new();
    match table {
        Table::AttributeValue(rows) => {
            for row in rows {
                if let Some(v) = &row.value {
                    answers.insert(formulate_question(None, &row.header, false), v.clone());
                }
            }
        }
        Table::Matrix(m) => {
            for (row, cells) in m.row_headers.iter().zip(&m.cells) {
                for (col, value) in m.col_headers.iter().zip(cells) {
                    if let Some(v) = value {
                        for numeric in [true, false] {
                            answers.insert(formulate_question(Some(row), col, numeric), v.clone());
                        }
                    }
                }
            }
        }
    }
    answers
}

#[async_trait]
impl TextGenerator for OracleBackend {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        request.check()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hint = request.hint.as_ref().ok_or_else(|| {
            BackendError::MalformedResponse("oracle request carries no hint".into())
        })?;
        let gold = self.golds.get(&hint.passage).ok_or_else(|| {
            BackendError::MalformedResponse("no gold table registered for passage".into())
        })?;
        let text = match &hint.task {
            PromptTask::Structure { .. } => Self::header_sequence(&gold.table),
            PromptTask::Cell { question } => gold
                .answers
                .get(question.trim())
                .cloned()
                .unwrap_or_else(|| "unknown".to_string()),
            PromptTask::FlatTable { .. } => serialize_flat(&gold.table)
                .map_err(|e| BackendError::MalformedResponse(e.to_string()))?,
        };
        Ok(GenerationResponse::text(text))
    }
}

type Script = dyn Fn(&GenerationRequest) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure; counts the calls it serves.
pub struct ScriptedBackend {
    script: Box<Script>,
    calls: AtomicUsize,
    concurrency: usize,
}

impl ScriptedBackend {
    pub fn from_fn<F>(script: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        Self {
            script: Box::new(script),
            calls: AtomicUsize::new(0),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::from_fn(move |_| Ok(text.clone()))
    }

    pub fn with_concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("calls", &self.calls())
            .finish()
    }
}

#[async_trait]
impl TextGenerator for ScriptedBackend {
    async fn generate(
        &self,
        request: &GenerationRequest,
    ) -> Result<GenerationResponse, BackendError> {
        request.check()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.script)(request).map(GenerationResponse::text)
    }

    fn max_in_flight(&self) -> usize {
        self.concurrency
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kind::DatasetKind;

    const WIKIBIO: &str =
        "Leonard Shenoff Randle (born February 12, 1949) is a former Major League Baseball player.";

    fn wikibio() -> Table {
        Table::attribute_value([
            ("Debut team", Some("Washington Senators")),
            ("Name", Some("Lenny Randle")),
            ("Birth Date", Some("12 February 1949")),
        ])
        .unwrap()
    }

    fn cell(question: &str) -> GenerationRequest {
        GenerationRequest::new(format!("prompt: {question}"), 16).with_hint(
            Arc::from(WIKIBIO),
            PromptTask::Cell {
                question: question.into(),
            },
        )
    }

    #[tokio::test]
    async fn oracle_answers_gold_cells() {
        let oracle = OracleBackend::new().with_gold(WIKIBIO, wikibio());
        let r = oracle.generate(&cell("What is the Name?")).await.unwrap();
        assert_eq!(r.text, "Lenny Randle");
        let r = oracle
            .generate(&cell("What is the Position?"))
            .await
            .unwrap();
        assert_eq!(r.text, "unknown");
        assert_eq!(oracle.calls(), 2);
    }

    #[tokio::test]
    async fn oracle_answers_structure_and_flat() {
        let oracle = OracleBackend::new().with_gold(WIKIBIO, wikibio());
        let structure = GenerationRequest::new("s", 16).with_hint(
            Arc::from(WIKIBIO),
            PromptTask::Structure {
                kind: DatasetKind::WikiBio,
            },
        );
        assert_eq!(
            oracle.generate(&structure).await.unwrap().text,
            "Debut team <SEP> Name <SEP> Birth Date"
        );
        let flat = GenerationRequest::new("f", 16).with_hint(
            Arc::from(WIKIBIO),
            PromptTask::FlatTable {
                kind: DatasetKind::WikiBio,
            },
        );
        assert_eq!(
            oracle.generate(&flat).await.unwrap().text,
            "Debut team | Washington Senators<NEWLINE>Name | Lenny Randle<NEWLINE>Birth Date | 12 February 1949"
        );
    }

    #[tokio::test]
    async fn oracle_without_gold_is_malformed() {
        let oracle = OracleBackend::new();
        assert!(matches!(
            oracle.generate(&GenerationRequest::new("x", 1)).await,
            Err(BackendError::MalformedResponse(_))
        ));
        assert!(matches!(
            oracle.generate(&cell("What is the Name?")).await,
            Err(BackendError::MalformedResponse(_))
        ));
    }

    #[test]
    fn matrix_header_sequence_uses_axis_divider() {
        let t = Table::matrix(["Magic", "Hawks"], ["Wins"], vec![vec![None], vec![None]]).unwrap();
        assert_eq!(
            OracleBackend::header_sequence(&t),
            "Magic <SEP> Hawks <ROWCOL> Wins"
        );
    }
}
