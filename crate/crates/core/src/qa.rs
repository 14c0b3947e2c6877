//! Prompt rendering, header-sequence parsing, per-cell question synthesis and
//! answer post-processing.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kind::DatasetKind;
use crate::table::{dedup_headers, normalize_text, Orientation};

/// Separator between headers in a generated header sequence.
pub const HEADER_SEPARATOR: &str = "<SEP>";
/// Divider between the row-header list and the column-header list.
pub const AXIS_SEPARATOR: &str = "<ROWCOL>";

/// Words-to-tokens factor used to estimate prompt length without a tokenizer.
pub const TOKENS_PER_WORD: f64 = 1.3;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QaError {
    #[error("no headers found in generated sequence")]
    NoHeaders,
    #[error("passage is empty")]
    EmptyPassage,
    #[error("question is empty")]
    EmptyQuestion,
    #[error("template error: {0}")]
    Template(String),
    #[error("context budget of {budget} tokens leaves no room for the passage (template needs {overhead})")]
    ContextTooSmall { budget: usize, overhead: usize },
}

/// A question bound to a skeleton slot. `row_index` is `None` for
/// attribute-value tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellQuestion {
    pub row_index: Option<usize>,
    pub col_index: usize,
    pub question: String,
}

/// Splits a `<SEP>`-delimited header sequence, dropping empty pieces and
/// suffixing duplicates.
pub fn parse_header_sequence(text: &str) -> Result<Vec<String>, QaError> {
    let headers: Vec<String> = text
        .split(HEADER_SEPARATOR)
        .map(str::trim)
        .filter(|h| !normalize_text(h).is_empty())
        .map(str::to_string)
        .collect();
    if headers.is_empty() {
        return Err(QaError::NoHeaders);
    }
    Ok(dedup_headers(headers))
}

pub fn formulate_question(
    row_header: Option<&str>,
    col_header: &str,
    numeric_hint: bool,
) -> String {
    match (row_header, numeric_hint) {
        (Some(row), true) => format!("What is the number of {col_header} for {row}?"),
        (Some(row), false) => format!("What is the {col_header} for {row}?"),
        (None, _) => format!("What is the {col_header}?"),
    }
}

/// A prompt with `{{name}}` slots, filled in a single pass so that slot-like
/// text inside a substituted value is never expanded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    text: String,
}

impl PromptTemplate {
    /// Parses `text`, requiring every slot in `required` to appear and
    /// rejecting any other slot name.
    pub fn parse(text: impl Into<String>, required: &[&str]) -> Result<Self, QaError> {
        let text = text.into();
        let slots = slot_names(&text)?;
        if let Some(unknown) = slots.iter().find(|s| !required.contains(&s.as_str())) {
            return Err(QaError::Template(format!("unknown slot {{{{{unknown}}}}}")));
        }
        if let Some(missing) = required.iter().find(|r| !slots.iter().any(|s| s == *r)) {
            return Err(QaError::Template(format!("missing slot {{{{{missing}}}}}")));
        }
        Ok(Self { text })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &BTreeMap<&str, &str>) -> Result<String, QaError> {
        let mut out = String::with_capacity(
            self.text.len() + values.values().map(|v| v.len()).sum::<usize>(),
        );
        let mut rest = self.text.as_str();
        while let Some(start) = rest.find("{{") {
            let end = rest[start..]
                .find("}}")
                .map(|e| start + e)
                .ok_or_else(|| QaError::Template("unterminated slot".into()))?;
            let name = rest[start + 2..end].trim();
            let value = values
                .get(name)
                .ok_or_else(|| QaError::Template(format!("slot {{{{{name}}}}} left unfilled")))?;
            out.push_str(&rest[..start]);
            out.push_str(value);
            rest = &rest[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn slot_names(text: &str) -> Result<Vec<String>, QaError> {
    let mut names = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        let end = rest[start..]
            .find("}}")
            .map(|e| start + e)
            .ok_or_else(|| QaError::Template("unterminated slot".into()))?;
        names.push(rest[start + 2..end].trim().to_string());
        rest = &rest[end + 2..];
    }
    Ok(names)
}

/// Rough token count: whitespace tokens scaled by [`TOKENS_PER_WORD`].
pub fn estimate_tokens(text: &str) -> usize {
    (text.split_whitespace().count() as f64 * TOKENS_PER_WORD).ceil() as usize
}

fn entity_words(kind: DatasetKind) -> (&'static str, &'static str) {
    match kind {
        DatasetKind::E2e => ("restaurant attributes", ""),
        DatasetKind::WikiTableText => ("table fields", ""),
        DatasetKind::WikiBio => ("biography infobox fields", ""),
        DatasetKind::RotowireTeam => ("teams", "team statistics"),
        DatasetKind::RotowirePlayer => ("players", "player statistics"),
    }
}

fn default_structure_template(kind: DatasetKind) -> String {
    let (entities, stats) = entity_words(kind);
    match kind.orientation() {
        Orientation::AttributeValue => format!(
            "Read the passage and list the {entities} needed to summarize it as a table of attributes and values. \
             Output only the header names, separated by {HEADER_SEPARATOR}.\n\nPassage: {{{{passage}}}}\n\nHeaders:"
        ),
        Orientation::Matrix => format!(
            "Read the passage and design a table of {stats}. List the row headers ({entities} mentioned in the passage), \
             then the token {AXIS_SEPARATOR}, then the column headers (the statistics reported). Separate the headers \
             within each list by {HEADER_SEPARATOR}.\n\nPassage: {{{{passage}}}}\n\nHeaders:"
        ),
    }
}

const DEFAULT_QA_TEMPLATE: &str = "Answer the question using the passage as evidence. Answer with a short span; \
say 'unknown' if the answer is not in the passage.\n\nPassage: {{passage}}\n\nQuestion: {{question}}\n\nAnswer:";

fn default_flat_template(kind: DatasetKind) -> String {
    match kind.orientation() {
        Orientation::AttributeValue => format!(
            "Summarize the passage as a table. Write one row per attribute as `header | value` and separate rows \
             with the {} tag.\n\nPassage: {{{{passage}}}}\n\nTable:",
            crate::table::ROW_SEPARATOR
        ),
        Orientation::Matrix => format!(
            "Summarize the passage as a table. The first row holds an empty corner cell followed by the column \
             headers; every following row starts with its row header. Separate cells with | and rows with the {} \
             tag.\n\nPassage: {{{{passage}}}}\n\nTable:",
            crate::table::ROW_SEPARATOR
        ),
    }
}

/// The prompt templates for one dataset kind plus the context budget used
/// to truncate passages.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompts {
    kind: DatasetKind,
    structure: PromptTemplate,
    qa: PromptTemplate,
    flat: PromptTemplate,
    context_tokens: Option<usize>,
}

impl Prompts {
    pub fn new(kind: DatasetKind) -> Self {
        Self {
            kind,
            structure: PromptTemplate::parse(default_structure_template(kind), &["passage"])
                .expect("builtin"),
            qa: PromptTemplate::parse(DEFAULT_QA_TEMPLATE, &["passage", "question"])
                .expect("builtin"),
            flat: PromptTemplate::parse(default_flat_template(kind), &["passage"])
                .expect("builtin"),
            context_tokens: None,
        }
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn with_context_tokens(mut self, budget: Option<usize>) -> Self {
        self.context_tokens = budget;
        self
    }

    pub fn with_structure_template(mut self, text: impl Into<String>) -> Result<Self, QaError> {
        self.structure = PromptTemplate::parse(text, &["passage"])?;
        Ok(self)
    }

    pub fn with_qa_template(mut self, text: impl Into<String>) -> Result<Self, QaError> {
        self.qa = PromptTemplate::parse(text, &["passage", "question"])?;
        Ok(self)
    }

    pub fn with_flat_template(mut self, text: impl Into<String>) -> Result<Self, QaError> {
        self.flat = PromptTemplate::parse(text, &["passage"])?;
        Ok(self)
    }

    /// Stage-one prompt asking for the `<SEP>`-separated header list.
    pub fn structure(&self, passage: &str) -> Result<String, QaError> {
        self.render(&self.structure, passage, None)
    }

    /// Stage-two prompt asking one cell question against the passage.
    pub fn qa(&self, passage: &str, question: &str) -> Result<String, QaError> {
        if question.trim().is_empty() {
            return Err(QaError::EmptyQuestion);
        }
        self.render(&self.qa, passage, Some(question))
    }

    /// Single-stage prompt asking for the whole table in the flat encoding.
    pub fn flat_table(&self, passage: &str) -> Result<String, QaError> {
        self.render(&self.flat, passage, None)
    }

    fn render(
        &self,
        template: &PromptTemplate,
        passage: &str,
        question: Option<&str>,
    ) -> Result<String, QaError> {
        if passage.trim().is_empty() {
            return Err(QaError::EmptyPassage);
        }
        let mut values = BTreeMap::new();
        if let Some(q) = question {
            values.insert("question", q);
        }
        let passage = match self.context_tokens {
            Some(budget) => {
                values.insert("passage", "");
                let overhead = estimate_tokens(&template.render(&values)?);
                truncate_passage(passage, budget, overhead)?
            }
            None => passage.to_string(),
        };
        values.insert("passage", &passage);
        template.render(&values)
    }
}

/// Keeps the leading words of `passage` so that the estimated size of the
/// rendered prompt stays within `budget`.
fn truncate_passage(passage: &str, budget: usize, overhead: usize) -> Result<String, QaError> {
    let room = budget.saturating_sub(overhead);
    let max_words = (room as f64 / TOKENS_PER_WORD).floor() as usize;
    if max_words == 0 {
        return Err(QaError::ContextTooSmall { budget, overhead });
    }
    let words: Vec<&str> = passage.split_whitespace().collect();
    if words.len() <= max_words {
        return Ok(passage.to_string());
    }
    log::debug!(
        "truncating passage from {} to {max_words} words",
        words.len()
    );
    Ok(words[..max_words].join(" "))
}

pub fn build_structure_prompt(passage: &str, kind: DatasetKind) -> Result<String, QaError> {
    Prompts::new(kind).structure(passage)
}

pub fn build_qa_prompt(passage: &str, question: &str) -> Result<String, QaError> {
    // The QA template does not depend on the dataset kind.
    Prompts::new(DatasetKind::E2e).qa(passage, question)
}

const UNITS: [&str; 20] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
];
const TENS: [&str; 8] = [
    "twenty", "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety",
];

fn unit_value(word: &str) -> Option<u64> {
    UNITS.iter().position(|w| *w == word).map(|v| v as u64)
}

fn tens_value(word: &str) -> Option<u64> {
    TENS.iter()
        .position(|w| *w == word)
        .map(|v| 20 + 10 * v as u64)
}

fn is_number_word(word: &str) -> bool {
    word == "hundred" || unit_value(word).is_some() || tens_value(word).is_some()
}

#[derive(Debug)]
enum Lexeme<'a> {
    Digits(&'a str),
    Word(String),
    Gap(&'a str),
}

fn lex(text: &str) -> Vec<Lexeme<'_>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, c)) = chars.peek() {
        let class = |c: char| {
            if c.is_ascii_digit() {
                0
            } else if c.is_alphabetic() {
                1
            } else {
                2
            }
        };
        let kind = class(c);
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if class(c) != kind {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        let piece = &text[start..end];
        out.push(match kind {
            0 => Lexeme::Digits(piece),
            1 => Lexeme::Word(piece.to_lowercase()),
            _ => Lexeme::Gap(piece),
        });
    }
    out
}

/// Words of a compound number may be joined by whitespace or one hyphen.
fn joins_compound(gap: &str) -> bool {
    gap.chars().all(|c| c.is_whitespace() || c == '-') && gap.matches('-').count() <= 1
}

/// Number words following position `i` that can continue a compound.
fn compound_words(lexemes: &[Lexeme<'_>], i: usize) -> Vec<String> {
    let mut words = Vec::new();
    let mut j = i;
    while let Some(Lexeme::Word(w)) = lexemes.get(j) {
        if !(is_number_word(w) || (w == "and" && !words.is_empty())) {
            break;
        }
        words.push(w.clone());
        match lexemes.get(j + 1) {
            Some(Lexeme::Gap(g)) if joins_compound(g) => j += 2,
            _ => break,
        }
    }
    words
}

fn below_hundred(words: &[String]) -> Option<(u64, usize)> {
    let first = words.first()?;
    if let Some(u) = unit_value(first) {
        return Some((u, 1));
    }
    let tens = tens_value(first)?;
    match words
        .get(1)
        .and_then(|w| unit_value(w))
        .filter(|u| (1..=9).contains(u))
    {
        Some(u) => Some((tens + u, 2)),
        None => Some((tens, 1)),
    }
}

fn compound_value(words: &[String]) -> Option<u64> {
    if words.first().map(String::as_str) == Some("hundred") {
        return Some(100);
    }
    let (lead, used) = below_hundred(words)?;
    if words.get(used).map(String::as_str) != Some("hundred") {
        return Some(lead);
    }
    let mut rest = &words[used + 1..];
    if rest.first().map(String::as_str) == Some("and") {
        rest = &rest[1..];
    }
    let tail = below_hundred(rest).map(|(v, _)| v).unwrap_or(0);
    Some(lead * 100 + tail)
}

/// Returns the first number in `answer`, as integer text. A run of decimal
/// digits or an English number word (with hyphenated or spaced compounds up
/// to the hundreds) counts; whichever starts first wins.
pub fn extract_numeric(answer: &str) -> Option<String> {
    let lexemes = lex(answer);
    for (i, lexeme) in lexemes.iter().enumerate() {
        match lexeme {
            Lexeme::Digits(d) => {
                let trimmed = d.trim_start_matches('0');
                return Some(if trimmed.is_empty() { "0" } else { trimmed }.to_string());
            }
            Lexeme::Word(w) if is_number_word(w) => {
                let words = compound_words(&lexemes, i);
                if let Some(v) = compound_value(&words) {
                    return Some(v.to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Answers that mean "the passage does not say".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoAnswerSet {
    phrases: HashSet<String>,
}

impl Default for NoAnswerSet {
    fn default() -> Self {
        Self::new(["unknown", "n/a", "none", "not mentioned", ""])
    }
}

impl NoAnswerSet {
    pub fn new<S: AsRef<str>>(phrases: impl IntoIterator<Item = S>) -> Self {
        Self {
            phrases: phrases
                .into_iter()
                .map(|p| normalize_text(p.as_ref()))
                .collect(),
        }
    }

    pub fn matches(&self, answer: &str) -> bool {
        let normalized = normalize_text(answer);
        let bare = normalize_text(normalized.trim_end_matches(['.', '!']));
        self.phrases.contains(&normalized) || self.phrases.contains(&bare)
    }
}

pub fn detect_no_answer(answer: &str) -> bool {
    NoAnswerSet::default().matches(answer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_sequence_examples() {
        assert_eq!(
            parse_header_sequence("Rebounds <SEP> Assists <SEP> Points").unwrap(),
            vec!["Rebounds", "Assists", "Points"]
        );
        assert_eq!(
            parse_header_sequence("Name<SEP>Name").unwrap(),
            vec!["Name", "Name #2"]
        );
        assert_eq!(parse_header_sequence("   "), Err(QaError::NoHeaders));
        assert_eq!(
            parse_header_sequence("<SEP> <SEP>"),
            Err(QaError::NoHeaders)
        );
        assert_eq!(
            parse_header_sequence(" a <SEP><SEP> b ").unwrap(),
            vec!["a", "b"]
        );
    }

    #[test]
    fn question_templates() {
        assert_eq!(
            formulate_question(Some("Suns"), "Wins", true),
            "What is the number of Wins for Suns?"
        );
        assert_eq!(
            formulate_question(Some("Suns"), "Coach", false),
            "What is the Coach for Suns?"
        );
        assert_eq!(
            formulate_question(None, "Birth Date", false),
            "What is the Birth Date?"
        );
    }

    #[test]
    fn structure_prompt_mentions_separator_and_passage() {
        let passage = "The Eagle is a low rated coffee shop near Burger King.";
        let p = build_structure_prompt(passage, DatasetKind::E2e).unwrap();
        assert!(p.contains(passage));
        assert!(p.contains(HEADER_SEPARATOR));
        assert!(!p.contains(AXIS_SEPARATOR));
        let p = build_structure_prompt(
            "The Atlanta Hawks beat the Orlando Magic.",
            DatasetKind::RotowireTeam,
        )
        .unwrap();
        assert!(p.contains(AXIS_SEPARATOR) && p.contains(HEADER_SEPARATOR));
        assert_eq!(
            build_structure_prompt("", DatasetKind::E2e),
            Err(QaError::EmptyPassage)
        );
    }

    #[test]
    fn qa_prompt_passes_text_through() {
        let q = "What is the {{passage}} | <NEWLINE> for {x}?";
        let p = build_qa_prompt("Some {{question}} text.", q).unwrap();
        assert!(p.contains(q));
        assert!(p.contains("Some {{question}} text."));
        assert!(p.contains("unknown"));
        assert_eq!(build_qa_prompt("text", " "), Err(QaError::EmptyQuestion));
        assert_eq!(build_qa_prompt("", "q?"), Err(QaError::EmptyPassage));
    }

    #[test]
    fn long_passages_are_truncated_to_budget() {
        let passage = (0..10_000)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ");
        let prompts = Prompts::new(DatasetKind::RotowireTeam).with_context_tokens(Some(512));
        let p = prompts
            .qa(&passage, "What is the number of Wins for Suns?")
            .unwrap();
        assert!(estimate_tokens(&p) <= 512, "{}", estimate_tokens(&p));
        assert!(p.contains("w0 w1 w2"));
        assert!(!p.contains("w9999"));
        // Short passages pass through untouched.
        let p = prompts.qa("a  b", "q?").unwrap();
        assert!(p.contains("a  b"));
        let tiny = Prompts::new(DatasetKind::E2e).with_context_tokens(Some(3));
        assert!(matches!(
            tiny.structure("x y"),
            Err(QaError::ContextTooSmall { .. })
        ));
    }

    #[test]
    fn templates_check_slots() {
        assert!(PromptTemplate::parse("no slots", &["passage"]).is_err());
        assert!(PromptTemplate::parse("{{passage}} {{other}}", &["passage"]).is_err());
        assert!(PromptTemplate::parse("{{passage", &["passage"]).is_err());
        let prompts = Prompts::new(DatasetKind::E2e)
            .with_qa_template("Q={{ question }} P={{passage}}")
            .unwrap();
        assert_eq!(prompts.qa("text", "why?").unwrap(), "Q=why? P=text");
    }

    #[test]
    fn numeric_extraction_vector() {
        let cases: &[(&str, Option<&str>)] = &[
            ("Ricky Rubio talled just five points", Some("5")),
            ("scored 21 points and 15 rebounds", Some("21")),
            ("no score reported", None),
            ("twenty-one points", Some("21")),
            ("Twenty one", Some("21")),
            ("ninety", Some("90")),
            ("one hundred and five", Some("105")),
            ("two hundred twelve", Some("212")),
            ("someone scored", None),
            ("4th quarter", Some("4")),
            ("007", Some("7")),
            ("zero", Some("0")),
            ("seven assists, 12 points", Some("7")),
            ("he had 3-4 shooting", Some("3")),
            ("", None),
        ];
        for (input, expected) in cases {
            assert_eq!(extract_numeric(input).as_deref(), *expected, "{input:?}");
        }
    }

    #[test]
    fn no_answer_detection() {
        assert!(detect_no_answer("Unknown"));
        assert!(!detect_no_answer("46"));
        assert!(detect_no_answer("  N/A "));
        assert!(detect_no_answer("unknown."));
        assert!(detect_no_answer(""));
        assert!(detect_no_answer("Not   mentioned"));
        assert!(!detect_no_answer("The Eagle"));
        assert!(NoAnswerSet::new(["nothing"]).matches("Nothing"));
    }
}
