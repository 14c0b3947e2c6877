//! Shared generators for property and acceptance tests.
#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use text2table::table::{Attribute, CellTuple, Matrix};
use text2table::{Orientation, Table};

const WORDS: &[&str] = &[
    "Hawks",
    "Magic",
    "points",
    "rebounds",
    "The",
    "Eagle",
    "£20",
    "café",
    "name",
    "Name",
    "x",
    "1949",
    "7",
    "a-b",
    "O'Neil",
    "state",
    "team",
    "wins",
    "losses",
    "total",
    "4th",
    "quarter",
    "near",
    "riverside",
    "#2",
    "Ω",
    "東京",
];

pub fn words(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n)
        .map(|_| *WORDS.choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn value(rng: &mut ChaCha8Rng, absent: f64) -> Option<String> {
    (!rng.random_bool(absent)).then(|| words(rng, 4))
}

/// A valid table of random shape over a small shared vocabulary, so that
/// two tables drawn from it overlap.
pub fn random_table(rng: &mut ChaCha8Rng, orientation: Orientation) -> Table {
    match orientation {
        Orientation::AttributeValue => {
            let n = rng.random_range(1..=8);
            let rows: Vec<(String, Option<String>)> =
                (0..n).map(|_| (words(rng, 2), value(rng, 0.3))).collect();
            Table::attribute_value(rows).unwrap()
        }
        Orientation::Matrix => {
            let r = rng.random_range(1..=5);
            let c = rng.random_range(1..=5);
            let rows: Vec<String> = (0..r).map(|_| words(rng, 2)).collect();
            let cols: Vec<String> = (0..c).map(|_| words(rng, 2)).collect();
            let cells = (0..r)
                .map(|_| (0..c).map(|_| value(rng, 0.3)).collect())
                .collect();
            Table::matrix(rows, cols, cells).unwrap()
        }
    }
}

/// A copy of `table` with some values replaced and some cells emptied.
pub fn perturb(rng: &mut ChaCha8Rng, table: &Table) -> Table {
    let mut change = |v: &Option<String>| match rng.random_range(0..4) {
        0 => None,
        1 => Some(words(rng, 2)),
        _ => v.clone(),
    };
    match table {
        Table::AttributeValue(rows) => Table::AttributeValue(
            rows.iter()
                .map(|a| Attribute {
                    header: a.header.clone(),
                    value: change(&a.value),
                })
                .collect(),
        ),
        Table::Matrix(m) => Table::Matrix(Matrix {
            row_headers: m.row_headers.clone(),
            col_headers: m.col_headers.clone(),
            cells: m
                .cells
                .iter()
                .map(|row| row.iter().map(&mut change).collect())
                .collect(),
        }),
    }
}

/// Membership-count scoring over plain lists: every predicted item is
/// looked up in the gold list one comparison at a time.
pub fn brute_force_prf(pred: &[CellTuple], gold: &[CellTuple]) -> (f64, f64, f64) {
    let mut p_items: Vec<&CellTuple> = Vec::new();
    for t in pred {
        if !p_items.contains(&t) {
            p_items.push(t);
        }
    }
    let mut g_items: Vec<&CellTuple> = Vec::new();
    for t in gold {
        if !g_items.contains(&t) {
            g_items.push(t);
        }
    }
    let mut hits = 0usize;
    for p in &p_items {
        for g in &g_items {
            if p.row_header == g.row_header && p.col_header == g.col_header && p.value == g.value {
                hits += 1;
                break;
            }
        }
    }
    let precision = if p_items.is_empty() {
        0.0
    } else {
        hits as f64 / p_items.len() as f64
    };
    let recall = if g_items.is_empty() {
        0.0
    } else {
        hits as f64 / g_items.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

const ADVERSARIAL: &[&str] = &[
    "",
    " ",
    "<SEP>",
    "<ROWCOL>",
    "<NEWLINE>",
    "|",
    " | ",
    "||",
    "\n",
    "\t",
    "\"",
    "'",
    "unknown",
    "N/A",
    "none",
    "five",
    "twenty-one",
    "0042",
    "Hawks",
    "Magic",
    "Points",
    "Name",
    "name",
    "NAME ",
    "a<SEP>b",
    "<SEP><SEP>",
    "<ROWCOL><ROWCOL>",
    "x|y<NEWLINE>z",
    "☃",
    "\u{200b}",
    "<NEW",
    "LINE>",
    "#2",
    "Total points",
    "-",
    ".",
];

/// Text assembled from separators, whitespace, no-answer phrases and words.
pub fn adversarial_text(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(0..12);
    let mut out = String::new();
    for _ in 0..n {
        out.push_str(ADVERSARIAL.choose(rng).unwrap());
        if rng.random_bool(0.5) {
            out.push(' ');
        }
    }
    out
}
