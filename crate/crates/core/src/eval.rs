//! Punctuation- and case-sensitive token error rate with a four-way error
//! breakdown (punctuation, capitalization, ITN, lexical).
//!
//! Tokens are whitespace-separated units; nothing is normalized before
//! alignment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::synthdata::verbalize_token;

/// Splits on runs of whitespace. No case folding, no punctuation stripping.
pub fn ter_tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Match,
    Substitute,
    Insert,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub ref_token: Option<String>,
    pub hyp_token: Option<String>,
}

impl AlignmentOp {
    fn new(kind: OpKind, r: Option<&str>, h: Option<&str>) -> Self {
        AlignmentOp {
            kind,
            ref_token: r.map(String::from),
            hyp_token: h.map(String::from),
        }
    }

    pub fn is_error(&self) -> bool {
        self.kind != OpKind::Match
    }
}

/// Minimum-edit alignment with unit costs. Backtrace prefers
/// match > substitute > delete > insert.
pub fn align<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Vec<AlignmentOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let r = |i: usize| reference[i].as_ref();
    let h = |j: usize| hypothesis[j].as_ref();
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(r(i - 1) != h(j - 1));
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = diag.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 && r(i - 1) == h(j - 1) && cur == d[(i - 1) * w + j - 1] {
            ops.push(AlignmentOp::new(
                OpKind::Match,
                Some(r(i - 1)),
                Some(h(j - 1)),
            ));
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && r(i - 1) != h(j - 1) && cur == d[(i - 1) * w + j - 1] + 1 {
            ops.push(AlignmentOp::new(
                OpKind::Substitute,
                Some(r(i - 1)),
                Some(h(j - 1)),
            ));
            i -= 1;
            j -= 1;
        } else if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            ops.push(AlignmentOp::new(OpKind::Delete, Some(r(i - 1)), None));
            i -= 1;
        } else {
            ops.push(AlignmentOp::new(OpKind::Insert, None, Some(h(j - 1))));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Number of non-match operations.
pub fn edit_cost(ops: &[AlignmentOp]) -> usize {
    ops.iter().filter(|o| o.is_error()).count()
}

/// Token error rate: (S + D + I) / |ref|. May exceed 1.
pub fn ter(reference: &str, hypothesis: &str) -> Result<f64> {
    let r = ter_tokenize(reference);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h = ter_tokenize(hypothesis);
    Ok(edit_cost(&align(&r, &h)) as f64 / r.len() as f64)
}

fn verbalize_span<S: AsRef<str>>(span: &[S]) -> Option<Vec<String>> {
    let mut out = Vec::new();
    for tok in span {
        out.extend(verbalize_token(tok.as_ref()).ok()?);
    }
    Some(out)
}

/// True iff both spans verbalize (numerals to words, `%` to "percent",
/// case folded, punctuation stripped) to the same word sequence.
pub fn itn_equivalent<S: AsRef<str>>(ref_span: &[S], hyp_span: &[S]) -> bool {
    if ref_span.is_empty() || hyp_span.is_empty() {
        return false;
    }
    match (verbalize_span(ref_span), verbalize_span(hyp_span)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ErrorBreakdown {
    pub punctuation: usize,
    pub capitalization: usize,
    pub itn: usize,
    pub lexical: usize,
}

impl ErrorBreakdown {
    pub fn total(&self) -> usize {
        self.punctuation + self.capitalization + self.itn + self.lexical
    }

    pub fn add(&mut self, other: &ErrorBreakdown) {
        self.punctuation += other.punctuation;
        self.capitalization += other.capitalization;
        self.itn += other.itn;
        self.lexical += other.lexical;
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '%' || matches!(c, '“' | '”' | '‘' | '’' | '…' | '—' | '–')
}

fn strip_punct(s: &str) -> String {
    s.chars().filter(|&c| !is_punct(c)).collect()
}

fn casefold(s: &str) -> String {
    s.to_lowercase()
}

fn pure_punct(s: &str) -> bool {
    !s.is_empty() && s.chars().all(is_punct)
}

fn has_numeral(s: &str) -> bool {
    s.chars().any(|c| c.is_ascii_digit() || c == '%')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Punctuation,
    Capitalization,
    Itn,
    Lexical,
}

fn classify_single(op: &AlignmentOp) -> Category {
    match (op.ref_token.as_deref(), op.hyp_token.as_deref()) {
        (Some(r), Some(h)) => {
            if strip_punct(r) == strip_punct(h) && r != h {
                Category::Punctuation
            } else if casefold(r) == casefold(h) {
                Category::Capitalization
            } else if strip_punct(&casefold(r)) == strip_punct(&casefold(h)) {
                Category::Punctuation
            } else {
                Category::Lexical
            }
        }
        (Some(t), None) | (None, Some(t)) if pure_punct(t) => Category::Punctuation,
        _ => Category::Lexical,
    }
}

/// Category of every non-match op, in alignment order.
///
/// Maximal runs of consecutive errors are first tested as a whole: when one
/// side carries a numeral and both sides verbalize identically, every op in
/// the run is an ITN error. Remaining ops are classified one by one.
pub fn categorize_ops(alignment: &[AlignmentOp]) -> Vec<(usize, Category)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < alignment.len() {
        if !alignment[i].is_error() {
            i += 1;
            continue;
        }
        let start = i;
        while i < alignment.len() && alignment[i].is_error() {
            i += 1;
        }
        let run = &alignment[start..i];
        let refs: Vec<&str> = run.iter().filter_map(|o| o.ref_token.as_deref()).collect();
        let hyps: Vec<&str> = run.iter().filter_map(|o| o.hyp_token.as_deref()).collect();
        let numeric = refs.iter().chain(&hyps).any(|t| has_numeral(t));
        if numeric && itn_equivalent(&refs, &hyps) {
            out.extend((start..i).map(|k| (k, Category::Itn)));
        } else {
            out.extend(
                run.iter()
                    .enumerate()
                    .map(|(k, op)| (start + k, classify_single(op))),
            );
        }
    }
    out
}

pub fn categorize(alignment: &[AlignmentOp]) -> ErrorBreakdown {
    let mut b = ErrorBreakdown::default();
    for (_, c) in categorize_ops(alignment) {
        match c {
            Category::Punctuation => b.punctuation += 1,
            Category::Capitalization => b.capitalization += 1,
            Category::Itn => b.itn += 1,
            Category::Lexical => b.lexical += 1,
        }
    }
    b
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct UtteranceScore {
    pub id: String,
    pub dataset: Option<String>,
    pub ref_tokens: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub breakdown: ErrorBreakdown,
}

impl UtteranceScore {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn ter(&self) -> f64 {
        self.errors() as f64 / self.ref_tokens.max(1) as f64
    }
}

/// Scores one reference/hypothesis pair.
pub fn score_pair(id: &str, reference: &str, hypothesis: &str) -> Result<UtteranceScore> {
    let r = ter_tokenize(reference);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h = ter_tokenize(hypothesis);
    let ops = align(&r, &h);
    let count = |k| ops.iter().filter(|o| o.kind == k).count();
    Ok(UtteranceScore {
        id: id.to_string(),
        dataset: None,
        ref_tokens: r.len(),
        substitutions: count(OpKind::Substitute),
        deletions: count(OpKind::Delete),
        insertions: count(OpKind::Insert),
        breakdown: categorize(&ops),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub breakdown: ErrorBreakdown,
}

impl Aggregate {
    fn add(&mut self, u: &UtteranceScore) {
        self.utterances += 1;
        self.ref_tokens += u.ref_tokens;
        self.substitutions += u.substitutions;
        self.deletions += u.deletions;
        self.insertions += u.insertions;
        self.breakdown.add(&u.breakdown);
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Micro-averaged TER.
    pub fn ter(&self) -> f64 {
        self.errors() as f64 / self.ref_tokens.max(1) as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusReport {
    pub utterances: Vec<UtteranceScore>,
    pub total: Aggregate,
    pub datasets: BTreeMap<String, Aggregate>,
}

impl CorpusReport {
    /// Unweighted mean of per-dataset TERs, when datasets are labelled.
    pub fn macro_ter(&self) -> Option<f64> {
        if self.datasets.is_empty() {
            return None;
        }
        Some(self.datasets.values().map(Aggregate::ter).sum::<f64>() / self.datasets.len() as f64)
    }

    /// Human-readable summary.
    pub fn to_text(&self, verbose: bool) -> String {
        let t = &self.total;
        let mut s = String::new();
        let _ = writeln!(s, "TER {:.2}%", 100.0 * t.ter());
        let _ = writeln!(
            s,
            "utterances {}  ref_tokens {}  errors {} (sub {}, del {}, ins {})",
            t.utterances,
            t.ref_tokens,
            t.errors(),
            t.substitutions,
            t.deletions,
            t.insertions
        );
        let b = &t.breakdown;
        let _ = writeln!(
            s,
            "punctuation {}  capitalization {}  itn {}  lexical {}",
            b.punctuation, b.capitalization, b.itn, b.lexical
        );
        if !self.datasets.is_empty() {
            for (name, agg) in &self.datasets {
                let _ = writeln!(s, "dataset {name}: TER {:.2}%", 100.0 * agg.ter());
            }
            let _ = writeln!(
                s,
                "macro-average TER {:.2}%",
                100.0 * self.macro_ter().unwrap()
            );
        }
        if verbose {
            for u in &self.utterances {
                let b = &u.breakdown;
                let _ = writeln!(
                    s,
                    "{}\tTER {:.2}%\tpunc {} cap {} itn {} lex {}",
                    u.id,
                    100.0 * u.ter(),
                    b.punctuation,
                    b.capitalization,
                    b.itn,
                    b.lexical
                );
            }
        }
        s
    }

    /// Machine-readable tab-separated rows: a header, one row per
    /// utterance (when `verbose`) and an `ALL` row.
    pub fn to_tsv(&self, verbose: bool) -> String {
        let mut s = String::from(
            "id\tdataset\tref_tokens\tsub\tdel\tins\tter\tpunctuation\tcapitalization\titn\tlexical\n",
        );
        let mut row =
            |id: &str, ds: &str, a: (usize, usize, usize, usize), ter: f64, b: &ErrorBreakdown| {
                let _ = writeln!(
                    s,
                    "{id}\t{ds}\t{}\t{}\t{}\t{}\t{ter:.6}\t{}\t{}\t{}\t{}",
                    a.0, a.1, a.2, a.3, b.punctuation, b.capitalization, b.itn, b.lexical
                );
            };
        if verbose {
            for u in &self.utterances {
                row(
                    &u.id,
                    u.dataset.as_deref().unwrap_or("-"),
                    (u.ref_tokens, u.substitutions, u.deletions, u.insertions),
                    u.ter(),
                    &u.breakdown,
                );
            }
        }
        for (name, a) in &self.datasets {
            row(
                "DATASET",
                name,
                (a.ref_tokens, a.substitutions, a.deletions, a.insertions),
                a.ter(),
                &a.breakdown,
            );
        }
        let t = &self.total;
        row(
            "ALL",
            "-",
            (t.ref_tokens, t.substitutions, t.deletions, t.insertions),
            t.ter(),
            &t.breakdown,
        );
        s
    }
}

/// One line of a reference or hypothesis file: `id<TAB>text` or
/// `id<TAB>dataset<TAB>text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Line {
    pub id: String,
    pub dataset: Option<String>,
    pub text: String,
}

pub fn parse_lines(content: &str) -> Result<Vec<Line>> {
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let parts: Vec<&str> = l.split('\t').collect();
            match parts.as_slice() {
                [id] => Ok(Line {
                    id: id.to_string(),
                    dataset: None,
                    text: String::new(),
                }),
                [id, text] => Ok(Line {
                    id: id.to_string(),
                    dataset: None,
                    text: text.to_string(),
                }),
                [id, ds, text] => Ok(Line {
                    id: id.to_string(),
                    dataset: Some(ds.to_string()),
                    text: text.to_string(),
                }),
                _ => Err(invalid(format!("line {}: expected id<TAB>text", n + 1))),
            }
        })
        .collect()
}

/// Scores line-aligned reference and hypothesis lists.
pub fn evaluate_lines(refs: &[Line], hyps: &[Line]) -> Result<CorpusReport> {
    if refs.len() != hyps.len() {
        return Err(invalid(format!(
            "reference has {} lines, hypothesis has {}",
            refs.len(),
            hyps.len()
        )));
    }
    let mut report = CorpusReport::default();
    for (n, (r, h)) in refs.iter().zip(hyps).enumerate() {
        if r.id != h.id {
            return Err(invalid(format!(
                "line {}: id mismatch (reference {:?}, hypothesis {:?})",
                n + 1,
                r.id,
                h.id
            )));
        }
        let mut u = score_pair(&r.id, &r.text, &h.text)
            .map_err(|e| invalid(format!("line {} ({}): {e}", n + 1, r.id)))?;
        u.dataset = r.dataset.clone().or_else(|| h.dataset.clone());
        report.total.add(&u);
        if let Some(ds) = &u.dataset {
            report.datasets.entry(ds.clone()).or_default().add(&u);
        }
        report.utterances.push(u);
    }
    Ok(report)
}

pub fn evaluate_corpus(ref_file: &Path, hyp_file: &Path) -> Result<CorpusReport> {
    let refs = parse_lines(&std::fs::read_to_string(ref_file)?)?;
    let hyps = parse_lines(&std::fs::read_to_string(hyp_file)?)?;
    evaluate_lines(&refs, &hyps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(ops: &[AlignmentOp]) -> Vec<OpKind> {
        ops.iter().map(|o| o.kind).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(ter_tokenize("Hello, world."), vec!["Hello,", "world."]);
        assert_eq!(ter_tokenize("  a  b "), vec!["a", "b"]);
        assert!(ter_tokenize("").is_empty());
    }

    #[test]
    fn align_examples() {
        assert_eq!(kinds(&align(&["a"], &["a"])), vec![OpKind::Match]);
        let ops = align(&["a", "b"], &["b"]);
        assert_eq!(kinds(&ops), vec![OpKind::Delete, OpKind::Match]);
        assert_eq!(ops[0].ref_token.as_deref(), Some("a"));
        let empty: [&str; 0] = [];
        let ops = align(&empty, &["x"]);
        assert_eq!(kinds(&ops), vec![OpKind::Insert]);
        assert_eq!(ops[0].hyp_token.as_deref(), Some("x"));
        assert!(align(&empty, &empty).is_empty());
    }

    #[test]
    fn ter_examples() {
        assert_eq!(ter("Hello, world.", "Hello, world.").unwrap(), 0.0);
        assert_eq!(ter("Hello, world.", "hello world").unwrap(), 1.0);
        assert_eq!(ter("a", "a b c").unwrap(), 2.0);
        assert!(matches!(ter("   ", "a"), Err(Error::EmptyReference)));
    }

    #[test]
    fn itn_examples() {
        assert!(itn_equivalent(&["40%"], &["forty", "percent"]));
        assert!(!itn_equivalent(&["40%"], &["forty"]));
        assert!(itn_equivalent(&["7"], &["seven"]));
        assert!(itn_equivalent(&["twenty", "one."], &["21"]));
        assert!(!itn_equivalent(&["100"], &["one", "hundred"]));
        let empty: [&str; 0] = [];
        assert!(!itn_equivalent(&empty, &["x"]));
    }

    fn cat(r: &str, h: &str) -> ErrorBreakdown {
        categorize(&align(&ter_tokenize(r), &ter_tokenize(h)))
    }

    #[test]
    fn categorize_examples() {
        assert_eq!(cat("world.", "world").punctuation, 1);
        assert_eq!(cat("Hello", "hello").capitalization, 1);
        assert_eq!(cat("cat", "dog").lexical, 1);
        let b = cat("40%", "forty percent");
        assert_eq!(b.itn, 2);
        assert_eq!(b.total(), 2);
        // differs in both punctuation and case: punctuation wins
        assert_eq!(cat("Today,", "today").punctuation, 1);
        assert_eq!(cat("a b", "a b !").punctuation, 1);
        assert_eq!(cat("a - b", "a b").punctuation, 1);
        assert_eq!(cat("a b", "a b c").lexical, 1);
    }

    #[test]
    fn corpus_micro_and_macro() {
        let refs = parse_lines("u1\tA\ta b c d e f g h i j\nu2\tB\ta b c d e f g h i j\n").unwrap();
        let hyps = parse_lines("u1\ta b c d e f g h i x\nu2\ta b c d e f g h y x\n").unwrap();
        let rep = evaluate_lines(&refs, &hyps).unwrap();
        assert!((rep.total.ter() - 0.15).abs() < 1e-12);
        assert!((rep.macro_ter().unwrap() - 0.15).abs() < 1e-12);
        assert_eq!(rep.datasets.len(), 2);
        assert!(rep.to_text(true).lines().count() >= 5);
    }

    #[test]
    fn corpus_id_mismatch_names_line() {
        let refs = parse_lines("u1\ta\nu2\tb\n").unwrap();
        let hyps = parse_lines("u1\ta\nu3\tb\n").unwrap();
        let err = evaluate_lines(&refs, &hyps).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn identical_corpus_is_clean() {
        let refs = parse_lines("u1\tHello, world.\nu2\tIt is 40%.\n").unwrap();
        let rep = evaluate_lines(&refs, &refs).unwrap();
        assert_eq!(rep.total.ter(), 0.0);
        assert_eq!(rep.total.breakdown, ErrorBreakdown::default());
        assert!(rep.to_text(false).starts_with("TER 0.00%"));
    }

    #[test]
    fn empty_hypothesis_line_allowed() {
        let refs = parse_lines("u1\tHello there.\n").unwrap();
        let hyps = parse_lines("u1\t\n").unwrap();
        let rep = evaluate_lines(&refs, &hyps).unwrap();
        assert_eq!(rep.total.deletions, 2);
    }
}
