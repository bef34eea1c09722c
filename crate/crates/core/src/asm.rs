//! Structured view of an x86 assembly listing.
//!
//! A listing is split into three parts: a header comment block (everything
//! comment-or-blank before the first line of code), inline comments keyed by
//! 1-based code line, and the bare code lines themselves. Both `;` (NASM) and
//! `#` (GAS) start a comment unless they sit inside a quoted literal.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Text that replaces a hidden instruction in a completion exercise.
pub const MASK_MARKER: &str = "# <MASKED>";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AsmError {
    #[error("no code lines remain after stripping comments")]
    EmptyAfterStrip,
    #[error("listing is not valid UTF-8: {0}")]
    MalformedEncoding(String),
    #[error("sample has no instruction lines")]
    NoInstructionLines,
    #[error("mask fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineKind {
    Instruction,
    Label,
    Directive,
    Blank,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsmSample {
    pub source_id: String,
    pub raw_text: String,
    /// Comment-stripped code with indentation kept and trailing whitespace removed.
    pub code_lines: Vec<String>,
    pub header_comment: Option<String>,
    /// 1-based code line -> comment text (delimiters stripped).
    pub inline_comments: BTreeMap<usize, String>,
    pub line_kinds: Vec<LineKind>,
}

impl AsmSample {
    pub fn instruction_lines(&self) -> Vec<usize> {
        self.line_kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == LineKind::Instruction)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn line_count(&self) -> usize {
        self.code_lines.len()
    }

    /// Everything but `raw_text`; two samples that render identically compare equal here.
    pub fn same_structure(&self, other: &AsmSample) -> bool {
        self.code_lines == other.code_lines
            && self.header_comment == other.header_comment
            && self.inline_comments == other.inline_comments
            && self.line_kinds == other.line_kinds
    }

    pub fn to_record(&self) -> SampleRecord {
        SampleRecord {
            source_id: self.source_id.clone(),
            code: render(self, false, false),
            header: self.header_comment.clone(),
            inline: self.inline_comments.clone(),
            kinds: self.line_kinds.clone(),
        }
    }
}

/// JSON-lines form of a normalized sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub source_id: String,
    pub code: String,
    pub header: Option<String>,
    pub inline: BTreeMap<usize, String>,
    pub kinds: Vec<LineKind>,
}

/// Splits a line at the first comment delimiter that is not inside a quoted literal.
pub fn split_comment(line: &str) -> (&str, Option<&str>) {
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) => {
                if escaped {
                    escaped = false;
                } else if c == '\\' && q == '`' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                '\'' | '"' | '`' => quote = Some(c),
                ';' | '#' => return (&line[..i], Some(&line[i..])),
                _ => {}
            },
        }
    }
    (line, None)
}

/// Comment text with the delimiter run and surrounding whitespace removed.
pub fn comment_body(comment: &str) -> &str {
    match comment.chars().next() {
        Some(delim @ (';' | '#')) => comment.trim_start_matches(delim).trim(),
        _ => comment.trim(),
    }
}

const DIRECTIVES: &[&str] = &[
    "section", "segment", "global", "globl", "extern", "bits", "use16", "use32", "use64",
    "default", "cpu", "org", "align", "alignb", "struc", "endstruc", "istruc", "iend", "at",
    "db", "dw", "dd", "dq", "dt", "do", "dy", "dz", "resb", "resw", "resd", "resq", "rest",
    "reso", "resy", "resz", "incbin", "equ", "times", "common", "static", "absolute", "proc",
    "endp", "ends", "end", "model", "include", "public", "assume", "title", "extrn",
];

// Directives that follow a bare symbol name, as in `msg db "hi", 0` or `main proc`.
const NAMED_DIRECTIVES: &[&str] = &[
    "db", "dw", "dd", "dq", "dt", "do", "dy", "dz", "resb", "resw", "resd", "resq", "rest",
    "reso", "resy", "resz", "equ", "times", "proc", "endp", "segment", "ends", "struc",
];

fn is_label_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '$' | '?' | '@')
}

/// Classifies one comment-free code line.
pub fn classify_line(code: &str) -> LineKind {
    let t = code.trim();
    if t.is_empty() {
        return LineKind::Blank;
    }
    let ident_len: usize = t.chars().take_while(|c| is_label_char(*c)).map(char::len_utf8).sum();
    if ident_len > 0 && t[ident_len..].starts_with(':') && !t[ident_len..].starts_with("::") {
        let rest = t[ident_len + 1..].trim();
        return match classify_line(rest) {
            LineKind::Blank => LineKind::Label,
            LineKind::Directive => LineKind::Directive,
            _ => LineKind::Instruction,
        };
    }
    if t.starts_with('%') || t.starts_with('.') || t.starts_with('[') {
        return LineKind::Directive;
    }
    let mut tokens = t.split_whitespace();
    let first = tokens.next().unwrap_or_default().to_ascii_lowercase();
    if DIRECTIVES.contains(&first.as_str()) {
        return LineKind::Directive;
    }
    if let Some(second) = tokens.next() {
        if NAMED_DIRECTIVES.contains(&second.to_ascii_lowercase().as_str()) {
            return LineKind::Directive;
        }
    }
    LineKind::Instruction
}

/// Parses raw bytes, rejecting invalid UTF-8.
pub fn parse_sample_bytes(bytes: &[u8], source_id: &str) -> Result<AsmSample, AsmError> {
    let text = std::str::from_utf8(bytes).map_err(|e| AsmError::MalformedEncoding(e.to_string()))?;
    parse_sample(text, source_id)
}

pub fn parse_sample(text: &str, source_id: &str) -> Result<AsmSample, AsmError> {
    let mut in_header = true;
    let mut header_lines: Vec<String> = Vec::new();
    let mut code_lines: Vec<String> = Vec::new();
    let mut line_kinds: Vec<LineKind> = Vec::new();
    let mut inline_comments: BTreeMap<usize, String> = BTreeMap::new();
    // standalone body comments waiting for the next instruction line
    let mut pending: Vec<String> = Vec::new();

    for line in text.lines() {
        let (code, comment) = split_comment(line);
        let code = code.trim_end();
        let body = comment.map(comment_body).filter(|b| !b.is_empty());

        if code.trim().is_empty() {
            if in_header {
                header_lines.push(body.unwrap_or_default().to_string());
            } else if comment.is_some() {
                pending.extend(body.map(str::to_string));
            } else {
                code_lines.push(String::new());
                line_kinds.push(LineKind::Blank);
            }
            continue;
        }

        in_header = false;
        let kind = classify_line(code);
        code_lines.push(code.to_string());
        line_kinds.push(kind);

        let mut parts: Vec<String> = Vec::new();
        if kind == LineKind::Instruction {
            parts.append(&mut pending);
        }
        parts.extend(body.map(str::to_string));
        if !parts.is_empty() {
            inline_comments.insert(code_lines.len(), parts.join("; "));
        }
    }

    while line_kinds.last() == Some(&LineKind::Blank) {
        line_kinds.pop();
        code_lines.pop();
    }
    if code_lines.is_empty() {
        return Err(AsmError::EmptyAfterStrip);
    }

    // comments after the last instruction stay with it
    if !pending.is_empty() {
        let target = line_kinds
            .iter()
            .rposition(|k| *k == LineKind::Instruction)
            .unwrap_or(code_lines.len() - 1)
            + 1;
        let entry = inline_comments.entry(target).or_default();
        let mut parts: Vec<String> = Vec::new();
        if !entry.is_empty() {
            parts.push(std::mem::take(entry));
        }
        parts.append(&mut pending);
        *entry = parts.join("; ");
    }

    let first = header_lines.iter().position(|l| !l.is_empty());
    let last = header_lines.iter().rposition(|l| !l.is_empty());
    let header_comment = match (first, last) {
        (Some(a), Some(b)) => Some(header_lines[a..=b].join("\n")),
        _ => None,
    };

    Ok(AsmSample {
        source_id: source_id.to_string(),
        raw_text: text.to_string(),
        code_lines,
        header_comment,
        inline_comments,
        line_kinds,
    })
}

/// Emits a header block as `;`-prefixed lines.
pub fn header_block(header: &str) -> Vec<String> {
    header
        .lines()
        .map(|l| if l.is_empty() { ";".to_string() } else { format!("; {l}") })
        .collect()
}

pub fn render(sample: &AsmSample, include_header: bool, include_inline: bool) -> String {
    let mut out: Vec<String> = Vec::with_capacity(sample.code_lines.len() + 4);
    if include_header {
        if let Some(header) = &sample.header_comment {
            out.extend(header_block(header));
        }
    }
    for (i, line) in sample.code_lines.iter().enumerate() {
        match sample.inline_comments.get(&(i + 1)) {
            Some(c) if include_inline => out.push(format!("{line} ; {c}")),
            _ => out.push(line.clone()),
        }
    }
    out.join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSample<'a> {
    pub base: &'a AsmSample,
    pub masked_indices: BTreeSet<usize>,
    pub masked_text: String,
}

/// `max(1, round_half_up(fraction * n))`, capped at `n`.
pub fn mask_count(n_instructions: usize, fraction: f64) -> usize {
    let k = (fraction * n_instructions as f64 + 0.5).floor() as usize;
    k.max(1).min(n_instructions)
}

pub fn mask_sample(sample: &AsmSample, fraction: f64, seed: u64) -> Result<MaskedSample<'_>, AsmError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(AsmError::InvalidFraction(fraction));
    }
    let candidates = sample.instruction_lines();
    if candidates.is_empty() {
        return Err(AsmError::NoInstructionLines);
    }
    let k = mask_count(candidates.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked_indices: BTreeSet<usize> = rand::seq::index::sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();

    let masked_text = sample
        .code_lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            if masked_indices.contains(&(i + 1)) {
                let indent_len = line.len() - line.trim_start().len();
                format!("{}{MASK_MARKER}", &line[..indent_len])
            } else {
                line.clone()
            }
        })
        .collect::<Vec<_>>()
        .join("\n");

    Ok(MaskedSample { base: sample, masked_indices, masked_text })
}
