//! Model-output handling for annotation requests: lenient parsing of
//! line -> comment maps, applying results back onto a listing, and splitting
//! long listings into overlapping windows.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::asm::{classify_line, header_block, split_comment, AsmSample, LineKind};
use crate::tasks::Task;

/// Column at which applied inline comments start (tabs count as 8).
pub const COMMENT_COLUMN: usize = 40;
pub const CHUNK_MAX_LINES: usize = 120;
pub const CHUNK_OVERLAP: usize = 10;

const MAX_CANDIDATES: usize = 64;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum CommentParseError {
    #[error("no JSON object found in response")]
    NoJsonObjectFound,
    #[error("unbalanced braces in response")]
    UnbalancedBraces,
    #[error("malformed object: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedComments {
    pub comments: BTreeMap<usize, String>,
    /// Keys that were out of range or not integers.
    pub dropped: usize,
}

fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut escaped = false;
    for (i, &c) in bytes.iter().enumerate().skip(start) {
        if let Some(q) = quote {
            if escaped {
                escaped = false;
            } else if c == b'\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            b'"' | b'\'' => quote = Some(c),
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

struct ObjectParser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

enum Key {
    Line(i64),
    Invalid,
}

impl<'a> ObjectParser<'a> {
    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn expect(&mut self, want: char) -> Result<(), CommentParseError> {
        self.skip_ws();
        match self.chars.next() {
            Some(c) if c == want => Ok(()),
            other => Err(CommentParseError::Malformed(format!("expected `{want}`, found {other:?}"))),
        }
    }

    fn string(&mut self, quote: char) -> Result<String, CommentParseError> {
        let mut out = String::new();
        while let Some(c) = self.chars.next() {
            match c {
                c if c == quote => return Ok(out),
                '\\' => match self.chars.next() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some('r') => out.push('\r'),
                    Some('b') => out.push('\u{8}'),
                    Some('f') => out.push('\u{c}'),
                    Some('u') => out.push(self.unicode_escape()?),
                    Some(other) => out.push(other),
                    None => break,
                },
                c => out.push(c),
            }
        }
        Err(CommentParseError::Malformed("unterminated string".into()))
    }

    fn hex4(&mut self) -> Result<u32, CommentParseError> {
        let digits: String = (0..4).filter_map(|_| self.chars.next()).collect();
        u32::from_str_radix(&digits, 16).map_err(|_| CommentParseError::Malformed(format!("bad escape \\u{digits}")))
    }

    fn unicode_escape(&mut self) -> Result<char, CommentParseError> {
        let hi = self.hex4()?;
        if (0xD800..0xDC00).contains(&hi) {
            let mut lookahead = self.chars.clone();
            if lookahead.next() == Some('\\') && lookahead.next() == Some('u') {
                self.chars.next();
                self.chars.next();
                let lo = self.hex4()?;
                let code = 0x10000 + ((hi - 0xD800) << 10) + (lo.wrapping_sub(0xDC00) & 0x3FF);
                return Ok(char::from_u32(code).unwrap_or('\u{FFFD}'));
            }
        }
        Ok(char::from_u32(hi).unwrap_or('\u{FFFD}'))
    }

    fn bare(&mut self) -> String {
        let mut out = String::new();
        while let Some(&c) = self.chars.peek() {
            if c == ':' || c == ',' || c == '}' || c.is_whitespace() {
                break;
            }
            out.push(c);
            self.chars.next();
        }
        out
    }

    fn key(&mut self) -> Result<Key, CommentParseError> {
        self.skip_ws();
        let raw = match self.chars.peek() {
            Some(&q @ ('"' | '\'')) => {
                self.chars.next();
                self.string(q)?
            }
            Some(_) => self.bare(),
            None => return Err(CommentParseError::Malformed("unexpected end".into())),
        };
        Ok(raw.trim().parse::<i64>().map_or(Key::Invalid, Key::Line))
    }

    fn value(&mut self) -> Result<Option<String>, CommentParseError> {
        self.skip_ws();
        match self.chars.peek() {
            Some(&q @ ('"' | '\'')) => {
                self.chars.next();
                self.string(q).map(Some)
            }
            Some('{' | '[') => Err(CommentParseError::Malformed("nested values are not comments".into())),
            Some(_) => {
                let token = self.bare();
                match token.as_str() {
                    "" => Err(CommentParseError::Malformed("missing value".into())),
                    "null" => Ok(None),
                    _ => Ok(Some(token)),
                }
            }
            None => Err(CommentParseError::Malformed("unexpected end".into())),
        }
    }

    fn object(mut self, line_count: usize) -> Result<ParsedComments, CommentParseError> {
        let mut parsed = ParsedComments::default();
        self.expect('{')?;
        loop {
            self.skip_ws();
            if self.chars.peek() == Some(&'}') {
                self.chars.next();
                return Ok(parsed);
            }
            let key = self.key()?;
            self.expect(':')?;
            let value = self.value()?;
            match key {
                Key::Line(k) if k >= 1 && (k as u64) <= line_count as u64 => {
                    if let Some(v) = value.map(|v| v.trim().to_string()).filter(|v| !v.is_empty()) {
                        parsed.comments.insert(k as usize, v);
                    }
                }
                _ => parsed.dropped += 1,
            }
            self.skip_ws();
            match self.chars.next() {
                Some(',') => continue,
                Some('}') => return Ok(parsed),
                other => return Err(CommentParseError::Malformed(format!("expected `,` or `}}`, found {other:?}"))),
            }
        }
    }
}

/// Extracts a line -> comment map from free-form model output.
///
/// Accepts strict JSON as well as single-quoted strings, bare integer keys,
/// trailing commas, and surrounding prose or code fences. Keys outside
/// `1..=line_count` (or not integers) are dropped and counted.
pub fn parse_line_comment_json(text: &str, line_count: usize) -> Result<ParsedComments, CommentParseError> {
    let bytes = text.as_bytes();
    let mut first_error: Option<CommentParseError> = None;
    let mut any_balanced = false;
    for (start, _) in text.match_indices('{').take(MAX_CANDIDATES) {
        let Some(end) = balanced_end(bytes, start) else {
            first_error.get_or_insert(CommentParseError::UnbalancedBraces);
            continue;
        };
        any_balanced = true;
        let parser = ObjectParser { chars: text[start..=end].chars().peekable() };
        match parser.object(line_count) {
            Ok(parsed) => return Ok(parsed),
            Err(e) => {
                if first_error == Some(CommentParseError::UnbalancedBraces) {
                    first_error = Some(e);
                } else {
                    first_error.get_or_insert(e);
                }
            }
        }
    }
    match first_error {
        None => Err(CommentParseError::NoJsonObjectFound),
        Some(CommentParseError::UnbalancedBraces) if any_balanced => {
            Err(CommentParseError::Malformed("no candidate object parsed".into()))
        }
        Some(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotationOptions {
    pub temperature: f64,
    pub max_tokens: u32,
    pub retries_on_malformed: u32,
}

impl Default for AnnotationOptions {
    fn default() -> Self {
        AnnotationOptions { temperature: 0.2, max_tokens: 1024, retries_on_malformed: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    pub task: Task,
    /// Listing to annotate, or the question text for Q&A.
    pub code: String,
    #[serde(default)]
    pub options: AnnotationOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    pub task: Task,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_comments: Option<BTreeMap<usize, String>>,
    pub raw_response: String,
    pub attempts: u32,
    #[serde(default)]
    pub dropped_keys: usize,
    /// The text whose lines the comment keys refer to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listing: Option<String>,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ApplyError {
    #[error("only header and inline-comment results can be applied, got {0}")]
    TaskMismatch(Task),
}

fn strip_delimiters(line: &str) -> &str {
    line.trim().trim_start_matches([';', '#']).trim()
}

/// Header text as it will survive a render/parse cycle, or `None` if nothing is left.
pub fn normalize_header(text: &str) -> Option<String> {
    let lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .map(strip_delimiters)
        .collect();
    let first = lines.iter().position(|l| !l.is_empty())?;
    let last = lines.iter().rposition(|l| !l.is_empty())?;
    Some(lines[first..=last].join("\n"))
}

pub fn normalize_inline(text: &str) -> String {
    let flat: String = text.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
    strip_delimiters(&flat).to_string()
}

fn display_width(s: &str) -> usize {
    s.chars().fold(0, |w, c| if c == '\t' { (w / 8 + 1) * 8 } else { w + 1 })
}

fn accepts_trailing_comment(line: &str) -> bool {
    split_comment(&format!("{line} ;")).1.is_some()
}

/// Renders `sample` with the header or inline comments from `res` written in.
///
/// Output parses back to a sample that yields the same text when the same
/// result is applied again.
pub fn apply_annotations(sample: &AsmSample, res: &AnnotationResult) -> Result<String, ApplyError> {
    let mut s = sample.clone();
    match res.task {
        Task::HeaderComment => {
            if let Some(header) = res.text.as_deref().and_then(normalize_header) {
                s.header_comment = Some(header);
            }
        }
        Task::InlineComments => {
            for (line, comment) in res.line_comments.iter().flatten() {
                let Some(kind) = line.checked_sub(1).and_then(|i| s.line_kinds.get(i)) else {
                    continue;
                };
                let comment = normalize_inline(comment);
                if *kind == LineKind::Blank || comment.is_empty() || !accepts_trailing_comment(&s.code_lines[line - 1]) {
                    continue;
                }
                s.inline_comments.insert(*line, comment);
            }
        }
        other => return Err(ApplyError::TaskMismatch(other)),
    }
    Ok(render_aligned(&s))
}

/// Like `render(sample, true, true)` but with inline comments padded to [`COMMENT_COLUMN`].
pub fn render_aligned(sample: &AsmSample) -> String {
    let mut out: Vec<String> = sample.header_comment.as_deref().map(header_block).unwrap_or_default();
    for (i, line) in sample.code_lines.iter().enumerate() {
        match sample.inline_comments.get(&(i + 1)) {
            Some(c) => {
                let pad = COMMENT_COLUMN.saturating_sub(display_width(line));
                out.push(format!("{line}{} ; {c}", " ".repeat(pad)));
            }
            None => out.push(line.clone()),
        }
    }
    out.join("\n")
}

/// Splits `lines` into windows of at most `max_lines`, overlapping by `overlap`.
/// A window is cut just before a label when one falls in its back half.
pub fn chunk_ranges(lines: &[&str], max_lines: usize, overlap: usize) -> Vec<Range<usize>> {
    let n = lines.len();
    if n <= max_lines {
        return std::iter::once(0..n).collect();
    }
    assert!(max_lines / 2 > overlap, "overlap must be smaller than half a window");
    let is_label: Vec<bool> =
        lines.iter().map(|l| classify_line(split_comment(l).0) == LineKind::Label).collect();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let hard_end = (start + max_lines).min(n);
        if hard_end == n {
            out.push(start..n);
            return out;
        }
        let end = (start + max_lines / 2 + 1..=hard_end).rev().find(|e| is_label[*e]).unwrap_or(hard_end);
        out.push(start..end);
        start = end - overlap;
    }
}
