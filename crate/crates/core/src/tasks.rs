//! Alpaca-style fine-tuning records for the five assembly comprehension tasks.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::asm::{mask_sample, render, AsmError, AsmSample};

pub const CODE_INTENT_PROMPT: &str = "Describe the intent of the given snippet of assembly code.";
pub const COMPLETE_THE_CODE_PROMPT: &str =
    "An x86 Assembly code snippet has been partially masked. Complete the code by filling in the lines labeled '# <MASKED>'.";
pub const INLINE_COMMENTS_PROMPT: &str = "Comment the x86 assembly code snippet by generating a structured JSON object where the keys are the integer line numbers (starting at 1) and the values are the string comments. For example: {1: 'comment for line 1', 2: 'comment for line 2', 3: 'comment for line 3'}.";
pub const HEADER_COMMENT_PROMPT: &str = "Write a header comment for this x86 assembly code snippet.";
pub const QA_PROMPT: &str = "Answer the following question about the x86 Assembly Language.";

/// Share of instruction lines hidden in a completion exercise.
pub const COMPLETION_MASK_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    CodeIntent,
    CompleteTheCode,
    InlineComments,
    HeaderComment,
    #[serde(rename = "qa")]
    QA,
}

impl Task {
    pub const ALL: [Task; 5] =
        [Task::CodeIntent, Task::CompleteTheCode, Task::InlineComments, Task::HeaderComment, Task::QA];

    pub fn prompt(self) -> &'static str {
        match self {
            Task::CodeIntent => CODE_INTENT_PROMPT,
            Task::CompleteTheCode => COMPLETE_THE_CODE_PROMPT,
            Task::InlineComments => INLINE_COMMENTS_PROMPT,
            Task::HeaderComment => HEADER_COMMENT_PROMPT,
            Task::QA => QA_PROMPT,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::CodeIntent => "code_intent",
            Task::CompleteTheCode => "complete_the_code",
            Task::InlineComments => "inline_comments",
            Task::HeaderComment => "header_comment",
            Task::QA => "qa",
        }
    }

    /// Recognizes a task from an instruction string, tolerating small wording drift.
    pub fn from_instruction(instruction: &str) -> Option<Task> {
        let norm = instruction.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if let Some(t) = Task::ALL.iter().find(|t| t.prompt().to_lowercase() == norm) {
            return Some(*t);
        }
        const MARKERS: [(&str, Task); 5] = [
            ("describe the intent", Task::CodeIntent),
            ("partially masked", Task::CompleteTheCode),
            ("structured json object", Task::InlineComments),
            ("header comment", Task::HeaderComment),
            ("answer the following question", Task::QA),
        ];
        MARKERS.iter().find(|(m, _)| norm.contains(m)).map(|(_, t)| *t)
    }

    /// Accepts the short CLI/API names as well as the serialized names.
    pub fn parse_name(name: &str) -> Option<Task> {
        match name.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "intent" | "code_intent" | "codeintent" => Some(Task::CodeIntent),
            "complete" | "completion" | "complete_the_code" | "completethecode" => Some(Task::CompleteTheCode),
            "inline" | "inline_comments" | "inlinecomments" => Some(Task::InlineComments),
            "header" | "header_comment" | "headercomment" => Some(Task::HeaderComment),
            "qa" | "q&a" | "question" | "ask" => Some(Task::QA),
            _ => None,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("field `{0}` must not be empty")]
    EmptyField(&'static str),
    #[error("sample has no instruction lines")]
    NoInstructionLines,
    #[error("sample has no inline comments")]
    NoInlineComments,
    #[error("sample has no header comment")]
    NoHeaderComment,
    #[error("record {line}: cannot determine task from instruction {instruction:?}")]
    UnknownTask { line: usize, instruction: String },
    #[error("record {line}: {message}")]
    Json { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AsmError> for TaskError {
    fn from(e: AsmError) -> Self {
        match e {
            AsmError::NoInstructionLines => TaskError::NoInstructionLines,
            other => TaskError::Json { line: 0, message: other.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub task: Task,
    pub source_id: String,
}

impl TaskExample {
    fn new(task: Task, input: String, output: String, source_id: &str) -> Self {
        TaskExample {
            instruction: task.prompt().to_string(),
            input,
            output,
            task,
            source_id: source_id.to_string(),
        }
    }
}

pub fn make_code_intent(sample: &AsmSample, intent: &str) -> Result<TaskExample, TaskError> {
    if intent.trim().is_empty() {
        return Err(TaskError::EmptyField("intent"));
    }
    Ok(TaskExample::new(Task::CodeIntent, render(sample, false, false), intent.to_string(), &sample.source_id))
}

pub fn make_complete_the_code(sample: &AsmSample, seed: u64) -> Result<TaskExample, TaskError> {
    let masked = mask_sample(sample, COMPLETION_MASK_FRACTION, seed)?;
    Ok(TaskExample::new(
        Task::CompleteTheCode,
        masked.masked_text,
        render(sample, false, false),
        &sample.source_id,
    ))
}

pub fn make_inline_comments(sample: &AsmSample) -> Result<TaskExample, TaskError> {
    if sample.inline_comments.is_empty() {
        return Err(TaskError::NoInlineComments);
    }
    Ok(TaskExample::new(
        Task::InlineComments,
        render(sample, false, false),
        emit_comment_json(&sample.inline_comments),
        &sample.source_id,
    ))
}

pub fn make_header_comment(sample: &AsmSample) -> Result<TaskExample, TaskError> {
    let header = sample.header_comment.as_deref().ok_or(TaskError::NoHeaderComment)?;
    Ok(TaskExample::new(Task::HeaderComment, render(sample, false, false), header.to_string(), &sample.source_id))
}

pub fn make_qa(question: &str, answer: &str, source_id: &str) -> Result<TaskExample, TaskError> {
    if question.trim().is_empty() {
        return Err(TaskError::EmptyField("question"));
    }
    if answer.trim().is_empty() {
        return Err(TaskError::EmptyField("answer"));
    }
    Ok(TaskExample::new(Task::QA, question.to_string(), answer.to_string(), source_id))
}

/// Strict JSON for a line -> comment map: string keys in ascending numeric order.
pub fn emit_comment_json(comments: &BTreeMap<usize, String>) -> String {
    let body = comments
        .iter()
        .map(|(line, text)| {
            let value = serde_json::to_string(text).expect("string serialization is infallible");
            format!("\"{line}\": {value}")
        })
        .collect::<Vec<_>>()
        .join(", ");
    format!("{{{body}}}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub seed: u64,
}

impl DatasetSplit {
    pub const RATIOS: (f64, f64, f64) = (0.70, 0.10, 0.20);
}

/// (train, validation, test) sizes for `n` records of one task.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 7 / 10;
    let validation = n / 10;
    (train, validation, n - train - validation)
}

pub fn stratified_split(dataset: &[TaskExample], seed: u64) -> DatasetSplit {
    let mut split = DatasetSplit { train: Vec::new(), validation: Vec::new(), test: Vec::new(), seed };
    for (i, task) in Task::ALL.iter().enumerate() {
        let mut group: Vec<TaskExample> = dataset.iter().filter(|e| e.task == *task).cloned().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        group.shuffle(&mut rng);
        let (n_train, n_val, _) = split_sizes(group.len());
        let mut rest = group.split_off(n_train);
        let test = rest.split_off(n_val);
        split.train.extend(group);
        split.validation.extend(rest);
        split.test.extend(test);
    }
    split
}

pub fn dataset_stats(dataset: &[TaskExample]) -> BTreeMap<Task, usize> {
    let mut counts: BTreeMap<Task, usize> = Task::ALL.iter().map(|t| (*t, 0)).collect();
    for e in dataset {
        *counts.entry(e.task).or_default() += 1;
    }
    counts
}

#[derive(Deserialize)]
struct LooseRecord {
    instruction: String,
    #[serde(default)]
    input: String,
    output: String,
    #[serde(default)]
    task: Option<Task>,
    #[serde(default)]
    source_id: Option<String>,
}

impl LooseRecord {
    fn into_example(self, line: usize) -> Result<TaskExample, TaskError> {
        let task = match self.task.or_else(|| Task::from_instruction(&self.instruction)) {
            Some(t) => t,
            None => return Err(TaskError::UnknownTask { line, instruction: self.instruction }),
        };
        Ok(TaskExample {
            instruction: self.instruction,
            input: self.input,
            output: self.output,
            task,
            source_id: self.source_id.unwrap_or_default(),
        })
    }
}

/// Reads records from JSON-lines, or from a single JSON array when the text starts with `[`.
/// Records without `task` get one inferred from their instruction.
pub fn read_examples(reader: impl BufRead) -> Result<Vec<TaskExample>, TaskError> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    if text.trim_start().starts_with('[') {
        let records: Vec<LooseRecord> =
            serde_json::from_str(&text).map_err(|e| TaskError::Json { line: e.line(), message: e.to_string() })?;
        return records.into_iter().enumerate().map(|(i, r)| r.into_example(i + 1)).collect();
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: LooseRecord =
            serde_json::from_str(line).map_err(|e| TaskError::Json { line: i + 1, message: e.to_string() })?;
        out.push(record.into_example(i + 1)?);
    }
    Ok(out)
}

pub fn write_jsonl(mut writer: impl Write, examples: &[TaskExample]) -> Result<(), TaskError> {
    for e in examples {
        serde_json::to_writer(&mut writer, e).map_err(|e| TaskError::Json { line: 0, message: e.to_string() })?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Instruction sent after a manual section to extract question/answer pairs.
pub const QA_EXTRACTION_PROMPT: &str = r#"The above text is an excerpt from a section of an x86 Assembly Language manual. Your job is to extract a set of up to 5 question-and-answer pairs.
Five questions is an upper limit, but it is not necessary to generate five questions if the content does not support it.
The questions should be answerable without knowing what manual the questions are based on.

**Important Restrictions**:
- The questions should strictly focus on the **technical content** in the section.
- Do **not** generate questions about the manual itself (e.g., its purpose, target audience, structure, or authorship).
- Do **not** reference the manual in any form (e.g., avoid phrases like "this guide", "this manual", "this section", or "this document").
- The questions must **only** ask about the actual concepts, instructions, or principles found in the provided section.

**Guidelines**:
1. **Relevance**:
   - Ensure questions are strictly about the **technical content** in the section.
   - Do **not** generate questions regarding the **manual itself** (e.g., its focus, purpose, or intended audience).
   - Example of what **NOT** to ask: "What is the purpose of this manual?"
   - Example of a **good question**: "What are the different types of MOV instructions in x86 assembly?"
2. **Language Use**:
   - Formulate **clear and concise** questions.
   - Answers must use language from the section as much as possible to maintain accuracy and context.
3. **Answer Quality**
   - Answers must be **detailed** and provide **comprehensive** explanations.
   - The length of answers should vary based on the complexity of the question."#;

/// Output format requested from the extraction model.
pub const QA_FORMAT_INSTRUCTION: &str =
    "Format each pair as a numbered block, one field per line:\n1. Q: <question>\n   A: <answer>";

pub const QA_FORBIDDEN_PHRASES: [&str; 4] = ["this manual", "this section", "this guide", "this document"];

/// Full extraction request for one section: the section text first, then the instructions.
pub fn qa_extraction_request(section_text: &str) -> String {
    format!("{}\n\n{QA_EXTRACTION_PROMPT}\n\n{QA_FORMAT_INSTRUCTION}", section_text.trim_end())
}

/// Parses numbered `Q:` / `A:` blocks. Returns `None` if the text has no such structure.
pub fn parse_qa_pairs(response: &str) -> Option<Vec<(String, String)>> {
    static MARKER: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    let marker = MARKER.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:\d+\s*[.):-]\s*)?[*_#\s]*(q|a)(?:uestion|nswer)?\s*\d*\s*[*_]*\s*[:.)-]\s*[*_]*\s*(.*)$")
            .expect("static regex")
    });

    enum Field {
        None,
        Question,
        Answer,
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut question = String::new();
    let mut answer = String::new();
    let mut field = Field::None;
    let mut saw_marker = false;

    let flush = |q: &mut String, a: &mut String, pairs: &mut Vec<(String, String)>| {
        let q2 = clean_markdown(q);
        let a2 = clean_markdown(a);
        if !q2.is_empty() && !a2.is_empty() {
            pairs.push((q2, a2));
        }
        q.clear();
        a.clear();
    };

    for line in response.lines() {
        if let Some(caps) = marker.captures(line) {
            saw_marker = true;
            let rest = caps.get(2).map_or("", |m| m.as_str());
            if caps[1].eq_ignore_ascii_case("q") {
                flush(&mut question, &mut answer, &mut pairs);
                question.push_str(rest);
                field = Field::Question;
            } else {
                answer.clear();
                answer.push_str(rest);
                field = Field::Answer;
            }
            continue;
        }
        let target = match field {
            Field::Question => &mut question,
            Field::Answer => &mut answer,
            Field::None => continue,
        };
        if !line.trim().is_empty() {
            if !target.is_empty() {
                target.push('\n');
            }
            target.push_str(line.trim());
        }
    }
    flush(&mut question, &mut answer, &mut pairs);
    saw_marker.then_some(pairs)
}

fn clean_markdown(s: &str) -> String {
    s.trim().trim_matches(|c| c == '*' || c == '_').trim().to_string()
}

pub fn mentions_source_document(text: &str) -> bool {
    let lower = text.to_lowercase();
    QA_FORBIDDEN_PHRASES.iter().any(|p| lower.contains(p))
}

/// Drops pairs that refer to the manual itself and keeps at most `max_pairs`.
pub fn filter_qa_pairs(pairs: Vec<(String, String)>, max_pairs: usize) -> Vec<(String, String)> {
    pairs
        .into_iter()
        .filter(|(q, a)| !mentions_source_document(q) && !mentions_source_document(a))
        .take(max_pairs)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asm::parse_sample;

    fn sample(text: &str) -> AsmSample {
        parse_sample(text, "s1").unwrap()
    }

    #[test]
    fn intent_record() {
        let s = sample("; header\nxor eax, eax ; zero\nret");
        let e = make_code_intent(&s, "clear eax and return").unwrap();
        assert_eq!(e.instruction, CODE_INTENT_PROMPT);
        assert_eq!(e.input, "xor eax, eax\nret");
        assert!(!e.input.contains(';'));
        assert!(matches!(make_code_intent(&s, "  "), Err(TaskError::EmptyField("intent"))));
    }

    #[test]
    fn completion_record() {
        let s = sample("main:\n  mov eax, 1\n  mov ebx, 2\n  add eax, ebx\n  ret");
        let e = make_complete_the_code(&s, 3).unwrap();
        assert_eq!(e.input.matches("# <MASKED>").count(), 1);
        assert_eq!(e.output, render(&s, false, false));
        assert!(!e.output.contains("# <MASKED>"));
        let other = make_complete_the_code(&s, 4).unwrap();
        assert_eq!(other.output, e.output);
    }

    #[test]
    fn inline_record_is_strict_json() {
        let s = sample("mov eax,1 ; set");
        let e = make_inline_comments(&s).unwrap();
        assert_eq!(e.output, r#"{"1": "set"}"#);
        let s = sample("nop ; a\nnop\nnop\nnop\nnop\nnop\nnop\nnop\nnop\nnop ; ten\nnop ; \"q\"");
        let out = make_inline_comments(&s).unwrap().output;
        assert_eq!(out, r#"{"1": "a", "10": "ten", "11": "\"q\""}"#);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["10"], "ten");
        assert!(matches!(make_inline_comments(&sample("nop")), Err(TaskError::NoInlineComments)));
    }

    #[test]
    fn header_record() {
        let s = sample(";; Swap two registers\n;; without a temporary\nxchg eax, ebx");
        let e = make_header_comment(&s).unwrap();
        assert_eq!(e.output, "Swap two registers\nwithout a temporary");
        assert!(!e.output.contains(';'));
        assert!(matches!(make_header_comment(&sample("nop")), Err(TaskError::NoHeaderComment)));
    }

    #[test]
    fn qa_record() {
        let e = make_qa(
            "What does the MOVZX instruction do?",
            "It copies a smaller source operand into a larger destination and fills the upper bits with zeros.",
            "manual-excerpt",
        )
        .unwrap();
        assert_eq!(e.instruction, QA_PROMPT);
        assert!(matches!(make_qa("", "x", "s"), Err(TaskError::EmptyField("question"))));
        assert!(matches!(make_qa("q", " \t\n", "s"), Err(TaskError::EmptyField("answer"))));
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        assert_eq!(split_sizes(193), (135, 19, 39));
        assert_eq!(split_sizes(2877), (2013, 287, 577));
        assert_eq!(split_sizes(0), (0, 0, 0));
        assert_eq!(split_sizes(1), (0, 0, 1));
    }

    #[test]
    fn stats_counts() {
        assert!(dataset_stats(&[]).values().all(|c| *c == 0));
        let one = make_qa("q?", "a", "s").unwrap();
        let stats = dataset_stats(&[one]);
        assert_eq!(stats[&Task::QA], 1);
        assert_eq!(stats.values().sum::<usize>(), 1);
    }

    #[test]
    fn task_inference() {
        for t in Task::ALL {
            assert_eq!(Task::from_instruction(t.prompt()), Some(t));
        }
        assert_eq!(Task::from_instruction("  Write a header comment for this x86 assembly code snippet"), Some(Task::HeaderComment));
        assert_eq!(Task::from_instruction("Translate to French"), None);
    }

    #[test]
    fn reads_alpaca_array_without_task_field() {
        let text = format!(
            r#"[{{"instruction": "{}", "input": "", "output": "x"}}, {{"instruction": "{}", "input": "nop", "output": "does nothing"}}]"#,
            QA_PROMPT, CODE_INTENT_PROMPT
        );
        let ex = read_examples(text.as_bytes()).unwrap();
        assert_eq!(ex[0].task, Task::QA);
        assert_eq!(ex[1].task, Task::CodeIntent);
    }

    #[test]
    fn jsonl_round_trip() {
        let s = sample("; h\nnop ; c\nret");
        let examples = vec![
            make_header_comment(&s).unwrap(),
            make_inline_comments(&s).unwrap(),
            make_complete_the_code(&s, 1).unwrap(),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &examples).unwrap();
        assert_eq!(read_examples(buf.as_slice()).unwrap(), examples);
        let first_line = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert!(first_line.starts_with(r#"{"instruction":"#));
        assert!(first_line.contains(r#""task":"header_comment","source_id":"s1""#));
    }

    #[test]
    fn parses_numbered_qa_blocks() {
        let resp = "Here are the pairs:\n\n1. Q: What does MOV do?\n   A: It copies data\n   from source to destination.\n\n2. **Q:** What is this manual about?\n   **A:** Assembly.\n3. Question: Which register holds the loop count for LOOP?\nAnswer: ECX.";
        let pairs = parse_qa_pairs(resp).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].0, "What does MOV do?");
        assert_eq!(pairs[0].1, "It copies data\nfrom source to destination.");
        assert_eq!(pairs[2].1, "ECX.");
        let kept = filter_qa_pairs(pairs, 5);
        assert_eq!(kept.len(), 2);
        assert!(kept.iter().all(|(q, _)| !q.contains("this manual")));
        assert!(parse_qa_pairs("I cannot help with that.").is_none());
    }

    #[test]
    fn extraction_request_prepends_section() {
        let req = qa_extraction_request("MOV copies data.");
        assert!(req.starts_with("MOV copies data.\n\nThe above text is an excerpt"));
        assert!(req.contains("up to 5 question-and-answer pairs"));
    }
}
