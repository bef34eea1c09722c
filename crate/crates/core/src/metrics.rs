//! Evaluation metrics: length-normalized cross-entropy and embedding cosine similarity.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tasks::Task;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no sequences to score")]
    EmptyInput,
    #[error("sequence has no reference tokens")]
    EmptySequence,
    #[error("token texts ({texts}) and logprobs ({logprobs}) differ in length")]
    LengthMismatch { texts: usize, logprobs: usize },
    #[error("log-probability {0} is positive or not finite")]
    InvalidLogprob(f64),
    #[error("cannot take the cosine of a zero vector")]
    ZeroVector,
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("reports come from different splits: {0} vs {1}")]
    SplitMismatch(String, String),
    #[error("base value for {0} is zero")]
    DivisionByZero(&'static str),
    #[error("every example failed; nothing to aggregate")]
    AllExamplesFailed,
}

/// Teacher-forced log-probabilities of a reference continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    token_texts: Vec<String>,
    token_logprobs: Vec<f64>,
}

impl ScoredSequence {
    pub fn new(token_texts: Vec<String>, token_logprobs: Vec<f64>) -> Result<Self, MetricError> {
        if token_texts.len() != token_logprobs.len() {
            return Err(MetricError::LengthMismatch { texts: token_texts.len(), logprobs: token_logprobs.len() });
        }
        if token_logprobs.is_empty() {
            return Err(MetricError::EmptySequence);
        }
        if let Some(bad) = token_logprobs.iter().find(|lp| !lp.is_finite() || **lp > 0.0) {
            return Err(MetricError::InvalidLogprob(*bad));
        }
        Ok(ScoredSequence { token_texts, token_logprobs })
    }

    pub fn token_texts(&self) -> &[String] {
        &self.token_texts
    }

    pub fn token_logprobs(&self) -> &[f64] {
        &self.token_logprobs
    }

    /// Number of reference tokens.
    pub fn len(&self) -> usize {
        self.token_logprobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_logprobs.is_empty()
    }

    /// Mean negative log-probability over this sequence's tokens, in nats.
    pub fn mean_nll(&self) -> f64 {
        -self.token_logprobs.iter().sum::<f64>() / self.len() as f64
    }
}

/// Mean over sequences of each sequence's mean negative token log-probability.
///
/// Every sequence carries equal weight regardless of its length; this is not the
/// token-weighted mean over the concatenation.
pub fn cross_entropy(scored: &[ScoredSequence]) -> Result<f64, MetricError> {
    if scored.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    Ok(scored.iter().map(ScoredSequence::mean_nll).sum::<f64>() / scored.len() as f64)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(MetricError::ZeroVector);
    }
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

/// Prompt layout shared by scoring and generation. The input block is dropped when empty.
pub fn alpaca_prompt(instruction: &str, input: &str) -> String {
    const PREAMBLE: &str = "Below is an instruction that describes a task, paired with an input that provides further context. Write a response that appropriately completes the request.";
    if input.is_empty() {
        format!("{PREAMBLE}\n\n### Instruction:\n{instruction}\n\n### Response:\n")
    } else {
        format!("{PREAMBLE}\n\n### Instruction:\n{instruction}\n\n### Input:\n{input}\n\n### Response:\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub example_id: usize,
    pub task: Task,
    pub ce: f64,
    pub cossim: f64,
    pub generated_text: String,
    pub reference_text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalFailure {
    pub example_id: usize,
    pub task: Task,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model_name: String,
    pub split_id: String,
    pub overall_ce: f64,
    pub overall_cossim: f64,
    pub per_task_ce: BTreeMap<Task, f64>,
    pub per_task_cossim: BTreeMap<Task, f64>,
    /// Number of successfully scored sequences.
    #[serde(rename = "N")]
    pub n: usize,
    pub failed: usize,
    pub records: Vec<EvalRecord>,
    pub failures: Vec<EvalFailure>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    sum / count as f64
}

impl EvalReport {
    /// Aggregates per-example records; failures are counted but excluded from every mean.
    pub fn aggregate(
        model_name: &str,
        split_id: &str,
        mut records: Vec<EvalRecord>,
        mut failures: Vec<EvalFailure>,
    ) -> Result<EvalReport, MetricError> {
        if records.is_empty() {
            return Err(MetricError::AllExamplesFailed);
        }
        records.sort_by_key(|r| r.example_id);
        failures.sort_by_key(|f| f.example_id);

        let mut per_task_ce = BTreeMap::new();
        let mut per_task_cossim = BTreeMap::new();
        for task in Task::ALL {
            let of_task: Vec<&EvalRecord> = records.iter().filter(|r| r.task == task).collect();
            if !of_task.is_empty() {
                per_task_ce.insert(task, mean(of_task.iter().map(|r| r.ce)));
                per_task_cossim.insert(task, mean(of_task.iter().map(|r| r.cossim)));
            }
        }
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            model_name: model_name.to_string(),
            split_id: split_id.to_string(),
            overall_ce: mean(records.iter().map(|r| r.ce)),
            overall_cossim: mean(records.iter().map(|r| r.cossim)),
            per_task_ce,
            per_task_cossim,
            n: records.len(),
            failed: failures.len(),
            records,
            failures,
        })
    }
}

/// Relative change of the tuned model against the base, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub ce_pct: f64,
    pub cossim_pct: f64,
}

pub fn relative_change_pct(base: f64, tuned: f64, what: &'static str) -> Result<f64, MetricError> {
    if base == 0.0 {
        return Err(MetricError::DivisionByZero(what));
    }
    Ok(100.0 * (tuned - base) / base)
}

pub fn compare_reports(base: &EvalReport, tuned: &EvalReport) -> Result<ReportDelta, MetricError> {
    if base.split_id != tuned.split_id {
        return Err(MetricError::SplitMismatch(base.split_id.clone(), tuned.split_id.clone()));
    }
    Ok(ReportDelta {
        ce_pct: relative_change_pct(base.overall_ce, tuned.overall_ce, "ce")?,
        cossim_pct: relative_change_pct(base.overall_cossim, tuned.overall_cossim, "cossim")?,
    })
}

/// Fine-tuning hyperparameters handed to an external training framework.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: u32,
    pub batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub optimizer: String,
    pub warmup_steps: u32,
    pub eval_steps: u32,
    pub lora_rank: u32,
    pub lora_alpha: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 3,
            batch_size: 4,
            gradient_accumulation_steps: 4,
            weight_decay: 0.01,
            learning_rate: 0.0001,
            optimizer: "adamw_8bit".to_string(),
            warmup_steps: 50,
            eval_steps: 10,
            lora_rank: 32,
            lora_alpha: 64,
        }
    }
}

impl TrainingConfig {
    pub fn to_yaml(&self) -> String {
        format!(
            "# LoRA fine-tuning hyperparameters\n\
             epochs: {}\n\
             batch_size: {}\n\
             gradient_accumulation_steps: {}\n\
             weight_decay: {}\n\
             learning_rate: {}\n\
             optimizer: {}\n\
             warmup_steps: {}\n\
             eval_steps: {}\n\
             lora_rank: {}\n\
             lora_alpha: {}\n",
            self.epochs,
            self.batch_size,
            self.gradient_accumulation_steps,
            self.weight_decay,
            self.learning_rate,
            self.optimizer,
            self.warmup_steps,
            self.eval_steps,
            self.lora_rank,
            self.lora_alpha,
        )
    }
}

pub fn emit_training_config(out_path: &Path) -> std::io::Result<()> {
    std::fs::write(out_path, TrainingConfig::default().to_yaml())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(lps: &[f64]) -> ScoredSequence {
        ScoredSequence::new(lps.iter().map(|_| "t".to_string()).collect(), lps.to_vec()).unwrap()
    }

    #[test]
    fn ce_closed_forms() {
        assert_eq!(cross_entropy(&[seq(&[0.0, 0.0, 0.0])]).unwrap(), 0.0);
        let uniform4 = -(0.25f64).ln();
        let ce = cross_entropy(&[seq(&[-uniform4; 6])]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        let ce = cross_entropy(&[seq(&[-0.5, -1.5]), seq(&[-3.0])]).unwrap();
        assert!((ce - 2.0).abs() < 1e-12);
        assert_eq!(cross_entropy(&[]), Err(MetricError::EmptyInput));
    }

    #[test]
    fn ce_is_not_token_weighted() {
        // token-weighted mean would be (0.5 + 1.5 + 3.0) / 3
        let ce = cross_entropy(&[seq(&[-0.5, -1.5]), seq(&[-3.0])]).unwrap();
        assert!((ce - 5.0 / 3.0).abs() > 0.3);
    }

    #[test]
    fn scored_sequence_validation() {
        assert_eq!(ScoredSequence::new(vec![], vec![]), Err(MetricError::EmptySequence));
        assert!(matches!(
            ScoredSequence::new(vec!["a".into()], vec![-1.0, -2.0]),
            Err(MetricError::LengthMismatch { .. })
        ));
        assert_eq!(ScoredSequence::new(vec!["a".into()], vec![0.5]), Err(MetricError::InvalidLogprob(0.5)));
    }

    #[test]
    fn cosine_basic_cases() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(MetricError::ZeroVector));
        assert_eq!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(MetricError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn alpaca_template_layout() {
        let p = alpaca_prompt("Do X.", "nop");
        assert!(p.ends_with("### Instruction:\nDo X.\n\n### Input:\nnop\n\n### Response:\n"));
        let p = alpaca_prompt("Do X.", "");
        assert!(!p.contains("### Input"));
        assert!(p.ends_with("### Instruction:\nDo X.\n\n### Response:\n"));
    }

    fn report(ce: f64, cos: f64, split: &str) -> EvalReport {
        let rec = EvalRecord {
            example_id: 0,
            task: Task::QA,
            ce,
            cossim: cos,
            generated_text: String::new(),
            reference_text: String::new(),
            token_count: 1,
        };
        EvalReport::aggregate("m", split, vec![rec], vec![]).unwrap()
    }

    #[test]
    fn compare_published_row() {
        let d = compare_reports(&report(1.50482, 0.55608, "s"), &report(0.53901, 0.66890, "s")).unwrap();
        assert!((d.ce_pct - -64.2).abs() <= 0.05, "{}", d.ce_pct);
        assert!((d.cossim_pct - 20.3).abs() <= 0.05, "{}", d.cossim_pct);
        let same = compare_reports(&report(1.0, 0.5, "s"), &report(1.0, 0.5, "s")).unwrap();
        assert_eq!((same.ce_pct, same.cossim_pct), (0.0, 0.0));
        assert!(matches!(compare_reports(&report(1.0, 0.5, "a"), &report(1.0, 0.5, "b")), Err(MetricError::SplitMismatch(..))));
        assert_eq!(
            compare_reports(&report(0.0, 0.5, "s"), &report(1.0, 0.5, "s")),
            Err(MetricError::DivisionByZero("ce"))
        );
    }

    #[test]
    fn aggregate_requires_a_record() {
        let f = EvalFailure { example_id: 0, task: Task::QA, error: "boom".into() };
        assert_eq!(EvalReport::aggregate("m", "s", vec![], vec![f]), Err(MetricError::AllExamplesFailed));
    }

    #[test]
    fn training_config_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.yaml");
        emit_training_config(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        for line in [
            "learning_rate: 0.0001",
            "epochs: 3",
            "batch_size: 4",
            "gradient_accumulation_steps: 4",
            "weight_decay: 0.01",
            "warmup_steps: 50",
            "eval_steps: 10",
            "optimizer: adamw_8bit",
            "lora_rank: 32",
            "lora_alpha: 64",
        ] {
            assert!(text.lines().any(|l| l == line), "missing {line}");
        }
    }
}
