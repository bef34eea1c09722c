use asmscribe_core::metrics::{alpaca_prompt, cosine_similarity, EvalFailure, EvalRecord, EvalReport};
use asmscribe_core::tasks::TaskExample;
use futures::stream::{self, StreamExt};

use crate::client::{InferenceClient, LlmError, Sampling};

pub const DEFAULT_GENERATION_TOKENS: u32 = 512;

async fn evaluate_one(
    gen: &InferenceClient,
    embedder: &InferenceClient,
    ex: &TaskExample,
    example_id: usize,
    max_tokens: u32,
) -> Result<EvalRecord, LlmError> {
    let prompt = alpaca_prompt(&ex.instruction, &ex.input);
    let scored = gen.score_reference(&prompt, &ex.output).await?;
    let generated = gen.complete(&prompt, Sampling { temperature: 0.0, max_tokens }).await?;
    let vectors = embedder.embed(&[generated.clone(), ex.output.clone()]).await?;
    let cossim = cosine_similarity(&vectors[0], &vectors[1])?;
    Ok(EvalRecord {
        example_id,
        task: ex.task,
        ce: scored.mean_nll(),
        cossim,
        generated_text: generated,
        reference_text: ex.output.clone(),
        token_count: scored.len(),
    })
}

/// Scores every example for CE and CosSim. Per-example failures are kept in the report
/// and left out of the means; the call fails only if nothing succeeded.
pub async fn evaluate_split(
    gen: &InferenceClient,
    embedder: &InferenceClient,
    examples: &[TaskExample],
    split_id: &str,
    max_tokens: u32,
) -> Result<EvalReport, LlmError> {
    if examples.is_empty() {
        return Err(LlmError::EmptyInput("evaluation split"));
    }
    let concurrency = gen.config().max_in_flight.max(1);
    let outcomes: Vec<(usize, Result<EvalRecord, LlmError>)> = stream::iter(examples.iter().enumerate())
        .map(|(i, ex)| async move { (i, evaluate_one(gen, embedder, ex, i, max_tokens).await) })
        .buffer_unordered(concurrency)
        .collect()
        .await;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, outcome) in outcomes {
        match outcome {
            Ok(r) => records.push(r),
            Err(e) => failures.push(EvalFailure { example_id: i, task: examples[i].task, error: e.to_string() }),
        }
    }
    Ok(EvalReport::aggregate(gen.model_name(), split_id, records, failures)?)
}
