use asmscribe_core::tasks::{filter_qa_pairs, parse_qa_pairs, qa_extraction_request};

use crate::client::{InferenceClient, LlmError};

pub const DEFAULT_MAX_PAIRS: usize = 5;

/// Asks the backend for question/answer pairs about one manual section.
pub async fn qa_extract(
    client: &InferenceClient,
    section_text: &str,
    max_pairs: usize,
) -> Result<Vec<(String, String)>, LlmError> {
    if section_text.trim().is_empty() {
        return Err(LlmError::EmptyInput("section text"));
    }
    let raw = client.generate(None, &qa_extraction_request(section_text)).await?;
    match parse_qa_pairs(&raw) {
        Some(pairs) => Ok(filter_qa_pairs(pairs, max_pairs)),
        None => Err(LlmError::UnparseableResponse { raw }),
    }
}
