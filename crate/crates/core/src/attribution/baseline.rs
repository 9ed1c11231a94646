// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::corpus::{Architecture, ClozeQuery};
use crate::error::{Error, Result};

/// Copy of `query` with word `word_index` replaced by the architecture's
/// low-information token: `<mask>` for auto-encoding, `<eos>` for
/// auto-regressive models.
pub fn build_baseline(query: &ClozeQuery, word_index: usize) -> Result<ClozeQuery> {
    if word_index >= query.tokens.len() {
        return Err(Error::Attribution(format!(
            "word index {word_index} out of range for query `{}` of length {}",
            query.id,
            query.tokens.len()
        )));
    }
    if query.architecture == Architecture::AutoEncoding && word_index == query.blank_position {
        return Err(Error::Attribution(format!("word index {word_index} is the blank of query `{}`", query.id)));
    }
    let mut out = query.clone();
    out.tokens[word_index] = query.architecture.baseline_token();
    Ok(out)
}
