// SPDX-License-Identifier: MIT OR Apache-2.0

use super::types::{Architecture, ClozeQuery, FactTriple, LanguageSpec, TokenId, Vocab, BLANK_SLOT, HEAD_SLOT, MASK};
use crate::error::{Error, Result};

fn lookup(vocab: &Vocab, token: &str, fact_id: &str) -> Result<TokenId> {
    vocab.id(token).ok_or_else(|| Error::Corpus(format!("fact `{fact_id}`: token `{token}` not in vocabulary")))
}

/// Renders `fact` as a cloze query in `lang` for `arch`.
///
/// Auto-encoding queries keep the full template with `<mask>` in the answer
/// slot. Auto-regressive queries stop right before the answer slot so the
/// last position predicts it.
pub fn render_cloze(fact: &FactTriple, lang: &LanguageSpec, arch: Architecture, vocab: &Vocab) -> Result<ClozeQuery> {
    let template = lang.template(&fact.relation)?;
    let blanks = template.iter().filter(|t| *t == BLANK_SLOT).count();
    if blanks != 1 {
        return Err(Error::Config(format!(
            "template {} has {blanks} BLANK slots, expected one",
            lang.template_id(&fact.relation)
        )));
    }

    let tail = lang.surface(&fact.tail);
    if tail.len() != 1 {
        return Err(Error::MultiTokenAnswer { fact_id: fact.id.clone(), surface: tail.join(" "), tokens: tail.len() });
    }
    let gold_token = lookup(vocab, &tail[0], &fact.id)?;

    let mut tokens = Vec::with_capacity(template.len() + 2);
    let mut blank_position = 0;
    for slot in template {
        match slot.as_str() {
            HEAD_SLOT => {
                for t in lang.surface(&fact.head) {
                    tokens.push(lookup(vocab, &t, &fact.id)?);
                }
            }
            BLANK_SLOT => {
                blank_position = tokens.len();
                if arch == Architecture::AutoRegressive {
                    break;
                }
                tokens.push(MASK);
            }
            word => tokens.push(lookup(vocab, word, &fact.id)?),
        }
    }
    if arch == Architecture::AutoRegressive && tokens.is_empty() {
        return Err(Error::Config(format!(
            "template {} starts with BLANK; nothing to condition on",
            lang.template_id(&fact.relation)
        )));
    }

    Ok(ClozeQuery {
        id: ClozeQuery::make_id(&fact.id, &lang.lang_id, arch),
        fact_id: fact.id.clone(),
        lang_id: lang.lang_id.clone(),
        relation: fact.relation.clone(),
        architecture: arch,
        tokens,
        blank_position,
        gold_token,
    })
}

/// Builds the full statement with `candidate` in the answer slot.
///
/// Returns the token sequence and the position holding the candidate.
pub fn fill_candidate(query: &ClozeQuery, candidate: TokenId) -> (Vec<TokenId>, usize) {
    let mut tokens = query.tokens.clone();
    match query.architecture {
        Architecture::AutoEncoding => {
            tokens[query.blank_position] = candidate;
            (tokens, query.blank_position)
        }
        Architecture::AutoRegressive => {
            tokens.push(candidate);
            let pos = tokens.len() - 1;
            (tokens, pos)
        }
    }
}
