//! Textual adaptation: declarations with a `[MASK]` answer slot, the
//! question-to-declaration converter, answer substitution for matching
//! inputs, and corpus BLEU for converter quality.

mod bleu;
mod converter;

use alloc::format;
use alloc::string::{String, ToString};

use serde::{Deserialize, Serialize};

pub use bleu::corpus_bleu;
pub use converter::{convert, fit_converter, ConverterModel, FitWarning, PatternToken, TemplateRule};

use crate::error::{Error, Result};
use crate::text::MASK;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTriple {
    pub question: String,
    pub answer: String,
    pub full_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclarationPair {
    pub question: String,
    pub declaration: String,
}

/// Number of `[MASK]` occurrences in `text`.
pub fn mask_count(text: &str) -> usize {
    text.matches(MASK).count()
}

/// A declaration is valid with exactly one `[MASK]`.
pub fn is_valid_declaration(text: &str) -> bool {
    mask_count(text) == 1
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '\''
}

/// Byte offset of the first case-insensitive whole-word occurrence.
fn find_whole_word(haystack: &str, needle: &str) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    let hay = haystack.to_ascii_lowercase();
    let nee = needle.to_ascii_lowercase();
    let mut from = 0;
    while let Some(rel) = hay[from..].find(&nee) {
        let start = from + rel;
        let end = start + nee.len();
        let before_ok = hay[..start].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after_ok = hay[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before_ok && after_ok {
            return Some(start);
        }
        from = start + nee.chars().next().map_or(1, char::len_utf8);
    }
    None
}

/// Whole-word occurrences of `word` in `text`, case-insensitively.
pub fn count_whole_word(text: &str, word: &str) -> usize {
    let mut n = 0;
    let mut rest = text;
    while let Some(i) = find_whole_word(rest, word) {
        n += 1;
        rest = &rest[i + word.len()..];
    }
    n
}

fn is_yes_no(answer: &str) -> bool {
    let a = answer.trim();
    a.eq_ignore_ascii_case("yes") || a.eq_ignore_ascii_case("no")
}

/// Replaces the first whole-word occurrence of the answer in the full answer
/// with `[MASK]`. Yes/no answers, and answers absent from the full answer,
/// give the fallback declaration `"[MASK]"`.
pub fn mask_full_answer(triple: &AnnotationTriple) -> Result<DeclarationPair> {
    let answer = triple.answer.trim();
    if answer.is_empty() {
        return Err(Error::Input("empty answer".into()));
    }
    let declaration = if is_yes_no(answer) {
        MASK.to_string()
    } else {
        match find_whole_word(&triple.full_answer, answer) {
            Some(i) => {
                let fa = &triple.full_answer;
                format!("{}{}{}", &fa[..i], MASK, &fa[i + answer.len()..])
            }
            None => MASK.to_string(),
        }
    };
    Ok(DeclarationPair { question: triple.question.clone(), declaration })
}

/// Fills the single `[MASK]` of a declaration with `answer`.
pub fn substitute_answer(declaration: &str, answer: &str) -> Result<String> {
    match mask_count(declaration) {
        1 => Ok(declaration.replacen(MASK, answer, 1)),
        n => Err(Error::Contract(format!("declaration has {n} [MASK] tokens, expected exactly one"))),
    }
}
