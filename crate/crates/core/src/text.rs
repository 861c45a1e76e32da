//! Word-level tokenization shared by the converter, BLEU and the encoder
//! vocabulary: lowercase, whitespace split, punctuation split off as its own
//! token, bracketed special tokens (`[MASK]`, `[V3]`, ...) kept whole.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

pub const MASK: &str = "[MASK]";

const PUNCT: &[char] = &['.', ',', '?', '!', ':', ';'];
/// Punctuation that attaches to the preceding word when detokenizing.
const ATTACHED: &[&str] = &[".", ",", "?", "!", ";"];

fn is_punct(c: char) -> bool {
    PUNCT.contains(&c)
}

/// Splits `text` into lowercase word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while !rest.is_empty() {
            if rest.starts_with('[') {
                if let Some(end) = rest.find(']') {
                    out.push(normalize_special(&rest[..=end]));
                    rest = &rest[end + 1..];
                    continue;
                }
            }
            let c = rest.chars().next().expect("non-empty");
            if is_punct(c) {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
                continue;
            }
            let end = rest.find(|ch: char| is_punct(ch) || ch == '[').unwrap_or(rest.len());
            let end = if end == 0 { rest.len() } else { end };
            out.push(rest[..end].to_lowercase());
            rest = &rest[end..];
        }
    }
    out
}

fn normalize_special(tok: &str) -> String {
    tok.to_uppercase()
}

/// Inverse of [`tokenize`] up to casing and whitespace.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !ATTACHED.contains(&t) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Canonical spacing: `detokenize(tokenize(text))`.
pub fn normalize(text: &str) -> String {
    detokenize(&tokenize(text))
}

pub fn is_special(tok: &str) -> bool {
    tok.starts_with('[') && tok.ends_with(']') && tok.len() > 2
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn splits_punctuation_and_keeps_mask() {
        assert_eq!(tokenize("The ball is [MASK]."), vec!["the", "ball", "is", "[MASK]", "."]);
        assert_eq!(tokenize("yes, there is a red ball."), vec!["yes", ",", "there", "is", "a", "red", "ball", "."]);
        assert_eq!(tokenize("answer : [v3] [MASK]"), vec!["answer", ":", "[V3]", "[MASK]"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn detokenize_attaches_sentence_punctuation() {
        let t = tokenize("what color is the ball? answer : the ball is [MASK].");
        assert_eq!(detokenize(&t), "what color is the ball? answer : the ball is [MASK].");
    }

    #[test]
    fn unmatched_bracket_is_a_word() {
        assert_eq!(tokenize("a[b"), vec!["a", "[b"]);
    }
}
