//! Question-to-declaration conversion by template induction.
//!
//! Pairs are tokenized and folded greedily into rules. A pair joins a rule
//! when the two differ only at literal positions that can be abstracted into
//! slots: a question token that changes becomes a slot, and every changed
//! declaration token must be explained by one of those slots. Slots that only
//! occur in the question act as wildcards; a rule must keep at least half of
//! its question tokens literal.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{is_valid_declaration, DeclarationPair};
use crate::error::Result;
use crate::text::{self, MASK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatternToken {
    Lit(String),
    Slot(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRule {
    pub question_pattern: Vec<PatternToken>,
    pub declaration_template: Vec<PatternToken>,
    /// Number of training questions folded into the rule.
    pub support: usize,
}

impl TemplateRule {
    fn exact(q: &[String], d: &[String]) -> Self {
        Self {
            question_pattern: q.iter().cloned().map(PatternToken::Lit).collect(),
            declaration_template: d.iter().cloned().map(PatternToken::Lit).collect(),
            support: 1,
        }
    }

    fn literal_count(&self) -> usize {
        self.question_pattern.iter().filter(|t| matches!(t, PatternToken::Lit(_))).count()
    }

    /// Slot bindings when `tokens` matches the question pattern.
    pub fn bind<'a>(&self, tokens: &'a [String]) -> Option<BTreeMap<usize, &'a str>> {
        if tokens.len() != self.question_pattern.len() {
            return None;
        }
        let mut bindings = BTreeMap::new();
        for (p, t) in self.question_pattern.iter().zip(tokens) {
            match p {
                PatternToken::Lit(l) if l != t => return None,
                PatternToken::Lit(_) => {}
                PatternToken::Slot(s) => match bindings.get(s) {
                    Some(&b) if b != t.as_str() => return None,
                    Some(_) => {}
                    None => {
                        bindings.insert(*s, t.as_str());
                    }
                },
            }
        }
        Some(bindings)
    }

    pub fn render(&self, bindings: &BTreeMap<usize, &str>) -> String {
        let toks: Vec<&str> = self
            .declaration_template
            .iter()
            .map(|p| match p {
                PatternToken::Lit(l) => l.as_str(),
                PatternToken::Slot(s) => bindings.get(s).copied().unwrap_or(MASK),
            })
            .collect();
        text::detokenize(&toks)
    }

    /// Generalization of `self` that also covers the pair, if one exists.
    fn merge(&self, q: &[String], d: &[String]) -> Option<TemplateRule> {
        if q.len() != self.question_pattern.len() || d.len() != self.declaration_template.len() {
            return None;
        }
        let mut next_slot = self
            .question_pattern
            .iter()
            .filter_map(|p| if let PatternToken::Slot(s) = p { Some(*s + 1) } else { None })
            .max()
            .unwrap_or(0);
        let mut bindings: BTreeMap<usize, &str> = BTreeMap::new();
        // (old literal, new token) -> slot
        let mut fresh: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        let mut qp = self.question_pattern.clone();
        for (i, (p, t)) in self.question_pattern.iter().zip(q).enumerate() {
            match p {
                PatternToken::Lit(l) if l != t => {
                    if l == MASK || t == MASK {
                        return None;
                    }
                    let s = *fresh.entry((l.as_str(), t.as_str())).or_insert_with(|| {
                        next_slot += 1;
                        next_slot - 1
                    });
                    qp[i] = PatternToken::Slot(s);
                }
                PatternToken::Lit(_) => {}
                PatternToken::Slot(s) => match bindings.get(s) {
                    Some(&b) if b != t.as_str() => return None,
                    _ => {
                        bindings.insert(*s, t.as_str());
                    }
                },
            }
        }
        let mut dp = self.declaration_template.clone();
        for (j, (p, t)) in self.declaration_template.iter().zip(d).enumerate() {
            match p {
                PatternToken::Lit(l) if l != t => match fresh.get(&(l.as_str(), t.as_str())) {
                    Some(&s) => dp[j] = PatternToken::Slot(s),
                    None => return None,
                },
                PatternToken::Lit(_) => {}
                PatternToken::Slot(s) => {
                    if bindings.get(s).copied() != Some(t.as_str()) {
                        return None;
                    }
                }
            }
        }
        let rule = TemplateRule { question_pattern: qp, declaration_template: dp, support: self.support + 1 };
        if 2 * rule.literal_count() < rule.question_pattern.len() {
            return None;
        }
        Some(rule)
    }

    /// Renumbers slots by first appearance in the question pattern.
    fn canonical(mut self) -> Self {
        let mut map = BTreeMap::new();
        for p in &self.question_pattern {
            if let PatternToken::Slot(s) = p {
                let n = map.len();
                map.entry(*s).or_insert(n);
            }
        }
        for p in self.question_pattern.iter_mut().chain(self.declaration_template.iter_mut()) {
            if let PatternToken::Slot(s) = p {
                *s = map[s];
            }
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterModel {
    /// Tried in order; the first match wins.
    pub rules: Vec<TemplateRule>,
    pub fallback: String,
}

impl Default for ConverterModel {
    fn default() -> Self {
        Self { rules: Vec::new(), fallback: MASK.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitWarning {
    /// The same question was paired with different declarations; the most
    /// frequent one (first seen on ties) was kept.
    Conflict { question: String, kept: String, dropped: Vec<String> },
    /// Declaration without exactly one `[MASK]`; the pair was skipped.
    InvalidDeclaration { question: String, declaration: String },
}

/// Induces template rules from declaration pairs.
pub fn fit_converter(pairs: &[DeclarationPair]) -> Result<(ConverterModel, Vec<FitWarning>)> {
    let mut warnings = Vec::new();
    // question -> (declaration -> (count, first seen)), in first-seen order
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut votes: BTreeMap<Vec<String>, Vec<(Vec<String>, usize)>> = BTreeMap::new();
    for p in pairs {
        if !is_valid_declaration(&p.declaration) {
            warnings.push(FitWarning::InvalidDeclaration {
                question: p.question.clone(),
                declaration: p.declaration.clone(),
            });
            continue;
        }
        let q = text::tokenize(&p.question);
        let d = text::tokenize(&p.declaration);
        let entry = votes.entry(q.clone()).or_insert_with(|| {
            order.push(q);
            Vec::new()
        });
        match entry.iter_mut().find(|(decl, _)| *decl == d) {
            Some((_, n)) => *n += 1,
            None => entry.push((d, 1)),
        }
    }

    let mut rules: Vec<TemplateRule> = Vec::new();
    for q in &order {
        let cands = &votes[q];
        let mut best = 0;
        for (i, (_, n)) in cands.iter().enumerate() {
            if *n > cands[best].1 {
                best = i;
            }
        }
        let d = &cands[best].0;
        if cands.len() > 1 {
            warnings.push(FitWarning::Conflict {
                question: text::detokenize(q),
                kept: text::detokenize(d),
                dropped: cands
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != best)
                    .map(|(_, (d, _))| text::detokenize(d))
                    .collect(),
            });
        }
        let merged = rules.iter_mut().find_map(|r| r.merge(q, d).map(|m| (r, m)));
        match merged {
            Some((slot, m)) => *slot = m,
            None => rules.push(TemplateRule::exact(q, d)),
        }
    }
    let mut rules: Vec<TemplateRule> = rules.into_iter().map(TemplateRule::canonical).collect();
    // Most specific first; stable, so ties keep induction order.
    rules.sort_by(|a, b| b.literal_count().cmp(&a.literal_count()).then(b.support.cmp(&a.support)));
    Ok((ConverterModel { rules, ..ConverterModel::default() }, warnings))
}

/// Applies the first matching rule; questions no rule covers get the
/// fallback declaration.
pub fn convert(question: &str, model: &ConverterModel) -> String {
    let toks = text::tokenize(question);
    for r in &model.rules {
        if let Some(b) = r.bind(&toks) {
            return r.render(&b);
        }
    }
    model.fallback.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pair(q: &str, d: &str) -> DeclarationPair {
        DeclarationPair { question: q.into(), declaration: d.into() }
    }

    fn lits(s: &str) -> Vec<PatternToken> {
        text::tokenize(s)
            .into_iter()
            .map(|t| if t == "<0>" { PatternToken::Slot(0) } else { PatternToken::Lit(t) })
            .collect()
    }

    #[test]
    fn single_pair_reproduces_itself() {
        let (m, w) = fit_converter(&[pair("what color is the ball?", "the ball is [MASK].")]).unwrap();
        assert!(w.is_empty());
        assert_eq!(m.rules.len(), 1);
        assert_eq!(convert("what color is the ball?", &m), "the ball is [MASK].");
    }

    #[test]
    fn color_questions_fold_into_one_rule() {
        let pairs: Vec<_> = ["ball", "cup", "hat", "ball"]
            .iter()
            .map(|t| pair(&alloc::format!("what color is the {t}?"), &alloc::format!("the {t} is [MASK].")))
            .collect();
        let (m, _) = fit_converter(&pairs).unwrap();
        assert_eq!(m.rules.len(), 1);
        let r = &m.rules[0];
        // "<0>" is not produced by the tokenizer as a slot, so build the
        // expectation by hand
        let mut want_q = lits("what color is the x ?");
        want_q[4] = PatternToken::Slot(0);
        let mut want_d = lits("the x is [MASK] .");
        want_d[1] = PatternToken::Slot(0);
        assert_eq!(r.question_pattern, want_q);
        assert_eq!(r.declaration_template, want_d);
        assert_eq!(convert("what color is the lamp?", &m), "the lamp is [MASK].");
    }

    #[test]
    fn unknown_pattern_falls_back() {
        let (m, _) = fit_converter(&[pair("what color is the ball?", "the ball is [MASK].")]).unwrap();
        assert_eq!(convert("why do the sailboats have their sails lowered?", &m), "[MASK]");
        let (empty, _) = fit_converter(&[]).unwrap();
        assert_eq!(convert("what color is the ball?", &empty), "[MASK]");
    }

    #[test]
    fn conflicts_keep_the_majority() {
        let (m, w) = fit_converter(&[
            pair("what is it?", "it is a [MASK]."),
            pair("what is it?", "[MASK]"),
            pair("what is it?", "it is a [MASK]."),
        ])
        .unwrap();
        assert_eq!(convert("what is it?", &m), "it is a [MASK].");
        assert!(matches!(&w[0], FitWarning::Conflict { dropped, .. } if dropped == &vec!["[MASK]".to_string()]));
    }

    #[test]
    fn question_only_variation_becomes_a_wildcard() {
        let (m, _) = fit_converter(&[
            pair("is there a red ball?", "[MASK]"),
            pair("is there a blue cup?", "[MASK]"),
            pair("is there a green hat?", "[MASK]"),
        ])
        .unwrap();
        assert_eq!(m.rules.len(), 1);
        assert_eq!(convert("is there a pink lamp?", &m), "[MASK]");
    }

    #[test]
    fn different_templates_stay_apart() {
        let (m, _) = fit_converter(&[
            pair("what color is the ball?", "the ball is [MASK]."),
            pair("what is the red object?", "the red object is a [MASK]."),
            pair("what color is the cup?", "the cup is [MASK]."),
            pair("what is the blue object?", "the blue object is a [MASK]."),
        ])
        .unwrap();
        assert_eq!(m.rules.len(), 2);
        assert_eq!(convert("what is the gold object?", &m), "the gold object is a [MASK].");
        assert_eq!(convert("what color is the kite?", &m), "the kite is [MASK].");
    }

    #[test]
    fn invalid_declarations_are_skipped() {
        let (m, w) = fit_converter(&[pair("a?", "no mask here")]).unwrap();
        assert!(m.rules.is_empty());
        assert!(matches!(w[0], FitWarning::InvalidDeclaration { .. }));
    }
}
