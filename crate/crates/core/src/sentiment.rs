//! Rule-based valence scoring of short texts.
//!
//! Emoticons are pulled out first; the residual text goes through language
//! detection, optional translation and lexicon lookup. Matched token and
//! emoticon weights are summed into `S` and squashed to
//! `S / sqrt(S^2 + alpha)`.
//!
//! Lexicon files are UTF-8, one `token<TAB>weight` per line. `#` starts a
//! comment line, `@language <tag>` and `@stopwords <words...>` are
//! directives, and a `[emoticons]` line switches the rest of the file to
//! emoticon entries.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::model::ValenceClass;

pub const DEFAULT_ALPHA: f64 = 15.0;
pub const DEFAULT_THETA: f64 = 0.05;
const MAX_WEIGHT: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum SentimentError {
    #[error("lexicon line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("score {0} outside [-1, 1]")]
    ScoreRange(f64),
    #[error("at least one lexicon is required")]
    NoLexicon,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub language: String,
    pub entries: HashMap<String, f64>,
    pub emoticons: HashMap<String, f64>,
    #[serde(default)]
    pub stopwords: HashSet<String>,
}

impl Lexicon {
    pub fn parse(default_language: &str, text: &str) -> Result<Self, SentimentError> {
        let mut lex = Lexicon {
            language: default_language.to_string(),
            entries: HashMap::new(),
            emoticons: HashMap::new(),
            stopwords: HashSet::new(),
        };
        let mut in_emoticons = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let err = |message: String| SentimentError::Parse {
                line: i + 1,
                message,
            };
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if trimmed == "[emoticons]" {
                in_emoticons = true;
                continue;
            }
            if trimmed == "[tokens]" {
                in_emoticons = false;
                continue;
            }
            if let Some(tag) = trimmed.strip_prefix("@language") {
                lex.language = tag.trim().to_string();
                continue;
            }
            if let Some(words) = trimmed.strip_prefix("@stopwords") {
                lex.stopwords
                    .extend(words.split_whitespace().map(str::to_lowercase));
                continue;
            }
            let (token, weight) = line
                .split_once('\t')
                .ok_or_else(|| err("expected token<TAB>weight".into()))?;
            let token = token.trim();
            if token.is_empty() {
                return Err(err("empty token".into()));
            }
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|e| err(format!("bad weight: {e}")))?;
            if !weight.is_finite() || weight.abs() > MAX_WEIGHT {
                return Err(err(format!("weight {weight} outside [-4, 4]")));
            }
            if in_emoticons {
                lex.emoticons.insert(token.to_string(), weight);
            } else {
                lex.entries.insert(token.to_lowercase(), weight);
            }
        }
        Ok(lex)
    }

    pub fn load(path: &Path) -> Result<Self, SentimentError> {
        let text = std::fs::read_to_string(path)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("und");
        Self::parse(stem, &text)
    }

    pub fn english() -> Self {
        Self::parse("en", include_str!("../lexicons/en.tsv")).expect("bundled lexicon")
    }

    pub fn portuguese() -> Self {
        Self::parse("pt", include_str!("../lexicons/pt.tsv")).expect("bundled lexicon")
    }

    /// The bundled English (primary) and Portuguese lexicons.
    pub fn bundled() -> Vec<Self> {
        vec![Self::english(), Self::portuguese()]
    }

    fn knows(&self, token: &str) -> bool {
        self.entries.contains_key(token) || self.stopwords.contains(token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePath {
    LexiconOnly,
    EmoticonOnly,
    Mixed,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentResult {
    pub score: f64,
    pub class: ValenceClass,
    pub path: ScorePath,
    pub language_used: Option<String>,
}

pub trait LanguageDetector: Send + Sync {
    /// Language tag of `text`, or `None` when undetermined.
    fn detect(&self, text: &str, lexicons: &[Lexicon]) -> Option<String>;
}

/// Picks the lexicon with the most known tokens (entries or stopwords);
/// ties go to the earlier lexicon.
#[derive(Debug, Default, Clone, Copy)]
pub struct LexiconVoteDetector;

impl LanguageDetector for LexiconVoteDetector {
    fn detect(&self, text: &str, lexicons: &[Lexicon]) -> Option<String> {
        let tokens = tokenize(text);
        let mut best: Option<(usize, &str)> = None;
        for lex in lexicons {
            let hits = tokens.iter().filter(|t| lex.knows(t)).count();
            if hits > 0 && best.map_or(true, |(h, _)| hits > h) {
                best = Some((hits, &lex.language));
            }
        }
        best.map(|(_, l)| l.to_string())
    }
}

pub trait Translator: Send + Sync {
    fn translate(&self, text: &str, from: &str, to: &str) -> String;
}

/// Stand-in for a networked translation service: returns the input.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, text: &str, _from: &str, _to: &str) -> String {
        text.to_string()
    }
}

fn emoticon_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"^(?:>?[:;=8][-o^'*]?[)\](\[dDpP/\\|@3*oO]+|[)\](\[/\\|@]+[-o^'*]?[:;=]|[xX][dD]+|</?3+|\^_*\^|T_T|;_;)$"#,
        )
        .expect("valid emoticon pattern")
    })
}

fn trailing_emoticon_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#"^(.*[\p{L}\p{N}])([:;=][-o^'*]?[)\](\[dDpP/\\|]+)$"#).expect("valid pattern")
    })
}

fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F300..=0x1FAFF | 0x2600..=0x27BF | 0x1F000..=0x1F2FF)
}

/// Splits emoticons (ASCII faces and emoji) from the text. Returns them in
/// order of appearance and the remaining words joined by single spaces.
pub fn extract_emoticons(text: &str) -> (Vec<String>, String) {
    let mut found = Vec::new();
    let mut residual: Vec<String> = Vec::new();
    for token in text.split_whitespace() {
        if emoticon_regex().is_match(token) {
            found.push(token.to_string());
            continue;
        }
        let (word, tail) = match trailing_emoticon_regex().captures(token) {
            Some(c) => (c[1].to_string(), Some(c[2].to_string())),
            None => (token.to_string(), None),
        };
        let mut rest = String::new();
        for ch in word.chars() {
            if is_emoji(ch) {
                found.push(ch.to_string());
            } else if ch != '\u{FE0F}' {
                rest.push(ch);
            }
        }
        if !rest.is_empty() {
            residual.push(rest);
        }
        if let Some(t) = tail {
            found.push(t);
        }
    }
    (found, residual.join(" "))
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn classify_score(score: f64, theta: f64) -> Result<ValenceClass, SentimentError> {
    if !(-1.0..=1.0).contains(&score) {
        return Err(SentimentError::ScoreRange(score));
    }
    Ok(if score <= -theta {
        ValenceClass::Negative
    } else if score >= theta {
        ValenceClass::Positive
    } else {
        ValenceClass::Neutral
    })
}

pub fn normalize(sum: f64, alpha: f64) -> f64 {
    if sum == 0.0 {
        0.0
    } else {
        sum / (sum * sum + alpha).sqrt()
    }
}

/// Configured scoring pipeline. The first lexicon is the primary one.
pub struct Scorer {
    pub lexicons: Vec<Lexicon>,
    pub detector: Box<dyn LanguageDetector>,
    pub translator: Box<dyn Translator>,
    pub alpha: f64,
    pub theta: f64,
}

impl Scorer {
    pub fn new(lexicons: Vec<Lexicon>) -> Result<Self, SentimentError> {
        if lexicons.is_empty() {
            return Err(SentimentError::NoLexicon);
        }
        Ok(Scorer {
            lexicons,
            detector: Box::new(LexiconVoteDetector),
            translator: Box::new(IdentityTranslator),
            alpha: DEFAULT_ALPHA,
            theta: DEFAULT_THETA,
        })
    }

    pub fn score(&self, text: &str) -> SentimentResult {
        let (emoticons, residual) = extract_emoticons(text);
        let primary = &self.lexicons[0];

        let detected = if residual.is_empty() {
            None
        } else {
            self.detector.detect(&residual, &self.lexicons)
        };

        let (chosen, body) = match &detected {
            Some(lang) => match self.lexicons.iter().position(|l| &l.language == lang) {
                Some(i) => (i, residual.clone()),
                None => (0, self.translator.translate(&residual, lang, &primary.language)),
            },
            None => (0, String::new()),
        };

        // chosen lexicon first, the others cover mixed-language text
        let order: Vec<&Lexicon> = std::iter::once(&self.lexicons[chosen])
            .chain(
                self.lexicons
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != chosen)
                    .map(|(_, l)| l),
            )
            .collect();

        let mut lex_hits = 0usize;
        let mut sum = 0.0;
        for tok in tokenize(&body) {
            if let Some(w) = order.iter().find_map(|l| l.entries.get(&tok)) {
                lex_hits += 1;
                sum += w;
            }
        }
        let mut emo_hits = 0usize;
        for e in &emoticons {
            if let Some(w) = order.iter().find_map(|l| l.emoticons.get(e)) {
                emo_hits += 1;
                sum += w;
            }
        }

        let path = match (lex_hits > 0, emo_hits > 0) {
            (true, true) => ScorePath::Mixed,
            (true, false) => ScorePath::LexiconOnly,
            (false, true) => ScorePath::EmoticonOnly,
            (false, false) => ScorePath::Undetermined,
        };
        let score = if path == ScorePath::Undetermined {
            0.0
        } else {
            normalize(sum, self.alpha)
        };
        let class = classify_score(score, self.theta).unwrap_or(ValenceClass::Neutral);
        SentimentResult {
            score,
            class,
            path,
            language_used: detected.map(|_| self.lexicons[chosen].language.clone()),
        }
    }
}

/// Scores with the default detector, identity translation and default
/// normalization.
pub fn score_text(text: &str, lexicons: &[Lexicon]) -> Result<SentimentResult, SentimentError> {
    Ok(Scorer::new(lexicons.to_vec())?.score(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scorer() -> Scorer {
        Scorer::new(Lexicon::bundled()).unwrap()
    }

    #[test]
    fn extract_examples() {
        assert_eq!(extract_emoticons("ok :)"), (vec![":)".to_string()], "ok".to_string()));
        assert_eq!(extract_emoticons(":("), (vec![":(".to_string()], String::new()));
        assert_eq!(extract_emoticons("plain"), (vec![], "plain".to_string()));
        assert_eq!(
            extract_emoticons("great:) day 😊 <3"),
            (
                vec![":)".to_string(), "😊".to_string(), "<3".to_string()],
                "great day".to_string()
            )
        );
        // URLs and times are not faces
        assert_eq!(extract_emoticons("see http://x.org at 10:30").0, Vec::<String>::new());
    }

    #[test]
    fn empty_text_is_undetermined() {
        let r = scorer().score("");
        assert_eq!(r.score, 0.0);
        assert_eq!(r.class, ValenceClass::Neutral);
        assert_eq!(r.path, ScorePath::Undetermined);
        assert_eq!(r.language_used, None);
    }

    #[test]
    fn emoticon_only_smile() {
        let r = scorer().score(":)");
        // weight +2 -> 2 / sqrt(4 + 15)
        assert!((r.score - 2.0 / 19f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.class, ValenceClass::Positive);
        assert_eq!(r.path, ScorePath::EmoticonOnly);
    }

    #[test]
    fn balanced_weights_cancel() {
        let lex = Lexicon::parse("en", "up\t2\ndown\t-2\n").unwrap();
        let r = score_text("up down", &[lex]).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.class, ValenceClass::Neutral);
        assert_eq!(r.path, ScorePath::LexiconOnly);
    }

    #[test]
    fn language_detection_and_mixed_text() {
        let s = scorer();
        let pt = s.score("estou muito feliz hoje");
        assert_eq!(pt.language_used.as_deref(), Some("pt"));
        assert_eq!(pt.class, ValenceClass::Positive);

        let en = s.score("I am so tired and sad :(");
        assert_eq!(en.language_used.as_deref(), Some("en"));
        assert_eq!(en.path, ScorePath::Mixed);
        assert_eq!(en.class, ValenceClass::Negative);

        // Portuguese word inside English text still counts
        let mixed = s.score("the day was triste");
        assert_eq!(mixed.language_used.as_deref(), Some("en"));
        assert!(mixed.score < 0.0);

        // no known words: emoticon path, language undetected
        let emo = s.score("zzzz qwerty :D");
        assert_eq!(emo.path, ScorePath::EmoticonOnly);
        assert_eq!(emo.language_used, None);
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_score(0.0, 0.05).unwrap(), ValenceClass::Neutral);
        assert_eq!(classify_score(1.0, 0.05).unwrap(), ValenceClass::Positive);
        assert_eq!(classify_score(-0.05, 0.05).unwrap(), ValenceClass::Negative);
        assert_eq!(classify_score(0.05, 0.05).unwrap(), ValenceClass::Positive);
        assert!(classify_score(1.01, 0.05).is_err());
        assert!(classify_score(f64::NAN, 0.05).is_err());
    }

    #[test]
    fn lexicon_parse_errors() {
        assert!(Lexicon::parse("x", "good 1.0").is_err());
        assert!(Lexicon::parse("x", "good\tabc").is_err());
        assert!(Lexicon::parse("x", "good\t9").is_err());
        assert!(Lexicon::parse("x", "\t1").is_err());
        assert!(Scorer::new(vec![]).is_err());
        let l = Lexicon::parse("x", "# c\n@language fr\nbon\t1\n[emoticons]\n:)\t2\n").unwrap();
        assert_eq!(l.language, "fr");
        assert_eq!(l.entries["bon"], 1.0);
        assert_eq!(l.emoticons[":)"], 2.0);
    }

    fn word_lexicon(weights: &[f64]) -> Lexicon {
        let text: String = weights
            .iter()
            .enumerate()
            .map(|(i, w)| format!("w{i}\t{w}\n"))
            .collect();
        Lexicon::parse("en", &text).unwrap()
    }

    proptest! {
        #[test]
        fn negating_weights_negates_score(weights in proptest::collection::vec(-4.0f64..4.0, 1..8),
                                          picks in proptest::collection::vec(0usize..8, 0..12)) {
            let text: String = picks.iter().map(|p| format!("w{} ", p % weights.len())).collect();
            let neg: Vec<f64> = weights.iter().map(|w| -w).collect();
            let a = score_text(&text, &[word_lexicon(&weights)]).unwrap();
            let b = score_text(&text, &[word_lexicon(&neg)]).unwrap();
            prop_assert!((a.score + b.score).abs() < 1e-12);
        }

        #[test]
        fn adding_positive_token_never_decreases(weights in proptest::collection::vec(-4.0f64..4.0, 1..8),
                                                 picks in proptest::collection::vec(0usize..8, 0..12),
                                                 extra in 0.0f64..4.0) {
            let mut w = weights.clone();
            w.push(extra);
            let lex = word_lexicon(&w);
            let base: String = picks.iter().map(|p| format!("w{} ", p % weights.len())).collect();
            let more = format!("{base} w{}", weights.len());
            let a = score_text(&base, &[lex.clone()]).unwrap();
            let b = score_text(&more, &[lex]).unwrap();
            prop_assert!(b.score >= a.score - 1e-15);
        }

        #[test]
        fn classify_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(classify_score(lo, 0.05).unwrap() <= classify_score(hi, 0.05).unwrap());
        }
    }
}
