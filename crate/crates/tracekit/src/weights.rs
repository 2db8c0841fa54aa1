//! Phrase importance scoring and the score -> weight -> tolerance pipeline.
//!
//! Importance scores in 1..=5 become weights `w = s/5`, and a phrase's local
//! simplification tolerance is `eps_base / w`. With the default
//! `eps_base = 5` px this spans 5 px (importance 5) to 25 px (importance 1).
//! Scoring is either a deterministic offline heuristic or a call to an
//! external scoring endpoint.

use std::time::Duration;

use thiserror::Error;

/// Default base tolerance in pixels. Calibrated range is roughly 3..=7 px;
/// results are insensitive within it.
pub const DEFAULT_EPS_BASE: f64 = 5.0;

/// Prompt sent to the external scorer, with `{caption}` substituted.
pub const SCORER_PROMPT: &str = "Segment this referring expression into semantic phrases and score each phrase's importance (1-5) for identifying the target object. Format: [phrase1]: score1, [phrase2]: score2, ...";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerMode {
    Heuristic,
    External,
}

#[derive(Debug, Clone)]
pub struct ScorerConfig {
    pub mode: ScorerMode,
    pub endpoint_url: String,
    pub timeout: Duration,
    pub eps_base: f64,
    pub bearer_token: Option<String>,
    /// Bound on concurrent in-flight requests to the external scorer.
    pub max_in_flight: usize,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            mode: ScorerMode::Heuristic,
            endpoint_url: String::new(),
            timeout: Duration::from_secs(30),
            eps_base: DEFAULT_EPS_BASE,
            bearer_token: None,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("importance score {0} outside 1..=5")]
    ScoreOutOfRange(i64),
    #[error("external scorer timed out after {0:?}")]
    Timeout(Duration),
    #[error("external scorer returned malformed response: {0}")]
    MalformedResponse(String),
    #[error("external scorer transport failure: {0}")]
    Transport(String),
}

/// `w = score / 5`, mapping 1..=5 onto {0.2, 0.4, 0.6, 0.8, 1.0}.
pub fn weight_of(score: u8) -> Result<f64, ScoreError> {
    if !(1..=5).contains(&score) {
        return Err(ScoreError::ScoreOutOfRange(score as i64));
    }
    Ok(score as f64 / 5.0)
}

/// Local Douglas-Peucker tolerance for a phrase: `eps_base / weight`.
pub fn tolerance_of(weight: f64, eps_base: f64) -> f64 {
    debug_assert!((0.2..=1.0).contains(&weight) && eps_base > 0.0);
    eps_base / weight
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "is", "are", "was", "were", "be", "been", "being", "of", "and", "or", "to",
    "in", "on", "at", "by", "with", "for", "it", "its", "this", "that", "there", "here", "as",
    "from", "has", "have", "had", "do", "does", "did", "we", "you", "they", "he", "she", "i",
];

// Discriminative modifiers bump the score by one.
const SALIENT_ADJECTIVES: &[&str] = &[
    // colors
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black", "white",
    "gray", "grey", "golden", "silver",
    // sizes
    "big", "large", "small", "tiny", "huge", "tall", "short", "long", "wide", "narrow",
    // spatial
    "left", "right", "leftmost", "rightmost", "top", "bottom", "upper", "lower", "front", "back",
    "center", "middle", "nearest", "farthest", "closest",
];

fn tokens(phrase: &str) -> impl Iterator<Item = String> + '_ {
    phrase
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
}

/// Deterministic offline stand-in for the external scorer.
///
/// Rule: a phrase of only stopwords scores 1; otherwise
/// `1 + min(4, content_tokens) + salient_bonus` clamped to 1..=5, where the
/// bonus is 1 when the phrase contains a color/size/spatial adjective.
pub fn heuristic_score(phrase: &str) -> u8 {
    let mut content = 0usize;
    let mut salient = false;
    for tok in tokens(phrase) {
        if STOPWORDS.contains(&tok.as_str()) {
            continue;
        }
        content += 1;
        if SALIENT_ADJECTIVES.contains(&tok.as_str()) {
            salient = true;
        }
    }
    if content == 0 {
        return 1;
    }
    let score = 1 + content.min(4) + usize::from(salient);
    score.clamp(1, 5) as u8
}

/// Parse `[phrase]: score` lines from a scorer response. Scores outside 1..=5
/// clamp with a warning count; lines for phrases we cannot match fall back to
/// the heuristic.
pub fn parse_scores(body: &str, phrases: &[String]) -> (Vec<u8>, usize) {
    let mut warnings = 0usize;
    let mut parsed: Vec<(String, i64)> = Vec::new();
    for cap in extract_bracketed(body) {
        parsed.push(cap);
    }
    let scores = phrases
        .iter()
        .map(|phrase| {
            let hit = parsed
                .iter()
                .find(|(p, _)| p.eq_ignore_ascii_case(phrase.trim()));
            match hit {
                Some(&(_, s)) => {
                    if (1..=5).contains(&s) {
                        s as u8
                    } else {
                        warnings += 1;
                        s.clamp(1, 5) as u8
                    }
                }
                None => {
                    warnings += 1;
                    heuristic_score(phrase)
                }
            }
        })
        .collect();
    (scores, warnings)
}

fn extract_bracketed(body: &str) -> Vec<(String, i64)> {
    let mut out = Vec::new();
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if let Some(close) = body[i + 1..].find(']') {
                let phrase = body[i + 1..i + 1 + close].to_string();
                let rest = &body[i + 1 + close + 1..];
                let rest = rest.trim_start_matches(':').trim_start();
                let num: String = rest
                    .chars()
                    .take_while(|c| c.is_ascii_digit() || *c == '-')
                    .collect();
                if let Ok(score) = num.parse::<i64>() {
                    out.push((phrase, score));
                }
                i += close + 2;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Score phrases via the external endpoint. The request body is the scorer
/// prompt followed by the caption; the response is parsed as `[phrase]: score`
/// lines. Unparsable phrases fall back to [`heuristic_score`].
pub fn external_score(
    phrases: &[String],
    caption: &str,
    config: &ScorerConfig,
) -> Result<(Vec<u8>, usize), ScoreError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(config.timeout)
        .build()
        .map_err(|e| ScoreError::Transport(e.to_string()))?;
    let body = format!("{SCORER_PROMPT}\n\n{caption}");
    let mut req = client.post(&config.endpoint_url).body(body);
    if let Some(tok) = &config.bearer_token {
        req = req.bearer_auth(tok);
    }
    let resp = req.send().map_err(|e| {
        if e.is_timeout() {
            ScoreError::Timeout(config.timeout)
        } else {
            ScoreError::Transport(e.to_string())
        }
    })?;
    if !resp.status().is_success() {
        return Err(ScoreError::Transport(format!(
            "status {}",
            resp.status().as_u16()
        )));
    }
    let text = resp
        .text()
        .map_err(|e| ScoreError::MalformedResponse(e.to_string()))?;
    Ok(parse_scores(&text, phrases))
}

// Words that typically open a new noun/prepositional phrase.
const PHRASE_STARTERS: &[&str] = &[
    "a", "an", "the", "and", "with", "of", "in", "on", "at", "by", "to", "that", "which", "near",
    "behind", "under", "over", "beside", "between",
];

/// Greedy offline phrase splitter over a word list: a new phrase begins at
/// each phrase-starter word once the current phrase already holds a content
/// word. Returns half-open `(start, end)` index spans tiling the list.
pub fn heuristic_phrase_spans(words: &[String]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut has_content = false;
    for (i, word) in words.iter().enumerate() {
        let lower: String = tokens(word).collect::<Vec<_>>().join(" ");
        let is_starter = PHRASE_STARTERS.contains(&lower.as_str());
        if is_starter && has_content && i > start {
            spans.push((start, i));
            start = i;
            has_content = false;
        } else if !is_starter && !lower.is_empty() && !STOPWORDS.contains(&lower.as_str()) {
            has_content = true;
        }
    }
    if start < words.len() {
        spans.push((start, words.len()));
    }
    spans
}
