//! Keyword analytics over interrogated prompts: tokenization, decade
//! frequency series, trend slopes, TF-IDF scoring, century keyword sets and
//! generation prompts.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Century keyword sets keep the top 77 words, matching the token budget.
pub const CENTURY_KEYWORDS: usize = 77;
/// Candidate pool taken before exclusion filtering.
pub const CANDIDATE_POOL: usize = 100;

#[derive(Debug, Error)]
pub enum CulturomicsError {
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, CulturomicsError>;

/// One painting's prompt reduced to 1-gram keywords.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptDoc {
    pub painting_id: String,
    pub decade: i32,
    pub raw_prompt: String,
    /// Deduplicated, first-occurrence order, each matching [a-z0-9]+.
    pub keywords: Vec<String>,
    /// Pre-deduplication multiplicities.
    pub raw_counts: BTreeMap<String, usize>,
}

impl PromptDoc {
    pub fn new(painting_id: impl Into<String>, decade: i32, prompt: &str) -> Self {
        let (keywords, raw_counts) = tokenize_prompt(prompt);
        Self {
            painting_id: painting_id.into(),
            decade,
            raw_prompt: prompt.to_string(),
            keywords,
            raw_counts,
        }
    }
}

fn is_clean(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

/// Lowercase, split on every non-alphanumeric character, drop empty tokens
/// and tokens containing anything outside ASCII [a-z0-9] (e.g. "jésus" is
/// one token — é is alphanumeric — and is then dropped whole). Returns the
/// deduplicated keyword list (first-occurrence order) and raw multiplicities.
pub fn tokenize_prompt(prompt: &str) -> (Vec<String>, BTreeMap<String, usize>) {
    let lowered = prompt.to_lowercase();
    let mut keywords = Vec::new();
    let mut seen = HashSet::new();
    let mut raw_counts: BTreeMap<String, usize> = BTreeMap::new();
    for token in lowered.split(|c: char| !c.is_alphanumeric()) {
        if !is_clean(token) {
            continue;
        }
        *raw_counts.entry(token.to_string()).or_insert(0) += 1;
        if seen.insert(token.to_string()) {
            keywords.push(token.to_string());
        }
    }
    (keywords, raw_counts)
}

/// Normalized word frequencies per decade. Within a decade each word counts
/// once per painting; the column divides by the decade's total keyword
/// count, so each column sums to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecadeFrequencyTable {
    pub decades: Vec<i32>,
    pub freq: BTreeMap<String, BTreeMap<i32, f64>>,
    /// Total raw (pre-dedup) count per word across the corpus.
    pub support: BTreeMap<String, usize>,
}

impl DecadeFrequencyTable {
    pub fn frequency(&self, word: &str, decade: i32) -> f64 {
        self.freq
            .get(word)
            .and_then(|m| m.get(&decade))
            .copied()
            .unwrap_or(0.0)
    }
}

pub fn build_frequency_table(docs: &[PromptDoc]) -> Result<DecadeFrequencyTable> {
    if docs.is_empty() {
        return Err(CulturomicsError::Precondition("no prompt docs".into()));
    }
    let mut counts: BTreeMap<String, BTreeMap<i32, usize>> = BTreeMap::new();
    let mut totals: BTreeMap<i32, usize> = BTreeMap::new();
    let mut support: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        for kw in &doc.keywords {
            *counts.entry(kw.clone()).or_default().entry(doc.decade).or_insert(0) += 1;
            *totals.entry(doc.decade).or_insert(0) += 1;
        }
        for (word, &c) in &doc.raw_counts {
            *support.entry(word.clone()).or_insert(0) += c;
        }
    }
    let freq = counts
        .into_iter()
        .map(|(word, by_decade)| {
            let f = by_decade
                .into_iter()
                .map(|(dec, c)| (dec, c as f64 / totals[&dec] as f64))
                .collect();
            (word, f)
        })
        .collect();
    Ok(DecadeFrequencyTable {
        decades: totals.keys().copied().collect(),
        freq,
        support,
    })
}

/// Per-word OLS slopes of normalized frequency vs decade, with ranked lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrendReport {
    pub slopes: BTreeMap<String, f64>,
    pub support: BTreeMap<String, usize>,
    /// Sorted by slope descending, tie-break lexicographic.
    pub most_increased: Vec<String>,
    /// Sorted by slope ascending, tie-break lexicographic.
    pub most_decreased: Vec<String>,
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx > 0.0 { sxy / sxx } else { 0.0 }
}

/// Per word, the OLS slope of frequency vs decade over all table decades
/// (absent decades contribute 0). Words with total raw support below
/// `min_support` are excluded from the report entirely.
pub fn trend_slopes(table: &DecadeFrequencyTable, min_support: usize) -> Result<TrendReport> {
    if table.decades.len() < 2 {
        return Err(CulturomicsError::Precondition(format!(
            "trend slopes need at least 2 decades, got {}",
            table.decades.len()
        )));
    }
    let xs: Vec<f64> = table.decades.iter().map(|&d| d as f64).collect();
    let mut slopes = BTreeMap::new();
    let mut support = BTreeMap::new();
    for word in table.freq.keys() {
        let total = table.support.get(word).copied().unwrap_or(0);
        if total < min_support {
            continue;
        }
        let ys: Vec<f64> = table
            .decades
            .iter()
            .map(|&d| table.frequency(word, d))
            .collect();
        slopes.insert(word.clone(), ols_slope(&xs, &ys));
        support.insert(word.clone(), total);
    }
    let mut ranked: Vec<(&String, f64)> = slopes.iter().map(|(w, &s)| (w, s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let most_increased: Vec<String> = ranked.iter().map(|(w, _)| (*w).clone()).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let most_decreased: Vec<String> = ranked.iter().map(|(w, _)| (*w).clone()).collect();
    Ok(TrendReport { slopes, support, most_increased, most_decreased })
}

/// TF-IDF with tf = raw in-document count and
/// idf(t) = ln((1 + n) / (1 + df(t))) + 1, optionally L2-normalized per
/// document (the default).
pub fn tfidf_scores(docs: &[PromptDoc], l2_normalize: bool) -> Result<Vec<BTreeMap<String, f64>>> {
    if docs.is_empty() {
        return Err(CulturomicsError::Precondition("no prompt docs".into()));
    }
    let n = docs.len() as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in docs {
        for word in doc.raw_counts.keys() {
            *df.entry(word).or_insert(0) += 1;
        }
    }
    Ok(docs
        .iter()
        .map(|doc| {
            let mut scores: BTreeMap<String, f64> = doc
                .raw_counts
                .iter()
                .map(|(word, &tf)| {
                    let idf = ((1.0 + n) / (1.0 + df[word.as_str()] as f64)).ln() + 1.0;
                    (word.clone(), tf as f64 * idf)
                })
                .collect();
            if l2_normalize {
                let norm = scores.values().map(|s| s * s).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for s in scores.values_mut() {
                        *s /= norm;
                    }
                }
            }
            scores
        })
        .collect())
}

/// Why a candidate word was removed from a century's pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    Artist,
    Movement,
    Numeral,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Exclusion {
    pub word: String,
    pub reason: ExclusionReason,
}

/// Token-level exclusion lists, lowercase.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExclusionLists {
    pub artists: BTreeSet<String>,
    pub movements: BTreeSet<String>,
}

/// A century's representative vocabulary, TF-IDF-ranked.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CenturyKeywordSet {
    pub century: i32,
    /// At most 77, ordered by aggregated TF-IDF descending.
    pub words: Vec<String>,
    pub scores: BTreeMap<String, f64>,
    pub exclusion_log: Vec<Exclusion>,
    /// Words whose argmax century was tied and resolved to this one.
    pub tie_log: Vec<String>,
    /// True when fewer than 77 words survived filtering.
    pub shortfall: bool,
}

pub fn century_of(decade: i32) -> i32 {
    decade.div_euclid(100) * 100
}

/// Sum per-document TF-IDF scores per word per century; assign each word to
/// its argmax century (ties resolve to the earlier century and are logged);
/// per century keep the top 100 by aggregated score, drop artist-name,
/// movement-name, and purely numeric tokens (logged), then keep the top 77.
/// Ranking ties break lexicographically.
pub fn assign_and_select_century_keywords(
    docs: &[PromptDoc],
    l2_normalize: bool,
    exclusions: &ExclusionLists,
) -> Result<BTreeMap<i32, CenturyKeywordSet>> {
    let scores = tfidf_scores(docs, l2_normalize)?;

    // word -> century -> aggregated score.
    let mut agg: BTreeMap<String, BTreeMap<i32, f64>> = BTreeMap::new();
    for (doc, doc_scores) in docs.iter().zip(&scores) {
        let century = century_of(doc.decade);
        for (word, &s) in doc_scores {
            *agg.entry(word.clone()).or_default().entry(century).or_insert(0.0) += s;
        }
    }

    let centuries: BTreeSet<i32> = docs.iter().map(|d| century_of(d.decade)).collect();
    let mut sets: BTreeMap<i32, CenturyKeywordSet> = centuries
        .into_iter()
        .map(|c| {
            (
                c,
                CenturyKeywordSet {
                    century: c,
                    words: Vec::new(),
                    scores: BTreeMap::new(),
                    exclusion_log: Vec::new(),
                    tie_log: Vec::new(),
                    shortfall: false,
                },
            )
        })
        .collect();

    // Candidate pools: every word lands in exactly one century.
    let mut pools: BTreeMap<i32, Vec<(String, f64)>> = BTreeMap::new();
    for (word, by_century) in &agg {
        let best = by_century.values().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<i32> = by_century
            .iter()
            .filter(|(_, &s)| s == best)
            .map(|(&c, _)| c)
            .collect();
        let century = *winners.iter().min().unwrap();
        if winners.len() > 1 {
            sets.get_mut(&century).unwrap().tie_log.push(word.clone());
            log::info!("keyword '{word}' tied across centuries {winners:?}; assigned {century}");
        }
        pools.entry(century).or_default().push((word.clone(), best));
    }

    for (century, mut pool) in pools {
        pool.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        pool.truncate(CANDIDATE_POOL);
        let set = sets.get_mut(&century).unwrap();
        for (word, score) in pool {
            let reason = if word.chars().all(|c| c.is_ascii_digit()) {
                Some(ExclusionReason::Numeral)
            } else if exclusions.artists.contains(&word) {
                Some(ExclusionReason::Artist)
            } else if exclusions.movements.contains(&word) {
                Some(ExclusionReason::Movement)
            } else {
                None
            };
            match reason {
                Some(reason) => {
                    log::info!("keyword '{word}' excluded from {century}: {reason:?}");
                    set.exclusion_log.push(Exclusion { word, reason });
                }
                None => {
                    if set.words.len() < CENTURY_KEYWORDS {
                        set.words.push(word.clone());
                        set.scores.insert(word, score);
                    }
                }
            }
        }
        if set.words.len() < CENTURY_KEYWORDS {
            set.shortfall = true;
            log::warn!(
                "century {century} keyword set has only {} surviving words",
                set.words.len()
            );
        }
    }
    Ok(sets)
}

/// Prompt separator style.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separator {
    Space,
    Comma,
}

impl std::str::FromStr for Separator {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "space" => Ok(Separator::Space),
            "comma" => Ok(Separator::Comma),
            other => Err(format!("unknown separator '{other}', expected 'space' or 'comma'")),
        }
    }
}

/// Join the set's words in rank order.
pub fn build_prompt(set: &CenturyKeywordSet, separator: Separator) -> Result<String> {
    if set.words.is_empty() {
        return Err(CulturomicsError::Precondition(format!(
            "century {} keyword set is empty",
            set.century
        )));
    }
    let sep = match separator {
        Separator::Space => " ",
        Separator::Comma => ", ",
    };
    Ok(set.words.join(sep))
}
