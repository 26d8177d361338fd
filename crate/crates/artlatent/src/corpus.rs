//! Corpus ingestion: metadata parsing, year resolution, decadal grouping,
//! the metadata filter cascade, and image screening/canonicalization.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::gateway::{ImageTensor, IMAGE_SIZE};
use crate::util::fnv1a64_parts;

/// Decade range retained for analysis.
pub const MIN_DECADE: i32 = 1500;
pub const MAX_DECADE: i32 = 1990;

/// Sanity window for resolved years; tokens outside it are title noise.
pub const MIN_RAW_YEAR: i32 = 1000;
pub const MAX_RAW_YEAR: i32 = 2100;

/// Minimum accepted min-dimension before resize.
pub const MIN_RESOLUTION: u32 = 410;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unreadable metadata stream: {0}")]
    Stream(#[from] std::io::Error),
    #[error("missing mandatory header columns: {0:?}")]
    MissingColumns(Vec<String>),
    #[error("metadata table has no header row")]
    EmptyHeader,
}

/// One raw metadata row, prior to filtering.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RawRecord {
    pub painting_name: String,
    pub artist_name: String,
    pub date_text: String,
    pub style_text: String,
    pub field_text: String,
    pub genre_text: String,
    pub nationality_text: String,
    pub image_path: Option<PathBuf>,
    /// Pixel dimensions, populated once the image file has been probed.
    pub width: Option<u32>,
    pub height: Option<u32>,
}

/// A normalized, filtered painting ready for embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaintingRecord {
    /// Content-derived identifier: hash of (artist, painting_name, image digest).
    pub id: String,
    pub artist: String,
    pub decade: i32,
    pub style: Option<String>,
    /// Canonical 512x512 RGB image, relative to the workspace images dir.
    pub image_ref: String,
    /// Provenance: original row index in the metadata dump.
    pub source_row: usize,
}

/// Matching semantics for filter keywords.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Case-insensitive substring match (default).
    #[default]
    Substring,
    /// Case-insensitive whole-field match.
    Exact,
}

/// Metadata filter cascade configuration. Removal keywords are applied in
/// the fixed field order Style, Field, Genre, Nationality, then records are
/// retained only when their Field text matches a keep keyword.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FilterConfig {
    #[serde(default)]
    pub remove_style: Vec<String>,
    #[serde(default)]
    pub remove_field: Vec<String>,
    #[serde(default)]
    pub remove_genre: Vec<String>,
    #[serde(default)]
    pub remove_nationality: Vec<String>,
    #[serde(default)]
    pub keep_field_keywords: Vec<String>,
    #[serde(default)]
    pub match_mode: MatchMode,
}

/// Per-stage drop counts for one ingest run.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct DropReport {
    pub malformed_rows: usize,
    pub removed_style: usize,
    pub removed_field: usize,
    pub removed_genre: usize,
    pub removed_nationality: usize,
    pub removed_keep_stage: usize,
    pub no_year: usize,
    pub out_of_window: usize,
    pub missing_image: usize,
    pub unreadable_image: usize,
    pub rejected_aspect: usize,
    pub rejected_resolution: usize,
}

impl DropReport {
    pub fn stages(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("malformed_rows", self.malformed_rows),
            ("removed_style", self.removed_style),
            ("removed_field", self.removed_field),
            ("removed_genre", self.removed_genre),
            ("removed_nationality", self.removed_nationality),
            ("removed_keep_stage", self.removed_keep_stage),
            ("no_year", self.no_year),
            ("out_of_window", self.out_of_window),
            ("missing_image", self.missing_image),
            ("unreadable_image", self.unreadable_image),
            ("rejected_aspect", self.rejected_aspect),
            ("rejected_resolution", self.rejected_resolution),
        ]
    }
}

/// Parse a delimited metadata table. The delimiter is auto-detected among
/// comma and tab from the header line. Malformed rows are skipped and
/// counted; row order is preserved.
pub fn parse_metadata<R: Read>(
    reader: R,
    image_column: &str,
) -> Result<(Vec<RawRecord>, usize), IngestError> {
    let mut buf = Vec::new();
    let mut reader = reader;
    reader.read_to_end(&mut buf)?;

    let header_line = buf
        .split(|&b| b == b'\n')
        .next()
        .ok_or(IngestError::EmptyHeader)?;
    if header_line.is_empty() {
        return Err(IngestError::EmptyHeader);
    }
    let delimiter = if header_line.contains(&b'\t') { b'\t' } else { b',' };

    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(false)
        .from_reader(buf.as_slice());

    let headers = csv_reader
        .headers()
        .map_err(|_| IngestError::EmptyHeader)?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));

    let mandatory = [
        "painting_name",
        "artist_name",
        "Date",
        "Style",
        "Field",
        "Genre",
        "Nationality",
    ];
    let missing: Vec<String> = mandatory
        .iter()
        .filter(|m| col(m).is_none())
        .map(|m| m.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::MissingColumns(missing));
    }

    let idx_name = col("painting_name").unwrap();
    let idx_artist = col("artist_name").unwrap();
    let idx_date = col("Date").unwrap();
    let idx_style = col("Style").unwrap();
    let idx_field = col("Field").unwrap();
    let idx_genre = col("Genre").unwrap();
    let idx_nat = col("Nationality").unwrap();
    let idx_image = col(image_column);

    // Rows are parsed line by line so a malformed row (e.g. unbalanced
    // quotes) only loses itself, never the rows after it.
    let expected_fields = headers.len();
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let body = &buf[header_line.len().min(buf.len())..];
    for line in body.split(|&b| b == b'\n') {
        let line = match line.last() {
            Some(b'\r') => &line[..line.len() - 1],
            _ => line,
        };
        if line.is_empty() {
            continue;
        }
        let mut row_reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(false)
            .from_reader(line);
        let row = match row_reader.records().next() {
            Some(Ok(row)) if row.len() == expected_fields => Some(row),
            _ => None,
        };
        match row {
            Some(row) => {
                let get = |i: usize| row.get(i).unwrap_or("").trim().to_string();
                let image_path = idx_image.and_then(|i| {
                    let v = row.get(i).unwrap_or("").trim();
                    if v.is_empty() { None } else { Some(PathBuf::from(v)) }
                });
                records.push(RawRecord {
                    painting_name: get(idx_name),
                    artist_name: get(idx_artist),
                    date_text: get(idx_date),
                    style_text: get(idx_style),
                    field_text: get(idx_field),
                    genre_text: get(idx_genre),
                    nationality_text: get(idx_nat),
                    image_path,
                    width: None,
                    height: None,
                });
            }
            None => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Resolve a creation year from the date text, falling back to the title.
///
/// Recognized forms: ranges ("1846-1848", en/em-dash and "to" variants;
/// the final year wins), decade forms ("1420s"), circa forms ("c1540",
/// "ca. 1540"), and plain years. Years outside [1000, 2100] are rejected.
pub fn resolve_year(date_text: &str, title: &str) -> Option<i32> {
    resolve_year_in(date_text).or_else(|| resolve_year_in(title))
}

fn resolve_year_in(text: &str) -> Option<i32> {
    if text.is_empty() {
        return None;
    }
    // Compile once per process.
    use std::sync::OnceLock;
    static RANGE: OnceLock<Regex> = OnceLock::new();
    static DECADE: OnceLock<Regex> = OnceLock::new();
    static PLAIN: OnceLock<Regex> = OnceLock::new();
    let range = RANGE.get_or_init(|| {
        Regex::new(r"(\d{3,4})\s*(?:-|\x{2013}|\x{2014}|\x{2212}|--|\bto\b)\s*(\d{1,4})").unwrap()
    });
    let decade = DECADE.get_or_init(|| Regex::new(r"\b(\d{3,4})0s\b").unwrap());
    let plain = PLAIN.get_or_init(|| Regex::new(r"\b(\d{3,4})\b").unwrap());

    let in_window = |y: i32| (MIN_RAW_YEAR..=MAX_RAW_YEAR).contains(&y);

    if let Some(caps) = range.captures(text) {
        let first: i32 = caps[1].parse().ok()?;
        let second_raw = &caps[2];
        let second: i32 = second_raw.parse().ok()?;
        // Short second halves like "1846-48" inherit the century of the first.
        let second = if second_raw.len() < caps[1].len() {
            let scale = 10i32.pow(second_raw.len() as u32);
            (first / scale) * scale + second
        } else {
            second
        };
        let last = first.max(second);
        if in_window(last) {
            return Some(last);
        }
    }
    if let Some(caps) = decade.captures(text) {
        let base: i32 = caps[1].parse().ok()?;
        let year = base * 10;
        if in_window(year) {
            return Some(year);
        }
    }
    for caps in plain.captures_iter(text) {
        if let Ok(y) = caps[1].parse::<i32>() {
            if in_window(y) {
                return Some(y);
            }
        }
    }
    // Attached circa prefixes ("c1540") leave no word boundary before the
    // digits; strip the prefix and parse the remainder.
    let lower = text.trim().to_ascii_lowercase();
    for prefix in ["circa", "ca.", "c.", "c"] {
        if let Some(stripped) = lower.strip_prefix(prefix) {
            if let Ok(y) = stripped.trim().parse::<i32>() {
                if in_window(y) {
                    return Some(y);
                }
            }
        }
    }
    None
}

/// Decadal rounding down: floor(year / 10) * 10.
pub fn to_decade(raw_year: i32) -> i32 {
    raw_year.div_euclid(10) * 10
}

/// Normalize an artist name: compatibility decomposition, strip combining
/// marks, drop characters outside the repertoire (letters, digits, space,
/// hyphen, apostrophe, period), collapse repeated whitespace.
pub fn normalize_artist(name: &str) -> String {
    let decomposed: String = name
        .nfkd()
        .filter(|c| !is_combining_mark(*c))
        .collect();
    let kept: String = decomposed
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|c| c.is_ascii_alphanumeric() || matches!(c, ' ' | '-' | '\'' | '.'))
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn keyword_matches(text: &str, keyword: &str, mode: MatchMode) -> bool {
    let text = text.to_lowercase();
    let keyword = keyword.to_lowercase();
    match mode {
        MatchMode::Substring => !keyword.is_empty() && text.contains(&keyword),
        MatchMode::Exact => text == keyword,
    }
}

/// Stage at which a record was removed by the filter cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterStage {
    Style,
    Field,
    Genre,
    Nationality,
    Keep,
}

/// Apply the filter cascade: removals in field order Style, Field, Genre,
/// Nationality, then the Field keep list. Returns survivors (order
/// preserved) and per-stage removal counts.
pub fn filter_records(
    records: Vec<RawRecord>,
    cfg: &FilterConfig,
) -> (Vec<RawRecord>, BTreeMap<&'static str, usize>) {
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for stage in ["Style", "Field", "Genre", "Nationality", "Keep"] {
        counts.insert(match stage {
            "Style" => "removed_style",
            "Field" => "removed_field",
            "Genre" => "removed_genre",
            "Nationality" => "removed_nationality",
            _ => "removed_keep_stage",
        }, 0);
    }
    let survivors = records
        .into_iter()
        .filter(|r| match classify_removal(r, cfg) {
            None => true,
            Some(stage) => {
                let key = match stage {
                    FilterStage::Style => "removed_style",
                    FilterStage::Field => "removed_field",
                    FilterStage::Genre => "removed_genre",
                    FilterStage::Nationality => "removed_nationality",
                    FilterStage::Keep => "removed_keep_stage",
                };
                *counts.get_mut(key).unwrap() += 1;
                false
            }
        })
        .collect();
    (survivors, counts)
}

/// Which stage, if any, removes this record.
pub fn classify_removal(r: &RawRecord, cfg: &FilterConfig) -> Option<FilterStage> {
    let stages: [(&str, &[String], FilterStage); 4] = [
        (&r.style_text, &cfg.remove_style, FilterStage::Style),
        (&r.field_text, &cfg.remove_field, FilterStage::Field),
        (&r.genre_text, &cfg.remove_genre, FilterStage::Genre),
        (&r.nationality_text, &cfg.remove_nationality, FilterStage::Nationality),
    ];
    for (text, keywords, stage) in stages {
        if keywords.iter().any(|k| keyword_matches(text, k, cfg.match_mode)) {
            return Some(stage);
        }
    }
    if !cfg
        .keep_field_keywords
        .iter()
        .any(|k| keyword_matches(&r.field_text, k, cfg.match_mode))
    {
        return Some(FilterStage::Keep);
    }
    None
}

/// Outcome of the pre-resize dimension screen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScreenOutcome {
    Accept,
    RejectAspect,
    RejectResolution,
}

/// Screen original image dimensions: aspect outliers first (one dimension at
/// least twice the other), then the 410-pixel min-dimension rule.
pub fn screen_image(width: u32, height: u32) -> ScreenOutcome {
    debug_assert!(width > 0 && height > 0);
    if width.max(height) >= 2 * width.min(height) {
        ScreenOutcome::RejectAspect
    } else if width.min(height) < MIN_RESOLUTION {
        ScreenOutcome::RejectResolution
    } else {
        ScreenOutcome::Accept
    }
}

/// Bilinear resize to the canonical 512x512x3 form. A 512x512 RGB input
/// passes through bit-identical.
pub fn canonicalize_image(img: &RgbImage) -> ImageTensor {
    let side = IMAGE_SIZE as u32;
    if img.width() == side && img.height() == side {
        return ImageTensor::from_raw(img.as_raw().clone()).expect("512x512 RGB input");
    }
    let resized = image::imageops::resize(img, side, side, FilterType::Triangle);
    ImageTensor::from_raw(resized.into_raw()).expect("resize yields 512x512 RGB")
}

/// Build the stable content-derived painting id.
pub fn painting_id(artist: &str, painting_name: &str, image_digest: u64) -> String {
    let h = fnv1a64_parts(&[
        artist.as_bytes(),
        painting_name.as_bytes(),
        &image_digest.to_le_bytes(),
    ]);
    format!("{h:016x}")
}

/// One fully processed record plus its canonical image, or the drop reason.
pub enum IngestOutcome {
    Kept(Box<(PaintingRecord, ImageTensor)>),
    Dropped(&'static str),
}

/// Run year resolution, decade restriction, and image screening for one
/// filtered record. `images_root` anchors relative image paths.
pub fn process_record(r: &RawRecord, source_row: usize, images_root: &Path) -> IngestOutcome {
    let Some(raw_year) = resolve_year(&r.date_text, &r.painting_name) else {
        return IngestOutcome::Dropped("no_year");
    };
    let decade = to_decade(raw_year);
    if !(MIN_DECADE..=MAX_DECADE).contains(&decade) {
        return IngestOutcome::Dropped("out_of_window");
    }
    let Some(rel) = &r.image_path else {
        return IngestOutcome::Dropped("missing_image");
    };
    let path = if rel.is_absolute() { rel.clone() } else { images_root.join(rel) };
    let Ok((w, h)) = image::image_dimensions(&path) else {
        return IngestOutcome::Dropped("missing_image");
    };
    match screen_image(w, h) {
        ScreenOutcome::RejectAspect => return IngestOutcome::Dropped("rejected_aspect"),
        ScreenOutcome::RejectResolution => return IngestOutcome::Dropped("rejected_resolution"),
        ScreenOutcome::Accept => {}
    }
    let Ok(img) = image::open(&path) else {
        return IngestOutcome::Dropped("unreadable_image");
    };
    let canonical = canonicalize_image(&img.to_rgb8());
    let artist = normalize_artist(&r.artist_name);
    let id = painting_id(&artist, &r.painting_name, canonical.digest());
    let style = if r.style_text.is_empty() { None } else { Some(r.style_text.clone()) };
    let record = PaintingRecord {
        image_ref: format!("{id}.png"),
        id,
        artist,
        decade,
        style,
        source_row,
    };
    IngestOutcome::Kept(Box::new((record, canonical)))
}
