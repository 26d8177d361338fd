//! Future-directed vs. random-diffusion generative experiment: sample
//! paintings per century, regenerate them under next-century prompts and
//! under the empty prompt across diffusion steps, then score the outputs
//! with the year model and the temporal axis. Includes the white-noise
//! probe.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{axis_projection, AnalyticsError, TemporalAxis};
use crate::chronometry::{lowess, predict_years, ChronometryError, TrendCurve, YearModel};
use crate::culturomics::{build_prompt, CenturyKeywordSet, CulturomicsError, Separator};
use crate::gateway::{Gateway, GenerationParams, ImageTensor, DEFAULT_DDIM_STEPS};
use crate::util::fnv1a64_parts;

/// Default diffusion-step sweep.
pub const DEFAULT_STEPS: [u32; 7] = [1, 5, 10, 20, 30, 40, 50];
/// Default per-century sample size.
pub const DEFAULT_PER_CENTURY: usize = 500;
/// The step the axis-spectrum comparison highlights.
pub const HIGHLIGHT_STEPS: u32 = 1;

#[derive(Debug, Error)]
pub enum TimeshiftError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("century {0} has no paintings in the corpus")]
    AbsentCentury(i32),
    #[error("no keyword set for century {0} (needed as the successor of {1})")]
    MissingPrompt(i32, i32),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Chronometry(#[from] ChronometryError),
    #[error(transparent)]
    Culturomics(#[from] CulturomicsError),
    #[error("image load failed for {0}: {1}")]
    Load(String, String),
}

pub type Result<T> = std::result::Result<T, TimeshiftError>;

/// Generation condition. `Original` is the unmodified source baseline the
/// two generated conditions are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Original,
    FutureDirected,
    RandomDiffusion,
}

impl Condition {
    pub fn tag(self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::FutureDirected => "future_directed",
            Condition::RandomDiffusion => "random_diffusion",
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub centuries: Vec<i32>,
    pub per_century: usize,
    pub steps: Vec<u32>,
    pub ddim_steps: u32,
    pub seed: u64,
    pub separator: Separator,
}

impl ExperimentPlan {
    pub fn new(centuries: Vec<i32>, seed: u64) -> Self {
        Self {
            centuries,
            per_century: DEFAULT_PER_CENTURY,
            steps: DEFAULT_STEPS.to_vec(),
            ddim_steps: DEFAULT_DDIM_STEPS,
            seed,
            separator: Separator::Space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centuries.is_empty() {
            return Err(TimeshiftError::Precondition("no centuries requested".into()));
        }
        if self.per_century == 0 {
            return Err(TimeshiftError::Precondition("per_century must be >= 1".into()));
        }
        if let Some(&bad) = self.steps.iter().find(|&&s| s > self.ddim_steps) {
            return Err(TimeshiftError::Precondition(format!(
                "step {bad} exceeds ddim_steps {}",
                self.ddim_steps
            )));
        }
        Ok(())
    }

    pub fn latest_century(&self) -> i32 {
        *self.centuries.iter().max().expect("validated nonempty")
    }
}

/// Seeded uniform sampling without replacement per century. Centuries with
/// fewer than `per_century` paintings contribute everything they have, with
/// the shortfall logged. Sampling runs over id-sorted order, so the result
/// is invariant under corpus row order.
pub fn sample_paintings(
    corpus: &[(String, i32)],
    centuries: &[i32],
    per_century: usize,
    seed: u64,
) -> Result<BTreeMap<i32, Vec<String>>> {
    let mut by_century: BTreeMap<i32, Vec<String>> = BTreeMap::new();
    for (id, decade) in corpus {
        by_century
            .entry(decade.div_euclid(100) * 100)
            .or_default()
            .push(id.clone());
    }
    let mut out = BTreeMap::new();
    for &century in centuries {
        let mut ids = by_century
            .remove(&century)
            .ok_or(TimeshiftError::AbsentCentury(century))?;
        ids.sort();
        if ids.len() < per_century {
            log::warn!(
                "century {century} has {} paintings; requested {per_century}, taking all",
                ids.len()
            );
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(fnv1a64_parts(&[&seed.to_le_bytes(), &century.to_le_bytes()]));
            for t in 0..per_century {
                let swap = rng.gen_range(t..ids.len());
                ids.swap(t, swap);
            }
            ids.truncate(per_century);
            ids.sort();
        }
        out.insert(century, ids);
    }
    Ok(out)
}

/// Diffusion steps = round(strength x ddim_steps), half-away-from-zero; a
/// strength delta below 1/ddim_steps may therefore not change the result.
pub fn compute_diffusion_steps(strength: f64, ddim_steps: u32) -> u32 {
    debug_assert!((0.0..=1.0).contains(&strength));
    (strength * ddim_steps as f64 + 0.5).floor() as u32
}

/// What one generation cell produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Ok {
        /// Content digest of the generated (or source) image.
        generated_ref: String,
        context_latent: Vec<f32>,
        predicted_year: f64,
        axis_value: f64,
    },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub source_id: String,
    pub source_century: i32,
    pub condition: Condition,
    pub diffusion_steps: u32,
    pub outcome: CellOutcome,
}

/// Seed for one generation cell, reproducible in isolation.
pub fn cell_seed(plan_seed: u64, source_id: &str, condition: Condition, steps: u32) -> u64 {
    fnv1a64_parts(&[
        &plan_seed.to_le_bytes(),
        source_id.as_bytes(),
        condition.tag().as_bytes(),
        &steps.to_le_bytes(),
    ])
}

fn score_image(
    image: &ImageTensor,
    gateway: &dyn Gateway,
    model: &YearModel,
    axis: &TemporalAxis,
) -> std::result::Result<CellOutcome, String> {
    let latent = gateway.encode_context(image).map_err(|e| e.to_string())?;
    let predicted = predict_years(model, &latent.0, 1).map_err(|e| e.to_string())?[0];
    let as_f64: Vec<f64> = latent.0.iter().map(|&v| v as f64).collect();
    let axis_value = axis_projection(&as_f64, axis).map_err(|e| e.to_string())?;
    Ok(CellOutcome::Ok {
        generated_ref: format!("{:016x}", image.digest()),
        context_latent: latent.0,
        predicted_year: predicted,
        axis_value,
    })
}

/// Run a single (painting, condition, steps) cell. `prompt` is None for the
/// random-diffusion condition. Gateway failures are captured in the
/// outcome, never propagated.
pub fn run_cell(
    plan: &ExperimentPlan,
    source_id: &str,
    source_century: i32,
    image: &ImageTensor,
    prompt: Option<&str>,
    condition: Condition,
    steps: u32,
    gateway: &dyn Gateway,
    model: &YearModel,
    axis: &TemporalAxis,
) -> GenerationRecord {
    let outcome = if condition == Condition::Original {
        score_image(image, gateway, model, axis)
    } else {
        let params = GenerationParams {
            prompt: prompt.unwrap_or("").to_string(),
            ddim_steps: plan.ddim_steps,
            diffusion_steps: steps,
            seed: cell_seed(plan.seed, source_id, condition, steps),
        };
        gateway
            .generate(image, &params)
            .map_err(|e| e.to_string())
            .and_then(|generated| score_image(&generated, gateway, model, axis))
    };
    GenerationRecord {
        source_id: source_id.to_string(),
        source_century,
        condition,
        diffusion_steps: if condition == Condition::Original { 0 } else { steps },
        outcome: outcome.unwrap_or_else(|error| CellOutcome::Failed { error }),
    }
}

/// Run the full experiment. Every sampled century except the latest needs a
/// keyword set for its successor century before any generation starts.
/// Individual gateway failures mark their record failed and the run
/// continues.
pub fn run_experiment(
    plan: &ExperimentPlan,
    corpus: &[(String, i32)],
    load: &dyn Fn(&str) -> std::result::Result<ImageTensor, String>,
    prompts: &BTreeMap<i32, CenturyKeywordSet>,
    gateway: &dyn Gateway,
    model: &YearModel,
    axis: &TemporalAxis,
) -> Result<Vec<GenerationRecord>> {
    plan.validate()?;
    let latest = plan.latest_century();
    // Prompt availability is checked for every century up front.
    let mut prompt_text: BTreeMap<i32, String> = BTreeMap::new();
    for &century in &plan.centuries {
        if century == latest {
            continue;
        }
        let next = century + 100;
        let set = prompts
            .get(&next)
            .ok_or(TimeshiftError::MissingPrompt(next, century))?;
        prompt_text.insert(century, build_prompt(set, plan.separator)?);
    }

    let samples = sample_paintings(corpus, &plan.centuries, plan.per_century, plan.seed)?;
    let mut records = Vec::new();
    let mut failures = 0usize;
    for (&century, ids) in &samples {
        for id in ids {
            let image = match load(id) {
                Ok(img) => img,
                Err(e) => return Err(TimeshiftError::Load(id.clone(), e)),
            };
            records.push(run_cell(
                plan, id, century, &image, None, Condition::Original, 0, gateway, model, axis,
            ));
            for &steps in &plan.steps {
                if century != latest {
                    records.push(run_cell(
                        plan,
                        id,
                        century,
                        &image,
                        Some(&prompt_text[&century]),
                        Condition::FutureDirected,
                        steps,
                        gateway,
                        model,
                        axis,
                    ));
                }
                records.push(run_cell(
                    plan,
                    id,
                    century,
                    &image,
                    None,
                    Condition::RandomDiffusion,
                    steps,
                    gateway,
                    model,
                    axis,
                ));
            }
        }
    }
    failures += records
        .iter()
        .filter(|r| matches!(r.outcome, CellOutcome::Failed { .. }))
        .count();
    if failures > 0 {
        log::warn!("{failures} of {} generation cells failed", records.len());
    }
    Ok(records)
}

/// Per-(century, condition, steps) aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub century: i32,
    pub condition: Condition,
    pub steps: u32,
    pub n: usize,
    pub mean_predicted: f64,
    pub sd_predicted: f64,
    pub mean_axis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisDistribution {
    pub condition: Condition,
    pub steps: u32,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCurve {
    pub condition: Condition,
    pub steps: u32,
    pub curve: TrendCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub cells: Vec<CellSummary>,
    /// LOWESS of predicted year vs source century, per (condition, steps).
    pub curves: Vec<ConditionCurve>,
    /// Axis-projection samples per (condition, steps); `highlight_steps`
    /// marks the spectrum comparison setting.
    pub axis_distributions: Vec<AxisDistribution>,
    pub highlight_steps: u32,
    pub failures: usize,
}

impl ExperimentSummary {
    pub fn cell(&self, century: i32, condition: Condition, steps: u32) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.century == century && c.condition == condition && c.steps == steps)
    }
}

/// Aggregate records into the plot-ready summary. Failed records count
/// toward `failures` and nothing else. Output is invariant under record
/// order.
pub fn summarize(
    records: &[GenerationRecord],
    frac: f64,
    iters: usize,
) -> Result<ExperimentSummary> {
    if records.is_empty() {
        return Err(TimeshiftError::Precondition("no records to summarize".into()));
    }
    let mut ordered: Vec<&GenerationRecord> = records.iter().collect();
    ordered.sort_by(|a, b| {
        (a.source_century, a.condition, a.diffusion_steps, &a.source_id).cmp(&(
            b.source_century,
            b.condition,
            b.diffusion_steps,
            &b.source_id,
        ))
    });

    let failures = ordered
        .iter()
        .filter(|r| matches!(r.outcome, CellOutcome::Failed { .. }))
        .count();

    // (century, condition, steps) -> (predicted, axis) samples.
    let mut by_cell: BTreeMap<(i32, Condition, u32), Vec<(f64, f64)>> = BTreeMap::new();
    // (condition, steps) -> (source century, predicted) and axis values.
    let mut by_cond: BTreeMap<(Condition, u32), (Vec<(f64, f64)>, Vec<f64>)> = BTreeMap::new();
    for r in &ordered {
        if let CellOutcome::Ok { predicted_year, axis_value, .. } = r.outcome {
            by_cell
                .entry((r.source_century, r.condition, r.diffusion_steps))
                .or_default()
                .push((predicted_year, axis_value));
            let slot = by_cond.entry((r.condition, r.diffusion_steps)).or_default();
            slot.0.push((r.source_century as f64, predicted_year));
            slot.1.push(axis_value);
        }
    }

    let cells = by_cell
        .into_iter()
        .map(|((century, condition, steps), samples)| {
            let n = samples.len();
            let mean_predicted = samples.iter().map(|s| s.0).sum::<f64>() / n as f64;
            let var = samples
                .iter()
                .map(|s| (s.0 - mean_predicted).powi(2))
                .sum::<f64>()
                / n as f64;
            let mean_axis = samples.iter().map(|s| s.1).sum::<f64>() / n as f64;
            CellSummary {
                century,
                condition,
                steps,
                n,
                mean_predicted,
                sd_predicted: var.sqrt(),
                mean_axis,
            }
        })
        .collect();

    let mut curves = Vec::new();
    let mut axis_distributions = Vec::new();
    for ((condition, steps), (points, axis_values)) in by_cond {
        axis_distributions.push(AxisDistribution { condition, steps, values: axis_values });
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        match lowess(&xs, &ys, frac, iters) {
            Ok(curve) => curves.push(ConditionCurve { condition, steps, curve }),
            Err(e) => {
                log::warn!("no trend curve for ({}, {steps}): {e}", condition.tag());
            }
        }
    }

    Ok(ExperimentSummary {
        cells,
        curves,
        axis_distributions,
        highlight_steps: HIGHLIGHT_STEPS,
        failures,
    })
}

/// Predictions for n seeded uniform-noise images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseProbe {
    pub predictions: Vec<f64>,
    pub mean: f64,
}

pub fn noise_probe(
    model: &YearModel,
    gateway: &dyn Gateway,
    n: usize,
    seed: u64,
) -> Result<NoiseProbe> {
    if n == 0 {
        return Err(TimeshiftError::Precondition("noise probe needs n >= 1".into()));
    }
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng =
            ChaCha8Rng::seed_from_u64(fnv1a64_parts(&[&seed.to_le_bytes(), &(i as u64).to_le_bytes()]));
        let mut bytes = vec![0u8; ImageTensor::BYTE_LEN];
        rng.fill_bytes(&mut bytes);
        let image = ImageTensor::from_raw(bytes)
            .map_err(|e| TimeshiftError::Precondition(e.to_string()))?;
        let latent = gateway
            .encode_context(&image)
            .map_err(|e| TimeshiftError::Load(format!("noise-{i}"), e.to_string()))?;
        predictions.push(predict_years(model, &latent.0, 1)?[0]);
    }
    let mean = predictions.iter().sum::<f64>() / n as f64;
    Ok(NoiseProbe { predictions, mean })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::chronometry::{train_year_model, GbtParams};
    use crate::culturomics::CenturyKeywordSet;
    use crate::gateway::{MockBackend, MockFixture, MockProfile, CONTEXT_DIM};
    use crate::store::Space;
    use crate::util::counter_uniform;
    use std::collections::HashMap;

    /// Deterministic unique test image.
    pub fn test_image(tag: u64) -> ImageTensor {
        let mut bytes = Vec::with_capacity(ImageTensor::BYTE_LEN);
        for i in 0..ImageTensor::BYTE_LEN {
            bytes.push(((i as u64).wrapping_mul(131) ^ tag.wrapping_mul(2654435761)) as u8);
        }
        ImageTensor::from_raw(bytes).unwrap()
    }

    /// A year model trained on synthetic context rows whose coordinate 0
    /// carries the year and whose remaining coordinates are noise, so the
    /// model reads only the mock's year signal.
    pub fn mock_year_model(seed: u64) -> YearModel {
        let n = 240;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::with_capacity(n * CONTEXT_DIM);
        let mut y = Vec::with_capacity(n);
        for r in 0..n {
            // Decades cover 1500-1990 densely.
            let decade = 1500 + (r as i32 % 50) * 10;
            let year = decade as f32 + rng.gen_range(-5.0f32..5.0);
            x.push(year);
            x.push(rng.gen_range(-200.0f32..200.0)); // style: independent of year
            for i in 2..CONTEXT_DIM {
                x.push(counter_uniform(r as u64, i as u64));
            }
            y.push(decade as f64);
        }
        let params = GbtParams { n_trees: 60, max_depth: 3, learning_rate: 0.3, ..Default::default() };
        train_year_model(&x, n, CONTEXT_DIM, &y, Space::C, &params, "mock-training").unwrap()
    }

    pub struct Fixture {
        pub plan: ExperimentPlan,
        pub corpus: Vec<(String, i32)>,
        pub images: HashMap<String, ImageTensor>,
        pub backend: MockBackend,
        pub prompts: BTreeMap<i32, CenturyKeywordSet>,
        pub model: YearModel,
        pub axis: TemporalAxis,
    }

    /// Small mock experiment: centuries 1600-1800, a handful of paintings
    /// each, style signal decreasing with year so the temporal axis is
    /// style-dominated.
    pub fn small_fixture(per_century: usize, steps: Vec<u32>) -> Fixture {
        let centuries = [1600, 1700, 1800];
        let mut profile = MockProfile::default();
        profile.noise_style = 120.0;
        let mut corpus = Vec::new();
        let mut images = HashMap::new();
        let mut tag = 0u64;
        for &century in &centuries {
            // Decades spread over the century.
            for k in 0..per_century + 2 {
                tag += 1;
                let decade = century + (k as i32 % 10) * 10;
                let id = format!("p{century}-{k:03}");
                let img = test_image(tag);
                profile.fixtures.insert(
                    format!("{:016x}", img.digest()),
                    MockFixture {
                        year_signal: decade as f32,
                        style_signal: (1990 - decade) as f32 * 3.0,
                        prompt: None,
                    },
                );
                images.insert(id.clone(), img);
                corpus.push((id, decade));
            }
            // Prompt vocabulary: one word per century, style target 0.
            profile.century_vocab.insert(format!("era{century}"), century);
            profile.century_style.insert(century, 0.0);
        }
        profile.century_vocab.insert("era1900".into(), 1900);
        profile.century_style.insert(1900, 0.0);

        let prompts: BTreeMap<i32, CenturyKeywordSet> = [1700, 1800, 1900]
            .into_iter()
            .map(|c| {
                (
                    c,
                    CenturyKeywordSet {
                        century: c,
                        words: vec![format!("era{c}")],
                        scores: BTreeMap::new(),
                        exclusion_log: Vec::new(),
                        tie_log: Vec::new(),
                        shortfall: true,
                    },
                )
            })
            .collect();

        // Temporal axis straight from the construction: +100 years maps to
        // -300 style units.
        let mut vector = vec![0.0f64; CONTEXT_DIM];
        vector[0] = 400.0;
        vector[1] = -1200.0;
        let axis = TemporalAxis {
            vector,
            from_label: "1500s".into(),
            to_label: "1900s".into(),
        };

        let mut plan = ExperimentPlan::new(centuries.to_vec(), 11);
        plan.per_century = per_century;
        plan.steps = steps;
        Fixture {
            plan,
            corpus,
            images,
            backend: MockBackend::new(profile, "mock-test"),
            prompts,
            model: mock_year_model(1),
            axis,
        }
    }

    #[test]
    fn sampling_shortfall_determinism_and_seed_sensitivity() {
        let corpus: Vec<(String, i32)> = (0..1000)
            .map(|i| (format!("p{i:04}"), 1600 + (i % 10) * 10))
            .chain([("q1".to_string(), 1750), ("q2".to_string(), 1700), ("q3".to_string(), 1790)])
            .collect();
        let s = sample_paintings(&corpus, &[1600, 1700], 500, 7).unwrap();
        assert_eq!(s[&1600].len(), 500);
        // Shortfall century yields everything it has.
        assert_eq!(s[&1700], vec!["q1", "q2", "q3"]);
        assert_eq!(s, sample_paintings(&corpus, &[1600, 1700], 500, 7).unwrap());
        let other = sample_paintings(&corpus, &[1600, 1700], 500, 8).unwrap();
        assert_ne!(s[&1600], other[&1600]);
        assert!(matches!(
            sample_paintings(&corpus, &[1500], 10, 7),
            Err(TimeshiftError::AbsentCentury(1500))
        ));
    }

    #[test]
    fn diffusion_step_rounding() {
        assert_eq!(compute_diffusion_steps(1.0, 50), 50);
        assert_eq!(compute_diffusion_steps(0.5, 50), 25);
        // 0.49 * 50 = 24.5 rounds half-away-from-zero to 25.
        assert_eq!(compute_diffusion_steps(0.49, 50), 25);
        assert_eq!(compute_diffusion_steps(0.0, 50), 0);
        // Deltas below 1/ddim_steps may not change the result.
        assert_eq!(
            compute_diffusion_steps(0.500, 50),
            compute_diffusion_steps(0.509, 50)
        );
    }

    #[test]
    fn experiment_drifts_match_mock_targets() {
        let f = small_fixture(3, vec![1, 50]);
        let load = |id: &str| f.images.get(id).cloned().ok_or_else(|| "missing".to_string());
        let records = run_experiment(
            &f.plan, &f.corpus, &load, &f.prompts, &f.backend, &f.model, &f.axis,
        )
        .unwrap();
        let summary = summarize(&records, 2.0 / 3.0, 0).unwrap();
        assert_eq!(summary.failures, 0);

        for &century in &[1600, 1700] {
            let fd = summary.cell(century, Condition::FutureDirected, 50).unwrap();
            let orig = summary.cell(century, Condition::Original, 0).unwrap();
            let gain = fd.mean_predicted - orig.mean_predicted;
            // Full-strength future-directed drift lands a century ahead; the
            // source mean sits mid-century so the gap stays inside [80,120]
            // only relative to the original predictions.
            assert!((55.0..=145.0).contains(&gain), "century {century}: gain {gain}");
            // At full strength the year signal is exactly century + 100.
            assert!(
                (fd.mean_predicted - (century as f64 + 100.0)).abs() <= 10.0,
                "century {century}: fd mean {}",
                fd.mean_predicted
            );
            let rd = summary.cell(century, Condition::RandomDiffusion, 50).unwrap();
            assert!(
                (rd.mean_predicted - 1950.0).abs() <= 10.0,
                "century {century}: rd mean {}",
                rd.mean_predicted
            );
        }
        // Latest century has no future-directed cells.
        assert!(summary.cell(1800, Condition::FutureDirected, 50).is_none());
        assert!(summary.cell(1800, Condition::RandomDiffusion, 50).is_some());

        // Axis ordering at step 1: future-directed > random-diffusion >
        // original for every non-terminal century.
        for &century in &[1600, 1700] {
            let fd = summary.cell(century, Condition::FutureDirected, 1).unwrap().mean_axis;
            let rd = summary.cell(century, Condition::RandomDiffusion, 1).unwrap().mean_axis;
            let orig = summary.cell(century, Condition::Original, 0).unwrap().mean_axis;
            assert!(fd > rd && rd > orig, "century {century}: {fd} vs {rd} vs {orig}");
        }
    }

    #[test]
    fn missing_successor_prompt_fails_before_generation() {
        let f = small_fixture(2, vec![1]);
        let mut prompts = f.prompts.clone();
        prompts.remove(&1700);
        let load = |id: &str| f.images.get(id).cloned().ok_or_else(|| "missing".to_string());
        match run_experiment(&f.plan, &f.corpus, &load, &prompts, &f.backend, &f.model, &f.axis) {
            Err(TimeshiftError::MissingPrompt(1700, 1600)) => {}
            other => panic!("expected MissingPrompt, got {other:?}"),
        }
    }

    #[test]
    fn single_cell_reruns_identically() {
        let f = small_fixture(2, vec![1, 50]);
        let load = |id: &str| f.images.get(id).cloned().ok_or_else(|| "missing".to_string());
        let records = run_experiment(
            &f.plan, &f.corpus, &load, &f.prompts, &f.backend, &f.model, &f.axis,
        )
        .unwrap();
        let target = records
            .iter()
            .find(|r| r.condition == Condition::FutureDirected && r.diffusion_steps == 50)
            .unwrap();
        let prompt = build_prompt(&f.prompts[&(target.source_century + 100)], f.plan.separator)
            .unwrap();
        let rerun = run_cell(
            &f.plan,
            &target.source_id,
            target.source_century,
            &f.images[&target.source_id],
            Some(&prompt),
            Condition::FutureDirected,
            50,
            &f.backend,
            &f.model,
            &f.axis,
        );
        assert_eq!(*target, rerun);
    }

    #[test]
    fn gateway_failures_are_recorded_not_fatal() {
        let f = small_fixture(2, vec![1]);
        // A backend with no century vocabulary fails every future-directed
        // generation but serves everything else.
        let empty_backend = MockBackend::new(
            {
                let mut p = MockProfile::default();
                p.noise_style = 120.0;
                p
            },
            "mock-test",
        );
        let load = |id: &str| f.images.get(id).cloned().ok_or_else(|| "missing".to_string());
        let records = run_experiment(
            &f.plan, &f.corpus, &load, &f.prompts, &empty_backend, &f.model, &f.axis,
        )
        .unwrap();
        let failed = records
            .iter()
            .filter(|r| matches!(r.outcome, CellOutcome::Failed { .. }))
            .count();
        assert!(failed > 0);
        assert!(records
            .iter()
            .filter(|r| r.condition != Condition::FutureDirected)
            .all(|r| matches!(r.outcome, CellOutcome::Ok { .. })));
        let summary = summarize(&records, 2.0 / 3.0, 0).unwrap();
        assert_eq!(summary.failures, failed);
    }

    #[test]
    fn summarize_single_record_and_order_invariance() {
        let record = GenerationRecord {
            source_id: "p1".into(),
            source_century: 1600,
            condition: Condition::RandomDiffusion,
            diffusion_steps: 5,
            outcome: CellOutcome::Ok {
                generated_ref: "00".into(),
                context_latent: vec![],
                predicted_year: 1723.0,
                axis_value: 0.25,
            },
        };
        let summary = summarize(&[record.clone()], 2.0 / 3.0, 0).unwrap();
        let cell = &summary.cells[0];
        assert_eq!(cell.n, 1);
        assert_eq!(cell.mean_predicted, 1723.0);
        assert_eq!(cell.sd_predicted, 0.0);
        assert_eq!(cell.mean_axis, 0.25);
        // No curve from a single point, but the axis distribution exists.
        assert_eq!(summary.axis_distributions.len(), 1);

        let f = small_fixture(2, vec![1]);
        let load = |id: &str| f.images.get(id).cloned().ok_or_else(|| "missing".to_string());
        let mut records = run_experiment(
            &f.plan, &f.corpus, &load, &f.prompts, &f.backend, &f.model, &f.axis,
        )
        .unwrap();
        let a = summarize(&records, 2.0 / 3.0, 0).unwrap();
        records.reverse();
        let b = summarize(&records, 2.0 / 3.0, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_probe_hits_the_attractor() {
        let model = mock_year_model(2);
        let backend = MockBackend::new(MockProfile::default(), "mock-test");
        let probe = noise_probe(&model, &backend, 5, 3).unwrap();
        assert_eq!(probe.predictions.len(), 5);
        assert!((probe.mean - 1950.0).abs() <= 10.0, "mean {}", probe.mean);
        let again = noise_probe(&model, &backend, 5, 3).unwrap();
        assert_eq!(probe.predictions, again.predictions);
        assert_eq!(noise_probe(&model, &backend, 1, 3).unwrap().predictions.len(), 1);
        assert!(noise_probe(&model, &backend, 0, 3).is_err());
    }
}
