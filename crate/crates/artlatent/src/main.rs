//! Pipeline CLI: every stage reads one declarative config, writes artifacts
//! into the workspace, and is idempotent over an unchanged workspace.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use artlatent::analytics::{
    fit_pca, group_distance_stats, load_pca, pc_project_rows, project_2d, save_pca,
    temporal_axis, AnalyticsError, PcaModel,
};
use artlatent::chronometry::{
    evaluate, load_year_model, lowess, save_year_model, split, train_year_model, EvalReport,
};
use artlatent::config::{PipelineConfig, Workspace};
use artlatent::corpus::{
    filter_records, parse_metadata, process_record, DropReport, IngestOutcome, PaintingRecord,
};
use artlatent::culturomics::{
    assign_and_select_century_keywords, build_frequency_table, build_prompt, tokenize_prompt,
    trend_slopes, CenturyKeywordSet, DecadeFrequencyTable, ExclusionLists, PromptDoc,
    TrendReport,
};
use artlatent::gateway::{
    token_budget_report, BackendDescriptor, CachedGateway, Gateway, ImageTensor, MockBackend,
    MockProfile, RemoteBackend, TOKEN_BUDGET,
};
use artlatent::report::{fmt_value, render_chart, write_tsv, Series};
use artlatent::store::{load_embeddings, save_embeddings, EmbeddingMatrix, Space};
use artlatent::timeshift::{
    noise_probe, run_experiment, summarize, Condition, ExperimentSummary,
};
use artlatent::util::atomic_write;
use nalgebra::DMatrix;

#[derive(Parser)]
#[command(name = "artlatent", about = "Corpus-to-conclusions pipeline over painting latents")]
struct Cli {
    /// Pipeline config file (JSON).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Re-run the stage even when its stamp says it is up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse metadata, apply the filter cascade, screen and canonicalize images.
    Ingest,
    /// Embed the corpus into one latent space.
    Embed {
        #[arg(long)]
        space: Space,
    },
    /// Fit PCA over one latent space.
    Pca {
        #[arg(long, default_value = "c")]
        space: Space,
    },
    /// Same/different-group distance and KS statistics per space and grouping.
    Distances,
    /// Project a latent space to 2D coordinates.
    Project2d {
        #[arg(long, default_value = "c")]
        space: Space,
    },
    /// Train the year-prediction model for one space.
    TrainYear {
        #[arg(long)]
        space: Space,
    },
    /// Evaluate the year-prediction model on the held-out split.
    EvalYear {
        #[arg(long)]
        space: Space,
    },
    /// Interrogate prompts and build century keyword sets.
    Keywords,
    /// Decade frequency series and trend slopes.
    Trends,
    /// Build generation prompts from the century keyword sets.
    CenturyPrompts,
    /// Run the future-directed vs random-diffusion experiment.
    Experiment,
    /// Predict years for white-noise images.
    NoiseProbe,
    /// Emit plot-ready series files and charts.
    Report {
        /// Emit series files only.
        #[arg(long)]
        no_charts: bool,
    },
}

type CliResult<T> = Result<T, String>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let cfg = match PipelineConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let started = Instant::now();
    let stage = stage_name(&cli.command);
    let result = dispatch(&cli, &cfg);
    let elapsed = started.elapsed().as_millis();
    write_log(&cfg.workspace(), stage, &cfg.digest(), elapsed, &result);
    match result {
        Ok(()) => {
            log::info!("{stage} finished in {elapsed} ms");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Ingest => "ingest",
        Command::Embed { .. } => "embed",
        Command::Pca { .. } => "pca",
        Command::Distances => "distances",
        Command::Project2d { .. } => "project2d",
        Command::TrainYear { .. } => "train-year",
        Command::EvalYear { .. } => "eval-year",
        Command::Keywords => "keywords",
        Command::Trends => "trends",
        Command::CenturyPrompts => "century-prompts",
        Command::Experiment => "experiment",
        Command::NoiseProbe => "noise-probe",
        Command::Report { .. } => "report",
    }
}

fn dispatch(cli: &Cli, cfg: &PipelineConfig) -> CliResult<()> {
    match &cli.command {
        Command::Ingest => run_ingest(cfg, cli.force),
        Command::Embed { space } => run_embed(cfg, *space, cli.force),
        Command::Pca { space } => run_pca(cfg, *space, cli.force),
        Command::Distances => run_distances(cfg, cli.force),
        Command::Project2d { space } => run_project2d(cfg, *space, cli.force),
        Command::TrainYear { space } => run_train_year(cfg, *space, cli.force),
        Command::EvalYear { space } => run_eval_year(cfg, *space, cli.force),
        Command::Keywords => run_keywords(cfg, cli.force),
        Command::Trends => run_trends(cfg, cli.force),
        Command::CenturyPrompts => run_century_prompts(cfg, cli.force),
        Command::Experiment => run_experiment_stage(cfg, cli.force),
        Command::NoiseProbe => run_noise_probe(cfg, cli.force),
        Command::Report { no_charts } => run_report(cfg, *no_charts),
    }
}

fn write_log(ws: &Workspace, stage: &str, digest: &str, elapsed_ms: u128, result: &CliResult<()>) {
    let dir = ws.log_dir();
    if std::fs::create_dir_all(&dir).is_err() {
        return;
    }
    let status = match result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("failed: {e}"),
    };
    let text = format!("config {digest}\nstage {stage}\nelapsed_ms {elapsed_ms}\nstatus {status}\n");
    let _ = std::fs::write(dir.join(format!("{stage}.log")), text);
}

/// Content-addressed stage stamps: a stage with an up-to-date stamp and an
/// existing primary artifact is skipped.
fn stage_done(ws: &Workspace, stage: &str, digest: &str, artifact: &Path, force: bool) -> bool {
    if force {
        return false;
    }
    let done = ws.stamp(stage, digest).exists() && artifact.exists();
    if done {
        log::info!("{stage}: up to date ({}), skipping", artifact.display());
    }
    done
}

fn mark_done(ws: &Workspace, stage: &str, digest: &str) -> CliResult<()> {
    let path = ws.stamp(stage, digest);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    atomic_write(&path, b"").map_err(|e| e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| e.to_string())?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|e| e.to_string())
}

fn read_json<T: DeserializeOwned>(path: &Path, produced_by: &str) -> CliResult<T> {
    if !path.exists() {
        return Err(format!(
            "missing artifact {}; run `artlatent {produced_by}` first",
            path.display()
        ));
    }
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn build_gateway(cfg: &PipelineConfig) -> CliResult<Box<dyn Gateway>> {
    let cache = cfg.workspace().cache_dir();
    Ok(match &cfg.backend {
        BackendDescriptor::Mock { mock_profile, checkpoint_id } => {
            let profile = MockProfile::load(mock_profile).map_err(|e| e.to_string())?;
            Box::new(CachedGateway::new(
                MockBackend::new(profile, checkpoint_id.clone()),
                cache,
            ))
        }
        BackendDescriptor::Remote { endpoint, checkpoint_id, artist_flavors } => {
            Box::new(CachedGateway::new(
                RemoteBackend::new(endpoint.clone(), checkpoint_id.clone(), artist_flavors.clone()),
                cache,
            ))
        }
    })
}

fn load_records(ws: &Workspace) -> CliResult<Vec<PaintingRecord>> {
    read_json(&ws.corpus_records(), "ingest")
}

fn load_image(ws: &Workspace, image_ref: &str) -> CliResult<ImageTensor> {
    let path = ws.corpus_images().join(image_ref);
    let img = image::open(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    ImageTensor::from_raw(img.to_rgb8().into_raw()).map_err(|e| e.to_string())
}

fn run_ingest(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "ingest", &digest, &ws.corpus_records(), force) {
        return Ok(());
    }
    let file = std::fs::File::open(&cfg.paths.metadata)
        .map_err(|e| format!("{}: {e}", cfg.paths.metadata.display()))?;
    let (raw, skipped) =
        parse_metadata(file, &cfg.image_column).map_err(|e| e.to_string())?;
    let total = raw.len();
    let (survivors, removal_counts) = filter_records(raw, &cfg.filter);

    let mut report = DropReport {
        malformed_rows: skipped,
        removed_style: removal_counts["removed_style"],
        removed_field: removal_counts["removed_field"],
        removed_genre: removal_counts["removed_genre"],
        removed_nationality: removal_counts["removed_nationality"],
        removed_keep_stage: removal_counts["removed_keep_stage"],
        ..Default::default()
    };
    std::fs::create_dir_all(ws.corpus_images()).map_err(|e| e.to_string())?;
    let mut records: Vec<PaintingRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (row, record) in survivors.iter().enumerate() {
        match process_record(record, row, &cfg.paths.images) {
            IngestOutcome::Kept(boxed) => {
                let (rec, image) = *boxed;
                if !seen.insert(rec.id.clone()) {
                    log::warn!("duplicate painting id {}; keeping the first occurrence", rec.id);
                    continue;
                }
                let buf: image::RgbImage = image::ImageBuffer::from_raw(
                    512,
                    512,
                    image.as_bytes().to_vec(),
                )
                .expect("canonical image is 512x512");
                let out = ws.corpus_images().join(&rec.image_ref);
                buf.save(&out).map_err(|e| format!("{}: {e}", out.display()))?;
                records.push(rec);
            }
            IngestOutcome::Dropped(stage) => match stage {
                "no_year" => report.no_year += 1,
                "out_of_window" => report.out_of_window += 1,
                "missing_image" => report.missing_image += 1,
                "unreadable_image" => report.unreadable_image += 1,
                "rejected_aspect" => report.rejected_aspect += 1,
                "rejected_resolution" => report.rejected_resolution += 1,
                other => return Err(format!("unknown drop stage {other}")),
            },
        }
    }
    write_json(&ws.corpus_records(), &records)?;
    write_json(&ws.drop_report(), &report)?;
    log::info!(
        "ingest: {total} rows in, {} kept, {} skipped as malformed",
        records.len(),
        skipped
    );
    mark_done(&ws, "ingest", &digest)
}

fn run_embed(cfg: &PipelineConfig, space: Space, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    let stage = format!("embed-{}", space.tag());
    if stage_done(&ws, &stage, &digest, &ws.embeddings(space).join("manifest.json"), force) {
        return Ok(());
    }
    let records = load_records(&ws)?;
    let gateway = build_gateway(cfg)?;
    let mut ids = Vec::with_capacity(records.len());
    let mut values: Vec<f32> = Vec::with_capacity(records.len() * space.dim());
    for rec in &records {
        let image = load_image(&ws, &rec.image_ref)?;
        match space {
            Space::A => {
                let latent = gateway.encode_formal(&image).map_err(|e| e.to_string())?;
                values.extend_from_slice(&latent.0);
            }
            Space::C => {
                let latent = gateway.encode_context(&image).map_err(|e| e.to_string())?;
                values.extend_from_slice(&latent.0);
            }
        }
        ids.push(rec.id.clone());
    }
    let matrix =
        EmbeddingMatrix::new(space, ids, values, gateway.checkpoint_id().to_string())
            .map_err(|e| e.to_string())?;
    save_embeddings(&matrix, &ws.embeddings(space)).map_err(|e| e.to_string())?;
    log::info!("embed: {} paintings into space {}", matrix.n(), space.tag());
    mark_done(&ws, &stage, &digest)
}

fn load_store(ws: &Workspace, space: Space) -> CliResult<EmbeddingMatrix> {
    load_embeddings(&ws.embeddings(space)).map_err(|e| match e {
        artlatent::store::StoreError::Absent(p) => {
            format!("missing artifact {p}; run `artlatent embed --space {}` first", space.tag())
        }
        other => other.to_string(),
    })
}

fn to_f64_matrix(store: &EmbeddingMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(store.n(), store.d, |r, c| store.row(r)[c] as f64)
}

fn run_pca(cfg: &PipelineConfig, space: Space, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    let stage = format!("pca-{}", space.tag());
    if stage_done(&ws, &stage, &digest, &ws.pca(space).join("manifest.json"), force) {
        return Ok(());
    }
    let store = load_store(&ws, space)?;
    let data = to_f64_matrix(&store);
    let k = cfg.pca_components.min(store.n().saturating_sub(1)).min(store.d);
    let model = match fit_pca(&data, k) {
        Ok(m) => m,
        Err(AnalyticsError::RankDeficient { requested, achievable }) => {
            log::warn!("rank supports only {achievable} of {requested} components");
            fit_pca(&data, achievable).map_err(|e| e.to_string())?
        }
        Err(e) => return Err(e.to_string()),
    };
    save_pca(&model, &ws.pca(space)).map_err(|e| e.to_string())?;
    log::info!(
        "pca: {} components over space {}, explained ratios {:?}",
        model.k(),
        space.tag(),
        model.explained_variance_ratio
    );
    mark_done(&ws, &stage, &digest)
}

fn run_distances(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "distances", &digest, &ws.distances(), force) {
        return Ok(());
    }
    let records = load_records(&ws)?;
    let artist_labels: HashMap<String, String> = records
        .iter()
        .map(|r| (r.id.clone(), r.artist.clone()))
        .collect();
    let style_labels: HashMap<String, String> = records
        .iter()
        .filter_map(|r| r.style.clone().map(|s| (r.id.clone(), s)))
        .collect();
    let mut reports = Vec::new();
    for space in [Space::A, Space::C] {
        let store = load_store(&ws, space)?;
        for (grouping, labels) in [("artist", &artist_labels), ("style", &style_labels)] {
            match group_distance_stats(&store, labels, grouping, cfg.distance_budget, cfg.seed) {
                Ok(r) => reports.push(r),
                Err(e) => log::warn!(
                    "distances: {grouping} over space {} skipped: {e}",
                    space.tag()
                ),
            }
        }
    }
    if reports.is_empty() {
        return Err("no grouping produced a distance report".to_string());
    }
    write_json(&ws.distances(), &reports)?;
    mark_done(&ws, "distances", &digest)
}

fn run_project2d(cfg: &PipelineConfig, space: Space, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    let stage = format!("project2d-{}", space.tag());
    if stage_done(&ws, &stage, &digest, &ws.projection2d(space), force) {
        return Ok(());
    }
    let store = load_store(&ws, space)?;
    let coords = project_2d(&store, &cfg.projection, cfg.seed).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<String>> = store
        .ids
        .iter()
        .zip(&coords)
        .map(|(id, c)| vec![id.clone(), fmt_value(c[0]), fmt_value(c[1])])
        .collect();
    write_tsv(&ws.projection2d(space), &["id", "x", "y"], &rows).map_err(|e| e.to_string())?;
    mark_done(&ws, &stage, &digest)
}

fn decades_of(records: &[PaintingRecord]) -> HashMap<String, i32> {
    records.iter().map(|r| (r.id.clone(), r.decade)).collect()
}

fn rows_for_ids(
    store: &EmbeddingMatrix,
    ids: &[String],
) -> CliResult<(Vec<f32>, Vec<usize>)> {
    let index: HashMap<&str, usize> = store
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut values = Vec::with_capacity(ids.len() * store.d);
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let &row = index
            .get(id.as_str())
            .ok_or_else(|| format!("id {id} not present in the embedding store"))?;
        values.extend_from_slice(store.row(row));
        rows.push(row);
    }
    Ok((values, rows))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SplitFile {
    train: Vec<String>,
    test: Vec<String>,
}

fn run_train_year(cfg: &PipelineConfig, space: Space, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    let stage = format!("train-year-{}", space.tag());
    if stage_done(&ws, &stage, &digest, &ws.year_model(space).join("model.json"), force) {
        return Ok(());
    }
    let records = load_records(&ws)?;
    let store = load_store(&ws, space)?;
    let decades = decades_of(&records);
    let (train, test) = split(&store.ids, &cfg.split).map_err(|e| e.to_string())?;
    let (x, _) = rows_for_ids(&store, &train)?;
    let y: Vec<f64> = train
        .iter()
        .map(|id| {
            decades
                .get(id)
                .map(|&d| d as f64)
                .ok_or_else(|| format!("id {id} has no corpus record"))
        })
        .collect::<CliResult<_>>()?;
    let model = train_year_model(
        &x,
        train.len(),
        store.d,
        &y,
        space,
        &cfg.gbt,
        &format!("{}-{}", store.checkpoint_id, digest),
    )
    .map_err(|e| e.to_string())?;
    save_year_model(&model, &ws.year_model(space)).map_err(|e| e.to_string())?;
    write_json(&ws.split_file(space), &SplitFile { train, test })?;
    mark_done(&ws, &stage, &digest)
}

fn run_eval_year(cfg: &PipelineConfig, space: Space, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    let stage = format!("eval-year-{}", space.tag());
    if stage_done(&ws, &stage, &digest, &ws.eval_report(space), force) {
        return Ok(());
    }
    let model_path = ws.year_model(space);
    if !model_path.join("model.json").exists() {
        return Err(format!(
            "missing artifact {}; run `artlatent train-year --space {}` first",
            model_path.join("model.json").display(),
            space.tag()
        ));
    }
    let model = load_year_model(&model_path).map_err(|e| e.to_string())?;
    let store = load_store(&ws, space)?;
    let records = load_records(&ws)?;
    let decades = decades_of(&records);
    let split_file: SplitFile = read_json(&ws.split_file(space), "train-year")?;
    let (x, _) = rows_for_ids(&store, &split_file.test)?;
    let y: Vec<f64> = split_file
        .test
        .iter()
        .map(|id| decades[id] as f64)
        .collect();
    let report = evaluate(&model, &split_file.test, &x, &y).map_err(|e| e.to_string())?;
    log::info!(
        "eval-year {}: r2 = {:.4}, pearson = {:?}",
        space.tag(),
        report.r2,
        report.pearson
    );
    write_json(&ws.eval_report(space), &report)?;
    mark_done(&ws, &stage, &digest)
}

/// Exclusion lists: configured files merged with tokens derived from corpus
/// metadata (every artist-name token, every style-name token).
fn build_exclusions(cfg: &PipelineConfig, records: &[PaintingRecord]) -> CliResult<ExclusionLists> {
    let mut lists = ExclusionLists::default();
    for rec in records {
        let (tokens, _) = tokenize_prompt(&rec.artist);
        lists.artists.extend(tokens);
        if let Some(style) = &rec.style {
            let (tokens, _) = tokenize_prompt(style);
            lists.movements.extend(tokens);
        }
    }
    let read_list = |path: &Option<PathBuf>, into: &mut std::collections::BTreeSet<String>| -> CliResult<()> {
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            into.extend(text.lines().map(|l| l.trim().to_lowercase()).filter(|l| !l.is_empty()));
        }
        Ok(())
    };
    read_list(&cfg.exclusions.artists, &mut lists.artists)?;
    read_list(&cfg.exclusions.movements, &mut lists.movements)?;
    Ok(lists)
}

fn run_keywords(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "keywords", &digest, &ws.keyword_sets(), force) {
        return Ok(());
    }
    let records = load_records(&ws)?;
    let gateway = build_gateway(cfg)?;
    let mut docs = Vec::with_capacity(records.len());
    for rec in &records {
        let image = load_image(&ws, &rec.image_ref)?;
        let prompt = gateway.interrogate(&image).map_err(|e| e.to_string())?;
        docs.push(PromptDoc::new(rec.id.clone(), rec.decade, &prompt));
    }
    write_json(&ws.prompt_docs(), &docs)?;
    let exclusions = build_exclusions(cfg, &records)?;
    let sets = assign_and_select_century_keywords(&docs, cfg.tfidf_l2_normalize, &exclusions)
        .map_err(|e| e.to_string())?;
    write_json(&ws.keyword_sets(), &sets)?;
    log::info!("keywords: {} docs, {} century sets", docs.len(), sets.len());
    mark_done(&ws, "keywords", &digest)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TrendsArtifact {
    table: DecadeFrequencyTable,
    report: TrendReport,
}

fn run_trends(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "trends", &digest, &ws.trends(), force) {
        return Ok(());
    }
    let docs: Vec<PromptDoc> = read_json(&ws.prompt_docs(), "keywords")?;
    let table = build_frequency_table(&docs).map_err(|e| e.to_string())?;
    let report = trend_slopes(&table, cfg.min_support).map_err(|e| e.to_string())?;
    write_json(&ws.trends(), &TrendsArtifact { table, report })?;
    mark_done(&ws, "trends", &digest)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CenturyPrompt {
    century: i32,
    prompt: String,
    token_count: usize,
    over_budget: bool,
}

fn run_century_prompts(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "century-prompts", &digest, &ws.century_prompts(), force) {
        return Ok(());
    }
    let sets: BTreeMap<i32, CenturyKeywordSet> = read_json(&ws.keyword_sets(), "keywords")?;
    let gateway = build_gateway(cfg)?;
    let mut prompts = Vec::new();
    for set in sets.values() {
        let prompt = build_prompt(set, cfg.experiment.separator).map_err(|e| e.to_string())?;
        let token_count = gateway.count_tokens(&prompt).map_err(|e| e.to_string())?;
        let (_, over_budget) = token_budget_report(&prompt);
        if over_budget {
            log::warn!(
                "century {} prompt counts {token_count} tokens; tokens beyond {TOKEN_BUDGET} \
                 will be truncated by the text encoder",
                set.century
            );
        }
        prompts.push(CenturyPrompt { century: set.century, prompt, token_count, over_budget });
    }
    write_json(&ws.century_prompts(), &prompts)?;
    mark_done(&ws, "century-prompts", &digest)
}

fn run_experiment_stage(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "experiment", &digest, &ws.experiment_summary(), force) {
        return Ok(());
    }
    let records = load_records(&ws)?;
    let store = load_store(&ws, Space::C)?;
    let model_dir = ws.year_model(Space::C);
    if !model_dir.join("model.json").exists() {
        return Err(format!(
            "missing artifact {}; run `artlatent train-year --space c` first",
            model_dir.join("model.json").display()
        ));
    }
    let model = load_year_model(&model_dir).map_err(|e| e.to_string())?;
    if model.space != Space::C {
        return Err("the experiment needs a C-space year model".to_string());
    }
    let prompts: BTreeMap<i32, CenturyKeywordSet> = read_json(&ws.keyword_sets(), "keywords")?;
    let decades = decades_of(&records);
    let axis = temporal_axis(&store, &decades).map_err(|e| e.to_string())?;
    let gateway = build_gateway(cfg)?;
    let corpus: Vec<(String, i32)> = records.iter().map(|r| (r.id.clone(), r.decade)).collect();
    let image_refs: HashMap<String, String> = records
        .iter()
        .map(|r| (r.id.clone(), r.image_ref.clone()))
        .collect();
    let load = |id: &str| -> Result<ImageTensor, String> {
        let image_ref = image_refs.get(id).ok_or_else(|| format!("unknown id {id}"))?;
        load_image(&ws, image_ref)
    };
    let generation_records = run_experiment(
        &cfg.experiment,
        &corpus,
        &load,
        &prompts,
        gateway.as_ref(),
        &model,
        &axis,
    )
    .map_err(|e| e.to_string())?;
    let summary = summarize(&generation_records, cfg.lowess.frac, cfg.lowess.iters)
        .map_err(|e| e.to_string())?;
    write_json(&ws.experiment_records(), &generation_records)?;
    write_json(&ws.experiment_summary(), &summary)?;
    log::info!(
        "experiment: {} records, {} failures",
        generation_records.len(),
        summary.failures
    );
    mark_done(&ws, "experiment", &digest)
}

fn run_noise_probe(cfg: &PipelineConfig, force: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let digest = cfg.digest();
    if stage_done(&ws, "noise-probe", &digest, &ws.noise_probe(), force) {
        return Ok(());
    }
    let model_dir = ws.year_model(Space::C);
    if !model_dir.join("model.json").exists() {
        return Err(format!(
            "missing artifact {}; run `artlatent train-year --space c` first",
            model_dir.join("model.json").display()
        ));
    }
    let model = load_year_model(&model_dir).map_err(|e| e.to_string())?;
    let gateway = build_gateway(cfg)?;
    let probe = noise_probe(&model, gateway.as_ref(), cfg.noise_probe_n, cfg.seed)
        .map_err(|e| e.to_string())?;
    log::info!("noise-probe: mean prediction {:.1}", probe.mean);
    write_json(&ws.noise_probe(), &probe)?;
    mark_done(&ws, "noise-probe", &digest)
}

fn run_report(cfg: &PipelineConfig, no_charts: bool) -> CliResult<()> {
    let ws = cfg.workspace();
    let required: Vec<(PathBuf, &str)> = vec![
        (ws.corpus_records(), "ingest"),
        (ws.eval_report(Space::C), "eval-year --space c"),
        (ws.pca(Space::C).join("manifest.json"), "pca --space c"),
        (ws.embeddings(Space::C).join("manifest.json"), "embed --space c"),
        (ws.trends(), "trends"),
        (ws.experiment_summary(), "experiment"),
    ];
    let missing: Vec<String> = required
        .iter()
        .filter(|(p, _)| !p.exists())
        .map(|(p, stage)| format!("{} (run `artlatent {stage}`)", p.display()))
        .collect();
    if !missing.is_empty() {
        return Err(format!("missing artifacts:\n  {}", missing.join("\n  ")));
    }
    let out = ws.report_dir();
    let records = load_records(&ws)?;
    let decades = decades_of(&records);

    // Predicted vs true years with a LOWESS overlay, per available space.
    for space in [Space::C, Space::A] {
        let path = ws.eval_report(space);
        if !path.exists() {
            continue;
        }
        let eval: EvalReport = read_json(&path, "eval-year")?;
        let rows: Vec<Vec<String>> = eval
            .predictions
            .iter()
            .map(|p| vec![p.id.clone(), fmt_value(p.decade), fmt_value(p.predicted)])
            .collect();
        write_tsv(
            &out.join(format!("eval-year-{}.tsv", space.tag())),
            &["id", "decade", "predicted"],
            &rows,
        )
        .map_err(|e| e.to_string())?;
        let xs: Vec<f64> = eval.predictions.iter().map(|p| p.decade).collect();
        let ys: Vec<f64> = eval.predictions.iter().map(|p| p.predicted).collect();
        let curve = lowess(&xs, &ys, cfg.lowess.frac, cfg.lowess.iters)
            .map_err(|e| e.to_string())?;
        let curve_rows: Vec<Vec<String>> = curve
            .xs
            .iter()
            .zip(&curve.ys)
            .map(|(x, y)| vec![fmt_value(*x), fmt_value(*y)])
            .collect();
        write_tsv(
            &out.join(format!("eval-year-{}-lowess.tsv", space.tag())),
            &["decade", "smoothed_prediction"],
            &curve_rows,
        )
        .map_err(|e| e.to_string())?;
        if !no_charts {
            render_chart(
                &out.join(format!("eval-year-{}.svg", space.tag())),
                &format!("Predicted vs true years ({} space)", space.tag()),
                "true decade",
                "predicted year",
                &[
                    Series {
                        label: "paintings",
                        points: xs.iter().copied().zip(ys.iter().copied()).collect(),
                        line: false,
                    },
                    Series {
                        label: "lowess",
                        points: curve.xs.iter().copied().zip(curve.ys.iter().copied()).collect(),
                        line: true,
                    },
                ],
            )
            .map_err(|e| e.to_string())?;
        }
    }

    // PC projections per decade.
    let pca_model: PcaModel = load_pca(&ws.pca(Space::C)).map_err(|e| e.to_string())?;
    let store = load_store(&ws, Space::C)?;
    let rows_f64: Vec<Vec<f64>> = (0..store.n())
        .map(|r| store.row(r).iter().map(|&v| v as f64).collect())
        .collect();
    let mut header = vec!["id".to_string(), "decade".to_string()];
    header.extend((0..pca_model.k()).map(|i| format!("pc{}", i + 1)));
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut projections = vec![Vec::new(); pca_model.k()];
    for i in 0..pca_model.k() {
        projections[i] = pc_project_rows(&pca_model, &rows_f64, i).map_err(|e| e.to_string())?;
    }
    let proj_rows: Vec<Vec<String>> = store
        .ids
        .iter()
        .enumerate()
        .map(|(r, id)| {
            let mut row = vec![
                id.clone(),
                decades.get(id).map(|&d| d.to_string()).unwrap_or_default(),
            ];
            row.extend((0..pca_model.k()).map(|i| fmt_value(projections[i][r])));
            row
        })
        .collect();
    write_tsv(&out.join("pc-projections-c.tsv"), &header_refs, &proj_rows)
        .map_err(|e| e.to_string())?;
    if !no_charts && !projections.is_empty() {
        let mut by_decade: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
        for (r, id) in store.ids.iter().enumerate() {
            if let Some(&d) = decades.get(id) {
                let slot = by_decade.entry(d).or_insert((0.0, 0));
                slot.0 += projections[0][r];
                slot.1 += 1;
            }
        }
        let points: Vec<(f64, f64)> = by_decade
            .into_iter()
            .map(|(d, (sum, n))| (d as f64, sum / n as f64))
            .collect();
        render_chart(
            &out.join("pc1-by-decade.svg"),
            "Mean PC1 projection per decade (c space)",
            "decade",
            "mean PC1",
            &[Series { label: "pc1", points, line: true }],
        )
        .map_err(|e| e.to_string())?;
    }

    // Keyword frequency series for the strongest trends.
    let trends: TrendsArtifact = read_json(&ws.trends(), "trends")?;
    let top_words: Vec<&String> = trends
        .report
        .most_increased
        .iter()
        .take(10)
        .chain(trends.report.most_decreased.iter().take(10))
        .collect();
    let mut freq_rows = Vec::new();
    for word in &top_words {
        for &decade in &trends.table.decades {
            freq_rows.push(vec![
                (*word).clone(),
                decade.to_string(),
                fmt_value(trends.table.frequency(word, decade)),
                fmt_value(trends.report.slopes[*word]),
            ]);
        }
    }
    write_tsv(
        &out.join("keyword-frequencies.tsv"),
        &["word", "decade", "frequency", "slope"],
        &freq_rows,
    )
    .map_err(|e| e.to_string())?;
    if !no_charts && !top_words.is_empty() {
        let series: Vec<Series> = top_words
            .iter()
            .take(5)
            .map(|word| Series {
                label: word.as_str(),
                points: trends
                    .table
                    .decades
                    .iter()
                    .map(|&d| (d as f64, trends.table.frequency(word, d)))
                    .collect(),
                line: true,
            })
            .collect();
        render_chart(
            &out.join("keyword-frequencies.svg"),
            "Keyword frequency by decade",
            "decade",
            "normalized frequency",
            &series,
        )
        .map_err(|e| e.to_string())?;
    }

    // Experiment curves and axis spectra.
    let summary: ExperimentSummary = read_json(&ws.experiment_summary(), "experiment")?;
    let cell_rows: Vec<Vec<String>> = summary
        .cells
        .iter()
        .map(|c| {
            vec![
                c.century.to_string(),
                c.condition.tag().to_string(),
                c.steps.to_string(),
                c.n.to_string(),
                fmt_value(c.mean_predicted),
                fmt_value(c.sd_predicted),
                fmt_value(c.mean_axis),
            ]
        })
        .collect();
    write_tsv(
        &out.join("experiment-cells.tsv"),
        &["century", "condition", "steps", "n", "mean_predicted", "sd_predicted", "mean_axis"],
        &cell_rows,
    )
    .map_err(|e| e.to_string())?;
    let mut curve_rows = Vec::new();
    for c in &summary.curves {
        for (x, y) in c.curve.xs.iter().zip(&c.curve.ys) {
            curve_rows.push(vec![
                c.condition.tag().to_string(),
                c.steps.to_string(),
                fmt_value(*x),
                fmt_value(*y),
            ]);
        }
    }
    write_tsv(
        &out.join("experiment-curves.tsv"),
        &["condition", "steps", "source_century", "smoothed_prediction"],
        &curve_rows,
    )
    .map_err(|e| e.to_string())?;
    let mut axis_rows = Vec::new();
    for dist in &summary.axis_distributions {
        for v in &dist.values {
            axis_rows.push(vec![
                dist.condition.tag().to_string(),
                dist.steps.to_string(),
                fmt_value(*v),
            ]);
        }
    }
    write_tsv(
        &out.join("experiment-axis-spectra.tsv"),
        &["condition", "steps", "axis_value"],
        &axis_rows,
    )
    .map_err(|e| e.to_string())?;
    if !no_charts {
        let max_steps = summary
            .cells
            .iter()
            .map(|c| c.steps)
            .max()
            .unwrap_or(0);
        let line_for = |condition: Condition, steps: u32| -> Series {
            Series {
                label: match condition {
                    Condition::Original => "original",
                    Condition::FutureDirected => "future-directed",
                    Condition::RandomDiffusion => "random-diffusion",
                },
                points: summary
                    .cells
                    .iter()
                    .filter(|c| c.condition == condition && c.steps == steps)
                    .map(|c| (c.century as f64, c.mean_predicted))
                    .collect(),
                line: true,
            }
        };
        render_chart(
            &out.join("experiment-predictions.svg"),
            &format!("Mean predicted year by source century (steps = {max_steps})"),
            "source century",
            "mean predicted year",
            &[
                line_for(Condition::Original, 0),
                line_for(Condition::FutureDirected, max_steps),
                line_for(Condition::RandomDiffusion, max_steps),
            ],
        )
        .map_err(|e| e.to_string())?;
        let axis_for = |condition: Condition, steps: u32| -> Series {
            Series {
                label: match condition {
                    Condition::Original => "original",
                    Condition::FutureDirected => "future-directed",
                    Condition::RandomDiffusion => "random-diffusion",
                },
                points: summary
                    .cells
                    .iter()
                    .filter(|c| c.condition == condition && c.steps == steps)
                    .map(|c| (c.century as f64, c.mean_axis))
                    .collect(),
                line: true,
            }
        };
        render_chart(
            &out.join("experiment-axis-spectrum.svg"),
            &format!("Mean axis projection by source century (steps = {})", summary.highlight_steps),
            "source century",
            "mean axis projection",
            &[
                axis_for(Condition::Original, 0),
                axis_for(Condition::FutureDirected, summary.highlight_steps),
                axis_for(Condition::RandomDiffusion, summary.highlight_steps),
            ],
        )
        .map_err(|e| e.to_string())?;
    }

    // Noise probe, when present.
    let noise_path = ws.noise_probe();
    if noise_path.exists() {
        let probe: artlatent::timeshift::NoiseProbe = read_json(&noise_path, "noise-probe")?;
        let rows: Vec<Vec<String>> = probe
            .predictions
            .iter()
            .enumerate()
            .map(|(i, p)| vec![i.to_string(), fmt_value(*p)])
            .collect();
        write_tsv(&out.join("noise-probe.tsv"), &["index", "predicted_year"], &rows)
            .map_err(|e| e.to_string())?;
    }

    log::info!("report: bundle written to {}", out.display());
    Ok(())
}
