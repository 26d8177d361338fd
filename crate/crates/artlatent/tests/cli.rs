//! End-to-end runs of the pipeline binary over a small mock-backed corpus.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use artlatent::config::{ExclusionPaths, LowessParams, Paths, PipelineConfig};
use artlatent::corpus::FilterConfig;
use artlatent::gateway::{BackendDescriptor, ImageTensor, MockFixture, MockProfile};
use artlatent::timeshift::ExperimentPlan;

const BIN: &str = env!("CARGO_BIN_EXE_artlatent");

struct Fixture {
    _dir: tempfile::TempDir,
    config_path: PathBuf,
    workspace: PathBuf,
}

/// 30 paintings across the 1500s-1900s with per-century prompt vocabulary,
/// flat-color images, and a mock profile keyed by their content digests.
fn build_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();

    let mut meta = String::from(
        "painting_name,artist_name,Date,Style,Field,Genre,Nationality,image_path\n",
    );
    let mut fixtures = HashMap::new();
    let artists = ["alice smith", "bob jones"];
    let styles = ["baroque", "cubism"];
    let mut i = 0usize;
    for century in [1500, 1600, 1700, 1800, 1900] {
        for k in 0..6usize {
            let decade = century + (k as i32) * 10;
            let name = format!("p{i}.png");
            let r = (20 + i * 9) as u8;
            let raw = vec![[r, 40u8, 200u8]; 512 * 512]
                .into_iter()
                .flatten()
                .collect::<Vec<u8>>();
            let tensor = ImageTensor::from_raw(raw.clone()).unwrap();
            let img: image::RgbImage =
                image::ImageBuffer::from_raw(512, 512, raw).unwrap();
            img.save(images.join(&name)).unwrap();
            fixtures.insert(
                format!("{:016x}", tensor.digest()),
                MockFixture {
                    year_signal: decade as f32,
                    style_signal: (1990 - decade) as f32,
                    prompt: Some(format!(
                        "era{century} canvas {} light",
                        ["ochre", "umber", "azure"][k % 3]
                    )),
                },
            );
            meta.push_str(&format!(
                "work {i},{},{decade},{},painting,portrait,french,{name}\n",
                artists[i % 2],
                styles[i % 2],
            ));
            i += 1;
        }
    }
    let metadata = root.join("meta.csv");
    std::fs::write(&metadata, meta).unwrap();

    let profile = MockProfile {
        fixtures,
        century_vocab: [1500, 1600, 1700, 1800, 1900]
            .into_iter()
            .map(|c| (format!("era{c}"), c))
            .collect(),
        century_style: [1500, 1600, 1700, 1800, 1900].into_iter().map(|c| (c, 0.0)).collect(),
        noise_year: 1950.0,
        noise_style: 120.0,
        default_prompt: None,
        artist_flavors: vec![],
    };
    let profile_path = root.join("mock.json");
    profile.save(&profile_path).unwrap();

    let mut experiment = ExperimentPlan::new(vec![1600, 1700, 1800, 1900], 7);
    experiment.per_century = 4;
    experiment.steps = vec![1, 2];
    experiment.ddim_steps = 4;
    let mut cfg = PipelineConfig {
        paths: Paths {
            metadata,
            images,
            workspace: root.join("ws"),
        },
        image_column: "image_path".into(),
        filter: FilterConfig {
            keep_field_keywords: vec!["painting".into()],
            ..Default::default()
        },
        backend: BackendDescriptor::Mock {
            mock_profile: profile_path,
            checkpoint_id: "mock-512-v1".into(),
        },
        split: Default::default(),
        gbt: Default::default(),
        lowess: LowessParams::default(),
        pca_components: 2,
        distance_budget: 1_000,
        tfidf_l2_normalize: true,
        min_support: 1,
        projection: artlatent::analytics::ProjectionMethod::Pca,
        experiment,
        exclusions: ExclusionPaths::default(),
        noise_probe_n: 5,
        seed: 3,
    };
    cfg.gbt.n_trees = 40;
    cfg.gbt.max_depth = 3;
    cfg.gbt.learning_rate = 0.3;
    let config_path = root.join("config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    Fixture { workspace: cfg.paths.workspace.clone(), _dir: dir, config_path }
}

fn run(fixture: &Fixture, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(&fixture.config_path)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_end_to_end() {
    let fx = build_fixture();
    let ws = &fx.workspace;

    // report before anything exists: exit 1 listing every missing artifact.
    let out = run(&fx, &["report"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing artifacts"), "stderr: {stderr}");
    assert!(stderr.contains("records.json"));
    assert!(stderr.contains("summary.json"));

    // eval-year before train-year: exit 1 naming the expected model path.
    assert_ok(&run(&fx, &["ingest"]), "ingest");
    assert_ok(&run(&fx, &["embed", "--space", "c"]), "embed c");
    let out = run(&fx, &["eval-year", "--space", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("models/year-c"));

    assert_ok(&run(&fx, &["embed", "--space", "a"]), "embed a");
    assert_ok(&run(&fx, &["pca", "--space", "c"]), "pca");
    assert_ok(&run(&fx, &["distances"]), "distances");
    assert_ok(&run(&fx, &["project2d", "--space", "c"]), "project2d");
    assert_ok(&run(&fx, &["train-year", "--space", "c"]), "train-year");
    assert_ok(&run(&fx, &["eval-year", "--space", "c"]), "eval-year");
    assert_ok(&run(&fx, &["keywords"]), "keywords");
    assert_ok(&run(&fx, &["trends"]), "trends");
    assert_ok(&run(&fx, &["century-prompts"]), "century-prompts");
    assert_ok(&run(&fx, &["experiment"]), "experiment");
    assert_ok(&run(&fx, &["noise-probe"]), "noise-probe");
    assert_ok(&run(&fx, &["report"]), "report");

    for artifact in [
        "corpus/records.json",
        "corpus/drop_report.json",
        "embeddings/c/manifest.json",
        "embeddings/a/manifest.json",
        "pca/c/manifest.json",
        "analysis/distances.json",
        "analysis/projection2d-c.tsv",
        "models/year-c/model.json",
        "analysis/eval-year-c.json",
        "prompts/keywords.json",
        "prompts/century_prompts.json",
        "analysis/trends.json",
        "experiment/summary.json",
        "analysis/noise_probe.json",
        "report/eval-year-c.tsv",
        "report/eval-year-c.svg",
        "report/pc-projections-c.tsv",
        "report/keyword-frequencies.tsv",
        "report/experiment-cells.tsv",
        "report/experiment-curves.tsv",
        "report/experiment-axis-spectra.tsv",
        "report/experiment-predictions.svg",
        "report/noise-probe.tsv",
    ] {
        assert!(ws.join(artifact).exists(), "missing {artifact}");
    }

    // All 30 rows survive the filter.
    let records: Vec<artlatent::corpus::PaintingRecord> =
        serde_json::from_slice(&std::fs::read(ws.join("corpus/records.json")).unwrap()).unwrap();
    assert_eq!(records.len(), 30);

    // Keyword sets exist for each represented century.
    let sets: BTreeMap<i32, artlatent::culturomics::CenturyKeywordSet> =
        serde_json::from_slice(&std::fs::read(ws.join("prompts/keywords.json")).unwrap()).unwrap();
    assert_eq!(sets.keys().copied().collect::<Vec<_>>(), vec![1500, 1600, 1700, 1800, 1900]);

    // Idempotency: a second run without --force skips and leaves bytes alone.
    let before = snapshot(ws);
    assert_ok(&run(&fx, &["ingest"]), "ingest rerun");
    assert_ok(&run(&fx, &["embed", "--space", "c"]), "embed rerun");
    assert_ok(&run(&fx, &["experiment"]), "experiment rerun");
    assert_eq!(before, snapshot(ws));

    // --force re-runs and still reproduces identical artifacts.
    assert_ok(&run(&fx, &["--force", "embed", "--space", "c"]), "forced embed");
    assert_eq!(before, snapshot(ws));
}

/// Byte snapshot of every artifact (logs change per run and are excluded).
fn snapshot(ws: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![ws.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            let rel = path.strip_prefix(ws).unwrap().to_string_lossy().to_string();
            if rel.starts_with("logs") {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn usage_errors_exit_2() {
    let out = Command::new(BIN).arg("--bogus-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN)
        .args(["embed", "--space", "z", "--config", "/nonexistent.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, b"{}").unwrap();
    let out = Command::new(BIN)
        .args(["--config", path.to_str().unwrap(), "ingest"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn space_a_year_model_trains_too() {
    let fx = build_fixture();
    assert_ok(&run(&fx, &["ingest"]), "ingest");
    assert_ok(&run(&fx, &["embed", "--space", "a"]), "embed a");
    assert_ok(&run(&fx, &["train-year", "--space", "a"]), "train-year a");
    assert_ok(&run(&fx, &["eval-year", "--space", "a"]), "eval-year a");
    let report: serde_json::Value = serde_json::from_slice(
        &std::fs::read(fx.workspace.join("analysis/eval-year-a.json")).unwrap(),
    )
    .unwrap();
    assert!(report["r2"].is_number());
}
