//! The `resinv` verbs. Each one resolves its config (file, manifest of an
//! earlier run, or defaults), applies command-line overrides, does the work
//! and writes a manifest next to its outputs.

use std::error::Error as StdError;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use resinv_core::bimd::{identity_fusion, BimdConfig};
use resinv_core::data::{
    fit_identity, grid_to_pgm_bytes, identity_error, personalized_dataset, read_pgm, render, write_pgm, DatasetRecord,
    IdentityParams, RenderedImage, SceneParams, IDENTITY_COUNT, SCENE_CODES,
};
use resinv_core::denoiser::{load_weights, save_weights, Conditioning, DenoiserParams, ModelKind, TrainJob};
use resinv_core::inversion::{bench_inversions, reports_to_csv, InversionMethod, InversionReport, NtiSettings};
use resinv_core::manifest::{RunManifest, WeightRef, MANIFEST_FILE};
use resinv_core::pipeline::{enhance, run_ablation_suite, AblationReport, EnhanceRequest, DEFAULT_GUIDANCE};

use crate::{default_out, Command, Common, Kind, Models};

type Res<T> = Result<T, Box<dyn StdError + Send + Sync>>;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    version: u32,
    job: TrainJob,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchFile {
    version: u32,
    methods: Vec<String>,
    repeats: usize,
    guidance: f32,
    nti: NtiSettings,
    /// Images generated when no image directory is given.
    images: usize,
    image_seed: u64,
}

impl Default for BenchFile {
    fn default() -> Self {
        BenchFile {
            version: CONFIG_VERSION,
            methods: vec!["ddim".into(), "res".into(), "nti".into()],
            repeats: 5,
            guidance: 3.0,
            nti: NtiSettings::default(),
            images: 4,
            image_seed: 778,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnhanceFile {
    version: u32,
    requests: Vec<EnhanceRequest>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuseFile {
    version: u32,
    /// Source image A is rendered from this scene and identity.
    scene_code: usize,
    identity_a: IdentityParams,
    identity_b: IdentityParams,
    guidance: f32,
    mss_sweep: Vec<usize>,
    bimd: BimdConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AblateFile {
    version: u32,
    requests: usize,
    seed: u64,
    guidance: f32,
    #[serde(default)]
    bimd: Option<BimdConfig>,
}

/// One image of an image directory: `dataset.json` holds a list of these.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageEntry {
    file: String,
    record: DatasetRecord,
}

/// A config as read from `--config`: either a plain config file or the
/// manifest of an earlier run of the same command.
struct Loaded<T> {
    config: Option<T>,
    manifest: Option<RunManifest>,
}

fn load_config<T: DeserializeOwned>(verb: &str, path: Option<&Path>) -> Res<Loaded<T>> {
    let Some(path) = path else {
        return Ok(Loaded {
            config: None,
            manifest: None,
        });
    };
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| format!("{}: invalid JSON: {e}", path.display()))?;
    if RunManifest::is_manifest(&doc) {
        let manifest: RunManifest =
            serde_json::from_value(doc).map_err(|e| format!("{}: bad manifest: {e}", path.display()))?;
        if manifest.command != verb {
            return Err(format!(
                "{}: manifest is for `{}`, not `{verb}`",
                path.display(),
                manifest.command
            )
            .into());
        }
        let config = serde_json::from_value(manifest.config.clone())
            .map_err(|e| format!("{}: bad config in manifest: {e}", path.display()))?;
        return Ok(Loaded {
            config: Some(config),
            manifest: Some(manifest),
        });
    }
    let found = doc.get("version").and_then(|v| v.as_u64());
    if found != Some(CONFIG_VERSION as u64) {
        return Err(format!(
            "{}: config version {} not supported (expected {CONFIG_VERSION})",
            path.display(),
            found.map_or("missing".to_string(), |v| v.to_string())
        )
        .into());
    }
    let config = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(Loaded {
        config: Some(config),
        manifest: None,
    })
}

fn deterministic() -> bool {
    std::env::var("RESINV_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn start_manifest(verb: &str, config: &impl Serialize, common: &Common) -> Res<RunManifest> {
    let mut m = RunManifest::new(verb, serde_json::to_value(config)?);
    let requested = if deterministic() { 1 } else { common.threads.max(1) };
    if requested > 1 {
        log::warn!("only single-threaded execution is implemented; running on one thread");
    }
    // one thread and seeded RNGs make every run reproducible bit for bit
    m.threads = 1;
    m.deterministic = true;
    Ok(m)
}

/// Loads a model from the command line, or else from the manifest being
/// repeated, checking the recorded hash in the latter case.
fn load_model(name: &str, flag: &Option<PathBuf>, manifest: &Option<RunManifest>) -> Res<(PathBuf, DenoiserParams)> {
    let (path, expected) = match (flag, manifest.as_ref().and_then(|m| m.weights.get(name))) {
        (Some(p), _) => (p.clone(), None),
        (None, Some(w)) => (w.path.clone(), Some(w.sha256.clone())),
        (None, None) => return Err(format!("missing --{name} <weights>").into()),
    };
    let params = load_weights(&path).map_err(|e| format!("loading {name} model: {e}"))?;
    if let Some(hash) = expected {
        let found = WeightRef::of(&path, &params)?.sha256;
        if found != hash {
            return Err(format!("{}: weights changed since the manifest was written", path.display()).into());
        }
    }
    Ok((path, params))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Res<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn random_identity(rng: &mut ChaCha8Rng) -> IdentityParams {
    IdentityParams::from_index(rng.random_range(0..IDENTITY_COUNT)).expect("index in range")
}

pub fn run(command: Command) -> Res<()> {
    match command {
        Command::Train { common, kind } => train(&common, kind),
        Command::InvertBench {
            common,
            model,
            images,
            methods,
            repeats,
        } => invert_bench(&common, &model, &images, methods, repeats),
        Command::Enhance { common, models } => enhance_cmd(&common, &models),
        Command::Fuse { common, models, image } => fuse(&common, &models, &image),
        Command::Ablate { common, models } => ablate(&common, &models),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn train(common: &Common, kind: Option<Kind>) -> Res<()> {
    let loaded = load_config::<TrainFile>("train", common.config.as_deref())?;
    let mut file = match (loaded.config, kind) {
        (Some(f), _) => f,
        (None, Some(k)) => TrainFile {
            version: CONFIG_VERSION,
            job: TrainJob::standard(match k {
                Kind::Base => ModelKind::Base,
                Kind::Personalized => ModelKind::Personalized,
            }),
        },
        (None, None) => return Err("train needs --config or --kind".into()),
    };
    if let Some(seed) = common.seed {
        file.job.train.seed = seed;
    }
    let out = default_out("train", &common.out);
    let mut manifest = start_manifest("train", &file, common)?;
    manifest.seeds.insert("train".into(), file.job.train.seed);
    manifest.seeds.insert("data".into(), file.job.data_seed);
    manifest.schedule_hash = Some(file.job.model.schedule.hash_hex());

    let start = Instant::now();
    log::info!(
        "training {:?} model on {} samples for {} epochs",
        file.job.model.kind,
        file.job.samples,
        file.job.train.epochs
    );
    let (params, report) = file.job.run()?;
    let model_path = out.join("model.rinv");
    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    save_weights(&params, &model_path)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        writeln!(csv, "{i},{l}")?;
    }
    write_text(&out.join("loss.csv"), &csv)?;
    write_json(&out.join("train_report.json"), &report)?;
    manifest
        .weights
        .insert("model".into(), WeightRef::of(&model_path, &params)?);
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.write(&out)?;
    log::info!("final loss {:.5}; wrote {}", report.final_loss, model_path.display());
    Ok(())
}

fn load_images(dir: &Path) -> Res<Vec<(RenderedImage, DatasetRecord)>> {
    let index = dir.join("dataset.json");
    let text = fs::read_to_string(&index).map_err(|e| format!("{}: {e}", index.display()))?;
    let entries: Vec<ImageEntry> = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", index.display()))?;
    if entries.is_empty() {
        return Err(format!("{}: no images listed", index.display()).into());
    }
    entries
        .into_iter()
        .map(|e| Ok((read_pgm(&dir.join(&e.file))?, e.record)))
        .collect()
}

fn invert_bench(
    common: &Common,
    model: &Option<PathBuf>,
    images: &Option<PathBuf>,
    methods: Option<Vec<String>>,
    repeats: Option<usize>,
) -> Res<()> {
    let loaded = load_config::<BenchFile>("invert-bench", common.config.as_deref())?;
    let mut file = loaded.config.unwrap_or_default();
    if let Some(m) = methods {
        file.methods = m;
    }
    if let Some(r) = repeats {
        file.repeats = r;
    }
    if let Some(seed) = common.seed {
        file.image_seed = seed;
    }
    if common.threads != 1 {
        log::warn!("--threads is ignored in timing mode; benchmarks run on one thread");
    }
    let parsed = file
        .methods
        .iter()
        .map(|m| m.parse::<InversionMethod>())
        .collect::<Result<Vec<_>, _>>()?;
    if file.repeats < 3 {
        return Err(format!("repeats must be at least 3, got {}", file.repeats).into());
    }
    let (model_path, params) = load_model("model", model, &loaded.manifest)?;
    let out = default_out("invert-bench", &common.out);
    let mut manifest = start_manifest("invert-bench", &file, common)?;
    manifest.threads = 1;
    manifest.seeds.insert("images".into(), file.image_seed);
    manifest.schedule_hash = Some(params.schedule().hash_hex());
    manifest
        .weights
        .insert("model".into(), WeightRef::of(&model_path, &params)?);

    let items = match images {
        Some(dir) => load_images(dir)?,
        None => {
            let samples = personalized_dataset(file.images, file.image_seed)?;
            let dir = out.join("images");
            let mut entries = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                let name = format!("{i:03}.pgm");
                fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                write_pgm(&dir.join(&name), &s.image)?;
                entries.push(ImageEntry {
                    file: name,
                    record: s.record,
                });
            }
            write_json(&dir.join("dataset.json"), &entries)?;
            samples.into_iter().map(|s| (s.image, s.record)).collect()
        }
    };
    let bench_items: Vec<_> = items
        .into_iter()
        .map(|(image, r)| {
            let mut cond = Conditioning::scene(r.scene_code).with_guidance(file.guidance);
            if params.config.kind == ModelKind::Personalized {
                cond = cond.with_identity(r.identity);
            }
            (image, cond)
        })
        .collect();

    let start = Instant::now();
    let reports = bench_inversions(&params, &bench_items, &parsed, file.repeats, &file.nti)?;
    write_json(&out.join("report.json"), &reports)?;
    write_text(&out.join("report.csv"), &reports_to_csv(&reports))?;
    write_text(&out.join("report.md"), &latency_table(&reports))?;
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.write(&out)?;
    print!("{}", latency_table(&reports));
    Ok(())
}

fn latency_table(reports: &[InversionReport]) -> String {
    let reference = reports.iter().find(|r| r.method == "res").map(|r| r.latency_s);
    let mut s = String::from("| Method | T | Inner iters | Latency (s) | vs. res | Max abs err | MSE |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in reports {
        let rel = reference.map_or("-".to_string(), |t| format!("{:.2}x", r.latency_s / t));
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.4} | {} | {:.2e} | {:.2e} |",
            r.method, r.steps, r.inner_iters, r.latency_s, rel, r.max_abs_err, r.mse
        );
    }
    s
}

fn enhance_cmd(common: &Common, models: &Models) -> Res<()> {
    let loaded = load_config::<EnhanceFile>("enhance", common.config.as_deref())?;
    let (base_path, base) = load_model("base", &models.base, &loaded.manifest)?;
    let (pers_path, pers) = load_model("personalized", &models.personalized, &loaded.manifest)?;
    let steps = pers.schedule().steps();
    let mut file = loaded.config.unwrap_or_else(|| {
        let seed = common.seed.unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = rng.random_range(0..SCENE_CODES);
        EnhanceFile {
            version: CONFIG_VERSION,
            requests: vec![EnhanceRequest::new(scene, random_identity(&mut rng), steps, seed)],
        }
    });
    if let Some(seed) = common.seed {
        for (i, r) in file.requests.iter_mut().enumerate() {
            r.seed = seed + i as u64;
        }
    }
    if file.requests.is_empty() {
        return Err("enhance config lists no requests".into());
    }
    let out = default_out("enhance", &common.out);
    let mut manifest = start_manifest("enhance", &file, common)?;
    for (i, r) in file.requests.iter().enumerate() {
        manifest.seeds.insert(format!("request-{i:03}"), r.seed);
    }
    manifest.schedule_hash = Some(pers.schedule().hash_hex());
    manifest
        .weights
        .insert("base".into(), WeightRef::of(&base_path, &base)?);
    manifest
        .weights
        .insert("personalized".into(), WeightRef::of(&pers_path, &pers)?);

    let start = Instant::now();
    for (i, req) in file.requests.iter().enumerate() {
        let result = enhance(req, &base, &pers)?;
        let mut run = manifest.clone();
        run.config = serde_json::to_value(req)?;
        result.write_dir(&out.join(format!("{i:03}")), &run.to_value()?)?;
        log::info!(
            "request {i}: identity error base {:.3}, swap {:.3}, enhanced {:.3}",
            result.fits[0].error,
            result.fits[1].error,
            result.fits[2].error
        );
    }
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.write(&out)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct FrameMetrics {
    mss: usize,
    lambda_fwd: f32,
    lambda_bkwd: f32,
    sign_mode: resinv_core::bimd::SignMode,
    box_mse_to_source: f32,
    identity_error_a: f32,
    identity_error_b: f32,
}

fn fuse(common: &Common, models: &Models, image: &Option<PathBuf>) -> Res<()> {
    let loaded = load_config::<FuseFile>("fuse", common.config.as_deref())?;
    let (pers_path, pers) = load_model("personalized", &models.personalized, &loaded.manifest)?;
    let steps = pers.schedule().steps();
    let file = loaded.config.unwrap_or_else(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
        FuseFile {
            version: CONFIG_VERSION,
            scene_code: rng.random_range(0..SCENE_CODES),
            identity_a: random_identity(&mut rng),
            identity_b: random_identity(&mut rng),
            guidance: DEFAULT_GUIDANCE,
            mss_sweep: vec![0, steps / 4, steps / 2, 3 * steps / 4, steps],
            bimd: BimdConfig::for_steps(steps),
        }
    });
    let source = match image {
        Some(p) => read_pgm(p)?,
        None => render(&SceneParams::from_code(file.scene_code)?, &file.identity_a)?,
    };
    let out = default_out("fuse", &common.out);
    let mut manifest = start_manifest("fuse", &file, common)?;
    if let Some(seed) = common.seed {
        manifest.seeds.insert("config".into(), seed);
    }
    manifest.schedule_hash = Some(pers.schedule().hash_hex());
    manifest
        .weights
        .insert("personalized".into(), WeightRef::of(&pers_path, &pers)?);

    let start = Instant::now();
    let cond_b = Conditioning::scene(file.scene_code)
        .with_identity(file.identity_b)
        .with_guidance(file.guidance);
    let frames = identity_fusion(&pers, &source, &cond_b, &file.mss_sweep, &file.bimd)?;
    fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    let mut metrics = Vec::with_capacity(frames.len());
    for (frame, &mss) in frames.iter().zip(&file.mss_sweep) {
        write_pgm(&out.join(format!("frame_mss{mss:03}.pgm")), frame)?;
        let fit = fit_identity(frame).params;
        metrics.push(FrameMetrics {
            mss,
            lambda_fwd: file.bimd.lambda_fwd,
            lambda_bkwd: file.bimd.lambda_bkwd,
            sign_mode: file.bimd.sign_mode,
            box_mse_to_source: frame.box_mse(&source),
            identity_error_a: identity_error(&fit, &file.identity_a),
            identity_error_b: identity_error(&fit, &file.identity_b),
        });
    }
    write_pgm(&out.join("source.pgm"), &source)?;
    let mut strip = vec![source.clone()];
    strip.extend(frames.iter().cloned());
    fs::write(out.join("fusion_grid.pgm"), grid_to_pgm_bytes(&strip, strip.len())?)?;
    write_json(&out.join("fusion.json"), &metrics)?;
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.write(&out)?;
    Ok(())
}

fn ablate(common: &Common, models: &Models) -> Res<()> {
    let loaded = load_config::<AblateFile>("ablate", common.config.as_deref())?;
    let (base_path, base) = load_model("base", &models.base, &loaded.manifest)?;
    let (pers_path, pers) = load_model("personalized", &models.personalized, &loaded.manifest)?;
    let steps = pers.schedule().steps();
    let mut file = loaded.config.unwrap_or(AblateFile {
        version: CONFIG_VERSION,
        requests: 20,
        seed: 99,
        guidance: DEFAULT_GUIDANCE,
        bimd: None,
    });
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(file.seed);
    let requests: Vec<EnhanceRequest> = (0..file.requests)
        .map(|i| {
            let scene = rng.random_range(0..SCENE_CODES);
            let mut r = EnhanceRequest::new(scene, random_identity(&mut rng), steps, file.seed * 1000 + i as u64);
            r.guidance = file.guidance;
            if let Some(b) = file.bimd {
                r.bimd = b;
            }
            r
        })
        .collect();
    let out = default_out("ablate", &common.out);
    let mut manifest = start_manifest("ablate", &file, common)?;
    manifest.seeds.insert("requests".into(), file.seed);
    manifest.schedule_hash = Some(pers.schedule().hash_hex());
    manifest
        .weights
        .insert("base".into(), WeightRef::of(&base_path, &base)?);
    manifest
        .weights
        .insert("personalized".into(), WeightRef::of(&pers_path, &pers)?);

    let start = Instant::now();
    let report = run_ablation_suite(&base, &pers, &requests)?;
    write_json(&out.join("ablation.json"), &report)?;
    write_text(&out.join("ablation.md"), &report.to_markdown())?;
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    manifest.write(&out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Res<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn report(runs: &[PathBuf], out: &Option<PathBuf>) -> Res<()> {
    let mut md = String::new();
    let mut grids: Vec<(String, Vec<u8>)> = Vec::new();
    for dir in runs {
        let manifest = RunManifest::read(&dir.join(MANIFEST_FILE))?;
        writeln!(md, "## {} ({})\n", manifest.command, dir.display())?;
        match manifest.command.as_str() {
            "train" => {
                let text = fs::read_to_string(dir.join("loss.csv"))?;
                let losses: Vec<&str> = text.lines().skip(1).collect();
                let last = losses.last().and_then(|l| l.split(',').nth(1)).unwrap_or("-");
                writeln!(md, "{} epochs, final loss {last}\n", losses.len())?;
            }
            "invert-bench" => {
                let reports: Vec<InversionReport> = read_json(&dir.join("report.json"))?;
                md.push_str(&latency_table(&reports));
            }
            "ablate" => {
                let report: AblationReport = read_json(&dir.join("ablation.json"))?;
                md.push_str(&report.to_markdown());
            }
            "fuse" => {
                let frames: Vec<FrameMetrics> = read_json(&dir.join("fusion.json"))?;
                md.push_str(
                    "| mss | box MSE to source | identity error vs A | identity error vs B |\n|---|---|---|---|\n",
                );
                for f in frames {
                    writeln!(
                        md,
                        "| {} | {:.4} | {:.3} | {:.3} |",
                        f.mss, f.box_mse_to_source, f.identity_error_a, f.identity_error_b
                    )?;
                }
            }
            "enhance" => {
                md.push_str("| request | base | swap | enhanced | exterior MSE to swap |\n|---|---|---|---|---|\n");
                let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.join("metrics.json").is_file())
                    .collect();
                subdirs.sort();
                let mut images = Vec::new();
                for sub in &subdirs {
                    let m: serde_json::Value = read_json(&sub.join("metrics.json"))?;
                    let err = |k: &str| m[k]["error"].as_f64().unwrap_or(f64::NAN);
                    writeln!(
                        md,
                        "| {} | {:.3} | {:.3} | {:.3} | {:.5} |",
                        sub.file_name().unwrap_or_default().to_string_lossy(),
                        err("base"),
                        err("swapped"),
                        err("enhanced"),
                        m["exterior_mse_to_swap"].as_f64().unwrap_or(f64::NAN)
                    )?;
                    for name in ["base.pgm", "swap.pgm", "enhanced.pgm"] {
                        images.push(read_pgm(&sub.join(name))?);
                    }
                }
                if !images.is_empty() {
                    let name = format!("{}_grid.pgm", dir.file_name().unwrap_or_default().to_string_lossy());
                    grids.push((name, grid_to_pgm_bytes(&images, 3)?));
                }
            }
            other => writeln!(md, "(no summary for `{other}` runs)")?,
        }
        md.push('\n');
    }
    match out {
        Some(dir) => {
            write_text(&dir.join("report.md"), &md)?;
            for (name, bytes) in grids {
                fs::write(dir.join(name), bytes)?;
            }
        }
        None => print!("{md}"),
    }
    Ok(())
}
