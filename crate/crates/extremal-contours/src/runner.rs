//! Command drivers behind the CLI verbs: explain, sweep, robustness,
//! metrics. Each writes its artifacts atomically under the output
//! directory together with a manifest that can replay the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{cosine_similarity, BackendSpec, ModelBackend};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::geometry::{self, ContourParams};
use crate::image::ImageTensor;
use crate::io;
use crate::metrics::{
    bootstrap_ci, complexity_entropy, faithfulness_correlation, relevance_mass_accuracy,
    relevance_rank_accuracy, sparseness_gini, AttributionMap, FaithfulnessConfig,
};
use crate::optim::{optimize, sweep_target_area, LossWeights, OptimConfig, StopReason};
use crate::perturb::{compose_preserve, gaussian_blur};
use crate::raster::{rasterize, MaskField, RasterConfig};

/// Reproducibility record written next to every run's artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub mode: String,
    /// Fully resolved configuration (defaults + file + flags).
    pub config: RunConfig,
    /// SHA-256 of every input file consumed.
    pub input_hashes: BTreeMap<String, String>,
    pub stop_reason: Option<StopReason>,
    pub wall_clock_seconds: f64,
    /// Relative path of the final contour JSON, when the mode emits one.
    pub contour_json: Option<String>,
}

/// Artifact listing returned by [`run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
}

pub fn run(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    match config.mode {
        Mode::Explain => cmd_explain(config),
        Mode::Sweep => cmd_sweep(config),
        Mode::Robustness => cmd_robustness(config),
        Mode::Metrics => cmd_metrics(config),
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn build_backend(config: &RunConfig, x: &ImageTensor) -> Result<Box<dyn ModelBackend>> {
    let spec = BackendSpec::parse(&config.backend)?;
    let backend = spec.build(x.height(), x.width(), x.channels())?;
    let info = backend.info();
    if info.height != x.height() || info.width != x.width() || info.channels != x.channels() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}x{}", info.height, info.width, info.channels),
            got: format!("{}x{}x{}", x.height(), x.width(), x.channels()),
        });
    }
    Ok(backend)
}

fn contours_json(contours: &[ContourParams]) -> Result<Vec<u8>> {
    let text = if contours.len() == 1 {
        serde_json::to_string_pretty(&contours[0])
    } else {
        serde_json::to_string_pretty(contours)
    }
    .map_err(|e| Error::Config(format!("contour serialization: {e}")))?;
    Ok(format!("{text}\n").into_bytes())
}

fn write_manifest(
    out_dir: &Path,
    config: &RunConfig,
    input_hashes: BTreeMap<String, String>,
    stop_reason: Option<StopReason>,
    started: Instant,
    contour_json: Option<&str>,
) -> Result<PathBuf> {
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        mode: config.mode.to_string(),
        config: config.clone(),
        input_hashes,
        stop_reason,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        contour_json: contour_json.map(str::to_string),
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    io::atomic_write(&path, format!("{text}\n").as_bytes())?;
    Ok(path)
}

struct LoadedInput {
    x: ImageTensor,
    hashes: BTreeMap<String, String>,
}

fn load_input(config: &RunConfig) -> Result<LoadedInput> {
    let path = config.input.as_ref().expect("validated input");
    let x = io::load_image_normalized(path, config.resolution)?;
    let mut hashes = BTreeMap::new();
    hashes.insert(path.display().to_string(), file_sha256(path)?);
    Ok(LoadedInput { x, hashes })
}

fn cmd_explain(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let input = load_input(config)?;
    let mut backend = build_backend(config, &input.x)?;

    let initial = initial_contours_for_overlay(config)?;
    let outcome = optimize(
        &input.x,
        backend.as_mut(),
        config.contours,
        &config.weights,
        &config.optim,
        &config.blur,
    )?;

    let out = &config.out_dir;
    let mut artifacts = Vec::new();

    let contour_path = out.join("contour.json");
    io::atomic_write(&contour_path, &contours_json(&outcome.contours)?)?;
    artifacts.push(contour_path);

    let overlay = io::contour_overlay(&input.x, &initial, &outcome.contours);
    let overlay_path = out.join("overlay.png");
    io::atomic_write(&overlay_path, &overlay.to_png_bytes()?)?;
    artifacts.push(overlay_path);

    let mask_png = out.join("mask.png");
    io::atomic_write(&mask_png, &io::mask_png_bytes(&outcome.mask)?)?;
    artifacts.push(mask_png);

    let mask_dump = out.join("mask.fdump");
    io::atomic_write(&mask_dump, &io::mask_dump_bytes(&outcome.mask))?;
    artifacts.push(mask_dump);

    let trace_path = out.join("trace.csv");
    io::atomic_write(&trace_path, outcome.trace.to_csv().as_bytes())?;
    artifacts.push(trace_path);

    artifacts.push(write_manifest(
        out,
        config,
        input.hashes,
        Some(outcome.trace.stop),
        started,
        Some("contour.json"),
    )?);
    Ok(RunSummary {
        out_dir: out.clone(),
        artifacts,
    })
}

fn initial_contours_for_overlay(config: &RunConfig) -> Result<Vec<ContourParams>> {
    let centers = match &config.optim.initial_centers {
        Some(c) => c.clone(),
        None if config.contours == 1 => vec![[0.0, 0.0]],
        None => geometry::ring_starts(config.contours),
    };
    centers
        .into_iter()
        .map(|c| geometry::init_at(c, config.optim.harmonics))
        .collect()
}

/// Mean preserve-similarity of seeded random circles with the target
/// area fraction; the baseline column of the sweep CSV.
fn random_circle_baseline(
    x: &ImageTensor,
    x_blur: &ImageTensor,
    backend: &mut dyn ModelBackend,
    target_area: f64,
    samples: usize,
    seed: u64,
    tau: f64,
) -> Result<f64> {
    let e_o = backend.embed(x)?;
    let radius = (target_area * crate::geometry::DOMAIN_AREA / std::f64::consts::PI).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        let center = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
        let circle = ContourParams {
            center,
            r0: radius,
            coeffs: vec![],
            r_min: 0.0,
            r_max: radius + 1.0,
        };
        let mask = rasterize(&circle, x.height(), x.width(), &RasterConfig::new(tau))?;
        let x_p = compose_preserve(x, x_blur, &mask)?;
        acc += cosine_similarity(&backend.embed(&x_p)?, &e_o)?;
    }
    Ok(acc / samples as f64)
}

fn cmd_sweep(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let input = load_input(config)?;
    let mut backend = build_backend(config, &input.x)?;

    let points = sweep_target_area(
        &input.x,
        backend.as_mut(),
        &config.alphas,
        &config.weights,
        &config.optim,
        &config.blur,
    )?;

    let x_blur = gaussian_blur(&input.x, &config.blur)?;
    let out = &config.out_dir;
    let mut artifacts = Vec::new();
    let mut csv = String::from(
        "alpha_target,alpha_achieved,cos_preserve,cos_delete,prob_preserve,prob_delete,random_preserve\n",
    );
    for (i, p) in points.iter().enumerate() {
        let baseline = random_circle_baseline(
            &input.x,
            &x_blur,
            backend.as_mut(),
            p.target_area,
            config.random_baseline_samples,
            config.seed.wrapping_add(i as u64),
            config.optim.tau_inf,
        )?;
        let fmt_opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.target_area,
            p.achieved_area,
            p.cos_preserve,
            p.cos_delete,
            fmt_opt(p.prob_preserve),
            fmt_opt(p.prob_delete),
            baseline
        ));
    }
    let csv_path = out.join("sweep.csv");
    io::atomic_write(&csv_path, csv.as_bytes())?;
    artifacts.push(csv_path);

    artifacts.push(write_manifest(out, config, input.hashes, None, started, None)?);
    Ok(RunSummary {
        out_dir: out.clone(),
        artifacts,
    })
}

fn cmd_robustness(config: &RunConfig) -> Result<RunSummary> {
    if config.starts <= 1 {
        eprintln!("warning: robustness with a single start degenerates; running explain instead");
        let mut fallback = config.clone();
        fallback.mode = Mode::Explain;
        return cmd_explain(&fallback);
    }
    let started = Instant::now();
    let input = load_input(config)?;

    let starts = if config.starts == 9 {
        geometry::grid_starts()
    } else {
        // evenly spread fallback for non-default start counts
        geometry::ring_starts(config.starts)
    };

    let out = &config.out_dir;
    let mut artifacts = Vec::new();

    // one independent run per start, isolated backend instances
    let spec = BackendSpec::parse(&config.backend)?;
    let runs: Vec<Result<(MaskField, Vec<ContourParams>)>> = starts
        .par_iter()
        .map(|&start| {
            let mut backend = spec.build(input.x.height(), input.x.width(), input.x.channels())?;
            let optim = OptimConfig {
                initial_centers: Some(vec![start]),
                ..config.optim.clone()
            };
            let outcome = optimize(
                &input.x,
                backend.as_mut(),
                1,
                &config.weights,
                &optim,
                &config.blur,
            )?;
            Ok((outcome.mask, outcome.contours))
        })
        .collect();
    let mut masks = Vec::with_capacity(runs.len());
    for (i, r) in runs.into_iter().enumerate() {
        let (mask, contours) = r?;
        let dir = out.join(format!("start_{i}"));
        let cpath = dir.join("contour.json");
        io::atomic_write(&cpath, &contours_json(&contours)?)?;
        artifacts.push(cpath);
        let mpath = dir.join("mask.png");
        io::atomic_write(&mpath, &io::mask_png_bytes(&mask)?)?;
        artifacts.push(mpath);
        masks.push(mask);
    }

    let mut iou_csv = String::from("run");
    for j in 0..masks.len() {
        iou_csv.push_str(&format!(",start_{j}"));
    }
    iou_csv.push('\n');
    for (i, a) in masks.iter().enumerate() {
        iou_csv.push_str(&format!("start_{i}"));
        for b in &masks {
            iou_csv.push_str(&format!(",{}", a.binary_iou(b)));
        }
        iou_csv.push('\n');
    }
    let iou_path = out.join("iou_matrix.csv");
    io::atomic_write(&iou_path, iou_csv.as_bytes())?;
    artifacts.push(iou_path);

    // spectral sweep from the default start
    let sweep_runs: Vec<Result<(f64, f64, [f64; 2])>> = config
        .lambda_r_sweep
        .par_iter()
        .map(|&lambda_r| {
            let mut backend = spec.build(input.x.height(), input.x.width(), input.x.channels())?;
            let weights = LossWeights {
                lambda_r,
                ..config.weights.clone()
            };
            let outcome = optimize(
                &input.x,
                backend.as_mut(),
                1,
                &weights,
                &config.optim,
                &config.blur,
            )?;
            let spectral: f64 = outcome
                .contours
                .iter()
                .map(crate::geometry::spectral_penalty)
                .sum();
            Ok((lambda_r, spectral, outcome.mask.binary_centroid()))
        })
        .collect();
    let mut spec_csv = String::from("lambda_r,spectral,centroid_x,centroid_y\n");
    for r in sweep_runs {
        let (lambda_r, spectral, centroid) = r?;
        spec_csv.push_str(&format!(
            "{},{},{},{}\n",
            lambda_r, spectral, centroid[0], centroid[1]
        ));
    }
    let spec_path = out.join("spectral_sweep.csv");
    io::atomic_write(&spec_path, spec_csv.as_bytes())?;
    artifacts.push(spec_path);

    artifacts.push(write_manifest(out, config, input.hashes, None, started, None)?);
    Ok(RunSummary {
        out_dir: out.clone(),
        artifacts,
    })
}

#[derive(Debug, Clone, Serialize)]
struct MetricRow {
    image_id: String,
    rka: f64,
    rma: f64,
    complexity: f64,
    sparseness: f64,
    faithfulness: f64,
}

fn metric_row(
    config: &RunConfig,
    spec: &BackendSpec,
    entry: &io::DatasetEntry,
    index: usize,
) -> Result<MetricRow> {
    let x = io::load_image_normalized(&entry.image, config.resolution)?;
    let ann = io::load_annotation(&entry.annotation, x.height(), x.width())?;
    let mut backend = spec.build(x.height(), x.width(), x.channels())?;

    let optim = OptimConfig {
        seed: config.optim.seed.wrapping_add(index as u64),
        ..config.optim.clone()
    };
    let outcome = optimize(
        &x,
        backend.as_mut(),
        config.contours,
        &config.weights,
        &optim,
        &config.blur,
    )?;
    let attr = AttributionMap::from_mask(&outcome.mask);

    let faith_cfg = FaithfulnessConfig {
        seed: config.faithfulness.seed.wrapping_add(index as u64),
        blur: config.blur,
        ..config.faithfulness.clone()
    };
    let faithfulness = faithfulness_correlation(&attr, &x, backend.as_mut(), &faith_cfg)?;

    let image_id = entry
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| format!("image_{index}"));
    Ok(MetricRow {
        image_id,
        rka: relevance_rank_accuracy(&attr, &ann)?,
        rma: relevance_mass_accuracy(&attr, &ann)?,
        complexity: complexity_entropy(&attr)?,
        sparseness: sparseness_gini(&attr)?,
        faithfulness,
    })
}

fn cmd_metrics(config: &RunConfig) -> Result<RunSummary> {
    let started = Instant::now();
    let manifest_path = config.dataset.as_ref().expect("validated dataset");
    let entries = io::parse_dataset_manifest(manifest_path)?;
    if entries.is_empty() {
        return Err(Error::Config(format!(
            "{}: dataset manifest is empty",
            manifest_path.display()
        )));
    }

    let mut input_hashes = BTreeMap::new();
    input_hashes.insert(
        manifest_path.display().to_string(),
        file_sha256(manifest_path)?,
    );
    // pair availability decides up front which rows run; unreadable
    // annotations are skipped with a warning
    let mut usable = Vec::new();
    let mut skipped = 0usize;
    for e in &entries {
        if e.annotation.is_file() && e.image.is_file() {
            input_hashes.insert(e.image.display().to_string(), file_sha256(&e.image)?);
            input_hashes.insert(
                e.annotation.display().to_string(),
                file_sha256(&e.annotation)?,
            );
            usable.push(e.clone());
        } else {
            skipped += 1;
            eprintln!(
                "warning: skipping {} (missing image or annotation)",
                e.image.display()
            );
        }
    }
    if skipped * 2 > entries.len() {
        return Err(Error::Config(format!(
            "{skipped} of {} dataset rows are unusable",
            entries.len()
        )));
    }

    let spec = BackendSpec::parse(&config.backend)?;
    let compute = || -> Vec<Result<MetricRow>> {
        usable
            .par_iter()
            .enumerate()
            .map(|(i, e)| metric_row(config, &spec, e, i))
            .collect()
    };
    let results = if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(compute)
    } else {
        compute()
    };
    let rows: Vec<MetricRow> = results.into_iter().collect::<Result<_>>()?;

    let out = &config.out_dir;
    let mut artifacts = Vec::new();

    let mut csv = String::from("image_id,rka,rma,complexity,sparseness,faithfulness\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.image_id, r.rka, r.rma, r.complexity, r.sparseness, r.faithfulness
        ));
    }
    let csv_path = out.join("metrics.csv");
    io::atomic_write(&csv_path, csv.as_bytes())?;
    artifacts.push(csv_path);

    let mut summary = serde_json::Map::new();
    summary.insert("images".into(), serde_json::json!(rows.len()));
    let metric =
        |name: &str, values: Vec<f64>, summary: &mut serde_json::Map<String, serde_json::Value>| {
            let (mean, lo, hi) = if values.len() >= 2 {
                bootstrap_ci(&values, 0.95, 10000, config.seed).unwrap_or((f64::NAN, f64::NAN, f64::NAN))
            } else {
                (values[0], values[0], values[0])
            };
            summary.insert(
                name.into(),
                serde_json::json!({"mean": mean, "ci_lo": lo, "ci_hi": hi}),
            );
        };
    metric("rka", rows.iter().map(|r| r.rka).collect(), &mut summary);
    metric("rma", rows.iter().map(|r| r.rma).collect(), &mut summary);
    metric(
        "complexity",
        rows.iter().map(|r| r.complexity).collect(),
        &mut summary,
    );
    metric(
        "sparseness",
        rows.iter().map(|r| r.sparseness).collect(),
        &mut summary,
    );
    metric(
        "faithfulness",
        rows.iter().map(|r| r.faithfulness).collect(),
        &mut summary,
    );
    let summary_path = out.join("summary.json");
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(summary))
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    io::atomic_write(&summary_path, format!("{text}\n").as_bytes())?;
    artifacts.push(summary_path);

    artifacts.push(write_manifest(out, config, input_hashes, None, started, None)?);
    Ok(RunSummary {
        out_dir: out.clone(),
        artifacts,
    })
}
