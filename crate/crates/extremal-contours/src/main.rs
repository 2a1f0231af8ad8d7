use std::io::{stdin, stdout, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use extremal_contours::backend::{external::serve_backend, BackendSpec};
use extremal_contours::config::{parse_alpha_list, Mode, RunConfig};
use extremal_contours::error::{Error, Result};
use extremal_contours::runner;

/// Explain image classifiers with smooth star-convex contour masks
/// optimized under an extremal preserve/delete objective.
#[derive(Parser)]
#[command(name = "extremal-contours", version, about)]
struct Cli {
    /// TOML configuration file; command-line flags win over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed recorded in the manifest; runs repeat bit-identically.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Backend spec: `planted:disc=CX,CY,R[;...][;pool=P]`,
    /// `linear:dim=D;seed=S`, `external:cmd=...` or `external:tcp=HOST:PORT`.
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Worker pool width for dataset commands.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct InputArgs {
    /// Input image (8-bit PNG or PPM).
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize contours for one image and write overlay, mask, contour
    /// JSON, trace and manifest.
    Explain {
        #[command(flatten)]
        input: InputArgs,
        /// Number of contours to optimize jointly.
        #[arg(long)]
        contours: Option<usize>,
    },
    /// Fixed-area runs over a grid of target fractions; writes the
    /// area-fidelity curve CSV.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        /// Comma-separated target area fractions, e.g. 0.1,0.2,0.3.
        #[arg(long)]
        alphas: Option<String>,
    },
    /// Multi-start + spectral-weight sweep; writes the pairwise IoU
    /// matrix and per-run spectral penalties.
    Robustness {
        #[command(flatten)]
        input: InputArgs,
        /// Number of start centers (9 = the 3×3 grid).
        #[arg(long)]
        starts: Option<usize>,
    },
    /// Per-image explanation metrics over a dataset manifest, with
    /// bootstrap confidence intervals.
    Metrics {
        /// Manifest with one `image_path annotation_path` pair per line.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Serve a builtin backend over stdin/stdout using the line-JSON
    /// wire protocol (for exercising the external-backend transport).
    Serve {
        /// Input dimensions the served backend accepts.
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.optim.seed = seed;
        config.faithfulness.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(backend) = &cli.backend {
        config.backend = backend.clone();
    }
    if let Some(workers) = cli.workers {
        config.workers = workers;
    }
    match &cli.command {
        Command::Explain { input, contours } => {
            config.mode = Mode::Explain;
            if let Some(p) = &input.input {
                config.input = Some(p.clone());
            }
            if let Some(n) = contours {
                config.contours = *n;
            }
        }
        Command::Sweep { input, alphas } => {
            config.mode = Mode::Sweep;
            if let Some(p) = &input.input {
                config.input = Some(p.clone());
            }
            if let Some(a) = alphas {
                config.alphas = parse_alpha_list(a)?;
            }
        }
        Command::Robustness { input, starts } => {
            config.mode = Mode::Robustness;
            if let Some(p) = &input.input {
                config.input = Some(p.clone());
            }
            if let Some(s) = starts {
                config.starts = *s;
            }
        }
        Command::Metrics { dataset } => {
            config.mode = Mode::Metrics;
            if let Some(d) = dataset {
                config.dataset = Some(d.clone());
            }
        }
        Command::Serve { .. } => {}
    }
    Ok(config)
}

fn serve(cli: &Cli, height: usize, width: usize, channels: usize) -> Result<()> {
    let spec_text = cli
        .backend
        .as_deref()
        .ok_or_else(|| Error::Config("serve needs --backend".into()))?;
    let spec = BackendSpec::parse(spec_text)?;
    if matches!(spec, BackendSpec::External(_)) {
        return Err(Error::Config("serve only hosts builtin backends".into()));
    }
    let mut backend = spec.build(height, width, channels)?;
    serve_backend(backend.as_mut(), BufReader::new(stdin().lock()), stdout().lock())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Serve {
            height,
            width,
            channels,
        } => serve(&cli, *height, *width, *channels).map(|()| None),
        _ => resolve_config(&cli).and_then(|config| runner::run(&config).map(Some)),
    };
    match result {
        Ok(Some(summary)) => {
            for artifact in &summary.artifacts {
                println!("{}", artifact.display());
            }
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
