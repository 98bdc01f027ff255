//! `qkatlas`: validate exports, precompute atlases, report diagnostics, serve.
//!
//! Exit codes: 0 success, 1 I/O or runtime failure, 2 invalid export or
//! invalid flags.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qkatlas_core::project::Method;
use qkatlas_core::store::{
    ingest, precompute, write_report, Atlas, Bundle, HeadOutcome, IngestError, PrecomputeConfig, Progress, ReportRow,
    DEFAULT_SAMPLE_CAP, MIN_SAMPLE_CAP,
};
use qkatlas_server::{ServeConfig, DEFAULT_PORT};

const EXIT_INVALID: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "qkatlas", version, about = "Joint query-key embedding atlases for transformer attention heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check an export directory and report every violation found.
    Validate {
        /// Export directory holding manifest.json.
        path: PathBuf,
    },
    /// Build or resume an atlas from an export.
    Precompute {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "pca,tsne,umap")]
        methods: Vec<Method>,
        #[arg(long, value_delimiter = ',', default_value = "2,3", value_parser = parse_dim)]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum query plus key tokens projected per head.
        #[arg(long, default_value_t = DEFAULT_SAMPLE_CAP, value_parser = parse_cap)]
        sample_cap: usize,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Leave pairs whose key is a special token out of the distance-logit correlation.
        #[arg(long)]
        exclude_special: bool,
    },
    /// Write per-head diagnostics and model means as CSV (`-` for stdout).
    Diagnose { atlas: PathBuf, out: PathBuf },
    /// Serve every atlas under a data directory over HTTP.
    Serve {
        #[arg(long, default_value = ".")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        /// Allowed CORS origin, or `*` for any.
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

fn parse_dim(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(d @ (2 | 3)) => Ok(d),
        _ => Err(format!("dimension must be 2 or 3, got {s:?}")),
    }
}

fn parse_cap(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(c) if c >= MIN_SAMPLE_CAP => Ok(c),
        _ => Err(format!("sample cap must be an integer of at least {MIN_SAMPLE_CAP}, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { path } => validate(&path),
        Command::Precompute { input, output, methods, dims, seed, sample_cap, jobs, exclude_special } => {
            let cfg = PrecomputeConfig { methods, dims, seed, sample_cap, include_special: !exclude_special, ..Default::default() };
            run_precompute(&input, &output, &cfg, jobs)
        }
        Command::Diagnose { atlas, out } => diagnose(&atlas, &out),
        Command::Serve { data_dir, port, cors_origin } => serve(ServeConfig { data_dir, port, cors_origin }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error chain, skipping causes the previous message already ends with.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg.push_str(": ");
            msg.push_str(&c);
        }
    }
    msg
}

/// `Ok(Err(code))` for an export that was read but is invalid.
fn load(path: &Path) -> Result<Result<Bundle, ExitCode>> {
    match ingest(path) {
        Ok(b) => Ok(Ok(b)),
        Err(e @ IngestError::Io { .. }) => Err(e.into()),
        Err(e) => {
            println!("{}: invalid export", path.display());
            println!("{e}");
            Ok(Err(ExitCode::from(EXIT_INVALID)))
        }
    }
}

fn validate(path: &Path) -> Result<ExitCode> {
    let bundle = match load(path)? {
        Ok(b) => b,
        Err(code) => return Ok(code),
    };
    println!(
        "{}: ok ({} {:?} model, {} layers x {} heads, {} sequences, {} tokens)",
        path.display(),
        bundle.model.model_id,
        bundle.model.modality,
        bundle.model.num_layers,
        bundle.model.heads_per_layer,
        bundle.sequences.len(),
        bundle.tokens.len(),
    );
    Ok(ExitCode::SUCCESS)
}

fn report_progress(p: &Progress) {
    match (&p.outcome, &p.reason) {
        (HeadOutcome::Degraded, Some(r)) => eprintln!("l{} h{}: degraded ({r})", p.layer, p.head),
        (HeadOutcome::Computed, _) => eprintln!("l{} h{}: computed", p.layer, p.head),
        (HeadOutcome::Reused, _) => eprintln!("l{} h{}: reused", p.layer, p.head),
        (HeadOutcome::Degraded, None) => eprintln!("l{} h{}: degraded", p.layer, p.head),
    }
}

fn run_precompute(input: &Path, output: &Path, cfg: &PrecomputeConfig, jobs: Option<usize>) -> Result<ExitCode> {
    let bundle = match load(input)? {
        Ok(b) => b,
        Err(code) => return Ok(code),
    };
    let run = || precompute(&bundle, output, cfg, &report_progress);
    let summary = with_jobs(jobs, run)?.with_context(|| format!("precompute into {}", output.display()))?;
    if summary.noop {
        println!("{}: already up to date", output.display());
    } else {
        println!(
            "{}: {} computed, {} reused, {} degraded",
            output.display(),
            summary.computed,
            summary.reused,
            summary.degraded
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(feature = "parallel")]
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().context("building worker pool")?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    if jobs.is_some_and(|n| n > 1) {
        eprintln!("warning: built without the parallel feature; --jobs is ignored");
    }
    Ok(f())
}

fn diagnose(atlas: &Path, out: &Path) -> Result<ExitCode> {
    let atlas = Atlas::open(atlas).with_context(|| format!("reading atlas {}", atlas.display()))?;
    let m = &atlas.manifest;
    let rows: Vec<ReportRow> =
        m.heads.iter().map(|e| ReportRow { layer: e.layer, head: e.head, diagnostics: e.diagnostics.clone() }).collect();
    let include_special = m.config.get("include_special").and_then(|v| v.as_bool()).unwrap_or(true);
    if out == Path::new("-") {
        write_report(io::stdout().lock(), &rows, include_special)?;
    } else {
        let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
        let mut w = BufWriter::new(file);
        write_report(&mut w, &rows, include_special)?;
        w.flush().with_context(|| format!("writing {}", out.display()))?;
        eprintln!("{}: {} heads", out.display(), rows.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(cfg: ServeConfig) -> Result<ExitCode> {
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(qkatlas_server::serve(cfg, |addr, n| {
        eprintln!("serving {n} atlas(es) on http://{addr}");
    }))?;
    Ok(ExitCode::SUCCESS)
}
