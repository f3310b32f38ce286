use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use canopy_forge::config::{apply_override, config_from_table, load_table, PipelineConfig};
use canopy_forge::elevation::{process_cloud_tile, RasterizerConfig};
use canopy_forge::evaluate::{evaluate, write_report, EvalOptions};
use canopy_forge::ingest::{build_index, fetch, FetchOptions};
use canopy_forge::metrics::LossParams;
use canopy_forge::pipeline::{plan, run_until, RunSummary, Stage};
use canopy_forge::raster::{metadata_keys, write_geotiff};
use canopy_forge::{synthetic, Error};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::error;
use tracing_subscriber::EnvFilter;

/// Exit code when a run finished but some tiles failed.
const EXIT_TILE_FAILURES: u8 = 3;

#[derive(Parser)]
#[command(name = "canopy-forge", version, about = "Build canopy-height training samples from LiDAR and orthophotos")]
struct Cli {
    #[arg(long, value_enum, default_value_t = LogFormat::Json, global = true)]
    log_format: LogFormat,
    /// Log filter, e.g. `info` or `canopy_forge=debug`.
    #[arg(long, default_value = "info", global = true)]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogFormat {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the catalog. Standalone with --catalog, otherwise the pipeline stage.
    Index {
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Write the index as JSON lines here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Download or copy tiles. Standalone with --catalog and --dest.
    Fetch {
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        dest: Option<PathBuf>,
        #[arg(long)]
        parallel: Option<usize>,
        #[arg(long)]
        retries: Option<u32>,
        #[arg(long)]
        timeout: Option<u64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Build DTM/DSM/CHM. Single file with --input, otherwise the pipeline stage.
    Chm {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for --input mode.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Acquisition year for --input mode; overrides GPS time.
        #[arg(long)]
        year: Option<f64>,
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Merge CHM tiles per optical footprint.
    Mosaic {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Stack RGB and NIRRG into 5-band images on the CHM grid.
    Harmonize {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Cut samples and write the manifest.
    Tile {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Run every stage.
    Run {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
    /// Score predictions against manifest targets.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        k: f64,
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        png_dir: Option<PathBuf>,
    },
    /// Write the synthetic two-location fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse and check a config, printing the resolved values.
    Validate {
        #[command(flatten)]
        pipeline: PipelineArgs,
    },
}

#[derive(Args, Default)]
struct PipelineArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set fetch.retries=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long = "department")]
    departments: Vec<String>,
    #[arg(long)]
    cell: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    min_valid: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tile_px: Option<usize>,
    /// Print the stages that would run and exit.
    #[arg(long)]
    dry_run: bool,
}

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

fn absolute(p: &Path) -> Result<PathBuf, Error> {
    std::path::absolute(p).map_err(|e| Error::io(p, e))
}

impl PipelineArgs {
    /// Typed flags become overrides first so `--set` can still win.
    fn overrides(&self) -> Result<Vec<String>, Error> {
        let mut out = Vec::new();
        if let Some(p) = &self.work_dir {
            out.push(format!("work_dir={}", quoted(&absolute(p)?.to_string_lossy())));
        }
        if let Some(v) = self.workers {
            out.push(format!("workers={v}"));
        }
        if !self.departments.is_empty() {
            let list: Vec<String> = self.departments.iter().map(|d| quoted(d)).collect();
            out.push(format!("departments=[{}]", list.join(",")));
        }
        for (key, v) in [
            ("cell_size", self.cell),
            ("smoothing_window", self.window),
            ("min_valid_fraction", self.min_valid),
        ] {
            if let Some(v) = v {
                out.push(format!("{key}={v:?}"));
            }
        }
        if let Some(v) = self.seed {
            out.push(format!("seed={v}"));
        }
        if let Some(v) = self.tile_px {
            out.push(format!("tile_px={v}"));
        }
        out.extend(self.set.iter().cloned());
        Ok(out)
    }

    fn load(&self, extra: &[String]) -> Result<PipelineConfig, Error> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::config("config", "--config is required for pipeline stages"))?;
        let mut table = load_table(path)?;
        for o in extra.iter().cloned().chain(self.overrides()?) {
            apply_override(&mut table, &o)?;
        }
        config_from_table(table, path.parent().unwrap_or(Path::new(".")))
    }
}

fn print_json(value: &impl serde::Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer_pretty(&mut out, value);
    let _ = writeln!(out);
}

fn run_stage(args: &PipelineArgs, extra: &[String], last: Stage) -> Result<ExitCode, Error> {
    let cfg = args.load(extra)?;
    if args.dry_run {
        print_json(&serde_json::json!({
            "work_dir": cfg.work_dir,
            "stages": plan(&cfg, last)?,
        }));
        return Ok(ExitCode::SUCCESS);
    }
    let summary: RunSummary = run_until(&cfg, last)?;
    print_json(&summary);
    Ok(if summary.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_TILE_FAILURES)
    })
}

fn single_chm(input: &Path, out: &Path, year: Option<f64>, args: &PipelineArgs) -> Result<ExitCode, Error> {
    let mut cfg = match &args.config {
        Some(_) => args.load(&[])?.rasterizer(),
        None => RasterizerConfig::default(),
    };
    if args.config.is_none() {
        cfg.cell_size = args.cell.unwrap_or(cfg.cell_size);
        cfg.smoothing_window = args.window.unwrap_or(cfg.smoothing_window);
    }
    let product = process_cloud_tile(input, &cfg, None, year)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tile".into());
    let mut meta = BTreeMap::new();
    if let Some(y) = product.acquisition_year {
        meta.insert(metadata_keys::ACQUISITION_YEAR.to_string(), format!("{y:?}"));
    }
    let mut written = BTreeMap::new();
    for (name, grid) in [
        ("dtm", &product.dtm_smoothed),
        ("dsm", &product.dsm),
        ("chm", &product.chm),
    ] {
        let path = out.join(format!("{stem}_{name}.tif"));
        write_geotiff(grid, &path, &meta)?;
        written.insert(name, path);
    }
    print_json(&serde_json::json!({
        "input": input,
        "acquisition_year": product.acquisition_year,
        "width": product.chm.width,
        "height": product.chm.height,
        "chm_valid_cells": product.chm.valid_count(),
        "outputs": written,
    }));
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cmd: Command) -> Result<ExitCode, Error> {
    match cmd {
        Command::Index {
            catalog: Some(catalog),
            out,
            ..
        } => {
            let records = build_index(&catalog)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&serde_json::to_string(r).expect("records serialize"));
                text.push('\n');
            }
            match out {
                Some(p) => fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Index { pipeline, .. } => run_stage(&pipeline, &[], Stage::Index),
        Command::Fetch {
            catalog: Some(catalog),
            dest: Some(dest),
            parallel,
            retries,
            timeout,
            ..
        } => {
            let defaults = FetchOptions::default();
            let opts = FetchOptions {
                max_parallel: parallel.unwrap_or(defaults.max_parallel),
                retries: retries.unwrap_or(defaults.retries),
                timeout_s: timeout.unwrap_or(defaults.timeout_s),
                ..defaults
            };
            let report = fetch(&build_index(&catalog)?, &dest, &opts)?;
            let failures: Vec<_> = report
                .failures
                .iter()
                .map(|e| serde_json::json!({ "kind": e.kind(), "message": e.to_string() }))
                .collect();
            print_json(&serde_json::json!({ "fetched": report.fetched, "failures": failures }));
            Ok(if failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_TILE_FAILURES)
            })
        }
        Command::Fetch {
            catalog: None,
            dest: None,
            parallel,
            retries,
            timeout,
            pipeline,
        } => {
            let mut extra = Vec::new();
            if let Some(v) = parallel {
                extra.push(format!("fetch.max_parallel={v}"));
            }
            if let Some(v) = retries {
                extra.push(format!("fetch.retries={v}"));
            }
            if let Some(v) = timeout {
                extra.push(format!("fetch.timeout_s={v}"));
            }
            run_stage(&pipeline, &extra, Stage::Fetch)
        }
        Command::Fetch { .. } => Err(Error::InvalidArgument(
            "standalone fetch needs both --catalog and --dest".into(),
        )),
        Command::Chm {
            input: Some(input),
            out,
            year,
            pipeline,
        } => single_chm(&input, &out, year, &pipeline),
        Command::Chm { pipeline, .. } => run_stage(&pipeline, &[], Stage::Chm),
        Command::Mosaic { pipeline } => run_stage(&pipeline, &[], Stage::Mosaic),
        Command::Harmonize { pipeline } => run_stage(&pipeline, &[], Stage::Harmonize),
        Command::Tile { pipeline } => run_stage(&pipeline, &[], Stage::Tile),
        Command::Run { pipeline } => run_stage(&pipeline, &[], Stage::Tile),
        Command::Evaluate {
            pred_dir,
            manifest,
            k,
            theta,
            report,
            png_dir,
        } => {
            let opts = EvalOptions {
                params: LossParams {
                    tree_weight: k,
                    tree_threshold: theta,
                },
                png_dir,
            };
            let result = evaluate(&manifest, &pred_dir, &opts)?;
            write_report(&result, &report)?;
            print_json(&serde_json::json!({
                "report": report,
                "scored": result.tiles.len(),
                "skipped": result.skipped.len(),
                "aggregate": result.aggregate,
            }));
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, seed } => {
            let fx = synthetic::write_fixture(&out, seed)?;
            print_json(&serde_json::json!({
                "root": fx.root,
                "catalog": fx.catalog,
                "config": fx.config,
                "department": fx.department,
            }));
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { pipeline } => {
            let cfg = pipeline.load(&[])?;
            print_json(&cfg);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn init_logging(format: LogFormat, level: &str) {
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let builder = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr);
    match format {
        LogFormat::Json => builder.json().flatten_event(true).init(),
        LogFormat::Text => builder.init(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_format, &cli.log_level);
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            error!(kind = e.kind(), error = %e, "command failed");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
