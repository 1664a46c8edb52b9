//! Command-line driver: build the tube construction, run verification
//! suites, run the maximization pipeline, export geometry, and summarize
//! artifacts.  Exit codes: 0 success, 1 failing suites or invariants,
//! 2 invalid configuration or format, 3 missing artifacts or internal
//! errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use uds::analysis::{self, LipschitzFunction};
use uds::config::RunConfig;
use uds::error::{Result, UdsError};
use uds::geometry::Point;
use uds::maximizer::uds_pipeline;
use uds::tubes::Construction;
use uds::verification::run_suite;

#[derive(Parser)]
#[command(
    name = "uds",
    about = "Fractal tube constructions and directional-derivative maximization"
)]
struct Cli {
    /// Path to a JSON run configuration (falls back to the UDS_CONFIG
    /// environment variable, then to built-in defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker-thread override.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Construction depth override.
    #[arg(long, global = true)]
    depth: Option<u32>,
    /// Membership parameter override (primary lambda).
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the tube construction cache and write build stats.
    Build,
    /// Run the selected verification suites against the cache.
    Verify,
    /// Run the differentiability pipeline on the configured function.
    Maximize,
    /// Export the construction geometry.
    Export {
        /// Output format: svg, csv, or json.
        #[arg(long, default_value = "svg")]
        format: String,
    },
    /// Summarize the artifacts in the output directory.
    Report,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match cli
        .config
        .clone()
        .or_else(|| std::env::var("UDS_CONFIG").ok().map(PathBuf::from))
    {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.build.seed = seed;
        cfg.maximizer.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers;
    }
    if let Some(depth) = cli.depth {
        cfg.build.depth = depth;
    }
    if let Some(lambda) = cli.lambda {
        cfg.lambdas = vec![lambda / 2.0, lambda];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cache_path(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join("construction.uds")
}

fn load_cache(cfg: &RunConfig) -> Result<Construction> {
    let path = cache_path(cfg);
    if !path.exists() {
        return Err(UdsError::internal(format!(
            "missing construction cache {}; run `uds build` first",
            path.display()
        )));
    }
    Construction::load(&path)
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = load_config(&cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match &cli.command {
        Command::Build => cmd_build(&cfg),
        Command::Verify => cmd_verify(&cfg),
        Command::Maximize => cmd_maximize(&cfg),
        Command::Export { format } => cmd_export(&cfg, format),
        Command::Report => cmd_report(&cfg),
    }
}

fn cmd_build(cfg: &RunConfig) -> Result<i32> {
    let started = Instant::now();
    let construction = Construction::build(cfg.build.clone())?;
    let out = Path::new(&cfg.out_dir);
    construction.save(&cache_path(cfg))?;

    // Deterministic stats; wall-clock timings go to a separate file so the
    // primary artifacts are bit-reproducible.
    let mut per_level = vec![];
    for (k, ids) in construction.levels.iter().enumerate() {
        let min_w = ids
            .iter()
            .map(|&i| construction.triple(i).w)
            .fold(f64::INFINITY, f64::min);
        let max_w = ids
            .iter()
            .map(|&i| construction.triple(i).w)
            .fold(0.0f64, f64::max);
        per_level.push(serde_json::json!({
            "level": k,
            "triples": ids.len(),
            "min_width": min_w,
            "max_width": max_w,
        }));
    }
    let stats = serde_json::json!({
        "config_digest": cfg.digest(),
        "build_digest": cfg.build.digest(),
        "triples": construction.triples.len(),
        "wedges": construction.family.wedges.len(),
        "levels": per_level,
    });
    std::fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    std::fs::write(
        out.join("timings.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "build_seconds": started.elapsed().as_secs_f64(),
        }))?,
    )?;
    println!(
        "built {} triples across {} levels -> {}",
        construction.triples.len(),
        construction.levels.len(),
        cache_path(cfg).display()
    );
    Ok(0)
}

fn cmd_verify(cfg: &RunConfig) -> Result<i32> {
    let construction = load_cache(cfg)?;
    if cfg.suites.is_empty() {
        eprintln!("warning: empty suite selection; nothing to verify");
        return Ok(0);
    }
    let out = Path::new(&cfg.out_dir);
    let mut all_pass = true;
    let mut failing = vec![];
    let mut summary = String::new();
    let mut csv = String::new();
    for name in &cfg.suites {
        let rep = run_suite(name, &construction, cfg.seed)?;
        std::fs::write(out.join(format!("suite-{name}.json")), rep.to_json()?)?;
        csv.push_str(&rep.to_csv());
        summary.push_str(&rep.summary_line());
        summary.push('\n');
        println!("{}", rep.summary_line());
        if !rep.pass() {
            all_pass = false;
            failing.push(name.clone());
            print!("{}", rep.render_text());
        }
    }
    std::fs::write(out.join("suites.csv"), csv)?;
    std::fs::write(out.join("suites-summary.txt"), summary)?;
    if all_pass {
        Ok(0)
    } else {
        eprintln!("failing suites: {}", failing.join(", "));
        Ok(1)
    }
}

fn resolve_corpus(name: &str, dim: usize, seed: u64) -> Result<LipschitzFunction> {
    let all = analysis::corpus(dim, seed);
    let g = match name {
        "linear" => &all[0],
        "l1" => &all[1],
        "dist-to-wedge" => &all[2],
        "max-affine" => &all[3],
        "dist-to-control" => &all[4],
        other => {
            return Err(UdsError::invalid_input(format!(
                "unknown corpus function {other}"
            )))
        }
    };
    Ok(g.clone())
}

fn cmd_maximize(cfg: &RunConfig) -> Result<i32> {
    let construction = load_cache(cfg)?;
    let g = resolve_corpus(&cfg.corpus_function, cfg.build.dim, cfg.seed)?;
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lambda_p, lambda) = if lambdas.len() >= 2 {
        (lambdas[0], *lambdas.last().unwrap())
    } else {
        (lambdas[0] / 2.0, lambdas[0])
    };
    let run_dir = Path::new(&cfg.out_dir).join("maximize");
    std::fs::create_dir_all(&run_dir)?;
    match uds_pipeline(&g, &construction, lambda_p, lambda, &cfg.maximizer) {
        Ok(report) => {
            let trace = report.trace.as_ref().unwrap();
            std::fs::write(run_dir.join("trace.jsonl"), trace.to_json_lines()?)?;
            let mut csv = String::from("r,M\n");
            for m in &report.modulus {
                csv.push_str(&format!("{},{}\n", m.r, m.m));
            }
            std::fs::write(run_dir.join("modulus.csv"), csv)?;
            std::fs::write(
                run_dir.join("report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            println!(
                "pipeline on {}: {} steps, final derivative {:.6}, audit {}",
                report.function,
                report.trace_steps,
                report.limit_derivative,
                if report.almost_max.pass { "pass" } else { "FAIL" }
            );
            Ok(if report.almost_max.pass { 0 } else { 1 })
        }
        Err(UdsError::AbortedTrace {
            reason,
            partial_trace,
        }) => {
            // Invariant failure mid-trace: keep the partial trace and fail.
            std::fs::write(run_dir.join("trace.jsonl"), partial_trace)?;
            std::fs::write(
                run_dir.join("error.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "error": reason,
                }))?,
            )?;
            eprintln!("invariant failure: {reason}");
            Ok(1)
        }
        Err(UdsError::Verification(msg)) => {
            std::fs::write(
                run_dir.join("error.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "error": msg,
                }))?,
            )?;
            eprintln!("invariant failure: {msg}");
            Ok(1)
        }
        Err(e) => Err(e),
    }
}

fn cmd_export(cfg: &RunConfig, format: &str) -> Result<i32> {
    let construction = load_cache(cfg)?;
    let out = Path::new(&cfg.out_dir);
    match format {
        "svg" => {
            let svg = render_svg(&construction);
            std::fs::write(out.join("construction.svg"), svg)?;
            println!("wrote {}", out.join("construction.svg").display());
        }
        "csv" => {
            let mut csv = String::from(
                "id,level,parent,w,alpha,t1x,t1y,t2x,t2y,t3x,t3y\n",
            );
            for t in &construction.triples {
                let w = construction.wedge_of(t);
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{}\n",
                    t.id,
                    t.level,
                    t.parent.map(|p| p.to_string()).unwrap_or_default(),
                    t.w,
                    t.alpha,
                    w.t1.0[0],
                    w.t1.0[1],
                    w.t2.0[0],
                    w.t2.0[1],
                    w.t3.0[0],
                    w.t3.0[1],
                ));
            }
            std::fs::write(out.join("construction.csv"), csv)?;
            println!("wrote {}", out.join("construction.csv").display());
        }
        "json" => {
            std::fs::write(
                out.join("construction.json"),
                serde_json::to_string_pretty(&construction)?,
            )?;
            println!("wrote {}", out.join("construction.json").display());
        }
        other => {
            return Err(UdsError::invalid_input(format!(
                "unknown export format {other} (expected svg, csv, or json)"
            )))
        }
    }
    Ok(0)
}

/// Figure-style SVG: tubes per level as stroked polylines, stroke width
/// twice the width parameter (floored so deep levels stay visible).
fn render_svg(c: &Construction) -> String {
    let (lo, hi) = c.config.bbox();
    let span = (hi.0[0] - lo.0[0]).max(hi.0[1] - lo.0[1]);
    let size = 800.0;
    let scale = size / span;
    let map = |p: &Point| {
        (
            (p.0[0] - lo.0[0]) * scale,
            size - (p.0[1] - lo.0[1]) * scale,
        )
    };
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {size} {size}\">\n"
    );
    for t in &c.triples {
        let w = c.wedge_of(t);
        let (x1, y1) = map(&w.t1);
        let (x2, y2) = map(&w.t2);
        let (x3, y3) = map(&w.t3);
        let stroke = (2.0 * t.w * scale).max(0.4);
        let color = palette[t.level as usize % palette.len()];
        svg.push_str(&format!(
            "  <polyline points=\"{x1:.3},{y1:.3} {x2:.3},{y2:.3} {x3:.3},{y3:.3}\" \
             fill=\"none\" stroke=\"{color}\" stroke-width=\"{stroke:.4}\" \
             stroke-linecap=\"round\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn cmd_report(cfg: &RunConfig) -> Result<i32> {
    let out = Path::new(&cfg.out_dir);
    let stats = out.join("stats.json");
    if !stats.exists() {
        return Err(UdsError::internal(format!(
            "no artifacts under {}; run `uds build` first",
            out.display()
        )));
    }
    println!("artifacts in {}:", out.display());
    let stats_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats)?)?;
    println!(
        "  construction: {} triples (config {})",
        stats_json["triples"],
        stats_json["config_digest"].as_str().unwrap_or("?")
    );
    let summary = out.join("suites-summary.txt");
    if summary.exists() {
        for line in std::fs::read_to_string(&summary)?.lines() {
            println!("  suite {line}");
        }
    } else {
        println!("  no suite reports (run `uds verify`)");
    }
    let report = out.join("maximize").join("report.json");
    if report.exists() {
        let rep: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report)?)?;
        println!(
            "  pipeline: {} -> derivative {}",
            rep["function"], rep["limit_derivative"]
        );
    } else {
        println!("  no pipeline report (run `uds maximize`)");
    }
    Ok(0)
}
