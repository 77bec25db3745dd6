use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use photon_pairs::config::RunConfig;
use photon_pairs::correlator::{cauchy_schwarz, cross_correlation_parallel};
use photon_pairs::error::{Error, Result};
use photon_pairs::format::{read_stream, FormatError, read_stream_unsorted, write_stream};
use photon_pairs::report::{
    analyze_cross, analyze_incoherent, analyze_scan, fit_autocorrelation, hbt_histogram,
    pair_summary, run_report, simulated_autocorrelations, simulated_scan, superradiance_sweep,
    write_report, write_sweep_csv, ArmName,
};
use photon_pairs::simulator::simulate_run;
use photon_pairs::spectro::SpectrumScan;
use photon_pairs::timetag::{channel, s_to_ps, TagStream};

/// Time-tag simulation and correlation analysis for narrowband photon pairs.
#[derive(Debug, Parser)]
#[command(name = "photon-pairs", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; the built-in reference preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (simulate, sort) or directory (all other verbs).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StreamInput {
    /// QTT1 tag file to analyze instead of simulating one.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Wall duration of the input file, when it runs past the last tag.
    #[arg(long, requires = "input")]
    duration_s: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Simulate a run and write it as a QTT1 file.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Signal-idler cross-correlation and exponential fit.
    G2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: StreamInput,
    },
    /// Signal and idler autocorrelations.
    Hbt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: StreamInput,
    },
    /// Pair rate and heralding efficiencies.
    Pairs {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        input: StreamInput,
    },
    /// Cauchy-Schwarz ratio, from given correlation values or a simulation.
    Cs {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires_all = ["g2_ii", "g2_ss"])]
        g2_si: Option<f64>,
        #[arg(long, requires_all = ["g2_si", "g2_ss"])]
        g2_ii: Option<f64>,
        #[arg(long, requires_all = ["g2_si", "g2_ii"])]
        g2_ss: Option<f64>,
    },
    /// Simulate a cavity scan of the idler spectrum.
    Scan {
        #[command(flatten)]
        common: Common,
        /// Count only idler photons heralded by a signal photon.
        #[arg(long)]
        heralded: bool,
    },
    /// Fit a cavity scan and report the deconvolved linewidth.
    ScanFit {
        #[command(flatten)]
        common: Common,
        /// Scan CSV with its JSON sidecar.
        #[arg(long)]
        input: PathBuf,
        /// Heralded scan to subtract, after loss correction, from the input.
        #[arg(long)]
        subtract: Option<PathBuf>,
    },
    /// Linewidth against optical density and the fitted slope.
    Superradiance {
        #[command(flatten)]
        common: Common,
        /// Comma-separated optical densities; the configured list when omitted.
        #[arg(long, value_delimiter = ',')]
        ods: Option<Vec<f64>>,
    },
    /// Full reproduction pipeline: one JSON report plus a CSV per figure.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Sort a QTT1 file whose records are out of order.
    Sort {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

struct Context {
    cfg: RunConfig,
    seed: u64,
    out: Option<PathBuf>,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let cfg = match &common.config {
            Some(path) => RunConfig::from_path(path)?,
            None => RunConfig::reference(),
        };
        Ok(Context {
            seed: common.seed.unwrap_or(cfg.seed),
            out: common.out.clone(),
            cfg,
        })
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&self.cfg.output_dir));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn out_file(&self, default_name: &str) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| Path::new(&self.cfg.output_dir).join(default_name))
    }

    fn stream(&self, input: &StreamInput) -> Result<TagStream> {
        match &input.input {
            Some(path) => {
                let stream = read_stream(path)?;
                match input.duration_s {
                    Some(s) if !(s > 0.0 && s.is_finite()) => {
                        Err(Error::InvalidArgument(format!("--duration-s {s} must be > 0")))
                    }
                    Some(s) => {
                        let ps = s_to_ps(s);
                        if stream.tags().last().is_some_and(|t| t.timestamp >= ps) {
                            return Err(Error::InvalidArgument(
                                "--duration-s ends before the last tag".into(),
                            ));
                        }
                        Ok(stream.with_duration(ps))
                    }
                    None => Ok(stream),
                }
            }
            None => simulate_run(&self.cfg.source_params(), self.cfg.wall_duration_s, self.seed),
        }
    }
}

fn emit<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, &text)?;
    println!("{text}");
    Ok(())
}

fn require_converged(items: &[(&str, bool)]) -> Result<()> {
    let failed: Vec<&str> = items.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::NotConverged(failed.join(", ")))
    }
}

#[derive(Serialize)]
struct CsOutput {
    g2_si_peak: f64,
    g2_ii_0: f64,
    g2_ss_0: f64,
    #[serde(rename = "R")]
    ratio: f64,
}

fn run(verb: Verb) -> Result<()> {
    match verb {
        Verb::Simulate { common } => {
            let ctx = Context::new(&common)?;
            let stream = simulate_run(&ctx.cfg.source_params(), ctx.cfg.wall_duration_s, ctx.seed)?;
            let path = ctx.out_file("run.qtt");
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            write_stream(&stream, &path)?;
            println!(
                "{}",
                serde_json::json!({ "path": path, "tags": stream.len(), "seed": ctx.seed })
            );
            Ok(())
        }
        Verb::G2 { common, input } => {
            let ctx = Context::new(&common)?;
            let stream = ctx.stream(&input)?;
            let dir = ctx.out_dir()?;
            let cross = analyze_cross(&stream, &ctx.cfg)?;
            cross.histogram.write_g2_csv(dir.join("g2.csv"))?;
            emit(&cross, &dir.join("g2.json"))?;
            require_converged(&[("cross", cross.fit.converged)])
        }
        Verb::Hbt { common, input } => {
            let ctx = Context::new(&common)?;
            let dir = ctx.out_dir()?;
            let (signal, idler) = if input.input.is_some() {
                let stream = ctx.stream(&input)?;
                let range = ctx.cfg.hbt_range()?;
                (
                    fit_autocorrelation(hbt_histogram(&stream, ArmName::Signal, range)?, &ctx.cfg)?,
                    fit_autocorrelation(hbt_histogram(&stream, ArmName::Idler, range)?, &ctx.cfg)?,
                )
            } else {
                simulated_autocorrelations(&ctx.cfg, ctx.seed)?
            };
            signal.histogram.write_g2_csv(dir.join("hbt_signal.csv"))?;
            idler.histogram.write_g2_csv(dir.join("hbt_idler.csv"))?;
            emit(
                &serde_json::json!({ "signal": signal, "idler": idler }),
                &dir.join("hbt.json"),
            )?;
            require_converged(&[("signal", signal.fit.converged), ("idler", idler.fit.converged)])
        }
        Verb::Pairs { common, input } => {
            let ctx = Context::new(&common)?;
            let stream = ctx.stream(&input)?;
            let dir = ctx.out_dir()?;
            let hist = cross_correlation_parallel(
                &stream,
                &channel::SIGNAL,
                &channel::IDLER,
                ctx.cfg.lag_range()?,
                stream.duty(),
                rayon::current_num_threads(),
            )?;
            let pairs = pair_summary(&hist, ctx.cfg.coincidence_window_ps())?;
            emit(&pairs, &dir.join("pairs.json"))
        }
        Verb::Cs {
            common,
            g2_si,
            g2_ii,
            g2_ss,
        } => {
            let ctx = Context::new(&common)?;
            let dir = ctx.out_dir()?;
            let (si, ii, ss) = match (g2_si, g2_ii, g2_ss) {
                (Some(si), Some(ii), Some(ss)) => (si, ii, ss),
                _ => {
                    let stream =
                        simulate_run(&ctx.cfg.source_params(), ctx.cfg.wall_duration_s, ctx.seed)?;
                    let cross = analyze_cross(&stream, &ctx.cfg)?;
                    let (signal, idler) = simulated_autocorrelations(&ctx.cfg, ctx.seed)?;
                    require_converged(&[
                        ("cross", cross.fit.converged),
                        ("hbt_signal", signal.fit.converged),
                        ("hbt_idler", idler.fit.converged),
                    ])?;
                    (cross.g2_si_peak, idler.g2_zero, signal.g2_zero)
                }
            };
            let ratio = cauchy_schwarz(si, ii, ss)?;
            emit(
                &CsOutput {
                    g2_si_peak: si,
                    g2_ii_0: ii,
                    g2_ss_0: ss,
                    ratio,
                },
                &dir.join("cs.json"),
            )
        }
        Verb::Scan { common, heralded } => {
            let ctx = Context::new(&common)?;
            let dir = ctx.out_dir()?;
            let scan = simulated_scan(&ctx.cfg, ctx.seed, heralded)?;
            let name = if heralded {
                "scan_heralded.csv"
            } else {
                "scan_unheralded.csv"
            };
            scan.write(dir.join(name))?;
            println!(
                "{}",
                serde_json::json!({ "path": dir.join(name), "points": scan.len(), "total_counts": scan.total_counts() })
            );
            Ok(())
        }
        Verb::ScanFit {
            common,
            input,
            subtract,
        } => {
            let ctx = Context::new(&common)?;
            let dir = ctx.out_dir()?;
            let scan = SpectrumScan::read(&input)?;
            match subtract {
                Some(heralded) => {
                    let heralded = SpectrumScan::read(heralded)?;
                    let inc = analyze_incoherent(&scan, &heralded, &ctx.cfg)?;
                    inc.scan.write(dir.join("scan_incoherent.csv"))?;
                    emit(&inc, &dir.join("scan_fit.json"))?;
                    require_converged(&[("incoherent", inc.fit.is_some())])
                }
                None => {
                    let fit = analyze_scan(scan)?;
                    emit(&fit, &dir.join("scan_fit.json"))?;
                    require_converged(&[("scan", fit.fit.converged)])
                }
            }
        }
        Verb::Superradiance { common, ods } => {
            let ctx = Context::new(&common)?;
            let dir = ctx.out_dir()?;
            let ods = ods.unwrap_or_else(|| ctx.cfg.superradiance_ods.clone());
            let sweep = superradiance_sweep(&ctx.cfg, &ods, ctx.seed)?;
            write_sweep_csv(&sweep, &dir.join("superradiance.csv"))?;
            emit(&sweep, &dir.join("superradiance.json"))?;
            let ok = sweep.points.iter().all(|p| p.converged);
            require_converged(&[("superradiance", ok)])
        }
        Verb::Report { common } => {
            let ctx = Context::new(&common)?;
            let dir = ctx.out_dir()?;
            let mut report = run_report(&ctx.cfg, ctx.seed)?;
            let path = write_report(&mut report, &dir)?;
            println!(
                "{}",
                serde_json::json!({
                    "report": path,
                    "tau0_ns": report.tau0_ns,
                    "R": report.cauchy_schwarz,
                    "g2_ss_0": report.g2_ss_0,
                    "g2_ii_0": report.g2_ii_0,
                    "pair_rate": report.pair_rate,
                })
            );
            let failed = report.unconverged();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::NotConverged(failed.join(", ")))
            }
        }
        Verb::Sort { common, input } => {
            let ctx = Context::new(&common)?;
            let stream = read_stream_unsorted(&input)?;
            let path = ctx.out_file("sorted.qtt");
            write_stream(&stream, &path)?;
            println!("{}", serde_json::json!({ "path": path, "tags": stream.len() }));
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Format(FormatError::Io(_)) => 1,
        Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Format(_)
        | Error::GridMismatch(_)
        | Error::UndefinedNormalization(_) => 2,
        Error::NotConverged(_) | Error::SingularSystem { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERR:usage:{first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERR:{}:{e}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
