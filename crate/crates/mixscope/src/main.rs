//! Command-line entry point: ingest, mix, attack, diagnose, synth, evaluate.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixscope::diagnostics::{
    covariance_report, input_histogram, recipient_spread, select_evaluation_users,
    theoretical_input_pmf, DEFAULT_TUPLE_BUDGET, HISTOGRAM_BINS, SPREAD_BIN_LABELS,
};
use mixscope::evaluation::{write_report_csv, EvaluationArtifact};
use mixscope::mixer::{partition_rounds, tally};
use mixscope::{
    anonymize, compare_models, generate_rounds, generate_trace, input_moments, lsda, round_stats,
    run_evaluation, Error, MixConfig, ObservationWindow, PopulationConfig, PopulationSpec, Trace,
};

const SEED_ENV: &str = "MIXSCOPE_SEED";

#[derive(Parser)]
#[command(
    name = "mixscope",
    version,
    about = "Simulate batching mixes over communication traces, run the least-squares \
             profiling attack, and validate its error against closed-form predictions"
)]
struct Cli {
    /// Cap the number of worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
struct MixFlags {
    /// Threshold mix: fire after this many messages.
    #[arg(long, value_name = "T")]
    threshold: Option<usize>,
    /// Timed mix: fire every this many seconds.
    #[arg(long, value_name = "SECONDS")]
    timed: Option<f64>,
}

impl MixFlags {
    fn config(&self) -> MixConfig {
        match (self.threshold, self.timed) {
            (Some(batch_size), None) => MixConfig::Threshold { batch_size },
            (None, Some(interval_secs)) => MixConfig::Timed { interval_secs },
            _ => unreachable!("clap enforces exactly one"),
        }
    }

    fn echo(&self) -> serde_json::Value {
        match (self.threshold, self.timed) {
            (Some(t), None) => serde_json::json!({"mix": "threshold", "t": t}),
            (None, Some(tau)) => serde_json::json!({"mix": "timed", "tau_secs": tau}),
            _ => unreachable!(),
        }
    }
}

/// Same mix flags for subcommands where the mix is only needed on some
/// paths; validated at runtime instead of by clap.
#[derive(Args, Debug, Clone)]
#[group(id = "mix_rule", required = false, multiple = false)]
struct OptionalMixFlags {
    /// Threshold mix: fire after this many messages.
    #[arg(long, value_name = "T")]
    threshold: Option<usize>,
    /// Timed mix: fire every this many seconds.
    #[arg(long, value_name = "SECONDS")]
    timed: Option<f64>,
}

impl OptionalMixFlags {
    fn get(&self) -> Option<MixFlags> {
        if self.threshold.is_some() || self.timed.is_some() {
            Some(MixFlags {
                threshold: self.threshold,
                timed: self.timed,
            })
        } else {
            None
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate a trace CSV and optionally keep only the most active senders.
    Ingest {
        /// Input trace CSV (`timestamp,sender,receiver`).
        #[arg(long)]
        input: PathBuf,
        /// Where to write the validated (possibly restricted) trace.
        #[arg(long)]
        output: PathBuf,
        /// Keep only the K senders with the most messages.
        #[arg(long, value_name = "K")]
        top_senders: Option<usize>,
    },
    /// Anonymize a trace through a mix and write the observed count
    /// matrices U.csv and Y.csv.
    Mix {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        mix: MixFlags,
        /// Directory for U.csv and Y.csv.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate sending profiles from an observed window.
    Attack {
        /// Directory containing U.csv and Y.csv.
        #[arg(long)]
        obs_dir: PathBuf,
        /// Output CSV for the estimated profile matrix.
        #[arg(long)]
        output: PathBuf,
    },
    /// Input-model diagnostics: covariance conditions, count histogram and,
    /// when a trace is given, recipient spread.
    Diagnose {
        /// Directory containing U.csv and Y.csv (alternative to --trace).
        #[arg(long, conflicts_with_all = ["trace", "threshold", "timed"])]
        obs_dir: Option<PathBuf>,
        /// Trace CSV to mix on the fly; enables the recipient-spread report.
        #[arg(long, requires = "mix_rule")]
        trace: Option<PathBuf>,
        #[command(flatten)]
        mix: OptionalMixFlags,
        /// Tuple-sampling budget per covariance statistic.
        #[arg(long, default_value_t = DEFAULT_TUPLE_BUDGET)]
        budget: usize,
        /// Seed for tuple sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Population config whose input model fills the histogram's model
        /// column.
        #[arg(long)]
        population: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate synthetic traffic from a population config.
    Synth {
        /// Population JSON (profiles, input process, output model, seed).
        #[arg(long)]
        config: PathBuf,
        /// Number of rounds to generate.
        #[arg(long)]
        rho: usize,
        /// Emit the observation window (U.csv/Y.csv) or a message trace.
        #[arg(long, value_parser = ["window", "trace"], default_value = "window")]
        emit: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Full experiment: attack growing prefixes, score against ground truth
    /// and write the report as JSON and CSV.
    Evaluate {
        /// Population JSON; generates the window (requires --rho).
        #[arg(long, conflicts_with_all = ["trace", "threshold", "timed"])]
        config: Option<PathBuf>,
        /// Rounds to generate when --config is used.
        #[arg(long)]
        rho: Option<usize>,
        /// Real trace to mix and attack (requires a mix flag).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        mix: Option<MixFlags>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Io(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Ingest {
            input,
            output,
            top_senders,
        } => {
            let mut trace = read_trace(&input)?;
            if let Some(k) = top_senders {
                trace = trace.restrict_to_top_senders(k)?;
            }
            let out = File::create(&output)?;
            trace.write(BufWriter::new(out))?;
            println!(
                "events={} senders={} receivers={} duration_secs={}",
                trace.events().len(),
                trace.num_senders(),
                trace.num_receivers(),
                trace.duration()
            );
            Ok(())
        }
        Command::Mix { input, mix, out_dir } => {
            let trace = read_trace(&input)?;
            let obs = anonymize(&trace, mix.config())?;
            write_window(&obs, &out_dir)?;
            println!("{}", round_stats(&obs));
            Ok(())
        }
        Command::Attack { obs_dir, output } => {
            let obs = read_window(&obs_dir)?;
            let solution = lsda(&obs);
            let out = File::create(&output)?;
            solution.profile.write_csv(BufWriter::new(out))?;
            println!(
                "senders={} receivers={} rounds={} condition_number={:e} singular={}",
                obs.num_senders(),
                obs.num_receivers(),
                obs.rho(),
                solution.condition.condition_number,
                solution.condition.singular
            );
            Ok(())
        }
        Command::Diagnose {
            obs_dir,
            trace,
            mix,
            budget,
            seed,
            population,
            out_dir,
        } => {
            let seed = seed_override(seed);
            let (obs, spread) = match (obs_dir, trace) {
                (Some(dir), None) => (read_window(&dir)?, None),
                (None, Some(path)) => {
                    let mix = mix.expect("clap enforces a mix flag with --trace");
                    let trace = read_trace(&path)?;
                    let partition = partition_rounds(&trace, mix.config())?;
                    let obs = tally(&trace, &partition);
                    let spread = recipient_spread(&trace, &partition);
                    (obs, Some(spread))
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "pass exactly one of --obs-dir or --trace".into(),
                    ))
                }
            };
            std::fs::create_dir_all(&out_dir)?;

            let report = covariance_report(&obs, budget, seed)?;
            let mut cov_out = BufWriter::new(File::create(out_dir.join("covariances.csv"))?);
            writeln!(cov_out, "statistic,value")?;
            for (label, value) in report.rows() {
                writeln!(cov_out, "{label},{}", opt_field(value))?;
            }
            writeln!(cov_out, "budget,{}", report.budget)?;
            for (name, cond) in [
                ("pairwise", report.pairwise),
                ("third_order", report.third_order),
                ("fourth_order", report.fourth_order),
            ] {
                let (ratio, violated) = cond
                    .map(|c| (format!("{:e}", c.max_ratio), c.violated.to_string()))
                    .unwrap_or_default();
                writeln!(cov_out, "ratio_{name},{ratio}")?;
                writeln!(cov_out, "violated_{name},{violated}")?;
            }

            let hist = input_histogram(&obs);
            let pmf = match population {
                Some(path) => {
                    let config = read_population(&path)?;
                    let spec = build_spec(&config, &path)?;
                    Some(theoretical_input_pmf(spec.input()))
                }
                None => None,
            };
            let mut hist_out = BufWriter::new(File::create(out_dir.join("histogram.csv"))?);
            writeln!(hist_out, "value,count,pmf_model")?;
            for v in 0..HISTOGRAM_BINS {
                let model = pmf.as_ref().map(|p| format!("{:e}", p[v])).unwrap_or_default();
                writeln!(hist_out, "{v},{},{model}", hist.bins[v])?;
            }
            let overflow_model = pmf
                .as_ref()
                .map(|p| format!("{:e}", p[HISTOGRAM_BINS]))
                .unwrap_or_default();
            writeln!(hist_out, "50+,{},{overflow_model}", hist.overflow)?;

            if let Some(spread) = spread {
                let mut spread_out =
                    BufWriter::new(File::create(out_dir.join("recipient_spread.csv"))?);
                writeln!(spread_out, "messages,avg_distinct_recipients")?;
                for (label, avg) in SPREAD_BIN_LABELS.iter().zip(spread.bin_averages) {
                    writeln!(spread_out, "{label},{}", opt_field(avg))?;
                }
                writeln!(
                    spread_out,
                    "contacts_per_sender,{:e}",
                    spread.avg_contacts_per_sender
                )?;
            }
            println!(
                "diagnostics written to {} (pairwise ratio {})",
                out_dir.display(),
                report
                    .pairwise
                    .map(|c| format!("{:.4}", c.max_ratio))
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(())
        }
        Command::Synth {
            config,
            rho,
            emit,
            out_dir,
        } => {
            let raw = read_population(&config)?;
            let spec = build_spec(&raw, &config)?;
            std::fs::create_dir_all(&out_dir)?;
            // Echo the profiles actually used, normalization included.
            let profile_out = File::create(out_dir.join("profiles.csv"))?;
            spec.profiles().write_csv(BufWriter::new(profile_out))?;
            match emit.as_str() {
                "window" => {
                    let obs = generate_rounds(&spec, rho)?;
                    write_window(&obs, &out_dir)?;
                    println!("{}", round_stats(&obs));
                }
                "trace" => {
                    let trace = generate_trace(&spec, rho)?;
                    let out = File::create(out_dir.join("trace.csv"))?;
                    trace.write(BufWriter::new(out))?;
                    println!(
                        "events={} senders={} receivers={} rounds={rho}",
                        trace.events().len(),
                        trace.num_senders(),
                        trace.num_receivers()
                    );
                }
                _ => unreachable!("clap validates --emit"),
            }
            Ok(())
        }
        Command::Evaluate {
            config,
            rho,
            trace,
            mix,
            out_dir,
        } => {
            let (obs, truth, seed, source) = match (config, trace) {
                (Some(path), None) => {
                    let rho = rho.ok_or_else(|| {
                        Error::InvalidConfig("--config requires --rho".into())
                    })?;
                    let raw = read_population(&path)?;
                    let spec = build_spec(&raw, &path)?;
                    let mut echo_config = raw.clone();
                    echo_config.seed = spec.seed();
                    let source = serde_json::json!({
                        "population": echo_config,
                        "rho": rho,
                    });
                    let obs = generate_rounds(&spec, rho)?;
                    (obs, spec.profiles().clone(), Some(spec.seed()), source)
                }
                (None, Some(path)) => {
                    let mix = mix.ok_or_else(|| {
                        Error::InvalidConfig("--trace requires --threshold or --timed".into())
                    })?;
                    let trace = read_trace(&path)?;
                    let obs = anonymize(&trace, mix.config())?;
                    let truth = trace.ground_truth_profiles()?;
                    (obs, truth, None, mix.echo())
                }
                _ => {
                    return Err(Error::InvalidConfig(
                        "pass exactly one of --config or --trace".into(),
                    ))
                }
            };

            let selection = select_evaluation_users(&obs, obs.rho());
            let report = run_evaluation(&obs, &truth, &selection.users)?;
            let verdict = compare_models(&report);
            let artifact = EvaluationArtifact {
                command: "evaluate",
                seed,
                source,
                fallback_early_only: selection.fallback_early_only,
                input_moments: input_moments(&obs)?,
                verdict,
                report,
            };

            std::fs::create_dir_all(&out_dir)?;
            let json_out = File::create(out_dir.join("report.json"))?;
            serde_json::to_writer_pretty(BufWriter::new(json_out), &artifact)?;
            let csv_out = File::create(out_dir.join("report.csv"))?;
            write_report_csv(&artifact.report, BufWriter::new(csv_out))?;
            println!(
                "rho_max={} users={} verdict={}",
                artifact.report.rho_max,
                artifact.report.users.len(),
                verdict
            );
            Ok(())
        }
    }
}

fn read_trace(path: &Path) -> Result<Trace, Error> {
    Trace::parse(BufReader::new(File::open(path)?))
}

fn read_window(dir: &Path) -> Result<ObservationWindow, Error> {
    let u = BufReader::new(File::open(dir.join("U.csv"))?);
    let y = BufReader::new(File::open(dir.join("Y.csv"))?);
    ObservationWindow::read_csv(u, y)
}

fn write_window(obs: &ObservationWindow, dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let u = BufWriter::new(File::create(dir.join("U.csv"))?);
    let y = BufWriter::new(File::create(dir.join("Y.csv"))?);
    obs.write_csv(u, y)?;
    Ok(())
}

fn read_population(path: &Path) -> Result<PopulationConfig, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut config: PopulationConfig = serde_json::from_str(&text)?;
    config.seed = seed_override(config.seed);
    Ok(config)
}

/// MIXSCOPE_SEED overrides any configured seed.
fn seed_override(configured: u64) -> u64 {
    match std::env::var(SEED_ENV) {
        Ok(text) => text.parse().unwrap_or_else(|_| {
            eprintln!("warning: ignoring non-integer {SEED_ENV}={text:?}");
            configured
        }),
        Err(_) => configured,
    }
}

fn build_spec(config: &PopulationConfig, config_path: &Path) -> Result<PopulationSpec, Error> {
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    PopulationSpec::from_config(config, base)
}

fn opt_field(value: Option<f64>) -> String {
    value.map(|v| format!("{v:e}")).unwrap_or_default()
}
