use std::error::Error;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use basalguard_core::alerts::{AlertConfig, AlertState};
use basalguard_core::derivation::run_derivation_oracle;
use basalguard_core::domain::{DeviceErrorBounds, GlucoseReading, TherapySettings};
use basalguard_core::driver::{benign_trace, mutate_trace, read_trace, run_trace, write_trace, MessageName, Mutation};
use basalguard_core::event_store::{read_log, replay, EventBody};
use basalguard_core::experiment::{render, run_grid, Attack, BenchConfig, BenchError};
use basalguard_core::patient::{CohortSpec, Scenario};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "basalguard", version, about = "Simulation and verification harness for the insulin safety kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cohort benchmark over the requested model x attack x clamp grid.
    Bench(BenchArgs),
    /// Re-run a logged simulation and report divergences.
    Replay(ReplayArgs),
    /// Mutation-fuzz a pump trace through the driver shim.
    FuzzDriver(FuzzArgs),
    /// Evaluate the hypoglycemia alert over the readings in an event log.
    AlertsEval(AlertArgs),
    /// Sample the physiological check against the true-value bound.
    DerivationReport(DerivationArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// JSON benchmark config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON scenario file; defaults to three meals a day.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Days of the default three-meal scenario.
    #[arg(long)]
    days: Option<u32>,
    #[arg(long)]
    adults: Option<u32>,
    #[arg(long)]
    adolescents: Option<u32>,
    #[arg(long)]
    children: Option<u32>,
    /// baseline, predictive, or reactive; repeat or comma-separate for a grid.
    #[arg(long, value_delimiter = ',')]
    model: Vec<String>,
    /// none, overdose10x, or underdose10x.
    #[arg(long, value_delimiter = ',')]
    attack: Vec<String>,
    /// on or off.
    #[arg(long, value_delimiter = ',', value_parser = parse_switch)]
    clamp: Vec<bool>,
    /// Enable the physiological check.
    #[arg(long)]
    invariant: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    alerts: AlertFlags,
}

#[derive(Args)]
struct AlertFlags {
    /// Alert threshold, mg/dl.
    #[arg(long)]
    alert_threshold: Option<f64>,
    /// Minimum minutes between alerts.
    #[arg(long)]
    alert_repeat: Option<i64>,
    /// Prediction horizon, minutes.
    #[arg(long)]
    alert_horizon: Option<i64>,
    /// Regression window, minutes.
    #[arg(long)]
    alert_window: Option<i64>,
}

impl AlertFlags {
    fn apply(&self, base: AlertConfig) -> Result<AlertConfig> {
        Ok(AlertConfig {
            prediction_threshold: self.alert_threshold.unwrap_or(base.prediction_threshold),
            repeat_interval: self.alert_repeat.unwrap_or(base.repeat_interval),
            horizon: self.alert_horizon.unwrap_or(base.horizon),
            window: self.alert_window.unwrap_or(base.window),
        }
        .validated()?)
    }
}

#[derive(Args)]
struct ReplayArgs {
    /// Event log written by `bench --output-dir`.
    log: PathBuf,
    /// JSON settings to replay under; defaults to the settings in the log header.
    #[arg(long)]
    settings: Option<PathBuf>,
}

#[derive(Args)]
struct FuzzArgs {
    /// Trace file (JSON Lines); a benign trace is generated when absent.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Length of the generated trace.
    #[arg(long, default_value_t = 24)]
    hours: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Mutated traces per message type and mutation.
    #[arg(long, default_value_t = 10)]
    mutations: u64,
    /// Seconds before an unanswered command counts as dropped.
    #[arg(long, default_value_t = 30)]
    timeout: i64,
    /// Write the benign and every mutated trace here.
    #[arg(long)]
    emit_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AlertArgs {
    /// Event log whose glucose readings are evaluated.
    log: PathBuf,
    #[command(flatten)]
    alerts: AlertFlags,
}

#[derive(Args)]
struct DerivationArgs {
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Markdown output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(file)).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn bench(args: BenchArgs) -> Result<()> {
    let mut base = match &args.config {
        Some(path) => read_json::<BenchConfig>(path)?,
        None => BenchConfig::new("baseline", Attack::None, true),
    };
    if let Some(seed) = args.seed {
        base.seed = seed;
        base.scenario.rng_seed = seed;
    }
    if let Some(days) = args.days {
        base.scenario = Scenario::three_meals(days, base.seed);
    }
    if let Some(path) = &args.scenario {
        base.scenario = read_json(path)?;
    }
    let cohort = base.cohort;
    base.cohort = CohortSpec {
        adults: args.adults.unwrap_or(cohort.adults),
        adolescents: args.adolescents.unwrap_or(cohort.adolescents),
        children: args.children.unwrap_or(cohort.children),
    };
    if let Some(on) = args.invariant {
        base.invariant_enabled = on;
    }
    if args.output_dir.is_some() {
        base.output_dir = args.output_dir.clone();
    }
    base.alerts = args.alerts.apply(base.alerts)?;

    let models = if args.model.is_empty() { vec![base.model.clone()] } else { args.model };
    let attacks = if args.attack.is_empty() {
        vec![base.attack]
    } else {
        args.attack.iter().map(|a| a.parse()).collect::<std::result::Result<_, _>>()?
    };
    let clamps = if args.clamp.is_empty() { vec![base.clamp_enabled] } else { args.clamp };
    let models: Vec<&str> = models.iter().map(String::as_str).collect();

    let results = run_grid(&base, &models, &attacks, &clamps)?;
    if results.is_empty() {
        return Err(BenchError::AttackWithoutModel.into());
    }
    let mut out = io::stdout().lock();
    for r in &results {
        writeln!(out, "{}", render(r))?;
    }
    Ok(())
}

fn replay_cmd(args: ReplayArgs) -> Result<bool> {
    let (header, records) = read_log(&args.log).map_err(|e| format!("{}: {e}", args.log.display()))?;
    let settings: TherapySettings = match &args.settings {
        Some(path) => read_json(path)?,
        None => header.settings.clone(),
    };
    let report = replay(&header, &records, &settings);
    match report.first_divergence() {
        None => {
            println!("0 divergences over {} iterations", report.recomputed.len());
            Ok(true)
        }
        Some(d) => {
            println!(
                "{} divergences over {} iterations; first at record {} (t = {} s)",
                report.divergences.len(),
                report.recomputed.len(),
                d.seq,
                d.at.0
            );
            println!("logged:     {}", serde_json::to_string(&d.logged)?);
            println!("recomputed: {}", serde_json::to_string(&d.recomputed)?);
            Ok(false)
        }
    }
}

fn fuzz_driver(args: FuzzArgs) -> Result<bool> {
    let trace = match &args.trace {
        Some(path) => read_trace(BufReader::new(File::open(path).map_err(|e| format!("{}: {e}", path.display()))?))?,
        None => benign_trace(args.hours, args.seed),
    };
    if let Some(dir) = &args.emit_dir {
        fs::create_dir_all(dir)?;
        write_trace(BufWriter::new(File::create(dir.join("benign.jsonl"))?), &trace)?;
    }
    let benign = run_trace(&trace, args.timeout)?;
    println!(
        "benign trace: {} records, {} forwarded, {} rejections",
        trace.len(),
        benign.forwarded,
        benign.rejections.len()
    );
    let mut all_detected = benign.rejections.is_empty();

    println!("{:<16} {:>9} {:>9} {:>9}", "message", "add", "drop", "modify");
    for name in MessageName::INSULIN_DELIVERY {
        let label = serde_json::to_value(name)?.as_str().unwrap_or_default().to_string();
        let mut cells = Vec::new();
        for m in Mutation::ALL {
            let mut detected = 0;
            let mut tried = 0;
            for k in 0..args.mutations {
                let Some(mutated) = mutate_trace(&trace, name, m, args.seed.wrapping_add(k)) else { continue };
                tried += 1;
                if run_trace(&mutated, args.timeout)?.detected() {
                    detected += 1;
                }
                if let Some(dir) = &args.emit_dir {
                    let file = dir.join(format!("{label}-{}-{k}.jsonl", format!("{m:?}").to_lowercase()));
                    write_trace(BufWriter::new(File::create(file)?), &mutated)?;
                }
            }
            all_detected &= tried > 0 && detected == tried;
            cells.push(if tried == 0 { "absent".to_string() } else { format!("{detected}/{tried}") });
        }
        println!("{label:<16} {:>9} {:>9} {:>9}", cells[0], cells[1], cells[2]);
    }
    Ok(all_detected)
}

fn alerts_eval(args: AlertArgs) -> Result<()> {
    let (header, records) = read_log(&args.log).map_err(|e| format!("{}: {e}", args.log.display()))?;
    let cfg = args.alerts.apply(header.loop_config.alerts)?;
    let readings: Vec<GlucoseReading> = records
        .iter()
        .filter_map(|r| match &r.body {
            EventBody::Cgm(g) => Some(*g),
            _ => None,
        })
        .collect();
    let mut state = AlertState::default();
    let mut fired = 0;
    for (i, r) in readings.iter().enumerate() {
        if let Some(p) = state.evaluate(&readings[..=i], &cfg, r.at) {
            fired += 1;
            println!(
                "t = {:>7} s  glucose {:>6.1}  crossing at {:>7} s  predicted {:>6.1}",
                r.at.0, r.value, p.crossing_at.0, p.predicted_value
            );
        }
    }
    println!("{fired} alerts over {} readings", readings.len());
    Ok(())
}

fn derivation_report(args: DerivationArgs) -> Result<()> {
    let report = run_derivation_oracle(args.samples, args.seed, &DeviceErrorBounds::default());
    let md = report.to_markdown();
    match &args.out {
        Some(path) => fs::write(path, md)?,
        None => print!("{md}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Bench(a) => bench(a).map(|_| true),
        Command::Replay(a) => replay_cmd(a),
        Command::FuzzDriver(a) => fuzz_driver(a),
        Command::AlertsEval(a) => alerts_eval(a).map(|_| true),
        Command::DerivationReport(a) => derivation_report(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
