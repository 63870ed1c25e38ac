//! `qkdlab`: predict, simulate, synchronize and distill entanglement-based
//! QKD links.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 no clock lock,
//! 4 QBER above the positive-rate cutoff.

// `!(x > 0.0)` style checks are there to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use qkdlab::keyrate::{self, KeyRateError, Placement};
use qkdlab::protocol::{self, ProtocolConfig, ProtocolError};
use qkdlab::scenario::ConfigError;
use qkdlab::simulator::{self, SimError};
use qkdlab::timesync::{self, SyncConfig, SyncError};
use qkdlab::{ScenarioConfig, TagStream};

const SCENARIO_DIR_ENV: &str = "QKDLAB_SCENARIO_DIR";

#[derive(Parser)]
#[command(name = "qkdlab", version, about = "Entanglement-based QKD link lab")]
struct Cli {
    /// Scenario file; takes precedence over --scenario.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; defaults to the scenario's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Directory searched for `<name>.toml` before the built-in presets.
    #[arg(long, global = true, env = SCENARIO_DIR_ENV)]
    scenario_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analytic key-rate prediction for a scenario.
    Predict(PredictArgs),
    /// Secure rate versus total attenuation as CSV.
    Curve(CurveArgs),
    /// Simulate both parties' time-tag files.
    Simulate(SimulateArgs),
    /// Recover the clock offset track and the coincidences.
    Sync(SyncArgs),
    /// Full post-processing down to a secure key.
    Distill(DistillArgs),
}

#[derive(Args)]
struct PredictArgs {
    /// Preset name or `<name>.toml` in the scenario directory
    #[arg(long, default_value = "at-alice")]
    scenario: String,
    /// Override Alice's arm attenuation, dB
    #[arg(long)]
    alice_arm_db: Option<f64>,
    /// Override Bob's arm attenuation, dB
    #[arg(long)]
    bob_arm_db: Option<f64>,
    /// Override the coincidence window, ns
    #[arg(long)]
    window_ns: Option<f64>,
    /// Override the source/analyzer visibility
    #[arg(long)]
    v_sys: Option<f64>,
    /// Override the in-field visibility factor
    #[arg(long)]
    field_visibility: Option<f64>,
}

#[derive(Args)]
struct CurveArgs {
    /// at-alice, asymmetric or middle
    #[arg(long, required_unless_present = "all", conflicts_with = "all")]
    placement: Option<Placement>,
    /// Write one CSV per placement into the --out directory.
    #[arg(long)]
    all: bool,
    /// Total attenuation sweep `START:END` in dB.
    #[arg(long, default_value = "0:80", value_parser = parse_range)]
    range: (f64, f64),
    /// Attenuation step, dB
    #[arg(long, default_value_t = 1.0)]
    step: f64,
    /// Evaluate with the in-field visibility loss instead of the model bound.
    #[arg(long)]
    field: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name or `<name>.toml` in the scenario directory
    #[arg(long, default_value = "at-alice")]
    scenario: String,
    /// Seconds to simulate; defaults to the scenario's duration.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct SyncArgs {
    /// Alice's tag file (.qtt binary or text)
    alice: PathBuf,
    /// Bob's tag file
    bob: PathBuf,
    /// Length of each drift-tracking block, s
    #[arg(long, default_value_t = 5.0)]
    block_s: f64,
    /// Coincidence window; defaults to the scenario's when one is given.
    #[arg(long)]
    window_ns: Option<f64>,
    /// Full width of the initial offset search, ns
    #[arg(long, default_value_t = 2.0e6)]
    search_span_ns: f64,
    /// Center of the initial offset search (Bob minus Alice), ns
    #[arg(long, default_value_t = 0.0)]
    initial_offset_ns: f64,
    /// Scenario supplying the coincidence window.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Args)]
struct DistillArgs {
    /// Alice's tag file (.qtt binary or text)
    alice: PathBuf,
    /// Bob's tag file
    bob: PathBuf,
    /// Length of each drift-tracking block, s
    #[arg(long, default_value_t = 5.0)]
    block_s: f64,
    /// Coincidence window; defaults to the scenario's when one is given
    #[arg(long)]
    window_ns: Option<f64>,
    /// Fraction of the sifted key revealed to estimate the QBER
    #[arg(long, default_value_t = 0.1)]
    sample_fraction: f64,
    /// Bin width of the sifted-rate trace, s
    #[arg(long, default_value_t = 0.2)]
    rate_bin_s: f64,
    /// Scenario supplying window, f(q) table and seed.
    #[arg(long)]
    scenario: Option<String>,
}

/// Bad arguments that clap cannot see.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let num = |x: &str| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}"));
    Ok((num(a)?, num(b)?))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() || cause.is::<clap::Error>() {
            return 2;
        }
        if let Some(SyncError::NoLock { .. }) = cause.downcast_ref::<SyncError>() {
            return 3;
        }
        match cause.downcast_ref::<ProtocolError>() {
            Some(ProtocolError::Sync(SyncError::NoLock { .. })) => return 3,
            Some(ProtocolError::AboveCutoff { .. }) => return 4,
            _ => {}
        }
        if let Some(ConfigError::UnknownPreset(_)) = cause.downcast_ref::<ConfigError>() {
            return 2;
        }
        if let Some(SimError::BadDuration(_)) = cause.downcast_ref::<SimError>() {
            return 2;
        }
        if let Some(KeyRateError::EmptyRange { .. } | KeyRateError::NonPositiveStep(_) | KeyRateError::Domain { .. }) =
            cause.downcast_ref::<KeyRateError>()
        {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Predict(args) => predict(cli, args),
        Command::Curve(args) => curve(cli, args),
        Command::Simulate(args) => simulate(cli, args),
        Command::Sync(args) => sync(cli, args),
        Command::Distill(args) => distill(cli, args),
    }
}

/// `--config` file, else `<scenario-dir>/<name>.toml`, else a built-in preset.
fn load_scenario(cli: &Cli, name: &str) -> Result<ScenarioConfig> {
    if let Some(path) = &cli.config {
        return ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()));
    }
    if let Some(dir) = &cli.scenario_dir {
        let path = dir.join(format!("{name}.toml"));
        if path.is_file() {
            return ScenarioConfig::load(&path).with_context(|| format!("loading {}", path.display()));
        }
    }
    Ok(ScenarioConfig::preset(name)?)
}

fn optional_scenario(cli: &Cli, name: Option<&str>) -> Result<Option<ScenarioConfig>> {
    match (name, &cli.config) {
        (None, None) => Ok(None),
        (name, _) => load_scenario(cli, name.unwrap_or("")).map(Some),
    }
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot write {}", path.display()))?,
    ))
}

fn predict(cli: &Cli, args: &PredictArgs) -> Result<()> {
    let mut config = load_scenario(cli, &args.scenario)?;
    if let Some(x) = args.alice_arm_db {
        config.link.alice_arm_db = x;
    }
    if let Some(x) = args.bob_arm_db {
        config.link.bob_arm_db = x;
    }
    if let Some(x) = args.window_ns {
        config.coincidence_window_ns = x;
    }
    if let Some(x) = args.v_sys {
        config.source.v_sys = x;
    }
    if let Some(x) = args.field_visibility {
        config.source.field_visibility = x;
    }
    let budget = config.link_budget()?;
    let p = keyrate::predict_scenario(&config)?;
    let v = p.visibility;
    let report = format!(
        "scenario                {}\n\
         placement               {}\n\
         attenuation_db          {} (alice {} + bob {})\n\
         coincidence_window_ns   {}\n\
         coincidences_per_s      {}\n\
         sifted_rate_per_s       {}\n\
         v_sys                   {}\n\
         v_acc                   {}\n\
         v_th                    {}\n\
         v_tot                   {}\n\
         qber                    {}\n\
         f                       {}\n\
         secure_rate_bits_per_s  {}\n",
        config.name,
        config.placement,
        budget.total_db(),
        budget.alice_arm_db,
        budget.bob_arm_db,
        config.coincidence_window_ns,
        keyrate::format_sig6(p.coincidence_rate),
        keyrate::format_sig6(p.sifted_rate),
        keyrate::format_sig6(v.v_sys),
        keyrate::format_sig6(v.v_acc),
        keyrate::format_sig6(v.v_th),
        keyrate::format_sig6(v.v_tot),
        keyrate::format_sig6(p.qber),
        keyrate::format_sig6(p.error_correction_factor),
        keyrate::format_sig6(p.secure_rate),
    );
    print!("{report}");
    if let Some(path) = &cli.out {
        fs::write(path, &report).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn curve_points(cli: &Cli, placement: Placement, args: &CurveArgs) -> Result<Vec<keyrate::CurvePoint>> {
    let config = load_scenario(cli, placement.name())?;
    let params = config.source_detector_params();
    let params = if args.field { params } else { params.model_bound() };
    Ok(keyrate::rate_vs_attenuation_curve(
        placement,
        args.range.0..=args.range.1,
        args.step,
        &params,
    )?)
}

fn curve(cli: &Cli, args: &CurveArgs) -> Result<()> {
    if args.range.0 > args.range.1 {
        return Err(usage(format!("empty range {}:{}", args.range.0, args.range.1)));
    }
    if args.all {
        let dir = out_dir(cli, "curves")?;
        for placement in Placement::ALL {
            let points = curve_points(cli, placement, args)?;
            let path = dir.join(format!("{}.csv", placement.name()));
            keyrate::write_curve_csv(create(&path)?, &points)?;
            eprintln!("wrote {} ({} points)", path.display(), points.len());
        }
        return Ok(());
    }
    let placement = args.placement.expect("clap enforces --placement without --all");
    let points = curve_points(cli, placement, args)?;
    match &cli.out {
        Some(path) => keyrate::write_curve_csv(create(path)?, &points)?,
        None => keyrate::write_curve_csv(io::stdout().lock(), &points)?,
    }
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn simulate(cli: &Cli, args: &SimulateArgs) -> Result<()> {
    let config = load_scenario(cli, &args.scenario)?;
    let duration = args.duration.unwrap_or(config.duration_s);
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(usage(format!("--duration must be positive, got {duration}")));
    }
    let seed = cli.seed.unwrap_or(config.seed);
    let dir = out_dir(cli, "run")?;

    let run = simulator::generate_run(&config, duration, seed)?;
    let scenario_text = config.to_toml_string()?;
    fs::write(dir.join("scenario.toml"), &scenario_text)?;
    run.alice.write_file(&dir.join("alice.qtt"))?;
    run.bob.write_file(&dir.join("bob.qtt"))?;
    let mut truth = create(&dir.join("truth.csv"))?;
    run.write_truth_csv(&mut truth)?;
    truth.flush()?;

    let mut manifest = format!(
        "scenario = \"{}\"\nconfig_sha256 = \"{}\"\nseed = {seed}\nduration_s = {duration}\n",
        config.name,
        hex::encode(Sha256::digest(scenario_text.as_bytes())),
    );
    for name in ["scenario.toml", "alice.qtt", "bob.qtt", "truth.csv"] {
        manifest.push_str(&format!(
            "\n[files.\"{name}\"]\nsha256 = \"{}\"\n",
            sha256_file(&dir.join(name))?
        ));
    }
    fs::write(dir.join("manifest.toml"), manifest)?;
    println!(
        "alice_tags {}\nbob_tags {}\ntrue_coincidences {}\nout {}",
        run.alice.len(),
        run.bob.len(),
        run.truth.len(),
        dir.display()
    );
    Ok(())
}

fn read_streams(alice: &Path, bob: &Path) -> Result<(TagStream, TagStream)> {
    let read = |p: &Path| TagStream::read_file(p).with_context(|| format!("reading {}", p.display()));
    let (a, b) = (read(alice)?, read(bob)?);
    for (p, s) in [(alice, &a), (bob, &b)] {
        if !s.is_sorted() {
            bail!("{} is not strictly time ordered", p.display());
        }
    }
    Ok((a, b))
}

fn sync_config(block_s: f64, window_ns: f64) -> Result<SyncConfig> {
    if !(block_s > 0.0) {
        return Err(usage(format!("--block-s must be positive, got {block_s}")));
    }
    if !(window_ns > 0.0) {
        return Err(usage(format!("--window-ns must be positive, got {window_ns}")));
    }
    Ok(SyncConfig {
        block_length_s: block_s,
        window_ns,
        ..SyncConfig::default()
    })
}

fn sync(cli: &Cli, args: &SyncArgs) -> Result<()> {
    let scenario = optional_scenario(cli, args.scenario.as_deref())?;
    let window = args
        .window_ns
        .or(scenario.as_ref().map(|c| c.coincidence_window_ns))
        .unwrap_or(SyncConfig::default().window_ns);
    let cfg = SyncConfig {
        search_span_ns: args.search_span_ns,
        initial_offset_ns: args.initial_offset_ns,
        ..sync_config(args.block_s, window)?
    };
    let (a, b) = read_streams(&args.alice, &args.bob)?;
    let track = timesync::track_drift(&a, &b, &cfg)?;
    let dir = out_dir(cli, "sync")?;
    track.write_csv(create(&dir.join("drift.csv"))?)?;
    if track.locked_count() == 0 {
        let best = track.blocks.iter().map(|b| b.significance).fold(0.0, f64::max);
        return Err(SyncError::NoLock { significance: best }).with_context(|| {
            format!(
                "none of {} blocks of {} s locked; try longer blocks",
                track.blocks.len(),
                cfg.block_length_s
            )
        });
    }
    let pairs = timesync::pair_coincidences(&a, &b, &track, window)?;
    pairs.write_csv(create(&dir.join("coincidences.csv"))?)?;
    println!("blocks {}\nlocked {}", track.blocks.len(), track.locked_count());
    if let (Some(first), Some(last)) = (track.locked().next(), track.locked().last()) {
        println!("first_offset_ns {}\nlast_offset_ns {}", first.1, last.1);
    }
    if let Some(slope) = track.drift_slope_ns_per_s() {
        println!("drift_ns_per_s {}", keyrate::format_sig6(slope));
    }
    println!("coincidences {}\nout {}", pairs.len(), dir.display());
    Ok(())
}

fn key_hex(bits: &[bool]) -> String {
    let bytes: Vec<u8> = bits
        .chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (b as u8) << (7 - i))
        })
        .collect();
    hex::encode(bytes)
}

fn distill(cli: &Cli, args: &DistillArgs) -> Result<()> {
    let scenario = optional_scenario(cli, args.scenario.as_deref())?;
    let defaults = ProtocolConfig::default();
    let window = args
        .window_ns
        .or(scenario.as_ref().map(|c| c.coincidence_window_ns))
        .unwrap_or(defaults.window_ns);
    if !(args.sample_fraction > 0.0 && args.sample_fraction < 1.0) {
        return Err(usage(format!(
            "--sample-fraction must lie in (0, 1), got {}",
            args.sample_fraction
        )));
    }
    if !(args.rate_bin_s > 0.0) {
        return Err(usage(format!("--rate-bin-s must be positive, got {}", args.rate_bin_s)));
    }
    let sync = sync_config(args.block_s, window)?;
    let config = ProtocolConfig {
        sample_fraction: args.sample_fraction,
        rate_bin_s: args.rate_bin_s,
        window_ns: window,
        error_correction: scenario
            .as_ref()
            .map(|c| c.error_correction.clone())
            .unwrap_or(defaults.error_correction.clone()),
        seed: cli.seed.or(scenario.as_ref().map(|c| c.seed)).unwrap_or(defaults.seed),
        ..defaults
    };
    let (a, b) = read_streams(&args.alice, &args.bob)?;
    let d = protocol::run_distillation(&a, &b, &sync, &config)?;
    if d.alice_key != d.bob_key {
        bail!("secure keys differ after privacy amplification");
    }

    let dir = out_dir(cli, "distill")?;
    let report = d.material.to_report();
    fs::write(dir.join("key_material.txt"), &report)?;
    protocol::write_sifted_rate_csv(create(&dir.join("sifted_rate.csv"))?, &d.sifted_rate, config.rate_bin_s)?;
    d.track.write_csv(create(&dir.join("drift.csv"))?)?;
    d.channel.write_transcript(create(&dir.join("transcript.bin"))?)?;
    fs::write(dir.join("secure_key.hex"), key_hex(&d.alice_key) + "\n")?;
    print!("{report}");
    Ok(())
}
