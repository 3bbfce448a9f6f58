use std::io::Write;
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use ceusnav::harness::{
    quantify_batch, run_operator_study, run_repeatability, run_steady_state_study, write_csv, ExperimentConfig,
    QuantifyOptions, SessionSimulator, SimulationConfig,
};
use ceusnav::quant::Voi;
use ceusnav::realign::PoseGapPolicy;
use ceusnav::stream::{
    read_session, record_session, MessageSource, ReplaySource, ServeConfig, SessionReader, SessionRecorder,
    SessionServer,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ceusnav", version, about = "Tracked 4D contrast ultrasound workbench")]
struct Cli {
    /// Log as JSON lines on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an acquisition and write it to a session file.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Stream a live simulated acquisition over TCP and WebSocket.
    Serve {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Subscribe to a running server and record the stream.
    Record {
        #[arg(long, default_value = "127.0.0.1:7420")]
        connect: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Serve a recorded session.
    Replay {
        input: PathBuf,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Fit every flash of the given session files; CSV to stdout or --out.
    Quantify {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// VOI as JSON file; each session's own VOI when omitted.
        #[arg(long)]
        voi: Option<PathBuf>,
        #[arg(long)]
        realign: bool,
        #[arg(long, value_enum, default_value_t = GapArg::Exclude)]
        pose_gap: GapArg,
        #[arg(long)]
        fit_window: Option<f64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Holding and repositioning study over simulated operators.
    OperatorStudy(StudyArgs),
    /// R1/R2 repeatability with and without re-alignment.
    Repeatability(StudyArgs),
    /// Time to steady state per tissue.
    SteadyState(StudyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GapArg {
    Exclude,
    Interpolate,
}

#[derive(Args)]
struct SimArgs {
    /// Simulation config (JSON or TOML); its values override flags.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    duration: Option<f64>,
    /// Scheduled flash time, s (repeatable).
    #[arg(long = "flash")]
    flashes: Vec<f64>,
    /// Flash automatically once the lesion TIC is steady.
    #[arg(long)]
    auto_flash: bool,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, default_value = "127.0.0.1:7420")]
    tcp: String,
    #[arg(long, default_value = "127.0.0.1:7421")]
    ws: String,
    #[arg(long)]
    no_ws: bool,
    /// Ignore timestamps and stream as fast as possible.
    #[arg(long)]
    max_speed: bool,
    /// Wait for this many clients before starting.
    #[arg(long, default_value_t = 0)]
    min_subscribers: usize,
}

#[derive(Args)]
struct StudyArgs {
    /// Experiment config (JSON or TOML); its values override flags.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    operators: Option<usize>,
    #[arg(long)]
    runs_per_operator: Option<usize>,
    #[arg(long)]
    hold_duration: Option<f64>,
    #[arg(long)]
    reposition_duration: Option<f64>,
    #[arg(long)]
    fit_window: Option<f64>,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Bad configuration or input; exits with 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct ConfigError(String);

fn config_err(e: ceusnav::Error) -> anyhow::Error {
    if e.is_config() {
        ConfigError(e.to_string()).into()
    } else {
        e.into()
    }
}

/// Overlays `file` onto the serialised flag values.
fn merge_file<T>(from_flags: &T, file: Option<&Path>) -> anyhow::Result<T>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut base = serde_json::to_value(from_flags)?;
    let Some(path) = file else {
        return Ok(serde_json::from_value(base)?);
    };
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    let overlay: serde_json::Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?
    };
    merge(&mut base, overlay);
    serde_json::from_value(base).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

fn simulation_config(args: &SimArgs) -> anyhow::Result<SimulationConfig> {
    let mut cfg = SimulationConfig::default();
    if let Some(s) = args.seed {
        cfg.seed = s;
        cfg.motion.seed = s;
    }
    if let Some(d) = args.duration {
        cfg.duration = d;
    }
    cfg.flash_times = args.flashes.clone();
    if args.auto_flash {
        cfg.auto_flash = Some(Default::default());
    }
    let cfg: SimulationConfig = merge_file(&cfg, args.config.as_deref())?;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn experiment_config(args: &StudyArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    macro_rules! apply {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    apply!(seed, patients, operators, runs_per_operator, hold_duration, reposition_duration, fit_window);
    if args.out.is_some() {
        cfg.output_dir = args.out.clone();
    }
    let cfg: ExperimentConfig = merge_file(&cfg, args.config.as_deref())?;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn serve_config(net: &NetArgs) -> ServeConfig {
    ServeConfig {
        tcp_addr: net.tcp.clone(),
        ws_addr: (!net.no_ws).then(|| net.ws.clone()),
        max_speed: net.max_speed,
        min_subscribers: net.min_subscribers,
        ..ServeConfig::default()
    }
}

fn serve<S: MessageSource + 'static>(net: &NetArgs, source: S) -> anyhow::Result<S> {
    let server = SessionServer::bind(serve_config(net))?;
    let handle = server.run(source)?;
    log::info!("serving on tcp {} ws {:?}", handle.tcp_addr, handle.ws_addr);
    Ok(handle.join()?)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { sim, out } => {
            let cfg = simulation_config(&sim)?;
            let mut sim = SessionSimulator::new(cfg).map_err(config_err)?;
            let header = sim.header();
            let messages = sim.collect()?;
            let n = messages.len();
            let path = record_session(messages, &header, &out)?;
            log::info!("{n} messages, flashes at {:?}", sim.flash_times());
            println!("{}", path.display());
        }
        Command::Serve { sim, net } => {
            let cfg = simulation_config(&sim)?;
            let sim = SessionSimulator::new(cfg).map_err(config_err)?;
            let sim = serve(&net, sim)?;
            log::info!("session finished; flashes at {:?}", sim.flash_times());
        }
        Command::Record { connect, out } => {
            let stream = TcpStream::connect(&connect).with_context(|| format!("connecting to {connect}"))?;
            stream.set_read_timeout(Some(Duration::from_secs(60)))?;
            let mut reader = SessionReader::new(std::io::BufReader::new(stream))?;
            let mut rec = SessionRecorder::create(&out, &reader.header)?;
            while let Some(m) = reader.next_message()? {
                rec.append(&m)?;
            }
            let n = rec.message_count();
            let path = rec.finish()?;
            log::info!("recorded {n} messages");
            println!("{}", path.display());
        }
        Command::Replay { input, net } => {
            let log = read_session(&input).map_err(config_err)?;
            let source = serve(&net, ReplaySource::new(log))?;
            log::info!("replay finished; {} controls received", source.received_controls.len());
        }
        Command::Quantify {
            files,
            voi,
            realign,
            pose_gap,
            fit_window,
            out,
        } => {
            let voi: Option<Voi> = match voi {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?;
                    Some(serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            let defaults = QuantifyOptions::default();
            let options = QuantifyOptions {
                realign,
                pose_gap: match pose_gap {
                    GapArg::Exclude => PoseGapPolicy::Exclude,
                    GapArg::Interpolate => PoseGapPolicy::Interpolate,
                },
                fit_window: fit_window.unwrap_or(defaults.fit_window),
                ..defaults
            };
            let condition = if realign { "aligned" } else { "unaligned" };
            let rows = quantify_batch(&files, voi.as_ref(), &options, condition)?;
            match out {
                Some(path) => write_csv(&path, &rows)?,
                None => std::io::stdout().write_all(&ceusnav::harness::to_csv(&rows)?)?,
            }
        }
        Command::OperatorStudy(args) => {
            let cfg = experiment_config(&args)?;
            let report = run_operator_study(&cfg)?;
            let dir = output_dir(&cfg);
            write_csv(&dir.join("operator_features.csv"), &report.features)?;
            write_csv(&dir.join("operator_runs.csv"), &report.runs)?;
            write_csv(&dir.join("operator_traces.csv"), &report.traces)?;
            println!("{}", String::from_utf8_lossy(&ceusnav::harness::to_csv(&report.features)?));
        }
        Command::Repeatability(args) => {
            let cfg = experiment_config(&args)?;
            let report = run_repeatability(&cfg)?;
            let dir = output_dir(&cfg);
            write_csv(&dir.join("repeatability_icc.csv"), &report.icc)?;
            write_csv(&dir.join("repeatability_fits.csv"), &report.fits)?;
            println!("{}", String::from_utf8_lossy(&ceusnav::harness::to_csv(&report.icc)?));
        }
        Command::SteadyState(args) => {
            let cfg = experiment_config(&args)?;
            let rows = run_steady_state_study(&cfg)?;
            write_csv(&output_dir(&cfg).join("steady_state.csv"), &rows)?;
            println!("{}", String::from_utf8_lossy(&ceusnav::harness::to_csv(&rows)?));
        }
    }
    Ok(())
}

fn init_logging(json: bool) {
    let mut builder = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if json {
        builder.format(|buf, record| {
            let line = serde_json::json!({
                "ts": buf.timestamp_millis().to_string(),
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    builder.init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.json);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            let config = e.downcast_ref::<ConfigError>().is_some()
                || e.downcast_ref::<ceusnav::Error>().is_some_and(|e| e.is_config());
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}
