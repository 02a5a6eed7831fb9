//! Command-line front end: validate scenario files, run single simulations,
//! run parameter sweeps and print the calibrated energy model.
//!
//! Exit codes: 0 success, 1 validation or configuration error, 2 internal
//! invariant breach.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use contextmesh_core::harness::{
    relative_spread, run_scenario, run_scenario_with_overrides, Metrics, Mode, ScenarioConfig,
};
use contextmesh_core::netsim::{
    CallRole, EnergyModel, TransportClass, CALL_COUNTS, HTTP_CLIENT_J, HTTP_SERVER_J,
    IPC_CLIENT_J, IPC_SERVER_J, SOCKET_CLIENT_J, SOCKET_SERVER_J,
};

/// Seed offset between repetitions of one sweep cell.
const REP_SEED_STRIDE: u64 = 1_000_003;

const DEFAULT_SCENARIO: &str = include_str!("../../../scenarios/table1.toml");

#[derive(Parser)]
#[command(
    name = "contextmesh",
    about = "Federated context-broker simulator with a calibrated energy cost model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single scenario and write metrics.csv plus trace.log.
    Run(RunArgs),
    /// Run a sweep over queries, availability or transport cells.
    Sweep(SweepArgs),
    /// Validate a scenario file without simulating.
    Validate(ValidateArgs),
    /// Print the calibrated per-call energy model.
    Calibrate,
}

#[derive(Args)]
struct ScenarioArg {
    /// Scenario file; the built-in default reproduces the reference roster.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

impl ScenarioArg {
    fn load(&self) -> Result<ScenarioConfig, String> {
        let text = match &self.scenario {
            Some(path) => fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?,
            None => DEFAULT_SCENARIO.to_string(),
        };
        ScenarioConfig::from_toml(&text).map_err(|e| e.to_string())
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Seed; runs are reproducible from flags plus seed.
    #[arg(long)]
    seed: u64,
    /// Output directory (defaults to $CONTEXTMESH_OUT_DIR or ./out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override the scenario mode.
    #[arg(long, value_parser = ["broker", "nobroker"])]
    mode: Option<String>,
    /// Enable bulk query mode (requires the device broker).
    #[arg(long)]
    bulk: bool,
    /// Override the device-internal transport.
    #[arg(long, value_parser = ["ipc", "socket", "http"])]
    local_transport: Option<String>,
    /// Override the workload size.
    #[arg(long)]
    queries: Option<usize>,
    /// Override the availability up-fraction.
    #[arg(long)]
    availability: Option<f64>,
    /// Flat key=value file overriding per-call costs and latencies
    /// (percall.<CLASS>.<ROLE>, perByte, cpuPoll, latency.<CLASS>).
    #[arg(long)]
    energy_overrides: Option<PathBuf>,
    /// Skip the transport latency ratio floors.
    #[arg(long)]
    allow_unconstrained_latency: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sweep axis: `queries:100,1000,2000,5000`,
    /// `availability:1.0..0.5:0.1` or `transport:ipc,socket,http`.
    #[arg(long)]
    axis: String,
    /// Comma-separated modes: broker, nobroker, bulk.
    #[arg(long, default_value = "broker,nobroker")]
    modes: String,
    /// Repetitions per cell; the CSV row reports the mean.
    #[arg(long, default_value_t = 5)]
    reps: u32,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    scenario: ScenarioArg,
    /// Skip the transport latency ratio floors.
    #[arg(long)]
    allow_unconstrained_latency: bool,
}

fn main() -> ExitCode {
    // Die quietly on closed pipes (e.g. `contextmesh calibrate | head`)
    // instead of panicking on the failed print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = std::panic::catch_unwind(|| match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Validate(args) => cmd_validate(args),
        Command::Calibrate => cmd_calibrate(),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("error: internal invariant breach");
            ExitCode::from(2)
        }
    }
}

fn out_dir(arg: Option<PathBuf>) -> PathBuf {
    arg.or_else(|| std::env::var_os("CONTEXTMESH_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn apply_overrides(cfg: &mut ScenarioConfig, args: &RunArgs) {
    if let Some(mode) = &args.mode {
        cfg.mode = if mode == "nobroker" {
            Mode::NoBroker
        } else {
            Mode::Brokered
        };
    }
    if args.bulk {
        cfg.bulk_mode = true;
    }
    if let Some(t) = &args.local_transport {
        cfg.local_transport = match t.as_str() {
            "ipc" => "LOCAL_IPC".into(),
            "socket" => "LOCAL_SOCKET".into(),
            _ => "LOCAL_HTTP".into(),
        };
    }
    if let Some(n) = args.queries {
        cfg.workload.n_queries = n;
    }
    if let Some(p) = args.availability {
        cfg.availability_up_fraction = p;
    }
}

fn cmd_run(args: RunArgs) -> Result<(), String> {
    let mut cfg = args.scenario.load()?;
    apply_overrides(&mut cfg, &args);
    let override_text = match &args.energy_overrides {
        Some(path) => Some(
            fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?,
        ),
        None => None,
    };
    let result = run_scenario_with_overrides(
        &cfg,
        args.seed,
        override_text.as_deref(),
        args.allow_unconstrained_latency,
    )
    .map_err(|e| e.to_string())?;
    let dir = out_dir(args.out_dir);
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let metrics_path = dir.join("metrics.csv");
    let mut csv = String::from(Metrics::csv_header());
    csv.push('\n');
    csv.push_str(&result.metrics.csv_row());
    csv.push('\n');
    fs::write(&metrics_path, csv).map_err(|e| e.to_string())?;
    let trace_path = dir.join("trace.log");
    fs::write(&trace_path, result.trace.render()).map_err(|e| e.to_string())?;
    let m = &result.metrics;
    println!(
        "run mode={} bulk={} transport={} queries={} availability={:.2} seed={}: \
         device={:.3} mJ meanPerQuery={:.4} mJ hitRate={:.4} satisfied={}/{} dropped={} duration={} ms -> {}",
        m.mode,
        m.bulk,
        m.local_transport,
        m.n_queries,
        m.availability,
        m.seed,
        m.device_energy_mj,
        m.mean_device_energy_per_query_mj,
        m.hit_rate,
        m.queries_satisfied,
        m.queries_issued,
        m.dropped_expired,
        m.simulated_duration_ms,
        metrics_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone)]
enum Axis {
    Queries(Vec<usize>),
    Availability(Vec<f64>),
    Transport(Vec<String>),
}

fn parse_axis(spec: &str) -> Result<Axis, String> {
    let (kind, rest) = spec
        .split_once(':')
        .ok_or_else(|| format!("axis {spec:?} must be kind:values"))?;
    match kind {
        "queries" => {
            let values = rest
                .split(',')
                .map(|v| v.trim().parse::<usize>().map_err(|e| format!("bad query count {v:?}: {e}")))
                .collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err("queries axis is empty".into());
            }
            Ok(Axis::Queries(values))
        }
        "availability" => {
            // start..end:step, inclusive of both ends, descending or ascending.
            let (range, step) = rest
                .split_once(':')
                .ok_or_else(|| format!("availability axis {rest:?} must be start..end:step"))?;
            let (start, end) = range
                .split_once("..")
                .ok_or_else(|| format!("availability range {range:?} must be start..end"))?;
            let start: f64 = start.trim().parse().map_err(|e| format!("bad start: {e}"))?;
            let end: f64 = end.trim().parse().map_err(|e| format!("bad end: {e}"))?;
            let step: f64 = step.trim().parse().map_err(|e| format!("bad step: {e}"))?;
            if step <= 0.0 {
                return Err("availability step must be > 0".into());
            }
            let mut values = Vec::new();
            let mut v = start;
            let descending = end < start;
            loop {
                values.push((v * 100.0).round() / 100.0);
                if descending {
                    v -= step;
                    if v < end - 1e-9 {
                        break;
                    }
                } else {
                    v += step;
                    if v > end + 1e-9 {
                        break;
                    }
                }
            }
            Ok(Axis::Availability(values))
        }
        "transport" => {
            let values = rest
                .split(',')
                .map(|v| match v.trim() {
                    "ipc" => Ok("LOCAL_IPC".to_string()),
                    "socket" => Ok("LOCAL_SOCKET".to_string()),
                    "http" => Ok("LOCAL_HTTP".to_string()),
                    other => Err(format!("unknown transport {other:?}")),
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.is_empty() {
                return Err("transport axis is empty".into());
            }
            Ok(Axis::Transport(values))
        }
        other => Err(format!("unknown axis kind {other:?}")),
    }
}

fn mean_metrics(reps: &[Metrics]) -> Metrics {
    let n = reps.len() as f64;
    let mut m = reps[0].clone();
    let avg = |f: fn(&Metrics) -> f64| reps.iter().map(f).sum::<f64>() / n;
    m.device_energy_mj = avg(|m| m.device_energy_mj);
    m.cloud_energy_mj = avg(|m| m.cloud_energy_mj);
    m.mean_device_energy_per_query_mj = avg(|m| m.mean_device_energy_per_query_mj);
    m.hit_rate = avg(|m| m.hit_rate);
    m.queries_satisfied =
        (reps.iter().map(|m| m.queries_satisfied).sum::<usize>() as f64 / n).round() as usize;
    m.dropped_expired =
        (reps.iter().map(|m| m.dropped_expired).sum::<u64>() as f64 / n).round() as u64;
    m.simulated_duration_ms =
        (reps.iter().map(|m| m.simulated_duration_ms).sum::<u64>() as f64 / n).round() as u64;
    m.msgs_ipc = (reps.iter().map(|m| m.msgs_ipc).sum::<u64>() as f64 / n).round() as u64;
    m.msgs_socket = (reps.iter().map(|m| m.msgs_socket).sum::<u64>() as f64 / n).round() as u64;
    m.msgs_local_http =
        (reps.iter().map(|m| m.msgs_local_http).sum::<u64>() as f64 / n).round() as u64;
    m.msgs_remote_http =
        (reps.iter().map(|m| m.msgs_remote_http).sum::<u64>() as f64 / n).round() as u64;
    m
}

fn cmd_sweep(args: SweepArgs) -> Result<(), String> {
    let base_cfg = args.scenario.load()?;
    let axis = parse_axis(&args.axis)?;
    if args.reps == 0 {
        return Err("--reps must be >= 1".into());
    }
    let modes: Vec<String> = args.modes.split(',').map(|m| m.trim().to_string()).collect();
    for m in &modes {
        if !matches!(m.as_str(), "broker" | "nobroker" | "bulk") {
            return Err(format!("unknown mode {m:?}"));
        }
    }
    let dir = out_dir(args.out_dir);
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    let mut csv = String::from(Metrics::csv_header());
    csv.push('\n');

    let cells: Vec<(String, ScenarioConfig)> = {
        let mut cells = Vec::new();
        match &axis {
            Axis::Queries(values) => {
                for v in values {
                    let mut cfg = base_cfg.clone();
                    cfg.workload.n_queries = *v;
                    cells.push((format!("queries={v}"), cfg));
                }
            }
            Axis::Availability(values) => {
                for v in values {
                    let mut cfg = base_cfg.clone();
                    cfg.availability_up_fraction = *v;
                    cells.push((format!("availability={v:.2}"), cfg));
                }
            }
            Axis::Transport(values) => {
                for v in values {
                    let mut cfg = base_cfg.clone();
                    cfg.local_transport = v.clone();
                    cells.push((format!("transport={v}"), cfg));
                }
            }
        }
        cells
    };

    for (cell_index, (label, cell_cfg)) in cells.iter().enumerate() {
        // Documented derivation: adding cells never perturbs existing ones.
        let cell_seed = args.seed + cell_index as u64;
        for mode in &modes {
            let mut cfg = cell_cfg.clone();
            match mode.as_str() {
                "broker" => {
                    cfg.mode = Mode::Brokered;
                    cfg.bulk_mode = false;
                }
                "nobroker" => {
                    cfg.mode = Mode::NoBroker;
                    cfg.bulk_mode = false;
                }
                "bulk" => {
                    cfg.mode = Mode::Brokered;
                    cfg.bulk_mode = true;
                }
                _ => unreachable!(),
            }
            let mut reps = Vec::new();
            for rep in 0..args.reps {
                let seed = cell_seed + rep as u64 * REP_SEED_STRIDE;
                let result = run_scenario(&cfg, seed).map_err(|e| e.to_string())?;
                reps.push(result.metrics);
            }
            let energies: Vec<f64> = reps.iter().map(|m| m.device_energy_mj).collect();
            let spread = relative_spread(&energies);
            let mut mean = mean_metrics(&reps);
            mean.seed = cell_seed;
            println!(
                "sweep cell {label} mode={mode}: device={:.3} mJ meanPerQuery={:.4} hitRate={:.4} \
                 rep spread={:.2}% ({} reps)",
                mean.device_energy_mj,
                mean.mean_device_energy_per_query_mj,
                mean.hit_rate,
                spread * 100.0,
                args.reps
            );
            csv.push_str(&mean.csv_row());
            csv.push('\n');
        }
    }
    let path = dir.join("metrics.csv");
    fs::write(&path, csv).map_err(|e| e.to_string())?;
    println!("sweep complete -> {}", path.display());
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), String> {
    let cfg = args.scenario.load()?;
    let checks: Vec<(&str, Result<(), String>)> = vec![
        ("workload", cfg.check_workload().map_err(|e| e.to_string())),
        ("mode flags", cfg.check_mode_flags().map_err(|e| e.to_string())),
        ("broker topology", cfg.check_topology().map_err(|e| e.to_string())),
        ("scope registry", cfg.check_scopes().map_err(|e| e.to_string())),
        ("client roster", cfg.check_clients().map_err(|e| e.to_string())),
        (
            "latency ratios",
            cfg.check_latencies(args.allow_unconstrained_latency)
                .map_err(|e| e.to_string()),
        ),
    ];
    let mut failures = Vec::new();
    for (name, result) in checks {
        match result {
            Ok(()) => println!("check {name}: pass"),
            Err(e) => {
                println!("check {name}: FAIL ({e})");
                failures.push(format!("{name}: {e}"));
            }
        }
    }
    if failures.is_empty() {
        println!("scenario valid");
        Ok(())
    } else {
        Err(format!("{} check(s) failed: {}", failures.len(), failures.join("; ")))
    }
}

fn cmd_calibrate() -> Result<(), String> {
    let model = EnergyModel::calibrate_from_table2();
    println!("calibrated per-call energy model (mJ per request-reply call)");
    println!("{:<14} {:>10} {:>10} {:>10} {:>12}", "class", "CALLER", "CALLEE", "total", "callee share");
    for class in TransportClass::ALL {
        let caller = model.per_call(class, CallRole::Caller);
        let callee = model.per_call(class, CallRole::Callee);
        println!(
            "{:<14} {:>10.4} {:>10.4} {:>10.4} {:>11.1}%",
            class.as_str(),
            caller,
            callee,
            caller + callee,
            model.callee_share(class) * 100.0
        );
    }
    println!();
    println!("measured batch rows (total joules, server+client): calls {CALL_COUNTS:?}");
    let rows: BTreeMap<&str, ([f64; 4], [f64; 4])> = BTreeMap::from([
        ("IPC", (IPC_SERVER_J, IPC_CLIENT_J)),
        ("HTTP", (HTTP_SERVER_J, HTTP_CLIENT_J)),
        ("Sockets", (SOCKET_SERVER_J, SOCKET_CLIENT_J)),
    ]);
    for (name, (server, client)) in &rows {
        let totals: Vec<f64> = (0..4).map(|i| server[i] + client[i]).collect();
        println!("{name:<8} row totals: {totals:?} J");
    }
    println!("  (the 1000-call HTTP row totals {:.2} J)", HTTP_SERVER_J[1] + HTTP_CLIENT_J[1]);
    println!();
    let http_ratios = EnergyModel::row_ratios_vs_ipc(&HTTP_SERVER_J, &HTTP_CLIENT_J);
    let socket_ratios = EnergyModel::row_ratios_vs_ipc(&SOCKET_SERVER_J, &SOCKET_CLIENT_J);
    println!("row-wise HTTP/IPC energy ratios:    {http_ratios:.2?}");
    println!("row-wise Sockets/IPC energy ratios: {socket_ratios:.2?}");
    println!(
        "callee share of per-call total: IPC {:.1}%, Sockets {:.1}%, HTTP {:.1}%",
        model.callee_share(TransportClass::LocalIpc) * 100.0,
        model.callee_share(TransportClass::LocalSocket) * 100.0,
        model.callee_share(TransportClass::LocalHttp) * 100.0
    );
    Ok(())
}
