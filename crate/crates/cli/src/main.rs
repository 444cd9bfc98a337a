//! Command line front end: single dispatches, best-response curves, game
//! runs, stability predictions, and the three studies, over synthetic or
//! CSV profiles.
//!
//! Exit codes: 0 success, 2 infeasible instance, 3 solver failure, 4 bad
//! input.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use storgame::dispatch::{
    assemble_qp, solve_dispatch_with, validate_dispatch, write_qp_debug, DispatchError,
    DispatchSolution,
};
use storgame::firm::{best_response_enumerate, DispatchOracle};
use storgame::game::{run_best_response, GameEnd, GameOutcome};
use storgame::harness::{
    arbitrage_study, build_instance, load_profiles_csv, price_cap_study, save_profiles_csv,
    sweep_stability, synth_profile, write_arbitrage, write_arbitrage_profiles, write_price_cap,
    write_sweep, ArbitrageConfig, ExportFormat, HarnessError, InstanceParams, MarketStructure,
    ProfileSet, RecordOutcome, SweepConfig, SweepGrid, SynthKind,
};
use storgame::model::{BidGrid, MarketInstance, ModelError};
use storgame::qp::SolveOptions;
use storgame::theory::{predict_stability, StabilityReport, Verdict};

#[derive(Parser)]
#[command(
    name = "storgame",
    version,
    about = "Storage bidding game simulator for wholesale electricity markets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one dispatch and print its cost breakdown and validation
    Dispatch {
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        econ: EconArgs,
        /// Comma separated bid values, one per firm (default: all at the cap)
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        bids: Option<Vec<f64>>,
        /// Interior point iteration cap
        #[arg(long, default_value_t = 60)]
        max_iter: usize,
        /// Write the assembled QP as labeled sparse triplets
        #[arg(long, value_name = "PATH")]
        dump_qp: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Enumerate one firm's profit over the bid grid
    BestResponse {
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        econ: EconArgs,
        /// Firm whose response to compute
        #[arg(long, default_value_t = 0)]
        firm: usize,
        /// Current bid values, one per firm (default: all at the cap)
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        bids: Option<Vec<f64>>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run best-response dynamics to equilibrium, cycle, or the move cap
    Game {
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        econ: EconArgs,
        /// Starting bid values, one per firm (default: all at the cap)
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        start: Option<Vec<f64>>,
        /// Move cap (default: four sweeps of the grid per firm)
        #[arg(long)]
        max_iter: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Predict stability from the closed-form theory without simulating
    Predict {
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        econ: EconArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Sweep solar share, storage capacity, and flexibility; record verdicts
    /// and game outcomes per grid point
    Sweep {
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        econ: EconArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Rerun the sweep under a ladder of price caps
    PriceCap {
        #[command(flatten)]
        profile: ProfileArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        econ: EconArgs,
        /// Price caps to test, sorted, each a multiple of the bid step
        #[arg(long, value_delimiter = ',', default_values_t = vec![100.0, 80.0, 60.0, 40.0, 20.0, 10.0])]
        caps: Vec<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Measure arbitrage energy beyond balancing across solar scenarios
    Arbitrage {
        #[command(flatten)]
        profile: ProfileArgs,
        /// Solar share scenarios sharing one fixed fleet
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05, 0.10])]
        scenarios: Vec<f64>,
        /// Fleet capacity as a multiple of the largest scenario's absorbed energy
        #[arg(long, default_value_t = 1.5)]
        ess_cap: f64,
        /// Generation floor as a fraction of peak demand
        #[arg(long, default_value_t = 0.55)]
        flexibility: f64,
        #[command(flatten)]
        econ: EconArgs,
        /// Also write per-step dispatch profiles for the boundary bids
        #[arg(long, value_name = "PATH")]
        cases_out: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args)]
struct ProfileArgs {
    /// Profile CSV with header hour,demand_mw,solar_mw
    #[arg(long, value_name = "PATH")]
    profiles: Option<PathBuf>,
    /// Synthetic profile kind: flat, triangle-dip, two-peak
    #[arg(long, value_name = "KIND", default_value = "two-peak", value_parser = SynthKind::from_str, conflicts_with = "profiles")]
    synthetic: SynthKind,
    /// Steps per day for synthetic profiles
    #[arg(long, default_value_t = 24)]
    steps: usize,
    /// Jitter seed for synthetic profiles (omit for the nominal curves)
    #[arg(long)]
    seed: Option<u64>,
    /// Write the profile set actually used to this CSV
    #[arg(long, value_name = "PATH")]
    save_profiles: Option<PathBuf>,
}

impl ProfileArgs {
    fn load(&self) -> Result<ProfileSet<f64>, AppError> {
        let set = match &self.profiles {
            Some(path) => load_profiles_csv(path)?,
            None => synth_profile(self.synthetic, self.steps, self.seed)?,
        };
        if let Some(path) = &self.save_profiles {
            save_profiles_csv(&set, path)?;
        }
        Ok(set)
    }
}

#[derive(Args)]
struct MarketArgs {
    /// Solar energy as a share of daily demand energy, in [0, 1)
    #[arg(long, default_value_t = 0.5)]
    solar_share: f64,
    /// Fleet capacity as a multiple of the absorbed excess energy
    #[arg(long, default_value_t = 1.5)]
    ess_cap: f64,
    /// Generation floor as a fraction of peak demand, in (0, 1]
    #[arg(long, default_value_t = 0.125)]
    flexibility: f64,
    /// Market structure: monopoly or duopoly
    #[arg(long, default_value = "duopoly", value_parser = MarketStructure::from_str)]
    structure: MarketStructure,
    /// First firm's capacity share under a duopoly, in (0, 1)
    #[arg(long, default_value_t = 2.0 / 3.0)]
    ess_frac: f64,
}

#[derive(Args)]
struct GridArgs {
    /// Solar share axis
    #[arg(long = "solar-share", value_delimiter = ',', default_values_t = vec![0.3, 0.4, 0.5, 0.6, 0.7])]
    solar_share: Vec<f64>,
    /// Storage capacity multiple axis
    #[arg(long = "ess-cap", value_delimiter = ',', default_values_t = vec![1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4, 2.6, 2.8, 3.0])]
    ess_cap: Vec<f64>,
    /// Generation floor fraction axis
    #[arg(long = "flexibility", value_delimiter = ',', default_values_t = vec![0.125, 0.25])]
    flexibility: Vec<f64>,
    /// Market structure: monopoly or duopoly
    #[arg(long, default_value = "duopoly", value_parser = MarketStructure::from_str)]
    structure: MarketStructure,
    /// First firm's capacity share under a duopoly, in (0, 1)
    #[arg(long, default_value_t = 2.0 / 3.0)]
    ess_frac: f64,
}

impl GridArgs {
    fn grid(&self) -> SweepGrid<f64> {
        SweepGrid {
            solar_shares: self.solar_share.clone(),
            ess_caps: self.ess_cap.clone(),
            flexibility_levels: self.flexibility.clone(),
            structure: self.structure,
            ess_frac: self.ess_frac,
        }
    }
}

#[derive(Args)]
struct EconArgs {
    /// Bid grid step
    #[arg(long, default_value_t = 1.0)]
    delta_bid: f64,
    /// Price cap, the top of the bid grid
    #[arg(long, default_value_t = 100.0)]
    c_max: f64,
    /// Quadratic generation cost coefficient ($/MW^2 h)
    #[arg(long, default_value_t = 0.02)]
    gen_a: f64,
    /// Linear generation cost coefficient ($/MWh)
    #[arg(long, default_value_t = 0.0)]
    gen_b: f64,
}

impl EconArgs {
    fn bid_grid(&self) -> Result<BidGrid<f64>, AppError> {
        Ok(BidGrid::new(self.delta_bid, self.c_max)?)
    }

    fn sweep_config(&self) -> Result<SweepConfig<f64>, AppError> {
        Ok(SweepConfig { bid_grid: self.bid_grid()?, gen_a: self.gen_a, gen_b: self.gen_b })
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output file; a summary always prints to stdout
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format for --out
    #[arg(long, default_value = "csv", value_parser = ExportFormat::from_str)]
    format: ExportFormat,
}

enum AppError {
    Infeasible(String),
    Solver(String),
    BadInput(String),
}

impl AppError {
    fn code(&self) -> u8 {
        match self {
            Self::Infeasible(_) => 2,
            Self::Solver(_) => 3,
            Self::BadInput(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Infeasible(m) | Self::Solver(m) | Self::BadInput(m) => m,
        }
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Infeasible(_) => Self::Infeasible(e.to_string()),
            ModelError::Invalid(_) => Self::BadInput(e.to_string()),
        }
    }
}

impl From<DispatchError> for AppError {
    fn from(e: DispatchError) -> Self {
        match e {
            DispatchError::Infeasible(_) => Self::Infeasible(e.to_string()),
            DispatchError::TooLarge { .. } => Self::BadInput(e.to_string()),
            DispatchError::Numerical { .. } => Self::Solver(e.to_string()),
        }
    }
}

impl From<HarnessError> for AppError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Model(m) => m.into(),
            HarnessError::Dispatch(d) => d.into(),
            other => Self::BadInput(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        Self::BadInput(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; keep their exit 0.
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<(), AppError> {
    match command {
        Command::Dispatch { profile, market, econ, bids, max_iter, dump_qp, out } => {
            cmd_dispatch(profile, market, econ, bids, max_iter, dump_qp, out)
        }
        Command::BestResponse { profile, market, econ, firm, bids, out } => {
            cmd_best_response(profile, market, econ, firm, bids, out)
        }
        Command::Game { profile, market, econ, start, max_iter, out } => {
            cmd_game(profile, market, econ, start, max_iter, out)
        }
        Command::Predict { profile, market, econ, out } => cmd_predict(profile, market, econ, out),
        Command::Sweep { profile, grid, econ, out } => cmd_sweep(profile, grid, econ, out),
        Command::PriceCap { profile, grid, econ, caps, out } => {
            cmd_price_cap(profile, grid, econ, caps, out)
        }
        Command::Arbitrage {
            profile,
            scenarios,
            ess_cap,
            flexibility,
            econ,
            cases_out,
            out,
        } => cmd_arbitrage(profile, scenarios, ess_cap, flexibility, econ, cases_out, out),
    }
}

fn instance(
    profile: &ProfileArgs,
    market: &MarketArgs,
    econ: &EconArgs,
) -> Result<MarketInstance<f64>, AppError> {
    let profiles = profile.load()?;
    let params = InstanceParams {
        solar_share: market.solar_share,
        ess_cap: market.ess_cap,
        flexibility: market.flexibility,
        structure: market.structure,
        ess_frac: market.ess_frac,
        bid_grid: econ.bid_grid()?,
        gen_a: econ.gen_a,
        gen_b: econ.gen_b,
    };
    Ok(build_instance(&profiles, &params)?)
}

/// Map bid values to grid indices, defaulting every firm to the cap.
fn bid_indices(
    grid: &BidGrid<f64>,
    values: Option<&[f64]>,
    firms: usize,
) -> Result<Vec<u32>, AppError> {
    match values {
        None => Ok(vec![grid.levels(); firms]),
        Some(values) => {
            if values.len() != firms {
                return Err(AppError::BadInput(format!(
                    "need {firms} bids, got {}",
                    values.len()
                )));
            }
            values
                .iter()
                .map(|&v| {
                    grid.index_of(v).ok_or_else(|| {
                        AppError::BadInput(format!(
                            "bid {v} is not on the grid (step {}, cap {})",
                            grid.delta_bid, grid.c_max
                        ))
                    })
                })
                .collect()
        }
    }
}

fn write_out(path: &PathBuf, text: &str) -> Result<(), AppError> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn to_json_pretty<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Quote a CSV cell if it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn cmd_dispatch(
    profile: ProfileArgs,
    market_args: MarketArgs,
    econ: EconArgs,
    bids: Option<Vec<f64>>,
    max_iter: usize,
    dump_qp: Option<PathBuf>,
    out: OutArgs,
) -> Result<(), AppError> {
    let base = instance(&profile, &market_args, &econ)?;
    let idx = bid_indices(&base.bid_grid, bids.as_deref(), base.m())?;
    let market = base.with_bid_indices(&idx);

    if let Some(path) = &dump_qp {
        let qp = assemble_qp(&market)?;
        let mut file = std::fs::File::create(path)?;
        write_qp_debug(&qp, &mut file)?;
        println!("wrote {}", path.display());
    }

    let opts = SolveOptions { max_iter, ..SolveOptions::default() };
    let sol = solve_dispatch_with(&market, &opts)?;

    println!(
        "instance: {} steps of {} h, {} firm(s), floor {} MW",
        market.k(),
        market.grid.delta,
        market.m(),
        market.gen.p_gmin
    );
    let bids_text: Vec<String> = market.firms.iter().map(|f| f.bid.to_string()).collect();
    println!("bids: [{}] $/MWh", bids_text.join(", "));
    println!("generation cost: {:.2} $", sol.cost.generation);
    for (m, p) in sol.cost.payments.iter().enumerate() {
        println!(
            "firm {m}: charged {:.4} MWh, paid {:.2} $",
            sol.charged_energy(m),
            p
        );
    }
    println!("total cost: {:.2} $", sol.cost.total);
    println!(
        "solver: {} iterations, kkt {:.3e}, polished {}, remixed {}",
        sol.iterations,
        sol.kkt.max(),
        sol.polished,
        sol.remixed
    );
    let violations = validate_dispatch(&market, &sol, 1e-6);
    if violations.is_empty() {
        println!("validation: ok (tol 1e-6)");
    } else {
        println!("validation: {} violation(s)", violations.len());
        for v in &violations {
            println!("  {v}");
        }
    }

    if let Some(path) = &out.out {
        let text = match out.format {
            ExportFormat::Json => to_json_pretty(&sol),
            ExportFormat::Csv => schedule_csv(&market, &sol),
        };
        write_out(path, &text)?;
    }
    Ok(())
}

/// Per-step schedule table: net load, generation, then each firm's net
/// power, metered charging, and end-of-step state of charge.
fn schedule_csv(market: &MarketInstance<f64>, sol: &DispatchSolution<f64>) -> String {
    let m = market.m();
    let mut header = String::from("step,net_load_mw,generation_mw");
    for mm in 0..m {
        write!(header, ",power_mw_{mm},charge_mw_{mm},soc_mwh_{mm}").unwrap();
    }
    let mut text = header;
    text.push('\n');
    for k in 0..market.k() {
        write!(text, "{k},{},{}", market.net_load[k], sol.gen[k]).unwrap();
        for mm in 0..m {
            write!(
                text,
                ",{},{},{}",
                sol.power[mm][k], sol.charge_power[mm][k], sol.soc[mm][k + 1]
            )
            .unwrap();
        }
        text.push('\n');
    }
    text
}

fn cmd_best_response(
    profile: ProfileArgs,
    market_args: MarketArgs,
    econ: EconArgs,
    firm: usize,
    bids: Option<Vec<f64>>,
    out: OutArgs,
) -> Result<(), AppError> {
    let market = instance(&profile, &market_args, &econ)?;
    if firm >= market.m() {
        return Err(AppError::BadInput(format!(
            "firm {firm} out of range for {} firm(s)",
            market.m()
        )));
    }
    let idx = bid_indices(&market.bid_grid, bids.as_deref(), market.m())?;
    let oracle = DispatchOracle::new(&market);
    let br = best_response_enumerate(&oracle, &idx, firm)?;

    println!(
        "firm {firm} best response: bid {} $/MWh, profit {:.2} $",
        market.bid_grid.bid(br.best_index),
        br.best_profit
    );
    println!(
        "evaluated {} bid levels, {} skipped, {} dispatch solves",
        br.curve.len(),
        br.skipped.len(),
        oracle.solve_count()
    );
    for (level, reason) in &br.skipped {
        println!("  skipped bid {}: {reason}", market.bid_grid.bid(*level));
    }

    if let Some(path) = &out.out {
        let text = match out.format {
            ExportFormat::Json => to_json_pretty(&br),
            ExportFormat::Csv => {
                let mut text = String::from("index,bid,charged_mwh,profit\n");
                for p in &br.curve {
                    writeln!(text, "{},{},{},{}", p.index, p.bid, p.charged_mwh, p.profit)
                        .unwrap();
                }
                text
            }
        };
        write_out(path, &text)?;
    }
    Ok(())
}

fn cmd_game(
    profile: ProfileArgs,
    market_args: MarketArgs,
    econ: EconArgs,
    start: Option<Vec<f64>>,
    max_iter: Option<usize>,
    out: OutArgs,
) -> Result<(), AppError> {
    let market = instance(&profile, &market_args, &econ)?;
    let idx = bid_indices(&market.bid_grid, start.as_deref(), market.m())?;
    let outcome = run_best_response(&market, &idx, max_iter)?;

    let finals: Vec<String> =
        outcome.final_bids.iter().map(|&i| market.bid_grid.bid(i).to_string()).collect();
    match &outcome.end {
        GameEnd::Equilibrium => println!("result: Nash equilibrium at [{}]", finals.join(", ")),
        GameEnd::Cycle { first_seen, period } => println!(
            "result: limit cycle of period {period} entered at move {first_seen}, last bids [{}]",
            finals.join(", ")
        ),
        GameEnd::MoveCap => {
            println!("result: move cap reached, last bids [{}]", finals.join(", "))
        }
    }
    println!("{} moves, {} distinct dispatch solves", outcome.moves.len(), outcome.distinct_solves);
    if let Some(cert) = &outcome.certificate {
        println!(
            "equilibrium certificate: {} ({} profitable deviation(s))",
            if cert.is_nash { "verified" } else { "REFUTED" },
            cert.deviations.len()
        );
    }

    if let Some(path) = &out.out {
        let text = match out.format {
            ExportFormat::Json => to_json_pretty(&outcome),
            ExportFormat::Csv => trace_csv(&market, &outcome),
        };
        write_out(path, &text)?;
    }
    Ok(())
}

fn trace_csv(market: &MarketInstance<f64>, outcome: &GameOutcome<f64>) -> String {
    let mut text = String::from("move,firm,from_bid,to_bid,profit\n");
    for (i, mv) in outcome.moves.iter().enumerate() {
        writeln!(
            text,
            "{i},{},{},{},{}",
            mv.mover,
            market.bid_grid.bid(mv.from),
            market.bid_grid.bid(mv.to),
            mv.profit
        )
        .unwrap();
    }
    text
}

fn cmd_predict(
    profile: ProfileArgs,
    market_args: MarketArgs,
    econ: EconArgs,
    out: OutArgs,
) -> Result<(), AppError> {
    let market = instance(&profile, &market_args, &econ)?;
    let report = predict_stability(&market)?;

    let verdict = match report.verdict {
        Verdict::Stable => "stable",
        Verdict::Unstable => "unstable",
        Verdict::Inconclusive => "inconclusive",
    };
    println!("verdict: {verdict}");
    println!(
        "absorbed energy: {:.4} MWh over {} step(s)",
        report.absorb.e_absorb,
        report.absorb.members.len()
    );
    if let Some(c_min) = &report.c_min {
        println!(
            "undercutting threshold: {} $/MWh (grid floor {})",
            c_min.bid, market.bid_grid.delta_bid
        );
    }
    for check in report.assumption_checks.iter().chain(&report.theorem_checks) {
        println!("  [{}] {}: {}", if check.passed { "ok" } else { "--" }, check.name, check.detail);
    }
    for reason in &report.reasons {
        println!("note: {reason}");
    }

    if let Some(path) = &out.out {
        let text = match out.format {
            ExportFormat::Json => to_json_pretty(&report),
            ExportFormat::Csv => checks_csv(&report),
        };
        write_out(path, &text)?;
    }
    Ok(())
}

fn checks_csv(report: &StabilityReport<f64>) -> String {
    let mut text = String::from("kind,name,passed,detail\n");
    for c in &report.assumption_checks {
        writeln!(text, "assumption,{},{},{}", csv_field(&c.name), c.passed, csv_field(&c.detail))
            .unwrap();
    }
    for c in &report.theorem_checks {
        writeln!(text, "theorem,{},{},{}", csv_field(&c.name), c.passed, csv_field(&c.detail))
            .unwrap();
    }
    text
}

fn print_sweep_summary(records: &[storgame::harness::SweepRecord<f64>]) {
    let count = |o: RecordOutcome| records.iter().filter(|r| r.outcome == o).count();
    println!(
        "{} points: {} equilibria, {} cycles, {} move-capped, {} infeasible, {} solver failures",
        records.len(),
        count(RecordOutcome::NashEquilibrium),
        count(RecordOutcome::Cycle),
        count(RecordOutcome::MoveCap),
        count(RecordOutcome::Infeasible),
        count(RecordOutcome::SolverFailure),
    );
    let agreed = records.iter().filter(|r| r.agreement == Some(true)).count();
    let judged = records.iter().filter(|r| r.agreement.is_some()).count();
    if judged > 0 {
        println!("prediction agreement: {agreed}/{judged}");
    }
}

fn cmd_sweep(
    profile: ProfileArgs,
    grid_args: GridArgs,
    econ: EconArgs,
    out: OutArgs,
) -> Result<(), AppError> {
    let profiles = profile.load()?;
    let grid = grid_args.grid();
    let config = econ.sweep_config()?;
    let result = sweep_stability(&profiles, &grid, &config)?;
    print_sweep_summary(&result.records);
    if let Some(share) = result.stable_share_where(|_| true) {
        println!("stable share: {share:.4}");
    }
    if let Some(path) = &out.out {
        write_sweep(&result, path, out.format)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_price_cap(
    profile: ProfileArgs,
    grid_args: GridArgs,
    econ: EconArgs,
    caps: Vec<f64>,
    out: OutArgs,
) -> Result<(), AppError> {
    let profiles = profile.load()?;
    let grid = grid_args.grid();
    let config = econ.sweep_config()?;
    let result = price_cap_study(&profiles, &grid, &config, &caps)?;
    for row in &result.rows {
        println!(
            "cap {:>7.2} floor {:>6.3}: {} of {} points stable ({:.4})",
            row.cap, row.flexibility, row.stable_points, row.points, row.stable_share
        );
    }
    if let Some(path) = &out.out {
        write_price_cap(&result, path, out.format)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_arbitrage(
    profile: ProfileArgs,
    scenarios: Vec<f64>,
    ess_cap: f64,
    flexibility: f64,
    econ: EconArgs,
    cases_out: Option<PathBuf>,
    out: OutArgs,
) -> Result<(), AppError> {
    let profiles = profile.load()?;
    let config = ArbitrageConfig {
        ess_cap,
        flexibility,
        bid_grid: econ.bid_grid()?,
        gen_a: econ.gen_a,
        gen_b: econ.gen_b,
    };
    let result = arbitrage_study(&profiles, &scenarios, &config)?;
    println!("fleet capacity: {:.4} MWh", result.fleet_mwh);
    for (share, threshold) in &result.thresholds {
        match threshold {
            Some(bid) => println!(
                "solar share {:.2}: arbitrage up to bid {} $/MWh",
                share, bid
            ),
            None => println!("solar share {:.2}: no arbitrage at any bid", share),
        }
    }
    if let Some(path) = &out.out {
        write_arbitrage(&result, path, out.format)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = &cases_out {
        write_arbitrage_profiles(&result, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
