use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shiftc::artifacts::{compile, report, write_artifacts, write_pareto_csv, PlanFile};
use shiftc::chipsim::{simulate_model, ModelStats, OpPlans};
use shiftc::costmodel::{estimate, fit_linear_csv, ChipConfig, ComputeModel, LinearModel};
use shiftc::dense::{max_relative_error, random_inputs, DenseTensor};
use shiftc::plangen::{Relaxation, SearchConstraints};
use shiftc::texpr::{parse_model_str, reference_execute, ModelGraph};
use shiftc::Error;

/// Verification tolerance on the normwise relative error.
const TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "shiftc", version, about = "Compute-shift compiler and virtual chip simulator")]
struct Cli {
    /// Cap on worker threads used by the search and the simulator.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search per-operator plans, reconcile memory and write artifacts.
    Compile(CompileArgs),
    /// Execute a compiled plan on the virtual chip.
    Simulate(SimulateArgs),
    /// Print one operator's Pareto frontier as CSV.
    Pareto {
        plan: PathBuf,
        op_id: String,
    },
    /// Fit a linear compute-cycle model from a samples CSV.
    Fit {
        samples: PathBuf,
        /// Where to write the coefficients (JSON); stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarise a compiled plan.
    Report { plan: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Relax {
    None,
    IterativeDoubling,
}

#[derive(Args)]
struct CompileArgs {
    model: PathBuf,
    /// Built-in profile name or chip JSON path.
    #[arg(long, default_value = "ipu-mk2")]
    chip: String,
    /// Directory searched for `<name>.json` chip profiles.
    #[arg(long, env = "SHIFTC_CHIP_DIR")]
    chip_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.9)]
    min_util: f64,
    #[arg(long, default_value_t = 0.75)]
    min_pad_ratio: f64,
    #[arg(long, value_enum, default_value_t = Relax::None)]
    relax: Relax,
    /// Enumerate every admissible rotating pace.
    #[arg(long)]
    search_rp: bool,
    /// Fitted coefficients from `shiftc fit`; chip rates otherwise.
    #[arg(long)]
    cost_model: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    plan: PathBuf,
    /// Seed for generated inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory of `<tensor>.bin` inputs; missing ones are generated.
    #[arg(long)]
    inputs: Option<PathBuf>,
    /// Compare the outputs with the dense reference.
    #[arg(long)]
    verify: bool,
    /// Report cost-model numbers without executing.
    #[arg(long)]
    stats_only: bool,
    /// Output directory; defaults to `sim/` next to the plan.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Schema(_)
        | Error::Undefined { .. }
        | Error::NonPositiveExtent { .. }
        | Error::Cyclic(_)
        | Error::ShapeMismatch(_)
        | Error::PlanMismatch(_)
        | Error::Unknown { .. }
        | Error::Json(_)
        | Error::Csv(_) => 2,
        Error::NoFeasiblePlan(_) | Error::ModelDoesNotFit(_) => 3,
        Error::Verification(_) => 4,
        Error::CapacityExceeded { .. } => 5,
        _ => 1,
    }
}

fn read_model(path: &Path) -> shiftc::Result<ModelGraph> {
    parse_model_str(&fs::read_to_string(path)?)
}

fn cmd_compile(a: &CompileArgs) -> shiftc::Result<()> {
    let graph = read_model(&a.model)?;
    let chip = ChipConfig::resolve(&a.chip, a.chip_dir.as_deref())?;
    let constraints = SearchConstraints {
        min_core_utilization: a.min_util,
        min_padding_ratio: a.min_pad_ratio,
        relaxation: match a.relax {
            Relax::None => Relaxation::None,
            Relax::IterativeDoubling => Relaxation::IterativeDoubling,
        },
        search_rp: a.search_rp,
    };
    let cost_model = match &a.cost_model {
        Some(path) => {
            let m: LinearModel = serde_json::from_str(&fs::read_to_string(path)?)?;
            ComputeModel::linear(m)?
        }
        None => ComputeModel::Rates,
    };
    let compiled = compile(&graph, &chip, &constraints, &cost_model)?;
    let file = PlanFile::of(&compiled);
    write_artifacts(&a.out, &file)?;
    print!("{}", report(&file));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_inputs(graph: &ModelGraph, dir: Option<&Path>, seed: u64) -> shiftc::Result<HashMap<String, DenseTensor>> {
    let mut inputs = random_inputs(graph, seed);
    if let Some(dir) = dir {
        for (name, t) in inputs.iter_mut() {
            let path = dir.join(format!("{name}.bin"));
            if path.is_file() {
                let loaded = DenseTensor::load(&path)?;
                let d = graph.tensor(name).expect("graph input");
                if loaded.shape != d.shape || loaded.dtype != d.dtype {
                    return Err(Error::ShapeMismatch(format!(
                        "{}: expected {:?} {:?}",
                        path.display(),
                        d.dtype,
                        d.shape
                    )));
                }
                *t = loaded;
            }
        }
    }
    Ok(inputs)
}

fn stats_text(stats: &ModelStats) -> String {
    let mut s = String::new();
    for r in &stats.ops {
        let e = &r.exec;
        writeln!(
            s,
            "op {} promote {} demote {} transition {} compute {} comm {} sync {} exec {} steps {} shifted_bytes {} reduced_bytes {} link_max_bytes {} homogeneous {}",
            r.op_id,
            r.promote_cycles,
            r.demote_cycles,
            r.transition_cycles,
            e.compute_cycles,
            e.comm_cycles,
            e.sync_cycles,
            e.total_cycles,
            e.steps,
            e.bytes_shifted_per_core,
            e.bytes_reduced_per_core,
            e.per_link_max_bytes,
            e.homogeneous
        )
        .unwrap();
    }
    writeln!(s, "total_cycles {}", stats.total_cycles).unwrap();
    writeln!(s, "high_water_bytes {}", stats.high_water.iter().max().copied().unwrap_or(0)).unwrap();
    s
}

/// Cost-model view of the plan: nothing is executed.
fn estimate_text(file: &PlanFile, pairs: &[OpPlans]) -> String {
    let mut s = String::new();
    for (e, pair) in file.ops.iter().zip(pairs) {
        let c = estimate(&pair.active, &file.chip, &file.cost_model);
        writeln!(
            s,
            "op {} setup {} compute {} comm {} sync {} exec {} steps {}",
            e.op_id, e.setup_cycles, c.compute_cycles, c.comm_cycles, c.sync_cycles, c.total_cycles, c.steps
        )
        .unwrap();
    }
    let transitions: u64 = file.transitions.iter().map(|t| t.cycles).sum();
    writeln!(s, "transition_cycles {transitions}").unwrap();
    writeln!(s, "total_cycles {}", file.total_time).unwrap();
    s
}

/// Position and values of the largest absolute difference.
fn worst_element(actual: &DenseTensor, reference: &DenseTensor) -> (Vec<usize>, f32, f32) {
    let (flat, _) = actual
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b).abs())
        .enumerate()
        .fold((0, -1.0f32), |best, (i, d)| if d > best.1 { (i, d) } else { best });
    let mut index = vec![0; actual.shape.len()];
    let mut rest = flat;
    for (d, &n) in actual.shape.iter().enumerate().rev() {
        index[d] = rest % n;
        rest /= n;
    }
    (index, actual.data[flat], reference.data[flat])
}

fn cmd_simulate(a: &SimulateArgs) -> shiftc::Result<()> {
    let file = PlanFile::load(&a.plan)?;
    let graph = file.graph()?;
    let pairs = file.op_plans(&graph)?;
    let out = a.out.clone().unwrap_or_else(|| {
        a.plan.parent().unwrap_or(Path::new(".")).join("sim")
    });
    fs::create_dir_all(&out)?;

    if a.stats_only {
        let text = estimate_text(&file, &pairs);
        fs::write(out.join("stats.txt"), &text)?;
        print!("{text}");
        return Ok(());
    }

    let inputs = load_inputs(&graph, a.inputs.as_deref(), a.seed)?;
    let (outputs, stats) = simulate_model(&graph, &pairs, &file.chip, &file.cost_model, &inputs)?;

    fs::create_dir_all(out.join("outputs"))?;
    for (name, t) in &outputs {
        t.save(out.join("outputs").join(format!("{name}.bin")))?;
    }
    fs::create_dir_all(out.join("phases"))?;
    for r in &stats.ops {
        r.exec.write_phase_csv(fs::File::create(out.join("phases").join(format!("{}.csv", r.op_id)))?)?;
    }
    let text = stats_text(&stats);
    fs::write(out.join("stats.txt"), &text)?;
    print!("{text}");

    if a.verify {
        let reference = reference_execute(&graph, &inputs)?;
        let mut worst: Option<(f64, &str)> = None;
        for (name, t) in &outputs {
            let err = max_relative_error(t, &reference[name])?;
            if worst.is_none_or(|(w, _)| err > w) {
                worst = Some((err, name.as_str()));
            }
        }
        let (err, name) = worst.unwrap_or((0.0, ""));
        if err.is_nan() || err > TOLERANCE {
            let (index, got, want) = worst_element(&outputs[name], &reference[name]);
            println!("max_rel_err {err:.3e} > {TOLERANCE:e}, FAIL");
            return Err(Error::Verification(format!(
                "{name}{index:?} = {got}, reference {want}"
            )));
        }
        println!("max_rel_err {err:.3e} <= {TOLERANCE:e}, PASS");
    }
    Ok(())
}

fn cmd_pareto(plan: &Path, op_id: &str) -> shiftc::Result<()> {
    let file = PlanFile::load(plan)?;
    let entry = file.op(op_id)?;
    write_pareto_csv(std::io::stdout().lock(), op_id, &entry.pareto)
}

fn cmd_fit(samples: &Path, out: Option<&Path>) -> shiftc::Result<()> {
    let model = fit_linear_csv(fs::File::open(samples)?)?;
    let mut json = serde_json::to_string_pretty(&model)?;
    json.push('\n');
    match out {
        Some(path) => {
            fs::write(path, json)?;
            eprintln!("r_squared {:.6}, wrote {}", model.r_squared, path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn run(cli: &Cli) -> shiftc::Result<()> {
    match &cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Pareto { plan, op_id } => cmd_pareto(plan, op_id),
        Command::Fit { samples, out } => cmd_fit(samples, out.as_deref()),
        Command::Report { plan } => {
            print!("{}", report(&PlanFile::load(plan)?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
