use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use flowvos::config::{Gates, ModelConfig};
use flowvos::dataio::{
    fast_motion_suite, gen_synthetic, list_sequences, load_masks, load_sequence, load_synth_spec, save_masks, save_sequence,
    save_synth_spec, standard_suite, FlowPair, Sequence, SynthSpec,
};
use flowvos::memory::MemoryPolicy;
use flowvos::metrics::{evaluate, mean_over_objects, EvalReport};
use flowvos::pipeline::{
    bench, load_checkpoint, model_gradcheck, noisy_flows, propagate, save_checkpoint, train_toy, BenchOptions, FlowSource,
    GradcheckOptions, Model, PropagateOptions, TrainOptions,
};
use flowvos::Error;

#[derive(Parser)]
#[command(name = "flowvos", version, about = "Flow-guided deformable attention for video mask propagation")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (recorded; computation is single-threaded).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where reports, masks and checkpoints are written.
    #[arg(long, global = true, default_value = "flowvos-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic sequences into a dataset directory.
    Synth(SynthArgs),
    /// Train a model on sequences of a dataset directory.
    Train(TrainArgs),
    /// Segment a sequence from its first-frame annotation.
    Propagate(PropagateArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every parameter group.
    Gradcheck(GradcheckArgs),
    /// Time deformable against dense attention over frame sizes.
    Bench(BenchArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    /// Spec file (one spec or an array), or `suite:standard` / `suite:fast`.
    spec: String,
    /// Dataset root to write into.
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Dataset root.
    data: PathBuf,
    /// Train on these sequences only (default: all).
    #[arg(long = "sequence")]
    sequences: Vec<String>,
    #[arg(long, default_value = "small")]
    config: String,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3)]
    clip_len: usize,
    /// Keep object labels as annotated instead of permuting them per clip.
    #[arg(long)]
    no_shuffle: bool,
    /// Feed ground-truth masks forward inside a clip.
    #[arg(long)]
    teacher_forcing: bool,
    #[arg(long, default_value = "files")]
    flow: String,
}

#[derive(Args, Serialize)]
struct PropagateArgs {
    checkpoint: PathBuf,
    /// Dataset root holding the sequence.
    data: PathBuf,
    /// Sequence name; required when the root holds several.
    #[arg(long)]
    sequence: Option<String>,
    /// oracle, files or noisy:<sigma>
    #[arg(long, default_value = "files")]
    flow: String,
    #[arg(long, default_value_t = 5)]
    mem_every: usize,
    #[arg(long, default_value_t = 16)]
    mem_cap: usize,
    /// Switch off a branch: flow-offsets, qk-flow, long-term, multi-scale.
    #[arg(long, value_delimiter = ',')]
    disable: Vec<String>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    /// Directory with one `<sequence>/%05d.png` folder per sequence.
    predictions: PathBuf,
    /// Dataset root with ground truth.
    data: PathBuf,
    #[arg(long = "sequence")]
    sequences: Vec<String>,
    /// Exit with status 1 when mean J&F falls below this.
    #[arg(long)]
    min_jf: Option<f64>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value = "micro")]
    config: String,
    #[arg(long, default_value_t = 16)]
    frame: usize,
    #[arg(long, default_value_t = 3)]
    probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-2)]
    tolerance: f64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value = "base")]
    config: String,
}

#[derive(Serialize)]
struct RunConfig<'a> {
    command: &'static str,
    seed: u64,
    threads: usize,
    out_dir: &'a Path,
    version: &'static str,
    args: Value,
}

/// Result of a command that ran to completion: success or a failed check.
enum Outcome {
    Ok,
    CheckFailed,
}

type Result<T> = std::result::Result<T, Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let run = |command, args: Value| RunConfig {
        command,
        seed: cli.seed,
        threads,
        out_dir: &cli.out_dir,
        version: env!("CARGO_PKG_VERSION"),
        args,
    };
    let result = match &cli.command {
        Command::Synth(a) => synth(a, &run("synth", to_value(a))),
        Command::Train(a) => train(a, &run("train", to_value(a))),
        Command::Propagate(a) => cmd_propagate(a, &run("propagate", to_value(a))),
        Command::Eval(a) => eval(a, &run("eval", to_value(a))),
        Command::Gradcheck(a) => gradcheck(a, &run("gradcheck", to_value(a))),
        Command::Bench(a) => cmd_bench(a, &run("bench", to_value(a))),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Training { .. } | Error::NonFinite(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn to_value(a: &impl Serialize) -> Value {
    serde_json::to_value(a).expect("arguments serialise")
}

fn run_json(run: &RunConfig) -> String {
    serde_json::to_string(run).expect("run config serialises")
}

fn write_report(run: &RunConfig, name: &str, mut report: Value) -> Result<PathBuf> {
    fs::create_dir_all(run.out_dir)?;
    report["run_config"] = serde_json::to_value(run)?;
    let path = run.out_dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(path)
}

fn model_config(name: &str) -> Result<ModelConfig> {
    match name {
        "base" => Ok(ModelConfig::base()),
        "small" => Ok(ModelConfig::small()),
        "micro" => Ok(ModelConfig::micro()),
        _ => Err(Error::Usage(format!("config must be base, small or micro, got {name:?}"))),
    }
}

fn synth(a: &SynthArgs, run: &RunConfig) -> Result<Outcome> {
    let specs = match a.spec.as_str() {
        "suite:standard" => standard_suite(run.seed),
        "suite:fast" => fast_motion_suite(run.seed),
        path => {
            let text = fs::read_to_string(path)?;
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Input(format!("{path}: {e}")))?;
            let list = match value {
                Value::Array(v) => v,
                v => vec![v],
            };
            list.into_iter()
                .map(|mut v| {
                    if let Value::Object(m) = &mut v {
                        m.entry("seed").or_insert(json!(run.seed));
                    }
                    let spec: SynthSpec = serde_json::from_value(v).map_err(|e| Error::Input(format!("{path}: {e}")))?;
                    spec.validate()?;
                    Ok(spec)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    let text = run_json(run);
    for spec in &specs {
        let seq = gen_synthetic(spec)?;
        save_sequence(&a.out, &seq, &[("run_config", &text)])?;
        save_synth_spec(&a.out, spec)?;
        println!("{}: {} frames of {}x{}", spec.name, spec.frames, spec.height, spec.width);
    }
    Ok(Outcome::Ok)
}

/// Flows for `seq` from the chosen source.
fn flows_for(root: &Path, seq: &Sequence, source: FlowSource, seed: u64) -> Result<Option<Vec<FlowPair>>> {
    let oracle = || -> Result<Vec<FlowPair>> {
        let spec = load_synth_spec(root, &seq.name)?
            .ok_or_else(|| Error::Usage(format!("sequence {:?} has no stored generator spec for oracle flow", seq.name)))?;
        gen_synthetic(&spec)?
            .flows
            .ok_or_else(|| Error::Input("generator returned no flow".into()))
    };
    Ok(match source {
        FlowSource::Oracle => Some(oracle()?),
        FlowSource::Files => seq.flows.clone(),
        FlowSource::Noisy(sigma) => Some(noisy_flows(&oracle()?, sigma, seed)?),
    })
}

fn train(a: &TrainArgs, run: &RunConfig) -> Result<Outcome> {
    let source: FlowSource = a.flow.parse()?;
    let names = if a.sequences.is_empty() {
        list_sequences(&a.data)?
    } else {
        a.sequences.clone()
    };
    let seqs = names
        .iter()
        .map(|n| {
            let mut seq = load_sequence(&a.data, Some(n))?;
            seq.flows = flows_for(&a.data, &seq, source, run.seed)?;
            Ok(seq)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = match &a.init {
        Some(p) => load_checkpoint(p)?.0,
        None => Model::<f32>::new(model_config(&a.config)?, run.seed)?,
    };
    let opts = TrainOptions {
        steps: a.steps,
        lr: a.lr,
        seed: run.seed,
        clip_len: a.clip_len,
        shuffle: !a.no_shuffle,
        teacher_forcing: a.teacher_forcing,
        gates: Gates::default(),
    };
    let report = train_toy(&mut model, &seqs, &opts)?;
    fs::create_dir_all(run.out_dir)?;
    let ckpt = run.out_dir.join("model.ckpt");
    save_checkpoint(&ckpt, &model, &json!({ "run_config": run, "train": opts }))?;
    let path = write_report(run, "train.json", json!({ "options": opts, "losses": report.losses }))?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("loss {first:.4} -> {last:.4} over {} steps", report.losses.len());
    }
    println!("checkpoint {}", ckpt.display());
    println!("report {}", path.display());
    Ok(Outcome::Ok)
}

fn cmd_propagate(a: &PropagateArgs, run: &RunConfig) -> Result<Outcome> {
    let source: FlowSource = a.flow.parse()?;
    let mut gates = Gates::default();
    for name in &a.disable {
        gates.disable(name)?;
    }
    let opts = PropagateOptions {
        gates,
        memory: MemoryPolicy::new(a.mem_every, a.mem_cap).map_err(|e| Error::Usage(e.to_string()))?,
    };
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let seq = load_sequence(&a.data, a.sequence.as_deref())?;
    let flows = flows_for(&a.data, &seq, source, run.seed)?;
    let trace = propagate(&model, &seq, flows.as_deref(), &opts)?;
    let first = seq.first_annotation()?;
    let masks: Vec<(usize, _)> = trace.full_sequence(first).into_iter().enumerate().collect();
    let dir = run.out_dir.join(&seq.name);
    save_masks(&dir, &masks, &[("run_config", &run_json(run))])?;

    let gts: Option<Vec<_>> = seq.annotations.iter().cloned().collect();
    let eval = match gts {
        Some(gts) => {
            let preds: Vec<_> = masks.into_iter().map(|(_, m)| m).collect();
            let report = evaluate(&seq.name, &preds, &gts)?;
            print!("{}", report.table());
            Some(report)
        }
        None => None,
    };
    let mut report = json!({
        "sequence": seq.name,
        "frames": seq.len(),
        "options": opts,
        "seconds_per_frame": trace.seconds,
        "bank_sizes": trace.bank_sizes,
        "eval": eval,
    });
    report["run_config"] = serde_json::to_value(run)?;
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("masks and report in {}", dir.display());
    Ok(Outcome::Ok)
}

fn eval(a: &EvalArgs, run: &RunConfig) -> Result<Outcome> {
    let names = if a.sequences.is_empty() {
        list_sequences(&a.data)?
    } else {
        a.sequences.clone()
    };
    let mut reports: Vec<EvalReport> = Vec::new();
    for name in &names {
        let seq = load_sequence(&a.data, Some(name))?;
        let gts: Vec<_> = seq
            .annotations
            .iter()
            .cloned()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Input(format!("sequence {name:?} lacks ground truth on some frames")))?;
        let mut found = load_masks(a.predictions.join(name))?;
        let preds = (0..seq.len())
            .map(|t| {
                found
                    .remove(&t)
                    .ok_or_else(|| Error::Input(format!("no prediction for {name} frame {t}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(name, &preds, &gts)?;
        print!("{}", report.table());
        reports.push(report);
    }
    let (j, f, jf) = mean_over_objects(&reports);
    println!("overall J {j:.4} F {f:.4} J&F {jf:.4}");
    let passed = a.min_jf.is_none_or(|m| jf >= m);
    write_report(
        run,
        "eval.json",
        json!({ "sequences": reports, "j_mean": j, "f_mean": f, "jf": jf, "passed": passed }),
    )?;
    Ok(if passed { Outcome::Ok } else { Outcome::CheckFailed })
}

fn gradcheck(a: &GradcheckArgs, run: &RunConfig) -> Result<Outcome> {
    let opts = GradcheckOptions {
        config: model_config(&a.config)?,
        frame: a.frame,
        seed: run.seed,
        probes: a.probes,
        step: a.step,
        tolerance: a.tolerance,
        inject_fault: a.inject_fault,
        ..GradcheckOptions::default()
    };
    let groups = model_gradcheck(&opts)?;
    for g in &groups {
        println!(
            "{:<12} max_rel_err {:.3e} probes {:>3} {}",
            g.group,
            g.max_rel_err,
            g.probes,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    let passed = groups.iter().all(|g| g.passed);
    write_report(run, "gradcheck.json", json!({ "groups": groups, "passed": passed }))?;
    Ok(if passed { Outcome::Ok } else { Outcome::CheckFailed })
}

fn cmd_bench(a: &BenchArgs, run: &RunConfig) -> Result<Outcome> {
    let opts = BenchOptions {
        sizes: a.sizes.clone(),
        repeats: a.repeats,
        warmup: a.warmup,
        seed: run.seed,
        config: model_config(&a.config)?,
    };
    let report = bench(&opts)?;
    print!("{}", report.table());
    let path = write_report(run, "bench.json", serde_json::to_value(&report)?)?;
    println!("report {}", path.display());
    Ok(Outcome::Ok)
}
