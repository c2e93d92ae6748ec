use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use canids_core::attacks::{self, AttackSpec, TrafficProfile};
use canids_core::eval::{self, ConfusionMatrix};
use canids_core::ingest::{self, AttackKind, CanFrame, DEFAULT_WINDOW};
use canids_core::int_model::{self, LoweredModel};
use canids_core::model::{FakeQuantMlp, TrainingMetadata};
use canids_core::pipeline::{self, ReplayConfig};
use canids_core::train::{self, Samples, TrainConfig};
use serde_json::{json, Value};

use crate::{
    AttackArg, BenchArgs, Cli, Command, DseArgs, EvalArgs, LowerArgs, ModelKind, ReplayArgs,
    SynthArgs, TrainArgs, TrainFlags,
};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => synth(cli, args),
        Command::Train(args) => train_cmd(cli, args),
        Command::Lower(args) => lower(cli, args),
        Command::Eval(args) => eval_cmd(cli, args),
        Command::Bench(args) => bench(cli, args),
        Command::Replay(args) => replay(cli, args),
        Command::Dse(args) => dse(cli, args),
    }
}

fn print_config(command: &str, cli: &Cli, details: Value) {
    let config = json!({
        "command": command,
        "seed": cli.seed,
        "window": cli.window,
        "strict": cli.strict,
        "json": cli.json,
        "options": details,
    });
    eprintln!("config: {config}");
}

fn training_window(cli: &Cli) -> Result<usize> {
    let w = cli.window.unwrap_or(DEFAULT_WINDOW);
    ensure!(w > 0, "--window must be positive");
    Ok(w)
}

/// The model fixes the window; an explicit `--window` must agree with it.
fn model_window(cli: &Cli, lowered: &LoweredModel) -> Result<usize> {
    match cli.window {
        Some(w) if w != lowered.window => {
            bail!(
                "--window {w} does not match the model's window {}",
                lowered.window
            )
        }
        _ => Ok(lowered.window),
    }
}

fn read_frames(cli: &Cli, path: &Path) -> Result<Vec<CanFrame>> {
    let log = ingest::read_log(path, cli.strict)?;
    if !log.skipped.is_empty() {
        eprintln!(
            "warning: skipped {} malformed record(s) in {} (first at line {}: {})",
            log.skipped.len(),
            path.display(),
            log.skipped[0].line,
            log.skipped[0].reason
        );
    }
    ensure!(
        !log.frames.is_empty(),
        "{} contains no frames",
        path.display()
    );
    Ok(log.frames)
}

fn read_lowered(path: &Path) -> Result<LoweredModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    LoweredModel::from_json(&text)
        .with_context(|| format!("loading lowered model {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn kind_of(model: ModelKind) -> AttackKind {
    match model {
        ModelKind::Dos => AttackKind::Dos,
        ModelKind::Fuzzy => AttackKind::Fuzzy,
    }
}

fn train_config(cli: &Cli, flags: &TrainFlags) -> Result<TrainConfig> {
    ensure!(
        flags.split > 0.0 && flags.split < 1.0,
        "--split must lie strictly between 0 and 1 (got {})",
        flags.split
    );
    ensure!(
        !flags.hidden.is_empty(),
        "--hidden needs at least one layer width"
    );
    let config = TrainConfig {
        epochs: flags.epochs,
        batch_size: flags.batch,
        learning_rate: flags.lr,
        seed: cli.seed,
        class_weighting: !flags.no_class_weighting,
        observer_epochs: flags.observer_epochs,
        ..TrainConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn dims_for(window: usize, hidden: &[usize]) -> Vec<usize> {
    let mut dims = vec![window * ingest::FEATURES_PER_FRAME];
    dims.extend_from_slice(hidden);
    dims.push(2);
    dims
}

fn split_samples(
    cli: &Cli,
    dataset: &Path,
    window: usize,
    split: f64,
) -> Result<(Samples, Samples)> {
    let frames = read_frames(cli, dataset)?;
    let samples = Samples::from_frames(&frames, window)?;
    let (train_set, holdout) = samples.split(split);
    ensure!(
        !train_set.is_empty() && !holdout.is_empty(),
        "{} windows are too few for a {split} split",
        samples.len()
    );
    Ok((train_set, holdout))
}

fn synth(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let profile = match &args.profile {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<TrafficProfile>(&text)
                .with_context(|| format!("parsing traffic profile {}", path.display()))?
        }
        None => TrafficProfile::vehicle(args.duration),
    };
    profile.validate()?;
    let duration = profile.duration_s;
    let kind = match args.attack {
        AttackArg::Dos => Some(AttackKind::Dos),
        AttackArg::Fuzzy => Some(AttackKind::Fuzzy),
        AttackArg::None => None,
    };
    let spec = kind.map(|k| {
        let mut spec = AttackSpec::default_for(k, duration);
        if let Some(rate) = args.rate {
            spec.rate = rate;
        }
        if let Some(start) = args.attack_start {
            spec.start_s = start;
        }
        if let Some(stop) = args.attack_stop {
            spec.stop_s = stop;
        }
        spec
    });
    if let Some(spec) = &spec {
        ensure!(
            spec.rate > 0.0 && spec.rate.is_finite(),
            "--rate must be positive"
        );
    }
    print_config(
        "synth",
        cli,
        json!({ "output": args.output, "duration_s": duration, "attack": spec, "profile": args.profile }),
    );

    let traffic = match &spec {
        Some(spec) => attacks::synthesize(&profile, spec, cli.seed)?,
        None => attacks::generate_normal(&profile, cli.seed)?,
    };
    attacks::write_log(&traffic.frames, &args.output)?;
    let attack = traffic
        .frames
        .iter()
        .filter(|f| f.label.is_attack())
        .count();
    if cli.json {
        println!(
            "{}",
            json!({ "frames": traffic.frames.len(), "attack": attack, "normal": traffic.frames.len() - attack })
        );
    } else {
        println!(
            "wrote {} frames ({} normal, {} attack) to {}",
            traffic.frames.len(),
            traffic.frames.len() - attack,
            attack,
            args.output.display()
        );
    }
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let window = training_window(cli)?;
    let config = train_config(cli, &args.train)?;
    let dims = dims_for(window, &args.train.hidden);
    let kind = kind_of(args.attack);
    print_config(
        "train",
        cli,
        json!({
            "dataset": args.dataset, "output": args.output, "attack": kind, "dims": dims,
            "bits": args.bits, "split": args.train.split, "train": config,
        }),
    );

    let (train_set, holdout) = split_samples(cli, &args.dataset, window, args.train.split)?;
    let model = FakeQuantMlp::new(&dims, args.bits, args.bits, cli.seed)?;
    let outcome = train::train(model, &train_set, &config)?;
    let (cm, m) = train::holdout_metrics(&outcome.model, &holdout)?;
    let meta = TrainingMetadata {
        seed: cli.seed,
        epochs: config.epochs,
        window,
        attack: Some(kind),
        holdout_f1: Some(m.f1),
        loss_trace: outcome.loss_trace(),
    };
    write_text(&args.output, &outcome.model.to_checkpoint_json(&meta)?)?;

    if cli.json {
        println!(
            "{}",
            json!({ "trace": outcome.trace, "holdout": { "confusion": cm, "metrics": m }, "checkpoint": args.output })
        );
    } else {
        for e in &outcome.trace {
            println!(
                "epoch {:>3}  loss {:.6}  accuracy {:.4}",
                e.epoch, e.loss, e.accuracy
            );
        }
        println!(
            "holdout ({} windows): precision {:.4}  recall {:.4}  F1 {:.4}  FNR {:.4}",
            holdout.len(),
            m.precision,
            m.recall,
            m.f1,
            m.fnr
        );
        println!("wrote checkpoint to {}", args.output.display());
    }
    Ok(())
}

fn lower(cli: &Cli, args: &LowerArgs) -> Result<()> {
    print_config(
        "lower",
        cli,
        json!({ "checkpoint": args.checkpoint, "output": args.output, "samples": args.samples }),
    );
    let text = fs::read_to_string(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let (model, meta) = FakeQuantMlp::from_checkpoint_json(&text)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if let Some(w) = cli.window {
        ensure!(
            w == meta.window,
            "--window {w} does not match the checkpoint's window {}",
            meta.window
        );
    }
    let int_model = int_model::lower(&model)?;
    let report = int_model::verify_equivalence(&model, &int_model, args.samples, cli.seed)?;
    if !report.passed() {
        let witness = report
            .witness
            .as_ref()
            .map(|w| hex::encode(&w.input))
            .unwrap_or_default();
        bail!(
            "lowered model disagrees with the checkpoint on {} of {} inputs (first witness {witness}); nothing written",
            report.mismatches,
            report.samples
        );
    }
    let bounds = int_model.accumulator_bounds();
    let lowered = LoweredModel::new(int_model, meta.window, meta.attack, &text);
    write_text(&args.output, &lowered.to_json()?)?;

    if cli.json {
        println!(
            "{}",
            json!({ "samples": report.samples, "mismatches": report.mismatches,
                    "max_logit_discrepancy": report.max_logit_discrepancy, "accumulator_bounds": bounds })
        );
    } else {
        println!(
            "equivalence: {} samples, {} mismatches",
            report.samples, report.mismatches
        );
        for (l, b) in bounds.iter().enumerate() {
            println!(
                "layer {l} accumulator range [{}, {}] ({} bits)",
                b.min,
                b.max,
                b.bits_required()
            );
        }
        println!("wrote lowered model to {}", args.output.display());
    }
    Ok(())
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let lowered = read_lowered(&args.model)?;
    let window = model_window(cli, &lowered)?;
    print_config(
        "eval",
        cli,
        json!({ "model": args.model, "dataset": args.dataset, "holdout": args.holdout, "csv": args.csv }),
    );
    let frames = read_frames(cli, &args.dataset)?;
    let report = eval::evaluate(
        &lowered.model,
        &frames,
        window,
        args.holdout,
        lowered.attack,
    )?;
    if let Some(path) = &args.csv {
        write_text(path, &report.to_csv())?;
    }
    if cli.json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

/// Synthetic DoS stream of exactly `messages` frames.
fn synthetic_stream(messages: usize, seed: u64) -> Result<Vec<CanFrame>> {
    // The default DoS fixture averages about 2100 frames per second.
    let duration = (messages as f64 / 2000.0).max(1.0);
    let profile = TrafficProfile::vehicle(duration);
    let spec = AttackSpec::default_for(AttackKind::Dos, duration);
    let mut frames = attacks::synthesize(&profile, &spec, seed)?.frames;
    ensure!(frames.len() >= messages, "synthetic stream too short");
    frames.truncate(messages);
    Ok(frames)
}

fn bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    ensure!(args.messages > 0, "--messages must be positive");
    ensure!(args.threads > 0, "--threads must be positive");
    let lowered = read_lowered(&args.model)?;
    let window = model_window(cli, &lowered)?;
    print_config(
        "bench",
        cli,
        json!({ "model": args.model, "dataset": args.dataset, "messages": args.messages, "threads": args.threads }),
    );
    let frames = match &args.dataset {
        Some(path) => {
            let mut frames = read_frames(cli, path)?;
            frames.truncate(args.messages);
            frames
        }
        None => synthetic_stream(args.messages, cli.seed)?,
    };
    let mut results = vec![eval::bench(&lowered.model, &frames, window)?];
    if args.threads > 1 {
        results.push(eval::bench_parallel(
            &lowered.model,
            &frames,
            window,
            args.threads,
        )?);
    }
    if let Some(path) = &args.csv {
        let csv: String = results
            .iter()
            .map(|r| r.to_csv())
            .collect::<Vec<_>>()
            .join("");
        write_text(path, &csv)?;
    }
    if cli.json {
        let docs: Vec<Value> = results
            .iter()
            .map(|r| r.to_json().map(|s| serde_json::from_str(&s)))
            .collect::<Result<Result<_, _>, _>>()??;
        println!("{}", Value::Array(docs));
    } else {
        for r in &results {
            print!("{}", r.render_table());
        }
    }
    Ok(())
}

fn replay(cli: &Cli, args: &ReplayArgs) -> Result<()> {
    let lowered = read_lowered(&args.model)?;
    let window = model_window(cli, &lowered)?;
    let config = ReplayConfig {
        speed: args.speed,
        queue_depth: args.queue,
    };
    print_config(
        "replay",
        cli,
        json!({ "model": args.model, "dataset": args.dataset, "speed": args.speed,
                "queue_depth": args.queue, "output": args.output }),
    );
    let frames = read_frames(cli, &args.dataset)?;
    let report = pipeline::replay(&lowered.model, &frames, window, &config)?;
    if let Some(path) = &args.output {
        let file =
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        report.write_csv(&mut out)?;
        out.flush()?;
    }

    let mut cm = ConfusionMatrix::default();
    for r in &report.records {
        if let (Some(v), Some(t)) = (r.verdict, r.window_truth) {
            cm.record(v, t);
        }
    }
    let m = eval::metrics(&cm);
    let first_attack = frames.iter().position(|f| f.label.is_attack());
    let first_alarm = report.first_alarm();
    if cli.json {
        println!(
            "{}",
            json!({ "messages": report.records.len(), "stalls": report.stalls,
                    "mean_latency_us": report.mean_latency_us(), "first_attack_frame": first_attack,
                    "first_alarm_frame": first_alarm, "confusion": cm, "metrics": m })
        );
    } else {
        println!("messages       {}", report.records.len());
        println!("queue stalls   {}", report.stalls);
        println!("mean latency   {:.3} us", report.mean_latency_us());
        match (first_attack, first_alarm) {
            (Some(a), Some(b)) => println!("first alarm    frame {b} (first attack frame {a})"),
            (None, Some(b)) => println!("first alarm    frame {b} (log has no attack frames)"),
            (_, None) => println!("first alarm    none"),
        }
        println!(
            "window metrics precision {:.4}  recall {:.4}  F1 {:.4}  FNR {:.4}",
            m.precision, m.recall, m.f1, m.fnr
        );
    }
    Ok(())
}

fn dse(cli: &Cli, args: &DseArgs) -> Result<()> {
    let window = training_window(cli)?;
    let config = train_config(cli, &args.train)?;
    let dims = dims_for(window, &args.train.hidden);
    print_config(
        "dse",
        cli,
        json!({ "dataset": args.dataset, "bits": args.bits, "dims": dims,
                "split": args.train.split, "train": config }),
    );
    let (train_set, holdout) = split_samples(cli, &args.dataset, window, args.train.split)?;
    let rows = train::dse_sweep(&args.bits, &dims, &train_set, &holdout, &config)?;
    if cli.json {
        println!("{}", serde_json::to_string(&rows)?);
    } else {
        println!(
            "{:>4}  {:>9}  {:>9}  {:>9}  {:>9}  {:>10}",
            "bits", "precision", "recall", "F1", "FNR", "final loss"
        );
        for r in &rows {
            println!(
                "{:>4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>9.4}  {:>10.6}",
                r.bits,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1,
                r.metrics.fnr,
                r.final_loss
            );
        }
    }
    Ok(())
}
