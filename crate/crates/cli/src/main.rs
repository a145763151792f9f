//! `devtune`: gradient checks, training, split-inference simulation, message
//! inspection and FLOP/byte tables.
//!
//! Exit codes: 0 success, 1 check failure / divergence / malformed message,
//! 2 configuration or usage error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use devtune_core::simulate::{simulate_row, SimulationRow};
use devtune_core::wire::{decode_header, HEADER_LEN, MAGIC};
use devtune_core::{
    communication_bytes, decode_message, encode_message, run_gradcheck_suite, save_checkpoint,
    simulate_table, train, BackwardFault, RunConfig, SplitModel, TrainError,
};

#[derive(Parser, Debug)]
#[command(name = "devtune", version, about = "Split device/cloud transformer toolkit")]
struct Cli {
    /// TOML run configuration. Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set train.steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of every differentiable block.
    Gradcheck {
        /// Corrupts one backward rule; the suite must then fail.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Multi-task training on the configured synthetic tasks.
    Train {
        /// Writes the trained parameters here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Uplink bytes, latency and attention FLOPs for every pooling depth.
    Simulate,
    /// Prints the header and payload checksum of a wire message.
    Inspect { message: PathBuf },
    /// FLOP and byte tables over a grid of input lengths.
    Bench {
        /// Input lengths to tabulate.
        #[arg(long, value_delimiter = ',', default_values_t = vec![16usize, 32, 64, 128, 256])]
        lengths: Vec<usize>,
    },
    /// Encodes the device output for one seeded input as a wire message.
    Encode {
        /// Destination file.
        output: PathBuf,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Check(anyhow::Error),
    Usage(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(RunConfig::resolve(cli.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Inspect { message } => inspect(message),
        Command::Gradcheck { corrupt_backward } => {
            let cfg = load_config(&cli)?;
            gradcheck(&cfg, cli.out.as_deref(), *corrupt_backward)
        }
        Command::Train { checkpoint } => {
            let cfg = load_config(&cli)?;
            let out = cli.out.clone().or_else(|| cfg.output.report.clone());
            let ckpt = checkpoint.clone().or_else(|| cfg.output.checkpoint.clone());
            run_train(&cfg, out.as_deref(), ckpt.as_deref())
        }
        Command::Simulate => {
            let cfg = load_config(&cli)?;
            simulate(&cfg, cli.out.as_deref())
        }
        Command::Bench { lengths } => {
            let cfg = load_config(&cli)?;
            bench(&cfg, lengths, cli.out.as_deref())
        }
        Command::Encode { output } => {
            let cfg = load_config(&cli)?;
            encode(&cfg, output)
        }
    }
}

fn report_writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn gradcheck(cfg: &RunConfig, out: Option<&Path>, corrupt: bool) -> Result<(), Failure> {
    let fault = corrupt.then_some(BackwardFault::GeluSlope);
    let report = run_gradcheck_suite(&cfg.gradcheck, cfg.seed, fault)?;
    for c in &report.cases {
        println!(
            "{:<20} {:<26} {:>11.3e}  {}",
            c.group,
            c.name,
            c.worst,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    println!();
    for (group, worst) in report.worst_by_group() {
        println!("worst {group:<20} {worst:.3e}");
    }
    println!(
        "tolerance {:.0e}, {:.2}s",
        report.tolerance,
        report.elapsed.as_secs_f64()
    );
    if let Some(p) = out {
        let mut w = csv::Writer::from_writer(report_writer(Some(p))?);
        w.write_record(["group", "case", "input", "relative_error", "passed"])?;
        for c in &report.cases {
            for (input, err) in &c.inputs {
                w.write_record([
                    c.group,
                    &c.name,
                    input,
                    &format!("{err:e}"),
                    &(*err <= report.tolerance).to_string(),
                ])?;
            }
        }
        w.flush()?;
    }
    if report.passed() {
        println!("gradcheck passed");
        Ok(())
    } else {
        let failed: Vec<_> = report
            .cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(Failure::Check(anyhow::anyhow!(
            "gradcheck failed: {}",
            failed.join(", ")
        )))
    }
}

fn run_train(cfg: &RunConfig, out: Option<&Path>, checkpoint: Option<&Path>) -> Result<(), Failure> {
    let mut model = SplitModel::new(cfg.model.clone(), cfg.init_seed())?;
    let (device, cloud) = model.parameter_count();
    eprintln!(
        "training {} tasks, {} steps, {device} device + {cloud} cloud parameters",
        cfg.tasks.len(),
        cfg.train.steps
    );
    let start = Instant::now();
    let report = match train(&mut model, &cfg.tasks, &cfg.train, cfg.data_seed(), |_| {}) {
        Ok(r) => r,
        Err(e @ TrainError::Diverged { .. }) => return Err(Failure::Check(e.into())),
        Err(e @ TrainError::Setup(_)) => return Err(Failure::Usage(e.into())),
        Err(e) => return Err(Failure::Check(e.into())),
    };
    report.write_csv(report_writer(out)?)?;
    eprintln!("finished in {:.1}s", start.elapsed().as_secs_f64());
    for (i, id) in report.task_ids.iter().enumerate() {
        let (l0, l1) = (report.initial_eval_losses[i], report.final_eval_losses[i]);
        eprintln!(
            "{id:<14} eval loss {l0:.4} -> {l1:.4} ({:.1}%)  weight {:.4}",
            100.0 * l1 / l0,
            report.final_weights[i]
        );
    }
    if let Some(p) = checkpoint {
        save_checkpoint(&model, p).with_context(|| format!("cannot write checkpoint {}", p.display()))?;
        eprintln!("checkpoint written to {}", p.display());
    }
    Ok(())
}

fn write_rows(
    w: &mut csv::Writer<Box<dyn Write>>,
    len: usize,
    width: usize,
    rows: &[SimulationRow],
) -> Result<()> {
    for r in rows {
        w.write_record([
            len.to_string(),
            width.to_string(),
            r.stages.to_string(),
            r.compressed_len.to_string(),
            r.uplink_bytes.to_string(),
            format!("{:.6}", r.uplink_latency),
            r.device_flops.to_string(),
            r.cloud_flops.to_string(),
            r.total_flops().to_string(),
            format!("{:.4}", r.ratio),
        ])?;
    }
    Ok(())
}

const TABLE_HEADER: [&str; 10] = [
    "T",
    "D",
    "k",
    "T_prime",
    "uplink_bytes",
    "uplink_latency_s",
    "device_flops",
    "cloud_flops",
    "total_flops",
    "ratio",
];

fn simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let len = cfg.simulate.input_len;
    let rows = simulate_table(&cfg.model, &cfg.channel, len);
    for r in &rows {
        let direct = communication_bytes(len, r.stages, cfg.model.encoder.width);
        debug_assert_eq!(direct.compressed, r.uplink_bytes);
    }
    let mut w = csv::Writer::from_writer(report_writer(out)?);
    w.write_record(TABLE_HEADER)?;
    write_rows(&mut w, len, cfg.model.encoder.width, &rows)?;
    w.flush()?;
    Ok(())
}

fn bench(cfg: &RunConfig, lengths: &[usize], out: Option<&Path>) -> Result<(), Failure> {
    if lengths.contains(&0) {
        return Err(Failure::Usage(anyhow::anyhow!(
            "--lengths entries must be positive"
        )));
    }
    let mut w = csv::Writer::from_writer(report_writer(out)?);
    w.write_record(TABLE_HEADER)?;
    for &len in lengths {
        let rows: Vec<_> = (0..=cfg.model.encoder.pooling_stages)
            .map(|k| simulate_row(&cfg.model, &cfg.channel, len, k))
            .collect();
        write_rows(&mut w, len, cfg.model.encoder.width, &rows)?;
    }
    w.flush()?;
    Ok(())
}

fn encode(cfg: &RunConfig, output: &Path) -> Result<(), Failure> {
    let model = SplitModel::new(cfg.model.clone(), cfg.init_seed())?;
    let task = &cfg.tasks[0];
    let batch = devtune_core::generate_batch(task, 1, cfg.data_seed());
    let h = model.device_encode(&batch.sequences[0])?;
    let bytes = encode_message(&h)?;
    std::fs::write(output, &bytes).with_context(|| format!("cannot write {}", output.display()))?;
    println!(
        "wrote {} bytes ({}x{}) to {}",
        bytes.len(),
        h.rows(),
        h.cols(),
        output.display()
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let header = decode_header(&bytes).map_err(|e| {
        Failure::Check(anyhow::anyhow!(
            "{}: byte offset {}: {e}",
            path.display(),
            e.offset()
        ))
    })?;
    let tensor = decode_message(&bytes).map_err(|e| {
        Failure::Check(anyhow::anyhow!(
            "{}: byte offset {}: {e}",
            path.display(),
            e.offset()
        ))
    })?;
    let payload = &bytes[HEADER_LEN..];
    println!("magic        {}", String::from_utf8_lossy(&MAGIC));
    println!("version      {}", header.version);
    println!("dtype        {} (f32 little-endian)", header.dtype_code);
    println!("T'           {}", header.rows);
    println!("D            {}", header.cols);
    println!("payload_len  {}", header.payload_len);
    println!("sha256       {}", hex::encode(Sha256::digest(payload)));
    let reencoded = encode_message(&tensor)?;
    if reencoded != bytes {
        return Err(Failure::Check(anyhow::anyhow!(
            "re-encoding does not reproduce the file"
        )));
    }
    println!("round trip   ok");
    Ok(())
}
