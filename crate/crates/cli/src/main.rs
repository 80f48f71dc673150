use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twopass_core::error::Error;
use twopass_core::frontend::{load_dataset, save_dataset, Dataset};
use twopass_core::harness::{
    build_rescore_bench, evaluate, generate_splits, metrics_csv, metrics_csv_row, rescore_saved,
    run_mwer, run_train_las, run_train_rnnt, sweep_tradeoff, write_decodes, write_lattices,
    ExperimentConfig, Models,
};
use twopass_core::las::bench_rescore;
use twopass_core::quant::model_size_report;
use twopass_core::training::{write_loss_curve, Checkpoint, ModelBundle};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(
    name = "twopass",
    version,
    about = "Two-pass streaming recognizer: training, decoding and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; inputs not given explicitly are read from here too.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Inputs {
    /// Dataset archive; defaults to the split written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and evaluation sets.
    GenData(Common),
    /// Train the first pass with the joint endpointer.
    TrainRnnt {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Train the second pass with cross-entropy on a frozen first pass.
    TrainLas {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Fine-tune the second pass with minimum word error rate training.
    MwerFinetune {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Decode the evaluation set; writes one lattice per utterance and metrics.
    Decode {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Rescore lattices written by `decode` with the second pass.
    Rescore {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Score a checkpoint on the evaluation set.
    Eval {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
        #[command(flatten)]
        e: EvalArgs,
    },
    /// WER against endpointer latency over the configured grid.
    SweepEndpoint {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Time batched and unbatched lattice rescoring.
    BenchRescore {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
    /// Write an 8-bit copy of a checkpoint and a size report.
    Quantize {
        #[command(flatten)]
        c: Common,
        #[command(flatten)]
        i: Inputs,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluate the 8-bit quantized weights.
    #[arg(long)]
    quantized: bool,
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        fs::create_dir_all(&c.out)?;
        Ok(Ctx {
            cfg,
            seed: c.seed,
            out: c.out.clone(),
        })
    }

    fn path(&self, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out.join(default))
    }

    fn train(&self, i: &Inputs) -> Result<Dataset> {
        load_dataset(&self.path(&i.data, "train.tpds"))
    }

    fn eval(&self, i: &Inputs) -> Result<Dataset> {
        load_dataset(&self.path(&i.data, "eval.tpds"))
    }

    fn bundle(&self, i: &Inputs, default: &str) -> Result<ModelBundle> {
        ModelBundle::load(&self.path(&i.checkpoint, default))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.out.join(name), text)?;
        Ok(())
    }
}

fn check_vocab(bundle: &ModelBundle, ds: &Dataset) -> Result<()> {
    if bundle.vocab != ds.vocab {
        return Err(Error::Contract(
            "checkpoint and dataset vocabularies differ".into(),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let ctx = Ctx::new(&c)?;
            let splits = generate_splits(&ctx.cfg, ctx.seed)?;
            save_dataset(&splits.train, &ctx.out.join("train.tpds"))?;
            save_dataset(&splits.eval, &ctx.out.join("eval.tpds"))?;
            ctx.write("config.toml", &ctx.cfg.to_toml()?)?;
            println!(
                "train {} utterances, eval {} utterances",
                splits.train.len(),
                splits.eval.len()
            );
        }
        Command::TrainRnnt { c, i } => {
            let ctx = Ctx::new(&c)?;
            let train = ctx.train(&i)?;
            let run = run_train_rnnt(&ctx.cfg, ctx.seed, &train)?;
            run.bundle.save(&ctx.out.join("rnnt.ckpt"))?;
            write_loss_curve(&run.outcome.curve, &ctx.out.join("rnnt_loss.csv"))?;
            report_curve("rnnt", &run.outcome.curve);
        }
        Command::TrainLas { c, i } => {
            let ctx = Ctx::new(&c)?;
            let train = ctx.train(&i)?;
            let bundle = ctx.bundle(&i, "rnnt.ckpt")?;
            check_vocab(&bundle, &train)?;
            let (out, outcome) = run_train_las(&ctx.cfg, ctx.seed, &bundle, &train)?;
            out.save(&ctx.out.join("las.ckpt"))?;
            write_loss_curve(&outcome.curve, &ctx.out.join("las_loss.csv"))?;
            report_curve("las", &outcome.curve);
        }
        Command::MwerFinetune { c, i } => {
            let ctx = Ctx::new(&c)?;
            let train = ctx.train(&i)?;
            let bundle = ctx.bundle(&i, "las.ckpt")?;
            check_vocab(&bundle, &train)?;
            let (out, outcome) = run_mwer(&ctx.cfg, ctx.seed, &bundle, &train)?;
            out.save(&ctx.out.join("mwer.ckpt"))?;
            write_loss_curve(&outcome.train.curve, &ctx.out.join("mwer_loss.csv"))?;
            report_curve("mwer", &outcome.train.curve);
            println!(
                "skipped {} utterances with fewer than two hypotheses",
                outcome.skipped_examples
            );
        }
        Command::Decode { c, i } => {
            let ctx = Ctx::new(&c)?;
            let eval = ctx.eval(&i)?;
            let bundle = ctx.bundle(&i, "rnnt.ckpt")?;
            check_vocab(&bundle, &eval)?;
            let ev = evaluate(&ctx.cfg, &bundle, &eval, &ctx.cfg.decode, &[])?;
            write_decodes(&ctx.out, &eval, &ev.decodes)?;
            let csv = ev.csv();
            ctx.write("decode_metrics.csv", &csv)?;
            print!("{csv}");
        }
        Command::Rescore { c, i } => {
            let ctx = Ctx::new(&c)?;
            let eval = ctx.eval(&i)?;
            let bundle = ctx.bundle(&i, "las.ckpt")?;
            check_vocab(&bundle, &eval)?;
            let ev = rescore_saved(&ctx.cfg, &bundle, &ctx.out, &eval, &ctx.cfg.eval.lambdas)?;
            if let Some(lats) = &ev.rescored_lattices {
                write_lattices(
                    &ctx.out.join("rescored"),
                    &eval,
                    ev.decodes.iter().map(|d| d.id).zip(lats),
                )?;
            }
            let csv = ev.csv();
            ctx.write("rescore_metrics.csv", &csv)?;
            print!("{csv}");
        }
        Command::Eval { c, i, e } => {
            let ctx = Ctx::new(&c)?;
            let eval = ctx.eval(&i)?;
            let path = ctx.path(&i.checkpoint, "rnnt.ckpt");
            let mut ckpt = Checkpoint::load(&path)?;
            if e.quantized && !ckpt.quantized() {
                ckpt = ckpt.to_quantized()?;
            }
            let bundle = ModelBundle::from_checkpoint(&ckpt)?;
            check_vocab(&bundle, &eval)?;
            let lambdas: Vec<f64> = bundle.las.iter().map(|_| ctx.cfg.eval.lambda_las).collect();
            let ev = evaluate(&ctx.cfg, &bundle, &eval, &ctx.cfg.decode, &lambdas)?;
            let tag = if ckpt.quantized() {
                "quantized"
            } else {
                "float"
            };
            let (name, m) = ev.rows().pop().expect("first-pass row");
            let id = format!("eval_{tag}_{name}");
            ctx.write(
                &format!("eval_{tag}.csv"),
                &metrics_csv(&[(id.clone(), m.clone())]),
            )?;
            println!("{}", metrics_csv_row(&id, &m));
        }
        Command::SweepEndpoint { c, i } => {
            let ctx = Ctx::new(&c)?;
            let eval = ctx.eval(&i)?;
            let bundle = ctx.bundle(&i, "las.ckpt")?;
            check_vocab(&bundle, &eval)?;
            let models = Models::bind(&bundle)?;
            let result = sweep_tradeoff(
                models.first(&bundle),
                models.second(&bundle),
                &eval,
                &ctx.cfg.decode,
                &ctx.cfg.sweep.grid,
            )?;
            ctx.write("sweep.csv", &result.csv())?;
            ctx.write("sweep.svg", &result.svg())?;
            print!("{}", result.csv());
        }
        Command::BenchRescore { c, i } => {
            let ctx = Ctx::new(&c)?;
            let eval = ctx.eval(&i)?;
            let bundle = ctx.bundle(&i, "las.ckpt")?;
            check_vocab(&bundle, &eval)?;
            let models = Models::bind(&bundle)?;
            let second = models.require_second(&bundle)?;
            let items = build_rescore_bench(&ctx.cfg, &models, &bundle, &eval)?;
            let mut csv = String::from("mode,utterance,ms\n");
            for (mode, batched) in [("unbatched", false), ("batched", true)] {
                let stats = bench_rescore(
                    second.model,
                    second.params,
                    &items,
                    batched,
                    ctx.cfg.bench.repeats,
                )?;
                for (k, ms) in stats.per_utterance_ms.iter().enumerate() {
                    let _ = writeln!(csv, "{mode},{k},{ms:.4}");
                }
                println!(
                    "{mode}: p50 {:.3} ms, p90 {:.3} ms over {} lattices",
                    stats.p50_ms,
                    stats.p90_ms,
                    items.len()
                );
            }
            ctx.write("bench_rescore.csv", &csv)?;
        }
        Command::Quantize { c, i } => {
            let ctx = Ctx::new(&c)?;
            let path = ctx.path(&i.checkpoint, "rnnt.ckpt");
            let q = Checkpoint::load(&path)?.to_quantized()?;
            let out = ctx.out.join("quantized.ckpt");
            q.save(&out)?;
            let report = model_size_report(&q)?.to_text();
            ctx.write("size_report.txt", &report)?;
            print!("{report}");
        }
    }
    Ok(())
}

fn report_curve(stage: &str, curve: &[twopass_core::training::LossPoint]) {
    if let (Some(a), Some(b)) = (curve.first(), curve.last()) {
        println!(
            "{stage}: {} steps, loss {:.4} -> {:.4}",
            curve.len(),
            a.loss,
            b.loss
        );
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io(_) | Error::Diverged { .. } => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
