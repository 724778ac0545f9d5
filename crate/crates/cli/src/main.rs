use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use edac::runner::{
    cmd_eval, cmd_gradcheck, cmd_heatmap, cmd_sweep, cmd_train, parse_etas, Overrides, RunResult, Split,
};

#[derive(Parser)]
#[command(name = "edac", version, about = "Adversarial training with certainty-lowering extragradient steps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training and initialisation seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes history.csv, best.ckpt, last.ckpt and summary.json.
    Train(Common),
    /// Evaluate a checkpoint on the test split under every named attack.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Adversarial prediction heatmap and label-level variance.
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `train` or `test`.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// One extragradient epoch from a checkpoint per step size.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma list (`0,0.1,0.5`) or inclusive range (`0:2:0.1`).
        #[arg(long, default_value = "0:2:0.1")]
        etas: String,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> RunResult<()> {
    match command {
        Command::Train(c) => {
            let report = cmd_train(&c.config, &c.overrides())?;
            for r in &report.history {
                println!(
                    "epoch {:>3}  lr {:<8}  clean {:.4}/{:.4}  robust {:.4}/{:.4}  ac {:.4}/{:.4}",
                    r.epoch,
                    r.lr,
                    r.clean_acc_train,
                    r.clean_acc_test,
                    r.robust_acc_train,
                    r.robust_acc_test,
                    r.ac_train,
                    r.ac_test
                );
            }
            let g = &report.summary.overfitting_gap;
            println!(
                "best robust {:.4} (epoch {}), last {:.4}, gap {:.4}",
                g.best_robust, g.best_epoch, g.last_robust, g.gap
            );
            println!("wrote {}", report.out_dir.display());
        }
        Command::Eval { common, checkpoint } => {
            let rows = cmd_eval(&common.config, &checkpoint, &common.overrides())?;
            println!("{:<16} {:>8} {:>6} {:>9} {:>10} {:>9}", "attack", "epsilon", "steps", "clean", "robust", "ac");
            for r in rows {
                println!(
                    "{:<16} {:>8} {:>6} {:>9.4} {:>10.4} {:>9.4}",
                    r.name, r.epsilon, r.steps, r.clean_acc, r.robust_acc, r.certainty
                );
            }
        }
        Command::Heatmap { common, checkpoint, split } => {
            let split: Split = split.parse()?;
            let report = cmd_heatmap(&common.config, &checkpoint, split, &common.overrides())?;
            for k in &report.empty_rows {
                eprintln!("warning: class {k} has no examples in the {} split", report.split);
            }
            for (k, row) in report.matrix.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                println!("class {k}: {}  (label variance {:.4})", cells.join(" "), report.label_variance[k]);
            }
            println!("mean label variance {:.4}", report.mean_label_variance);
        }
        Command::Sweep { common, checkpoint, etas } => {
            let etas = parse_etas(&etas)?;
            let rows = cmd_sweep(&common.config, &checkpoint, &etas, &common.overrides())?;
            println!("{:>6} {:>10} {:>10} {:>10}", "eta", "ac_train", "robust", "clean");
            for r in rows {
                if r.failed {
                    println!("{:>6} {:>10}", r.eta, "failed");
                } else {
                    println!(
                        "{:>6} {:>10.4} {:>10.4} {:>10.4}",
                        r.eta, r.ac_train, r.robust_acc_test, r.clean_acc_test
                    );
                }
            }
        }
        Command::Gradcheck { common, corrupt_gradient } => {
            let report = cmd_gradcheck(&common.config, &common.overrides(), corrupt_gradient)?;
            println!("{:>8} {:>12} {:>12} {:>12}", "h", "params", "input", "certainty");
            for r in &report.rows {
                println!("{:>8.0e} {:>12.3e} {:>12.3e} {:>12.3e}", r.h, r.params, r.input, r.certainty);
            }
            report.ensure_passed()?;
            println!("ok: {} cases, every relative error below {:.0e}", report.cases, report.tolerance);
        }
    }
    Ok(())
}

