use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autoroute::config::ExperimentConfig;
use autoroute::harness::{
    self,
    gradsuite::{run_grad_suite, GRAD_TOL},
};

#[derive(Parser)]
#[command(name = "autoroute", about = "Bandit-routed representation transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file (key=value lines); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override individual config keys, e.g. --set epochs=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> autoroute::error::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                autoroute::error::Error::Parse(format!("--set wants KEY=VALUE, got '{s}'"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the source network on the sine task and save its checkpoint
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run one experiment (scratch | fixed | route | full)
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample-efficiency sweep over training-set fractions
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// e.g. 0.1..1.0 (step 0.1) or 0.1,0.5,1.0
        #[arg(long, default_value = "0.1..1.0")]
        fractions: String,
    },
    /// Fix each aggregation operator in turn and route over source layers
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of every differentiable path
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
}

fn real_main() -> autoroute::error::Result<()> {
    match Cli::parse().command {
        Command::Pretrain { cfg } => {
            let cfg = cfg.load()?;
            let ckpt = harness::pretrain_source(&cfg)?;
            let path = harness::source_checkpoint_path(&cfg);
            std::fs::create_dir_all(harness::out_root(&cfg))?;
            ckpt.save(&path)?;
            println!("source test mse: {}", ckpt.test_mse);
            println!("saved {}", path.display());
        }
        Command::Run { cfg, mode, seed } => {
            let mut cfg = cfg.load()?;
            if let Some(m) = mode {
                cfg.set("mode", &m)?;
            }
            if let Some(s) = seed {
                cfg.set("seed", &s.to_string())?;
            }
            let out = harness::run_experiment(&cfg)?;
            println!("mode {} seed {}: final test mse {}", cfg.mode, cfg.seed, out.manifest.final_test_mse);
            println!("outputs in {}", out.run_dir.display());
        }
        Command::Sweep { cfg, fractions } => {
            let cfg = cfg.load()?;
            let fractions = harness::parse_fractions(&fractions)?;
            let outs = harness::sweep_samples(&cfg, &fractions)?;
            for (f, o) in fractions.iter().zip(&outs) {
                println!("fraction {f}: final test mse {}", o.manifest.final_test_mse);
            }
        }
        Command::Ablate { cfg } => {
            let cfg = cfg.load()?;
            let outs = harness::ablate_ops(&cfg)?;
            for (op, o) in harness::ABLATION_OPS.iter().zip(&outs) {
                match o {
                    Some(o) => println!("op {op}: final test mse {}", o.manifest.final_test_mse),
                    None => println!("op {op}: diverged"),
                }
            }
        }
        Command::Gradcheck { seeds } => {
            let mut ok = true;
            for r in run_grad_suite(seeds)? {
                let pass = r.max_rel_err < GRAD_TOL;
                ok &= pass;
                println!(
                    "{:<18} max rel err {:.3e} over {} params: {}",
                    r.name,
                    r.max_rel_err,
                    r.checked,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            if !ok {
                return Err(autoroute::error::Error::Numeric(
                    "gradient check failed".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
