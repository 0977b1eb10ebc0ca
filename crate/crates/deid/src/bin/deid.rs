//! Experiment driver. Usage:
//!   deid <subcommand> [--run-dir=DIR] [--config=FILE] [--key=value ...]
//!
//! Subcommands: gen-corpus, train-reid, train-mfm, train-deid,
//! train-baseline, protect, attack, evaluate, sweep, pipeline.
//! Every config key can be overridden with --key=value; --seed is mandatory
//! for pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use deid::config::ExperimentConfig;
use deid::corpusio::write_pgm;
use deid::error::{DeidError, Result};
use deid::evalharness::{evaluate_protector, Protector};
use deid::pipeline::{ensure_stack, run_pipeline, run_sweep, OursProtector, RunDir};
use deid::reid::{Arch, Gallery};
use deid::synthgen::Split;
use numcore::Rng;

const USAGE: &str = "usage: deid <gen-corpus|train-reid|train-mfm|train-deid|train-baseline|\
protect|attack|evaluate|sweep|pipeline> [--run-dir=DIR] [--config=FILE] [--key=value ...]";

struct Cli {
    command: String,
    run_dir: PathBuf,
    config: ExperimentConfig,
    seed_given: bool,
}

fn parse_cli(args: &[String]) -> Result<Cli> {
    let command = args
        .first()
        .ok_or_else(|| DeidError::Config(USAGE.into()))?
        .clone();
    let mut run_dir = PathBuf::from("run");
    let mut config_file: Option<PathBuf> = None;
    let mut overrides = Vec::new();
    let mut seed_given = false;
    for arg in &args[1..] {
        if let Some(v) = arg.strip_prefix("--run-dir=") {
            run_dir = PathBuf::from(v);
        } else if let Some(v) = arg.strip_prefix("--config=") {
            config_file = Some(PathBuf::from(v));
        } else {
            if arg.starts_with("--seed=") {
                seed_given = true;
            }
            overrides.push(arg.clone());
        }
    }
    let mut config = ExperimentConfig::default();
    if let Some(path) = config_file {
        config.apply_file(&path)?;
    }
    // Command-line overrides win over the config file.
    config.apply_overrides(&overrides)?;
    config.validate()?;
    Ok(Cli { command, run_dir, config, seed_given })
}

fn print_point(p: &deid::evalharness::TradeoffPoint) {
    println!(
        "{:<16} strength={:<6} cmc_r1={:.3} id_r={:.3} auroc={:.3} dice={:.3} bpp={:.4}",
        p.protector, p.strength, p.cmc_r1, p.id_r, p.auroc, p.dice, p.bpp_total
    );
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = &cli.config;
    let run = RunDir::new(&cli.run_dir)?;
    run.init(cfg)?;
    let base = Rng::new(cfg.seed);
    match cli.command.as_str() {
        "gen-corpus" => {
            let corpus = run.ensure_corpus(cfg, &base)?;
            println!(
                "corpus: {} samples, {} patients ({} train / {} val / {} test)",
                corpus.samples.len(),
                corpus.n_patients,
                corpus.train_patients.len(),
                corpus.val_patients.len(),
                corpus.test_patients.len()
            );
        }
        "train-reid" => {
            let corpus = run.ensure_corpus(cfg, &base)?;
            for arch in [Arch::ConvA, Arch::ConvB] {
                run.ensure_reid(cfg, &corpus, arch, &base)?;
                println!("attacker {} ready", arch.tag());
            }
        }
        "train-mfm" => {
            let corpus = run.ensure_corpus(cfg, &base)?;
            run.ensure_mfm(cfg, &corpus, &base)?;
            println!("feature extractor ready");
        }
        "train-deid" => {
            let corpus = run.ensure_corpus(cfg, &base)?;
            let reid_a = run.ensure_reid(cfg, &corpus, Arch::ConvA, &base)?;
            let mfm = run.ensure_mfm(cfg, &corpus, &base)?;
            run.ensure_deid(cfg, &corpus, &reid_a, &mfm, &base)?;
            println!("codec and generator ready");
        }
        "train-baseline" => {
            let corpus = run.ensure_corpus(cfg, &base)?;
            let reid_a = run.ensure_reid(cfg, &corpus, Arch::ConvA, &base)?;
            let mfm = run.ensure_mfm(cfg, &corpus, &base)?;
            run.ensure_autoencoder(cfg, &corpus, &base)?;
            for &lambda in &cfg.id_adv_grid {
                run.ensure_adv_generator(cfg, &corpus, &reid_a, &mfm, lambda, false, &base)?;
            }
            for &lambda in &cfg.privacy_net_grid {
                run.ensure_adv_generator(cfg, &corpus, &reid_a, &mfm, lambda, true, &base)?;
            }
            println!("baseline protectors ready");
        }
        "protect" => {
            let stack = ensure_stack(&run, cfg)?;
            let protector = OursProtector {
                system: &stack.system,
                reid_a: &stack.reid_a,
                mfm: &stack.mfm,
                rho: cfg.rho,
                no_sem: cfg.no_sem,
                no_id_blocking: cfg.no_id_blocking,
                no_code_space: cfg.no_code_space,
            };
            let out_dir = cli.run_dir.join("protected").join(format!("ours_{}", cfg.rho));
            std::fs::create_dir_all(&out_dir)?;
            let mut rng = base.derive(0xC0DE);
            let mut provenance = String::new();
            for s in stack.corpus.split_samples(Split::Test) {
                let out = protector.protect(s, &mut rng)?;
                write_pgm(&out_dir.join(format!("sample_{:05}.pgm", s.sample_id)), &out.image)?;
                provenance.push_str(&format!(
                    "{}\n",
                    serde_json::json!({
                        "sample_id": s.sample_id,
                        "rho": cfg.rho,
                        "generator": match cfg.generator {
                            deid::config::GeneratorKind::Diffusion => "diffusion",
                            deid::config::GeneratorKind::Decoder => "decoder",
                        },
                        "seed": cfg.seed,
                    })
                ));
            }
            std::fs::write(out_dir.join("provenance.jsonl"), provenance)?;
            println!("protected test set written to {}", out_dir.display());
        }
        "attack" | "evaluate" => {
            let stack = ensure_stack(&run, cfg)?;
            let test = stack.corpus.split_samples(Split::Test);
            let gallery = Gallery::build(&stack.reid_b, &test);
            let protector = OursProtector {
                system: &stack.system,
                reid_a: &stack.reid_a,
                mfm: &stack.mfm,
                rho: cfg.rho,
                no_sem: cfg.no_sem,
                no_id_blocking: cfg.no_id_blocking,
                no_code_space: cfg.no_code_space,
            };
            let mut rng = base.derive(0xA77AC);
            if cli.command == "evaluate" {
                let original = evaluate_protector(
                    &deid::evalharness::OriginalProtector,
                    &test,
                    &stack.reid_b,
                    &gallery,
                    stack.threshold,
                    &stack.downstream,
                    None,
                    &mut rng,
                )?;
                print_point(&original);
            }
            let point = evaluate_protector(
                &protector,
                &test,
                &stack.reid_b,
                &gallery,
                stack.threshold,
                &stack.downstream,
                None,
                &mut rng,
            )?;
            print_point(&point);
        }
        "sweep" => {
            let points = run_sweep(&run, cfg)?;
            for p in &points {
                print_point(p);
            }
            println!("CSV written to {}", cli.run_dir.join("tradeoff.csv").display());
        }
        "pipeline" => {
            if !cli.seed_given {
                return Err(DeidError::Config(
                    "pipeline requires an explicit --seed=<u64>".into(),
                ));
            }
            let points = run_pipeline(&run, cfg)?;
            for p in &points {
                print_point(p);
            }
            println!("pipeline complete: {}", cli.run_dir.display());
        }
        other => {
            return Err(DeidError::Config(format!("unknown subcommand '{other}'\n{USAGE}")));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_cli(&args) {
        Ok(cli) => cli,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
