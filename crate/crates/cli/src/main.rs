use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semgan::ablation::{check_order, evaluation_segmenters, run_ablation, summarize, table_csv, table_text};
use semgan::config::{RunConfig, Variant};
use semgan::data::{generate_toy_domains, load_dataset, read_image, write_image, AugmentMode, ToyWorldCfg};
use semgan::eval::{evaluate_translation, Evaluator};
use semgan::models::{IdentityTranslator, Translate};
use semgan::taxonomy::ClassTaxonomy;
use semgan::train::{load_segmenter, save_segmenter, train, train_segmenter, SegTrainConfig, TrainState};
use semgan::types::{Direction, Domain};
use semgan::Error;

/// Exit status for failures caused by the user's input.
const USAGE: u8 = 2;
/// Exit status for failures while running an experiment.
const RUNTIME: u8 = 1;

#[derive(Parser)]
#[command(name = "semgan", version, about = "Semantically consistent unpaired image translation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Ab,
    Ba,
}

impl From<Dir> for Direction {
    fn from(d: Dir) -> Self {
        match d {
            Dir::Ab => Direction::AB,
            Dir::Ba => Direction::BA,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    A,
    B,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural two-domain toy dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Swap the colors of sky and blob-1 between the domains.
        #[arg(long, value_enum, default_value = "on")]
        ambiguity: OnOff,
        /// Side of the square images.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Samples per split as train,val,test.
        #[arg(long, default_value = "200,20,40")]
        counts: String,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the full model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the latest checkpoint of the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Translate every PNG of a directory with a trained generator.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input_dir: PathBuf,
        #[arg(long, value_enum)]
        direction: Dir,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score translated images with a frozen target-domain segmenter.
    Evaluate {
        /// Training checkpoint, or `identity` to skip translation.
        #[arg(long)]
        ckpt: String,
        /// Segmenter checkpoint, or `gt-echo` to predict the ground truth.
        #[arg(long)]
        eval_segmenter: String,
        /// Source-domain directory with images/ and masks/.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        direction: Dir,
        /// Class table; defaults to the nearest taxonomy.csv above the dataset.
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        /// Center-crop side; defaults to the checkpoint's training crop.
        #[arg(long)]
        crop: Option<usize>,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the cycle, seg and seg_sm variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "cycle,seg,seg_sm")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Exit 0 only if mIoU(seg_sm) >= mIoU(seg) >= mIoU(cycle) per direction.
        #[arg(long)]
        check_order: bool,
        /// Output directory; defaults to the configured run_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a standalone segmenter on one domain (for evaluation).
    TrainSegmenter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        domain: DomainArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_usage() { USAGE } else { RUNTIME },
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: USAGE,
        msg: msg.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: RUNTIME,
        msg: format!("{}: {e}", path.display()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::GenData {
            out,
            preset: Preset::Toy,
            seed,
            ambiguity,
            size,
            counts,
            force,
        } => {
            let parts: Vec<usize> = counts
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()
                .map_err(|_| usage(format!("--counts must be three integers, got `{counts}`")))?;
            let [tr, va, te] = parts[..] else {
                return Err(usage(format!("--counts must be three integers, got `{counts}`")));
            };
            let cfg = ToyWorldCfg {
                size,
                counts: (tr, va, te),
                seed,
                ambiguity: matches!(ambiguity, OnOff::On),
                ..Default::default()
            };
            let (a, b) = generate_toy_domains(&cfg, &out, force)?;
            println!(
                "wrote {} samples per domain to {} (A: {}/{}/{}, B: {}/{}/{})",
                tr + va + te,
                out.display(),
                a.train.len(),
                a.val.len(),
                a.test.len(),
                b.train.len(),
                b.val.len(),
                b.test.len()
            );
            Ok(())
        }
        Cmd::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let run_dir = cfg
                .run_dir
                .clone()
                .ok_or_else(|| usage("`run_dir` is not set in the config"))?;
            if resume && semgan::train::latest_checkpoint(&run_dir)?.is_none() {
                return Err(usage(format!("nothing to resume in {}", run_dir.display())));
            }
            let data = cfg.load_data()?;
            let tc = cfg.resolved(data.taxonomy.num_classes())?;
            std::fs::create_dir_all(&run_dir).map_err(|e| io_err(&run_dir, e))?;
            if !resume {
                let snapshot = run_dir.join("config.txt");
                if snapshot.exists() {
                    return Err(usage(format!("{} already holds a run; use --resume", run_dir.display())));
                }
                std::fs::write(&snapshot, cfg.to_text()).map_err(|e| io_err(&snapshot, e))?;
            }
            let summary = train(&tc, &data, &run_dir, resume)?;
            println!(
                "trained {} epochs ({} steps, {} skipped) into {}",
                summary.epochs,
                summary.steps,
                summary.skipped_steps,
                run_dir.display()
            );
            for (name, r) in [("A->B", &summary.test_ab), ("B->A", &summary.test_ba)] {
                if let Some(r) = r {
                    println!("test {name}: mIoU {:.1}, overall acc {:.1}", r.miou, r.overall_acc);
                }
            }
            Ok(())
        }
        Cmd::Translate {
            ckpt,
            input_dir,
            direction,
            out,
        } => {
            if !ckpt.is_file() {
                return Err(usage(format!("checkpoint {} not found", ckpt.display())));
            }
            let mut inputs: Vec<PathBuf> = std::fs::read_dir(&input_dir)
                .map_err(|e| usage(format!("{}: {e}", input_dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().and_then(|x| x.to_str()) == Some("png"))
                .collect();
            inputs.sort();
            let (g, _) = TrainState::load_generator(&ckpt, direction.into())?;
            std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            for p in &inputs {
                let img = read_image(p)?;
                let name = p.file_name().expect("listed files have names");
                write_image(&out.join(name), &g.translate(&img)?)?;
            }
            println!("translated {} images into {}", inputs.len(), out.display());
            Ok(())
        }
        Cmd::Evaluate {
            ckpt,
            eval_segmenter,
            dataset,
            direction,
            taxonomy,
            crop,
            out,
        } => {
            let direction: Direction = direction.into();
            let tax_path = match taxonomy {
                Some(p) => p,
                None => dataset
                    .ancestors()
                    .map(|d| d.join("taxonomy.csv"))
                    .find(|p| p.is_file())
                    .ok_or_else(|| usage("no taxonomy.csv found above the dataset; pass --taxonomy"))?,
            };
            let tax = ClassTaxonomy::load(&tax_path)?;
            let ds = load_dataset(&dataset, &tax, direction.source())?;
            let (generator, train_crop): (Box<dyn Translate>, Option<usize>) = if ckpt == "identity" {
                (Box::new(IdentityTranslator), None)
            } else {
                let path = PathBuf::from(&ckpt);
                if !path.is_file() {
                    return Err(usage(format!("checkpoint {ckpt} not found")));
                }
                let (g, cfg) = TrainState::load_generator(&path, direction)?;
                (Box::new(g), Some(cfg.crop))
            };
            let seg_holder;
            let evaluator = if eval_segmenter == "gt-echo" {
                Evaluator::GroundTruthEcho
            } else {
                let (seg, names) = load_segmenter(Path::new(&eval_segmenter))?;
                if names != tax.names() {
                    return Err(usage(format!(
                        "segmenter classes {names:?} do not match taxonomy {:?}",
                        tax.names()
                    )));
                }
                seg_holder = seg;
                Evaluator::Network(&seg_holder)
            };
            let mut rng = rand_free_rng();
            let samples = ds
                .load_all()?
                .into_iter()
                .map(|s| match crop.or(train_crop) {
                    Some(c) => semgan::data::augment(&s, AugmentMode::Eval, c, false, &mut rng),
                    None => Ok(s),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let report = evaluate_translation(generator.as_ref(), &evaluator, samples, &tax)?;
            let json = report.to_json()?;
            if let Some(p) = out {
                std::fs::write(&p, &json).map_err(|e| io_err(&p, e))?;
            }
            eprint!("{}", report.table());
            println!("{json}");
            Ok(())
        }
        Cmd::Ablate {
            config,
            variants,
            seeds,
            check_order: check,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let variants: Vec<Variant> = variants.iter().map(|v| v.parse()).collect::<Result<_, _>>()?;
            if seeds == 0 {
                return Err(usage("--seeds must be >= 1"));
            }
            let out = out
                .or_else(|| cfg.run_dir.clone())
                .ok_or_else(|| usage("pass --out or set run_dir in the config"))?;
            let data = cfg.load_data()?;
            for v in &variants {
                RunConfig {
                    variant: Some(*v),
                    ..cfg.clone()
                }
                .resolved(data.taxonomy.num_classes())?;
            }
            let (eval_a, eval_b) = evaluation_segmenters(&cfg, &data, &out.join("eval_segmenters"))?;
            let runs = run_ablation(&cfg, &data, &variants, seeds, &eval_a, &eval_b, &out)?;
            let rows = summarize(&runs);
            let text = table_text(&rows);
            print!("{text}");
            for (name, body) in [("ablation.txt", text), ("ablation.csv", table_csv(&rows))] {
                let p = out.join(name);
                std::fs::write(&p, body).map_err(|e| io_err(&p, e))?;
            }
            let runs_json = out.join("ablation_runs.json");
            std::fs::write(&runs_json, serde_json::to_string_pretty(&runs).expect("serializable"))
                .map_err(|e| io_err(&runs_json, e))?;
            if let Some(r) = runs.iter().find(|r| r.error.is_some()) {
                return Err(Failure {
                    code: RUNTIME,
                    msg: format!(
                        "{} seed {} failed: {}",
                        r.variant,
                        r.seed,
                        r.error.as_deref().unwrap_or("")
                    ),
                });
            }
            if check {
                if check_order(&rows) {
                    println!("ordering holds: seg_sm >= seg >= cycle");
                } else {
                    return Err(Failure {
                        code: RUNTIME,
                        msg: "ordering seg_sm >= seg >= cycle does not hold".into(),
                    });
                }
            }
            Ok(())
        }
        Cmd::TrainSegmenter {
            config,
            domain,
            out,
            epochs,
        } => {
            let cfg = RunConfig::load(&config)?;
            let data = cfg.load_data()?;
            let tc = cfg.resolved(data.taxonomy.num_classes())?;
            let scfg = SegTrainConfig {
                epochs: epochs.unwrap_or(cfg.eval_segmenter_epochs),
                batch_size: tc.batch_size.max(4),
                lr: semgan::train::SEG_PRETRAIN_LR,
                crop: tc.crop,
                flip: tc.flip,
                seed: tc.seed,
                segmenter: tc.segmenter,
            };
            let domain = match domain {
                DomainArg::A => Domain::A,
                DomainArg::B => Domain::B,
            };
            let (train_set, val) = match domain {
                Domain::A => (&data.train_a, &data.val_a),
                Domain::B => (&data.train_b, &data.val_b),
            };
            let (seg, report) = train_segmenter(&scfg, train_set, val, &data.taxonomy)?;
            save_segmenter(&out, &seg, &data.taxonomy)?;
            if let Some(r) = report {
                print!("{}", r.table());
            }
            println!("saved segmenter for domain {} to {}", domain.as_str(), out.display());
            Ok(())
        }
    }
}

/// Center crops draw nothing from the generator; any seeded rng will do.
fn rand_free_rng() -> rand::rngs::StdRng {
    rand::SeedableRng::seed_from_u64(0)
}
