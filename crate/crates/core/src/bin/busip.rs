use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use busip::ablation::run_grid;
use busip::eval::{class_contributions, evaluate, explanations};
use busip::imageio::{read_gray, write_dump};
use busip::model::RunConfig;
use busip::morlet::{make_filterbank, BankManifest, FilterBank, FilterBankConfig};
use busip::scattering::{scatter, ScatterOrder};
use busip::synthdata::{gen_synthetic, load_dataset, SyntheticConfig};
use busip::train::{load_model, train};
use busip::{Error, Result};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "busip", version, about = "Scattering part-based SAR target recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob-scatterer dataset.
    GenSynthetic {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        /// Extra images per class listed in a `test` split.
        #[arg(long, default_value_t = 0)]
        test_per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_speckle: bool,
        #[arg(long)]
        force: bool,
    },
    /// Train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Manifest split (`train` or `test`); all images when omitted.
        #[arg(long)]
        split: Option<String>,
        /// Include per-image logits and part contributions.
        #[arg(long)]
        explain: bool,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the module and loss ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Overlay the part map of one image; the summary JSON goes next to the PNG.
    VisualizeParts {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the scattering coefficients of one image.
    ExtractScattering {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        order: u8,
    },
    /// Write a filter bank manifest and kernel dump, default or from a checkpoint.
    ExportBank {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        scales: usize,
        #[arg(long, default_value_t = 4)]
        orientations: usize,
    },
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text)
}

fn emit(out: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenSynthetic { classes, per_class, test_per_class, size, seed, out, no_speckle, force } => {
            let cfg = SyntheticConfig { classes, per_class, test_per_class, size, seed, speckle: !no_speckle };
            let m = gen_synthetic(&cfg, &out, force)?;
            let images = m.classes.len() * (per_class + test_per_class);
            emit(None, &json!({ "out": out, "classes": m.classes, "images": images }))
        }
        Command::Train { config } => {
            let run = read_config(&config)?;
            let report = train(&run)?;
            emit(
                None,
                &json!({
                    "checkpoint": run.output,
                    "epochs": report.epochs.len(),
                    "final_total_loss": report.final_total(),
                    "eval_accuracy": report.final_eval_accuracy(),
                    "warnings": report.warnings,
                }),
            )
        }
        Command::Eval { ckpt, data, split, explain, out } => {
            let (model, state) = load_model(&ckpt)?;
            let ds = load_dataset(&data, split.as_deref(), Some(model.config().image_size))?;
            let (report, preds) = evaluate(&model, &state.classes, &ds, state.config.optim.batch_size)?;
            let mut value = serde_json::to_value(&report)?;
            if explain {
                let ex = explanations(&ds, &preds);
                value["class_contributions"] = serde_json::to_value(class_contributions(&state.classes, &ex))?;
                value["images"] = serde_json::to_value(ex)?;
            }
            emit(out.as_deref(), &value)
        }
        Command::Ablate { config, out } => {
            let base = read_config(&config)?;
            let results = run_grid(&base, &out)?;
            emit(None, &json!({ "csv": out, "runs": results.len() }))
        }
        Command::VisualizeParts { ckpt, image, out } => {
            let (model, state) = load_model(&ckpt)?;
            let img = read_gray(&image)?;
            let summary = busip::visualize::visualize(&model, &state.classes, &img, &out)?;
            let value = serde_json::to_value(&summary)?;
            emit(Some(&out.with_extension("json")), &value)?;
            emit(None, &value)
        }
        Command::ExtractScattering { image, bank, out, order } => {
            let order = ScatterOrder::try_from(order)?;
            let text = fs::read_to_string(&bank).map_err(|e| Error::Config(format!("{}: {e}", bank.display())))?;
            let manifest: BankManifest = serde_json::from_str(&text)?;
            let bank = FilterBank::from_manifest(&manifest)?;
            let img = read_gray(&image)?;
            let map = scatter(&img, &bank, order)?;
            let cs = map.channels();
            let mut values = Vec::with_capacity(cs * map.height * map.width);
            for c in 0..cs {
                values.extend(map.channel(c).data.iter().map(|&v| v as f32));
            }
            let shape = [cs, map.height, map.width];
            write_dump(&out, &shape, &values)?;
            emit(None, &json!({ "out": out, "shape": shape }))
        }
        Command::ExportBank { out, ckpt, scales, orientations } => {
            let bank = match ckpt {
                Some(dir) => {
                    let (model, _) = load_model(&dir)?;
                    model
                        .lsp()
                        .ok_or_else(|| Error::Config("checkpoint has no scattering front-end".into()))?
                        .filter_bank()?
                }
                None => make_filterbank(&FilterBankConfig { scales, orientations, ..FilterBankConfig::default() })?,
            };
            fs::create_dir_all(&out)?;
            fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&bank.manifest())?)?;
            let (shape, values) = bank.dump_tensor();
            write_dump(&out.join("bank.dump"), &shape, &values)?;
            emit(None, &json!({ "manifest": out.join("manifest.json"), "dump": out.join("bank.dump"), "shape": shape }))
        }
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            return fail("usage", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
