use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::Device;
use clap::{Parser, Subcommand};
use slotswap::data::{build_dataset, load_manifest, SpriteConfig};
use slotswap::eval::{evaluate, export_embeddings, render_grid, EvalOptions, Role};
use slotswap::pixels::{self, Pixels};
use slotswap::slots::{multiplex_translate, transfer_domain, transfer_instance, Edit, EditSource};
use slotswap::train::{load_checkpoint, resolve_checkpoint, run_training, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "slotswap", version, about = "Attribute transfer by swapping latent slots")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a sprite dataset: `count` images per attribute combination.
    MakeDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train (or resume) a model on a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Overrides the config's iteration count.
        #[arg(long)]
        iterations: Option<u64>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Domain-level translation to an attribute value.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long)]
        value: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instance-level transfer of one attribute from a reference image.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Several edits at once: `--edit color=blue --edit shape@ref.png`.
    Multiplex {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "edit", required = true)]
        edits: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grade a checkpoint and write a JSON report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export 2-D projections of one attribute's slots as CSV.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        attr: String,
        #[arg(long)]
        out: PathBuf,
        /// Maximum number of real images.
        #[arg(long, default_value_t = 1000)]
        limit: usize,
        /// Skip slots of translated images.
        #[arg(long)]
        real_only: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Bordered source / reference / result panel.
    Grid {
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "ref")]
        reference: Vec<PathBuf>,
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A bad invocation detected by the binary itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    Ok(())
}

fn require_path(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(usage(format!("{} does not exist", path.display())));
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Checkpoint> {
    require_path(path)?;
    Ok(load_checkpoint(&resolve_checkpoint(path)?, &Device::Cpu)?)
}

fn load_input(ckpt: &Checkpoint, path: &Path) -> anyhow::Result<candle_core::Tensor> {
    require_file(path)?;
    let img = Pixels::load_png(path)?;
    let want = ckpt.models.config().input_size;
    if img.size() != want {
        return Err(usage(format!(
            "{} is {}x{} but the model takes {want}x{want}",
            path.display(),
            img.size(),
            img.size()
        )));
    }
    Ok(pixels::to_tensor(&[&img], ckpt.models.dtype(), ckpt.models.device())?)
}

fn save_output(t: &candle_core::Tensor, out: &Path) -> anyhow::Result<()> {
    let imgs = pixels::from_tensor(t)?;
    imgs[0].save_png(out)?;
    Ok(())
}

fn parse_edit(ckpt: &Checkpoint, spec: &str) -> anyhow::Result<Edit> {
    let schema = &ckpt.schema;
    if let Some((attr, value)) = spec.split_once('=') {
        let idx = schema.value_index(attr, value)?;
        Ok(Edit {
            attr: idx.attr,
            source: EditSource::Value(idx.value),
        })
    } else if let Some((attr, path)) = spec.split_once('@') {
        let attr = schema.attr_index(attr)?;
        Ok(Edit {
            attr,
            source: EditSource::Reference(load_input(ckpt, Path::new(path))?),
        })
    } else {
        Err(usage(format!("edit `{spec}` is neither attr=value nor attr@image.png")))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeDataset { config, count, out, seed } => {
            require_file(&config)?;
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut cfg: SpriteConfig =
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", config.display())))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let manifest = build_dataset(&cfg, count, &out)?;
            println!("wrote {} images to {}", manifest.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            iterations,
            seed,
        } => {
            require_file(&config)?;
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            require_path(&data)?;
            let manifest = load_manifest(&data)?;
            let summary = run_training(&cfg, &manifest, &out, resume, &Device::Cpu)?;
            println!(
                "trained iterations {}..{}; latest checkpoint {}",
                summary.start_iteration,
                summary.final_iteration,
                summary.latest.display()
            );
        }
        Command::Translate {
            ckpt,
            input,
            attr,
            value,
            out,
        } => {
            let c = load_model(&ckpt)?;
            let idx = c.schema.value_index(&attr, &value)?;
            let x = load_input(&c, &input)?;
            save_output(&transfer_domain(&c.models, &c.registry, &x, idx)?, &out)?;
        }
        Command::Transfer {
            ckpt,
            input,
            reference,
            attr,
            out,
        } => {
            let c = load_model(&ckpt)?;
            let a = c.schema.attr_index(&attr)?;
            let x = load_input(&c, &input)?;
            let r = load_input(&c, &reference)?;
            save_output(&transfer_instance(&c.models, &x, &r, a)?.x_trans, &out)?;
        }
        Command::Multiplex { ckpt, input, edits, out } => {
            let c = load_model(&ckpt)?;
            let x = load_input(&c, &input)?;
            let edits: Vec<Edit> = edits.iter().map(|e| parse_edit(&c, e)).collect::<anyhow::Result<_>>()?;
            save_output(&multiplex_translate(&c.models, &c.registry, &x, &edits)?, &out)?;
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            samples,
            seed,
        } => {
            if samples == 0 {
                bail!(usage("--samples must be at least 1"));
            }
            let c = load_model(&ckpt)?;
            require_path(&data)?;
            let manifest = load_manifest(&data)?;
            if *manifest.schema() != c.schema {
                return Err(slotswap::Error::SchemaMismatch("dataset and checkpoint schemas differ".into()).into());
            }
            let report = evaluate(
                &c.models,
                &c.registry,
                &manifest,
                c.iteration,
                EvalOptions {
                    samples,
                    seed,
                    ..EvalOptions::default()
                },
            )?;
            let json = serde_json::to_string_pretty(&report)?;
            std::fs::write(&out, json + "\n").with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Embed {
            ckpt,
            data,
            attr,
            out,
            limit,
            real_only,
            seed,
        } => {
            let c = load_model(&ckpt)?;
            require_path(&data)?;
            let manifest = load_manifest(&data)?;
            c.schema.attr_index(&attr)?;
            let registry = (!real_only).then_some(&c.registry);
            let report = export_embeddings(&c.models, registry, &manifest, &attr, limit, seed, Some(&out))?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Grid {
            src,
            reference,
            result,
            out,
        } => {
            let mut paths = vec![src];
            paths.extend(reference);
            paths.push(result);
            for p in &paths {
                require_file(p)?;
            }
            let row: Vec<Pixels> = paths.iter().map(|p| Pixels::load_png(p)).collect::<Result<_, _>>()?;
            render_grid(&[row], &Role::default_columns(paths.len()), &out)?;
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<slotswap::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SLOTSWAP_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
