use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use robodata_core::align::ProfileRegistry;
use robodata_core::loss::{bundle::read_bundle, total_loss, LossWeights, VoxelSelection};
use robodata_core::pipeline::{build_occupancy, convert_dataset, ConvertOptions};
use robodata_core::store::{self, read_episode, ImageSize, Manifest};
use robodata_core::tokens::{build_layout, build_mask, dump_text, subset_layout, ModalitySubset};

/// Exit code when the command ran but found failed episodes or violations.
const EXIT_FINDINGS: u8 = 2;

#[derive(Parser)]
#[command(name = "robodata", version, about = "Convert, validate and inspect canonical manipulation episodes")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Extra profile files, separated like PATH.
    #[arg(long, env = "ROBODATA_PROFILE_PATH", global = true, hide_env_values = true)]
    profile_path: Option<std::ffi::OsString>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a native dataset directory into the canonical store.
    Convert {
        /// Dataset profile name (case-insensitive).
        #[arg(long)]
        dataset: String,
        /// JSON file with one or more extra profiles.
        #[arg(long)]
        profile_file: Vec<PathBuf>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Stored image size as HxW.
        #[arg(long, default_value = "256x256")]
        image_size: ImageSize,
    },
    /// Check every episode in a store; exits 2 if anything is wrong.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Episode counts per task verb.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
        /// Print an aligned text table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Build voxel occupancy grids from stored depth images.
    Occupancy {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid resolution as LxBxP.
        #[arg(long, default_value = "100x100x100")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Dump the token layout and attention mask.
    Mask {
        #[arg(long)]
        timesteps: usize,
        /// Text length per timestep; a single value applies to all.
        #[arg(long, value_delimiter = ',', required = true)]
        text_lens: Vec<usize>,
        /// Read-out groups to drop (simg, gimg, occ).
        #[arg(long, default_value = "")]
        disable: String,
    },
    /// Evaluate the training loss on a prediction bundle.
    Loss {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        lambda_image: Option<f64>,
        #[arg(long)]
        lambda_occ: Option<f64>,
        #[arg(long)]
        lambda_gripper: Option<f64>,
        #[arg(long)]
        lambda_rgb: Option<f64>,
        #[arg(long, value_enum, default_value_t = Selection::Union)]
        selection: Selection,
    },
    /// List the known dataset profiles.
    Profiles,
}

#[derive(Clone, Copy, ValueEnum)]
enum Selection {
    Union,
    Target,
    All,
}

impl From<Selection> for VoxelSelection {
    fn from(s: Selection) -> Self {
        match s {
            Selection::Union => VoxelSelection::Union,
            Selection::Target => VoxelSelection::TargetOccupied,
            Selection::All => VoxelSelection::All,
        }
    }
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn registry(profile_path: Option<&std::ffi::OsStr>, files: &[PathBuf]) -> Result<ProfileRegistry> {
    let mut reg = ProfileRegistry::builtin();
    let from_env: Vec<PathBuf> = profile_path
        .map(|p| std::env::split_paths(p).filter(|p| !p.as_os_str().is_empty()).collect())
        .unwrap_or_default();
    for f in from_env.iter().chain(files) {
        let n = reg
            .load_file(f)
            .with_context(|| format!("loading profiles from {}", f.display()))?;
        log::info!("loaded {n} profile(s) from {}", f.display());
    }
    Ok(reg)
}

fn parse_grid(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let dims: Option<Vec<usize>> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().ok().filter(|n| *n > 0))
        .collect();
    match dims.as_deref() {
        Some([l, b, p]) => Ok([*l, *b, *p]),
        _ => bail!("--grid must be LxBxP with positive integers, got {s:?}"),
    }
}

fn cmd_convert(
    reg: &ProfileRegistry,
    dataset: &str,
    input: &Path,
    out: &Path,
    jobs: usize,
    image_size: ImageSize,
) -> Result<ExitCode> {
    let profile = reg.get(dataset)?;
    if !input.is_dir() {
        bail!("input directory {} does not exist", input.display());
    }
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let summary = convert_dataset(input, out, profile, ConvertOptions { jobs, image_size })?;
    for s in &summary.skipped {
        eprintln!("skipped {}: {}", s.source, s.reason);
    }
    print_json(&summary);
    Ok(if summary.skipped.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FINDINGS)
    })
}

fn cmd_validate(input: &Path) -> Result<ExitCode> {
    let manifest = Manifest::read(input)?;
    let mut problems: Vec<serde_json::Value> = Vec::new();
    for p in manifest.check_contents(input)? {
        eprintln!("{p}");
        problems.push(json!({"episode": null, "step": null, "kind": "manifest", "detail": p}));
    }
    for entry in &manifest.episodes {
        match read_episode(&input.join(&entry.id)) {
            Ok(ep) => {
                if ep.steps.len() != entry.steps {
                    let detail = format!(
                        "manifest lists {} steps, episode has {}",
                        entry.steps,
                        ep.steps.len()
                    );
                    eprintln!("{}: {detail}", entry.id);
                    problems.push(json!({"episode": entry.id, "step": null, "kind": "manifest", "detail": detail}));
                }
                for v in store::validate(&ep, manifest.image_size) {
                    eprintln!("{v}");
                    problems.push(serde_json::to_value(&v).expect("serializable"));
                }
            }
            Err(e) => {
                eprintln!("{}: {e}", entry.id);
                problems.push(json!({"episode": entry.id, "step": null, "kind": "unreadable", "detail": e.to_string()}));
            }
        }
    }
    eprintln!("{} violations", problems.len());
    print_json(&json!({
        "episodes": manifest.episodes.len(),
        "violations": problems,
    }));
    Ok(if problems.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FINDINGS)
    })
}

fn cmd_stats(input: &Path, table: bool) -> Result<ExitCode> {
    let manifest = Manifest::read(input)?;
    let counts = store::stats(&manifest);
    if table {
        let width = counts.iter().map(|c| c.verb.len()).max().unwrap_or(4).max(4);
        println!("{:<width$}  episodes", "task");
        for c in &counts {
            println!("{:<width$}  {}", c.verb, c.count);
        }
    } else {
        print_json(&json!({ "episodes": manifest.episodes.len(), "tasks": counts }));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_occupancy(input: &Path, out: &Path, grid: &str, jobs: usize) -> Result<ExitCode> {
    let dims = parse_grid(grid)?;
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let summary = build_occupancy(input, out, dims, jobs)?;
    for s in &summary.skipped {
        eprintln!("skipped {}: {}", s.source, s.reason);
    }
    print_json(&summary);
    Ok(ExitCode::SUCCESS)
}

fn cmd_mask(timesteps: usize, text_lens: &[usize], disable: &str) -> Result<ExitCode> {
    if timesteps == 0 {
        bail!("--timesteps must be at least 1");
    }
    let lens = match text_lens {
        [l] => vec![*l; timesteps],
        ls if ls.len() == timesteps => ls.to_vec(),
        ls => bail!("{} text lengths given for {timesteps} timesteps", ls.len()),
    };
    let subset = ModalitySubset::disabling(disable)?;
    let layout = build_layout(&lens)?;
    let (layout, mask) = if subset == ModalitySubset::ALL {
        let mask = build_mask(&layout);
        (layout, mask)
    } else {
        subset_layout(&layout, &subset)
    };
    print!("{}", dump_text(&layout, &mask));
    Ok(ExitCode::SUCCESS)
}

fn cmd_loss(
    bundle: &Path,
    weights: LossWeights,
    selection: VoxelSelection,
) -> Result<ExitCode> {
    let f = File::open(bundle).with_context(|| format!("opening {}", bundle.display()))?;
    let b = read_bundle(BufReader::new(f)).with_context(|| format!("reading {}", bundle.display()))?;
    let breakdown = total_loss(&b, &weights, selection)?;
    if breakdown.clamped_gripper_probs > 0 {
        log::warn!(
            "{} gripper probabilities clamped away from 0/1",
            breakdown.clamped_gripper_probs
        );
    }
    print_json(&breakdown);
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let profile_path = cli.profile_path.as_deref();
    match cli.command {
        Command::Convert {
            dataset,
            profile_file,
            input,
            out,
            jobs,
            image_size,
        } => {
            let reg = registry(profile_path, &profile_file)?;
            cmd_convert(&reg, &dataset, &input, &out, jobs, image_size)
        }
        Command::Validate { input } => cmd_validate(&input),
        Command::Stats { input, table } => cmd_stats(&input, table),
        Command::Occupancy {
            input,
            out,
            grid,
            jobs,
        } => cmd_occupancy(&input, &out, &grid, jobs),
        Command::Mask {
            timesteps,
            text_lens,
            disable,
        } => cmd_mask(timesteps, &text_lens, &disable),
        Command::Loss {
            bundle,
            lambda_image,
            lambda_occ,
            lambda_gripper,
            lambda_rgb,
            selection,
        } => {
            let d = LossWeights::default();
            let weights = LossWeights {
                image: lambda_image.unwrap_or(d.image),
                occupancy: lambda_occ.unwrap_or(d.occupancy),
                gripper: lambda_gripper.unwrap_or(d.gripper),
                rgb: lambda_rgb.unwrap_or(d.rgb),
            };
            cmd_loss(&bundle, weights, selection.into())
        }
        Command::Profiles => {
            let reg = registry(profile_path, &[])?;
            print_json(&reg.names());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("RUST_LOG")
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
