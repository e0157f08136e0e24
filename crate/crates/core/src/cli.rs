//! The `slatmorph` command line.
//!
//! Exit status is 0 on success, 1 when a run fails partway and 2 for usage,
//! configuration or input errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::assets::{AssetDescriptor, Family, PoseRecord};
use crate::error::Error;
use crate::export::to_obj;
use crate::flow::{ModelConfig, ToyFlowModel};
use crate::geometry::ColoredVoxelGrid;
use crate::metrics::{evaluate, gaps_csv};
use crate::orientation::{
    estimate_orientation, orientation_stats, Estimator, EulerAngles, JUMP_THRESHOLD,
};
use crate::pipeline::config::MorphFile;
use crate::pipeline::output::{
    find_sequence, list_files, locate_frames, model_config_near, read_slat, read_ssv, run_to_dir,
    RunOptions,
};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MORPH_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "slatmorph",
    version,
    about = "Training-free morphing of sparse-voxel 3D latents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a procedural asset: NAME.ssv, NAME.ctok and NAME.pose.json.
    GenAsset(GenAsset),
    /// Run a morph described by a TOML configuration.
    Morph(Morph),
    /// Smoothness metrics of a frames directory.
    Metrics(Metrics),
    /// Orientation statistics over one or more frames directories.
    AnalyzeOrient(AnalyzeOrient),
    /// Convert a .slat file into a vertex-colored OBJ mesh.
    Export(Export),
}

#[derive(Debug, Args)]
struct GenAsset {
    /// bar, ell, tee, cross or blob.
    #[arg(long)]
    family: Family,
    #[arg(long)]
    out: PathBuf,
    /// File stem; defaults to the family name.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    resolution: Option<u16>,
    #[arg(long)]
    length: Option<u16>,
    #[arg(long)]
    width: Option<u16>,
    #[arg(long)]
    height: Option<u16>,
    /// Yaw in quarter turns.
    #[arg(long, default_value_t = 0)]
    pose: u8,
    #[arg(long, default_value_t = 0)]
    color_seed: u64,
}

#[derive(Debug, Args)]
struct Morph {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue an interrupted run in OUT.
    #[arg(long)]
    resume: bool,
    /// Skip the plain endpoint generations in OUT/reference.
    #[arg(long)]
    no_reference: bool,
}

#[derive(Debug, Args)]
struct Metrics {
    /// A run directory or a directory of .slat frames.
    #[arg(long)]
    frames: PathBuf,
    /// Directory of .slat files used as the FFD reference set.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Write metrics.json and gaps.csv here instead of printing.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeOrient {
    /// Run or frames directories, one sequence each.
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    /// CSV destination; printed when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = JUMP_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct Export {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// A failed command and its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::GenAsset(a) => gen_asset(a),
        Command::Morph(a) => morph(a),
        Command::Metrics(a) => metrics(a),
        Command::AnalyzeOrient(a) => analyze_orient(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::runtime(Error::io(dir, e)))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::runtime(Error::io(path, e)))
}

fn gen_asset(a: GenAsset) -> CliResult {
    let mut d = AssetDescriptor::new(a.family);
    d.resolution = a.resolution.unwrap_or(d.resolution);
    d.length = a.length.unwrap_or(d.length);
    d.width = a.width.unwrap_or(d.width);
    d.height = a.height.unwrap_or(d.height);
    d.pose = a.pose;
    d.color_seed = a.color_seed;
    d.validate().map_err(Failure::usage)?;
    let structure = d.structure().map_err(Failure::usage)?;
    let cond = d
        .condition_tokens(&ModelConfig::default())
        .map_err(Failure::usage)?;
    let pose = serde_json::to_string_pretty(&PoseRecord::of(&d)).expect("pose serializes") + "\n";
    let name = a.name.unwrap_or_else(|| d.family.name().to_string());
    write(
        &a.out.join(format!("{name}.ssv")),
        structure.to_ssv().as_bytes(),
    )?;
    write(&a.out.join(format!("{name}.ctok")), &cond.to_bytes())?;
    write(&a.out.join(format!("{name}.pose.json")), pose.as_bytes())?;
    println!("{name}: {} voxels", structure.len());
    Ok(())
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => {
            s.trim().parse().map(Some).map_err(|_| {
                Failure::usage(format!("{SEED_ENV} is not an unsigned integer: {s:?}"))
            })
        }
        Err(_) => Ok(None),
    }
}

fn morph(a: Morph) -> CliResult {
    let file = MorphFile::read(&a.config)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.config.display())))?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let seed = match a.seed {
        Some(s) => Some(s),
        None => env_seed()?,
    };
    let loaded = file.resolve(base, seed).map_err(Failure::usage)?;
    let model = ToyFlowModel::new(loaded.config.model.clone()).map_err(Failure::usage)?;
    for obj in [
        &loaded.inputs.source,
        &loaded.inputs.ss_target,
        &loaded.inputs.slat_target,
    ] {
        model
            .check_conditions(&obj.cond)
            .map_err(|e| Failure::usage(format!("{}: {e}", obj.name)))?;
    }
    let opts = RunOptions {
        resume: a.resume,
        stop_after: None,
        references: !a.no_reference,
    };
    let summary = run_to_dir(&model, &loaded, &a.out, opts).map_err(|e| match e {
        Error::Frame { .. } | Error::Io { .. } => Failure::runtime(e),
        e => Failure::usage(e),
    })?;
    println!(
        "wrote frames {}..{} of {} to {}",
        summary.first,
        summary.first + summary.written,
        loaded.config.steps + 1,
        a.out.display()
    );
    Ok(())
}

fn decode_dir(model: &ToyFlowModel, dir: &Path) -> Result<Vec<ColoredVoxelGrid>, Failure> {
    let files = list_files(dir, "slat").map_err(Failure::usage)?;
    files
        .iter()
        .map(|p| {
            let slat = read_slat(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            model
                .decode_slat(&slat)
                .map_err(|e| Failure::usage(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn metrics(a: Metrics) -> CliResult {
    let cfg = model_config_near(&a.frames).map_err(Failure::usage)?;
    let model = ToyFlowModel::new(cfg).map_err(Failure::usage)?;
    let frames = decode_dir(&model, &locate_frames(&a.frames))?;
    let reference = a
        .reference
        .as_deref()
        .map(|r| decode_dir(&model, r))
        .transpose()?;
    let (report, gaps) = evaluate(&frames, reference.as_deref()).map_err(Failure::usage)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    match a.out {
        Some(dir) => {
            write(&dir.join("metrics.json"), json.as_bytes())?;
            write(&dir.join("gaps.csv"), gaps_csv(&gaps).as_bytes())?;
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn analyze_orient(a: AnalyzeOrient) -> CliResult {
    let mut sequences = Vec::new();
    let mut skipped = 0;
    for dir in &a.frames {
        let files = list_files(&locate_frames(dir), "ssv").map_err(Failure::usage)?;
        let alphas = find_sequence(dir)
            .map_err(Failure::usage)?
            .map(|s| s.frames.iter().map(|f| f.alpha).collect::<Vec<_>>());
        let n = files.len();
        let mut seq: Vec<(f64, EulerAngles)> = Vec::with_capacity(n);
        for (i, p) in files.iter().enumerate() {
            let structure =
                read_ssv(p).map_err(|e| Failure::usage(format!("{}: {e}", p.display())))?;
            let alpha = match &alphas {
                Some(al) if al.len() == n => al[i],
                _ if n > 1 => i as f64 / (n - 1) as f64,
                _ => 0.0,
            };
            let colors = vec![[0.0; 3]; structure.len()];
            let grid = ColoredVoxelGrid::new(structure, colors).expect("one color per voxel");
            match estimate_orientation(&grid, &Estimator::Pca) {
                Ok(e) => seq.push((alpha, e)),
                Err(_) => skipped += 1,
            }
        }
        if seq.len() >= 2 {
            sequences.push(seq);
        } else {
            eprintln!(
                "warning: {} has fewer than two usable frames",
                dir.display()
            );
        }
    }
    if sequences.is_empty() {
        return Err(Failure::usage(
            "no sequence with at least two usable frames",
        ));
    }
    let stats = orientation_stats(&sequences, a.threshold).map_err(Failure::usage)?;
    match a.out {
        Some(p) => write(&p, stats.to_csv().as_bytes())?,
        None => print!("{}", stats.to_csv()),
    }
    eprintln!("jumps: {}, skipped frames: {skipped}", stats.jumps);
    Ok(())
}

fn export(a: Export) -> CliResult {
    let slat =
        read_slat(&a.input).map_err(|e| Failure::usage(format!("{}: {e}", a.input.display())))?;
    let cfg = model_config_near(&a.input).map_err(Failure::usage)?;
    let model = ToyFlowModel::new(cfg).map_err(Failure::usage)?;
    let grid = model.decode_slat(&slat).map_err(Failure::usage)?;
    write(&a.out, to_obj(&grid).as_bytes())
}
