//! On-disk layout of a morph run.
//!
//! ```text
//! out/
//!   sequence.json        config echo, inputs, per-frame alpha/rotation/timings
//!   frames/NNN.ssv       structure of frame NNN (after orientation correction)
//!   frames/NNN.slat      structured latents
//!   frames/NNN.obj       decoded voxel mesh
//!   cache/kv.bin         self-attention keys and values of the last frame
//!   reference/*.{ssv,slat,obj}  plain generations of the endpoint objects
//! ```
//!
//! `sequence.json` and the cache are replaced atomically after every frame,
//! so an interrupted run can be resumed from its last completed frame.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::to_obj;
use crate::flow::{FrameCache, ModelConfig, Slat, ToyFlowModel};
use crate::geometry::SparseStructure;
use crate::pipeline::config::LoadedConfig;
use crate::pipeline::{
    generate, Carry, FrameRecord, MorphConfig, MorphObject, MorphRunner, Timings,
};

pub const SEQUENCE_FILE: &str = "sequence.json";
pub const FRAMES_DIR: &str = "frames";
pub const CACHE_FILE: &str = "cache/kv.bin";
pub const REFERENCE_DIR: &str = "reference";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub name: String,
    pub digest: String,
}

impl ObjectRef {
    fn of(obj: &MorphObject) -> Self {
        Self {
            name: obj.name.clone(),
            digest: format!("{:016x}", obj.cond.digest()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub index: usize,
    pub alpha: f64,
    pub alpha_ss: f64,
    pub alpha_slat: f64,
    pub rotation: u8,
    pub voxels: usize,
    pub timings: Timings,
}

impl FrameEntry {
    fn of(f: &FrameRecord) -> Self {
        Self {
            index: f.index,
            alpha: f.alpha.value(),
            alpha_ss: f.alpha_ss.value(),
            alpha_slat: f.alpha_slat.value(),
            rotation: f.rotation,
            voxels: f.structure.len(),
            timings: f.timings,
        }
    }
}

/// Contents of `sequence.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub config: MorphConfig,
    pub style: bool,
    pub source: ObjectRef,
    pub ss_target: ObjectRef,
    pub slat_target: ObjectRef,
    pub frames: Vec<FrameEntry>,
}

impl SequenceFile {
    fn new(loaded: &LoadedConfig) -> Self {
        let i = &loaded.inputs;
        Self {
            config: loaded.config.clone(),
            style: loaded.style,
            source: ObjectRef::of(&i.source),
            ss_target: ObjectRef::of(&i.ss_target),
            slat_target: ObjectRef::of(&i.slat_target),
            frames: Vec::new(),
        }
    }

    /// Same run, ignoring frames.
    fn same_run(&self, other: &SequenceFile) -> bool {
        self.config == other.config
            && self.style == other.style
            && self.source == other.source
            && self.ss_target == other.ss_target
            && self.slat_target == other.slat_target
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("sequence", e.to_string()))
    }

    fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sequence serializes");
        s.push('\n');
        s
    }
}

/// Path of frame `n` with extension `ext` inside a frames directory.
pub fn frame_path(frames_dir: &Path, n: usize, ext: &str) -> PathBuf {
    frames_dir.join(format!("{n:03}.{ext}"))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `name.ssv`, `name.slat` and `name.obj` into `dir`.
pub fn write_slat_files(model: &ToyFlowModel, dir: &Path, name: &str, slat: &Slat) -> Result<()> {
    let grid = model.decode_slat(slat)?;
    let write = |ext: &str, bytes: &[u8]| {
        let p = dir.join(format!("{name}.{ext}"));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write("ssv", slat.structure().to_ssv().as_bytes())?;
    write("slat", &slat.to_bytes())?;
    write("obj", to_obj(&grid).as_bytes())
}

pub fn read_slat(path: &Path) -> Result<Slat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Slat::from_bytes(&bytes)
}

pub fn read_ssv(path: &Path) -> Result<SparseStructure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SparseStructure::from_ssv(&text)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Continue from `cache/kv.bin` when the directory holds a matching run.
    pub resume: bool,
    /// Stop after writing this frame.
    pub stop_after: Option<usize>,
    /// Also write plain generations of the endpoints to `reference/`.
    pub references: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    /// First frame generated by this invocation.
    pub first: usize,
    /// Frames written by this invocation.
    pub written: usize,
    pub sequence: SequenceFile,
}

/// Runs a configured morph and writes the output layout under `out`.
pub fn run_to_dir(
    model: &ToyFlowModel,
    loaded: &LoadedConfig,
    out: &Path,
    opts: RunOptions,
) -> Result<RunSummary> {
    let frames_dir = out.join(FRAMES_DIR);
    let cache_path = out.join(CACHE_FILE);
    let seq_path = out.join(SEQUENCE_FILE);
    create_dir(&frames_dir)?;
    create_dir(cache_path.parent().expect("cache file has a parent"))?;

    let fresh = SequenceFile::new(loaded);
    let inputs = loaded.inputs.clone();
    let cfg = loaded.config.clone();
    let (mut runner, mut seq) = if opts.resume && seq_path.exists() && cache_path.exists() {
        let mut seq = SequenceFile::read(&seq_path)?;
        if !seq.same_run(&fresh) {
            return Err(Error::invalid(format!(
                "{} was written by a different configuration",
                seq_path.display()
            )));
        }
        let file = fs::File::open(&cache_path).map_err(|e| Error::io(&cache_path, e))?;
        let (frame, cache) = FrameCache::read_from(&mut BufReader::new(file))?;
        if seq.frames.len() <= frame {
            return Err(Error::MissingCache(format!(
                "frame {frame} is not recorded in {SEQUENCE_FILE}"
            )));
        }
        seq.frames.truncate(frame + 1);
        let structure = read_ssv(&frame_path(&frames_dir, frame, "ssv"))?;
        let carry = Carry {
            frame,
            structure,
            cache,
        };
        (MorphRunner::resume(model, inputs, cfg, carry)?, seq)
    } else {
        (MorphRunner::new(model, inputs, cfg)?, fresh)
    };

    if opts.references {
        write_references(model, loaded, &out.join(REFERENCE_DIR))?;
    }

    let first = runner.next_frame();
    let mut written = 0;
    while let Some(f) = runner.step()? {
        let n = f.index;
        let grid = model.decode_slat(&f.slat).map_err(|e| e.at_frame(n))?;
        let write = |ext: &str, bytes: &[u8]| {
            let p = frame_path(&frames_dir, n, ext);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write("ssv", f.structure.to_ssv().as_bytes())?;
        write("slat", &f.slat.to_bytes())?;
        write("obj", to_obj(&grid).as_bytes())?;

        let carry = runner.carry().expect("a frame was just generated");
        let mut buf = BufWriter::new(Vec::new());
        carry
            .cache
            .write_to(carry.frame, &mut buf)
            .and_then(|_| buf.flush())
            .map_err(|e| Error::io(&cache_path, e))?;
        write_atomic(&cache_path, buf.get_ref())?;

        seq.frames.push(FrameEntry::of(&f));
        write_atomic(&seq_path, seq.to_json().as_bytes())?;
        written += 1;
        if opts.stop_after == Some(n) {
            break;
        }
    }
    Ok(RunSummary {
        first,
        written,
        sequence: seq,
    })
}

/// Plain generations of each distinct endpoint object.
fn write_references(model: &ToyFlowModel, loaded: &LoadedConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let i = &loaded.inputs;
    let mut objects: Vec<(&str, &MorphObject)> = vec![("source", &i.source)];
    if i.ss_target.cond == i.slat_target.cond {
        objects.push(("target", &i.ss_target));
    } else {
        objects.push(("ss_target", &i.ss_target));
        objects.push(("slat_target", &i.slat_target));
    }
    let mut seen: Vec<&MorphObject> = Vec::new();
    for (name, obj) in objects {
        if seen.iter().any(|o| o.cond == obj.cond) {
            continue;
        }
        seen.push(obj);
        let g = generate(model, obj, loaded.config.seed)?;
        write_slat_files(model, dir, name, &g.slat.slat)?;
    }
    Ok(())
}

/// `path/frames` when it exists, else `path` itself.
pub fn locate_frames(path: &Path) -> PathBuf {
    let nested = path.join(FRAMES_DIR);
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == ext) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// The `sequence.json` belonging to a run or frames directory, if any.
pub fn find_sequence(path: &Path) -> Result<Option<SequenceFile>> {
    let dir = if path.is_dir() {
        path
    } else {
        path.parent().unwrap_or(path)
    };
    for d in dir.ancestors().take(3) {
        let p = d.join(SEQUENCE_FILE);
        if p.is_file() {
            return SequenceFile::read(&p).map(Some);
        }
    }
    Ok(None)
}

/// Model configuration recorded next to `path`, or the default.
pub fn model_config_near(path: &Path) -> Result<ModelConfig> {
    Ok(find_sequence(path)?
        .map(|s| s.config.model)
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_paths_are_zero_padded() {
        assert_eq!(frame_path(Path::new("f"), 7, "ssv"), Path::new("f/007.ssv"));
        assert_eq!(
            frame_path(Path::new("f"), 123, "obj"),
            Path::new("f/123.obj")
        );
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert!(!dir.path().join("a.tmp").exists());
    }
}
