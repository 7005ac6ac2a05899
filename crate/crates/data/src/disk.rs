//! On-disk dataset layout: one directory per split, a raw tensor file plus
//! a text sidecar per sequence, and a manifest tying the set together.
//! Reading back what was written reproduces the tensors bit for bit.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::sequence::{generate_sequence, Sequence};
use crate::{DataConfig, CLASS_NAMES, GENERATOR_VERSION};
use saccade::{Error, Result};

const VIDEO_MAGIC: &[u8; 4] = b"GVID";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub config: DataConfig,
    pub seed_base: u64,
    /// Channel mean over the train split.
    pub mean: [f64; 3],
    /// Channel population standard deviation over the train split.
    pub std: [f64; 3],
}

impl Manifest {
    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.train,
            Split::Val => self.config.val,
            Split::Test => self.config.test,
        }
    }

    /// (class, generator seed) of one sequence; seeds are disjoint across
    /// splits because they index a single global range.
    pub fn item_identity(&self, split: Split, idx: usize) -> (usize, u64) {
        let offset = match split {
            Split::Train => 0,
            Split::Val => self.config.train,
            Split::Test => self.config.train + self.config.val,
        };
        let class = idx % self.classes.len();
        (class, self.seed_base + (offset + idx) as u64)
    }
}

fn seq_paths(root: &Path, split: Split, idx: usize) -> (PathBuf, PathBuf) {
    let dir = root.join(split.dir_name());
    (
        dir.join(format!("seq_{:05}.vid", idx)),
        dir.join(format!("seq_{:05}.meta", idx)),
    )
}

fn write_video(path: &Path, cfg: &DataConfig, video: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VIDEO_MAGIC)?;
    w.write_all(&GENERATOR_VERSION.to_le_bytes())?;
    let dims = [cfg.frames, cfg.height, cfg.width, 3];
    w.write_all(&(dims.len() as u64).to_le_bytes())?;
    for d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in video {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_video(path: &Path, cfg: &DataConfig) -> Result<Vec<f64>> {
    let bad = |msg: String| Error::data(format!("{}: {}", path.display(), msg));
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("short header ({})", e)))?;
    if &magic != VIDEO_MAGIC {
        return Err(bad("not a video tensor file".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != GENERATOR_VERSION {
        return Err(bad(format!(
            "generator version {} but this build reads {}",
            version, GENERATOR_VERSION
        )));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let rank = u64::from_le_bytes(u64buf);
    if rank != 4 {
        return Err(bad(format!("rank {} tensor, expected 4", rank)));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        r.read_exact(&mut u64buf)?;
        *d = u64::from_le_bytes(u64buf) as usize;
    }
    let expect = [cfg.frames, cfg.height, cfg.width, 3];
    if dims != expect {
        return Err(bad(format!("dims {:?}, manifest says {:?}", dims, expect)));
    }
    let count = dims.iter().product::<usize>();
    let mut bytes = Vec::with_capacity(count * 8);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != count * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, dims require {}",
            bytes.len(),
            count * 8
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

fn write_meta(path: &Path, cfg: &DataConfig, seq: &Sequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "label={}", seq.label)?;
    writeln!(w, "seed={}", seq.seed)?;
    writeln!(w, "frames={}", cfg.frames)?;
    writeln!(w, "entities={}", cfg.entities)?;
    for t in 0..cfg.frames {
        for j in 0..cfg.entities {
            let i = t * cfg.entities + j;
            writeln!(
                w,
                "kp={} {} {} {} {}",
                t,
                j,
                seq.keypoints[i * 2],
                seq.keypoints[i * 2 + 1],
                u8::from(seq.mask[i])
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_meta(path: &Path, cfg: &DataConfig) -> Result<(usize, u64, Vec<f64>, Vec<bool>)> {
    let bad = |msg: String| Error::data(format!("{}: {}", path.display(), msg));
    let text = fs::read_to_string(path)?;
    let mut label = None;
    let mut seed = None;
    let n = cfg.frames * cfg.entities;
    let mut keypoints = vec![f64::NAN; n * 2];
    let mut mask = vec![false; n];
    let mut kp_seen = 0usize;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line {:?}", line)))?;
        match key {
            "label" => label = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "seed" => seed = Some(value.parse::<u64>().map_err(|e| bad(e.to_string()))?),
            "frames" => {
                let f: usize = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                if f != cfg.frames {
                    return Err(bad(format!("frames {} but manifest says {}", f, cfg.frames)));
                }
            }
            "entities" => {
                let e: usize = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                if e != cfg.entities {
                    return Err(bad(format!(
                        "entities {} but manifest says {}",
                        e, cfg.entities
                    )));
                }
            }
            "kp" => {
                let parts: Vec<&str> = value.split_whitespace().collect();
                if parts.len() != 5 {
                    return Err(bad(format!("keypoint line needs 5 fields: {:?}", line)));
                }
                let t: usize = parts[0].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                let j: usize = parts[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                if t >= cfg.frames || j >= cfg.entities {
                    return Err(bad(format!("keypoint index ({}, {}) out of range", t, j)));
                }
                let i = t * cfg.entities + j;
                keypoints[i * 2] = parts[2].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                keypoints[i * 2 + 1] = parts[3].parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
                mask[i] = parts[4] == "1";
                kp_seen += 1;
            }
            other => return Err(bad(format!("unknown key {:?}", other))),
        }
    }
    if kp_seen != n {
        return Err(bad(format!("{} keypoint lines, expected {}", kp_seen, n)));
    }
    let label = label.ok_or_else(|| bad("missing label".into()))?;
    let seed = seed.ok_or_else(|| bad("missing seed".into()))?;
    Ok((label, seed, keypoints, mask))
}

/// Per-channel (sum, sum of squares) over one video buffer.
fn channel_sums(video: &[f64]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for px in video.chunks_exact(3) {
        for ch in 0..3 {
            sum[ch] += px[ch];
            sq[ch] += px[ch] * px[ch];
        }
    }
    (sum, sq)
}

fn finish_stats(sum: [f64; 3], sq: [f64; 3], count: usize) -> ([f64; 3], [f64; 3]) {
    let n = count as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for ch in 0..3 {
        mean[ch] = sum[ch] / n;
        std[ch] = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0).sqrt();
    }
    (mean, std)
}

/// Generates and writes all three splits under `root`, returning the
/// manifest (also written to `root/manifest.txt`). Class labels cycle so
/// every split is balanced; sequence seeds are `seed_base` plus the global
/// index, disjoint across splits.
pub fn write_dataset(root: &Path, cfg: &DataConfig, seed_base: u64) -> Result<Manifest> {
    cfg.validate()?;
    let mut manifest = Manifest {
        version: GENERATOR_VERSION,
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        config: cfg.clone(),
        seed_base,
        mean: [0.0; 3],
        std: [0.0; 3],
    };
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut train_px = 0usize;
    for split in Split::ALL {
        fs::create_dir_all(root.join(split.dir_name()))?;
        for idx in 0..manifest.split_len(split) {
            let (class, seed) = manifest.item_identity(split, idx);
            let seq = generate_sequence(class, seed, cfg)?;
            let (vid_path, meta_path) = seq_paths(root, split, idx);
            write_video(&vid_path, cfg, &seq.video)?;
            write_meta(&meta_path, cfg, &seq)?;
            if split == Split::Train {
                let (s, q) = channel_sums(&seq.video);
                for ch in 0..3 {
                    sum[ch] += s[ch];
                    sq[ch] += q[ch];
                }
                train_px += seq.video.len() / 3;
            }
        }
    }
    let (mean, std) = finish_stats(sum, sq, train_px);
    manifest.mean = mean;
    manifest.std = std;
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

fn write_manifest(root: &Path, m: &Manifest) -> Result<()> {
    let mut w = BufWriter::new(File::create(root.join("manifest.txt"))?);
    writeln!(w, "version={}", m.version)?;
    writeln!(w, "classes={}", m.classes.join(","))?;
    writeln!(w, "height={}", m.config.height)?;
    writeln!(w, "width={}", m.config.width)?;
    writeln!(w, "frames={}", m.config.frames)?;
    writeln!(w, "entities={}", m.config.entities)?;
    writeln!(w, "train={}", m.config.train)?;
    writeln!(w, "val={}", m.config.val)?;
    writeln!(w, "test={}", m.config.test)?;
    writeln!(w, "seed_base={}", m.seed_base)?;
    writeln!(w, "mean={} {} {}", m.mean[0], m.mean[1], m.mean[2])?;
    writeln!(w, "std={} {} {}", m.std[0], m.std[1], m.std[2])?;
    w.flush()?;
    Ok(())
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.txt");
    let bad = |msg: String| Error::data(format!("{}: {}", path.display(), msg));
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?;
    let mut m = Manifest {
        version: 0,
        classes: Vec::new(),
        config: DataConfig::default(),
        seed_base: 0,
        mean: [f64::NAN; 3],
        std: [f64::NAN; 3],
    };
    let parse_usize = |v: &str| -> Result<usize> {
        v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))
    };
    let parse_triple = |v: &str| -> Result<[f64; 3]> {
        let parts: Vec<&str> = v.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(bad(format!("expected 3 numbers, got {:?}", v)));
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
        }
        Ok(out)
    };
    let mut seen_version = false;
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line {:?}", line)))?;
        match key {
            "version" => {
                m.version = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                seen_version = true;
            }
            "classes" => m.classes = value.split(',').map(|s| s.to_string()).collect(),
            "height" => m.config.height = parse_usize(value)?,
            "width" => m.config.width = parse_usize(value)?,
            "frames" => m.config.frames = parse_usize(value)?,
            "entities" => m.config.entities = parse_usize(value)?,
            "train" => m.config.train = parse_usize(value)?,
            "val" => m.config.val = parse_usize(value)?,
            "test" => m.config.test = parse_usize(value)?,
            "seed_base" => {
                m.seed_base = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "mean" => m.mean = parse_triple(value)?,
            "std" => m.std = parse_triple(value)?,
            other => return Err(bad(format!("unknown key {:?}", other))),
        }
    }
    if !seen_version {
        return Err(bad("missing version".into()));
    }
    if m.version != GENERATOR_VERSION {
        return Err(bad(format!(
            "generator version {} but this build reads {}",
            m.version, GENERATOR_VERSION
        )));
    }
    if m.classes.is_empty() || m.mean.iter().any(|v| v.is_nan()) {
        return Err(bad("incomplete manifest".into()));
    }
    m.config.validate()?;
    Ok(m)
}

/// One split of a written dataset, loaded sequence by sequence.
pub struct DiskDataset {
    root: PathBuf,
    split: Split,
    manifest: Manifest,
}

impl DiskDataset {
    pub fn open(root: &Path, split: Split) -> Result<DiskDataset> {
        let manifest = read_manifest(root)?;
        Ok(DiskDataset {
            root: root.to_path_buf(),
            split,
            manifest,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.split_len(self.split)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn load(&self, idx: usize) -> Result<Sequence> {
        if idx >= self.len() {
            return Err(Error::data(format!(
                "sequence {} out of range for {} ({} items)",
                idx,
                self.split.dir_name(),
                self.len()
            )));
        }
        let (vid_path, meta_path) = seq_paths(&self.root, self.split, idx);
        let video = read_video(&vid_path, &self.manifest.config)?;
        let (label, seed, keypoints, mask) = read_meta(&meta_path, &self.manifest.config)?;
        if label >= self.manifest.classes.len() {
            return Err(Error::data(format!(
                "{}: label {} outside the {} manifest classes",
                meta_path.display(),
                label,
                self.manifest.classes.len()
            )));
        }
        Ok(Sequence {
            video,
            keypoints,
            mask,
            label,
            seed,
        })
    }
}

/// Re-derives the channel statistics from the stored files, mirroring the
/// accumulation order used at write time.
pub fn recompute_channel_stats(root: &Path, split: Split) -> Result<([f64; 3], [f64; 3])> {
    let ds = DiskDataset::open(root, split)?;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut px = 0usize;
    for idx in 0..ds.len() {
        let seq = ds.load(idx)?;
        let (s, q) = channel_sums(&seq.video);
        for ch in 0..3 {
            sum[ch] += s[ch];
            sq[ch] += q[ch];
        }
        px += seq.video.len() / 3;
    }
    Ok(finish_stats(sum, sq, px))
}
