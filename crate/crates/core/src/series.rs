//! Longitudinal volume series and their on-disk layout.
//!
//! A series directory holds `manifest.json` and `volumes.f32`. The blob is the
//! context volumes in timestamp order followed by the target, each stored
//! row-major (H outermost, W innermost) as little-endian IEEE-754 binary32.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "volumes.f32";
pub const DATASET_FILE: &str = "dataset.json";

/// A dense scalar volume of shape (H, D, W).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], voxels: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("volume dims must be positive, got {shape:?}")));
        }
        let n = shape.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::Shape(format!(
                "volume {shape:?} needs {n} voxels, got {}",
                voxels.len()
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite voxel at index {i}")));
        }
        Ok(Volume { shape, voxels })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Volume {
            shape,
            voxels: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Volume {
            shape,
            voxels: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn index(&self, h: usize, d: usize, w: usize) -> usize {
        (h * self.shape[1] + d) * self.shape[2] + w
    }

    pub fn get(&self, h: usize, d: usize, w: usize) -> f32 {
        self.voxels[self.index(h, d, w)]
    }

    pub fn is_zero(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs_diff(&self, other: &Volume) -> f32 {
        self.voxels
            .iter()
            .zip(&other.voxels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Whether a target may precede the last context frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceMode {
    /// Target time is at or after the last context timestamp.
    #[default]
    Forecast,
    /// Target time may fall anywhere, e.g. to fill a gap between contexts.
    Interpolate,
}

/// Ordered context volumes with timestamps plus the target volume and time.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSequence {
    contexts: Vec<(Volume, f64)>,
    target: Volume,
    target_time: f64,
    patient_id: String,
    mode: SequenceMode,
}

impl VolumeSequence {
    pub fn new(
        patient_id: impl Into<String>,
        contexts: Vec<(Volume, f64)>,
        target: Volume,
        target_time: f64,
    ) -> Result<Self> {
        Self::with_mode(patient_id, contexts, target, target_time, SequenceMode::Forecast)
    }

    pub fn with_mode(
        patient_id: impl Into<String>,
        contexts: Vec<(Volume, f64)>,
        target: Volume,
        target_time: f64,
        mode: SequenceMode,
    ) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::Empty("sequence needs at least one context volume".into()));
        }
        let shape = target.shape();
        for (i, (v, t)) in contexts.iter().enumerate() {
            if v.shape() != shape {
                return Err(Error::Shape(format!(
                    "context {i} has shape {:?}, target has {shape:?}",
                    v.shape()
                )));
            }
            if !t.is_finite() || *t < 0.0 {
                return Err(Error::Format(format!("context {i} timestamp {t} is not a finite non-negative real")));
            }
        }
        for w in contexts.windows(2) {
            if w[1].1 <= w[0].1 {
                return Err(Error::Ordering(format!("{} followed by {}", w[0].1, w[1].1)));
            }
        }
        if !target_time.is_finite() {
            return Err(Error::Format("target time is not finite".into()));
        }
        let last = contexts[contexts.len() - 1].1;
        if mode == SequenceMode::Forecast && target_time < last {
            return Err(Error::Ordering(format!(
                "forecast target time {target_time} precedes last context {last}"
            )));
        }
        Ok(VolumeSequence {
            contexts,
            target,
            target_time,
            patient_id: patient_id.into(),
            mode,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.patient_id
    }

    pub fn contexts(&self) -> &[(Volume, f64)] {
        &self.contexts
    }

    pub fn context_len(&self) -> usize {
        self.contexts.len()
    }

    pub fn context_times(&self) -> Vec<f64> {
        self.contexts.iter().map(|(_, t)| *t).collect()
    }

    pub fn target(&self) -> &Volume {
        &self.target
    }

    pub fn target_time(&self) -> f64 {
        self.target_time
    }

    pub fn mode(&self) -> SequenceMode {
        self.mode
    }

    pub fn shape(&self) -> [usize; 3] {
        self.target.shape()
    }

    /// Contexts whose mask entry is true. A missing mask keeps everything.
    pub fn observed(&self, mask: Option<&[bool]>) -> Result<Vec<(&Volume, f64)>> {
        let out: Vec<_> = match mask {
            None => self.contexts.iter().map(|(v, t)| (v, *t)).collect(),
            Some(m) => {
                if m.len() != self.contexts.len() {
                    return Err(Error::Shape(format!(
                        "mask of length {} for {} contexts of patient {}",
                        m.len(),
                        self.contexts.len(),
                        self.patient_id
                    )));
                }
                self.contexts
                    .iter()
                    .zip(m)
                    .filter(|(_, &keep)| keep)
                    .map(|((v, t), _)| (v, *t))
                    .collect()
            }
        };
        if out.is_empty() {
            return Err(Error::Empty(format!("patient {} has no observed context", self.patient_id)));
        }
        Ok(out)
    }

    /// Copy of this sequence with a different target time and mode.
    pub fn retargeted(&self, target_time: f64) -> Result<Self> {
        let mode = if target_time < self.contexts[self.contexts.len() - 1].1 {
            SequenceMode::Interpolate
        } else {
            self.mode
        };
        Self::with_mode(
            self.patient_id.clone(),
            self.contexts.clone(),
            self.target.clone(),
            target_time,
            mode,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SeriesManifest {
    patient_id: String,
    shape: [usize; 3],
    frames: usize,
    timestamps: Vec<String>,
    target_time: String,
    byte_order: String,
    dtype: String,
    #[serde(default)]
    mode: SequenceMode,
}

fn fmt_time(t: f64) -> String {
    // `{}` on f64 prints the shortest string that parses back to the same value.
    format!("{t}")
}

fn parse_time(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad timestamp {s:?}: {e}")))
}

pub fn write_series(seq: &VolumeSequence, dir: &Path) -> Result<()> {
    let shape = seq.shape();
    if seq.contexts.iter().any(|(v, _)| v.shape() != shape) {
        return Err(Error::Shape("volumes in sequence disagree on shape".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = SeriesManifest {
        patient_id: seq.patient_id.clone(),
        shape,
        frames: seq.contexts.len() + 1,
        timestamps: seq.contexts.iter().map(|(_, t)| fmt_time(*t)).collect(),
        target_time: fmt_time(seq.target_time),
        byte_order: "LE".into(),
        dtype: "f32".into(),
        mode: seq.mode,
    };
    let n = shape.iter().product::<usize>();
    let mut blob = Vec::with_capacity(4 * n * manifest.frames);
    for v in seq.contexts.iter().map(|(v, _)| v).chain(std::iter::once(&seq.target)) {
        for x in v.voxels() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("series manifest", e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(bpath, e))?;
    Ok(())
}

pub fn read_series(dir: &Path) -> Result<VolumeSequence> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: SeriesManifest = serde_json::from_str(&text).map_err(|e| Error::json(mpath.display().to_string(), e))?;
    if m.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype tag {:?}", m.dtype)));
    }
    if m.byte_order != "LE" {
        return Err(Error::Format(format!("unsupported byte order tag {:?}", m.byte_order)));
    }
    if m.frames < 2 || m.timestamps.len() != m.frames - 1 {
        return Err(Error::Format(format!(
            "{} frames but {} context timestamps",
            m.frames,
            m.timestamps.len()
        )));
    }
    let n: usize = m.shape.iter().product();
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let expected = (4 * n * m.frames) as u64;
    if blob.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            found: blob.len() as u64,
        });
    }
    let mut vols = blob
        .chunks_exact(4 * n)
        .map(|chunk| {
            let vox = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Volume::new(m.shape, vox)
        })
        .collect::<Result<Vec<_>>>()?;
    let target = vols.pop().expect("frames >= 2");
    let times = m.timestamps.iter().map(|s| parse_time(s)).collect::<Result<Vec<_>>>()?;
    let contexts = vols.into_iter().zip(times).collect();
    VolumeSequence::with_mode(m.patient_id, contexts, target, parse_time(&m.target_time)?, m.mode)
}

/// Frozen per-patient observation masks for one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub split: String,
    pub seed: u64,
    pub masks: BTreeMap<String, Vec<bool>>,
}

impl MaskPlan {
    pub fn new(split: impl Into<String>, seed: u64, masks: BTreeMap<String, Vec<bool>>) -> Result<Self> {
        for (id, m) in &masks {
            if !m.iter().any(|&b| b) {
                return Err(Error::Config(format!("mask for {id} observes no frame")));
            }
        }
        Ok(MaskPlan {
            split: split.into(),
            seed,
            masks,
        })
    }

    pub fn get(&self, patient_id: &str) -> Option<&[bool]> {
        self.masks.get(patient_id).map(Vec::as_slice)
    }

    /// Canonical serialized form; identical plans give identical bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut s = serde_json::to_string_pretty(self).expect("mask plan serializes");
        s.push('\n');
        s.into_bytes()
    }

    /// Hex SHA-256 of the canonical bytes.
    pub fn hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: MaskPlan = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        MaskPlan::new(plan.split, plan.seed, plan.masks)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Train/val/test partition of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub root: PathBuf,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

impl SplitManifest {
    pub fn new(root: PathBuf, train: Vec<String>, val: Vec<String>, test: Vec<String>, grid: Option<GridSpec>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for id in train.iter().chain(&val).chain(&test) {
            if !seen.insert(id) {
                return Err(Error::Config(format!("patient {id} appears in more than one split")));
            }
        }
        Ok(SplitManifest {
            root,
            train,
            val,
            test,
            grid,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn patient_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn load_patient(&self, id: &str) -> Result<VolumeSequence> {
        read_series(&self.patient_dir(id))
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<VolumeSequence>> {
        self.split(name)?.iter().map(|id| self.load_patient(id)).collect()
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(DATASET_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("split manifest", e))?;
        fs::write(&path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads `dataset.json` from `root`; the stored root is replaced by the
    /// directory actually given so datasets can be moved.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut m: SplitManifest = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        m.root = root.to_path_buf();
        SplitManifest::new(m.root, m.train, m.val, m.test, m.grid)
    }
}
