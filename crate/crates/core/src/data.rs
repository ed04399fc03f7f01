//! Dataset layout, subject-disjoint protocol splits, preprocessing of raw
//! polarimetric captures and a procedural paired-data generator.
//!
//! Layout: `root/<subject_id>/<sample_index>_{s0,s1,s2,vis}.png`, all 16-bit
//! PNG in `[-1, 1]`. An optional `root/<subject_id>/volume.txt` holds the
//! volume tag (1 when absent).
//!
//! Raw captures for preprocessing use `raw/<subject_id>/<sample_index>_{i0,
//! i45,i90,i135,vis}.png` with intensities linear in `[0, 1]`, an optional
//! `<sample_index>_mask.png` (non-zero marks a bad pixel) and fiducials in
//! `annotations/<subject_id>/<sample_index>.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use candle_core::DType;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::polarimetry::{
    align_and_crop, compute_stokes, read_plane_png16, read_png16, solve_affine, write_plane_png16, write_png16,
    AffineTransform, FiducialPoints, Plane, RawPolarimetricFrame,
};
use crate::training::TrainingPair;

pub const STOKES_KINDS: [&str; 3] = ["s0", "s1", "s2"];
pub const VISIBLE_KIND: &str = "vis";
pub const RAW_KINDS: [&str; 4] = ["i0", "i45", "i90", "i135"];
pub const SAMPLES_PER_SUBJECT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject_id: String,
    pub sample_index: u32,
    pub s0: PathBuf,
    pub s1: PathBuf,
    pub s2: PathBuf,
    pub visible: PathBuf,
    pub volume: u8,
}

impl SampleRecord {
    /// `<subject_id>/<sample_index>`, unique within a dataset.
    pub fn id(&self) -> String {
        format!("{}/{:03}", self.subject_id, self.sample_index)
    }

    pub fn stokes_paths(&self) -> [&Path; 3] {
        [&self.s0, &self.s1, &self.s2]
    }
}

pub fn sample_path(root: &Path, subject: &str, index: u32, kind: &str) -> PathBuf {
    root.join(subject).join(format!("{index:03}_{kind}.png"))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ScanReport {
    pub records: Vec<SampleRecord>,
    /// Incomplete pairs, skipped.
    pub warnings: Vec<String>,
    /// Files that exist but could not be read or disagree in size.
    pub errors: Vec<String>,
}

fn read_volume(dir: &Path) -> std::result::Result<u8, String> {
    let p = dir.join("volume.txt");
    if !p.exists() {
        return Ok(1);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
    match text.trim() {
        "1" => Ok(1),
        "2" => Ok(2),
        other => Err(format!("{}: volume tag `{other}` is not 1 or 2", p.display())),
    }
}

/// One record per complete Stokes/visible group found under `root`.
pub fn scan_dataset(root: &Path) -> Result<ScanReport> {
    let mut report = ScanReport::default();
    let mut subjects: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subjects.sort();
    for dir in subjects {
        let subject = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let volume = match read_volume(&dir) {
            Ok(v) => v,
            Err(e) => {
                report.errors.push(e);
                continue;
            }
        };
        let mut groups: BTreeMap<u32, BTreeMap<String, PathBuf>> = BTreeMap::new();
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries.filter_map(|e| e.ok()) {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            let Some((idx, kind)) = stem.rsplit_once('_') else { continue };
            let Ok(idx) = idx.parse::<u32>() else { continue };
            if STOKES_KINDS.contains(&kind) || kind == VISIBLE_KIND {
                groups.entry(idx).or_default().insert(kind.to_string(), path);
            }
        }
        for (idx, files) in groups {
            let missing: Vec<&str> =
                STOKES_KINDS.iter().chain([&VISIBLE_KIND]).copied().filter(|k| !files.contains_key(*k)).collect();
            if !missing.is_empty() {
                report.warnings.push(format!("{subject}/{idx:03}: missing {}", missing.join(", ")));
                continue;
            }
            let mut dims = BTreeSet::new();
            let mut unreadable = Vec::new();
            for p in files.values() {
                match image::image_dimensions(p) {
                    Ok(d) => {
                        dims.insert(d);
                    }
                    Err(e) => unreadable.push(format!("{}: {e}", p.display())),
                }
            }
            if !unreadable.is_empty() {
                report.errors.extend(unreadable);
                continue;
            }
            if dims.len() != 1 {
                report.errors.push(format!("{subject}/{idx:03}: images differ in size {dims:?}"));
                continue;
            }
            report.records.push(SampleRecord {
                subject_id: subject.clone(),
                sample_index: idx,
                s0: files["s0"].clone(),
                s1: files["s1"].clone(),
                s2: files["s2"].clone(),
                visible: files[VISIBLE_KIND].clone(),
                volume,
            });
        }
    }
    Ok(report)
}

/// A record's images: Stokes `(3, H, W)` and visible `(C, H, W)`.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub stokes: Array3<f64>,
    pub visible: Array3<f64>,
}

pub fn load_sample(record: &SampleRecord) -> Result<LoadedSample> {
    let planes = record.stokes_paths().map(read_plane_png16);
    let [s0, s1, s2] = planes;
    let (s0, s1, s2) = (s0?, s1?, s2?);
    let stokes = ndarray::stack(Axis(0), &[s0.view(), s1.view(), s2.view()])
        .map_err(|e| Error::Shape(format!("{}: {e}", record.id())))?;
    let visible = read_png16(&record.visible)?;
    if visible.dim().1 != stokes.dim().1 || visible.dim().2 != stokes.dim().2 {
        return Err(Error::Shape(format!("{}: stokes and visible sizes differ", record.id())));
    }
    Ok(LoadedSample { record: record.clone(), stokes, visible })
}

pub fn load_samples(records: &[SampleRecord]) -> Result<Vec<LoadedSample>> {
    records.iter().map(load_sample).collect()
}

pub fn training_pairs(samples: &[LoadedSample], dtype: DType) -> Result<Vec<TrainingPair>> {
    samples
        .iter()
        .map(|s| {
            Ok(TrainingPair {
                id: s.record.id(),
                subject: s.record.subject_id.clone(),
                stokes: nn::array_to_tensor(&s.stokes, dtype)?,
                visible: nn::array_to_tensor(&s.visible, dtype)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// 30 training and 30 test subjects of volume 1, eight samples each.
    Protocol1,
    /// 85 training and 26 test subjects, eight samples each.
    Protocol2,
    /// All subjects, a fraction of them for training, every sample used.
    Custom { train_fraction: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSplit {
    pub name: String,
    pub seed: u64,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    /// Samples taken per subject (lowest indices first); all when unset.
    pub samples_per_subject: Option<usize>,
}

impl ProtocolSplit {
    fn side(&self, records: &[SampleRecord], subjects: &[String]) -> Vec<SampleRecord> {
        let mut out = Vec::new();
        for s in subjects {
            let mut mine: Vec<&SampleRecord> = records.iter().filter(|r| &r.subject_id == s).collect();
            mine.sort_by_key(|r| r.sample_index);
            let take = self.samples_per_subject.unwrap_or(mine.len());
            out.extend(mine.into_iter().take(take).cloned());
        }
        out
    }

    /// `(train, test)` records of this split.
    pub fn select(&self, records: &[SampleRecord]) -> (Vec<SampleRecord>, Vec<SampleRecord>) {
        (self.side(records, &self.train_subjects), self.side(records, &self.test_subjects))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Seeded subject-disjoint split. Seeds `0..5` give the five random splits.
pub fn make_split(records: &[SampleRecord], protocol: Protocol, seed: u64) -> Result<ProtocolSplit> {
    let mut counts: BTreeMap<&str, (usize, u8)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(&r.subject_id).or_insert((0, r.volume));
        e.0 += 1;
    }
    let (name, eligible, n_train, n_test, per_subject): (String, Vec<String>, usize, usize, Option<usize>) =
        match protocol {
            Protocol::Protocol1 | Protocol::Protocol2 => {
                let (name, volume_one, n_train, n_test) = match protocol {
                    Protocol::Protocol1 => ("protocol1", true, 30, 30),
                    _ => ("protocol2", false, 85, 26),
                };
                let eligible: Vec<String> = counts
                    .iter()
                    .filter(|(_, (n, v))| *n >= SAMPLES_PER_SUBJECT && (!volume_one || *v == 1))
                    .map(|(s, _)| s.to_string())
                    .collect();
                (name.to_string(), eligible, n_train, n_test, Some(SAMPLES_PER_SUBJECT))
            }
            Protocol::Custom { train_fraction } => {
                if !(train_fraction > 0.0 && train_fraction < 1.0) {
                    return Err(Error::InvalidInput(format!("train_fraction {train_fraction} must be in (0, 1)")));
                }
                let eligible: Vec<String> = counts.keys().map(|s| s.to_string()).collect();
                let n = eligible.len();
                let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
                ("custom".to_string(), eligible, n_train, n.saturating_sub(n_train), None)
            }
        };
    if eligible.len() < n_train + n_test || n_train == 0 || n_test == 0 {
        return Err(Error::InvalidInput(format!(
            "{name} needs {} eligible subjects (at least 2 overall), found {}",
            (n_train + n_test).max(2),
            eligible.len()
        )));
    }
    let mut order = eligible;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut train_subjects = order[..n_train].to_vec();
    let mut test_subjects = order[n_train..n_train + n_test].to_vec();
    train_subjects.sort();
    test_subjects.sort();
    Ok(ProtocolSplit { name, seed, train_subjects, test_subjects, samples_per_subject: per_subject })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    pub resolution: usize,
    pub seed: u64,
}

/// Per-subject face geometry, in image-relative coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceParams {
    pub head_rx: f64,
    pub head_ry: f64,
    pub skin: f64,
    pub hair: f64,
    pub hairline: f64,
    pub eye_sep: f64,
    pub eye_y: f64,
    pub eye_r: f64,
    pub brow_gap: f64,
    pub brow_tilt: f64,
    pub nose_y: f64,
    pub nose_w: f64,
    pub mouth_y: f64,
    pub mouth_w: f64,
    pub texture_freq: (f64, f64),
    pub texture_phase: f64,
}

/// Per-sample pose and expression jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub dx: f64,
    pub dy: f64,
    pub smile: f64,
    pub openness: f64,
    pub brightness: f64,
}

impl Jitter {
    pub fn none() -> Self {
        Self { dx: 0.0, dy: 0.0, smile: 0.0, openness: 1.0, brightness: 0.0 }
    }
}

fn subject_rng(seed: u64, subject: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject as u64 * 2);
    rng
}

fn sample_rng(seed: u64, subject: usize, sample: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (sample as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(subject as u64 * 2 + 1);
    rng
}

impl FaceParams {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            head_rx: rng.random_range(0.28..0.38),
            head_ry: rng.random_range(0.36..0.45),
            skin: rng.random_range(0.55..0.85),
            hair: rng.random_range(0.05..0.45),
            hairline: rng.random_range(0.18..0.32),
            eye_sep: rng.random_range(0.22..0.34),
            eye_y: rng.random_range(0.38..0.44),
            eye_r: rng.random_range(0.035..0.06),
            brow_gap: rng.random_range(0.045..0.08),
            brow_tilt: rng.random_range(-0.25..0.25),
            nose_y: rng.random_range(0.58..0.66),
            nose_w: rng.random_range(0.03..0.06),
            mouth_y: rng.random_range(0.72..0.8),
            mouth_w: rng.random_range(0.08..0.15),
            texture_freq: (rng.random_range(10.0..22.0), rng.random_range(10.0..22.0)),
            texture_phase: rng.random_range(0.0..2.0 * PI),
        }
    }

    /// Fiducials of this face in pixel coordinates of an `h × w` image.
    pub fn fiducials(&self, jitter: &Jitter, h: usize, w: usize) -> FiducialPoints {
        let px = |u: f64| u * w as f64 - 0.5;
        let py = |v: f64| v * h as f64 - 0.5;
        let cx = 0.5 + jitter.dx;
        FiducialPoints {
            left_eye: [px(cx - self.eye_sep / 2.0), py(self.eye_y + jitter.dy)],
            right_eye: [px(cx + self.eye_sep / 2.0), py(self.eye_y + jitter.dy)],
            nose_base: [px(cx), py(self.nose_y + jitter.dy)],
        }
    }
}

/// 1 well inside (`d < 0`), 0 outside, with a linear ramp of width `edge`.
fn smooth_inside(d: f64, edge: f64) -> f64 {
    (0.5 - d / edge).clamp(0.0, 1.0)
}

/// Scene luminance in `[0, 1]` at image-relative `(u, v)`.
pub fn face_luminance(p: &FaceParams, j: &Jitter, u: f64, v: f64, pixel: f64) -> f64 {
    let (u, v) = (u - j.dx, v - j.dy);
    let mut l = 0.12 + 0.08 * v;
    let hd = ((u - 0.5) / p.head_rx).hypot((v - 0.52) / p.head_ry) - 1.0;
    let head = smooth_inside(hd * p.head_rx.min(p.head_ry), pixel * 1.5);
    if head > 0.0 {
        let texture = 0.05 * (2.0 * PI * (p.texture_freq.0 * u + p.texture_freq.1 * v) + p.texture_phase).sin();
        let mut skin = p.skin + texture;
        let hair = smooth_inside(v - (p.hairline + 0.04 * ((u - 0.5) * 9.0).cos()), pixel * 1.5);
        skin = skin * (1.0 - hair) + p.hair * hair;
        for side in [-1.0, 1.0] {
            let ex = 0.5 + side * p.eye_sep / 2.0;
            let ry = p.eye_r * 0.6 * j.openness;
            let ed = ((u - ex) / p.eye_r).hypot((v - p.eye_y) / ry.max(1e-3)) - 1.0;
            let eye = smooth_inside(ed * ry, pixel);
            skin = skin * (1.0 - eye) + 0.08 * eye;
            let by = p.eye_y - p.brow_gap + side * p.brow_tilt * (u - ex);
            let brow = smooth_inside((v - by).abs() - 0.012, pixel) * smooth_inside((u - ex).abs() - p.eye_r * 1.3, pixel);
            skin = skin * (1.0 - brow) + 0.15 * brow;
        }
        let nose_top = p.eye_y + 0.04;
        if v > nose_top && v < p.nose_y {
            let t = (v - nose_top) / (p.nose_y - nose_top);
            let half = p.nose_w * (0.3 + 0.7 * t);
            let shade = smooth_inside((u - 0.5).abs() - half, pixel) * (1.0 - smooth_inside((u - 0.5).abs() - half * 0.6, pixel));
            skin -= 0.18 * shade;
        }
        let base = smooth_inside((v - p.nose_y).abs() - 0.008, pixel) * smooth_inside((u - 0.5).abs() - p.nose_w, pixel);
        skin -= 0.2 * base;
        let du = (u - 0.5) / p.mouth_w;
        let mouth_line = p.mouth_y - j.smile * (1.0 - du * du);
        let mouth = smooth_inside((v - mouth_line).abs() - 0.012, pixel) * smooth_inside(du.abs() - 1.0, pixel / p.mouth_w);
        skin = skin * (1.0 - mouth) + 0.2 * mouth;
        l = l * (1.0 - head) + skin * head;
    }
    (l + j.brightness).clamp(0.0, 1.0)
}

/// Render luminance through `pose`, mapping output pixel centers back to
/// the canonical frame.
pub fn render_luminance(p: &FaceParams, j: &Jitter, h: usize, w: usize, pose: &AffineTransform) -> Result<Plane> {
    let inv = pose.inverse()?;
    let pixel = 1.0 / h.min(w) as f64;
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let [cx, cy] = inv.apply([x as f64, y as f64]);
        face_luminance(p, j, (cx + 0.5) / w as f64, (cy + 0.5) / h as f64, pixel)
    }))
}

/// Deterministic luminance-to-color map; returns `(3, H, W)` in `[0, 1]`.
pub fn colorize(l: &Plane) -> Array3<f64> {
    let (h, w) = l.dim();
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let v = l[[y, x]];
        match c {
            0 => (1.08 * v.powf(0.85)).min(1.0),
            1 => v,
            _ => 0.9 * v.powf(1.2),
        }
    })
}

/// Separable Gaussian blur with periodic boundaries.
pub fn gaussian_blur(plane: &Plane, sigma: f64) -> Plane {
    let (h, w) = plane.dim();
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let wrap = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
    let rows = Array2::from_shape_fn((h, w), |(y, x)| {
        (-radius..=radius).map(|d| taps[(d + radius) as usize] * plane[[y, wrap(x as isize + d, w)]]).sum::<f64>() / norm
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        (-radius..=radius).map(|d| taps[(d + radius) as usize] * rows[[wrap(y as isize + d, h), x]]).sum::<f64>() / norm
    })
}

/// Periodic forward difference along `(dy, dx)`; sums to zero exactly in
/// exact arithmetic.
pub fn periodic_difference(plane: &Plane, dy: usize, dx: usize) -> Plane {
    let (h, w) = plane.dim();
    Array2::from_shape_fn((h, w), |(y, x)| plane[[(y + dy) % h, (x + dx) % w]] - plane[[y, x]])
}

/// One rendered pair: pseudo-Stokes `(3, H, W)` and visible `(3, H, W)`,
/// both in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub subject: usize,
    pub sample: usize,
    pub stokes: Array3<f64>,
    pub visible: Array3<f64>,
    pub luminance: Plane,
}

/// Pseudo-Stokes channels of a luminance image: inverted smoothed intensity
/// (fine texture removed), horizontal and diagonal periodic differences.
pub fn pseudo_stokes(l: &Plane) -> Array3<f64> {
    let sigma = l.dim().0.min(l.dim().1) as f64 / 32.0;
    let s0 = gaussian_blur(l, sigma.max(0.5)).mapv(|v| 0.8 - 1.6 * v);
    let s1 = periodic_difference(l, 0, 1);
    let s2 = periodic_difference(l, 1, 1);
    ndarray::stack(Axis(0), &[s0.view(), s1.view(), s2.view()]).expect("equal plane shapes")
}

pub fn render_synthetic_sample(config: &SyntheticConfig, subject: usize, sample: usize) -> Result<SyntheticSample> {
    if config.resolution == 0 || config.resolution % 16 != 0 {
        return Err(Error::InvalidInput(format!("resolution {} is not a positive multiple of 16", config.resolution)));
    }
    let params = FaceParams::random(&mut subject_rng(config.seed, subject));
    let jitter = random_jitter(&mut sample_rng(config.seed, subject, sample));
    let r = config.resolution;
    let l = render_luminance(&params, &jitter, r, r, &AffineTransform::identity())?;
    let visible = colorize(&l).mapv(|v| 2.0 * v - 1.0);
    Ok(SyntheticSample { subject, sample, stokes: pseudo_stokes(&l), visible, luminance: l })
}

fn random_jitter(rng: &mut impl Rng) -> Jitter {
    Jitter {
        dx: rng.random_range(-0.025..0.025),
        dy: rng.random_range(-0.025..0.025),
        smile: rng.random_range(-0.02..0.035),
        openness: rng.random_range(0.7..1.1),
        brightness: rng.random_range(-0.04..0.04),
    }
}

pub fn subject_name(index: usize) -> String {
    format!("subject_{index:03}")
}

/// Render and write a synthetic dataset in the on-disk layout.
pub fn generate_synthetic_dataset(root: &Path, config: &SyntheticConfig) -> Result<Vec<SampleRecord>> {
    let mut records = Vec::new();
    for subject in 0..config.num_subjects {
        let name = subject_name(subject);
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for sample in 0..config.samples_per_subject {
            let s = render_synthetic_sample(config, subject, sample)?;
            let idx = sample as u32;
            let paths: Vec<PathBuf> = STOKES_KINDS.iter().map(|k| sample_path(root, &name, idx, k)).collect();
            for (c, p) in paths.iter().enumerate() {
                write_plane_png16(&s.stokes.index_axis(Axis(0), c).to_owned(), p)?;
            }
            let vis = sample_path(root, &name, idx, VISIBLE_KIND);
            write_png16(&s.visible, &vis)?;
            records.push(SampleRecord {
                subject_id: name.clone(),
                sample_index: idx,
                s0: paths[0].clone(),
                s1: paths[1].clone(),
                s2: paths[2].clone(),
                visible: vis,
                volume: 1,
            });
        }
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSyntheticConfig {
    pub num_subjects: usize,
    pub samples_per_subject: usize,
    /// Capture size; larger than the crop so misaligned faces stay in frame.
    pub frame_size: usize,
    pub bad_pixel_fraction: f64,
    pub seed: u64,
}

/// Write unaligned raw four-orientation captures, bad-pixel masks, visible
/// images and fiducial annotations for the preprocessing pipeline.
pub fn generate_synthetic_raw(raw_root: &Path, annotations: &Path, config: &RawSyntheticConfig) -> Result<usize> {
    let n = config.frame_size;
    let mut written = 0;
    for subject in 0..config.num_subjects {
        let name = subject_name(subject);
        let params = FaceParams::random(&mut subject_rng(config.seed, subject));
        for sample in 0..config.samples_per_subject {
            let mut rng = sample_rng(config.seed, subject, sample);
            let jitter = random_jitter(&mut rng);
            let angle: f64 = rng.random_range(-0.12..0.12);
            let scale: f64 = rng.random_range(0.9..1.1);
            let (tx, ty): (f64, f64) = (rng.random_range(-0.05..0.05) * n as f64, rng.random_range(-0.05..0.05) * n as f64);
            let c = n as f64 / 2.0;
            let (ca, sa) = (angle.cos() * scale, angle.sin() * scale);
            let pose = AffineTransform { m: [[ca, -sa, c - ca * c + sa * c + tx], [sa, ca, c - sa * c - ca * c + ty]] };
            let l = render_luminance(&params, &jitter, n, n, &pose)?;
            let smooth = gaussian_blur(&l, n as f64 / 32.0);
            let s0 = smooth.mapv(|v| 1.3 - 0.8 * v);
            let s1 = periodic_difference(&l, 0, 1).mapv(|v| 0.5 * v);
            let s2 = periodic_difference(&l, 1, 1).mapv(|v| 0.5 * v);
            let s45 = s0.clone();
            let mut planes = [
                (&s0 + &s1) / 2.0,
                (&s45 + &s2) / 2.0,
                (&s0 - &s1) / 2.0,
                (&s45 - &s2) / 2.0,
            ];
            let mask = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() < config.bad_pixel_fraction);
            for plane in planes.iter_mut() {
                for ((y, x), bad) in mask.indexed_iter() {
                    if *bad {
                        plane[[y, x]] = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                    }
                }
            }
            let idx = sample as u32;
            for (kind, plane) in RAW_KINDS.iter().zip(&planes) {
                write_plane_png16(&plane.mapv(|v| 2.0 * v.clamp(0.0, 1.0) - 1.0), &sample_path(raw_root, &name, idx, kind))?;
            }
            write_plane_png16(&mask.mapv(|b| if b { 1.0 } else { -1.0 }), &sample_path(raw_root, &name, idx, "mask"))?;
            write_png16(&colorize(&l).mapv(|v| 2.0 * v - 1.0), &sample_path(raw_root, &name, idx, VISIBLE_KIND))?;
            let fid = params.fiducials(&jitter, n, n).transformed(&pose);
            let ann = annotations.join(&name).join(format!("{idx:03}.json"));
            std::fs::create_dir_all(ann.parent().expect("annotation dir")).map_err(|e| Error::io(&ann, e))?;
            std::fs::write(&ann, serde_json::to_string_pretty(&fid)? + "\n").map_err(|e| Error::io(&ann, e))?;
            written += 1;
        }
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    /// Stored Stokes values are multiplied by this so S0 (up to 2 for unit
    /// intensities) fits the `[-1, 1]` PNG range.
    pub stokes_scale: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { crop_height: 256, crop_width: 256, stokes_scale: 0.5 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub processed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
    pub clamped_pixels: usize,
}

fn read_unit_plane(path: &Path) -> Result<Plane> {
    Ok(read_plane_png16(path)?.mapv(|v| ((v + 1.0) / 2.0).max(0.0)))
}

/// Stokes computation, bad-pixel correction, fiducial alignment and crop
/// for one raw capture, written in the dataset layout.
pub fn preprocess_sample(
    raw_root: &Path,
    subject: &str,
    idx: u32,
    fiducials: &FiducialPoints,
    out_root: &Path,
    config: &PreprocessConfig,
) -> Result<usize> {
    let [i0, i45, i90, i135] = RAW_KINDS.map(|k| read_unit_plane(&sample_path(raw_root, subject, idx, k)));
    let mut frame = RawPolarimetricFrame::new(i0?, i45?, i90?, i135?)?;
    let mask_path = sample_path(raw_root, subject, idx, "mask");
    if mask_path.exists() {
        frame = frame.with_mask(read_plane_png16(&mask_path)?.mapv(|v| v > 0.0))?;
    }
    let stokes = compute_stokes(&frame.corrected()?)?.scaled(config.stokes_scale);
    let (h, w) = (config.crop_height, config.crop_width);
    let transform = solve_affine(fiducials, &FiducialPoints::canonical(h, w))?;
    let mut clamped = 0;
    for (kind, plane) in STOKES_KINDS.iter().zip([&stokes.s0, &stokes.s1, &stokes.s2]) {
        let aligned = align_and_crop(plane, &transform, h, w)?;
        clamped += write_plane_png16(&aligned, &sample_path(out_root, subject, idx, kind))?.clamped;
    }
    let vis = read_png16(&sample_path(raw_root, subject, idx, VISIBLE_KIND))?;
    let aligned = crate::polarimetry::align_and_crop_image(&vis, &transform, h, w)?;
    clamped += write_png16(&aligned, &sample_path(out_root, subject, idx, VISIBLE_KIND))?.clamped;
    Ok(clamped)
}

/// Preprocess every raw capture under `raw_root`. Captures without an
/// annotation are skipped and reported; failures are collected.
pub fn preprocess_dataset(
    raw_root: &Path,
    annotations: &Path,
    out_root: &Path,
    config: &PreprocessConfig,
) -> Result<PreprocessReport> {
    let mut report = PreprocessReport::default();
    let mut subjects: Vec<PathBuf> = std::fs::read_dir(raw_root)
        .map_err(|e| Error::io(raw_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subjects.sort();
    for dir in subjects {
        let subject = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut indices = BTreeSet::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.filter_map(|e| e.ok()) {
            let name = entry.file_name().to_string_lossy().to_string();
            if let Some(idx) = name.strip_suffix("_i0.png").and_then(|s| s.parse::<u32>().ok()) {
                indices.insert(idx);
            }
        }
        for idx in indices {
            let id = format!("{subject}/{idx:03}");
            let ann = annotations.join(&subject).join(format!("{idx:03}.json"));
            if !ann.exists() {
                log::warn!("{id}: no fiducial annotation, skipped");
                report.skipped.push(id);
                continue;
            }
            let result = std::fs::read_to_string(&ann)
                .map_err(|e| Error::io(&ann, e))
                .and_then(|t| Ok(serde_json::from_str::<FiducialPoints>(&t)?))
                .and_then(|f| preprocess_sample(raw_root, &subject, idx, &f, out_root, config));
            match result {
                Ok(c) => {
                    report.clamped_pixels += c;
                    report.processed.push(id);
                }
                Err(e) => {
                    log::error!("{id}: {e}");
                    report.failed.push(format!("{id}: {e}"));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(subject: &str, idx: u32, volume: u8) -> SampleRecord {
        let p = PathBuf::from(format!("{subject}/{idx}"));
        SampleRecord {
            subject_id: subject.into(),
            sample_index: idx,
            s0: p.clone(),
            s1: p.clone(),
            s2: p.clone(),
            visible: p,
            volume,
        }
    }

    fn population(subjects: usize, per: u32, volume: u8) -> Vec<SampleRecord> {
        (0..subjects).flat_map(|s| (0..per).map(move |i| record(&format!("p{volume}_{s:03}"), i, volume))).collect()
    }

    #[test]
    fn protocol_counts() {
        let recs = population(60, 8, 1);
        let split = make_split(&recs, Protocol::Protocol1, 0).unwrap();
        let (train, test) = split.select(&recs);
        assert_eq!((train.len(), test.len()), (240, 240));
        let mut recs2 = population(60, 8, 1);
        recs2.extend(population(51, 8, 2));
        let split = make_split(&recs2, Protocol::Protocol2, 0).unwrap();
        let (train, test) = split.select(&recs2);
        assert_eq!((train.len(), test.len()), (680, 208));
        assert!(make_split(&population(59, 8, 1), Protocol::Protocol1, 0).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let recs = population(12, 6, 1);
        let a = make_split(&recs, Protocol::Custom { train_fraction: 2.0 / 3.0 }, 3).unwrap();
        let b = make_split(&recs, Protocol::Custom { train_fraction: 2.0 / 3.0 }, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train_subjects.len(), a.test_subjects.len()), (8, 4));
        assert!(a.train_subjects.iter().all(|s| !a.test_subjects.contains(s)));
    }

    #[test]
    fn synthetic_difference_channels_have_zero_mean() {
        let cfg = SyntheticConfig { num_subjects: 2, samples_per_subject: 1, resolution: 32, seed: 1 };
        let s = render_synthetic_sample(&cfg, 1, 0).unwrap();
        for c in 1..3 {
            assert!(s.stokes.index_axis(Axis(0), c).mean().unwrap().abs() < 1e-12);
        }
        assert!(s.stokes.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(s.visible.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn different_subjects_render_differently() {
        let cfg = SyntheticConfig { num_subjects: 2, samples_per_subject: 1, resolution: 32, seed: 1 };
        let a = render_synthetic_sample(&cfg, 0, 0).unwrap();
        let b = render_synthetic_sample(&cfg, 1, 0).unwrap();
        assert!((&a.visible - &b.visible).mapv(f64::abs).sum() > 1.0);
    }
}
