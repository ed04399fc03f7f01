//! Image quality (PSNR, SSIM) and verification (cosine scores, ROC, AUC,
//! EER) metrics.
//!
//! Images are stored in `[-1, 1]`; [`image_metrics`] maps them to `[0, 1]`
//! and measures with a peak value and dynamic range of 1.

use std::io::Write;
use std::path::Path;

use candle_core::DType;
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayBase, Axis, Data, Dimension};
use serde::{Deserialize, Serialize, Serializer};

use crate::embeddings::IdentityExtractor;
use crate::error::{shape_err, Error, Result};
use crate::nn;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn serialize_real<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// `+inf` when the images are identical.
    #[serde(serialize_with = "serialize_real")]
    pub psnr_db: f64,
    pub ssim: f64,
}

/// `10 log10(max^2 / MSE)`, `+inf` when the images are identical.
pub fn psnr<S, T, D>(a: &ArrayBase<S, D>, b: &ArrayBase<T, D>, max_value: f64) -> Result<f64>
where
    S: Data<Elem = f64>,
    T: Data<Elem = f64>,
    D: Dimension,
{
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr: {:?} vs {:?}", a.shape(), b.shape()));
    }
    if !(max_value > 0.0) {
        return Err(Error::InvalidInput(format!("max_value must be > 0, got {max_value}")));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("psnr of empty images".into()));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" correlation with a symmetric kernel.
fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..n).map(|t| k[t] * x[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..n).map(|t| k[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean local SSIM of two planes over every fully contained 11×11 window.
pub fn ssim_plane(a: &Array2<f64>, b: &Array2<f64>, dynamic_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err!("ssim: {:?} vs {:?}", a.dim(), b.dim()));
    }
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}")));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&(a * a), &k);
    let bb = filter_valid(&(b * b), &k);
    let ab = filter_valid(&(a * b), &k);
    let mut total = 0.0;
    for (((ma, mb), (xa, xb)), xab) in mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab) {
        let va = xa - ma * ma;
        let vb = xb - mb * mb;
        let cov = xab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// SSIM of `(C, H, W)` images, averaged over channels.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, dynamic_range: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(shape_err!("ssim: {:?} vs {:?}", a.dim(), b.dim()));
    }
    let c = a.dim().0;
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim_plane(&a.index_axis(Axis(0), ch).to_owned(), &b.index_axis(Axis(0), ch).to_owned(), dynamic_range)?;
    }
    Ok(total / c as f64)
}

pub fn to_unit_range(a: &Array3<f64>) -> Array3<f64> {
    a.mapv(|v| (v + 1.0) / 2.0)
}

/// Replicate a single-channel image to `channels` channels.
pub fn replicate_channels(a: &Array3<f64>, channels: usize) -> Result<Array3<f64>> {
    if a.dim().0 == channels {
        return Ok(a.clone());
    }
    if a.dim().0 != 1 {
        return Err(shape_err!("cannot replicate {} channels to {channels}", a.dim().0));
    }
    let views: Vec<_> = (0..channels).map(|_| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| shape_err!("{e}"))
}

/// PSNR and SSIM of two `[-1, 1]` images measured in `[0, 1]`.
pub fn image_metrics(a: &Array3<f64>, b: &Array3<f64>) -> Result<MetricReport> {
    let (ua, ub) = (to_unit_range(a), to_unit_range(b));
    Ok(MetricReport { psnr_db: psnr(&ua, &ub, 1.0)?, ssim: ssim(&ua, &ub, 1.0)? })
}

/// `u·v / (|u| |v|)`.
pub fn cosine_score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(shape_err!("cosine: lengths {} and {}", u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::InvalidInput("cosine score of a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScorePair {
    pub probe_id: String,
    pub gallery_id: String,
    pub score: f64,
    pub same_subject: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    #[serde(serialize_with = "serialize_real")]
    pub threshold: f64,
    pub far: f64,
    pub tar: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocSummary {
    /// Ordered by decreasing threshold, so FAR and TAR never decrease.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub eer: f64,
    /// `(FAR, TAR)` where the ROC crosses FAR = 1 - TAR.
    pub eer_point: (f64, f64),
}

/// Threshold sweep over `(score, is_positive)` pairs. A pair is accepted
/// when its score exceeds the threshold; thresholds sit at `+inf`, midway
/// between consecutive distinct scores, and `-inf`.
pub fn roc(scores: &[(f64, bool)]) -> Result<RocSummary> {
    let pos = scores.iter().filter(|s| s.1).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "ROC needs positive and negative pairs, got {pos} positive and {neg} negative"
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.0.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite verification score {}", bad.0)));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, far: 0.0, tar: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() { (s + sorted[i].0) / 2.0 } else { f64::NEG_INFINITY };
        points.push(RocPoint { threshold, far: fp as f64 / neg as f64, tar: tp as f64 / pos as f64 });
    }
    let auc = points.windows(2).map(|w| (w[1].far - w[0].far) * (w[1].tar + w[0].tar) / 2.0).sum();
    let eer_point = equal_error_point(&points);
    Ok(RocSummary { points, auc, eer: eer_point.0, eer_point })
}

/// First crossing of `FAR + TAR - 1 = 0` along the polyline, linearly
/// interpolated within the bracketing segment.
fn equal_error_point(points: &[RocPoint]) -> (f64, f64) {
    let f = |p: &RocPoint| p.far + p.tar - 1.0;
    for w in points.windows(2) {
        let (f0, f1) = (f(&w[0]), f(&w[1]));
        if f0 == 0.0 {
            return (w[0].far, w[0].tar);
        }
        if f0 < 0.0 && f1 >= 0.0 {
            let t = -f0 / (f1 - f0);
            return (w[0].far + t * (w[1].far - w[0].far), w[0].tar + t * (w[1].tar - w[0].tar));
        }
    }
    let last = points.last().expect("non-empty roc");
    (last.far, last.tar)
}

pub fn roc_of(pairs: &[ScorePair]) -> Result<RocSummary> {
    roc(&pairs.iter().map(|p| (p.score, p.same_subject)).collect::<Vec<_>>())
}

/// One image with its identifiers, `(C, H, W)` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: String,
    pub subject: String,
    pub image: Array3<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairingPolicy {
    /// Every probe against every gallery image.
    #[default]
    AllPairs,
    /// Every probe against every gallery image taken from another sample.
    CrossSample,
}

impl std::str::FromStr for PairingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-pairs" => Ok(PairingPolicy::AllPairs),
            "cross-sample" => Ok(PairingPolicy::CrossSample),
            _ => Err(Error::InvalidInput(format!("unknown pairing policy `{s}` (expected all-pairs or cross-sample)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvaluationReport {
    pub mean: MetricReport,
    pub per_image: Vec<(String, MetricReport)>,
    pub roc: RocSummary,
    pub scores: Vec<ScorePair>,
    pub positives: usize,
    pub negatives: usize,
}

fn features(identity: &IdentityExtractor, images: &[EvalImage]) -> Result<Vec<Vec<f64>>> {
    let dtype = identity.extractor.dtype();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let refs: Vec<&Array3<f64>> = chunk.iter().map(|e| &e.image).collect();
        let batch = nn::stack_arrays(&refs, dtype)?;
        out.extend(identity.verification_features(&batch)?);
    }
    Ok(out)
}

/// Quality metrics between `probes[i]` and `targets[i]`, then cosine
/// verification scores of probe features against target (gallery) features.
pub fn evaluate_pairs(
    probes: &[EvalImage],
    targets: &[EvalImage],
    identity: &IdentityExtractor,
    policy: PairingPolicy,
) -> Result<EvaluationReport> {
    if probes.is_empty() || targets.is_empty() {
        return Err(Error::InvalidInput("evaluation needs non-empty probe and target sets".into()));
    }
    if probes.len() != targets.len() {
        return Err(Error::InvalidInput(format!("{} probes but {} targets", probes.len(), targets.len())));
    }
    let mut per_image = Vec::with_capacity(probes.len());
    for (p, t) in probes.iter().zip(targets) {
        let probe = replicate_channels(&p.image, t.image.dim().0)?;
        per_image.push((p.id.clone(), image_metrics(&probe, &t.image)?));
    }
    let n = per_image.len() as f64;
    let mean = MetricReport {
        psnr_db: per_image.iter().map(|m| m.1.psnr_db).sum::<f64>() / n,
        ssim: per_image.iter().map(|m| m.1.ssim).sum::<f64>() / n,
    };

    let extractor_channels = identity.extractor.config().in_channels;
    let probe_inputs: Vec<EvalImage> = probes
        .iter()
        .map(|p| Ok(EvalImage { image: replicate_channels(&p.image, extractor_channels)?, ..p.clone() }))
        .collect::<Result<_>>()?;
    let pf = features(identity, &probe_inputs)?;
    let gf = features(identity, targets)?;
    let mut scores = Vec::new();
    for (p, fp) in probes.iter().zip(&pf) {
        for (g, fg) in targets.iter().zip(&gf) {
            if policy == PairingPolicy::CrossSample && p.id == g.id {
                continue;
            }
            scores.push(ScorePair {
                probe_id: p.id.clone(),
                gallery_id: g.id.clone(),
                score: cosine_score(fp, fg)?,
                same_subject: p.subject == g.subject,
            });
        }
    }
    let positives = scores.iter().filter(|s| s.same_subject).count();
    let negatives = scores.len() - positives;
    let roc = roc_of(&scores)?;
    Ok(EvaluationReport { mean, per_image, roc, scores, positives, negatives })
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

pub fn write_scores_csv(scores: &[ScorePair], path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(f, "probe_id,gallery_id,score,same_subject").map_err(io)?;
    for s in scores {
        writeln!(f, "{},{},{},{}", s.probe_id, s.gallery_id, s.score, s.same_subject).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn write_roc_csv(roc: &RocSummary, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(f, "threshold,far,tar").map_err(io)?;
    for p in &roc.points {
        writeln!(f, "{},{},{}", p.threshold, p.far, p.tar).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsSummary {
    #[serde(serialize_with = "serialize_real")]
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub auc: f64,
    pub eer: f64,
    pub pairs: usize,
    pub positives: usize,
    pub negatives: usize,
}

impl From<&EvaluationReport> for MetricsSummary {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            psnr_mean: r.mean.psnr_db,
            ssim_mean: r.mean.ssim,
            auc: r.roc.auc,
            eer: r.roc.eer,
            pairs: r.scores.len(),
            positives: r.positives,
            negatives: r.negatives,
        }
    }
}

pub fn write_metrics_json(summary: &MetricsSummary, path: &Path) -> Result<()> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, summary)?;
    writeln!(f).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                let (px, py) = (x as i64 + dx, y as i64 + dy);
                if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                    img.put_pixel(px as u32, py as u32, color);
                }
            }
        }
    }
}

/// Render the ROC curve (FAR on x, TAR on y) with the chance diagonal and a
/// marker at the equal-error point.
pub fn render_roc_png(roc: &RocSummary, size: u32, path: &Path) -> Result<()> {
    let margin = (size / 10).max(4) as f64;
    let span = size as f64 - 2.0 * margin;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let map = |far: f64, tar: f64| (margin + far * span, margin + (1.0 - tar) * span);
    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, map(0.0, 0.0), map(1.0, 0.0), axis);
    draw_line(&mut img, map(0.0, 0.0), map(0.0, 1.0), axis);
    draw_line(&mut img, map(0.0, 0.0), map(1.0, 1.0), Rgb([190, 190, 190]));
    for tick in 1..10 {
        let v = tick as f64 / 10.0;
        let (x, y) = map(v, 0.0);
        draw_line(&mut img, (x, y), (x, y + margin / 3.0), axis);
        let (x, y) = map(0.0, v);
        draw_line(&mut img, (x - margin / 3.0, y), (x, y), axis);
    }
    for w in roc.points.windows(2) {
        draw_line(&mut img, map(w[0].far, w[0].tar), map(w[1].far, w[1].tar), Rgb([200, 30, 30]));
    }
    let (ex, ey) = map(roc.eer_point.0, roc.eer_point.1);
    for d in -4i64..=4 {
        draw_line(&mut img, (ex + d as f64, ey - 4.0), (ex + d as f64, ey + 4.0), Rgb([30, 30, 200]));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Map a `(C, H, W)` tensor batch element to an array, used when scoring
/// in-memory generator outputs.
pub fn tensor_image(t: &candle_core::Tensor, index: usize) -> Result<Array3<f64>> {
    nn::tensor_to_array(&t.to_dtype(DType::F64)?, index)
}
