//! Brute-force reference implementations used only by tests. Nothing here
//! calls into the library: each value is recomputed from its definition
//! with plain loops, so agreement with the production code is evidence
//! rather than tautology. All oracles reject inputs above their size caps.
#![allow(dead_code)]

/// Largest image (pixels per plane) the image oracles accept.
pub const MAX_PIXELS: usize = 128 * 128;
/// Largest score set the ROC oracles accept.
pub const MAX_SCORES: usize = 5_000;
/// Largest parameter vector the finite-difference oracle accepts.
pub const MAX_PARAMS: usize = 4_096;

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub values: Vec<f64>,
    pub method: &'static str,
}

impl OracleResult {
    pub fn value(&self) -> f64 {
        self.values[0]
    }
}

pub type Plane = Vec<Vec<f64>>;

fn check_planes(a: &Plane, b: &Plane) -> Result<(usize, usize), String> {
    let h = a.len();
    let w = a.first().map_or(0, |r| r.len());
    if h == 0 || w == 0 {
        return Err("empty image".into());
    }
    if b.len() != h || a.iter().chain(b).any(|r| r.len() != w) {
        return Err("images differ in shape".into());
    }
    if h * w > MAX_PIXELS {
        return Err(format!("{h}x{w} exceeds the oracle cap of {MAX_PIXELS} pixels"));
    }
    Ok((h, w))
}

pub fn naive_mse_psnr(a: &Plane, b: &Plane, max_value: f64) -> Result<OracleResult, String> {
    let (h, w) = check_planes(a, b)?;
    let mut sum = 0.0;
    for i in 0..h {
        for j in 0..w {
            let d = a[i][j] - b[i][j];
            sum += d * d;
        }
    }
    let mse = sum / (h * w) as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_value * max_value / mse).log10() };
    Ok(OracleResult { values: vec![psnr, mse], method: "double loop over pixels" })
}

/// Mean SSIM over every fully contained 11×11 window, each window weighted
/// by a normalized 2-D Gaussian (σ = 1.5), statistics taken directly as
/// weighted central moments.
pub fn naive_windowed_ssim(a: &Plane, b: &Plane, dynamic_range: f64) -> Result<OracleResult, String> {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    let (h, w) = check_planes(a, b)?;
    if h < WIN || w < WIN {
        return Err(format!("{h}x{w} is smaller than the {WIN}x{WIN} window"));
    }
    let c = (WIN / 2) as f64;
    let mut g = vec![vec![0.0; WIN]; WIN];
    let mut total = 0.0;
    for (y, row) in g.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            *v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            total += *v;
        }
    }
    let c1 = (0.01 * dynamic_range).powi(2);
    let c2 = (0.03 * dynamic_range).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for top in 0..=h - WIN {
        for left in 0..=w - WIN {
            let (mut ma, mut mb) = (0.0, 0.0);
            for y in 0..WIN {
                for x in 0..WIN {
                    let k = g[y][x] / total;
                    ma += k * a[top + y][left + x];
                    mb += k * b[top + y][left + x];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in 0..WIN {
                for x in 0..WIN {
                    let k = g[y][x] / total;
                    let da = a[top + y][left + x] - ma;
                    let db = b[top + y][left + x] - mb;
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(OracleResult { values: vec![acc / count as f64], method: "per-window gaussian moments" })
}

fn split_scores(scores: &[(f64, bool)]) -> Result<(Vec<f64>, Vec<f64>), String> {
    if scores.len() > MAX_SCORES {
        return Err(format!("{} scores exceed the oracle cap of {MAX_SCORES}", scores.len()));
    }
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err("need at least one genuine and one impostor score".into());
    }
    Ok((pos, neg))
}

/// Probability that a genuine score beats an impostor score, ties counted ½.
pub fn pairwise_auc(scores: &[(f64, bool)]) -> Result<OracleResult, String> {
    let (pos, neg) = split_scores(scores)?;
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(OracleResult { values: vec![wins / (pos.len() * neg.len()) as f64], method: "exhaustive pair counting" })
}

/// ROC vertices `(far, tar)` from accepting every score `>= t` for each
/// distinct score `t`, plus the two end points.
pub fn roc_vertices(scores: &[(f64, bool)]) -> Result<Vec<(f64, f64)>, String> {
    let (pos, neg) = split_scores(scores)?;
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut v = vec![(0.0, 0.0)];
    for t in thresholds {
        let far = neg.iter().filter(|s| **s >= t).count() as f64 / neg.len() as f64;
        let tar = pos.iter().filter(|s| **s >= t).count() as f64 / pos.len() as f64;
        v.push((far, tar));
    }
    v.push((1.0, 1.0));
    Ok(v)
}

/// Euclidean distance from `p` to the polyline through `vertices`.
pub fn distance_to_polyline(vertices: &[(f64, f64)], p: (f64, f64)) -> f64 {
    let mut best = f64::INFINITY;
    for s in vertices.windows(2) {
        let (a, b) = (s[0], s[1]);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
        let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
        best = best.min(((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt());
    }
    best
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for each coordinate.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Result<OracleResult, String> {
    if params.len() > MAX_PARAMS {
        return Err(format!("{} parameters exceed the oracle cap of {MAX_PARAMS}", params.len()));
    }
    if !(h > 0.0) {
        return Err("step must be positive".into());
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let up = f(&x);
        x[i] = params[i] - h;
        let down = f(&x);
        x[i] = params[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(OracleResult { values: grad, method: "central differences" })
}

/// Direct 2-D cross-correlation of a `(C, H, W)` input with `(O, C, K, K)`
/// weights, zero padding, no bias.
pub fn naive_conv2d(
    input: &[Plane],
    weight: &[Vec<Plane>],
    stride: usize,
    padding: usize,
) -> Result<Vec<Plane>, String> {
    let c = input.len();
    let h = input.first().map_or(0, |p| p.len());
    let w = input.first().and_then(|p| p.first()).map_or(0, |r| r.len());
    if c * h * w > MAX_PIXELS {
        return Err("input exceeds the oracle cap".into());
    }
    let k = weight.first().and_then(|o| o.first()).map_or(0, |p| p.len());
    if k == 0 || weight.iter().any(|o| o.len() != c) || h + 2 * padding < k || w + 2 * padding < k {
        return Err("weight shape incompatible with input".into());
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![vec![vec![0.0; ow]; oh]; weight.len()];
    for (o, wo) in weight.iter().enumerate() {
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for (ci, plane) in input.iter().enumerate() {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - padding as isize;
                            let ix = (x * stride + kx) as isize - padding as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                s += plane[iy as usize][ix as usize] * wo[ci][ky][kx];
                            }
                        }
                    }
                }
                out[o][y][x] = s;
            }
        }
    }
    Ok(out)
}

/// Channels leaving a dense block: every layer appends `growth` maps to
/// the running concatenation.
pub fn dense_block_channels(c_in: usize, layers: usize, growth: usize) -> usize {
    let mut c = c_in;
    for _ in 0..layers {
        c += growth;
    }
    c
}

/// Channels of an encoder stream: stem, then dense levels separated by
/// compressing transitions.
pub fn encoder_channels(stem: usize, blocks: &[usize], growth: usize, compression: f64) -> usize {
    let mut c = stem;
    for (i, n) in blocks.iter().enumerate() {
        c = dense_block_channels(c, *n, growth);
        if i + 1 < blocks.len() {
            c = ((c as f64 * compression).floor() as usize).max(1);
        }
    }
    c
}

#[test]
fn oracle_self_checks() {
    let sep: Vec<(f64, bool)> = vec![(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
    assert_eq!(pairwise_auc(&sep).unwrap().value(), 1.0);
    let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-4).unwrap();
    assert!((g.value() - 6.0).abs() < 1e-6);
    let big = vec![vec![0.0; 200]; 200];
    assert!(naive_mse_psnr(&big, &big, 1.0).is_err());
    assert!(finite_diff_grad(|_| 0.0, &vec![0.0; MAX_PARAMS + 1], 1e-3).is_err());
    assert_eq!(dense_block_channels(16, 2, 8), 32);
}
