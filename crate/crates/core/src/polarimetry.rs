//! Stokes images from division-of-time polarimeter frames, plus the
//! radiometric and geometric preprocessing applied before training:
//! non-uniformity correction, bad-pixel repair, fiducial alignment and
//! 16-bit PNG storage.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub type Plane = Array2<f64>;

/// Intensities captured through polarizers at 0°, 45°, 90° and 135°.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPolarimetricFrame {
    pub i0: Plane,
    pub i45: Plane,
    pub i90: Plane,
    pub i135: Plane,
    pub bad_pixel_mask: Option<Array2<bool>>,
}

impl RawPolarimetricFrame {
    pub fn new(i0: Plane, i45: Plane, i90: Plane, i135: Plane) -> Result<Self> {
        let frame = Self { i0, i45, i90, i135, bad_pixel_mask: None };
        frame.validate()?;
        Ok(frame)
    }

    pub fn with_mask(mut self, mask: Array2<bool>) -> Result<Self> {
        if mask.dim() != self.i0.dim() {
            return Err(shape_err!("mask {:?} vs frame {:?}", mask.dim(), self.i0.dim()));
        }
        self.bad_pixel_mask = Some(mask);
        Ok(self)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.i0.dim()
    }

    pub fn planes(&self) -> [(&'static str, &Plane); 4] {
        [("i0", &self.i0), ("i45", &self.i45), ("i90", &self.i90), ("i135", &self.i135)]
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.i0.dim();
        for (name, p) in self.planes() {
            if p.dim() != dim {
                return Err(shape_err!("plane {name} is {:?}, expected {:?}", p.dim(), dim));
            }
            if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "plane {name} has invalid intensity {v}; intensities must be finite and non-negative"
                )));
            }
        }
        if let Some(mask) = &self.bad_pixel_mask {
            if mask.dim() != dim {
                return Err(shape_err!("mask {:?} vs frame {:?}", mask.dim(), dim));
            }
        }
        Ok(())
    }

    /// Replace masked pixels in every plane (see [`correct_bad_pixels`]).
    pub fn corrected(&self) -> Result<Self> {
        let Some(mask) = &self.bad_pixel_mask else {
            return Ok(self.clone());
        };
        Ok(Self {
            i0: correct_bad_pixels(&self.i0, mask)?,
            i45: correct_bad_pixels(&self.i45, mask)?,
            i90: correct_bad_pixels(&self.i90, mask)?,
            i135: correct_bad_pixels(&self.i135, mask)?,
            bad_pixel_mask: None,
        })
    }
}

/// Linear Stokes images: total intensity and the two polarization differences.
#[derive(Clone, Debug, PartialEq)]
pub struct StokesImage {
    pub s0: Plane,
    pub s1: Plane,
    pub s2: Plane,
}

impl StokesImage {
    pub fn new(s0: Plane, s1: Plane, s2: Plane) -> Result<Self> {
        if s1.dim() != s0.dim() || s2.dim() != s0.dim() {
            return Err(shape_err!("stokes planes {:?} {:?} {:?}", s0.dim(), s1.dim(), s2.dim()));
        }
        if s0.iter().chain(s1.iter()).chain(s2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("stokes planes must be finite".into()));
        }
        Ok(Self { s0, s1, s2 })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.s0.dim()
    }

    /// Channel-stacked `(3, H, W)` array in (S0, S1, S2) order.
    pub fn to_array(&self) -> Array3<f64> {
        ndarray::stack(Axis(0), &[self.s0.view(), self.s1.view(), self.s2.view()])
            .expect("planes share a shape")
    }

    pub fn from_array(a: &Array3<f64>) -> Result<Self> {
        if a.dim().0 != 3 {
            return Err(shape_err!("expected 3 stokes channels, got {}", a.dim().0));
        }
        Self::new(
            a.index_axis(Axis(0), 0).to_owned(),
            a.index_axis(Axis(0), 1).to_owned(),
            a.index_axis(Axis(0), 2).to_owned(),
        )
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { s0: &self.s0 * factor, s1: &self.s1 * factor, s2: &self.s2 * factor }
    }
}

pub fn compute_stokes(frame: &RawPolarimetricFrame) -> Result<StokesImage> {
    frame.validate()?;
    Ok(StokesImage {
        s0: &frame.i0 + &frame.i90,
        s1: &frame.i0 - &frame.i90,
        s2: &frame.i45 - &frame.i135,
    })
}

/// Recover the four orientations from Stokes images. `s45_sum` supplies
/// `i45 + i135`, which the three linear Stokes images do not determine.
pub fn invert_stokes(stokes: &StokesImage, s45_sum: &Plane) -> Result<RawPolarimetricFrame> {
    if s45_sum.dim() != stokes.dim() {
        return Err(shape_err!("s45_sum {:?} vs stokes {:?}", s45_sum.dim(), stokes.dim()));
    }
    let i0 = (&stokes.s0 + &stokes.s1) * 0.5;
    let i90 = (&stokes.s0 - &stokes.s1) * 0.5;
    let i45 = (s45_sum + &stokes.s2) * 0.5;
    let i135 = (s45_sum - &stokes.s2) * 0.5;
    RawPolarimetricFrame::new(i0, i45, i90, i135).map_err(|e| match e {
        Error::InvalidInput(msg) => Error::InvalidInput(format!("unphysical stokes input: {msg}")),
        other => other,
    })
}

/// Per-pixel two-point non-uniformity correction `gain · raw + offset`.
pub fn apply_nuc(plane: &Plane, gain: &Plane, offset: &Plane) -> Result<Plane> {
    if gain.dim() != plane.dim() || offset.dim() != plane.dim() {
        return Err(shape_err!("nuc maps must match plane {:?}", plane.dim()));
    }
    Ok(plane * gain + offset)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Replace masked pixels by the median of the unmasked pixels in their 3×3
/// neighborhood. A masked pixel with no valid neighbor takes the median of
/// all valid pixels in the plane.
pub fn correct_bad_pixels(plane: &Plane, mask: &Array2<bool>) -> Result<Plane> {
    if mask.dim() != plane.dim() {
        return Err(shape_err!("mask {:?} vs plane {:?}", mask.dim(), plane.dim()));
    }
    let (h, w) = plane.dim();
    let mut out = plane.clone();
    let mut global: Option<f64> = None;
    let mut window = Vec::with_capacity(8);
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            window.clear();
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if !mask[[yy, xx]] {
                        window.push(plane[[yy, xx]]);
                    }
                }
            }
            out[[y, x]] = if window.is_empty() {
                *global.get_or_insert_with(|| {
                    let mut valid: Vec<f64> =
                        plane.iter().zip(mask.iter()).filter(|(_, m)| !**m).map(|(v, _)| *v).collect();
                    if valid.is_empty() {
                        0.0
                    } else {
                        median(&mut valid)
                    }
                })
            } else {
                median(&mut window)
            };
        }
    }
    Ok(out)
}

/// Eye centers and nose base, `(x, y)` in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiducialPoints {
    pub left_eye: [f64; 2],
    pub right_eye: [f64; 2],
    pub nose_base: [f64; 2],
}

impl FiducialPoints {
    pub fn points(&self) -> [[f64; 2]; 3] {
        [self.left_eye, self.right_eye, self.nose_base]
    }

    /// Canonical landmark positions for an `m × n` crop.
    pub fn canonical(height: usize, width: usize) -> Self {
        let (h, w) = (height as f64, width as f64);
        Self {
            left_eye: [0.35 * w, 0.40 * h],
            right_eye: [0.65 * w, 0.40 * h],
            nose_base: [0.50 * w, 0.62 * h],
        }
    }

    pub fn transformed(&self, t: &AffineTransform) -> Self {
        Self {
            left_eye: t.apply(self.left_eye),
            right_eye: t.apply(self.right_eye),
            nose_base: t.apply(self.nose_base),
        }
    }
}

/// 2×3 affine map `(x, y) -> (a x + b y + c, d x + e y + f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl AffineTransform {
    pub fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [[1.0, 0.0, dx], [0.0, 1.0, dy]] }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.m;
        [m[0][0] * p[0] + m[0][1] * p[1] + m[0][2], m[1][0] * p[0] + m[1][1] * p[1] + m[1][2]]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &AffineTransform) -> Self {
        let a = &self.m;
        let b = &other.m;
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            m[r][0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            m[r][1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            m[r][2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Self { m }
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let scale = m[0][0].abs().max(m[0][1].abs()).max(m[1][0].abs()).max(m[1][1].abs());
        if !det.is_finite() || det.abs() <= 1e-12 * scale * scale {
            return Err(Error::Singular(format!("affine transform with determinant {det}")));
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        Ok(Self {
            m: [
                [a, b, -(a * m[0][2] + b * m[1][2])],
                [c, d, -(c * m[0][2] + d * m[1][2])],
            ],
        })
    }
}

/// Exact affine map sending the three `src` landmarks onto `dst`.
pub fn solve_affine(src: &FiducialPoints, dst: &FiducialPoints) -> Result<AffineTransform> {
    let s = src.points();
    let d = dst.points();
    let a = Matrix3::from_fn(|r, c| if c < 2 { s[r][c] } else { 1.0 });
    let extent = s.iter().flat_map(|p| p.iter()).fold(1.0f64, |acc, v| acc.max(v.abs()));
    let det = a.determinant();
    if !det.is_finite() || det.abs() <= 1e-12 * extent * extent {
        return Err(Error::Singular(format!(
            "source fiducials are collinear (determinant {det:e})"
        )));
    }
    let lu = a.lu();
    let mut m = [[0.0; 3]; 2];
    for (row, out) in m.iter_mut().enumerate() {
        let rhs = Vector3::new(d[0][row], d[1][row], d[2][row]);
        let sol = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("fiducial system has no unique solution".into()))?;
        *out = [sol[0], sol[1], sol[2]];
    }
    Ok(AffineTransform { m })
}

fn bilinear_sample(plane: &Plane, x: f64, y: f64) -> f64 {
    let (h, w) = plane.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[[yy as usize, xx as usize]]
        }
    };
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let weight = wy * wx;
            if weight != 0.0 {
                acc += weight * at(y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

/// Warp `plane` by `transform` (source pixel coordinates to canonical
/// coordinates) and crop the canonical frame to `height × width`. Samples
/// are bilinear; samples outside the source read as 0.
pub fn align_and_crop(
    plane: &Plane,
    transform: &AffineTransform,
    height: usize,
    width: usize,
) -> Result<Plane> {
    if height == 0 || width == 0 {
        return Err(shape_err!("crop size must be positive, got {height}x{width}"));
    }
    let inv = transform.inverse()?;
    Ok(Plane::from_shape_fn((height, width), |(y, x)| {
        let [sx, sy] = inv.apply([x as f64, y as f64]);
        bilinear_sample(plane, sx, sy)
    }))
}

/// Channel-wise [`align_and_crop`] for `(C, H, W)` images.
pub fn align_and_crop_image(
    image: &Array3<f64>,
    transform: &AffineTransform,
    height: usize,
    width: usize,
) -> Result<Array3<f64>> {
    let planes = image
        .axis_iter(Axis(0))
        .map(|p| align_and_crop(&p.to_owned(), transform, height, width))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).map_err(|e| shape_err!("{e}"))
}

/// Outcome of a PNG write: how many samples fell outside `[-1, 1]` and were
/// clamped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PngWriteReport {
    pub clamped: usize,
}

fn to_u16(v: f64, clamped: &mut usize) -> u16 {
    let c = if v.is_nan() {
        *clamped += 1;
        0.0
    } else if !(-1.0..=1.0).contains(&v) {
        *clamped += 1;
        v.clamp(-1.0, 1.0)
    } else {
        v
    };
    ((c + 1.0) * 0.5 * 65535.0).round() as u16
}

fn from_u16(q: u16) -> f64 {
    q as f64 / 65535.0 * 2.0 - 1.0
}

/// Write a `(C, H, W)` image with values in `[-1, 1]` as a 16-bit grayscale
/// (`C = 1`) or RGB (`C = 3`) PNG, mapping `[-1, 1]` linearly onto `[0, 65535]`.
pub fn write_png16(image: &Array3<f64>, path: &Path) -> Result<PngWriteReport> {
    let (c, h, w) = image.dim();
    let mut report = PngWriteReport::default();
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    match c {
        1 => {
            let buf = ImageBuffer::<Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
                Luma([to_u16(image[[0, y as usize, x as usize]], &mut report.clamped)])
            });
            buf.save(path).map_err(|e| Error::image(path, e))?;
        }
        3 => {
            let buf = ImageBuffer::<Rgb<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([
                    to_u16(image[[0, y, x]], &mut report.clamped),
                    to_u16(image[[1, y, x]], &mut report.clamped),
                    to_u16(image[[2, y, x]], &mut report.clamped),
                ])
            });
            buf.save(path).map_err(|e| Error::image(path, e))?;
        }
        other => return Err(shape_err!("png output needs 1 or 3 channels, got {other}")),
    }
    if report.clamped > 0 {
        log::warn!("{}: clamped {} samples to [-1, 1]", path.display(), report.clamped);
    }
    Ok(report)
}

pub fn write_plane_png16(plane: &Plane, path: &Path) -> Result<PngWriteReport> {
    write_png16(&plane.clone().insert_axis(Axis(0)), path)
}

/// Read a 16-bit (or 8-bit, promoted) grayscale or RGB PNG into a
/// `(C, H, W)` array in `[-1, 1]`.
pub fn read_png16(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let buf = img.into_luma16();
        Ok(Array3::from_shape_fn((1, h, w), |(_, y, x)| {
            from_u16(buf.get_pixel(x as u32, y as u32)[0])
        }))
    } else {
        let buf = img.into_rgb16();
        Ok(Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            from_u16(buf.get_pixel(x as u32, y as u32)[c])
        }))
    }
}

pub fn read_plane_png16(path: &Path) -> Result<Plane> {
    let img = read_png16(path)?;
    if img.dim().0 != 1 {
        return Err(shape_err!("{}: expected a single-channel png", path.display()));
    }
    Ok(img.index_axis(Axis(0), 0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn constant(h: usize, w: usize, v: f64) -> Plane {
        Plane::from_elem((h, w), v)
    }

    #[test]
    fn unpolarized_constant_scene() {
        let c = 0.7;
        let f = RawPolarimetricFrame::new(
            constant(3, 4, c),
            constant(3, 4, c),
            constant(3, 4, c),
            constant(3, 4, c),
        )
        .unwrap();
        let s = compute_stokes(&f).unwrap();
        assert!(s.s0.iter().all(|v| *v == 2.0 * c));
        assert!(s.s1.iter().all(|v| *v == 0.0));
        assert!(s.s2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn horizontally_polarized_pixel() {
        let f = RawPolarimetricFrame::new(
            array![[1.0]],
            array![[0.5]],
            array![[0.0]],
            array![[0.5]],
        )
        .unwrap();
        let s = compute_stokes(&f).unwrap();
        assert_eq!((s.s0[[0, 0]], s.s1[[0, 0]], s.s2[[0, 0]]), (1.0, 1.0, 0.0));
    }

    #[test]
    fn frame_rejects_bad_planes() {
        let ok = constant(2, 2, 1.0);
        assert!(matches!(
            RawPolarimetricFrame::new(ok.clone(), ok.clone(), constant(2, 3, 1.0), ok.clone()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            RawPolarimetricFrame::new(ok.clone(), constant(2, 2, -0.1), ok.clone(), ok.clone()),
            Err(Error::InvalidInput(_))
        ));
        assert!(RawPolarimetricFrame::new(ok.clone(), ok.clone(), constant(2, 2, f64::NAN), ok)
            .is_err());
    }

    #[test]
    fn invert_constant_stokes() {
        let s = StokesImage::new(constant(2, 2, 2.0), constant(2, 2, 0.0), constant(2, 2, 0.0))
            .unwrap();
        let f = invert_stokes(&s, &constant(2, 2, 2.0)).unwrap();
        for (_, p) in f.planes() {
            assert!(p.iter().all(|v| *v == 1.0));
        }
        let bad = StokesImage::new(constant(1, 1, 1.0), constant(1, 1, 3.0), constant(1, 1, 0.0))
            .unwrap();
        assert!(invert_stokes(&bad, &constant(1, 1, 1.0)).is_err());
    }

    #[test]
    fn empty_mask_is_identity() {
        let p = Plane::from_shape_fn((4, 5), |(y, x)| (y * 5 + x) as f64);
        let m = Array2::from_elem((4, 5), false);
        assert_eq!(correct_bad_pixels(&p, &m).unwrap(), p);
    }

    #[test]
    fn even_neighbor_median() {
        let p = array![[1.0, 2.0, 3.0], [4.0, 100.0, 5.0], [6.0, 7.0, 8.0]];
        let mut m = Array2::from_elem((3, 3), false);
        m[[1, 1]] = true;
        let out = correct_bad_pixels(&p, &m).unwrap();
        assert_eq!(out[[1, 1]], 4.5);
        let mut expect = p.clone();
        expect[[1, 1]] = 4.5;
        assert_eq!(out, expect);
    }

    #[test]
    fn constant_plane_with_one_bad_pixel() {
        let mut p = constant(5, 5, 3.0);
        p[[2, 3]] = -40.0;
        let mut m = Array2::from_elem((5, 5), false);
        m[[2, 3]] = true;
        assert_eq!(correct_bad_pixels(&p, &m).unwrap(), constant(5, 5, 3.0));
    }

    #[test]
    fn fully_masked_neighborhood_uses_global_median() {
        let mut p = Plane::from_shape_fn((5, 5), |(y, x)| (y * 5 + x) as f64);
        let mut m = Array2::from_elem((5, 5), false);
        for y in 0..3 {
            for x in 0..3 {
                m[[y, x]] = true;
                p[[y, x]] = 1000.0;
            }
        }
        let out = correct_bad_pixels(&p, &m).unwrap();
        let mut valid: Vec<f64> = (0..25)
            .filter(|i| !(i / 5 < 3 && i % 5 < 3))
            .map(|i| i as f64)
            .collect();
        let g = median(&mut valid);
        assert_eq!(out[[1, 1]], g);
        // Pixels with valid neighbors still use their local window.
        assert_ne!(out[[0, 2]], g);
    }

    #[test]
    fn affine_identity_and_translation() {
        let p = FiducialPoints { left_eye: [30.0, 40.0], right_eye: [70.0, 41.0], nose_base: [50.0, 70.0] };
        let t = solve_affine(&p, &p).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((t.m[r][c] - expect).abs() < 1e-12);
            }
        }
        let shifted = p.transformed(&AffineTransform::translation(10.0, 0.0));
        let t = solve_affine(&p, &shifted).unwrap();
        assert!((t.m[0][2] - 10.0).abs() < 1e-9 && t.m[1][2].abs() < 1e-9);
        assert!((t.m[0][0] - 1.0).abs() < 1e-12 && (t.m[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_fiducials_are_singular() {
        let p = FiducialPoints { left_eye: [0.0, 0.0], right_eye: [1.0, 1.0], nose_base: [2.0, 2.0] };
        let q = FiducialPoints::canonical(64, 64);
        assert!(matches!(solve_affine(&p, &q), Err(Error::Singular(_))));
    }

    #[test]
    fn identity_warp_and_integer_shift() {
        let p = Plane::from_shape_fn((6, 7), |(y, x)| (y * 7 + x) as f64 + 0.5);
        assert_eq!(align_and_crop(&p, &AffineTransform::identity(), 6, 7).unwrap(), p);
        let out = align_and_crop(&p, &AffineTransform::translation(2.0, 1.0), 6, 7).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                let expect = if y >= 1 && x >= 2 { p[[y - 1, x - 2]] } else { 0.0 };
                assert_eq!(out[[y, x]], expect);
            }
        }
        assert!(align_and_crop(&p, &AffineTransform::identity(), 0, 3).is_err());
    }

    #[test]
    fn png_extremes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (v, q) in [(-1.0, 0u16), (1.0, 65535u16)] {
            let img = Array3::from_elem((1, 3, 4), v);
            let path = dir.path().join(format!("c{q}.png"));
            let report = write_png16(&img, &path).unwrap();
            assert_eq!(report.clamped, 0);
            let raw = image::open(&path).unwrap().into_luma16();
            assert!(raw.pixels().all(|p| p[0] == q));
            assert_eq!(read_png16(&path).unwrap(), img);
        }
        let img = Array3::from_elem((3, 2, 2), 1.5);
        let report = write_png16(&img, &dir.path().join("clamp.png")).unwrap();
        assert_eq!(report.clamped, 12);
    }
}
