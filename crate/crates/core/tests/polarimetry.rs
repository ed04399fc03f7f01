use ndarray::{Array2, Array3};
use polarfuse::polarimetry::{
    align_and_crop, compute_stokes, correct_bad_pixels, invert_stokes, read_png16, solve_affine, write_png16,
    AffineTransform, FiducialPoints, RawPolarimetricFrame,
};
use proptest::prelude::*;

const N: usize = 6;

fn plane_of(values: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((N, N), values).unwrap()
}

fn counts() -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0u32..=65535, N * N).prop_map(|v| plane_of(v.into_iter().map(f64::from).collect()))
}

fn reals() -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.0f64..4.0, N * N).prop_map(plane_of)
}

fn fiducials() -> impl Strategy<Value = FiducialPoints> {
    prop::array::uniform6(-50.0f64..50.0)
        .prop_map(|v| FiducialPoints { left_eye: [v[0], v[1]], right_eye: [v[2], v[3]], nose_base: [v[4], v[5]] })
        .prop_filter("non-collinear", |f| {
            let [a, b, c] = f.points();
            ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs() > 10.0
        })
}

proptest! {
    #[test]
    fn stokes_inversion_is_exact_on_integer_frames(i0 in counts(), i45 in counts(), i90 in counts(), i135 in counts()) {
        let frame = RawPolarimetricFrame::new(i0, i45, i90, i135).unwrap();
        let stokes = compute_stokes(&frame).unwrap();
        let back = invert_stokes(&stokes, &(&frame.i45 + &frame.i135)).unwrap();
        prop_assert_eq!(back, frame);
    }

    #[test]
    fn total_intensity_bounds_linear_polarization(i0 in reals(), i45 in reals(), i90 in reals(), i135 in reals()) {
        let s = compute_stokes(&RawPolarimetricFrame::new(i0, i45, i90, i135).unwrap()).unwrap();
        for (s0, s1) in s.s0.iter().zip(&s.s1) {
            prop_assert!(*s0 >= s1.abs());
        }
    }

    #[test]
    fn bad_pixel_correction_is_idempotent(p in reals(), bits in prop::collection::vec(any::<bool>(), N * N)) {
        let mask = Array2::from_shape_vec((N, N), bits).unwrap();
        let once = correct_bad_pixels(&p, &mask).unwrap();
        prop_assert_eq!(correct_bad_pixels(&once, &mask).unwrap(), once);
    }

    #[test]
    fn opposite_affine_solutions_compose_to_identity(p in fiducials(), q in fiducials()) {
        let forward = solve_affine(&p, &q).unwrap();
        let back = solve_affine(&q, &p).unwrap();
        let id = AffineTransform::identity();
        for t in [forward.compose(&back), back.compose(&forward)] {
            for r in 0..2 {
                for c in 0..3 {
                    prop_assert!((t.m[r][c] - id.m[r][c]).abs() < 1e-9, "{:?}", t);
                }
            }
        }
    }

    #[test]
    fn png_round_trip_within_one_step(values in prop::collection::vec(-1.0f64..=1.0, 3 * 4 * 5), gray in any::<bool>()) {
        let c = if gray { 1 } else { 3 };
        let img = Array3::from_shape_vec((c, 4, 5), values[..c * 20].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        prop_assert_eq!(write_png16(&img, &path).unwrap().clamped, 0);
        let back = read_png16(&path).unwrap();
        let step = 2.0 / 65535.0;
        for (a, b) in img.iter().zip(&back) {
            prop_assert!((a - b).abs() <= step);
        }
    }
}

#[test]
fn aligned_crop_puts_fiducials_at_canonical_positions() {
    let (h, w) = (32, 32);
    let canonical = FiducialPoints::canonical(h, w);
    let pose = AffineTransform { m: [[1.1, 0.2, 3.0], [-0.15, 0.95, -2.0]] };
    let observed = canonical.transformed(&pose);
    let t = solve_affine(&observed, &canonical).unwrap();
    for (a, b) in observed.transformed(&t).points().iter().zip(canonical.points()) {
        assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
    }
    let plane = Array2::from_elem((40, 40), 0.25);
    let out = align_and_crop(&plane, &t, h, w).unwrap();
    assert_eq!(out.dim(), (h, w));
}
