use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::acquisition::encode;
use super::{recon_coil_combined, recon_sos, CoilMaps, KSpaceVolume, MagnitudeImage};
use crate::error::{Error, Result};

pub const MAX_ROTATION_DEG: f64 = 1.0;
pub const MAX_SHIFT_PX: f64 = 3.0;
pub const MIN_POSITIONS: usize = 2;
pub const MAX_POSITIONS: usize = 4;

/// Rigid in-plane pose change: rotation about the image centre, then shift.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation_deg: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl Pose {
    pub fn new(rotation_deg: f64, shift_x: f64, shift_y: f64) -> Self {
        Pose {
            rotation_deg,
            shift_x,
            shift_y,
        }
    }

    fn then(self, other: Pose) -> Pose {
        Pose::new(
            self.rotation_deg + other.rotation_deg,
            self.shift_x + other.shift_x,
            self.shift_y + other.shift_y,
        )
    }

    fn within_bounds(&self) -> bool {
        self.rotation_deg.abs() <= MAX_ROTATION_DEG
            && self.shift_x.abs() <= MAX_SHIFT_PX
            && self.shift_y.abs() <= MAX_SHIFT_PX
    }
}

/// Positions held during a scan.
///
/// `moves[j]` is the pose change that starts position `j`, relative to
/// position `j - 1` (or to the reference pose for `j = 0`). Position `j`
/// covers shots `cut_points[j-1] .. cut_points[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionTrajectory {
    pub moves: Vec<Pose>,
    pub cut_points: Vec<usize>,
}

impl MotionTrajectory {
    pub fn new(moves: Vec<Pose>, cut_points: Vec<usize>) -> Result<Self> {
        let t = MotionTrajectory { moves, cut_points };
        if !(MIN_POSITIONS..=MAX_POSITIONS).contains(&t.positions()) {
            return Err(Error::invalid(format!(
                "trajectory needs {MIN_POSITIONS}..={MAX_POSITIONS} positions, got {}",
                t.positions()
            )));
        }
        if let Some(p) = t.moves.iter().find(|p| !p.within_bounds()) {
            return Err(Error::invalid(format!("move {p:?} exceeds the motion bounds")));
        }
        t.check_cuts(None)?;
        Ok(t)
    }

    /// Whole scan in one displaced position. Not a realistic trajectory;
    /// useful for checking the re-encoding path against a direct transform.
    pub fn single(pose: Pose) -> Self {
        MotionTrajectory {
            moves: vec![pose],
            cut_points: Vec::new(),
        }
    }

    pub fn positions(&self) -> usize {
        self.moves.len()
    }

    /// Absolute pose of every position.
    pub fn cumulative(&self) -> Vec<Pose> {
        self.moves
            .iter()
            .scan(Pose::default(), |acc, m| {
                *acc = acc.then(*m);
                Some(*acc)
            })
            .collect()
    }

    fn check_cuts(&self, n_shots: Option<usize>) -> Result<()> {
        if self.cut_points.len() + 1 != self.moves.len() {
            return Err(Error::invalid(format!(
                "{} positions need {} cut points, got {}",
                self.moves.len(),
                self.moves.len().saturating_sub(1),
                self.cut_points.len()
            )));
        }
        let mut prev = 0;
        for &c in &self.cut_points {
            let beyond = n_shots.is_some_and(|n| c >= n);
            if c <= prev || beyond {
                return Err(Error::invalid(format!(
                    "cut points {:?} must increase strictly inside the shot range",
                    self.cut_points
                )));
            }
            prev = c;
        }
        Ok(())
    }
}

/// Random trajectory with 2 to 4 positions and cuts at shot boundaries.
pub fn sample_trajectory(seed: u64, n_shots: usize) -> Result<MotionTrajectory> {
    if n_shots < 4 {
        return Err(Error::invalid(format!(
            "motion needs at least 4 shots, got {n_shots}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = rng.gen_range(MIN_POSITIONS..=MAX_POSITIONS);
    let moves = (0..positions)
        .map(|_| {
            Pose::new(
                rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
                rng.gen_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
                rng.gen_range(-MAX_SHIFT_PX..=MAX_SHIFT_PX),
            )
        })
        .collect();
    let mut cut_points: Vec<usize> = sample(&mut rng, n_shots - 1, positions - 1)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    cut_points.sort_unstable();
    MotionTrajectory::new(moves, cut_points)
}

/// Keys cubic convolution kernel, `a = -0.5`.
fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Rotates about the grid centre and shifts, with bicubic interpolation.
/// Samples falling outside the grid read as zero.
pub fn transform_image(image: &Array2<Complex64>, pose: Pose) -> Array2<Complex64> {
    let (rows, cols) = image.dim();
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let (s, c) = pose.rotation_deg.to_radians().sin_cos();
    let at = |r: isize, cc: isize| -> Complex64 {
        if r < 0 || cc < 0 || r >= rows as isize || cc >= cols as isize {
            Complex64::default()
        } else {
            image[[r as usize, cc as usize]]
        }
    };
    Array2::from_shape_fn((rows, cols), |(r, col)| {
        let x = col as f64 - cx - pose.shift_x;
        let y = r as f64 - cy - pose.shift_y;
        let sx = c * x + s * y + cx;
        let sy = -s * x + c * y + cy;
        let (fx, fy) = (sx.floor(), sy.floor());
        let (tx, ty) = (sx - fx, sy - fy);
        let wx = [cubic(1.0 + tx), cubic(tx), cubic(1.0 - tx), cubic(2.0 - tx)];
        let wy = [cubic(1.0 + ty), cubic(ty), cubic(1.0 - ty), cubic(2.0 - ty)];
        let mut acc = Complex64::default();
        for (j, wyj) in wy.iter().enumerate() {
            if *wyj == 0.0 {
                continue;
            }
            let rr = fy as isize - 1 + j as isize;
            for (i, wxi) in wx.iter().enumerate() {
                if *wxi == 0.0 {
                    continue;
                }
                acc += at(rr, fx as isize - 1 + i as isize) * (wxi * wyj);
            }
        }
        acc
    })
}

/// Rigid-motion corrupted reconstruction.
///
/// The coil-combined image is moved to each position, re-encoded through
/// the coil maps, and only the lines acquired by that position's shots are
/// kept. The composite k-space is reconstructed by sum of squares.
pub fn inject_motion(
    k: &KSpaceVolume,
    maps: &CoilMaps,
    traj: &MotionTrajectory,
) -> Result<MagnitudeImage> {
    if k.dim() != maps.dim() || k.n_coils() != maps.n_coils() {
        return Err(Error::invalid("k-space and coil maps do not match"));
    }
    let n_shots = k.n_shots();
    traj.check_cuts(Some(n_shots))?;

    let reference = recon_coil_combined(k, maps)?;
    let mut composite = k.clone();
    let bounds: Vec<usize> = std::iter::once(0)
        .chain(traj.cut_points.iter().copied())
        .chain(std::iter::once(n_shots))
        .collect();

    for (pose, span) in traj.cumulative().into_iter().zip(bounds.windows(2)) {
        let moved = transform_image(&reference, pose);
        let encoded = encode(&moved, maps);
        for &(shot, line) in &k.acquisition_order {
            if shot < span[0] || shot >= span[1] {
                continue;
            }
            for (dst, src) in composite.coils.iter_mut().zip(&encoded) {
                dst.row_mut(line).assign(&src.row(line));
            }
        }
    }
    Ok(recon_sos(&composite))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{forward_kspace, generate_phantom, synth_coil_maps};

    fn setup(size: usize) -> (KSpaceVolume, CoilMaps) {
        let p = generate_phantom(12, size, &"knee-fs".parse().unwrap()).unwrap();
        let maps = synth_coil_maps(size, 4, 6).unwrap();
        (forward_kspace(&p, &maps, 4).unwrap(), maps)
    }

    fn rel_rms(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let num: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    #[test]
    fn kernel_interpolates_samples() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
        // partition of unity
        for t in [0.1, 0.37, 0.5, 0.93] {
            let s = cubic(1.0 + t) + cubic(t) + cubic(1.0 - t) + cubic(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn integer_shift_moves_pixels() {
        let img = Array2::from_shape_fn((16, 16), |(r, c)| Complex64::new((r * 16 + c) as f64, 0.0));
        let moved = transform_image(&img, Pose::new(0.0, 2.0, -1.0));
        assert_eq!(moved[[5, 7]], img[[6, 5]]);
        assert_eq!(moved[[15, 0]], Complex64::default());
    }

    #[test]
    fn identity_motion_is_noop() {
        let (k, maps) = setup(64);
        let traj = MotionTrajectory::new(
            vec![Pose::default(), Pose::default(), Pose::default()],
            vec![4, 9],
        )
        .unwrap();
        let moved = inject_motion(&k, &maps, &traj).unwrap();
        assert!(rel_rms(&moved.pixels, &recon_sos(&k).pixels) < 1e-4);
    }

    #[test]
    fn single_position_matches_direct_rotation() {
        let (k, maps) = setup(64);
        let pose = Pose::new(1.0, 0.0, 0.0);
        let out = inject_motion(&k, &maps, &MotionTrajectory::single(pose)).unwrap();
        let x_o = recon_coil_combined(&k, &maps).unwrap();
        let oracle = transform_image(&x_o, pose).mapv(|v| v.norm());
        assert!(rel_rms(&out.pixels, &oracle) < 1e-4);
    }

    #[test]
    fn motion_creates_ghosting() {
        let (k, maps) = setup(64);
        let clean = recon_sos(&k);
        let identity = MotionTrajectory::new(vec![Pose::default(); 3], vec![5, 10]).unwrap();
        let moving = MotionTrajectory::new(
            vec![Pose::default(), Pose::new(0.8, 2.5, -1.5), Pose::new(-0.6, -2.0, 2.5)],
            vec![5, 10],
        )
        .unwrap();
        let e_id = rel_rms(&inject_motion(&k, &maps, &identity).unwrap().pixels, &clean.pixels);
        let e_mv = rel_rms(&inject_motion(&k, &maps, &moving).unwrap().pixels, &clean.pixels);
        assert!(e_mv > 5.0 * e_id.max(1e-12), "{e_mv} vs {e_id}");
        assert!(e_mv > 0.05);
    }

    #[test]
    fn sampled_trajectories_respect_bounds() {
        for seed in 0..200 {
            let t = sample_trajectory(seed, 16).unwrap();
            assert!((2..=4).contains(&t.positions()));
            assert!(t.moves.iter().all(|m| m.within_bounds()));
            assert!(t.cut_points.windows(2).all(|w| w[0] < w[1]));
            assert!(t.cut_points.iter().all(|&c| c > 0 && c < 16));
        }
        assert_eq!(sample_trajectory(5, 16).unwrap(), sample_trajectory(5, 16).unwrap());
        assert!(sample_trajectory(1, 3).is_err());
    }

    #[test]
    fn position_count_distribution() {
        let mut counts = [0usize; 5];
        for seed in 0..10_000 {
            counts[sample_trajectory(seed, 16).unwrap().positions()] += 1;
        }
        for n in 2..=4 {
            assert!(counts[n] >= 1_000, "{counts:?}");
        }
    }

    #[test]
    fn rejects_bad_trajectories() {
        assert!(MotionTrajectory::new(vec![Pose::default()], vec![]).is_err());
        assert!(MotionTrajectory::new(vec![Pose::default(); 2], vec![]).is_err());
        assert!(MotionTrajectory::new(vec![Pose::new(1.5, 0.0, 0.0), Pose::default()], vec![3]).is_err());
        assert!(MotionTrajectory::new(vec![Pose::default(); 3], vec![4, 4]).is_err());
        let (k, maps) = setup(32);
        let t = MotionTrajectory::new(vec![Pose::default(); 2], vec![8]).unwrap();
        // 32 lines at etl 4 give 8 shots, so a cut at 8 is out of range
        assert!(inject_motion(&k, &maps, &t).is_err());
    }
}
