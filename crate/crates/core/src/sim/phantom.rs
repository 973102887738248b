use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use std::f64::consts::PI;

use super::Phantom;
use crate::error::{Error, Result};
use crate::fft::{fft2, ifft2, signed_frequency};
use crate::scan::ScanType;

const MIN_SIZE: usize = 32;
/// Fat signal left after suppression.
const FAT_SUPPRESSION: f64 = 0.15;
/// Relative amplitude of the fine tissue texture.
const TEXTURE_DEPTH: f64 = 0.12;
/// Per-slice receive gain spread, in log10 units (±6 dB).
const GAIN_SPREAD: f64 = 0.3;

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    intensity: f64,
    fat: bool,
}

impl Ellipse {
    const fn new(cx: f64, cy: f64, a: f64, b: f64, angle_deg: f64, intensity: f64, fat: bool) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            angle: angle_deg * PI / 180.0,
            intensity,
            fat,
        }
    }

    /// Soft inside-membership in [0, 1] with an edge about `edge` wide.
    fn membership(&self, x: f64, y: f64, edge: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let d = (u * u + v * v).sqrt();
        let w = edge / self.a.min(self.b);
        0.5 * (1.0 + ((1.0 - d) / w).tanh())
    }
}

fn knee_template() -> Vec<Ellipse> {
    vec![
        Ellipse::new(0.0, 0.0, 0.78, 0.88, 0.0, 0.90, true),
        Ellipse::new(0.0, 0.0, 0.66, 0.78, 0.0, 0.45, false),
        Ellipse::new(0.0, -0.38, 0.40, 0.34, 0.0, 0.65, true),
        Ellipse::new(0.0, 0.42, 0.38, 0.31, 0.0, 0.60, true),
        Ellipse::new(0.0, 0.02, 0.42, 0.05, 0.0, 0.85, false),
        Ellipse::new(-0.52, -0.25, 0.11, 0.20, 10.0, 0.62, true),
    ]
}

fn brain_template() -> Vec<Ellipse> {
    vec![
        Ellipse::new(0.0, 0.0, 0.82, 0.92, 0.0, 0.80, true),
        Ellipse::new(0.0, 0.0, 0.76, 0.86, 0.0, 0.08, false),
        Ellipse::new(0.0, 0.0, 0.70, 0.80, 0.0, 0.55, false),
        Ellipse::new(0.0, 0.02, 0.55, 0.64, 0.0, 0.42, false),
        Ellipse::new(-0.12, -0.05, 0.08, 0.25, 15.0, 0.95, false),
        Ellipse::new(0.12, -0.05, 0.08, 0.25, -15.0, 0.95, false),
    ]
}

fn generic_template(anatomy: &str) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(anatomy.as_bytes()));
    let mut out = vec![
        Ellipse::new(0.0, 0.0, 0.80, 0.70, 0.0, 0.85, true),
        Ellipse::new(0.0, 0.0, 0.68, 0.58, 0.0, 0.45, false),
    ];
    for _ in 0..4 {
        out.push(Ellipse::new(
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(0.08..0.28),
            rng.gen_range(0.08..0.28),
            rng.gen_range(-90.0..90.0),
            rng.gen_range(0.3..0.95),
            rng.gen_bool(0.4),
        ));
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Band-limited unit-variance random field, periodic over the grid.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let white = Array2::from_shape_fn((size, size), |_| {
        Complex64::new(StandardNormal.sample(rng), 0.0)
    });
    let mut spec = fft2(&white);
    let lo = size as f64 / 16.0;
    let hi = size as f64 / 4.0;
    for ((r, c), v) in spec.indexed_iter_mut() {
        let fy = signed_frequency(r, size) as f64;
        let fx = signed_frequency(c, size) as f64;
        let f = (fx * fx + fy * fy).sqrt();
        if f < lo || f > hi {
            *v = Complex64::default();
        }
    }
    let field = ifft2(&spec).mapv(|v| v.re);
    let std = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt();
    if std > 0.0 {
        field / std
    } else {
        field
    }
}

/// Deterministic synthetic slice for a scan type.
///
/// The layout comes from the anatomy (knee and brain have dedicated
/// templates, anything else gets a layout seeded by its name), jittered per
/// seed. Fat-bearing structures are attenuated for `-fs` scan types. A fine
/// band-limited texture, a smooth phase and a random receive gain are
/// applied on top.
pub fn generate_phantom(seed: u64, size: usize, scan_type: &ScanType) -> Result<Phantom> {
    if size < MIN_SIZE {
        return Err(Error::invalid(format!(
            "phantom size must be at least {MIN_SIZE}, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = match scan_type.anatomy() {
        "knee" => knee_template(),
        "brain" => brain_template(),
        other => generic_template(other),
    };

    let jitter = Normal::new(0.0, 1.0).expect("unit normal");
    for e in shapes.iter_mut() {
        e.cx += 0.02 * jitter.sample(&mut rng);
        e.cy += 0.02 * jitter.sample(&mut rng);
        e.a *= 1.0 + 0.04 * jitter.sample(&mut rng);
        e.b *= 1.0 + 0.04 * jitter.sample(&mut rng);
        e.angle += (5.0 * PI / 180.0) * jitter.sample(&mut rng);
        e.intensity *= 1.0 + 0.05 * jitter.sample(&mut rng);
    }
    // small bright inclusions (fluid, lesions)
    let n_spots = rng.gen_range(2..=4);
    for _ in 0..n_spots {
        let r = rng.gen_range(0.0..0.45);
        let t = rng.gen_range(0.0..2.0 * PI);
        shapes.push(Ellipse {
            cx: r * t.cos(),
            cy: r * t.sin(),
            a: rng.gen_range(0.03..0.08),
            b: rng.gen_range(0.03..0.08),
            angle: rng.gen_range(0.0..PI),
            intensity: rng.gen_range(0.7..1.0),
            fat: false,
        });
    }

    let tex = texture(size, &mut rng);
    let gain = 10f64.powf(rng.gen_range(-GAIN_SPREAD..GAIN_SPREAD));
    let phase = (
        rng.gen_range(-0.6..0.6),
        rng.gen_range(-0.6..0.6),
        rng.gen_range(-PI..PI),
    );

    let edge = 1.5 / (size as f64 / 2.0);
    let pixels = Array2::from_shape_fn((size, size), |(r, c)| {
        let y = (r as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let x = (c as f64 + 0.5) / size as f64 * 2.0 - 1.0;
        let mut value = 0.0;
        let mut support = 0.0f64;
        for e in &shapes {
            let m = e.membership(x, y, edge);
            let level = if e.fat && scan_type.fat_suppressed() {
                e.intensity * FAT_SUPPRESSION
            } else {
                e.intensity
            };
            value = value * (1.0 - m) + level * m;
            support = support.max(m);
        }
        let textured = value * (1.0 + TEXTURE_DEPTH * support * tex[[r, c]]);
        let theta = phase.0 * x + phase.1 * y + phase.2;
        Complex64::from_polar(gain * textured.max(0.0), theta)
    });
    Phantom::new(pixels, scan_type.clone())
}
