//! Layers with explicit forward caches and analytic backward passes.
//!
//! Feature maps are `(channels, height, width)` arrays. Each layer's
//! `backward` accumulates parameter gradients into a same-shaped layer
//! used as the gradient buffer and returns the input gradient.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use super::Real;

pub(crate) fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("f64 converts to any Real")
}

fn flat<F: Real>(x: &Array3<F>) -> Array2<F> {
    let (c, h, w) = x.dim();
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, h * w))
        .expect("standard layout reshapes")
}

fn unflat<F: Real>(x: Array2<F>, h: usize, w: usize) -> Array3<F> {
    let c = x.nrows();
    x.as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, h, w))
        .expect("standard layout reshapes")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F: Real> {
    /// `(c_out, c_in·k·k)`, input-channel-major then kernel row, column.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F: Real> {
    cols: Array2<F>,
    in_dim: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Array2::zeros((c_out, c_in * kernel * kernel)),
            bias: Array1::zeros(c_out),
            c_in,
            kernel,
            stride,
            pad,
        }
    }

    /// Uniform weights with variance `1/fan_in`, zero bias.
    pub fn init(mut self, rng: &mut impl Rng) -> Self {
        let fan_in = self.weight.ncols() as f64;
        let bound = (3.0 / fan_in).sqrt();
        self.weight
            .mapv_inplace(|_| cast(rng.gen_range(-bound..bound)));
        self
    }

    pub fn c_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Array3<F>) -> Array2<F> {
        let (c, h, w) = x.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let mut cols = Array2::<F>::zeros((c * k * k, ho * wo));
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let mut row = cols.row_mut((ci * k + ky) * k + kx);
                    let row = row.as_slice_mut().expect("fresh array is contiguous");
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<F>, dim: (usize, usize, usize)) -> Array3<F> {
        let (c, h, w) = dim;
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let k = self.kernel;
        let mut x = Array3::<F>::zeros(dim);
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, ConvCache<F>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channels");
        let cols = self.im2col(x);
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let mut out = Array2::<F>::zeros((self.c_out(), ho * wo));
        general_mat_mul(F::one(), &self.weight, &cols, F::zero(), &mut out);
        out += &self.bias.view().insert_axis(Axis(1));
        (
            unflat(out, ho, wo),
            ConvCache {
                cols,
                in_dim: (c, h, w),
                out_hw: (ho, wo),
            },
        )
    }

    /// Accumulates into `grad` and returns the input gradient when asked.
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        dy: &Array3<F>,
        grad: &mut Self,
        need_input: bool,
    ) -> Option<Array3<F>> {
        debug_assert_eq!((dy.dim().1, dy.dim().2), cache.out_hw);
        let dy = flat(dy);
        general_mat_mul(F::one(), &dy, &cache.cols.t(), F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        need_input.then(|| {
            let mut dcols = Array2::<F>::zeros(cache.cols.dim());
            general_mat_mul(F::one(), &self.weight.t(), &dy, F::zero(), &mut dcols);
            self.col2im(&dcols, cache.in_dim)
        })
    }
}

pub const BETA_MIN: f64 = 1e-6;

/// Divisive normalization across channels:
/// `a_j = z_j / sqrt(β_j + Σ_k γ_jk z_k²)` at every spatial position.
#[derive(Clone, Debug, PartialEq)]
pub struct DivisiveNorm<F: Real> {
    pub beta: Array1<F>,
    pub gamma: Array2<F>,
}

pub struct DnCache<F: Real> {
    z: Array2<F>,
    denom: Array2<F>,
    hw: (usize, usize),
}

impl<F: Real> DivisiveNorm<F> {
    /// `β = 1`, `γ = 0.1·I`.
    pub fn new(channels: usize) -> Self {
        Self {
            beta: Array1::ones(channels),
            gamma: Array2::eye(channels) * cast::<F>(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    /// Clamps `β ≥ 1e-6` and `γ ≥ 0`.
    pub fn project(&mut self) {
        let floor = cast::<F>(BETA_MIN);
        self.beta.mapv_inplace(|b| if b < floor { floor } else { b });
        self.gamma
            .mapv_inplace(|g| if g < F::zero() { F::zero() } else { g });
    }

    pub fn satisfies_constraints(&self) -> bool {
        let floor = cast::<F>(BETA_MIN);
        self.beta.iter().all(|&b| b >= floor) && self.gamma.iter().all(|&g| g >= F::zero())
    }

    pub fn forward(&self, z: &Array3<F>) -> (Array3<F>, DnCache<F>) {
        let (_, h, w) = z.dim();
        let z = flat(z);
        let sq = z.mapv(|v| v * v);
        let mut denom = Array2::<F>::zeros(z.dim());
        denom += &self.beta.view().insert_axis(Axis(1));
        general_mat_mul(F::one(), &self.gamma, &sq, F::one(), &mut denom);
        let mut a = z.clone();
        a.zip_mut_with(&denom, |v, &d| *v = *v / d.sqrt());
        (unflat(a, h, w), DnCache { z, denom, hw: (h, w) })
    }

    pub fn backward(&self, cache: &DnCache<F>, g: &Array3<F>, grad: &mut Self) -> Array3<F> {
        let g = flat(g);
        let z = &cache.z;
        let half = cast::<F>(0.5);
        // q = g ⊙ z ⊙ D^{-3/2}
        let mut q = g.clone();
        ndarray::Zip::from(&mut q)
            .and(z)
            .and(&cache.denom)
            .for_each(|q, &z, &d| *q = *q * z / (d * d.sqrt()));
        let sq = z.mapv(|v| v * v);
        grad.beta -= &(q.sum_axis(Axis(1)) * half);
        general_mat_mul(-half, &q, &sq.t(), F::one(), &mut grad.gamma);

        let mut gt_q = Array2::<F>::zeros(z.dim());
        general_mat_mul(F::one(), &self.gamma.t(), &q, F::zero(), &mut gt_q);
        let mut dz = g;
        ndarray::Zip::from(&mut dz)
            .and(z)
            .and(&cache.denom)
            .and(&gt_q)
            .for_each(|dz, &z, &d, &t| *dz = *dz / d.sqrt() - z * t);
        unflat(dz, cache.hw.0, cache.hw.1)
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch standardization with a learned scale and offset.
///
/// Training normalizes with statistics over the whole batch and every
/// spatial position and updates running estimates; inference uses the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStd<F: Real> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

pub struct BnCache<F: Real> {
    xhat: Vec<Array2<F>>,
    inv_std: Array1<F>,
    hw: (usize, usize),
}

impl<F: Real> BatchStd<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn infer(&self, x: &Array3<F>) -> Array3<F> {
        let (_, h, w) = x.dim();
        let mut y = flat(x);
        let eps = cast::<F>(BN_EPS);
        for (c, mut row) in y.outer_iter_mut().enumerate() {
            let inv = F::one() / (self.running_var[c] + eps).sqrt();
            let (m, s, b) = (self.running_mean[c], self.scale[c], self.shift[c]);
            row.mapv_inplace(|v| (v - m) * inv * s + b);
        }
        unflat(y, h, w)
    }

    /// Normalizes a batch with its own statistics.
    pub fn forward_train(&mut self, xs: &[Array3<F>]) -> (Vec<Array3<F>>, BnCache<F>) {
        let (c, h, w) = xs[0].dim();
        let flats: Vec<Array2<F>> = xs.iter().map(flat).collect();
        let n = cast::<F>((xs.len() * h * w) as f64);
        let mean = flats
            .iter()
            .fold(Array1::<F>::zeros(c), |acc, x| acc + x.sum_axis(Axis(1)))
            / n;
        let var = flats.iter().fold(Array1::<F>::zeros(c), |acc, x| {
            let d = x - &mean.view().insert_axis(Axis(1));
            acc + d.mapv(|v| v * v).sum_axis(Axis(1))
        }) / n;
        let eps = cast::<F>(BN_EPS);
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());

        let mom = cast::<F>(BN_MOMENTUM);
        // unbiased variance for the running estimate
        let unbias = if n > F::one() { n / (n - F::one()) } else { F::one() };
        self.running_mean = &self.running_mean * (F::one() - mom) + &mean * mom;
        self.running_var = &self.running_var * (F::one() - mom) + &var * (mom * unbias);

        let xhat: Vec<Array2<F>> = flats
            .into_iter()
            .map(|x| {
                (x - &mean.view().insert_axis(Axis(1))) * &inv_std.view().insert_axis(Axis(1))
            })
            .collect();
        let ys = xhat
            .iter()
            .map(|xh| {
                let y = xh * &self.scale.view().insert_axis(Axis(1))
                    + &self.shift.view().insert_axis(Axis(1));
                unflat(y, h, w)
            })
            .collect();
        (ys, BnCache { xhat, inv_std, hw: (h, w) })
    }

    pub fn backward(&self, cache: &BnCache<F>, dys: &[Array3<F>], grad: &mut Self) -> Vec<Array3<F>> {
        let dys: Vec<Array2<F>> = dys.iter().map(flat).collect();
        let c = self.scale.len();
        let (h, w) = cache.hw;
        let n = cast::<F>((dys.len() * h * w) as f64);
        let mut sum_dy = Array1::<F>::zeros(c);
        let mut sum_dy_xhat = Array1::<F>::zeros(c);
        for (dy, xh) in dys.iter().zip(&cache.xhat) {
            sum_dy += &dy.sum_axis(Axis(1));
            sum_dy_xhat += &(dy * xh).sum_axis(Axis(1));
        }
        grad.shift += &sum_dy;
        grad.scale += &sum_dy_xhat;
        // dx = scale·inv_std/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
        let k = &self.scale * &cache.inv_std / n;
        dys.iter()
            .zip(&cache.xhat)
            .map(|(dy, xh)| {
                let mut dx = dy * n;
                dx -= &sum_dy.view().insert_axis(Axis(1));
                dx -= &(xh * &sum_dy_xhat.view().insert_axis(Axis(1)));
                dx *= &k.view().insert_axis(Axis(1));
                unflat(dx, h, w)
            })
            .collect()
    }
}

pub fn relu<F: Real>(x: &Array3<F>) -> Array3<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Passes the gradient where the rectifier's input was positive.
pub fn relu_backward<F: Real>(input: &Array3<F>, dy: &Array3<F>) -> Array3<F> {
    let mut dx = dy.clone();
    dx.zip_mut_with(input, |d, &x| {
        if x <= F::zero() {
            *d = F::zero()
        }
    });
    dx
}

pub fn global_average<F: Real>(x: &Array3<F>) -> Array1<F> {
    let (_, h, w) = x.dim();
    flat(x).sum_axis(Axis(1)) / cast::<F>((h * w) as f64)
}

pub fn global_average_backward<F: Real>(g: &Array1<F>, dim: (usize, usize, usize)) -> Array3<F> {
    let (c, h, w) = dim;
    let scale = F::one() / cast::<F>((h * w) as f64);
    Array3::from_shape_fn((c, h, w), |(ci, _, _)| g[ci] * scale)
}

/// `y = w·x + b` to a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<F: Real> {
    pub weight: Array1<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Affine<F> {
    pub fn new(inputs: usize) -> Self {
        Self {
            weight: Array1::zeros(inputs),
            bias: Array1::zeros(1),
        }
    }

    pub fn init(mut self, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / self.weight.len() as f64).sqrt();
        self.weight
            .mapv_inplace(|_| cast(rng.gen_range(-bound..bound)));
        self
    }

    pub fn forward(&self, x: &Array1<F>) -> F {
        self.weight.dot(x) + self.bias[0]
    }

    pub fn backward(&self, x: &Array1<F>, dy: F, grad: &mut Self) -> Array1<F> {
        grad.weight.scaled_add(dy, x);
        grad.bias[0] += dy;
        &self.weight * dy
    }
}
