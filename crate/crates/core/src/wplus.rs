//! W+ latents: slice layout, style mixing, noise augmentation, and a synthetic
//! identity encoder that stands in for a real GAN-inversion encoder.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{SeededRng, Tensor};

pub const DEFAULT_ROWS: usize = 18;
pub const DEFAULT_MIX_BOUNDARY: usize = 9;

/// Row counts consumed by each mapping layer, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    group_sizes: Vec<usize>,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self {
            group_sizes: vec![5, 4, 4, 5],
        }
    }
}

impl SliceSpec {
    pub fn new(group_sizes: Vec<usize>) -> Result<Self> {
        if group_sizes.is_empty() || group_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "slice groups must be non-empty and positive, got {group_sizes:?}"
            )));
        }
        Ok(Self { group_sizes })
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn total_rows(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// Zero-based row ranges, one per group, in order.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.group_sizes
            .iter()
            .map(|&n| {
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Row counts that fall on a group boundary (valid token-local mix points).
    pub fn boundaries(&self) -> Vec<usize> {
        let ranges = self.ranges();
        ranges[..ranges.len() - 1].iter().map(|r| r.end).collect()
    }
}

/// An `L×D` W+ latent, rows ordered coarse to fine.
#[derive(Clone, Debug, PartialEq)]
pub struct WPlusVector {
    values: Tensor<f32>,
}

impl WPlusVector {
    pub fn new(values: Tensor<f32>) -> Result<Self> {
        values.dims2()?;
        if !values.is_finite() {
            return Err(Error::Range("W+ values must be finite".into()));
        }
        Ok(Self { values })
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            values: Tensor::zeros(&[rows, dim]),
        }
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<f32> {
        self.values
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let d = self.dim();
        &self.values.data()[r * d..(r + 1) * d]
    }

    /// Checks the shape against an expected `(rows, dim)` profile.
    pub fn expect_dims(&self, rows: usize, dim: usize) -> Result<()> {
        if self.rows() != rows || self.dim() != dim {
            return Err(shape_err(
                "wplus",
                format!(
                    "W+ is {}x{}, profile expects {rows}x{dim}",
                    self.rows(),
                    self.dim()
                ),
            ));
        }
        Ok(())
    }
}

/// Rows `0..boundary_row` from `a`, the rest from `b`.
pub fn mix(a: &WPlusVector, b: &WPlusVector, boundary_row: usize) -> Result<WPlusVector> {
    a.values.expect_same_shape(&b.values, "mix")?;
    let rows = a.rows();
    if boundary_row == 0 || boundary_row >= rows {
        return Err(Error::Range(format!(
            "mix boundary {boundary_row} must lie in 1..{rows}"
        )));
    }
    let split = boundary_row * a.dim();
    let mut data = a.values.data()[..split].to_vec();
    data.extend_from_slice(&b.values.data()[split..]);
    WPlusVector::new(Tensor::new(a.values.shape(), data)?)
}

/// `w + sigma·ε` with `ε ~ N(0, 1)` per entry. `sigma == 0` returns `w` unchanged.
pub fn add_noise(w: &WPlusVector, sigma: f64, rng: &mut SeededRng) -> Result<WPlusVector> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Range(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(w.clone());
    }
    let data = w
        .values
        .data()
        .iter()
        .map(|&v| (v as f64 + sigma * rng.normal()) as f32)
        .collect();
    let values = Tensor::new(w.values.shape(), data)?;
    Ok(WPlusVector { values })
}

pub const COARSE_PARAMS: usize = 4;
pub const FINE_PARAMS: usize = 4;

/// Parameters of a synthetic face. Coarse: skin tone, face width, face
/// height, hair shade. Fine: eye spacing, eye size, mouth width, mouth tint.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticIdentity {
    pub coarse: [f32; COARSE_PARAMS],
    pub fine: [f32; FINE_PARAMS],
    pub label: String,
}

impl SyntheticIdentity {
    pub fn new(
        coarse: [f32; COARSE_PARAMS],
        fine: [f32; FINE_PARAMS],
        label: &str,
    ) -> Result<Self> {
        if coarse
            .iter()
            .chain(&fine)
            .any(|v| !(-1.0..=1.0).contains(v))
        {
            return Err(Error::Range(format!(
                "identity {label}: parameters must lie in [-1, 1]"
            )));
        }
        Ok(Self {
            coarse,
            fine,
            label: label.into(),
        })
    }

    pub fn random(rng: &mut SeededRng, label: &str) -> Self {
        let mut draw = || rng.uniform_in(-1.0, 1.0) as f32;
        Self {
            coarse: [draw(), draw(), draw(), draw()],
            fine: [draw(), draw(), draw(), draw()],
            label: label.into(),
        }
    }
}

/// Fixed seed of the encoder's projection; independent of any run seed.
const ENCODER_SEED: u64 = 0x0e4e_0e4e;

/// Deterministic stand-in for a W+ encoder plus a matching face renderer.
///
/// Coarse parameters drive the first `ceil(L/2)` rows, fine parameters the
/// rest, through fixed random projections around a fixed mean latent.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    rows: usize,
    dim: usize,
    resolution: usize,
    mean: Tensor<f32>,
    coarse_proj: Tensor<f32>,
    fine_proj: Tensor<f32>,
}

impl ToyEncoder {
    pub fn new(rows: usize, dim: usize, resolution: usize) -> Self {
        let mut rng = SeededRng::derive(ENCODER_SEED, (rows * 100_000 + dim) as u64);
        let mean = rng.normal_tensor(&[rows, dim], 0.5);
        let coarse_proj = rng.normal_tensor(&[rows * dim, COARSE_PARAMS], 1.0);
        let fine_proj = rng.normal_tensor(&[rows * dim, FINE_PARAMS], 1.0);
        Self {
            rows,
            dim,
            resolution,
            mean,
            coarse_proj,
            fine_proj,
        }
    }

    pub fn coarse_rows(&self) -> usize {
        self.rows.div_ceil(2)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// The identity's latent. Independent of any per-image variation.
    pub fn latent(&self, id: &SyntheticIdentity) -> WPlusVector {
        let split = self.coarse_rows() * self.dim;
        let data = (0..self.rows * self.dim)
            .map(|i| {
                let (proj, params): (&Tensor<f32>, &[f32]) = if i < split {
                    (&self.coarse_proj, &id.coarse)
                } else {
                    (&self.fine_proj, &id.fine)
                };
                let row = &proj.data()[i * params.len()..(i + 1) * params.len()];
                let s: f32 = row.iter().zip(params).map(|(a, b)| a * b).sum();
                self.mean.data()[i] + s
            })
            .collect();
        WPlusVector {
            values: Tensor::new(&[self.rows, self.dim], data).unwrap(),
        }
    }

    /// Renders one image of `id` (`[3, H, W]`, values in `[0, 1]`) and returns it with the latent.
    pub fn encode(
        &self,
        id: &SyntheticIdentity,
        variation: &mut SeededRng,
    ) -> (Tensor<f32>, WPlusVector) {
        let pose = Variation::draw(variation);
        (render_face(id, &pose, self.resolution), self.latent(id))
    }
}

/// Per-image nuisance: head offset and background tint.
#[derive(Clone, Copy, Debug)]
struct Variation {
    dx: f64,
    dy: f64,
    background: [f64; 3],
}

impl Variation {
    fn draw(rng: &mut SeededRng) -> Self {
        Self {
            dx: rng.uniform_in(-0.05, 0.05),
            dy: rng.uniform_in(-0.05, 0.05),
            background: [
                rng.uniform_in(0.35, 0.65),
                rng.uniform_in(0.35, 0.65),
                rng.uniform_in(0.35, 0.65),
            ],
        }
    }
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Coverage of a shape edge at signed distance `d` (negative inside), in pixels.
fn coverage(d: f64, px: f64) -> f64 {
    let t = (0.5 - d / px).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn ellipse_sd(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let (nx, ny) = ((u - cx) / rx, (v - cy) / ry);
    (libm::sqrt(nx * nx + ny * ny) - 1.0) * rx.min(ry)
}

fn render_face(id: &SyntheticIdentity, var: &Variation, res: usize) -> Tensor<f32> {
    let c = id.coarse.map(f64::from);
    let f = id.fine.map(f64::from);
    let unit = |x: f64| 0.5 * (x + 1.0);

    let skin = lerp3([0.30, 0.18, 0.12], [0.96, 0.82, 0.70], unit(c[0]));
    let hair = lerp3([0.08, 0.06, 0.05], [0.90, 0.55, 0.20], unit(c[3]));
    let eye = [0.05, 0.08, 0.20];
    let lips = lerp3([0.55, 0.15, 0.20], [0.95, 0.45, 0.55], unit(f[3]));

    let (cx, cy) = (0.5 + var.dx, 0.55 + var.dy);
    let (rx, ry) = (0.24 + 0.07 * c[1], 0.31 + 0.06 * c[2]);
    let eye_dx = (0.30 + 0.12 * f[0]) * rx;
    let eye_r = 0.030 + 0.015 * unit(f[1]);
    let eye_y = cy - 0.12 * ry;
    let mouth_rx = (0.25 + 0.15 * f[2]) * rx;
    let mouth_y = cy + 0.45 * ry;
    let px = 1.0 / res as f64;

    let mut img = Tensor::zeros(&[3, res, res]);
    let plane = res * res;
    for y in 0..res {
        for x in 0..res {
            let (u, v) = ((x as f64 + 0.5) * px, (y as f64 + 0.5) * px);
            let mut col = var.background;
            let hair_cov = coverage(
                ellipse_sd(u, v, cx, cy - 0.08 * ry, rx * 1.12, ry * 1.05),
                px,
            ) * coverage(v - (cy - 0.25 * ry), px);
            col = lerp3(col, hair, hair_cov);
            let face_cov = coverage(ellipse_sd(u, v, cx, cy, rx, ry), px);
            col = lerp3(col, skin, face_cov * (1.0 - 0.85 * hair_cov));
            for side in [-1.0, 1.0] {
                let e = coverage(
                    ellipse_sd(u, v, cx + side * eye_dx, eye_y, eye_r, eye_r),
                    px,
                );
                col = lerp3(col, eye, e * face_cov);
            }
            let m = coverage(ellipse_sd(u, v, cx, mouth_y, mouth_rx, 0.022), px);
            col = lerp3(col, lips, m * face_cov);
            for (ch, v) in col.iter().enumerate() {
                img.data_mut()[ch * plane + y * res + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}
