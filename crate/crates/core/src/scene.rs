//! Lagrangian particle state and forward rendering.
//!
//! Particles render additively into camera images as truncated Gaussian
//! blobs: pixel `x` receives `c * exp(-|P(p) - x|^2 / (2 sigma^2))` for
//! `|P(p) - x| <= 3 sigma`, so the blob peak equals the particle intensity.
//! Pixel values are point samples at integer pixel centers.

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::motion::MotionGrid;
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

/// Sparse particle state: positions in voxel units and nonnegative
/// intensities, index-aligned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParticleSet {
    pub positions: Vec<Vector3<f64>>,
    pub intensities: Vec<f64>,
}

impl ParticleSet {
    pub fn new(positions: Vec<Vector3<f64>>, intensities: Vec<f64>) -> Self {
        assert_eq!(positions.len(), intensities.len());
        ParticleSet { positions, intensities }
    }

    pub fn empty() -> Self {
        ParticleSet::default()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, p: Vector3<f64>, c: f64) {
        self.positions.push(p);
        self.intensities.push(c);
    }

    /// Remove particles with exactly zero intensity. Zero-intensity blobs
    /// contribute nothing to any rendered image or energy term, so the
    /// energy of the remaining configuration is unchanged.
    pub fn prune_zero(&self) -> ParticleSet {
        let mut out = ParticleSet::empty();
        for i in 0..self.len() {
            if self.intensities[i] != 0.0 {
                out.push(self.positions[i], self.intensities[i]);
            }
        }
        out
    }
}

/// Gaussian blob appearance: standard deviation in pixels; influence is
/// truncated at radius `3 sigma` (99.7% of the blob mass).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobKernel {
    pub sigma: f64,
}

impl BlobKernel {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0);
        BlobKernel { sigma }
    }

    pub fn radius(&self) -> f64 {
        3.0 * self.sigma
    }
}

/// Scalar image, row-major, value sampled at integer pixel centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Image { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Image { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }
}

/// Images of all K cameras at both time steps.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub t0: Vec<Image>,
    pub t1: Vec<Image>,
}

impl ImageSet {
    pub fn new(t0: Vec<Image>, t1: Vec<Image>) -> Result<Self> {
        if t0.len() != t1.len() {
            return Err(Error::InvalidImageSet(format!(
                "{} cameras at t0 but {} at t1",
                t0.len(),
                t1.len()
            )));
        }
        if t0.is_empty() {
            return Err(Error::InvalidImageSet("no cameras".into()));
        }
        Ok(ImageSet { t0, t1 })
    }

    pub fn num_cameras(&self) -> usize {
        self.t0.len()
    }
}

/// Splat one blob into the image. The peak equals `c`; sub-pixel centers are
/// rendered exactly. The kernel is separable, so the two exponential factors
/// are precomputed per axis.
fn splat(img: &mut Image, center: &Vector2<f64>, c: f64, kernel: &BlobKernel) {
    let r = kernel.radius();
    let inv_two_sigma2 = 1.0 / (2.0 * kernel.sigma * kernel.sigma);
    let x0 = (center.x - r).ceil().max(0.0) as usize;
    let x1 = (center.x + r).floor().min(img.width as f64 - 1.0);
    let y0 = (center.y - r).ceil().max(0.0) as usize;
    let y1 = (center.y + r).floor().min(img.height as f64 - 1.0);
    if x1 < 0.0 || y1 < 0.0 || x0 as f64 > x1 || y0 as f64 > y1 {
        return;
    }
    let (x1, y1) = (x1 as usize, y1 as usize);
    let r2 = r * r;
    let wx: Vec<f64> = (x0..=x1)
        .map(|x| {
            let d = x as f64 - center.x;
            (-d * d * inv_two_sigma2).exp()
        })
        .collect();
    for y in y0..=y1 {
        let dy = y as f64 - center.y;
        let wy = (-dy * dy * inv_two_sigma2).exp();
        let row = y * img.width;
        for (i, x) in (x0..=x1).enumerate() {
            let dx = x as f64 - center.x;
            if dx * dx + dy * dy <= r2 {
                img.data[row + x] += c * wx[i] * wy;
            }
        }
    }
}

/// Project every particle with `camera` and accumulate its truncated blob.
/// Particles whose projection fails (degenerate pinhole depth) are skipped.
pub fn render(
    particles: &ParticleSet,
    camera: &Camera,
    kernel: &BlobKernel,
    width: usize,
    height: usize,
) -> Image {
    let mut img = Image::zeros(width, height);
    for i in 0..particles.len() {
        if let Ok(uv) = camera.project(&particles.positions[i]) {
            splat(&mut img, &uv, particles.intensities[i], kernel);
        }
    }
    img
}

/// Render with positions displaced by the motion field: `p + u(p)`.
/// Intensities are unchanged (brightness constancy across the frame pair).
pub fn render_warped(
    particles: &ParticleSet,
    grid: &MotionGrid,
    camera: &Camera,
    kernel: &BlobKernel,
    width: usize,
    height: usize,
) -> Image {
    let mut img = Image::zeros(width, height);
    for i in 0..particles.len() {
        let q = particles.positions[i] + grid.eval(&particles.positions[i]);
        if let Ok(uv) = camera.project(&q) {
            splat(&mut img, &uv, particles.intensities[i], kernel);
        }
    }
    img
}

/// Render the full two-time-step image stack for all cameras in parallel
/// (each image is accumulated independently, so the result is deterministic).
pub fn render_image_set(
    particles: &ParticleSet,
    grid: &MotionGrid,
    cameras: &[Camera],
    kernel: &BlobKernel,
    width: usize,
    height: usize,
) -> ImageSet {
    let t0: Vec<Image> = cameras
        .par_iter()
        .map(|cam| render(particles, cam, kernel, width, height))
        .collect();
    let t1: Vec<Image> = cameras
        .par_iter()
        .map(|cam| render_warped(particles, grid, cam, kernel, width, height))
        .collect();
    ImageSet { t0, t1 }
}

/// Separable Gaussian blur with a normalized discrete kernel truncated at
/// three standard deviations; zero padding at the borders. Blurring a
/// rendered blob of scale `a` by `s` gives a blob of scale
/// `sqrt(a^2 + s^2)` with peak scaled by `a^2 / (a^2 + s^2)`, which is what
/// the coarse-to-fine schedule relies on.
pub fn gaussian_blur(img: &Image, std: f64) -> Image {
    if std <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * std).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for d in -radius..=radius {
        kernel.push((-0.5 * (d as f64 / std).powi(2)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let (w, h) = (img.width as i64, img.height as i64);
    let mut tmp = Image::zeros(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let xs = x + i as i64 - radius;
                if xs >= 0 && xs < w {
                    acc += k * img.data[(y * w + xs) as usize];
                }
            }
            tmp.data[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Image::zeros(img.width, img.height);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let ys = y + i as i64 - radius;
                if ys >= 0 && ys < h {
                    acc += k * tmp.data[(ys * w + x) as usize];
                }
            }
            out.data[(y * w + x) as usize] = acc;
        }
    }
    out
}

/// Pixelwise `observed - predicted` (signed).
pub fn residual(observed: &Image, predicted: &Image) -> Result<Image> {
    if observed.width != predicted.width || observed.height != predicted.height {
        return Err(Error::DimensionMismatch(format!(
            "residual of {}x{} against {}x{}",
            observed.width, observed.height, predicted.width, predicted.height
        )));
    }
    let data = observed
        .data
        .iter()
        .zip(&predicted.data)
        .map(|(o, p)| o - p)
        .collect();
    Ok(Image::from_data(observed.width, observed.height, data))
}
