//! Synthetic blurred-QR data: camera-shake trajectory PSFs, blur + noise
//! application, QR rendering, dataset builder with manifests, and the
//! training-time augmentation.
//!
//! Every sample derives its own sub-seed from the dataset seed, so
//! regeneration is bit-identical regardless of evaluation order.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{self, EcLevel};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";
const KERNEL_SUM_TOL: f64 = 1e-9;

/// Normalized point spread function: odd-sized, non-negative, sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    size: usize,
    weights: Vec<f64>,
}

impl BlurKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<BlurKernel> {
        if size % 2 == 0 || size == 0 {
            return Err(Error::dimension("blur kernel", &[size], "odd size"));
        }
        if weights.len() != size * size {
            return Err(Error::dimension(
                "blur kernel",
                &[weights.len()],
                format!("{} weights", size * size),
            ));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Parameter("blur kernel weights must be non-negative".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(Error::Parameter(format!(
                "blur kernel weights sum to {} (must be 1 within {})",
                sum, KERNEL_SUM_TOL
            )));
        }
        if !weights.iter().any(|w| *w > 0.0) {
            return Err(Error::Parameter("blur kernel needs a positive weight".into()));
        }
        Ok(BlurKernel { size, weights })
    }

    pub fn delta() -> BlurKernel {
        BlurKernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Random-walk camera-shake trajectory, rasterized with bilinear sub-pixel
/// splatting and normalized to unit mass. Deterministic per seed.
pub fn gen_trajectory_psf(seed: u64, steps: usize, anxiety: f64, max_extent: usize) -> Result<BlurKernel> {
    if steps == 0 {
        return Err(Error::Parameter("trajectory needs at least one step".into()));
    }
    if max_extent % 2 == 0 || max_extent == 0 {
        return Err(Error::Parameter(format!("max_extent must be odd, got {}", max_extent)));
    }
    if !(0.0..=10.0).contains(&anxiety) {
        return Err(Error::Parameter(format!("anxiety {} out of [0, 10]", anxiety)));
    }
    if steps == 1 {
        return Ok(BlurKernel::delta());
    }

    let mut rng = rng_from_seed(seed);
    let gauss = Normal::new(0.0f64, 1.0).expect("unit normal");
    let inertia = 0.9f64;
    let mut pos = (0.0f64, 0.0f64);
    let mut vel = (0.0f64, 0.0f64);
    let mut points = Vec::with_capacity(steps);
    points.push(pos);
    for _ in 1..steps {
        // inertial walk with random impulses; occasional larger jolt mimics
        // abrupt hand shake
        let jolt = if rng.random_range(0.0..1.0) < 0.05 { 3.0 } else { 1.0 };
        vel.0 = inertia * vel.0 + anxiety * jolt * gauss.sample(&mut rng);
        vel.1 = inertia * vel.1 + anxiety * jolt * gauss.sample(&mut rng);
        pos.0 += vel.0;
        pos.1 += vel.1;
        points.push(pos);
    }

    // center the trajectory and shrink it (never stretch) into the support
    let (mut cx, mut cy) = (0.0, 0.0);
    for p in &points {
        cx += p.0;
        cy += p.1;
    }
    cx /= points.len() as f64;
    cy /= points.len() as f64;
    let half = (max_extent - 1) as f64 / 2.0;
    let mut max_abs = 0.0f64;
    for p in &points {
        max_abs = max_abs.max((p.0 - cx).abs()).max((p.1 - cy).abs());
    }
    let scale = if max_abs > half { half / max_abs } else { 1.0 };

    let k = max_extent;
    let mut weights = vec![0.0f64; k * k];
    let center = half;
    let mut splat = |x: f64, y: f64, mass: f64| {
        let gx = (x + center).clamp(0.0, (k - 1) as f64);
        let gy = (y + center).clamp(0.0, (k - 1) as f64);
        let x0 = gx.floor() as usize;
        let y0 = gy.floor() as usize;
        let fx = gx - x0 as f64;
        let fy = gy - y0 as f64;
        let x1 = (x0 + 1).min(k - 1);
        let y1 = (y0 + 1).min(k - 1);
        weights[y0 * k + x0] += mass * (1.0 - fx) * (1.0 - fy);
        weights[y0 * k + x1] += mass * fx * (1.0 - fy);
        weights[y1 * k + x0] += mass * (1.0 - fx) * fy;
        weights[y1 * k + x1] += mass * fx * fy;
    };
    // splat along segments so fast strokes stay connected
    const SUBSTEPS: usize = 4;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        for s in 0..SUBSTEPS {
            let t = s as f64 / SUBSTEPS as f64;
            let x = ((a.0 + (b.0 - a.0) * t) - cx) * scale;
            let y = ((a.1 + (b.1 - a.1) * t) - cy) * scale;
            splat(x, y, 1.0);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    BlurKernel::new(k, weights)
}

/// Per-channel true convolution with reflect padding, plus seeded additive
/// Gaussian noise, clamped to [0,1].
pub fn apply_blur(image: &ImageBuffer, kernel: &BlurKernel, noise_sigma: f64, seed: u64) -> Result<ImageBuffer> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let k = kernel.size();
    let r = (k / 2) as isize;
    if k > h || k > w || r as usize >= h || r as usize >= w {
        return Err(Error::dimension(
            "apply_blur",
            &[k],
            format!("kernel smaller than image {}x{}", h, w),
        ));
    }
    if noise_sigma < 0.0 {
        return Err(Error::Parameter(format!("noise sigma {} < 0", noise_sigma)));
    }
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut v = i;
        if v < 0 {
            v = -v;
        }
        if v >= len {
            v = 2 * len - 2 - v;
        }
        v as usize
    };
    let mut out = ImageBuffer::zeros(h, w, c)?;
    let kw = kernel.weights();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for ky in 0..k {
                    // true convolution: kernel flipped relative to the image
                    let sy = reflect(y as isize - (ky as isize - r), h);
                    for kx in 0..k {
                        let wv = kw[ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let sx = reflect(x as isize - (kx as isize - r), w);
                        acc += wv * image.get(sy, sx, ch) as f64;
                    }
                }
                out.set(y, x, ch, acc as f32);
            }
        }
    }
    if noise_sigma > 0.0 {
        let mut rng = rng_from_seed(seed);
        let noise = Normal::new(0.0f64, noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
        for v in out.data_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)) as f32;
        }
    }
    out.clamp01();
    Ok(out)
}

/// Render a payload as a sharp QR image (exactly 0/1 values, quiet zone kept).
pub fn render_qr(
    payload: &str,
    version: u32,
    ec_level: EcLevel,
    module_pixels: usize,
    quiet_zone: usize,
) -> Result<ImageBuffer> {
    let matrix = codec::encode(payload, version, ec_level)?;
    codec::render_matrix(&matrix, module_pixels, quiet_zone)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub index: usize,
    pub sharp: String,
    pub blur: String,
    pub payload: String,
    pub kernel_seed: u64,
    pub noise_sigma: f64,
    pub severity: f64,
}

/// Generation parameters recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub qr_version: u32,
    pub ec_level: EcLevel,
    pub module_pixels: usize,
    pub quiet_zone: usize,
    /// Blur severity range in [0,1]; 0 is a delta kernel.
    pub severity: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub channels: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            qr_version: 2,
            ec_level: EcLevel::M,
            module_pixels: 3,
            quiet_zone: 4,
            severity: (0.1, 0.6),
            noise_sigma: (0.0, 0.01),
            channels: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split: String,
    pub count: usize,
    pub params: GenParams,
    pub samples: Vec<SamplePair>,
}

impl DatasetManifest {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Parse and validate structure (schema version, count, path uniqueness).
    /// Filesystem existence is checked separately by [`DatasetManifest::load`].
    pub fn parse_str(text: &str) -> Result<DatasetManifest> {
        let manifest: DatasetManifest = toml::from_str(text)
            .map_err(|e| Error::Manifest(format!("manifest parse: {}", e)))?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "schema version {} unsupported (expected {})",
                manifest.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        if manifest.count != manifest.samples.len() {
            return Err(Error::Manifest(format!(
                "entry count {} does not match header count {}",
                manifest.samples.len(),
                manifest.count
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &manifest.samples {
            if !seen.insert(&s.sharp) || !seen.insert(&s.blur) {
                return Err(Error::Manifest(format!("duplicate path in sample {}", s.index)));
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_toml_string())?;
        Ok(path)
    }

    /// Load from `<dir>/manifest` and verify that every referenced file exists.
    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {}", path.display(), e)))?;
        let manifest = Self::parse_str(&text)?;
        let mut missing = Vec::new();
        for s in &manifest.samples {
            for rel in [&s.sharp, &s.blur] {
                if !dir.join(rel).is_file() {
                    missing.push(rel.clone());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::Manifest(format!(
                "missing files: {}",
                missing.join(", ")
            )));
        }
        Ok(manifest)
    }

    /// Load the (sharp, blurred) pair of images for a sample.
    pub fn load_pair(&self, dir: &Path, index: usize) -> Result<(ImageBuffer, ImageBuffer)> {
        let s = &self.samples[index];
        Ok((
            ImageBuffer::load_png(&dir.join(&s.sharp))?,
            ImageBuffer::load_png(&dir.join(&s.blur))?,
        ))
    }
}

/// Map severity in [0,1] to trajectory parameters. Severity 0 is a delta
/// kernel (no blur); 1 is a long, wide shake.
pub fn kernel_for_severity(seed: u64, severity: f64) -> Result<BlurKernel> {
    let s = severity.clamp(0.0, 1.0);
    if s == 0.0 {
        return Ok(BlurKernel::delta());
    }
    let steps = 2 + (s * 48.0).round() as usize;
    let anxiety = 0.15 + 0.55 * s;
    let extent = {
        let e = 3 + (s * 18.0).round() as usize;
        if e % 2 == 0 {
            e + 1
        } else {
            e
        }
    };
    gen_trajectory_psf(seed, steps, anxiety, extent)
}

fn generate_split(root: &Path, split: &str, n: usize, params: &GenParams) -> Result<DatasetManifest> {
    let split_dir = root.join(split);
    std::fs::create_dir_all(split_dir.join("sharp"))?;
    std::fs::create_dir_all(split_dir.join("blur"))?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let payload_seed = derive_seed_indexed(params.seed, &format!("{split}-payload"), i as u64);
        let kernel_seed = derive_seed_indexed(params.seed, &format!("{split}-kernel"), i as u64);
        let noise_seed = derive_seed_indexed(params.seed, &format!("{split}-noise"), i as u64);
        let draw_seed = derive_seed_indexed(params.seed, &format!("{split}-draw"), i as u64);
        let mut draw = rng_from_seed(draw_seed);
        let severity = if params.severity.1 > params.severity.0 {
            draw.random_range(params.severity.0..params.severity.1)
        } else {
            params.severity.0
        };
        let noise_sigma = if params.noise_sigma.1 > params.noise_sigma.0 {
            draw.random_range(params.noise_sigma.0..params.noise_sigma.1)
        } else {
            params.noise_sigma.0
        };
        let payload = format!(
            "ADNET-{}{:04}-{:04X}",
            &split[..1],
            i,
            rng_from_seed(payload_seed).random_range(0..0x10000u32)
        );
        let sharp = render_qr(
            &payload,
            params.qr_version,
            params.ec_level,
            params.module_pixels,
            params.quiet_zone,
        )?;
        let sharp = if params.channels == 3 { sharp.expand3() } else { sharp };
        let kernel = kernel_for_severity(kernel_seed, severity)?;
        let blurred = apply_blur(&sharp, &kernel, noise_sigma, noise_seed)?;
        let sharp_rel = format!("sharp/{:04}.png", i);
        let blur_rel = format!("blur/{:04}.png", i);
        sharp.save_png(&split_dir.join(&sharp_rel))?;
        blurred.save_png(&split_dir.join(&blur_rel))?;
        samples.push(SamplePair {
            index: i,
            sharp: sharp_rel,
            blur: blur_rel,
            payload,
            kernel_seed,
            noise_sigma,
            severity,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        split: split.to_string(),
        count: samples.len(),
        params: params.clone(),
        samples,
    };
    manifest.save(&split_dir)?;
    Ok(manifest)
}

/// Generate `train` and `test` splits under `root`, fully reproducible from
/// `params.seed`.
pub fn build_dataset(
    root: &Path,
    n_train: usize,
    n_test: usize,
    params: &GenParams,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let train = generate_split(root, "train", n_train, params)?;
    let test = generate_split(root, "test", n_test, params)?;
    Ok((train, test))
}

/// Apply the same random flips / 90-degree rotations to both pair members.
/// Rotations require square images.
pub fn augment_pair(
    sharp: &ImageBuffer,
    blurred: &ImageBuffer,
    seed: u64,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let mut rng = rng_from_seed(derive_seed(seed, "augment"));
    let hflip = rng.random_range(0.0..1.0) < 0.5;
    let vflip = rng.random_range(0.0..1.0) < 0.5;
    let quarter_turns = rng.random_range(0..4u32);
    if quarter_turns != 0 && (sharp.height() != sharp.width() || blurred.height() != blurred.width()) {
        return Err(Error::dimension(
            "augment rotation",
            &[sharp.height(), sharp.width()],
            "square patches",
        ));
    }
    let apply = |img: &ImageBuffer| -> Result<ImageBuffer> {
        let mut out = img.clone();
        if hflip {
            out = out.flip_horizontal();
        }
        if vflip {
            out = out.flip_vertical();
        }
        for _ in 0..quarter_turns {
            out = out.rot90()?;
        }
        Ok(out)
    };
    Ok((apply(sharp)?, apply(blurred)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_trajectory_is_delta() {
        let k = gen_trajectory_psf(5, 1, 0.3, 9).unwrap();
        assert_eq!(k.size(), 1);
        assert_eq!(k.weights(), &[1.0]);
    }

    #[test]
    fn psf_is_normalized_and_nonnegative() {
        for seed in 0..20u64 {
            let k = gen_trajectory_psf(seed, 30, 0.4, 15).unwrap();
            let sum: f64 = k.weights().iter().sum();
            assert!((sum - 1.0).abs() < KERNEL_SUM_TOL, "seed {}: sum {}", seed, sum);
            assert!(k.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn psf_is_deterministic() {
        let a = gen_trajectory_psf(42, 25, 0.5, 13).unwrap();
        let b = gen_trajectory_psf(42, 25, 0.5, 13).unwrap();
        assert_eq!(a, b);
        let c = gen_trajectory_psf(43, 25, 0.5, 13).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn psf_degenerate_parameters_rejected() {
        assert!(gen_trajectory_psf(1, 0, 0.3, 9).is_err());
        assert!(gen_trajectory_psf(1, 5, 0.3, 8).is_err());
    }

    #[test]
    fn delta_blur_is_identity() {
        let mut img = ImageBuffer::zeros(10, 12, 3).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 31 % 97) as f32) / 97.0;
        }
        let out = apply_blur(&img, &BlurKernel::delta(), 0.0, 0).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn blur_preserves_global_mean() {
        let mut img = ImageBuffer::zeros(40, 40, 1).unwrap();
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 17 % 13) as f32) / 13.0;
        }
        let k = gen_trajectory_psf(3, 30, 0.4, 11).unwrap();
        let out = apply_blur(&img, &k, 0.0, 0).unwrap();
        assert!((out.mean() - img.mean()).abs() < 1e-3);
    }

    #[test]
    fn horizontal_box_kernel_ramps_a_step() {
        // 1D horizontal box of length 3 inside a 3x3 kernel
        let w = vec![
            0.0, 0.0, 0.0,
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0,
            0.0, 0.0, 0.0,
        ];
        let kernel = BlurKernel::new(3, w).unwrap();
        let mut img = ImageBuffer::zeros(4, 4, 1).unwrap();
        for y in 0..4 {
            for x in 2..4 {
                img.set(y, x, 0, 1.0);
            }
        }
        let out = apply_blur(&img, &kernel, 0.0, 0).unwrap();
        let row: Vec<f32> = (0..4).map(|x| out.get(1, x, 0)).collect();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (got, want) in row.iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-6, "{:?} vs {:?}", row, expect);
        }
    }

    #[test]
    fn blur_is_linear_without_noise() {
        let mut a = ImageBuffer::zeros(16, 16, 1).unwrap();
        let mut b = ImageBuffer::zeros(16, 16, 1).unwrap();
        for i in 0..256 {
            a.data_mut()[i] = ((i * 7 % 11) as f32) / 22.0;
            b.data_mut()[i] = ((i * 13 % 17) as f32) / 34.0;
        }
        // mix inside [0,1] so clamping stays inactive
        let mut mixed = ImageBuffer::zeros(16, 16, 1).unwrap();
        for i in 0..256 {
            mixed.data_mut()[i] = 0.6 * a.data()[i] + 0.4 * b.data()[i];
        }
        let k = gen_trajectory_psf(9, 20, 0.3, 9).unwrap();
        let ba = apply_blur(&a, &k, 0.0, 0).unwrap();
        let bb = apply_blur(&b, &k, 0.0, 0).unwrap();
        let bm = apply_blur(&mixed, &k, 0.0, 0).unwrap();
        for i in 0..256 {
            let lin = 0.6 * ba.data()[i] + 0.4 * bb.data()[i];
            assert!((bm.data()[i] - lin).abs() < 1e-6);
        }
    }

    #[test]
    fn oversized_kernel_rejected() {
        let img = ImageBuffer::zeros(8, 8, 1).unwrap();
        let k = gen_trajectory_psf(1, 30, 0.5, 11).unwrap();
        assert!(matches!(
            apply_blur(&img, &k, 0.0, 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn render_qr_is_deterministic_and_binary() {
        let a = render_qr("HELLO-ADNET-001", 2, EcLevel::M, 3, 4).unwrap();
        let b = render_qr("HELLO-ADNET-001", 2, EcLevel::M, 3, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn render_qr_capacity_error() {
        let huge = "x".repeat(3000);
        assert!(matches!(
            render_qr(&huge, 1, EcLevel::M, 2, 4),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn augment_identity_draw_possible_and_involution() {
        let mut sharp = ImageBuffer::zeros(8, 8, 1).unwrap();
        for (i, v) in sharp.data_mut().iter_mut().enumerate() {
            *v = (i % 2) as f32;
        }
        let blur = sharp.flip_horizontal();
        // find a seed with the identity draw
        let mut identity_seen = false;
        for seed in 0..64u64 {
            let (s2, b2) = augment_pair(&sharp, &blur, seed).unwrap();
            if s2 == sharp && b2 == blur {
                identity_seen = true;
                break;
            }
        }
        assert!(identity_seen, "no identity draw in 64 seeds");
        // flips are involutions
        assert_eq!(sharp.flip_horizontal().flip_horizontal(), sharp);
        assert_eq!(sharp.flip_vertical().flip_vertical(), sharp);
    }

    #[test]
    fn augment_applies_same_transform_to_both() {
        // encode coordinates in pixel values so any transform mismatch shows
        let mut sharp = ImageBuffer::zeros(6, 6, 1).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                sharp.set(y, x, 0, (y * 6 + x) as f32 / 36.0);
            }
        }
        let blurred = sharp.clone();
        for seed in 0..16u64 {
            let (s2, b2) = augment_pair(&sharp, &blurred, seed).unwrap();
            assert_eq!(s2, b2, "seed {} transforms diverged", seed);
        }
    }

    #[test]
    fn augment_rejects_nonsquare_rotation() {
        let sharp = ImageBuffer::zeros(4, 6, 1).unwrap();
        let blur = sharp.clone();
        let mut rejected = false;
        for seed in 0..32u64 {
            match augment_pair(&sharp, &blur, seed) {
                Err(Error::Dimension { .. }) => {
                    rejected = true;
                    break;
                }
                _ => continue,
            }
        }
        assert!(rejected, "rotation draw on non-square pair never rejected");
    }

    #[test]
    fn manifest_parse_validates_count_and_duplicates() {
        let params = GenParams::default();
        let mk = |i: usize| SamplePair {
            index: i,
            sharp: format!("sharp/{:04}.png", i),
            blur: format!("blur/{:04}.png", i),
            payload: format!("P{}", i),
            kernel_seed: i as u64,
            noise_sigma: 0.0,
            severity: 0.1,
        };
        let good = DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            split: "train".into(),
            count: 2,
            params: params.clone(),
            samples: vec![mk(0), mk(1)],
        };
        let text = good.to_toml_string();
        assert_eq!(DatasetManifest::parse_str(&text).unwrap(), good);

        let mut bad_count = good.clone();
        bad_count.count = 3;
        assert!(DatasetManifest::parse_str(&bad_count.to_toml_string()).is_err());

        let mut dup = good.clone();
        dup.samples[1].sharp = dup.samples[0].sharp.clone();
        assert!(DatasetManifest::parse_str(&dup.to_toml_string()).is_err());

        let mut bad_schema = good;
        bad_schema.schema_version = 9;
        assert!(DatasetManifest::parse_str(&bad_schema.to_toml_string()).is_err());
    }
}
