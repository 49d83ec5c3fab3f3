//! Image-quality and task metrics: PSNR, single-scale SSIM, decoding rate,
//! and manifest-driven evaluation reports with optional contact sheets.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecBackendConfig, DecodeStatus};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::models::Restorer;
use crate::synth::DatasetManifest;

/// Reported PSNR for identical images (zero MSE).
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_extent(a: &ImageBuffer, b: &ImageBuffer, op: &str) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() || a.channels() != b.channels() {
        return Err(Error::dimension(
            op,
            &[b.height(), b.width(), b.channels()],
            format!("{}x{}x{}", a.height(), a.width(), a.channels()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit dynamic range, capped at
/// [`PSNR_CAP_DB`] so identical images report a finite, sortable value.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_extent(a, b, "psnr")?;
    let mut se = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        let d = *x as f64 - *y as f64;
        se += d * d;
    }
    let mse = se / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0f64; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Weighted window sums over the valid region, separable implementation.
fn windowed(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = gaussian_window();
    let n = h * w;
    let mut aa = vec![0.0f64; n];
    let mut bb = vec![0.0f64; n];
    let mut ab = vec![0.0f64; n];
    for i in 0..n {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    let mu_a = windowed(a, h, w, &win);
    let mu_b = windowed(b, h, w, &win);
    let e_aa = windowed(&aa, h, w, &win);
    let e_bb = windowed(&bb, h, w, &win);
    let e_ab = windowed(&ab, h, w, &win);
    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), constants for unit
/// dynamic range, mean over valid windows; RGB images average the per-channel
/// scores.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_same_extent(a, b, "ssim")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::dimension(
            "ssim",
            &[h, w],
            format!("extents >= the {}x{} window", SSIM_WINDOW, SSIM_WINDOW),
        ));
    }
    let c = a.channels();
    let mut total = 0.0f64;
    for ch in 0..c {
        let pa: Vec<f64> = (0..h * w)
            .map(|i| a.data()[i * c + ch] as f64)
            .collect();
        let pb: Vec<f64> = (0..h * w)
            .map(|i| b.data()[i * c + ch] as f64)
            .collect();
        total += ssim_plane(&pa, &pb, h, w);
    }
    Ok(total / c as f64)
}

/// Decode rate over in-memory images: 100 x decoded / total. Backend errors
/// count as failures; the count is returned alongside for reporting.
pub fn decoding_rate(images: &[ImageBuffer], codec: &Codec) -> Result<(f64, usize)> {
    if images.is_empty() {
        return Err(Error::Contract("decoding_rate over an empty list".into()));
    }
    let mut decoded = 0usize;
    let mut backend_errors = 0usize;
    for img in images {
        match codec.decode(img).status {
            DecodeStatus::Decoded => decoded += 1,
            DecodeStatus::BackendError => backend_errors += 1,
            DecodeStatus::NotDecoded => {}
        }
    }
    Ok((100.0 * decoded as f64 / images.len() as f64, backend_errors))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub blur: String,
    pub psnr_db: f64,
    pub ssim: f64,
    /// decoded | not_decoded | backend_error | wrong_payload
    pub decode: String,
    pub restore_secs: f64,
    pub decode_secs: f64,
}

impl EvalRow {
    pub fn decoded(&self) -> bool {
        self.decode == "decoded"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalAggregates {
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub decoding_rate_pct: f64,
    pub avg_time_secs: f64,
    pub avg_restore_secs: f64,
    pub avg_decode_secs: f64,
    pub backend_errors: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub backend: String,
    pub config_hash: String,
    pub workers: usize,
    pub rows: Vec<EvalRow>,
    pub aggregates: EvalAggregates,
}

impl EvalReport {
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn parse_str(text: &str) -> Result<EvalReport> {
        toml::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            message: format!("eval report parse: {}", e),
        })
    }

    /// Recompute aggregates from rows; must equal the stored block exactly.
    pub fn recompute_aggregates(&self) -> EvalAggregates {
        aggregate(&self.rows)
    }
}

fn aggregate(rows: &[EvalRow]) -> EvalAggregates {
    let n = rows.len().max(1) as f64;
    let decoded = rows.iter().filter(|r| r.decoded()).count();
    EvalAggregates {
        mean_psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        decoding_rate_pct: 100.0 * decoded as f64 / n,
        avg_time_secs: rows.iter().map(|r| r.restore_secs + r.decode_secs).sum::<f64>() / n,
        avg_restore_secs: rows.iter().map(|r| r.restore_secs).sum::<f64>() / n,
        avg_decode_secs: rows.iter().map(|r| r.decode_secs).sum::<f64>() / n,
        backend_errors: rows.iter().filter(|r| r.decode == "backend_error").count(),
    }
}

fn fnv_hash(text: &str) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{:016x}", h)
}

fn eval_one(
    restorer: &dyn Restorer,
    manifest: &DatasetManifest,
    dir: &Path,
    codec: &Codec,
    index: usize,
) -> Result<EvalRow> {
    let sample = &manifest.samples[index];
    let (sharp, blurred) = manifest.load_pair(dir, index)?;
    let t0 = Instant::now();
    let restored = restorer.restore(&blurred)?;
    let restore_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let decode = codec.decode(&restored);
    let decode_secs = t1.elapsed().as_secs_f64();
    let decode_label = match decode.status {
        DecodeStatus::Decoded if decode.payload.as_deref() == Some(sample.payload.as_str()) => {
            "decoded"
        }
        DecodeStatus::Decoded => "wrong_payload",
        DecodeStatus::NotDecoded => "not_decoded",
        DecodeStatus::BackendError => "backend_error",
    };
    Ok(EvalRow {
        index,
        blur: sample.blur.clone(),
        psnr_db: psnr(&restored, &sharp)?,
        ssim: ssim(&restored, &sharp)?,
        decode: decode_label.to_string(),
        restore_secs,
        decode_secs,
    })
}

/// Evaluate a restorer over every blurred image of a manifest.
/// Metric values are deterministic given fixed model weights; the timing
/// columns are wall-clock and excluded from that guarantee.
pub fn evaluate(
    restorer: &dyn Restorer,
    manifest: &DatasetManifest,
    dir: &Path,
    codec: &Codec,
) -> Result<EvalReport> {
    if manifest.samples.is_empty() {
        return Err(Error::Contract("evaluate over an empty manifest".into()));
    }
    codec.probe()?;
    let mut rows = Vec::with_capacity(manifest.samples.len());
    for i in 0..manifest.samples.len() {
        rows.push(eval_one(restorer, manifest, dir, codec, i)?);
    }
    let aggregates = aggregate(&rows);
    Ok(EvalReport {
        model: restorer.name(),
        backend: codec.ident().to_string(),
        config_hash: fnv_hash(&format!(
            "{}|{}|{}|{:?}",
            restorer.name(),
            codec.ident(),
            manifest.split,
            manifest.params
        )),
        workers: 1,
        rows,
        aggregates,
    })
}

/// Parallel evaluation: each worker thread builds its own restorer and codec
/// so no state is shared. Rows come back in manifest order; metric values
/// match the single-worker run exactly.
pub fn evaluate_parallel(
    factory: &(dyn Fn() -> Result<Box<dyn Restorer>> + Sync),
    manifest: &DatasetManifest,
    dir: &Path,
    codec_config: &CodecBackendConfig,
    workers: usize,
) -> Result<EvalReport> {
    let workers = workers.max(1);
    if workers == 1 {
        let restorer = factory()?;
        let codec = Codec::new(codec_config)?;
        return evaluate(restorer.as_ref(), manifest, dir, &codec);
    }
    Codec::new(codec_config)?.probe()?;
    let n = manifest.samples.len();
    if n == 0 {
        return Err(Error::Contract("evaluate over an empty manifest".into()));
    }
    let chunk = n.div_ceil(workers);
    let mut results: Vec<Option<Result<Vec<EvalRow>>>> = Vec::new();
    results.resize_with(workers, || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            handles.push(scope.spawn(move || -> Result<Vec<EvalRow>> {
                let restorer = factory()?;
                let codec = Codec::new(codec_config)?;
                let mut rows = Vec::with_capacity(hi.saturating_sub(lo));
                for i in lo..hi {
                    rows.push(eval_one(restorer.as_ref(), manifest, dir, &codec, i)?);
                }
                Ok(rows)
            }));
        }
        for (w, h) in handles.into_iter().enumerate() {
            results[w] = Some(h.join().expect("worker panicked"));
        }
    });
    let mut rows = Vec::with_capacity(n);
    for r in results.into_iter().flatten() {
        rows.extend(r?);
    }
    let restorer = factory()?;
    let codec = Codec::new(codec_config)?;
    let aggregates = aggregate(&rows);
    Ok(EvalReport {
        model: restorer.name(),
        backend: codec.ident().to_string(),
        config_hash: fnv_hash(&format!(
            "{}|{}|{}|{:?}",
            restorer.name(),
            codec.ident(),
            manifest.split,
            manifest.params
        )),
        workers,
        rows,
        aggregates,
    })
}

/// Contact sheet: one (blurred, restored, sharp) triptych row per sample,
/// up to `max_rows`.
pub fn contact_sheet(
    restorer: &dyn Restorer,
    manifest: &DatasetManifest,
    dir: &Path,
    max_rows: usize,
    out: &Path,
) -> Result<()> {
    let rows = manifest.samples.len().min(max_rows);
    if rows == 0 {
        return Err(Error::Contract("contact sheet needs at least one sample".into()));
    }
    let (sharp0, _) = manifest.load_pair(dir, 0)?;
    let (h, w) = (sharp0.height(), sharp0.width());
    let gap = 2usize;
    let sheet_w = 3 * w + 2 * gap;
    let sheet_h = rows * h + (rows - 1) * gap;
    let mut sheet = ImageBuffer::new(sheet_h, sheet_w, 3, vec![1.0; sheet_h * sheet_w * 3])?;
    for r in 0..rows {
        let (sharp, blurred) = manifest.load_pair(dir, r)?;
        if sharp.height() != h || sharp.width() != w {
            return Err(Error::dimension(
                "contact_sheet",
                &[sharp.height(), sharp.width()],
                format!("uniform {}x{} samples", h, w),
            ));
        }
        let restored = restorer.restore(&blurred)?;
        for (col, img) in [&blurred, &restored, &sharp].into_iter().enumerate() {
            let rgb = img.expand3();
            let y0 = r * (h + gap);
            let x0 = col * (w + gap);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        sheet.set(y0 + y, x0 + x, c, rgb.get(y, x, c));
                    }
                }
            }
        }
    }
    sheet.save_png(out)
}
