//! Blur severity-based routing: the Laplacian-variance sharpness metric, the
//! midpoint threshold calibration, the dispatch rule, and the full two-network
//! restoration with decode-failure re-routing.
//!
//! The severity score of an input is the population variance of its
//! Laplacian-filtered grayscale. Sharper inputs score higher; scores above
//! the calibrated threshold route to the lightweight network, everything
//! else (ties included) to the strong one.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, DecodeResult};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::models::Restorer;
use crate::synth::DatasetManifest;

/// 3x3 Laplacian stencil used by the severity metric.
pub const LAPLACIAN: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

/// Laplacian variance of the luma image over the valid (unpadded) region.
pub fn laplacian_variance(image: &ImageBuffer) -> Result<f64> {
    let gray = image.to_gray();
    let (h, w) = (gray.height(), gray.width());
    if h < 3 || w < 3 {
        return Err(Error::dimension("laplacian_variance", &[h, w], "at least 3x3"));
    }
    let (oh, ow) = (h - 2, w - 2);
    let n = oh * ow;
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0f64;
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = LAPLACIAN[ky * 3 + kx];
                    if wv != 0.0 {
                        acc += wv * gray.get(y + ky, x + kx, 0) as f64;
                    }
                }
            }
            sum += acc;
            sum_sq += acc * acc;
        }
    }
    let mean = sum / n as f64;
    Ok(sum_sq / n as f64 - mean * mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub id: String,
    /// Laplacian-variance score of the blurred input.
    pub lv: f64,
    /// Whether the payload decoded after LENet restoration.
    pub decodable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub tau: f64,
    /// True when min LV of the decodable class strictly exceeds the max LV of
    /// the non-decodable class. Overlap is a warning, not an error.
    pub separable: bool,
    pub decodable_count: usize,
    pub non_decodable_count: usize,
}

/// Midpoint threshold between the blurriest decodable and the sharpest
/// non-decodable calibration records.
pub fn calibrate_threshold(records: &[CalibrationRecord]) -> Result<CalibrationOutcome> {
    let decodable: Vec<f64> = records.iter().filter(|r| r.decodable).map(|r| r.lv).collect();
    let non_decodable: Vec<f64> = records.iter().filter(|r| !r.decodable).map(|r| r.lv).collect();
    if decodable.is_empty() {
        return Err(Error::Calibration("no decodable records".into()));
    }
    if non_decodable.is_empty() {
        return Err(Error::Calibration("no non-decodable records".into()));
    }
    let min_dec = decodable.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_non = non_decodable.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(CalibrationOutcome {
        tau: (min_dec + max_non) / 2.0,
        separable: min_dec > max_non,
        decodable_count: decodable.len(),
        non_decodable_count: non_decodable.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    /// Higher LV than the threshold: route to LENet.
    Mild,
    /// At or below the threshold: route to EG-Restormer.
    Severe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NetworkId {
    Lenet,
    EgRestormer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub branch: Branch,
    pub lv: f64,
    pub tau: f64,
    /// Networks actually executed, in order.
    pub trace: Vec<NetworkId>,
}

/// Dispatch rule: strictly greater LV goes Mild; the boundary goes Severe.
pub fn route(lv: f64, tau: f64) -> Result<RoutingDecision> {
    if !lv.is_finite() || !tau.is_finite() {
        return Err(Error::Contract(format!(
            "route requires finite inputs, got lv={}, tau={}",
            lv, tau
        )));
    }
    let branch = if lv > tau { Branch::Mild } else { Branch::Severe };
    Ok(RoutingDecision {
        branch,
        lv,
        tau,
        trace: Vec::new(),
    })
}

/// One row of the calibration report.
pub fn collect_calibration_records(
    manifest: &DatasetManifest,
    dataset_dir: &Path,
    lenet: &dyn Restorer,
    codec: &Codec,
) -> Result<Vec<CalibrationRecord>> {
    codec.probe()?;
    let mut records = Vec::with_capacity(manifest.samples.len());
    for (i, sample) in manifest.samples.iter().enumerate() {
        let (_, blurred) = manifest.load_pair(dataset_dir, i)?;
        let lv = laplacian_variance(&blurred)?;
        let restored = lenet.restore(&blurred)?;
        let decoded = codec.decode(&restored);
        let decodable = decoded.decoded() && decoded.payload.as_deref() == Some(sample.payload.as_str());
        records.push(CalibrationRecord {
            id: sample.blur.clone(),
            lv,
            decodable,
        });
    }
    Ok(records)
}

/// Structured-text calibration report (records, threshold, separability).
pub fn calibration_report(records: &[CalibrationRecord], outcome: &CalibrationOutcome) -> String {
    #[derive(Serialize)]
    struct Report<'a> {
        tau: f64,
        separable: bool,
        decodable_count: usize,
        non_decodable_count: usize,
        records: &'a [CalibrationRecord],
    }
    toml::to_string(&Report {
        tau: outcome.tau,
        separable: outcome.separable,
        decodable_count: outcome.decodable_count,
        non_decodable_count: outcome.non_decodable_count,
        records,
    })
    .expect("report serializes")
}

/// Full adaptive restoration of one image.
///
/// Severe inputs go to the strong network once. Mild inputs go to the light
/// network; if its output fails to decode, the ORIGINAL input is re-routed to
/// the strong network and that output is returned (with its own decode
/// result, failed or not).
pub fn adnet_restore(
    image: &ImageBuffer,
    lenet: &dyn Restorer,
    eg_restormer: &dyn Restorer,
    tau: f64,
    codec: &Codec,
) -> Result<(ImageBuffer, RoutingDecision, DecodeResult)> {
    let lv = laplacian_variance(image)?;
    let mut decision = route(lv, tau)?;
    match decision.branch {
        Branch::Severe => {
            let restored = eg_restormer.restore(image)?;
            let decode = codec.decode(&restored);
            decision.trace = vec![NetworkId::EgRestormer];
            Ok((restored, decision, decode))
        }
        Branch::Mild => {
            let restored = lenet.restore(image)?;
            let decode = codec.decode(&restored);
            if decode.decoded() {
                decision.trace = vec![NetworkId::Lenet];
                return Ok((restored, decision, decode));
            }
            let fallback = eg_restormer.restore(image)?;
            let decode = codec.decode(&fallback);
            decision.trace = vec![NetworkId::Lenet, NetworkId::EgRestormer];
            Ok((fallback, decision, decode))
        }
    }
}

/// The two networks plus a calibrated threshold and codec, packaged as a
/// single restorer.
pub struct AdnetPipeline<'a> {
    pub lenet: &'a dyn Restorer,
    pub eg_restormer: &'a dyn Restorer,
    pub tau: f64,
    pub codec: &'a Codec,
}

impl<'a> AdnetPipeline<'a> {
    pub fn restore_traced(
        &self,
        image: &ImageBuffer,
    ) -> Result<(ImageBuffer, RoutingDecision, DecodeResult)> {
        adnet_restore(image, self.lenet, self.eg_restormer, self.tau, self.codec)
    }
}

impl<'a> Restorer for AdnetPipeline<'a> {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(self.restore_traced(image)?.0)
    }

    fn name(&self) -> String {
        format!(
            "adnet[{} | {} | tau={:.4}]",
            self.lenet.name(),
            self.eg_restormer.name(),
            self.tau
        )
    }
}
