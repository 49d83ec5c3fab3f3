//! Pluggable QR codec: an embedded encoder for rendering ground truth and an
//! external decoder executable invoked through a command template.
//!
//! The decoder contract: the template's `{path}` placeholder is substituted
//! with a temporary PNG path; the first stdout line on exit 0 is the payload,
//! anything else (empty output, nonzero exit) counts as not decoded, and
//! process-level failures (missing binary mid-run, timeout) are backend
//! errors, which evaluation never counts as successes.

use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub const PATH_PLACEHOLDER: &str = "{path}";
const PROBE_PAYLOAD: &str = "ADNET-PROBE-0001";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EcLevel {
    L,
    M,
    Q,
    H,
}

impl EcLevel {
    fn to_qrcode(self) -> qrcode::EcLevel {
        match self {
            EcLevel::L => qrcode::EcLevel::L,
            EcLevel::M => qrcode::EcLevel::M,
            EcLevel::Q => qrcode::EcLevel::Q,
            EcLevel::H => qrcode::EcLevel::H,
        }
    }
}

impl std::str::FromStr for EcLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(EcLevel::L),
            "M" => Ok(EcLevel::M),
            "Q" => Ok(EcLevel::Q),
            "H" => Ok(EcLevel::H),
            other => Err(Error::Parameter(format!("unknown EC level `{}`", other))),
        }
    }
}

/// QR module matrix; `true` is a dark module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleMatrix {
    pub size: usize,
    pub modules: Vec<bool>,
}

impl ModuleMatrix {
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.modules[y * self.size + x]
    }
}

/// Deterministic QR encoding at a fixed version and EC level.
pub fn encode(payload: &str, version: u32, ec_level: EcLevel) -> Result<ModuleMatrix> {
    if !(1..=40).contains(&version) {
        return Err(Error::Parameter(format!("QR version {} out of 1..=40", version)));
    }
    let code = qrcode::QrCode::with_version(
        payload.as_bytes(),
        qrcode::Version::Normal(version as i16),
        ec_level.to_qrcode(),
    )
    .map_err(|e| Error::Capacity(format!("payload of {} bytes does not fit version {} EC {:?}: {}", payload.len(), version, ec_level, e)))?;
    let size = code.width();
    let modules = code
        .to_colors()
        .into_iter()
        .map(|c| c == qrcode::Color::Dark)
        .collect();
    Ok(ModuleMatrix { size, modules })
}

/// Rasterize a module matrix: dark modules are 0.0, background 1.0, with the
/// mandatory quiet zone preserved. Values are exactly 0 or 1.
pub fn render_matrix(matrix: &ModuleMatrix, module_pixels: usize, quiet_zone: usize) -> Result<ImageBuffer> {
    if module_pixels == 0 {
        return Err(Error::Parameter("module_pixels must be >= 1".into()));
    }
    let dim = (matrix.size + 2 * quiet_zone) * module_pixels;
    let mut img = ImageBuffer::new(dim, dim, 1, vec![1.0; dim * dim])?;
    for my in 0..matrix.size {
        for mx in 0..matrix.size {
            if matrix.get(my, mx) {
                for dy in 0..module_pixels {
                    for dx in 0..module_pixels {
                        img.set(
                            (quiet_zone + my) * module_pixels + dy,
                            (quiet_zone + mx) * module_pixels + dx,
                            0,
                            0.0,
                        );
                    }
                }
            }
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStatus {
    Decoded,
    NotDecoded,
    BackendError,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub status: DecodeStatus,
    pub payload: Option<String>,
    pub latency: Duration,
}

impl DecodeResult {
    pub fn decoded(&self) -> bool {
        self.status == DecodeStatus::Decoded
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecBackendConfig {
    /// Decoder command template containing exactly one `{path}` placeholder.
    pub decoder_template: String,
    pub timeout_secs: f64,
}

impl Default for CodecBackendConfig {
    fn default() -> Self {
        CodecBackendConfig {
            decoder_template: String::new(),
            timeout_secs: 10.0,
        }
    }
}

/// A validated decoder backend.
pub struct Codec {
    template: Vec<String>,
    timeout: Duration,
    ident: String,
}

impl Codec {
    pub fn new(config: &CodecBackendConfig) -> Result<Codec> {
        if config.timeout_secs <= 0.0 {
            return Err(Error::Parameter("codec timeout must be > 0".into()));
        }
        let parts: Vec<String> = config
            .decoder_template
            .split_whitespace()
            .map(str::to_string)
            .collect();
        if parts.is_empty() {
            return Err(Error::Parameter("empty decoder template".into()));
        }
        let placeholders = parts.iter().filter(|p| p.contains(PATH_PLACEHOLDER)).count();
        if placeholders != 1 {
            return Err(Error::Parameter(format!(
                "decoder template must contain exactly one {}, found {}",
                PATH_PLACEHOLDER, placeholders
            )));
        }
        Ok(Codec {
            ident: config.decoder_template.clone(),
            template: parts,
            timeout: Duration::from_secs_f64(config.timeout_secs),
        })
    }

    /// Backend identity string for reports.
    pub fn ident(&self) -> &str {
        &self.ident
    }

    /// Verify the backend against a freshly rendered fixture: executable
    /// resolves, process runs, and the known payload round-trips.
    pub fn probe(&self) -> Result<()> {
        let matrix = encode(PROBE_PAYLOAD, 2, EcLevel::M)?;
        let fixture = render_matrix(&matrix, 4, 4)?;
        let result = self.decode(&fixture);
        match result.status {
            DecodeStatus::Decoded if result.payload.as_deref() == Some(PROBE_PAYLOAD) => Ok(()),
            DecodeStatus::Decoded => Err(Error::Environment(format!(
                "decoder backend `{}` returned wrong payload for the probe fixture",
                self.ident
            ))),
            _ => Err(Error::Environment(format!(
                "decoder backend `{}` failed the startup probe (executable missing or contract violated)",
                self.ident
            ))),
        }
    }

    /// Run the backend on one image. Infallible at the API level: every
    /// failure mode is folded into the returned status.
    pub fn decode(&self, image: &ImageBuffer) -> DecodeResult {
        let start = Instant::now();
        let status_err = |start: Instant| DecodeResult {
            status: DecodeStatus::BackendError,
            payload: None,
            latency: start.elapsed(),
        };
        let tmp = match tempfile::Builder::new().prefix("adnet-decode-").suffix(".png").tempfile() {
            Ok(f) => f,
            Err(_) => return status_err(start),
        };
        if image.save_png(tmp.path()).is_err() {
            return status_err(start);
        }
        let path_str = tmp.path().to_string_lossy().into_owned();
        let argv: Vec<String> = self
            .template
            .iter()
            .map(|part| part.replace(PATH_PLACEHOLDER, &path_str))
            .collect();
        let mut child = match Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(c) => c,
            Err(_) => return status_err(start),
        };
        let deadline = start + self.timeout;
        let exit = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => {
                    if Instant::now() > deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return status_err(start);
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(_) => {
                    let _ = child.kill();
                    return status_err(start);
                }
            }
        };
        let mut stdout = String::new();
        if let Some(mut pipe) = child.stdout.take() {
            let _ = pipe.read_to_string(&mut stdout);
        }
        let payload = stdout.lines().next().unwrap_or("").to_string();
        if exit.success() && !payload.is_empty() {
            DecodeResult {
                status: DecodeStatus::Decoded,
                payload: Some(payload),
                latency: start.elapsed(),
            }
        } else {
            DecodeResult {
                status: DecodeStatus::NotDecoded,
                payload: None,
                latency: start.elapsed(),
            }
        }
    }
}

/// Resolve the default decoder template: the `ADNET_DECODER` environment
/// variable, a `qrdec` binary beside the current executable, `qrdec` on PATH,
/// then `zbarimg`.
pub fn default_decoder_template() -> Option<String> {
    if let Ok(tpl) = std::env::var("ADNET_DECODER") {
        if !tpl.trim().is_empty() {
            return Some(tpl);
        }
    }
    if let Ok(exe) = std::env::current_exe() {
        let sibling: PathBuf = exe.with_file_name("qrdec");
        if sibling.is_file() {
            return Some(format!("{} {}", sibling.display(), PATH_PLACEHOLDER));
        }
    }
    for template in [
        concat!("qrdec ", "{path}"),
        concat!("zbarimg --quiet --raw ", "{path}"),
    ] {
        let bin = template.split_whitespace().next().unwrap();
        if path_lookup(bin) {
            return Some(template.to_string());
        }
    }
    None
}

fn path_lookup(bin: &str) -> bool {
    let Some(paths) = std::env::var_os("PATH") else {
        return false;
    };
    std::env::split_paths(&paths).any(|dir| dir.join(bin).is_file())
}

/// Decode rate over a set of results: 100 x decoded / total. Backend errors
/// count as failures; the caller should surface them separately.
pub fn decode_rate(results: &[DecodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Contract("decode rate over an empty set".into()));
    }
    let decoded = results.iter().filter(|r| r.decoded()).count();
    Ok(100.0 * decoded as f64 / results.len() as f64)
}
