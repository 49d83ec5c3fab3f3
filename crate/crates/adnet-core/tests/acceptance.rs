//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Timed criteria take a global lock so wall-clock bounds
//! are not skewed by concurrently running tests.

use std::path::Path;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::Rng;

use adnet_core::blocks::{ega_forward, Egab, SobelBank};
use adnet_core::codec::{Codec, CodecBackendConfig, EcLevel};
use adnet_core::error::{Error, Result};
use adnet_core::gradcheck;
use adnet_core::image::ImageBuffer;
use adnet_core::metrics::{self, psnr, ssim, PSNR_CAP_DB};
use adnet_core::models::{Model, ModelConfig, Restorer};
use adnet_core::rng::rng_from_seed;
use adnet_core::routing::{self, Branch};
use adnet_core::synth::{self, build_dataset, GenParams};
use adnet_core::tensor::Tensor;
use adnet_core::trainer::{self, TrainConfig};

fn timing_lock() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .expect("timing lock")
}

fn backend() -> Codec {
    Codec::new(&CodecBackendConfig {
        decoder_template: format!("{} {}", env!("CARGO_BIN_EXE_qrdec"), "{path}"),
        timeout_secs: 10.0,
    })
    .unwrap()
}

fn pass(line: &str) {
    eprintln!("[PASS] {}", line);
}

/// Gradient suite: every op, every block, and both desk-scale models at
/// 16x16 pass central finite differences at 1e-4 (64-bit), in under two
/// minutes on one CPU core.
#[test]
fn criterion_gradient_suite() {
    let _guard = timing_lock();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let cases = pool.install(|| gradcheck::run_full_suite(7).unwrap());
    let elapsed = start.elapsed();
    assert!(cases.len() >= 25, "suite unexpectedly small: {}", cases.len());
    for c in &cases {
        assert!(
            c.passed(),
            "{}: max rel err {:.3e} exceeds {:.0e} ({} entries)",
            c.name,
            c.max_rel_err,
            gradcheck::FD_TOLERANCE,
            c.entries_checked
        );
    }
    assert!(
        elapsed < Duration::from_secs(120),
        "gradient suite took {:?} on one core (budget 2 min)",
        elapsed
    );
    pass(&format!(
        "gradient suite: {} cases, all rel err <= 1e-4, {:?} on one core",
        cases.len(),
        elapsed
    ));
}

/// EGAB reduction: with w_E = 0 the block output equals the unmodulated
/// transposed-attention output bitwise at 32-bit, over 100 random inputs.
#[test]
fn criterion_egab_reduction() {
    let mut rng = rng_from_seed(1001);
    let mut checked = 0usize;
    for round in 0..4u64 {
        let block = Egab::<f32>::init(&mut rng, 8, 2, 2).unwrap();
        // w_E stays at its zero init
        for _ in 0..25 {
            let data: Vec<f32> = (0..8 * 6 * 6).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let x = Tensor::constant(data, &[1, 8, 6, 6]).unwrap();
            let modulated = block.forward(&x).unwrap().to_vec();
            let plain = block.forward_mdta(&x).unwrap().to_vec();
            assert!(
                modulated
                    .iter()
                    .zip(plain.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "bitwise mismatch in round {}",
                round
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 100);
    pass("EGAB reduction: w_E=0 output bit-identical to plain MDTA on 100 random inputs");
}

/// EGA correctness: constant input gives a zero edge map; axis-aligned and
/// diagonal steps select the matching kernel; values match hand-convolution
/// fixtures within 1e-6.
#[test]
fn criterion_ega_correctness() {
    // constant input -> exactly zero
    let constant = Tensor::<f64>::full(&[1, 1, 7, 7], 0.42);
    let e = ega_forward(&constant).unwrap();
    assert!(e.to_vec().iter().all(|v| *v == 0.0), "nonzero edge map on constant input");

    // vertical step: the horizontal-gradient kernel dominates with raw
    // response 4 on the step columns; normalized peak 1
    let n = 6usize;
    let mut step = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 3..n {
            step[r * n + c] = 1.0;
        }
    }
    let x = Tensor::constant(step.clone(), &[1, 1, n, n]).unwrap();
    let padded = x.reflect_pad2d(1).unwrap();
    let responses: Vec<Vec<f64>> = SobelBank::kernels()
        .iter()
        .map(|k| {
            let kt = Tensor::constant(k.to_vec(), &[1, 1, 3, 3]).unwrap();
            padded.conv2d(&kt, None, 1, 0, 1).unwrap().abs().to_vec()
        })
        .collect();
    let mid = 2 * n + 2; // interior pixel on the step column
    assert!((responses[0][mid] - 4.0).abs() < 1e-6, "Gx response {}", responses[0][mid]);
    assert!(
        responses[0][mid] > responses[1][mid]
            && responses[0][mid] > responses[2][mid]
            && responses[0][mid] > responses[3][mid],
        "horizontal-gradient kernel not selected on a vertical step"
    );
    let edge = ega_forward(&x).unwrap().to_vec();
    for r in 1..n - 1 {
        assert!((edge[r * n + 2] - 1.0).abs() < 1e-6, "normalized peak {}", edge[r * n + 2]);
    }

    // main-diagonal step: hand convolution at the center gives |Gx|=3,
    // |Gy|=3, |D45|=4, |D135|=0
    let m = 5usize;
    let mut diag = vec![0.0f64; m * m];
    for y in 0..m {
        for x in 0..m {
            if x >= y {
                diag[y * m + x] = 1.0;
            }
        }
    }
    let xd = Tensor::constant(diag, &[1, 1, m, m]).unwrap();
    let padded = xd.reflect_pad2d(1).unwrap();
    let center = 2 * m + 2;
    let diag_responses: Vec<f64> = SobelBank::kernels()
        .iter()
        .map(|k| {
            let kt = Tensor::constant(k.to_vec(), &[1, 1, 3, 3]).unwrap();
            padded.conv2d(&kt, None, 1, 0, 1).unwrap().abs().to_vec()[center]
        })
        .collect();
    assert!((diag_responses[0] - 3.0).abs() < 1e-6);
    assert!((diag_responses[1] - 3.0).abs() < 1e-6);
    assert!((diag_responses[2] - 4.0).abs() < 1e-6);
    assert!(diag_responses[3].abs() < 1e-6);
    assert!(
        diag_responses[2] > diag_responses[0] && diag_responses[2] > diag_responses[1],
        "diagonal kernel not dominant on a diagonal step"
    );
    pass("EGA correctness: constant/axis/diagonal fixtures match hand convolution within 1e-6");
}

/// Threshold calibration reproduces the direct midpoint formula on 50
/// randomized record sets; routing obeys the strict inequality on boundary
/// cases; separable sets route every record to its label.
#[test]
fn criterion_threshold_and_routing_exactness() {
    let mut rng = rng_from_seed(4242);
    for set in 0..50 {
        let n_dec = rng.random_range(1..20);
        let n_non = rng.random_range(1..20);
        let mut records = Vec::new();
        for i in 0..n_dec {
            records.push(routing::CalibrationRecord {
                id: format!("d{}", i),
                lv: rng.random_range(0.0..500.0),
                decodable: true,
            });
        }
        for i in 0..n_non {
            records.push(routing::CalibrationRecord {
                id: format!("n{}", i),
                lv: rng.random_range(0.0..500.0),
                decodable: false,
            });
        }
        let outcome = routing::calibrate_threshold(&records).unwrap();
        // independent midpoint oracle
        let min_dec = records
            .iter()
            .filter(|r| r.decodable)
            .map(|r| r.lv)
            .fold(f64::INFINITY, f64::min);
        let max_non = records
            .iter()
            .filter(|r| !r.decodable)
            .map(|r| r.lv)
            .fold(f64::NEG_INFINITY, f64::max);
        let expected = (min_dec + max_non) / 2.0;
        assert_eq!(outcome.tau, expected, "midpoint mismatch in set {}", set);
        assert_eq!(outcome.separable, min_dec > max_non);

        if outcome.separable {
            for r in &records {
                let branch = routing::route(r.lv, outcome.tau).unwrap().branch;
                let expected = if r.decodable { Branch::Mild } else { Branch::Severe };
                assert_eq!(branch, expected, "separable set {} routed off-label", set);
            }
        }
    }
    // boundary cases: strictly greater goes mild, ties go severe
    for tau in [0.0, 1.0, 123.456] {
        assert_eq!(routing::route(tau, tau).unwrap().branch, Branch::Severe);
        assert_eq!(
            routing::route(tau + 1e-9, tau).unwrap().branch,
            Branch::Mild
        );
        assert_eq!(routing::route(tau - 1e-9, tau).unwrap().branch, Branch::Severe);
    }
    assert!(routing::route(f64::NAN, 1.0).is_err());
    pass("Eq.1/Alg.1 exactness: 50 randomized midpoints, strict boundary routing, label agreement");
}

/// LV oracle: the 5x5 impulse fixture equals 20/9 within 1e-9, and LV
/// strictly decreases under growing Gaussian blur on 10 rendered fixtures.
#[test]
fn criterion_lv_oracle() {
    let mut img = ImageBuffer::zeros(5, 5, 1).unwrap();
    img.set(2, 2, 0, 1.0);
    let lv = routing::laplacian_variance(&img).unwrap();
    assert!(
        (lv - 20.0 / 9.0).abs() < 1e-9,
        "impulse LV {} != 20/9",
        lv
    );

    let gaussian = |sigma: f64| {
        let k = 9usize;
        let r = (k / 2) as f64;
        let mut w = vec![0.0f64; k * k];
        for y in 0..k {
            for x in 0..k {
                let (dy, dx) = (y as f64 - r, x as f64 - r);
                w[y * k + x] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            }
        }
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v /= s;
        }
        synth::BlurKernel::new(k, w).unwrap()
    };
    for i in 0..10 {
        let payload = format!("LV-ACCEPT-{:02}", i);
        let sharp = synth::render_qr(&payload, 2, EcLevel::M, 3, 4).unwrap();
        let mut prev = routing::laplacian_variance(&sharp).unwrap();
        for sigma in [0.5, 1.0, 2.0] {
            let blurred = synth::apply_blur(&sharp, &gaussian(sigma), 0.0, 0).unwrap();
            let lv = routing::laplacian_variance(&blurred).unwrap();
            assert!(
                lv < prev,
                "LV not strictly decreasing on fixture {} at sigma {}",
                i,
                sigma
            );
            prev = lv;
        }
    }
    pass("LV oracle: impulse fixture = 20/9 within 1e-9; strict decrease over sigma on 10 fixtures");
}

/// PSNR/SSIM match independent direct recomputation on 100 random pairs
/// (1e-9 dB / 1e-6); identical images hit the cap / exactly 1.
#[test]
fn criterion_metric_oracles() {
    let mut rng = rng_from_seed(909);
    let random_image = |rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, c: usize| {
        let data: Vec<f32> = (0..h * w * c).map(|_| rng.random_range(0.0f32..1.0)).collect();
        ImageBuffer::new(h, w, c, data).unwrap()
    };
    for i in 0..100 {
        let (h, w) = (rng.random_range(11..20), rng.random_range(11..20));
        let c = if i % 2 == 0 { 1 } else { 3 };
        let a = random_image(&mut rng, h, w, c);
        let b = random_image(&mut rng, h, w, c);

        let got_psnr = psnr(&a, &b).unwrap();
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            / a.data().len() as f64;
        let expect_psnr = 10.0 * (1.0 / mse).log10();
        assert!(
            (got_psnr - expect_psnr).abs() < 1e-9,
            "psnr mismatch {} vs {}",
            got_psnr,
            expect_psnr
        );

        let got_ssim = ssim(&a, &b).unwrap();
        let expect_ssim = ssim_direct(&a, &b);
        assert!(
            (got_ssim - expect_ssim).abs() < 1e-6,
            "ssim mismatch {} vs {}",
            got_ssim,
            expect_ssim
        );

        // symmetry
        assert_eq!(got_psnr, psnr(&b, &a).unwrap());
        assert!((got_ssim - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
    let a = random_image(&mut rng, 16, 16, 3);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    pass("metric oracles: PSNR within 1e-9 dB, SSIM within 1e-6 of direct recomputation on 100 pairs");
}

/// Direct per-window SSIM recomputation (non-separable), independent of the
/// implementation path.
fn ssim_direct(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    const WIN: usize = 11;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let mut window = [0.0f64; WIN];
    let r = (WIN / 2) as f64;
    for (i, v) in window.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = window.iter().sum();
    for v in &mut window {
        *v /= s;
    }
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let mut channel_total = 0.0f64;
    for ch in 0..c {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for y0 in 0..=h - WIN {
            for x0 in 0..=w - WIN {
                let (mut ma, mut mb) = (0.0f64, 0.0f64);
                let (mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0);
                for dy in 0..WIN {
                    for dx in 0..WIN {
                        let wt = window[dy] * window[dx];
                        let va = a.get(y0 + dy, x0 + dx, ch) as f64;
                        let vb = b.get(y0 + dy, x0 + dx, ch) as f64;
                        ma += wt * va;
                        mb += wt * vb;
                        eaa += wt * va * va;
                        ebb += wt * vb * vb;
                        eab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (eaa - ma * ma, ebb - mb * mb, eab - ma * mb);
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                    / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
        channel_total += total / count as f64;
    }
    channel_total / c as f64
}

/// Oracle strong model: returns the sharp ground truth for each known
/// blurred input (keyed by pixel bits), after an artificial delay.
struct DelayedOracle {
    map: std::collections::HashMap<Vec<u32>, ImageBuffer>,
    delay: Duration,
}

impl DelayedOracle {
    fn build(manifest: &synth::DatasetManifest, dir: &Path, delay: Duration) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for i in 0..manifest.samples.len() {
            let (sharp, blurred) = manifest.load_pair(dir, i)?;
            map.insert(Self::key(&blurred), sharp.expand3());
        }
        Ok(DelayedOracle { map, delay })
    }

    fn key(img: &ImageBuffer) -> Vec<u32> {
        img.data().iter().map(|v| v.to_bits()).collect()
    }
}

impl Restorer for DelayedOracle {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        std::thread::sleep(self.delay);
        self.map
            .get(&Self::key(image))
            .cloned()
            .ok_or_else(|| Error::Contract("oracle queried with unknown image".into()))
    }

    fn name(&self) -> String {
        format!("oracle+{}ms", self.delay.as_millis())
    }
}

/// Random router over the two networks, without decode-failure fallback.
struct RandomRouting<'a> {
    lenet: &'a dyn Restorer,
    strong: &'a dyn Restorer,
    draws: std::cell::RefCell<rand_chacha::ChaCha8Rng>,
}

impl<'a> Restorer for RandomRouting<'a> {
    fn restore(&self, image: &ImageBuffer) -> Result<ImageBuffer> {
        if self.draws.borrow_mut().random_range(0.0..1.0) < 0.5 {
            self.lenet.restore(image)
        } else {
            self.strong.restore(image)
        }
    }

    fn name(&self) -> String {
        "adnet-random".into()
    }
}

/// Desk-scale end-to-end plus the adaptive-routing ordering property.
///
/// Trains the desk LENet for 2,000 iterations on 200 synthetic pairs
/// (budget: 30 minutes of CPU), then requires
///   (a) final training L1 <= 50% of the initial window,
///   (b) mean restored test PSNR >= blurred + 1 dB,
///   (c) restored test DR > blurred test DR,
/// and with an oracle strong model delayed by 100 ms:
///   ADNet DR = strong-only DR, ADNet mean wall time < strong-only,
///   random routing DR <= ADNet DR.
#[test]
fn criterion_desk_scale_end_to_end_and_adnet_ordering() {
    let _guard = timing_lock();
    let dir = tempfile::tempdir().unwrap();
    let params = GenParams {
        seed: 11,
        severity: (0.08, 0.45),
        noise_sigma: (0.0, 0.01),
        ..GenParams::default()
    };
    let (train_manifest, test_manifest) = build_dataset(dir.path(), 200, 40, &params).unwrap();
    let train_dir = dir.path().join("train");
    let test_dir = dir.path().join("test");

    let config = TrainConfig::desk(ModelConfig::lenet_desk(), 2000, 11);
    let started = Instant::now();
    let outcome = trainer::train(
        &config,
        &train_manifest,
        &train_dir,
        None,
        &dir.path().join("run"),
    )
    .unwrap();
    let train_time = started.elapsed();
    assert!(
        train_time < Duration::from_secs(30 * 60),
        "training took {:?} (budget 30 min)",
        train_time
    );

    // (a) loss halves
    assert!(
        outcome.final_loss <= 0.5 * outcome.initial_loss,
        "final L1 {:.5} > 50% of initial {:.5}",
        outcome.final_loss,
        outcome.initial_loss
    );

    let lenet = adnet_core::checkpoint::load_model(&outcome.final_checkpoint).unwrap();
    let codec = backend();

    // (b) +1 dB over the blurred inputs, (c) decode rate strictly improves
    let mut blurred_psnr = 0.0f64;
    let mut restored_psnr = 0.0f64;
    let mut blurred_dr = 0usize;
    let mut restored_dr = 0usize;
    let n = test_manifest.samples.len();
    for i in 0..n {
        let (sharp, blurred) = test_manifest.load_pair(&test_dir, i).unwrap();
        let sharp = sharp.expand3();
        let restored = lenet.restore(&blurred).unwrap();
        blurred_psnr += psnr(&blurred.expand3(), &sharp).unwrap();
        restored_psnr += psnr(&restored, &sharp).unwrap();
        if codec.decode(&blurred).decoded() {
            blurred_dr += 1;
        }
        if codec.decode(&restored).decoded() {
            restored_dr += 1;
        }
    }
    blurred_psnr /= n as f64;
    restored_psnr /= n as f64;
    assert!(
        restored_psnr >= blurred_psnr + 1.0,
        "restored PSNR {:.3} < blurred {:.3} + 1 dB",
        restored_psnr,
        blurred_psnr
    );
    assert!(
        restored_dr > blurred_dr,
        "restored DR {}/{} does not beat blurred {}/{}",
        restored_dr,
        n,
        blurred_dr,
        n
    );
    pass(&format!(
        "desk end-to-end: L1 {:.4}->{:.4}, PSNR {:.2}->{:.2} dB, DR {}->{} of {} in {:?}",
        outcome.initial_loss,
        outcome.final_loss,
        blurred_psnr,
        restored_psnr,
        blurred_dr,
        restored_dr,
        n,
        train_time
    ));

    // --- ordering property with the oracle strong model ---
    let records =
        routing::collect_calibration_records(&test_manifest, &test_dir, &lenet, &codec).unwrap();
    let calibration = routing::calibrate_threshold(&records).unwrap();
    let oracle = DelayedOracle::build(&test_manifest, &test_dir, Duration::from_millis(100)).unwrap();

    let adnet = routing::AdnetPipeline {
        lenet: &lenet,
        eg_restormer: &oracle,
        tau: calibration.tau,
        codec: &codec,
    };
    let adnet_report = metrics::evaluate(&adnet, &test_manifest, &test_dir, &codec).unwrap();
    let strong_report = metrics::evaluate(&oracle, &test_manifest, &test_dir, &codec).unwrap();
    let random = RandomRouting {
        lenet: &lenet,
        strong: &oracle,
        draws: std::cell::RefCell::new(rng_from_seed(77)),
    };
    let random_report = metrics::evaluate(&random, &test_manifest, &test_dir, &codec).unwrap();

    assert_eq!(
        adnet_report.aggregates.decoding_rate_pct, strong_report.aggregates.decoding_rate_pct,
        "adaptive routing lost decode rate vs strong-only"
    );
    assert!(
        adnet_report.aggregates.avg_time_secs < strong_report.aggregates.avg_time_secs,
        "adaptive routing not faster: {:.4}s vs {:.4}s",
        adnet_report.aggregates.avg_time_secs,
        strong_report.aggregates.avg_time_secs
    );
    assert!(
        random_report.aggregates.decoding_rate_pct <= adnet_report.aggregates.decoding_rate_pct,
        "random routing beat adaptive routing: {:.2} vs {:.2}",
        random_report.aggregates.decoding_rate_pct,
        adnet_report.aggregates.decoding_rate_pct
    );
    pass(&format!(
        "adnet ordering: DR adaptive {:.1}% = strong {:.1}% >= random {:.1}%; time {:.3}s < {:.3}s",
        adnet_report.aggregates.decoding_rate_pct,
        strong_report.aggregates.decoding_rate_pct,
        random_report.aggregates.decoding_rate_pct,
        adnet_report.aggregates.avg_time_secs,
        strong_report.aggregates.avg_time_secs
    ));
}

/// Checkpoint and manifest round-trips are bit-exact; corrupted files are
/// rejected with typed errors.
#[test]
fn criterion_persistence_roundtrips() {
    use adnet_core::checkpoint::Checkpoint;
    let dir = tempfile::tempdir().unwrap();

    let mut cfg = ModelConfig::lenet_desk();
    cfg.base_channels = 4;
    let model = Model::<f32>::init(cfg, 31).unwrap();
    let path = dir.path().join("model.ckpt");
    adnet_core::checkpoint::save_model(&model, 5, None, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let reloaded = adnet_core::checkpoint::load_model(&path).unwrap();
    assert_eq!(
        model.probe_signature().unwrap(),
        reloaded.probe_signature().unwrap(),
        "forward output changed across checkpoint roundtrip"
    );
    let rewritten = Checkpoint::from_model(&reloaded, 5, None).to_bytes();
    assert_eq!(bytes, rewritten, "checkpoint bytes not reproduced");

    // corruption: truncation, magic, version, trailing garbage
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() / 3]),
        Err(Error::Format { .. })
    ));
    let mut bad = bytes.clone();
    bad[3] ^= 0xff;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format { .. })
    ));
    let mut bad = bytes.clone();
    bad[8] = 77;
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Incompatible { .. })
    ));
    let mut bad = bytes.clone();
    bad.extend_from_slice(b"junk");
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format { .. })
    ));

    // manifest: bit-exact write/read, and typed rejection
    let params = GenParams {
        seed: 3,
        severity: (0.0, 0.2),
        ..GenParams::default()
    };
    let (train, _) = build_dataset(dir.path(), 3, 1, &params).unwrap();
    let text = std::fs::read_to_string(dir.path().join("train/manifest")).unwrap();
    let parsed = synth::DatasetManifest::parse_str(&text).unwrap();
    assert_eq!(parsed, train);
    assert_eq!(parsed.to_toml_string(), text, "manifest text not reproduced");
    let mut wrong_count = parsed.clone();
    wrong_count.count += 1;
    assert!(matches!(
        synth::DatasetManifest::parse_str(&wrong_count.to_toml_string()),
        Err(Error::Manifest(_))
    ));
    assert!(matches!(
        synth::DatasetManifest::parse_str("schema_version = 1"),
        Err(Error::Manifest(_))
    ));
    pass("persistence: checkpoint and manifest roundtrips bit-exact, corruption rejected with typed errors");
}
