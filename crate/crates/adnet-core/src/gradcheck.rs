//! Central finite-difference verification of the autodiff engine.
//!
//! Every differentiable op and block is checked at 64-bit precision: the
//! analytic gradient from `backward()` is compared against
//! (f(x+h) - f(x-h)) / 2h entry by entry. Small tensors are perturbed
//! exhaustively; large parameter sets are sampled (seeded, reproducible).

use rand::Rng;

use crate::error::Result;
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Relative-error denominator floor for small graphs.
pub const FD_FLOOR: f64 = 1e-6;
/// Denominator floor for whole-model graphs. The difference quotient of a
/// loss of magnitude ~1 resolves gradients only down to about
/// eps_f / (2h) ~ 1e-9; entries below this floor are effectively compared
/// with an absolute tolerance of FLOOR * FD_TOLERANCE = 1e-8, far below any
/// real gradient defect.
pub const FD_FLOOR_DEEP: f64 = 1e-4;

/// Outcome of one gradcheck case.
#[derive(Debug, Clone)]
pub struct GradCheckCase {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= FD_TOLERANCE
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Compare analytic gradients of `build()` (a scalar-valued graph over the
/// given leaves) against central finite differences.
///
/// `samples_per_leaf = None` perturbs every entry; `Some(k)` draws `k`
/// distinct entries per leaf from the given seed.
pub fn check_gradients(
    leaves: &[Tensor<f64>],
    build: &dyn Fn() -> Result<Tensor<f64>>,
    samples_per_leaf: Option<usize>,
    seed: u64,
) -> Result<(f64, usize)> {
    check_gradients_with_step(leaves, build, samples_per_leaf, seed, FD_STEP, FD_FLOOR)
}

/// [`check_gradients`] with an explicit step and denominator floor.
pub fn check_gradients_with_step(
    leaves: &[Tensor<f64>],
    build: &dyn Fn() -> Result<Tensor<f64>>,
    samples_per_leaf: Option<usize>,
    seed: u64,
    h: f64,
    floor: f64,
) -> Result<(f64, usize)> {
    for l in leaves {
        l.zero_grad();
    }
    let loss = build()?;
    loss.backward()?;
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    for l in leaves {
        l.zero_grad();
    }

    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck-samples"));
    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for (li, leaf) in leaves.iter().enumerate() {
        let n = leaf.numel();
        let indices: Vec<usize> = match samples_per_leaf {
            Some(k) if k < n => {
                let mut set = std::collections::BTreeSet::new();
                while set.len() < k {
                    set.insert(rng.random_range(0..n));
                }
                set.into_iter().collect()
            }
            _ => (0..n).collect(),
        };
        for idx in indices {
            let original = leaf.data()[idx];
            let eval_fd = |step: f64| -> Result<f64> {
                leaf.update_data(|d| d[idx] = original + step);
                let plus = build()?.item()?;
                leaf.update_data(|d| d[idx] = original - step);
                let minus = build()?.item()?;
                leaf.update_data(|d| d[idx] = original);
                Ok((plus - minus) / (2.0 * step))
            };
            let mut err = rel_err(grads[li][idx], eval_fd(h)?, floor);
            if err > FD_TOLERANCE {
                // disambiguate truncation from a wrong gradient: a correct
                // gradient converges as the step shrinks, a wrong one cannot
                let retry = rel_err(grads[li][idx], eval_fd(h * 0.1)?, floor);
                err = err.min(retry);
            }
            if err > max_err {
                max_err = err;
            }
            checked += 1;
        }
    }
    Ok((max_err, checked))
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::param(data, shape).unwrap()
}

fn random_const(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::constant(data, shape).unwrap()
}

/// Weighted-sum readout: dotting with a fixed random vector makes sign errors
/// visible that a plain sum would cancel.
fn readout(out: &Tensor<f64>, probe: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(out.mul(probe)?.sum_all())
}

fn case(
    name: &str,
    leaves: &[Tensor<f64>],
    build: &dyn Fn() -> Result<Tensor<f64>>,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckCase> {
    case_with_step(name, leaves, build, samples, seed, FD_STEP, FD_FLOOR)
}

fn case_with_step(
    name: &str,
    leaves: &[Tensor<f64>],
    build: &dyn Fn() -> Result<Tensor<f64>>,
    samples: Option<usize>,
    seed: u64,
    h: f64,
    floor: f64,
) -> Result<GradCheckCase> {
    let (max_rel_err, entries_checked) =
        check_gradients_with_step(leaves, build, samples, seed, h, floor)?;
    Ok(GradCheckCase {
        name: name.to_string(),
        max_rel_err,
        entries_checked,
    })
}

/// Finite-difference suite over the tensor ops. Blocks and whole models are
/// covered by [`run_block_suite`] and [`run_model_suite`].
pub fn run_op_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck-ops"));
    let mut cases = Vec::new();

    {
        let x = random_tensor(&[2, 3], 1.0, &mut rng);
        let y = random_tensor(&[2, 3], 1.0, &mut rng);
        let probe = random_const(&[2, 3], 1.0, &mut rng);
        let (xa, ya, pa) = (x.clone(), y.clone(), probe.clone());
        cases.push(case(
            "elementwise add/sub/mul",
            &[x, y],
            &move || {
                let t = xa.mul(&ya)?.add(&xa)?.sub(&ya)?;
                readout(&t, &pa)
            },
            None,
            seed,
        )?);
    }
    {
        // keep |x| away from 0 so the abs subgradient is unambiguous
        let data: Vec<f64> = (0..6)
            .map(|i| {
                let v = ((i * 131 % 17) as f64) * 0.1 + 0.2;
                if i % 2 == 0 {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::param(data, &[6]).unwrap();
        let probe = random_const(&[6], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case("abs", &[x], &move || readout(&xa.abs(), &pa), None, seed)?);
    }
    {
        let x = random_tensor(&[2, 4], 2.0, &mut rng);
        let probe = random_const(&[2, 4], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "sigmoid",
            &[x],
            &move || readout(&xa.sigmoid(), &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 3, 5, 5], 1.0, &mut rng);
        let w = random_tensor(&[4, 3, 3, 3], 0.5, &mut rng);
        let b = random_tensor(&[4], 0.5, &mut rng);
        let probe = random_const(&[1, 4, 5, 5], 1.0, &mut rng);
        let (xa, wa, ba, pa) = (x.clone(), w.clone(), b.clone(), probe.clone());
        cases.push(case(
            "conv2d 3x3 pad1",
            &[x, w, b],
            &move || readout(&xa.conv2d(&wa, Some(&ba), 1, 1, 1)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 4, 4, 4], 1.0, &mut rng);
        let w = random_tensor(&[6, 4, 1, 1], 0.5, &mut rng);
        let probe = random_const(&[2, 6, 4, 4], 1.0, &mut rng);
        let (xa, wa, pa) = (x.clone(), w.clone(), probe.clone());
        cases.push(case(
            "conv2d 1x1 pointwise",
            &[x, w],
            &move || readout(&xa.conv2d(&wa, None, 1, 0, 1)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 4, 5, 5], 1.0, &mut rng);
        let w = random_tensor(&[4, 1, 3, 3], 0.5, &mut rng);
        let b = random_tensor(&[4], 0.5, &mut rng);
        let probe = random_const(&[1, 4, 5, 5], 1.0, &mut rng);
        let (xa, wa, ba, pa) = (x.clone(), w.clone(), b.clone(), probe.clone());
        cases.push(case(
            "conv2d depthwise groups=C",
            &[x, w, b],
            &move || readout(&xa.conv2d(&wa, Some(&ba), 1, 1, 4)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 2, 6, 6], 1.0, &mut rng);
        let w = random_tensor(&[3, 2, 3, 3], 0.5, &mut rng);
        let probe = random_const(&[1, 3, 3, 3], 1.0, &mut rng);
        let (xa, wa, pa) = (x.clone(), w.clone(), probe.clone());
        cases.push(case(
            "conv2d stride2 pad1",
            &[x, w],
            &move || readout(&xa.conv2d(&wa, None, 2, 1, 1)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 4, 3, 3], 1.0, &mut rng);
        let gamma = random_tensor(&[4], 1.0, &mut rng);
        let beta = random_tensor(&[4], 1.0, &mut rng);
        let probe = random_const(&[2, 4, 3, 3], 1.0, &mut rng);
        let (xa, ga, ba, pa) = (x.clone(), gamma.clone(), beta.clone(), probe.clone());
        cases.push(case(
            "layer_norm",
            &[x, gamma, beta],
            &move || readout(&xa.layer_norm(&ga, &ba, 1e-6)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 3, 4], 2.0, &mut rng);
        let probe = random_const(&[2, 3, 4], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "softmax_lastdim",
            &[x],
            &move || readout(&xa.softmax_lastdim()?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 4, 3, 3], 1.0, &mut rng);
        let probe = random_const(&[1, 2, 3, 3], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "simple_gate",
            &[x],
            &move || readout(&xa.simple_gate()?, &pa),
            None,
            seed,
        )?);
    }
    {
        let a = random_tensor(&[2, 3, 4], 1.0, &mut rng);
        let b = random_tensor(&[2, 4, 2], 1.0, &mut rng);
        let probe = random_const(&[2, 3, 2], 1.0, &mut rng);
        let (aa, ba, pa) = (a.clone(), b.clone(), probe.clone());
        cases.push(case(
            "bmm",
            &[a, b],
            &move || readout(&aa.bmm(&ba)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let a = random_tensor(&[2, 3, 4], 1.0, &mut rng);
        let b = random_tensor(&[2, 5, 4], 1.0, &mut rng);
        let probe = random_const(&[2, 3, 5], 1.0, &mut rng);
        let (aa, ba, pa) = (a.clone(), b.clone(), probe.clone());
        cases.push(case(
            "bmm_transb",
            &[a, b],
            &move || readout(&aa.bmm_transb(&ba)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 2, 4, 4], 1.0, &mut rng);
        let probe = random_const(&[1, 8, 2, 2], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "space_to_depth",
            &[x],
            &move || readout(&xa.space_to_depth()?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 8, 2, 2], 1.0, &mut rng);
        let probe = random_const(&[1, 2, 4, 4], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "depth_to_space",
            &[x],
            &move || readout(&xa.depth_to_space()?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 2, 4, 4], 1.0, &mut rng);
        let probe = random_const(&[1, 2, 6, 6], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "reflect_pad2d",
            &[x],
            &move || readout(&xa.reflect_pad2d(1)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let a = random_tensor(&[1, 2, 3, 3], 1.0, &mut rng);
        let b = random_tensor(&[1, 3, 3, 3], 1.0, &mut rng);
        let probe = random_const(&[1, 5, 3, 3], 1.0, &mut rng);
        let (aa, ba, pa) = (a.clone(), b.clone(), probe.clone());
        cases.push(case(
            "concat_channels",
            &[a, b],
            &move || readout(&Tensor::concat_channels(&[&aa, &ba])?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 3, 2, 2], 1.0, &mut rng);
        let probe = random_const(&[2, 1, 2, 2], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "channel_mean",
            &[x],
            &move || readout(&xa.channel_mean()?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 2, 3, 3], 1.0, &mut rng);
        let m = random_tensor(&[2, 1, 3, 3], 1.0, &mut rng);
        let probe = random_const(&[2, 2, 3, 3], 1.0, &mut rng);
        let (xa, ma, pa) = (x.clone(), m.clone(), probe.clone());
        cases.push(case(
            "mul_channel_broadcast",
            &[x, m],
            &move || readout(&xa.mul_channel_broadcast(&ma)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 3], 1.0, &mut rng);
        let s = Tensor::param(vec![1.3], &[1]).unwrap();
        let probe = random_const(&[2, 3], 1.0, &mut rng);
        let (xa, sa, pa) = (x.clone(), s.clone(), probe.clone());
        cases.push(case(
            "mul/div scalar tensor",
            &[x, s],
            &move || {
                let t = xa.mul_scalar_tensor(&sa)?.div_scalar_tensor(&sa.add_const(0.5))?;
                readout(&t, &pa)
            },
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[1, 2, 3, 4], 1.0, &mut rng);
        let alpha = Tensor::param(vec![0.8, 1.4], &[2]).unwrap();
        let probe = random_const(&[1, 2, 3, 4], 1.0, &mut rng);
        let (xa, aa, pa) = (x.clone(), alpha.clone(), probe.clone());
        cases.push(case(
            "div_per_head",
            &[x, alpha],
            &move || readout(&xa.div_per_head(&aa)?, &pa),
            None,
            seed,
        )?);
    }
    {
        // composite: conv -> layer_norm -> softmax, mirrors the attention path
        let x = random_tensor(&[1, 3, 4, 4], 1.0, &mut rng);
        let w = random_tensor(&[4, 3, 3, 3], 0.4, &mut rng);
        let gamma = random_tensor(&[4], 1.0, &mut rng);
        let beta = random_tensor(&[4], 0.5, &mut rng);
        let probe = random_const(&[1, 4, 16], 1.0, &mut rng);
        let (xa, wa, ga, ba, pa) = (x.clone(), w.clone(), gamma.clone(), beta.clone(), probe.clone());
        cases.push(case(
            "conv2d+layer_norm+softmax composite",
            &[x, w, gamma, beta],
            &move || {
                let t = xa.conv2d(&wa, None, 1, 1, 1)?;
                let t = t.layer_norm(&ga, &ba, 1e-6)?;
                let t = t.reshape(&[1, 4, 16])?.softmax_lastdim()?;
                readout(&t, &pa)
            },
            None,
            seed,
        )?);
    }
    {
        let x = random_tensor(&[2, 2, 2, 2], 1.0, &mut rng);
        let probe = random_const(&[2, 2, 2, 2], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "maximum+max_all (away from ties)",
            &[x],
            &move || {
                let shifted = xa.add_const(0.1);
                let m = xa.maximum(&shifted)?; // never tied
                readout(&m, &pa)?.add(&xa.max_all())
            },
            None,
            seed,
        )?);
    }

    Ok(cases)
}

/// Finite-difference suite over the network blocks, edge modulation active
/// (nonzero edge weight and residual scales) so every parameter influences
/// the loss.
pub fn run_block_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    use crate::blocks::{ega_forward, Egab, Esab, Sgdb};
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck-blocks"));
    let mut cases = Vec::new();

    {
        let x = random_tensor(&[1, 1, 5, 5], 1.0, &mut rng);
        let probe = random_const(&[1, 1, 5, 5], 1.0, &mut rng);
        let (xa, pa) = (x.clone(), probe.clone());
        cases.push(case(
            "ega (edge map)",
            &[x],
            &move || readout(&ega_forward(&xa)?, &pa),
            None,
            seed,
        )?);
    }
    {
        let block = Egab::<f64>::init(&mut rng, 4, 2, 1)?;
        block.edge_weight.set_data(vec![0.35])?;
        let x = random_tensor(&[1, 4, 4, 4], 0.8, &mut rng);
        let probe = random_const(&[1, 4, 4, 4], 1.0, &mut rng);
        let mut leaves = vec![x.clone()];
        let mut named = Vec::new();
        block.params_into("egab", &mut named);
        leaves.extend(named.into_iter().map(|(_, t)| t));
        let (xa, pa) = (x, probe);
        cases.push(case(
            "egab block (w_E != 0)",
            &leaves,
            &move || readout(&block.forward(&xa)?, &pa),
            Some(4),
            seed,
        )?);
    }
    {
        let block = Sgdb::<f64>::init(&mut rng, 4, 2)?;
        let scales: Vec<f64> = (0..4).map(|i| 0.3 + 0.2 * i as f64).collect();
        block.residual_scale.set_data(scales)?;
        let x = random_tensor(&[1, 4, 4, 4], 0.8, &mut rng);
        let probe = random_const(&[1, 4, 4, 4], 1.0, &mut rng);
        let mut leaves = vec![x.clone()];
        let mut named = Vec::new();
        block.params_into("sgdb", &mut named);
        leaves.extend(named.into_iter().map(|(_, t)| t));
        let (xa, pa) = (x, probe);
        cases.push(case(
            "sgdb block",
            &leaves,
            &move || readout(&block.forward(&xa)?, &pa),
            Some(4),
            seed,
        )?);
    }
    {
        let block = Esab::<f64>::init(&mut rng, 4);
        let x = random_tensor(&[1, 4, 4, 4], 0.8, &mut rng);
        let probe = random_const(&[1, 4, 4, 4], 1.0, &mut rng);
        let mut leaves = vec![x.clone()];
        let mut named = Vec::new();
        block.params_into("esab", &mut named);
        leaves.extend(named.into_iter().map(|(_, t)| t));
        let (xa, pa) = (x, probe);
        cases.push(case(
            "esab block",
            &leaves,
            &move || readout(&block.forward(&xa)?, &pa),
            Some(4),
            seed,
        )?);
    }

    Ok(cases)
}

/// Finite-difference suite over the full desk-scale networks on 16x16
/// inputs. Parameters are sampled (a handful of entries per tensor, seeded)
/// to keep the runtime low; the input is sampled too.
pub fn run_model_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    use crate::models::{Model, ModelConfig};
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck-models"));
    let mut cases = Vec::new();
    for (name, config) in [
        ("eg-restormer desk 16x16", ModelConfig::eg_restormer_desk()),
        ("lenet desk 16x16", ModelConfig::lenet_desk()),
    ] {
        let model = Model::<f64>::init(config, derive_seed(seed, name))?;
        // activate the edge modulation and residual paths so their
        // gradients are exercised
        for (pname, t) in model.named_params() {
            if pname.ends_with("edge_weight") {
                t.set_data(vec![0.25])?;
            }
            if pname.ends_with("residual_scale") {
                let n = t.numel();
                t.set_data((0..n).map(|i| 0.2 + 0.1 * (i % 3) as f64).collect())?;
            }
        }
        let x = random_tensor(&[1, 3, 16, 16], 0.45, &mut rng);
        // keep pixel values in a realistic band
        x.update_data(|d| {
            for v in d.iter_mut() {
                *v = 0.5 + *v;
            }
        });
        let probe = random_const(&[1, 3, 16, 16], 1.0, &mut rng);
        let mut leaves = vec![x.clone()];
        leaves.extend(model.params());
        let (xa, pa) = (x, probe);
        let build = move || readout(&model.forward_tensor(&xa)?, &pa);
        cases.push(case_with_step(name, &leaves, &build, Some(2), seed, FD_STEP, FD_FLOOR_DEEP)?);
    }
    Ok(cases)
}

/// The whole gradcheck battery: ops, blocks, and desk-scale models.
pub fn run_full_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut cases = run_op_suite(seed)?;
    cases.extend(run_block_suite(seed)?);
    cases.extend(run_model_suite(seed)?);
    Ok(cases)
}
