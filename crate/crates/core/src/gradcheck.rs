//! Central finite-difference checks of every tape op and of a whole tiny
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio::{EXCERPT_FRAMES, NUM_BANDS};
use crate::error::Result;
use crate::model::{FilmBlocks, Mode, Model, ModelConfig, ParamKind};
use crate::tensor::{Normalization, Tape, Tensor, Var};
use crate::train::dice_loss_tape;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const TRIALS_PER_OP: usize = 24;
/// Coordinates drawn per accepted trial before giving up on a check.
const MAX_DRAWS_PER_TRIAL: usize = 20;

/// Denominator floor for [`relative_error`]. Central differences of an
/// O(1) loss at `h = 1e-5` carry roundoff near 1e-10, so gradients that are
/// exactly zero (biases feeding batch norm) would otherwise score as noise
/// divided by a tiny number.
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    /// Coordinates redrawn because the `±h` stencil crossed a max-pool
    /// routing change, where the function has a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error <= self.tolerance
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, offset: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| offset + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Compares tape gradients of `f` against central differences at `trials`
/// randomly chosen input coordinates. The scalar probed is `Σ R ⊙ f(x)` for
/// a fixed random `R`, unless `f` already returns a scalar. Coordinates
/// whose stencil changes max-pool routing are redrawn.
pub fn check_op<F>(name: &str, inputs: &[Tensor], trials: usize, tolerance: f64, rng: &mut ChaCha8Rng, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let probe_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).shape().to_vec()
    };
    let projection = (probe_shape.iter().product::<usize>() > 1).then(|| random_tensor(rng, &probe_shape, 1.0, 0.0));

    let eval = |xs: &[Tensor], grads: bool| -> Result<(f64, Vec<Tensor>, Vec<Vec<usize>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let loss = match &projection {
            Some(r) => {
                let r = tape.constant(r.clone());
                let y = tape.mul(out, r)?;
                tape.sum(y)
            }
            None => tape.reshape(out, Vec::<usize>::new())?,
        };
        let value = tape.value(loss).item()?;
        let routing = tape.pool_routing();
        if !grads {
            return Ok((value, Vec::new(), routing));
        }
        tape.backward(loss)?;
        let g = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
            .collect();
        Ok((value, g, routing))
    };

    let (_, analytic, routing) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    let mut xs = inputs.to_vec();
    for t in 0..trials * MAX_DRAWS_PER_TRIAL {
        if checked == trials {
            break;
        }
        let which = t % xs.len();
        let idx = rng.random_range(0..xs[which].numel());
        let orig = xs[which].data()[idx];
        xs[which].data_mut()[idx] = orig + STEP;
        let (up, _, up_routing) = eval(&xs, false)?;
        xs[which].data_mut()[idx] = orig - STEP;
        let (down, _, down_routing) = eval(&xs, false)?;
        xs[which].data_mut()[idx] = orig;
        if up_routing != routing || down_routing != routing {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[which].data()[idx], numeric));
        checked += 1;
    }
    Ok(CheckResult {
        name: name.to_string(),
        checked,
        skipped,
        max_rel_error: worst,
        tolerance,
    })
}

/// Checks every differentiable op on small random inputs.
pub fn check_ops(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = TRIALS_PER_OP;
    let tol = TOLERANCE;
    let mut out = Vec::new();

    let x = random_tensor(r, &[2, 3, 6, 5], 1.0, 0.0);
    let w = random_tensor(r, &[4, 3, 3, 3], 0.5, 0.0);
    let b = random_tensor(r, &[4], 0.5, 0.0);
    for (stride, padding) in [(1, 1), (2, 1), (2, 0)] {
        out.push(check_op(
            &format!("conv2d 3x3 stride {stride} padding {padding}"),
            &[x.clone(), w.clone(), b.clone()],
            n,
            tol,
            r,
            |t, v| t.conv2d(v[0], v[1], v[2], stride, padding),
        )?);
    }
    let w1 = random_tensor(r, &[4, 3, 1, 1], 0.5, 0.0);
    out.push(check_op("conv2d 1x1", &[x.clone(), w1, b.clone()], n, tol, r, |t, v| {
        t.conv2d(v[0], v[1], v[2], 1, 0)
    })?);

    let wt = random_tensor(r, &[3, 2, 2, 2], 0.5, 0.0);
    let bt = random_tensor(r, &[2], 0.5, 0.0);
    out.push(check_op("conv_transpose2d", &[x.clone(), wt, bt], n, tol, r, |t, v| {
        t.conv_transpose2d(v[0], v[1], v[2])
    })?);

    let xp = random_tensor(r, &[2, 3, 6, 4], 1.0, 0.0);
    out.push(check_op("max_pool2d", &[xp], n, tol, r, |t, v| t.max_pool2d(v[0]))?);

    let scale = random_tensor(r, &[3], 0.3, 1.0);
    let shift = random_tensor(r, &[3], 0.3, 0.0);
    out.push(check_op(
        "batch_norm (batch statistics)",
        &[x.clone(), scale.clone(), shift.clone()],
        n,
        tol,
        r,
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Normalization::Batch { epsilon: 1e-5 })?.0),
    )?);
    let x2 = random_tensor(r, &[5, 3], 1.0, 0.5);
    out.push(check_op(
        "batch_norm (dense input)",
        &[x2, scale.clone(), shift.clone()],
        n,
        tol,
        r,
        |t, v| Ok(t.batch_norm(v[0], v[1], v[2], Normalization::Batch { epsilon: 1e-5 })?.0),
    )?);
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    out.push(check_op(
        "batch_norm (running statistics)",
        &[x.clone(), scale, shift],
        n,
        tol,
        r,
        |t, v| {
            let norm = Normalization::Running {
                mean: &mean,
                var: &var,
                epsilon: 1e-5,
            };
            Ok(t.batch_norm(v[0], v[1], v[2], norm)?.0)
        },
    )?);

    out.push(check_op("elu", std::slice::from_ref(&x), n, tol, r, |t, v| Ok(t.elu(v[0])))?);
    out.push(check_op("sigmoid", std::slice::from_ref(&x), n, tol, r, |t, v| Ok(t.sigmoid(v[0])))?);

    let xl = random_tensor(r, &[3, 7], 1.0, 0.0);
    let wl = random_tensor(r, &[4, 7], 0.5, 0.0);
    let bl = random_tensor(r, &[4], 0.5, 0.0);
    out.push(check_op("linear", &[xl, wl, bl], n, tol, r, |t, v| t.linear(v[0], v[1], v[2]))?);

    let gamma = random_tensor(r, &[2, 3], 0.5, 1.0);
    let beta = random_tensor(r, &[2, 3], 0.5, 0.0);
    out.push(check_op("film", &[x.clone(), gamma, beta], n, tol, r, |t, v| {
        t.film(v[0], v[1], v[2])
    })?);

    let y = random_tensor(r, &[2, 3, 6, 5], 1.0, 0.0);
    let positive = Tensor::new(
        y.shape().to_vec(),
        y.data().iter().map(|v| 1.0 + v.abs()).collect(),
    )?;
    out.push(check_op("add", &[x.clone(), y.clone()], n, tol, r, |t, v| t.add(v[0], v[1]))?);
    out.push(check_op("mul", &[x.clone(), y], n, tol, r, |t, v| t.mul(v[0], v[1]))?);
    out.push(check_op("div", &[x.clone(), positive], n, tol, r, |t, v| t.div(v[0], v[1]))?);
    out.push(check_op("affine", std::slice::from_ref(&x), n, tol, r, |t, v| Ok(t.affine(v[0], -1.5, 0.25)))?);
    out.push(check_op("sum", std::slice::from_ref(&x), n, tol, r, |t, v| Ok(t.sum(v[0])))?);
    out.push(check_op("mean", std::slice::from_ref(&x), n, tol, r, |t, v| Ok(t.mean(v[0])))?);
    out.push(check_op("sum_per_sample", std::slice::from_ref(&x), n, tol, r, |t, v| t.sum_per_sample(v[0]))?);
    out.push(check_op("pad2d", std::slice::from_ref(&x), n, tol, r, |t, v| t.pad2d(v[0], 2, 3))?);
    out.push(check_op("crop2d", std::slice::from_ref(&x), n, tol, r, |t, v| t.crop2d(v[0], 4, 3))?);
    out.push(check_op("reshape", &[x], n, tol, r, |t, v| t.reshape(v[0], [6, 30]))?);

    let probs = Tensor::new(
        vec![2, 1, 4, 4],
        (0..32).map(|_| r.random_range(0.05..0.95)).collect(),
    )?;
    let mask = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| f64::from(r.random_bool(0.4))).collect())?;
    out.push(check_op("dice_loss", &[probs], n, 1e-6, r, |t, v| {
        let g = t.constant(mask.clone());
        dice_loss_tape(t, v[0], g)
    })?);
    Ok(out)
}

/// Dice loss of a base-2 model with FiLM in every block on a random batch
/// of two 48 × 32 pages, differentiated with respect to `samples_per_param`
/// random entries of every trainable parameter.
pub fn check_model(seed: u64, samples_per_param: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        base_filters: 2,
        film_blocks: FilmBlocks::all(),
        ..ModelConfig::default()
    };
    let mut model = Model::build(config, seed)?;
    // Nonzero biases so their gradients are not trivially symmetric.
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        if model.params().param(id).kind == ParamKind::Bias {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let pages = Tensor::new(
        vec![2, 1, 48, 32],
        (0..2 * 48 * 32).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let excerpts = Tensor::new(
        vec![2, 1, NUM_BANDS, EXCERPT_FRAMES],
        (0..2 * NUM_BANDS * EXCERPT_FRAMES).map(|_| rng.random_range(0.0..2.0)).collect(),
    )?;
    let mask = Tensor::new(
        vec![2, 1, 48, 32],
        (0..2 * 48 * 32).map(|_| f64::from(rng.random_bool(0.3))).collect(),
    )?;

    type Eval = (f64, Vec<(usize, Tensor)>, Vec<Vec<usize>>);
    let loss_of = |model: &Model, grads: bool| -> Result<Eval> {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &pages, &excerpts, Mode::Train)?;
        let target = tape.constant(mask.clone());
        let loss = dice_loss_tape(&mut tape, pass.output, target)?;
        let value = tape.value(loss).item()?;
        let routing = tape.pool_routing();
        if !grads {
            return Ok((value, Vec::new(), routing));
        }
        tape.backward(loss)?;
        let grads = pass.gradients(&tape).into_iter().map(|(id, g)| (id.index(), g)).collect();
        Ok((value, grads, routing))
    };

    let (_, grads, routing) = loss_of(&model, true)?;
    let mut worst: f64 = 0.0;
    let (mut checked, mut skipped) = (0, 0);
    for (index, grad) in grads {
        let id = ids[index];
        let mut accepted = 0;
        for _ in 0..samples_per_param * MAX_DRAWS_PER_TRIAL {
            if accepted == samples_per_param {
                break;
            }
            let k = rng.random_range(0..grad.numel());
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + STEP;
            let (up, _, up_routing) = loss_of(&model, false)?;
            model.params_mut().get_mut(id).data_mut()[k] = orig - STEP;
            let (down, _, down_routing) = loss_of(&model, false)?;
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            if up_routing != routing || down_routing != routing {
                skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(relative_error(grad.data()[k], numeric));
            accepted += 1;
        }
        checked += accepted;
    }
    Ok(CheckResult {
        name: "full model (base 2, 48x32 page)".into(),
        checked,
        skipped,
        max_rel_error: worst,
        tolerance: TOLERANCE,
    })
}

/// The whole suite: every op, then the full model.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = check_ops(seed)?;
    results.push(check_model(seed, 2)?);
    Ok(results)
}
