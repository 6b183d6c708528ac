use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Added to numerator and denominator so two empty masks score a perfect 0.
pub const DICE_SMOOTHING: f64 = 1.0;

/// `1 − (2Σpg + s) / (Σp² + Σg² + s)` on flat slices.
pub fn dice_loss(p: &[f64], g: &[f64], smoothing: f64) -> Result<f64> {
    if p.len() != g.len() {
        return Err(Error::dim(
            "dice_loss",
            "length",
            format!("prediction has {} values, target {}", p.len(), g.len()),
        ));
    }
    let (mut pg, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        pg += a * b;
        pp += a * a;
        gg += b * b;
    }
    Ok(1.0 - (2.0 * pg + smoothing) / (pp + gg + smoothing))
}

/// Mean over the batch of per-sample smoothed Dice losses. `probs` and
/// `target` are `[B, ...]`; the target is normally a constant.
pub fn dice_loss_tape(tape: &mut Tape, probs: Var, target: Var) -> Result<Var> {
    let overlap = tape.mul(probs, target)?;
    let overlap = tape.sum_per_sample(overlap)?;
    let numerator = tape.affine(overlap, 2.0, DICE_SMOOTHING);
    let pp = tape.mul(probs, probs)?;
    let pp = tape.sum_per_sample(pp)?;
    let gg = tape.mul(target, target)?;
    let gg = tape.sum_per_sample(gg)?;
    let denominator = tape.add(pp, gg)?;
    let denominator = tape.affine(denominator, 1.0, DICE_SMOOTHING);
    let ratio = tape.div(numerator, denominator)?;
    let per_sample = tape.affine(ratio, -1.0, 1.0);
    Ok(tape.mean(per_sample))
}
