use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn check(scores: &[f32], what: &str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::invalid(format!("{what} scores are empty")));
    }
    if scores.iter().all(|s| s.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!("non-finite {what} score")))
    }
}

fn mean_softplus(scores: &[f32], sign: f64) -> f64 {
    scores.iter().map(|&s| softplus(sign * s as f64)).sum::<f64>() / scores.len() as f64
}

/// Non-saturating generator loss: `mean softplus(−D(fake))`.
pub fn g_loss(fake_scores: &[f32]) -> Result<f32> {
    check(fake_scores, "fake")?;
    Ok(mean_softplus(fake_scores, -1.0) as f32)
}

/// Logistic discriminator loss: `mean softplus(−D(real)) + mean softplus(D(fake))`.
pub fn d_loss(real_scores: &[f32], fake_scores: &[f32]) -> Result<f32> {
    check(real_scores, "real")?;
    check(fake_scores, "fake")?;
    Ok((mean_softplus(real_scores, -1.0) + mean_softplus(fake_scores, 1.0)) as f32)
}

/// `mean softplus(sign·logits)` recorded on the tape.
pub(crate) fn softplus_mean_on_tape(t: &mut Tape, logits: Var, sign: f32) -> Var {
    let x = if sign == 1.0 { logits } else { t.scale(logits, sign) };
    let sp = t.softplus(x);
    t.mean(sp)
}
