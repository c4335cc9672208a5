use serde::{Deserialize, Serialize};

use crate::enhance::EnhanceWeights;
use crate::error::{contract, Result};
use crate::tensor::{Tape, Var};

pub fn check_ctc_weight(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return contract(format!("CTC weight must lie in [0, 1], got {lambda}"));
    }
    Ok(())
}

/// `λ·(ctc_a + ctc_v) + (1−λ)·att`; a missing video term counts as zero.
pub fn hybrid_loss(
    tape: &mut Tape,
    ctc_a: Var,
    ctc_v: Option<Var>,
    att: Var,
    lambda: f64,
) -> Result<Var> {
    check_ctc_weight(lambda)?;
    let ctc = match ctc_v {
        Some(v) => tape.add(ctc_a, v)?,
        None => ctc_a,
    };
    let a = tape.scale(ctc, lambda)?;
    let b = tape.scale(att, 1.0 - lambda)?;
    tape.add(a, b)
}

/// Scalar value of [`hybrid_loss`], evaluated in the same order.
pub fn hybrid_value(ctc_a: f64, ctc_v: f64, att: f64, lambda: f64) -> f64 {
    lambda * (ctc_a + ctc_v) + (1.0 - lambda) * att
}

/// Every loss term of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ctc_a: f64,
    pub l_ctc_v: f64,
    pub l_att: f64,
    pub l_avsr: f64,
    pub l_recon: f64,
    pub l_percep: f64,
    pub l_enhance: f64,
    pub l_total: f64,
}

impl LossReport {
    /// Composes the totals from the individual terms.
    pub fn compose(
        l_ctc_a: f64,
        l_ctc_v: f64,
        l_att: f64,
        l_recon: f64,
        l_percep: f64,
        lambda: f64,
        weights: EnhanceWeights,
    ) -> Self {
        let l_avsr = hybrid_value(l_ctc_a, l_ctc_v, l_att, lambda);
        let l_enhance = weights.combine(l_recon, l_percep);
        Self {
            l_ctc_a,
            l_ctc_v,
            l_att,
            l_avsr,
            l_recon,
            l_percep,
            l_enhance,
            l_total: l_avsr + l_enhance,
        }
    }

    /// Whether the total and hybrid identities hold exactly.
    pub fn identities_hold(&self, lambda: f64, weights: EnhanceWeights) -> bool {
        let again = Self::compose(
            self.l_ctc_a,
            self.l_ctc_v,
            self.l_att,
            self.l_recon,
            self.l_percep,
            lambda,
            weights,
        );
        again.l_avsr.to_bits() == self.l_avsr.to_bits()
            && again.l_enhance.to_bits() == self.l_enhance.to_bits()
            && again.l_total.to_bits() == self.l_total.to_bits()
    }
}
