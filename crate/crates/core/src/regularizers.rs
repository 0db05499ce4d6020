//! Auxiliary objectives on the prompt pools: diversity, balance, contrastive
//! and cross-modal alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    /// Hinge threshold on pairwise value cosine.
    pub tau_div: f64,
    /// Contrastive temperature.
    pub tau_con: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            tau_div: 0.1,
            tau_con: 0.1,
        }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau_div) {
            return Err(Error::invalid("regularizers", format!("tau_div {} outside [-1, 1]", self.tau_div)));
        }
        if !(self.tau_con > 0.0) {
            return Err(Error::invalid("regularizers", format!("tau_con must be positive, got {}", self.tau_con)));
        }
        Ok(())
    }
}

/// Mean hinge `max(0, S_ij − τ)` over off-diagonal pairs of flattened values.
///
/// `values` is `N × T × d` (any shape with `N` leading rows works). Each value
/// is flattened to length `T·d` and compared by cosine. Pools with fewer than
/// two prompts have no pairs; the loss is 0 and a tape warning is recorded.
pub fn diversity_loss<'t>(values: Var<'t>, tau_div: f64) -> Result<Var<'t>> {
    let shape = values.shape();
    let n = *shape.first().ok_or_else(|| Error::invalid("diversity_loss", "scalar input"))?;
    let tape = values.tape();
    if n < 2 {
        log::warn!("diversity_loss: pool with {n} prompt(s) has no pairs");
        return values.sum()?.scale(0.0);
    }
    let width = values.numel() / n;
    let unit = values.reshape(&[n, width])?.row_normalize()?;
    let sims = unit.matmul(unit.t()?)?;
    let mut mask = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = tape.constant(mask)?;
    sims.add_scalar(-tau_div)?
        .max_scalar(0.0)?
        .mul(mask)?
        .sum()?
        .scale(1.0 / (n * (n - 1)) as f64)
}

/// `log N − H(p)` for a probability vector `p`, natural log, `0 log 0 = 0`.
pub fn balance_loss<'t>(full_probs: Var<'t>) -> Result<Var<'t>> {
    let p = full_probs.value();
    let total: f64 = p.data().iter().sum();
    if (total - 1.0).abs() > 1e-9 || p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid(
            "balance_loss",
            format!("expected a probability vector, sum = {total}"),
        ));
    }
    let n = p.numel() as f64;
    // log N − H(p) = log N + Σ p log p
    full_probs.xlogx()?.sum()?.add_scalar(n.ln())
}

/// InfoNCE over cosine similarities: each positive key is contrasted against
/// every negative key, and the result is averaged over positives.
///
/// `similarities` holds the cosine between the query and every key of the pool.
pub fn contrastive_loss<'t>(
    similarities: Var<'t>,
    positives: &[usize],
    negatives: &[usize],
    tau_con: f64,
) -> Result<Var<'t>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::invalid(
            "contrastive_loss",
            "needs at least one positive and one negative key",
        ));
    }
    if !(tau_con > 0.0) {
        return Err(Error::invalid("contrastive_loss", "tau_con must be positive"));
    }
    let logits = similarities.flatten()?.scale(1.0 / tau_con)?;
    let neg = logits.select_rows(negatives)?;
    let tape = similarities.tape();
    let mut terms = Vec::with_capacity(positives.len());
    for &p in positives {
        let pos = logits.select_rows(&[p])?;
        let row = tape.concat(&[pos, neg], 0)?;
        terms.push(row.logsumexp()?.sub(pos.reshape(&[])?)?);
    }
    let joined = if terms.len() == 1 {
        terms[0].reshape(&[1])?
    } else {
        let parts: Vec<Var<'t>> = terms.iter().map(|t| t.reshape(&[1])).collect::<Result<_>>()?;
        tape.concat(&parts, 0)?
    };
    joined.mean()
}

/// Convenience form taking the query and the key matrix directly.
pub fn contrastive_loss_from_keys<'t>(
    query: Var<'t>,
    keys: Var<'t>,
    positives: &[usize],
    negatives: &[usize],
    tau_con: f64,
) -> Result<Var<'t>> {
    let sims = query.flatten()?.row_cosine(keys)?;
    contrastive_loss(sims, positives, negatives, tau_con)
}

/// `(1/B) Σ_n (1 − cos(mean_T(PR_n), F_n))`.
///
/// Each domain representation (`T × d`) is mean-pooled over its tokens before
/// the cosine with the matching text feature.
pub fn alignment_loss<'t>(domain_reps: &[Var<'t>], text_features: &[Var<'t>]) -> Result<Var<'t>> {
    if domain_reps.len() != text_features.len() || domain_reps.is_empty() {
        return Err(Error::invalid(
            "alignment_loss",
            format!(
                "batch mismatch: {} representations vs {} text features",
                domain_reps.len(),
                text_features.len()
            ),
        ));
    }
    let b = domain_reps.len() as f64;
    let mut total: Option<Var<'t>> = None;
    for (rep, text) in domain_reps.iter().zip(text_features) {
        let pooled = if rep.shape().len() == 2 { rep.mean_axis(0)? } else { rep.flatten()? };
        let term = pooled.cosine_similarity(*text)?.neg()?.add_scalar(1.0)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(term)?,
        });
    }
    total.expect("non-empty batch").scale(1.0 / b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn identical_pair_gives_point_nine() {
        let tape = Tape::new();
        let v = tape
            .constant(Tensor::new(&[2, 1, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let l = diversity_loss(v, 0.1).unwrap().item();
        assert!((l - 0.9).abs() < 1e-12);
    }

    #[test]
    fn single_prompt_diversity_is_zero() {
        let tape = Tape::new();
        let v = tape.constant(Tensor::full(&[1, 2, 3], 1.0)).unwrap();
        assert_eq!(diversity_loss(v, 0.1).unwrap().item(), 0.0);
    }

    #[test]
    fn balance_rejects_unnormalised() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.6])).unwrap();
        assert!(balance_loss(p).is_err());
    }

    #[test]
    fn contrastive_needs_both_sets() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.5, 0.1])).unwrap();
        assert!(contrastive_loss(s, &[], &[1], 0.1).is_err());
        assert!(contrastive_loss(s, &[0], &[], 0.1).is_err());
    }

    #[test]
    fn alignment_batch_mismatch() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::full(&[2, 3], 1.0)).unwrap();
        assert!(alignment_loss(&[r], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RegularizerConfig::default().validate().is_ok());
        assert!(RegularizerConfig { tau_div: 1.5, tau_con: 0.1 }.validate().is_err());
        assert!(RegularizerConfig { tau_div: 0.1, tau_con: 0.0 }.validate().is_err());
    }
}
