//! Reconstruction losses and the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOutput, Model};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::prompt_pool::Retrieval;
use crate::regularizers::{alignment_loss, balance_loss, contrastive_loss, diversity_loss, RegularizerConfig};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pix: f64,
    pub fft: f64,
    pub align: f64,
    pub div: f64,
    pub bal: f64,
    pub con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pix: 1.0,
            fft: 0.1,
            align: 1.0,
            div: 0.1,
            bal: 0.1,
            con: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.pix, self.fft, self.align, self.div, self.bal, self.con];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("loss weights", format!("weights must be finite and ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Unweighted value of every objective term. Pool terms are 0 when the pool is off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pix: f64,
    pub fft: f64,
    pub align: f64,
    pub div_task: f64,
    pub div_domain: f64,
    pub bal_task: f64,
    pub bal_domain: f64,
    pub con_task: f64,
    pub con_domain: f64,
}

impl LossBreakdown {
    /// Weighted sum, in the same order the objective is assembled on the tape.
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.pix * self.pix
            + w.fft * self.fft
            + w.align * self.align
            + w.div * (self.div_task + self.div_domain)
            + w.bal * (self.bal_task + self.bal_domain)
            + w.con * (self.con_task + self.con_domain)
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.pix += s * other.pix;
        self.fft += s * other.fft;
        self.align += s * other.align;
        self.div_task += s * other.div_task;
        self.div_domain += s * other.div_domain;
        self.bal_task += s * other.bal_task;
        self.bal_domain += s * other.bal_domain;
        self.con_task += s * other.con_task;
        self.con_domain += s * other.con_domain;
    }
}

/// `(mean |r − h|, mean(|Re Δ| + |Im Δ|))` with `Δ = dft2(r) − dft2(h)` per channel.
pub fn reconstruction_losses<'t>(restored: Var<'t>, hq: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (rs, hs) = (restored.shape(), hq.shape());
    if rs != hs {
        return Err(Error::shape("reconstruction_losses", &rs, &hs));
    }
    let diff = restored.sub(hq)?;
    let pix = diff.abs()?.mean()?;
    let (re, im) = diff.dft2()?;
    let fft = re.abs()?.mean()?.add(im.abs()?.mean()?)?;
    Ok((pix, fft))
}

/// Differentiable per-sample terms; pool terms are `None` when not applicable.
pub struct SampleTerms<'t> {
    pub pix: Var<'t>,
    pub fft: Var<'t>,
    pub align: Option<Var<'t>>,
    pub bal_task: Option<Var<'t>>,
    pub bal_domain: Option<Var<'t>>,
    pub con_task: Option<Var<'t>>,
    pub con_domain: Option<Var<'t>>,
}

fn opt_val(v: &Option<Var<'_>>) -> f64 {
    v.map_or(0.0, |v| v.item())
}

impl<'t> SampleTerms<'t> {
    pub fn values(&self) -> LossBreakdown {
        LossBreakdown {
            pix: self.pix.item(),
            fft: self.fft.item(),
            align: opt_val(&self.align),
            bal_task: opt_val(&self.bal_task),
            bal_domain: opt_val(&self.bal_domain),
            con_task: opt_val(&self.con_task),
            con_domain: opt_val(&self.con_domain),
            ..LossBreakdown::default()
        }
    }

    /// `λ_pix L_pix + λ_fft L_fft + λ_align L_align + λ_bal (…) + λ_con (…)`.
    pub fn weighted(&self, w: &LossWeights) -> Result<Var<'t>> {
        let mut acc = self.pix.scale(w.pix)?.add(self.fft.scale(w.fft)?)?;
        if let Some(a) = self.align {
            acc = acc.add(a.scale(w.align)?)?;
        }
        for (term, weight) in [
            (self.bal_task, w.bal),
            (self.bal_domain, w.bal),
            (self.con_task, w.con),
            (self.con_domain, w.con),
        ] {
            if let Some(t) = term {
                acc = acc.add(t.scale(weight)?)?;
            }
        }
        Ok(acc)
    }
}

/// Every per-sample term of the objective for one forward pass.
///
/// The contrastive positives are the selected prompts and the negatives are
/// the rest of the pool; with `k = N` there are no negatives and the term is dropped.
pub fn sample_terms<'t>(
    out: &ForwardOutput<'t>,
    hq: Var<'t>,
    text_feature: Var<'t>,
    reg: &RegularizerConfig,
) -> Result<SampleTerms<'t>> {
    let (pix, fft) = reconstruction_losses(out.restored, hq)?;
    let align = match out.pr_domain {
        Some(pr) => Some(alignment_loss(&[pr], &[text_feature])?),
        None => None,
    };
    let pool_terms = |r: &Option<Retrieval<'t>>| -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
        let Some(r) = r else { return Ok((None, None)) };
        let bal = balance_loss(r.full_probs)?;
        let negatives = r.unselected();
        let con = if negatives.is_empty() {
            None
        } else {
            Some(contrastive_loss(r.all_similarities, &r.selection.indices, &negatives, reg.tau_con)?)
        };
        Ok((Some(bal), con))
    };
    let (bal_task, con_task) = pool_terms(&out.task)?;
    let (bal_domain, con_domain) = pool_terms(&out.domain)?;
    Ok(SampleTerms {
        pix,
        fft,
        align,
        bal_task,
        bal_domain,
        con_task,
        con_domain,
    })
}

/// Diversity terms, which depend only on the pools' values: `(task, domain)`.
pub fn diversity_terms<'t>(
    ctx: Ctx<'t>,
    model: &Model,
    reg: &RegularizerConfig,
) -> Result<(Option<Var<'t>>, Option<Var<'t>>)> {
    let div = |b: &Option<crate::backbone::PromptBranch>| -> Result<Option<Var<'t>>> {
        match b {
            Some(b) => Ok(Some(diversity_loss(ctx.p(b.pool.values), reg.tau_div)?)),
            None => Ok(None),
        }
    };
    Ok((div(&model.task)?, div(&model.domain)?))
}
