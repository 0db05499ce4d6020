//! Cross-attention fusion of the task and domain representations, and the
//! per-layer gated injection of the fused representation into backbone features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Single-head scaled dot-product cross-attention with square projections.
/// The output projection starts at zero so a fresh layer contributes nothing.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dim: usize,
}

/// Attention output together with its row-stochastic weight matrix.
pub struct Attended<'t> {
    pub output: Var<'t>,
    pub weights: Var<'t>,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        CrossAttention {
            w_q: store.add(format!("{name}.w_q"), Tensor::randn(&[dim, dim], std, rng)),
            w_k: store.add(format!("{name}.w_k"), Tensor::randn(&[dim, dim], std, rng)),
            w_v: store.add(format!("{name}.w_v"), Tensor::randn(&[dim, dim], std, rng)),
            w_o: store.add(format!("{name}.w_o"), Tensor::zeros(&[dim, dim])),
            dim,
        }
    }

    pub fn num_params(&self) -> usize {
        4 * self.dim * self.dim
    }

    /// `softmax(Q Kᵀ / √d) V W_O` with `Q = queries·W_Q`, `K = context·W_K`, `V = context·W_V`.
    pub fn attend_with_weights<'t>(&self, ctx: Ctx<'t>, queries: Var<'t>, context: Var<'t>) -> Result<Attended<'t>> {
        let (qs, cs) = (queries.shape(), context.shape());
        if qs.len() != 2 || cs.len() != 2 || qs[1] != self.dim || cs[1] != self.dim {
            return Err(Error::shape("attend", &qs, &cs));
        }
        let q = queries.matmul(ctx.p(self.w_q))?;
        let k = context.matmul(ctx.p(self.w_k))?;
        let v = context.matmul(ctx.p(self.w_v))?;
        let logits = q.matmul(k.t()?)?.scale(1.0 / (self.dim as f64).sqrt())?;
        let weights = logits.softmax(1.0)?;
        let output = weights.matmul(v)?.matmul(ctx.p(self.w_o))?;
        Ok(Attended { output, weights })
    }

    pub fn attend<'t>(&self, ctx: Ctx<'t>, queries: Var<'t>, context: Var<'t>) -> Result<Var<'t>> {
        Ok(self.attend_with_weights(ctx, queries, context)?.output)
    }
}

/// `PR_dt = PR_t + CrossAttn(queries = PR_t, context = PR_d)`.
pub fn fuse_representations<'t>(
    ctx: Ctx<'t>,
    attn: &CrossAttention,
    pr_task: Var<'t>,
    pr_domain: Var<'t>,
) -> Result<Var<'t>> {
    let (ts, ds) = (pr_task.shape(), pr_domain.shape());
    if ts != ds {
        return Err(Error::shape("fuse_representations", &ts, &ds));
    }
    pr_task.add(attn.attend(ctx, pr_task, pr_domain)?)
}

/// One injection site: its own attention, a `d → c` adapter for the prompt
/// tokens, and a raw gate whose sigmoid is the mixing coefficient `α_l`.
#[derive(Clone, Debug)]
pub struct GateSite {
    pub attn: CrossAttention,
    pub adapter: Linear,
    pub raw_gate: ParamId,
    pub channels: usize,
}

impl GateSite {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        prompt_dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        GateSite {
            attn: CrossAttention::new(store, &format!("{name}.attn"), channels, rng),
            adapter: Linear::new(store, &format!("{name}.adapter"), prompt_dim, channels, Init::Scaled(1.0), rng),
            raw_gate: store.add(format!("{name}.gate"), Tensor::scalar(0.0)),
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        self.attn.num_params() + self.adapter.num_params() + 1
    }

    /// `α_l = sigmoid(raw_gate)`.
    pub fn alpha(&self, store: &ParamStore) -> f64 {
        sigmoid(store.value(self.raw_gate).item())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gated injection of `pr_dt` into a `c × h × w` feature map.
///
/// Spatial positions become `h·w` tokens of width `c`; queries are
/// `α·tokens`, context is `(1 − α)·adapter(pr_dt)`. With `residual` the
/// attention output is added to the feature map, otherwise it replaces it.
pub fn gated_inject<'t>(
    ctx: Ctx<'t>,
    site: &GateSite,
    feature: Var<'t>,
    pr_dt: Var<'t>,
    residual: bool,
) -> Result<Var<'t>> {
    let shape = feature.shape();
    if shape.len() != 3 || shape[0] != site.channels {
        return Err(Error::shape("gated_inject", &[site.channels], &shape));
    }
    let prs = pr_dt.shape();
    if prs.len() != 2 || prs[1] != site.adapter.in_features {
        return Err(Error::shape("gated_inject adapter", &[site.adapter.in_features], &prs));
    }
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let alpha = ctx.p(site.raw_gate).sigmoid()?;
    let tokens = feature.reshape(&[c, hw])?.t()?;
    let queries = tokens.mul(alpha)?;
    let context = site
        .adapter
        .forward(ctx, pr_dt)?
        .mul(alpha.neg()?.add_scalar(1.0)?)?;
    let out = site.attn.attend(ctx, queries, context)?.t()?.reshape(&shape)?;
    if residual {
        feature.add(out)
    } else {
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_output_projection_is_identity_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = CrossAttention::new(&mut store, "f", 4, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let t = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng)).unwrap();
        let d = tape.constant(Tensor::randn(&[2, 4], 1.0, &mut rng)).unwrap();
        let fused = fuse_representations(ctx, &attn, t, d).unwrap();
        assert_eq!(fused.value().data(), t.value().data());
    }

    #[test]
    fn gate_at_zero_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let site = GateSite::new(&mut store, "s", 4, 3, &mut rng);
        assert_eq!(site.alpha(&store), 0.5);
    }

    #[test]
    fn adapter_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let site = GateSite::new(&mut store, "s", 4, 3, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let f = tape.constant(Tensor::zeros(&[3, 2, 2])).unwrap();
        let pr = tape.constant(Tensor::zeros(&[2, 5])).unwrap();
        assert!(gated_inject(ctx, &site, f, pr, true).is_err());
    }
}
