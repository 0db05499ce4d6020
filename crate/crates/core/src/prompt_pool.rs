//! Learnable key–value prompt pools, query projectors, cosine top-k retrieval
//! and the softmax composition of the retrieved values.
//!
//! A query `q ∈ R^d` is scored against every key with cosine similarity
//! `s_j`. The `k` best prompts are kept and their values are blended with
//! weights `α_j = softmax(s_j / T)` over the kept set, giving one `T × d`
//! representation per input. The full-pool distribution `p = softmax(s)`
//! (temperature 1) is kept alongside for the balance regulariser.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Conv, Ctx, Init, Linear};
use crate::tensor::{ParamId, ParamStore, Tensor, Var};

/// Standard deviation of the normal initialisation of keys and values.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Task,
    Domain,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Task => "task",
            PoolKind::Domain => "domain",
        }
    }
}

/// `N` prompts, each a key `K_j ∈ R^d` and a value `V_j ∈ R^{T×d}`.
#[derive(Clone, Debug)]
pub struct PromptPool {
    pub kind: PoolKind,
    pub keys: ParamId,
    pub values: ParamId,
    pub size: usize,
    pub tokens: usize,
    pub dim: usize,
    pub temperature: f64,
}

impl PromptPool {
    /// Registers keys (`N × d`) and values (`N × T × d`) drawn from normal(0, 0.02).
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: PoolKind,
        size: usize,
        tokens: usize,
        dim: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if size == 0 || tokens == 0 || dim == 0 {
            return Err(Error::invalid(
                "init_pool",
                format!("N, T and d must be ≥ 1 (got {size}, {tokens}, {dim})"),
            ));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::invalid(
                "init_pool",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let name = format!("pools.{}", kind.as_str());
        let keys = store.add(
            format!("{name}.keys"),
            Tensor::randn(&[size, dim], PROMPT_INIT_STD, rng),
        );
        let values = store.add(
            format!("{name}.values"),
            Tensor::randn(&[size, tokens, dim], PROMPT_INIT_STD, rng),
        );
        Ok(PromptPool {
            kind,
            keys,
            values,
            size,
            tokens,
            dim,
            temperature,
        })
    }

    pub fn num_params(&self) -> usize {
        self.size * (self.dim + self.tokens * self.dim)
    }
}

/// Conv → act → conv → global average pool → linear → act → linear.
#[derive(Clone, Debug)]
pub struct QueryProjector {
    pub conv1: Conv,
    pub conv2: Conv,
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl QueryProjector {
    /// `channels` is the width of the hooked feature map; the output has length `dim`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let gain = 1.0;
        QueryProjector {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, Init::Scaled(gain), rng),
            conv2: Conv::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, Init::Scaled(gain), rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), channels, dim, Init::Scaled(gain), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, Init::Scaled(gain), rng),
            activation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_features
    }

    /// Maps a `c × h × w` feature map to a query vector of length `d`.
    pub fn compute_query<'t>(&self, ctx: Ctx<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let shape = features.shape();
        if shape.len() != 3 || shape[0] != self.in_channels() {
            return Err(Error::shape("compute_query", &[self.in_channels()], &shape));
        }
        let act = self.activation;
        let h = act.apply(self.conv1.forward(ctx, features)?)?;
        let h = self.conv2.forward(ctx, h)?;
        let pooled = h.global_avg_pool()?;
        let z = act.apply(self.fc1.forward(ctx, pooled)?)?;
        self.fc2.forward(ctx, z)
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params() + self.conv2.num_params() + self.fc1.num_params() + self.fc2.num_params()
    }
}

/// Outcome of one query against one pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSelection {
    /// Prompt ids in descending similarity (ties: lower id first).
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
    /// Composition weights over the selected prompts.
    pub weights: Vec<f64>,
    /// Softmax (temperature 1) over all `N` similarities.
    pub full_probs: Vec<f64>,
}

/// A [`PromptSelection`] plus the differentiable quantities behind it.
#[derive(Clone, Debug)]
pub struct Retrieval<'t> {
    pub selection: PromptSelection,
    pub query: Var<'t>,
    /// Cosine similarity to every key, length `N`.
    pub all_similarities: Var<'t>,
    /// Similarities of the selected prompts, length `k`.
    pub similarities: Var<'t>,
    pub weights: Var<'t>,
    pub full_probs: Var<'t>,
    pool_size: usize,
}

impl Retrieval<'_> {
    /// Ids not in the selection, ascending.
    pub fn unselected(&self) -> Vec<usize> {
        (0..self.pool_size)
            .filter(|i| !self.selection.indices.contains(i))
            .collect()
    }
}

/// Indices of the `k` largest scores, descending; equal scores keep the lower index first.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(
            "select_top_k",
            format!("k = {k} outside 1..={}", scores.len()),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order.truncate(k);
    Ok(order)
}

/// Scores `query` against every key and keeps the top `k`.
///
/// The choice of indices is discrete; gradients flow through the similarity
/// values (and so through the composition weights) to the query and keys.
pub fn select_top_k<'t>(ctx: Ctx<'t>, pool: &PromptPool, query: Var<'t>, k: usize) -> Result<Retrieval<'t>> {
    if query.numel() != pool.dim {
        return Err(Error::shape("select_top_k", &[pool.dim], &query.shape()));
    }
    let keys = ctx.p(pool.keys);
    let all = query.flatten()?.row_cosine(keys)?;
    let scores = all.value();
    let indices = top_k_indices(scores.data(), k)?;
    let similarities = all.select_rows(&indices)?;
    let weights = similarities.softmax(pool.temperature)?;
    let full_probs = all.softmax(1.0)?;
    let selection = PromptSelection {
        similarities: similarities.value().data().to_vec(),
        weights: weights.value().data().to_vec(),
        full_probs: full_probs.value().data().to_vec(),
        indices,
    };
    Ok(Retrieval {
        selection,
        query,
        all_similarities: all,
        similarities,
        weights,
        full_probs,
        pool_size: pool.size,
    })
}

/// `PR = Σ_j α_j V_j` over the selected prompts, shape `T × d`.
pub fn compose<'t>(ctx: Ctx<'t>, retrieval: &Retrieval<'t>, pool: &PromptPool) -> Result<Var<'t>> {
    let idx = &retrieval.selection.indices;
    if let Some(&bad) = idx.iter().find(|&&i| i >= pool.size) {
        return Err(Error::invalid(
            "compose",
            format!("stale selection: prompt {bad} not in pool of {}", pool.size),
        ));
    }
    let k = idx.len();
    let width = pool.tokens * pool.dim;
    let chosen = ctx
        .p(pool.values)
        .select_rows(idx)?
        .reshape(&[k, width])?;
    retrieval
        .weights
        .reshape(&[1, k])?
        .matmul(chosen)?
        .reshape(&[pool.tokens, pool.dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis_pool(store: &mut ParamStore) -> PromptPool {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool = PromptPool::init(store, PoolKind::Task, 4, 2, 4, 1.0, &mut rng).unwrap();
        store.set_value(pool.keys, Tensor::eye(4)).unwrap();
        pool
    }

    #[test]
    fn orthonormal_keys_select_matching_prompt() {
        let mut store = ParamStore::new();
        let pool = basis_pool(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let q = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        let r = select_top_k(ctx, &pool, q, 1).unwrap();
        assert_eq!(r.selection.indices, vec![1]);
        assert!((r.selection.similarities[0] - 1.0).abs() < 1e-12);
        assert_eq!(r.unselected(), vec![0, 2, 3]);
    }

    #[test]
    fn identical_keys_break_ties_by_index() {
        let mut store = ParamStore::new();
        let pool = basis_pool(&mut store);
        store.set_value(pool.keys, Tensor::full(&[4, 4], 0.3)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let q = tape.constant(Tensor::vector(vec![0.2, -1.0, 0.5, 0.1])).unwrap();
        let r = select_top_k(ctx, &pool, q, 2).unwrap();
        assert_eq!(r.selection.indices, vec![0, 1]);
    }

    #[test]
    fn k_out_of_range_is_rejected() {
        assert!(top_k_indices(&[0.1, 0.2], 0).is_err());
        assert!(top_k_indices(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn single_prompt_composition_is_that_value() {
        let mut store = ParamStore::new();
        let pool = basis_pool(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let q = tape.constant(Tensor::vector(vec![0.0, 0.0, 3.0, 0.0])).unwrap();
        let r = select_top_k(ctx, &pool, q, 1).unwrap();
        let pr = compose(ctx, &r, &pool).unwrap().value();
        let v = store.value(pool.values).data()[2 * 8..3 * 8].to_vec();
        assert_eq!(pr.data(), v.as_slice());
    }

    #[test]
    fn stale_selection_rejected() {
        let mut store = ParamStore::new();
        let pool = basis_pool(&mut store);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let q = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        let mut r = select_top_k(ctx, &pool, q, 1).unwrap();
        r.selection.indices = vec![7];
        assert!(compose(ctx, &r, &pool).is_err());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(PromptPool::init(&mut store, PoolKind::Task, 0, 2, 8, 1.0, &mut rng).is_err());
        assert!(PromptPool::init(&mut store, PoolKind::Task, 4, 2, 8, 0.0, &mut rng).is_err());
    }
}
