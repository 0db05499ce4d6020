//! A small U-shaped restoration network carrying the two prompt pools.
//!
//! Layout for `levels = L` and channels `c_0 < … < c_{L−1}`:
//!
//! ```text
//! lq ─ stem(3→c0) ─ shallow ─┬─ [enc blocks, down] × (L−1) ─ bottleneck = F_mid
//!                            │                                   │
//!                 domain query                             task query
//!                                                               AGF
//!          [up, concat skip, 1×1 merge, dec blocks, AGF] × (L−1)
//!                                   │
//!                       final conv(c0→3) + lq = restored
//! ```
//!
//! A block is `x + silu(conv3×3(x))`. Downsampling is a stride-2 conv,
//! upsampling is nearest 2× followed by a conv. The final conv starts at zero,
//! so an untrained model returns its input unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_representations, gated_inject, CrossAttention, GateSite};
use crate::nn::{Activation, Conv, Ctx, Init};
use crate::prompt_pool::{compose, select_top_k, PoolKind, PromptPool, PromptSelection, QueryProjector, Retrieval};
use crate::tensor::{ParamStore, Tensor, Var};

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub blocks: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 3,
            channels: vec![16, 32, 64],
            blocks: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::invalid(
                "backbone",
                format!("{} levels need {} channel widths, got {:?}", self.levels, self.levels, self.channels),
            ));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) || self.channels[0] == 0 {
            return Err(Error::invalid(
                "backbone",
                format!("channels must be strictly increasing, got {:?}", self.channels),
            ));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub enabled: bool,
    pub size: usize,
    pub top_k: usize,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Prompt key / query dimension `d`.
    pub dim: usize,
    /// Tokens per prompt value `T`.
    pub tokens: usize,
    pub task_pool: PoolConfig,
    pub domain_pool: PoolConfig,
    /// Residual around each gated injection.
    pub residual_fusion: bool,
    pub projector_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            dim: 64,
            tokens: 2,
            task_pool: PoolConfig {
                enabled: true,
                size: 8,
                top_k: 2,
                temperature: 1.0,
            },
            domain_pool: PoolConfig {
                enabled: true,
                size: 8,
                top_k: 3,
                temperature: 1.0,
            },
            residual_fusion: true,
            projector_activation: Activation::Silu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.dim == 0 || self.tokens == 0 {
            return Err(Error::invalid("model", "dim and tokens must be ≥ 1"));
        }
        for (name, p) in [("task", &self.task_pool), ("domain", &self.domain_pool)] {
            if p.enabled && (p.top_k == 0 || p.top_k > p.size) {
                return Err(Error::invalid(
                    "model",
                    format!("{name} pool: top_k {} must lie in 1..={}", p.top_k, p.size),
                ));
            }
            if p.enabled && !(p.temperature > 0.0) {
                return Err(Error::invalid("model", format!("{name} pool: temperature must be positive")));
            }
        }
        Ok(())
    }

    pub fn any_pool(&self) -> bool {
        self.task_pool.enabled || self.domain_pool.enabled
    }

    /// Channel width at each injection site: bottleneck first, then decoder
    /// levels from deep to shallow.
    pub fn site_channels(&self) -> Vec<usize> {
        if !self.any_pool() {
            return Vec::new();
        }
        self.backbone.channels.iter().rev().copied().collect()
    }

    /// Closed-form count of trainable scalars.
    ///
    /// With `conv(i,o,k) = o(ik²+1)`, `lin(i,o) = o(i+1)` and
    /// `proj(c) = 2·conv(c,c,3) + lin(c,d) + lin(d,d)`:
    ///
    /// * stem `conv(3,c0,3)`, final `conv(c0,3,3)`
    /// * bottleneck `blocks·conv(c_{L−1},c_{L−1},3)`
    /// * each `l < L−1`: encoder and decoder `2·blocks·conv(c_l,c_l,3)`, down `conv(c_l,c_{l+1},3)`, up `conv(c_{l+1},c_l,3)`, merge `conv(2c_l,c_l,1)`
    /// * task pool: `N_t·(d + T·d) + proj(c_{L−1})`; domain pool: `N_d·(d + T·d) + proj(c_0)`
    /// * both pools: fusion attention `4d²`
    /// * any pool: per site of width `c`: `4c² + lin(d,c) + 1`
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * (i * k * k + 1);
        let lin = |i: usize, o: usize| o * (i + 1);
        let (d, t) = (self.dim, self.tokens);
        let proj = |c: usize| 2 * conv(c, c, 3) + lin(c, d) + lin(d, d);
        let ch = &self.backbone.channels;
        let last = ch.len() - 1;
        let mut n = conv(IMAGE_CHANNELS, ch[0], 3) + conv(ch[0], IMAGE_CHANNELS, 3);
        for (l, &c) in ch.iter().enumerate() {
            n += self.backbone.blocks * conv(c, c, 3);
            if l < last {
                n += self.backbone.blocks * conv(c, c, 3);
                n += conv(c, ch[l + 1], 3) + conv(ch[l + 1], c, 3) + conv(2 * c, c, 1);
            }
        }
        if self.task_pool.enabled {
            n += self.task_pool.size * (d + t * d) + proj(ch[last]);
        }
        if self.domain_pool.enabled {
            n += self.domain_pool.size * (d + t * d) + proj(ch[0]);
        }
        if self.task_pool.enabled && self.domain_pool.enabled {
            n += 4 * d * d;
        }
        for c in self.site_channels() {
            n += 4 * c * c + lin(d, c) + 1;
        }
        n
    }
}

/// A pool together with the projector that queries it.
#[derive(Clone, Debug)]
pub struct PromptBranch {
    pub pool: PromptPool,
    pub projector: QueryProjector,
    pub top_k: usize,
}

impl PromptBranch {
    fn retrieve<'t>(&self, ctx: Ctx<'t>, hook: Var<'t>) -> Result<(Retrieval<'t>, Var<'t>)> {
        let query = self.projector.compute_query(ctx, hook)?;
        let retrieval = select_top_k(ctx, &self.pool, query, self.top_k)?;
        let rep = compose(ctx, &retrieval, &self.pool)?;
        Ok((retrieval, rep))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForwardDiagnostics {
    pub task_selection: Option<PromptSelection>,
    pub domain_selection: Option<PromptSelection>,
    /// `α_l` per injection site.
    pub gate_values: Vec<f64>,
    pub pr_dt_norm: f64,
}

pub struct ForwardOutput<'t> {
    pub restored: Var<'t>,
    pub task: Option<Retrieval<'t>>,
    pub domain: Option<Retrieval<'t>>,
    pub pr_task: Option<Var<'t>>,
    pub pr_domain: Option<Var<'t>>,
    pub pr_dt: Option<Var<'t>>,
    pub diagnostics: ForwardDiagnostics,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: Conv,
    enc_blocks: Vec<Vec<Conv>>,
    downs: Vec<Conv>,
    bottleneck: Vec<Conv>,
    ups: Vec<Conv>,
    merges: Vec<Conv>,
    dec_blocks: Vec<Vec<Conv>>,
    final_conv: Conv,
    pub task: Option<PromptBranch>,
    pub domain: Option<PromptBranch>,
    pub fusion: Option<CrossAttention>,
    pub sites: Vec<GateSite>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let ch = config.backbone.channels.clone();
        let last = ch.len() - 1;
        let blocks = config.backbone.blocks;
        let act_gain = 2f64.sqrt();
        let block_init = Init::Scaled(0.5);

        let stem = Conv::new(s, "backbone.stem", IMAGE_CHANNELS, ch[0], 3, 1, Init::Scaled(act_gain), rng);
        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        for l in 0..last {
            enc_blocks.push(
                (0..blocks)
                    .map(|b| Conv::new(s, &format!("backbone.enc{l}.block{b}"), ch[l], ch[l], 3, 1, block_init, rng))
                    .collect(),
            );
            downs.push(Conv::new(s, &format!("backbone.down{l}"), ch[l], ch[l + 1], 3, 2, Init::Scaled(act_gain), rng));
        }
        let bottleneck = (0..blocks)
            .map(|b| Conv::new(s, &format!("backbone.mid.block{b}"), ch[last], ch[last], 3, 1, block_init, rng))
            .collect();
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        let mut dec_blocks = Vec::new();
        for l in (0..last).rev() {
            ups.push(Conv::new(s, &format!("backbone.up{l}"), ch[l + 1], ch[l], 3, 1, Init::Scaled(act_gain), rng));
            merges.push(Conv::new(s, &format!("backbone.merge{l}"), 2 * ch[l], ch[l], 1, 1, Init::Scaled(1.0), rng));
            dec_blocks.push(
                (0..blocks)
                    .map(|b| Conv::new(s, &format!("backbone.dec{l}.block{b}"), ch[l], ch[l], 3, 1, block_init, rng))
                    .collect(),
            );
        }
        let final_conv = Conv::new(s, "backbone.final", ch[0], IMAGE_CHANNELS, 3, 1, Init::Zeros, rng);

        let (d, t) = (config.dim, config.tokens);
        let act = config.projector_activation;
        let task = if config.task_pool.enabled {
            let p = &config.task_pool;
            Some(PromptBranch {
                pool: PromptPool::init(s, PoolKind::Task, p.size, t, d, p.temperature, rng)?,
                projector: QueryProjector::new(s, "projector.task", ch[last], d, act, rng),
                top_k: p.top_k,
            })
        } else {
            None
        };
        let domain = if config.domain_pool.enabled {
            let p = &config.domain_pool;
            Some(PromptBranch {
                pool: PromptPool::init(s, PoolKind::Domain, p.size, t, d, p.temperature, rng)?,
                projector: QueryProjector::new(s, "projector.domain", ch[0], d, act, rng),
                top_k: p.top_k,
            })
        } else {
            None
        };
        let fusion = (task.is_some() && domain.is_some()).then(|| CrossAttention::new(s, "fusion.attn", d, rng));
        let sites = config
            .site_channels()
            .into_iter()
            .enumerate()
            .map(|(i, c)| GateSite::new(s, &format!("fusion.site{i}"), d, c, rng))
            .collect();

        Ok(Model {
            config,
            store,
            stem,
            enc_blocks,
            downs,
            bottleneck,
            ups,
            merges,
            dec_blocks,
            final_conv,
            task,
            domain,
            fusion,
            sites,
        })
    }

    /// Exact number of trainable scalars, including pools, projectors, fusion and gates.
    pub fn count_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// `α_l` for every injection site.
    pub fn gate_values(&self) -> Vec<f64> {
        self.sites.iter().map(|s| s.alpha(&self.store)).collect()
    }

    /// Adds normal noise to every parameter, including zero-initialised ones.
    /// Used to move away from the neutral initial state in tests and checks.
    pub fn perturb_parameters<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for p in self.store.iter_mut() {
            let noise = Tensor::randn(p.value.shape(), std, rng);
            p.value
                .data_mut()
                .iter_mut()
                .zip(noise.data())
                .for_each(|(v, n)| *v += n);
        }
    }

    pub fn forward<'t>(&self, ctx: Ctx<'t>, lq: Var<'t>) -> Result<ForwardOutput<'t>> {
        let shape = lq.shape();
        let m = self.config.backbone.size_multiple();
        if shape.len() != 3 || shape[0] != IMAGE_CHANNELS {
            return Err(Error::shape("forward", &[IMAGE_CHANNELS], &shape));
        }
        if shape[1] % m != 0 || shape[2] % m != 0 {
            return Err(Error::invalid(
                "forward",
                format!("spatial size {}×{} not divisible by {m}", shape[1], shape[2]),
            ));
        }
        let block = |conv: &Conv, x: Var<'t>| -> Result<Var<'t>> { x.add(conv.forward(ctx, x)?.silu()?) };

        let shallow = self.stem.forward(ctx, lq)?.silu()?;
        let mut feat = shallow;
        let mut skips = Vec::new();
        for (blocks, down) in self.enc_blocks.iter().zip(&self.downs) {
            for b in blocks {
                feat = block(b, feat)?;
            }
            skips.push(feat);
            feat = down.forward(ctx, feat)?.silu()?;
        }
        for b in &self.bottleneck {
            feat = block(b, feat)?;
        }
        let f_mid = feat;

        let (task, pr_task) = match &self.task {
            Some(br) => {
                let (r, rep) = br.retrieve(ctx, f_mid)?;
                (Some(r), Some(rep))
            }
            None => (None, None),
        };
        let (domain, pr_domain) = match &self.domain {
            Some(br) => {
                let (r, rep) = br.retrieve(ctx, shallow)?;
                (Some(r), Some(rep))
            }
            None => (None, None),
        };
        let pr_dt = match (pr_task, pr_domain, &self.fusion) {
            (Some(t), Some(d), Some(attn)) => Some(fuse_representations(ctx, attn, t, d)?),
            (Some(t), None, _) => Some(t),
            (None, Some(d), _) => Some(d),
            _ => None,
        };

        let residual = self.config.residual_fusion;
        let mut sites = self.sites.iter();
        if let Some(pr) = pr_dt {
            let site = sites.next().expect("one site per level");
            feat = gated_inject(ctx, site, feat, pr, residual)?;
        }
        for ((up, merge), blocks) in self.ups.iter().zip(&self.merges).zip(&self.dec_blocks) {
            let skip = skips.pop().expect("one skip per decoder level");
            feat = up.forward(ctx, feat.upsample2x()?)?.silu()?;
            feat = merge.forward(ctx, ctx.tape.concat(&[feat, skip], 0)?)?;
            for b in blocks {
                feat = block(b, feat)?;
            }
            if let Some(pr) = pr_dt {
                let site = sites.next().expect("one site per level");
                feat = gated_inject(ctx, site, feat, pr, residual)?;
            }
        }
        let restored = lq.add(self.final_conv.forward(ctx, feat)?)?;

        let diagnostics = ForwardDiagnostics {
            task_selection: task.as_ref().map(|r| r.selection.clone()),
            domain_selection: domain.as_ref().map(|r| r.selection.clone()),
            gate_values: self.gate_values(),
            pr_dt_norm: pr_dt.map_or(0.0, |p| p.value().norm()),
        };
        Ok(ForwardOutput {
            restored,
            task,
            domain,
            pr_task,
            pr_domain,
            pr_dt,
            diagnostics,
        })
    }

    /// Forward pass without gradient bookkeeping; returns the restored image.
    pub fn restore(&self, lq: &Tensor) -> Result<(Tensor, ForwardDiagnostics)> {
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::new(&tape, &self.store);
        let x = tape.constant(lq.clone())?;
        let out = self.forward(ctx, x)?;
        Ok(((*out.restored.value()).clone(), out.diagnostics))
    }
}
