//! Finite-difference verification of every loss and forward path.

use std::collections::BTreeMap;

use datprl_core::backbone::{BackboneConfig, Model, ModelConfig, PoolConfig};
use datprl_core::fusion::{fuse_representations, gated_inject, CrossAttention, GateSite};
use datprl_core::nn::{Activation, Ctx};
use datprl_core::prompt_pool::{compose, select_top_k, PoolKind, PromptPool, QueryProjector};
use datprl_core::regularizers::{
    alignment_loss, balance_loss, contrastive_loss, diversity_loss, RegularizerConfig,
};
use datprl_core::tensor::{normwise_error, ParamId, ParamStore, Tape, Tensor, Var, OP_NAMES};
use datprl_core::trainer::{diversity_terms, reconstruction_losses, sample_terms, LossWeights};
use datprl_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComponentKind {
    Loss,
    Path,
    EndToEnd,
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub seeds: usize,
    pub loss_tolerance: f64,
    pub path_tolerance: f64,
    pub end_to_end_tolerance: f64,
    /// Random coordinates probed per tensor (all of them for smaller tensors).
    pub coords_per_tensor: usize,
    /// Op whose backward rule is deliberately corrupted.
    pub fault: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            seeds: 20,
            loss_tolerance: 1e-5,
            path_tolerance: 1e-5,
            end_to_end_tolerance: 1e-4,
            coords_per_tensor: 6,
            fault: None,
        }
    }
}

/// Resolves an op name to the static name the tape uses.
pub fn fault_op(name: &str) -> Result<&'static str> {
    OP_NAMES.iter().copied().find(|&n| n == name).ok_or_else(|| Error::Config {
        line: 0,
        msg: format!("unknown op {name:?}; known ops: {}", OP_NAMES.join(", ")),
    })
}

#[derive(Clone, Debug)]
pub struct ComponentReport {
    pub name: &'static str,
    pub kind: ComponentKind,
    pub tolerance: f64,
    pub checks: usize,
    pub max_rel_err: f64,
    /// Where the worst error occurred: `seed/tensor[index]`.
    pub worst: String,
    /// Nodes per op over all analytic passes.
    pub ops: BTreeMap<&'static str, usize>,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub components: Vec<ComponentReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(ComponentReport::passed)
    }

    pub fn failing(&self) -> Vec<&'static str> {
        self.components.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }
}

/// What a probe differentiates with respect to.
#[derive(Clone, Copy)]
enum Target {
    Input,
    Param(ParamId),
}

struct Probe<'a> {
    report: &'a mut ComponentReport,
    fault: Option<&'static str>,
    coords: usize,
    rng: ChaCha8Rng,
    seed: u64,
}

impl Probe<'_> {
    fn pick(&mut self, n: usize) -> Vec<usize> {
        if n <= self.coords {
            return (0..n).collect();
        }
        let mut out: Vec<usize> = Vec::with_capacity(self.coords);
        while out.len() < self.coords {
            let i = self.rng.random_range(0..n);
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out
    }

    /// Compares the backward pass with central differences of `build`.
    fn check<F>(&mut self, label: &str, store: &ParamStore, x: &Tensor, target: Target, build: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &'t ParamStore, Var<'t>) -> Result<Var<'t>>,
    {
        let analytic = {
            let tape = Tape::new();
            if let Some(op) = self.fault {
                tape.inject_fault(op);
            }
            let leaf = tape.leaf(x.clone(), matches!(target, Target::Input))?;
            let loss = build(&tape, store, leaf)?;
            let grads = tape.backward(loss)?;
            for (op, n) in tape.op_counts() {
                *self.report.ops.entry(op).or_insert(0) += n;
            }
            let g = match target {
                Target::Input => grads.wrt(leaf).cloned(),
                Target::Param(id) => grads.param(id).cloned(),
            };
            let shape = match target {
                Target::Input => x.shape().to_vec(),
                Target::Param(id) => store.value(id).shape().to_vec(),
            };
            g.unwrap_or_else(|| Tensor::zeros(&shape))
        };
        let eval = |store: &ParamStore, x: &Tensor| -> Result<f64> {
            let tape = Tape::new();
            let leaf = tape.leaf(x.clone(), false)?;
            Ok(build(&tape, store, leaf)?.item())
        };
        let mut probe_store = store.clone();
        let mut probe_x = x.clone();
        let mut pairs = Vec::new();
        for i in self.pick(analytic.numel()) {
            let numeric = match target {
                Target::Input => {
                    let orig = probe_x.data()[i];
                    probe_x.data_mut()[i] = orig + FD_EPS;
                    let plus = eval(store, &probe_x)?;
                    probe_x.data_mut()[i] = orig - FD_EPS;
                    let minus = eval(store, &probe_x)?;
                    probe_x.data_mut()[i] = orig;
                    (plus - minus) / (2.0 * FD_EPS)
                }
                Target::Param(id) => {
                    let orig = probe_store.value(id).data()[i];
                    probe_store.get_mut(id).value.data_mut()[i] = orig + FD_EPS;
                    let plus = eval(&probe_store, x)?;
                    probe_store.get_mut(id).value.data_mut()[i] = orig - FD_EPS;
                    let minus = eval(&probe_store, x)?;
                    probe_store.get_mut(id).value.data_mut()[i] = orig;
                    (plus - minus) / (2.0 * FD_EPS)
                }
            };
            pairs.push((i, analytic.data()[i], numeric));
        }
        let scale = pairs
            .iter()
            .map(|p| p.2.abs())
            .chain(analytic.data().iter().map(|a| a.abs()))
            .fold(0.0, f64::max);
        for (i, a, n) in pairs {
            let err = normwise_error(a, n, scale);
            self.report.checks += 1;
            if self.report.worst.is_empty() || err > self.report.max_rel_err {
                self.report.max_rel_err = err;
                self.report.worst = format!("seed {}/{label}[{i}]", self.seed);
            }
        }
        Ok(())
    }

    fn check_params<F>(&mut self, store: &ParamStore, x: &Tensor, build: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &'t ParamStore, Var<'t>) -> Result<Var<'t>> + Copy,
    {
        let ids: Vec<(ParamId, String)> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            self.check(&name, store, x, Target::Param(id), build)?;
        }
        Ok(())
    }
}

/// `Σ out ⊙ R` with a fixed random `R`, turning any output into a scalar.
fn project<'t>(out: Var<'t>, r: &Tensor) -> Result<Var<'t>> {
    let r = out.tape().constant(r.reshape(&out.shape())?)?;
    out.mul(r)?.sum()
}

fn unit(v: Tensor) -> Tensor {
    let n = v.norm();
    v.map(|x| x / n)
}

type ComponentFn = fn(&mut Probe<'_>, &mut ChaCha8Rng) -> Result<()>;

const COMPONENTS: &[(&str, ComponentKind, ComponentFn)] = &[
    ("loss.pix", ComponentKind::Loss, check_pix),
    ("loss.fft", ComponentKind::Loss, check_fft),
    ("loss.align", ComponentKind::Loss, check_align),
    ("loss.div", ComponentKind::Loss, check_div),
    ("loss.bal", ComponentKind::Loss, check_bal),
    ("loss.con", ComponentKind::Loss, check_con),
    ("projector", ComponentKind::Path, check_projector),
    ("pcm", ComponentKind::Path, check_pcm),
    ("cross_attention", ComponentKind::Path, check_cross_attention),
    ("agf", ComponentKind::Path, check_agf),
    ("backbone", ComponentKind::EndToEnd, check_backbone),
];

pub fn component_names() -> Vec<&'static str> {
    COMPONENTS.iter().map(|c| c.0).collect()
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut components = Vec::new();
    for (ci, &(name, kind, f)) in COMPONENTS.iter().enumerate() {
        let tolerance = match kind {
            ComponentKind::Loss => opts.loss_tolerance,
            ComponentKind::Path => opts.path_tolerance,
            ComponentKind::EndToEnd => opts.end_to_end_tolerance,
        };
        let mut report = ComponentReport {
            name,
            kind,
            tolerance,
            checks: 0,
            max_rel_err: 0.0,
            worst: String::new(),
            ops: BTreeMap::new(),
        };
        for s in 0..opts.seeds {
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add((ci * 10_007 + s) as u64);
            let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut probe = Probe {
                report: &mut report,
                fault: opts.fault,
                coords: opts.coords_per_tensor,
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed),
                seed: s as u64,
            };
            f(&mut probe, &mut data_rng)?;
        }
        components.push(report);
    }
    Ok(GradcheckReport { components })
}

fn check_pix(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, rng);
    let hq = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, rng);
    p.check("restored", &ParamStore::new(), &x, Target::Input, |t, _, x| {
        reconstruction_losses(x, t.constant(hq.clone())?).map(|l| l.0)
    })
}

fn check_fft(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let x = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, rng);
    let hq = Tensor::uniform(&[3, 6, 6], 0.0, 1.0, rng);
    p.check("restored", &ParamStore::new(), &x, Target::Input, |t, _, x| {
        reconstruction_losses(x, t.constant(hq.clone())?).map(|l| l.1)
    })
}

fn check_align(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let pr = Tensor::randn(&[2, 8], 1.0, rng);
    let text = unit(Tensor::randn(&[8], 1.0, rng));
    p.check("pr_domain", &ParamStore::new(), &pr, Target::Input, |t, _, x| {
        alignment_loss(&[x], &[t.constant(text.clone())?])
    })
}

fn check_div(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    // Correlated values so that several pairs sit above the threshold.
    let base = Tensor::randn(&[2, 8], 1.0, rng);
    let mut v = Vec::new();
    for _ in 0..5 {
        let noise = Tensor::randn(&[2, 8], 1.0, rng);
        v.extend(base.data().iter().zip(noise.data()).map(|(b, n)| b + n));
    }
    let values = Tensor::new(&[5, 2, 8], v)?;
    p.check("values", &ParamStore::new(), &values, Target::Input, |_, _, x| {
        diversity_loss(x, RegularizerConfig::default().tau_div)
    })
}

fn check_bal(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let s = Tensor::uniform(&[6], -1.0, 1.0, rng);
    p.check("similarities", &ParamStore::new(), &s, Target::Input, |_, _, x| {
        balance_loss(x.softmax(1.0)?)
    })
}

fn check_con(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let s = Tensor::uniform(&[6], -1.0, 1.0, rng);
    p.check("similarities", &ParamStore::new(), &s, Target::Input, |_, _, x| {
        contrastive_loss(x, &[0, 3], &[1, 2, 4, 5], RegularizerConfig::default().tau_con)
    })
}

/// Pins a closure to the higher-ranked signature probes expect.
fn hr<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape, &'t ParamStore, Var<'t>) -> Result<Var<'t>>,
{
    f
}

fn check_projector(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let proj = QueryProjector::new(&mut store, "projector", 3, 8, Activation::Silu, rng);
    let x = Tensor::randn(&[3, 6, 6], 1.0, rng);
    let r = Tensor::randn(&[8], 1.0, rng);
    let f = hr(|t, s, x| project(proj.compute_query(Ctx::new(t, s), x)?, &r));
    p.check("features", &store, &x, Target::Input, f)?;
    p.check_params(&store, &x, f)
}

fn check_pcm(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let pool = PromptPool::init(&mut store, PoolKind::Task, 6, 2, 8, 0.7, rng)?;
    for id in [pool.keys, pool.values] {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::randn(&shape, 1.0, rng))?;
    }
    let q = Tensor::randn(&[8], 1.0, rng);
    let r = Tensor::randn(&[16], 1.0, rng);
    let f = hr(|t, s, x| {
        let ctx = Ctx::new(t, s);
        let ret = select_top_k(ctx, &pool, x, 3)?;
        project(compose(ctx, &ret, &pool)?, &r)
    });
    p.check("query", &store, &q, Target::Input, f)?;
    p.check_params(&store, &q, f)
}

fn check_cross_attention(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let attn = CrossAttention::new(&mut store, "attn", 8, rng);
    store.set_value(attn.w_o, Tensor::randn(&[8, 8], 0.5, rng))?;
    let pr_t = Tensor::randn(&[2, 8], 1.0, rng);
    let pr_d = Tensor::randn(&[2, 8], 1.0, rng);
    let r = Tensor::randn(&[16], 1.0, rng);
    let as_task = hr(|t, s, x| project(fuse_representations(Ctx::new(t, s), &attn, x, t.constant(pr_d.clone())?)?, &r));
    let as_domain = hr(|t, s, x| project(fuse_representations(Ctx::new(t, s), &attn, t.constant(pr_t.clone())?, x)?, &r));
    p.check("pr_task", &store, &pr_t, Target::Input, as_task)?;
    p.check("pr_domain", &store, &pr_d, Target::Input, as_domain)?;
    p.check_params(&store, &pr_t, as_task)
}

fn check_agf(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut store = ParamStore::new();
    let site = GateSite::new(&mut store, "site", 8, 4, rng);
    store.set_value(site.attn.w_o, Tensor::randn(&[4, 4], 0.5, rng))?;
    store.set_value(site.raw_gate, Tensor::scalar(rng.random_range(-1.0..1.0)))?;
    let feat = Tensor::randn(&[4, 4, 4], 1.0, rng);
    let pr = Tensor::randn(&[2, 8], 1.0, rng);
    let r = Tensor::randn(&[64], 1.0, rng);
    let residual = rng.random_bool(0.5);
    let on_feature = hr(|t, s, x| project(gated_inject(Ctx::new(t, s), &site, x, t.constant(pr.clone())?, residual)?, &r));
    let on_prompt = hr(|t, s, x| project(gated_inject(Ctx::new(t, s), &site, t.constant(feat.clone())?, x, residual)?, &r));
    p.check("feature", &store, &feat, Target::Input, on_feature)?;
    p.check("pr_dt", &store, &pr, Target::Input, on_prompt)?;
    p.check_params(&store, &feat, on_feature)
}

fn tiny_model_config() -> ModelConfig {
    let pool = |k| PoolConfig {
        enabled: true,
        size: 4,
        top_k: k,
        temperature: 1.0,
    };
    ModelConfig {
        backbone: BackboneConfig {
            levels: 2,
            channels: vec![3, 5],
            blocks: 1,
        },
        dim: 6,
        tokens: 2,
        task_pool: pool(2),
        domain_pool: pool(3),
        residual_fusion: true,
        projector_activation: Activation::Silu,
    }
}

/// The complete per-sample objective through the whole network.
fn check_backbone(p: &mut Probe<'_>, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut model = Model::new(tiny_model_config(), rng)?;
    model.perturb_parameters(0.2, rng);
    // Distinct prompt tokens and sharp attention keep the fusion gradients
    // well above finite-difference roundoff.
    let retuned: Vec<(ParamId, Vec<usize>, f64)> = model
        .store
        .iter()
        .filter_map(|(id, p)| {
            let std = if p.name.ends_with("w_q") || p.name.ends_with("w_k") {
                0.5
            } else if p.name.starts_with("pools.") {
                1.0
            } else {
                return None;
            };
            Some((id, p.value.shape().to_vec(), std))
        })
        .collect();
    for (id, shape, std) in retuned {
        model.store.set_value(id, Tensor::randn(&shape, std, rng))?;
    }
    let lq = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, rng);
    let hq = Tensor::uniform(&[3, 4, 4], 0.0, 1.0, rng);
    let text = unit(Tensor::randn(&[6], 1.0, rng));
    let weights = LossWeights::default();
    let reg = RegularizerConfig::default();
    let m = &model;
    let f = hr(|t, s, x| {
        let ctx = Ctx::new(t, s);
        let out = m.forward(ctx, x)?;
        let terms = sample_terms(&out, t.constant(hq.clone())?, t.constant(text.clone())?, &reg)?;
        let mut loss = terms.weighted(&weights)?;
        let (dt, dd) = diversity_terms(ctx, m, &reg)?;
        for d in [dt, dd].into_iter().flatten() {
            loss = loss.add(d.scale(weights.div)?)?;
        }
        Ok(loss)
    });
    p.check("lq", &model.store, &lq, Target::Input, f)?;
    p.check_params(&model.store, &lq, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fault_rejected() {
        assert!(fault_op("conv2d").is_ok());
        assert!(fault_op("conv3d").is_err());
    }
}
