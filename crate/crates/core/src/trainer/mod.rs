//! Training loop, evaluation and persistence.

pub mod checkpoint;
pub mod losses;
pub mod metrics;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardDiagnostics, Model, ModelConfig};
use crate::data::{Domain, SyntheticSample, SyntheticSuite, TaskKind, TaskParams};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::regularizers::RegularizerConfig;
use crate::tensor::{normwise_error, Tape, Tensor};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use losses::{diversity_terms, reconstruction_losses, sample_terms, LossBreakdown, LossWeights, SampleTerms};
pub use metrics::{mse, psnr, ssim, ssim_with_peak, PSNR_CAP_DB};
pub use optim::{adam_update, clip_grad_norm, grad_norm, lr_schedule, Adam, OptimConfig};

/// Stream of the data RNG; model initialisation uses stream 0 of the same seed.
const DATA_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub roster: Vec<(Domain, Vec<TaskKind>)>,
    pub params: TaskParams,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_per_cell: usize,
    pub eval_seed: u64,
    pub jitter: f64,
    pub anchor_seed: u64,
}

impl DataConfig {
    /// Three domains with two tasks each: super-resolution everywhere, plus
    /// streak removal (natural), denoising (medical) and inpainting (remote).
    pub fn default_roster() -> Vec<(Domain, Vec<TaskKind>)> {
        vec![
            (Domain::Natural, vec![TaskKind::Downsample, TaskKind::Streak]),
            (Domain::Medical, vec![TaskKind::Downsample, TaskKind::Noise]),
            (Domain::Remote, vec![TaskKind::Downsample, TaskKind::Mask]),
        ]
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            roster: DataConfig::default_roster(),
            params: TaskParams::default(),
            train_size: 32,
            eval_size: 64,
            eval_per_cell: 8,
            eval_seed: 1234,
            jitter: 0.1,
            anchor_seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub weights: LossWeights,
    pub regularizers: RegularizerConfig,
    pub optim: OptimConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many steps (0: only when asked).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            weights: LossWeights::default(),
            regularizers: RegularizerConfig::default(),
            optim: OptimConfig::default(),
            steps: 2000,
            batch_size: 12,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.regularizers.validate()?;
        self.optim.validate()?;
        self.data.params.validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("train config", "steps must be ≥ 1"));
        }
        if self.batch_size < self.data.roster.len() {
            return Err(Error::invalid(
                "train config",
                format!("batch {} smaller than {} domains", self.batch_size, self.data.roster.len()),
            ));
        }
        let m = self.model.backbone.size_multiple();
        for size in [self.data.train_size, self.data.eval_size] {
            if size % m != 0 || size < 4 {
                return Err(Error::invalid("train config", format!("image size {size} must be a multiple of {m}")));
            }
        }
        Ok(())
    }

    pub fn suite(&self) -> Result<SyntheticSuite> {
        SyntheticSuite::new(
            &self.data.roster,
            self.data.params.clone(),
            self.model.dim,
            self.data.anchor_seed,
            self.data.jitter,
        )
    }
}

/// Everything recorded for one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// The optimised scalar (batch mean of the per-sample objective plus diversity).
    pub total: f64,
    pub terms: LossBreakdown,
    pub grad_norm: f64,
    pub gates: Vec<f64>,
    /// Selection counts per prompt over the batch.
    pub task_selection: Vec<usize>,
    pub domain_selection: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub domain: Domain,
    pub task: TaskKind,
    pub psnr_db: f64,
    pub ssim: f64,
    pub n: usize,
}

/// Mean PSNR / SSIM per (domain, task) cell, cells in first-seen order.
pub fn evaluate_with<F>(samples: &[SyntheticSample], mut restore: F) -> Result<Vec<CellMetrics>>
where
    F: FnMut(&SyntheticSample) -> Result<Tensor>,
{
    let mut cells: Vec<CellMetrics> = Vec::new();
    for s in samples {
        let out = restore(s)?;
        let p = psnr(&out, &s.hq, 1.0)?;
        let q = ssim(&out, &s.hq)?;
        match cells.iter_mut().find(|c| c.domain == s.domain && c.task == s.task) {
            Some(c) => {
                c.psnr_db += p;
                c.ssim += q;
                c.n += 1;
            }
            None => cells.push(CellMetrics {
                domain: s.domain,
                task: s.task,
                psnr_db: p,
                ssim: q,
                n: 1,
            }),
        }
    }
    for c in &mut cells {
        c.psnr_db /= c.n as f64;
        c.ssim /= c.n as f64;
    }
    Ok(cells)
}

/// Metrics of the identity restorer (`restored = lq`).
pub fn identity_metrics(samples: &[SyntheticSample]) -> Result<Vec<CellMetrics>> {
    evaluate_with(samples, |s| Ok(s.lq.clone()))
}

/// One finite-difference probe of the training objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest analytic gradient magnitude in the probed tensor.
    pub scale: f64,
    /// `|analytic - numeric|` relative to `scale`.
    pub rel_err: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub suite: SyntheticSuite,
    rng: ChaCha8Rng,
    step: usize,
}

fn count_into(hist: &mut [usize], indices: &[usize]) {
    for &i in indices {
        hist[i] += 1;
    }
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(config.model.clone(), &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        let adam = Adam::new(&model.store, &config.optim);
        let suite = config.suite()?;
        Ok(Trainer {
            config,
            model,
            adam,
            suite,
            rng,
            step: 0,
        })
    }

    /// Steps completed so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn data_rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn next_batch(&mut self) -> Result<Vec<SyntheticSample>> {
        self.suite
            .balanced_batch(self.config.batch_size, self.config.data.train_size, &mut self.rng)
    }

    /// Zeroes the gradients, then accumulates those of the batch objective.
    /// Samples are processed in order so the reduction is deterministic.
    pub fn accumulate_gradients(&mut self, batch: &[SyntheticSample]) -> Result<(f64, LossBreakdown, Vec<ForwardDiagnostics>)> {
        self.model.store.zero_grad();
        let inv_b = 1.0 / batch.len() as f64;
        let w = self.config.weights;
        let reg = self.config.regularizers;
        let mut total = 0.0;
        let mut terms = LossBreakdown::default();
        let mut diags = Vec::with_capacity(batch.len());
        for s in batch {
            let grads = {
                let tape = Tape::new();
                let ctx = Ctx::new(&tape, &self.model.store);
                let out = self.model.forward(ctx, tape.constant(s.lq.clone())?)?;
                let st = sample_terms(&out, tape.constant(s.hq.clone())?, tape.constant(s.text_feature.clone())?, &reg)?;
                let loss = st.weighted(&w)?.scale(inv_b)?;
                total += loss.item();
                terms.add_scaled(&st.values(), inv_b);
                diags.push(out.diagnostics.clone());
                tape.backward(loss)?
            };
            grads.accumulate_into(&mut self.model.store);
        }
        let grads = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.model.store);
            match diversity_terms(ctx, &self.model, &reg)? {
                (None, None) => None,
                (dt, dd) => {
                    terms.div_task = dt.map_or(0.0, |v| v.item());
                    terms.div_domain = dd.map_or(0.0, |v| v.item());
                    let parts: Vec<_> = [dt, dd].into_iter().flatten().collect();
                    let mut loss = parts[0];
                    for p in &parts[1..] {
                        loss = loss.add(*p)?;
                    }
                    let loss = loss.scale(w.div)?;
                    total += loss.item();
                    Some(tape.backward(loss)?)
                }
            }
        };
        if let Some(g) = grads {
            g.accumulate_into(&mut self.model.store);
        }
        Ok((total, terms, diags))
    }

    /// Forward-only value of the batch objective.
    pub fn objective(&self, batch: &[SyntheticSample]) -> Result<f64> {
        let inv_b = 1.0 / batch.len() as f64;
        let w = self.config.weights;
        let reg = self.config.regularizers;
        let mut total = 0.0;
        for s in batch {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.model.store);
            let out = self.model.forward(ctx, tape.constant(s.lq.clone())?)?;
            let st = sample_terms(&out, tape.constant(s.hq.clone())?, tape.constant(s.text_feature.clone())?, &reg)?;
            total += st.weighted(&w)?.scale(inv_b)?.item();
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.model.store);
        let (dt, dd) = diversity_terms(ctx, &self.model, &reg)?;
        let div: Vec<f64> = [dt, dd].into_iter().flatten().map(|v| v.item()).collect();
        if !div.is_empty() {
            total += w.div * div.iter().sum::<f64>();
        }
        Ok(total)
    }

    /// Runs one optimisation step and returns its record.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        self.train_step_inner(step).map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })
    }

    fn train_step_inner(&mut self, step: usize) -> Result<StepRecord> {
        if step > self.config.steps {
            return Err(Error::invalid(
                "train_step",
                format!("configured for {} steps", self.config.steps),
            ));
        }
        let o = self.config.optim;
        let lr = lr_schedule(step - 1, self.config.steps, o.lr_init, o.lr_min)?;
        let batch = self.next_batch()?;
        let (total, terms, diags) = self.accumulate_gradients(&batch)?;
        let norm = clip_grad_norm(&mut self.model.store, o.grad_clip);
        self.adam.step(&mut self.model.store, lr)?;
        self.step = step;

        let mut task_selection = vec![0; self.model.task.as_ref().map_or(0, |b| b.pool.size)];
        let mut domain_selection = vec![0; self.model.domain.as_ref().map_or(0, |b| b.pool.size)];
        for d in &diags {
            if let Some(s) = &d.task_selection {
                count_into(&mut task_selection, &s.indices);
            }
            if let Some(s) = &d.domain_selection {
                count_into(&mut domain_selection, &s.indices);
            }
        }
        Ok(StepRecord {
            step,
            lr,
            total,
            terms,
            grad_norm: norm,
            gates: self.model.gate_values(),
            task_selection,
            domain_selection,
        })
    }

    /// Trains until `until` steps are complete, handing each record to `on_step`.
    pub fn run<F>(&mut self, until: usize, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepRecord) -> Result<()>,
    {
        let until = until.min(self.config.steps);
        while self.step < until {
            let rec = self.train_step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn eval_set(&self) -> Result<Vec<SyntheticSample>> {
        let d = &self.config.data;
        self.suite.eval_set(d.eval_size, d.eval_per_cell, d.eval_seed)
    }

    /// Evaluates without touching parameters, optimiser or data stream.
    pub fn evaluate(&self, samples: &[SyntheticSample]) -> Result<Vec<CellMetrics>> {
        evaluate_with(samples, |s| Ok(self.model.restore(&s.lq)?.0))
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        Checkpoint {
            config: config_text.to_owned(),
            step: self.step as u64,
            rng: RngState::capture(&self.rng),
            params: self
                .model
                .store
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            adam_t: self.adam.t,
            moments: self.adam.m.iter().cloned().zip(self.adam.v.iter().cloned()).collect(),
        }
    }

    /// Rebuilds a trainer from `config` and overwrites its state from `ckpt`.
    /// Every checkpoint entry must match the model's name and shape table.
    pub fn from_checkpoint(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        let store = &mut t.model.store;
        if ckpt.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter entries, model expects {}",
                ckpt.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for ((id, name, shape), (cname, value)) in ids.into_iter().zip(&ckpt.params) {
            if &name != cname {
                return Err(Error::Checkpoint(format!("entry {cname}: model expects {name} at this position")));
            }
            if shape.as_slice() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "entry {name}: checkpoint shape {:?}, model shape {shape:?}",
                    value.shape()
                )));
            }
            store.set_value(id, value.clone())?;
        }
        let steps = usize::try_from(ckpt.step).map_err(|_| Error::Checkpoint("step out of range".into()))?;
        if steps > t.config.steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint at step {steps} beyond configured {} steps",
                t.config.steps
            )));
        }
        t.adam.t = ckpt.adam_t;
        t.adam.m = ckpt.moments.iter().map(|(m, _)| m.clone()).collect();
        t.adam.v = ckpt.moments.iter().map(|(_, v)| v.clone()).collect();
        t.rng = ckpt.rng.restore();
        t.step = steps;
        Ok(t)
    }

    /// Finite-difference probe of one random scalar in every parameter group
    /// (names up to their second dot), against the batch objective.
    pub fn gradient_audit<R: Rng + ?Sized>(&mut self, batch: &[SyntheticSample], eps: f64, rng: &mut R) -> Result<Vec<AuditEntry>> {
        self.accumulate_gradients(batch)?;
        let mut groups: Vec<(String, Vec<crate::tensor::ParamId>)> = Vec::new();
        for (id, p) in self.model.store.iter() {
            let group: String = p.name.split('.').take(2).collect::<Vec<_>>().join(".");
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((group, vec![id])),
            }
        }
        let mut probes = Vec::new();
        for (_, ids) in &groups {
            let id = ids[rng.random_range(0..ids.len())];
            let index = rng.random_range(0..self.model.store.value(id).numel());
            let grad = &self.model.store.get(id).grad;
            let scale = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
            probes.push((id, index, grad.data()[index], scale));
        }
        let mut out = Vec::new();
        for (id, index, analytic, scale) in probes {
            let orig = self.model.store.value(id).data()[index];
            let eval_at = |v: f64, t: &mut Trainer| -> Result<f64> {
                t.model.store.get_mut(id).value.data_mut()[index] = v;
                t.objective(batch)
            };
            let plus = eval_at(orig + eps, self)?;
            let minus = eval_at(orig - eps, self)?;
            self.model.store.get_mut(id).value.data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            out.push(AuditEntry {
                param: self.model.store.get(id).name.clone(),
                index,
                analytic,
                numeric,
                scale,
                rel_err: normwise_error(analytic, numeric, scale),
            });
        }
        self.model.store.zero_grad();
        Ok(out)
    }
}
