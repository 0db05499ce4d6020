//! Plain-text run configuration.
//!
//! ```text
//! # comment
//! [trainer]
//! steps = 2000
//! [pools]
//! task.N = 8
//! ```
//!
//! Keys are addressed as `section.key` (`trainer.steps`, `pools.task.N`).
//! Unknown keys and duplicates are rejected with their line number. Every key
//! has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use datprl_core::data::{Domain, TaskKind};
use datprl_core::nn::Activation;
use datprl_core::trainer::TrainConfig;
use datprl_core::{Error, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DATPRL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Probe each parameter group by finite differences once per run.
    pub grad_audit: bool,
    /// Run directory; empty means `<output root>/run-<seed>`.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            grad_audit: true,
            output_dir: String::new(),
        }
    }
}

trait Value: Sized {
    fn render(&self) -> String;
    fn parse(s: &str) -> std::result::Result<Self, String>;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn render(&self) -> String {
                self.to_string()
            }
            fn parse(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))
            }
        }
    )*};
}

from_str_value!(usize, u64, bool, String);

impl Value for f64 {
    fn render(&self) -> String {
        format!("{self:?}")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("cannot parse {s:?}: {e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("{s:?} is not finite"))
        }
    }
}

impl Value for Vec<usize> {
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| usize::parse(p.trim())).collect()
    }
}

impl Value for Activation {
    fn render(&self) -> String {
        match self {
            Activation::Silu => "silu".into(),
            Activation::Identity => "identity".into(),
        }
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            _ => Err(format!("unknown activation {s:?} (silu, identity)")),
        }
    }
}

/// `natural:downsample+streak;medical:downsample+noise`.
impl Value for Vec<(Domain, Vec<TaskKind>)> {
    fn render(&self) -> String {
        self.iter()
            .map(|(d, ts)| format!("{d}:{}", ts.iter().map(|t| t.as_str()).collect::<Vec<_>>().join("+")))
            .collect::<Vec<_>>()
            .join(";")
    }
    fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut out: Vec<(Domain, Vec<TaskKind>)> = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (d, ts) = part
                .split_once(':')
                .ok_or_else(|| format!("roster entry {part:?} is not domain:task+task"))?;
            let d: Domain = d.trim().parse().map_err(|e: Error| e.to_string())?;
            if out.iter().any(|(x, _)| *x == d) {
                return Err(format!("domain {d} listed twice"));
            }
            let mut tasks = Vec::new();
            for t in ts.split('+') {
                let t: TaskKind = t.trim().parse().map_err(|e: Error| e.to_string())?;
                if tasks.contains(&t) {
                    return Err(format!("task {t} listed twice for {d}"));
                }
                tasks.push(t);
            }
            out.push((d, tasks));
        }
        if out.is_empty() {
            return Err("roster is empty".into());
        }
        Ok(out)
    }
}

struct Field {
    key: &'static str,
    doc: &'static str,
    get: fn(&RunConfig) -> String,
    set: fn(&mut RunConfig, &str) -> std::result::Result<(), String>,
}

macro_rules! field {
    ($key:literal, $doc:literal, $($path:ident).+) => {
        Field {
            key: $key,
            doc: $doc,
            get: |c| Value::render(&c.$($path).+),
            set: |c, v| {
                c.$($path).+ = Value::parse(v)?;
                Ok(())
            },
        }
    };
}

const FIELDS: &[Field] = &[
    field!("backbone.blocks", "residual conv blocks per level", train.model.backbone.blocks),
    field!("backbone.channels", "channel width per level, comma separated", train.model.backbone.channels),
    field!("backbone.levels", "U-Net levels (spatial sizes must divide 2^(levels-1))", train.model.backbone.levels),
    field!("data.anchor_seed", "seed of the domain anchors and task offsets", train.data.anchor_seed),
    field!("data.blur_sigma", "Gaussian blur sigma in pixels", train.data.params.blur_sigma),
    field!("data.downsample_scale", "average-pool factor of the downsample task", train.data.params.downsample_scale),
    field!("data.eval_per_cell", "eval samples per (domain, task) cell", train.data.eval_per_cell),
    field!("data.eval_seed", "seed of the fixed eval set", train.data.eval_seed),
    field!("data.eval_size", "eval image side", train.data.eval_size),
    field!("data.haze_airlight", "haze airlight", train.data.params.haze_airlight),
    field!("data.haze_transmission", "haze transmission t", train.data.params.haze_transmission),
    field!("data.jitter", "text-feature jitter", train.data.jitter),
    field!("data.mask_density", "fraction of pixels zeroed by the mask task", train.data.params.mask_density),
    field!("data.noise_sigma", "additive Gaussian noise sigma", train.data.params.noise_sigma),
    field!("data.roster", "domain:task+task;... training roster", train.data.roster),
    field!("data.streak_count", "streaks per 32x32 area", train.data.params.streak_count),
    field!("data.streak_intensity", "streak brightness", train.data.params.streak_intensity),
    field!("data.train_size", "training image side", train.data.train_size),
    field!("fusion.residual", "residual connection around each gated injection", train.model.residual_fusion),
    field!("loss.align", "weight of the text alignment loss", train.weights.align),
    field!("loss.bal", "weight of the balance loss (per pool)", train.weights.bal),
    field!("loss.con", "weight of the contrastive loss (per pool)", train.weights.con),
    field!("loss.div", "weight of the diversity loss (per pool)", train.weights.div),
    field!("loss.fft", "weight of the Fourier-domain L1 loss", train.weights.fft),
    field!("loss.pix", "weight of the pixel L1 loss", train.weights.pix),
    field!("loss.tau_con", "contrastive temperature", train.regularizers.tau_con),
    field!("loss.tau_div", "diversity hinge threshold", train.regularizers.tau_div),
    field!("optimizer.beta1", "Adam beta1", train.optim.beta1),
    field!("optimizer.beta2", "Adam beta2", train.optim.beta2),
    field!("optimizer.eps", "Adam epsilon", train.optim.eps),
    field!("optimizer.grad_clip", "global gradient-norm clip, 0 disables", train.optim.grad_clip),
    field!("optimizer.lr_init", "initial learning rate", train.optim.lr_init),
    field!("optimizer.lr_min", "final learning rate of the cosine schedule", train.optim.lr_min),
    field!("output.dir", "run directory (empty: <output root>/run-<seed>)", output_dir),
    field!("pools.dim", "prompt key / query dimension d", train.model.dim),
    field!("pools.domain.N", "domain pool size", train.model.domain_pool.size),
    field!("pools.domain.enabled", "use the domain prompt pool", train.model.domain_pool.enabled),
    field!("pools.domain.temperature", "composition softmax temperature", train.model.domain_pool.temperature),
    field!("pools.domain.topk", "prompts selected from the domain pool", train.model.domain_pool.top_k),
    field!("pools.projector_activation", "activation inside the query projectors", train.model.projector_activation),
    field!("pools.task.N", "task pool size", train.model.task_pool.size),
    field!("pools.task.enabled", "use the task prompt pool", train.model.task_pool.enabled),
    field!("pools.task.temperature", "composition softmax temperature", train.model.task_pool.temperature),
    field!("pools.task.topk", "prompts selected from the task pool", train.model.task_pool.top_k),
    field!("pools.tokens", "tokens per prompt value T", train.model.tokens),
    field!("trainer.batch_size", "samples per step, domain balanced", train.batch_size),
    field!("trainer.eval_every", "evaluate every n steps (0: at the end only)", train.eval_every),
    field!("trainer.grad_audit", "finite-difference audit of every parameter group once per run", grad_audit),
    field!("trainer.seed", "seed of initialisation and the data stream", train.seed),
    field!("trainer.steps", "optimisation steps", train.steps),
];

fn field(key: &str) -> Option<&'static Field> {
    FIELDS.iter().find(|f| f.key == key)
}

impl RunConfig {
    /// All keys with their documentation, sorted.
    pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
        FIELDS.iter().map(|f| (f.key, f.doc))
    }

    pub fn get(&self, key: &str) -> Option<String> {
        field(key).map(|f| (f.get)(self))
    }

    /// Sets one key; `line` is used in diagnostics (0 for command-line overrides).
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let f = field(key).ok_or_else(|| Error::Config {
            line,
            msg: format!("unknown key `{key}`"),
        })?;
        (f.set)(self, value.trim()).map_err(|msg| Error::Config {
            line,
            msg: format!("key `{key}`: {msg}"),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| Error::Config {
                    line,
                    msg: format!("malformed section header {content:?}"),
                })?;
                section = name.trim().to_owned();
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected `key = value`, got {content:?}"),
            })?;
            let k = k.trim();
            let key = if section.is_empty() { k.to_owned() } else { format!("{section}.{k}") };
            if seen.contains(&key) {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key `{key}`"),
                });
            }
            cfg.set(&key, v, line)?;
            seen.push(key);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
            line: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        RunConfig::parse(&text)
    }

    /// Applies `section.key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override {o:?} is not key=value"),
            })?;
            self.set(k.trim(), v, 0)?;
        }
        Ok(())
    }

    /// Canonical text: sections in key order, one `key = value` per line.
    pub fn to_canonical(&self) -> String {
        self.render(false)
    }

    /// Canonical text with each key's documentation as a comment.
    pub fn to_documented(&self) -> String {
        self.render(true)
    }

    fn render(&self, docs: bool) -> String {
        let mut out = String::new();
        let mut section = "";
        for f in FIELDS {
            let (sec, key) = f.key.split_once('.').expect("sectioned key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{sec}]");
                section = sec;
            }
            if docs {
                let _ = writeln!(out, "# {}", f.doc);
            }
            let _ = writeln!(out, "{key} = {}", (f.get)(self));
        }
        out
    }

    /// `output.dir`, or `<$DATPRL_OUTPUT_ROOT or ./runs>/run-<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        if !self.output_dir.is_empty() {
            return PathBuf::from(&self.output_dir);
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("run-{}", self.train.seed))
    }
}
