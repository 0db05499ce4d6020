//! Deterministic synthetic multi-domain restoration data and the surrogate
//! text-feature oracle.
//!
//! Three image domains are imitated procedurally:
//!
//! * natural-like: band-limited random Fourier texture in full colour
//! * medical-like: soft elliptical blobs on a dark ground, one channel tripled
//! * remote-like: softened tile mosaic with smooth shading and two-pixel roads
//!
//! Each domain owns a unit "anchor" vector; a sample's text feature is the
//! normalised sum of its domain anchor, a small per-task offset and isotropic
//! jitter. It stands in for an encoded image description.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Natural,
    Medical,
    Remote,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::Natural, Domain::Medical, Domain::Remote];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Natural => "natural",
            Domain::Medical => "medical",
            Domain::Remote => "remote",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| Error::invalid("domain", format!("unknown domain {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Noise,
    Blur,
    Streak,
    Downsample,
    Mask,
    Haze,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Noise,
        TaskKind::Blur,
        TaskKind::Streak,
        TaskKind::Downsample,
        TaskKind::Mask,
        TaskKind::Haze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Noise => "noise",
            TaskKind::Blur => "blur",
            TaskKind::Streak => "streak",
            TaskKind::Downsample => "downsample",
            TaskKind::Mask => "mask",
            TaskKind::Haze => "haze",
        }
    }

    pub fn index(self) -> usize {
        TaskKind::ALL.iter().position(|&t| t == self).expect("listed")
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid("task", format!("unknown task {s:?}")))
    }
}

/// Degradation parameters for every task kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Streaks per 32×32 area.
    pub streak_count: usize,
    pub streak_intensity: f64,
    pub downsample_scale: usize,
    /// Fraction of the image covered by zeroed patches.
    pub mask_density: f64,
    pub haze_transmission: f64,
    pub haze_airlight: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams {
            noise_sigma: 0.1,
            blur_sigma: 1.2,
            streak_count: 8,
            streak_intensity: 0.5,
            downsample_scale: 2,
            mask_density: 0.15,
            haze_transmission: 0.7,
            haze_airlight: 0.8,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.noise_sigma >= 0.0
            && self.blur_sigma >= 0.0
            && self.streak_intensity >= 0.0
            && self.downsample_scale >= 1
            && (0.0..=1.0).contains(&self.mask_density)
            && (0.0..=1.0).contains(&self.haze_transmission)
            && (0.0..=1.0).contains(&self.haze_airlight);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("task params", format!("{self:?}")))
        }
    }
}

/// One degradation applied to high-quality images.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub params: TaskParams,
}

/// A domain, the tasks trained on it and its surrogate text anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub domain: Domain,
    pub tasks: Vec<TaskKind>,
    pub anchor: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub lq: Tensor,
    pub hq: Tensor,
    pub domain: Domain,
    pub task: TaskKind,
    pub text_feature: Tensor,
}

/// Largest allowed pairwise cosine between domain anchors.
pub const MAX_ANCHOR_COSINE: f64 = 0.3;

/// Surrogate text encoder: domain anchors plus fixed per-task offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct TextOracle {
    pub dim: usize,
    pub anchors: Vec<(Domain, Vec<f64>)>,
    pub task_offsets: Vec<Vec<f64>>,
    /// Weight of the task offset (0 disables it).
    pub offset_scale: f64,
}

fn unit_normal(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl TextOracle {
    /// Draws anchors for all three domains (resampling until pairwise cosines
    /// fall below [`MAX_ANCHOR_COSINE`]) and one offset per task kind.
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid("text oracle", "dimension must be ≥ 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut anchors: Vec<(Domain, Vec<f64>)> = Vec::new();
        for d in Domain::ALL {
            let mut tries = 0;
            let anchor = loop {
                let cand = unit_normal(dim, &mut rng);
                if anchors.iter().all(|(_, a)| cosine(a, &cand) < MAX_ANCHOR_COSINE) {
                    break cand;
                }
                tries += 1;
                if tries > 10_000 {
                    return Err(Error::invalid("text oracle", "could not separate domain anchors"));
                }
            };
            anchors.push((d, anchor));
        }
        let task_offsets = TaskKind::ALL.iter().map(|_| unit_normal(dim, &mut rng)).collect();
        Ok(TextOracle {
            dim,
            anchors,
            task_offsets,
            offset_scale: 0.2,
        })
    }

    pub fn anchor(&self, domain: Domain) -> &[f64] {
        &self
            .anchors
            .iter()
            .find(|(d, _)| *d == domain)
            .expect("every domain has an anchor")
            .1
    }

    /// `normalize(anchor + s·offset_task + jitter·ε)`, `ε ~ N(0, I/d)`.
    pub fn text_feature<R: Rng + ?Sized>(&self, domain: Domain, task: TaskKind, rng: &mut R, jitter: f64) -> Result<Tensor> {
        if !(jitter >= 0.0) {
            return Err(Error::invalid("text_feature", "jitter must be ≥ 0"));
        }
        let normal = Normal::new(0.0, 1.0 / (self.dim as f64).sqrt()).expect("valid normal");
        let offset = &self.task_offsets[task.index()];
        let mut v: Vec<f64> = self
            .anchor(domain)
            .iter()
            .zip(offset)
            .map(|(a, o)| a + self.offset_scale * o)
            .collect();
        if jitter > 0.0 {
            v.iter_mut().for_each(|x| *x += jitter * normal.sample(rng));
        }
        normalize(&mut v);
        Ok(Tensor::vector(v))
    }
}

fn check_size(size: usize) -> Result<()> {
    if size < 4 {
        return Err(Error::invalid("generate_hq", format!("image size {size} too small")));
    }
    Ok(())
}

fn clamp01(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Draws a clean `3 × size × size` image of the given domain.
pub fn generate_hq<R: Rng + ?Sized>(domain: Domain, size: usize, rng: &mut R) -> Result<Tensor> {
    check_size(size)?;
    let mut img = match domain {
        Domain::Natural => natural_texture(size, rng),
        Domain::Medical => medical_blobs(size, rng),
        Domain::Remote => remote_mosaic(size, rng),
    };
    clamp01(&mut img);
    Ok(img)
}

fn natural_texture<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let n = size * size;
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let waves: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    let freq = rng.random_range(0.02..0.12);
                    let theta = rng.random_range(0.0..PI);
                    let phase = rng.random_range(0.0..2.0 * PI);
                    (freq * theta.cos(), freq * theta.sin(), phase)
                })
                .collect();
            (0..n)
                .map(|i| {
                    let (y, x) = ((i / size) as f64, (i % size) as f64);
                    waves
                        .iter()
                        .map(|(fx, fy, p)| (2.0 * PI * (fx * x + fy * y) + p).cos())
                        .sum::<f64>()
                        / 6f64.sqrt()
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        let base = rng.random_range(0.35..0.65);
        let mix: Vec<f64> = (0..3).map(|_| rng.random_range(-0.2..0.2)).collect();
        for i in 0..n {
            let v: f64 = (0..3).map(|m| mix[m] * fields[m][i]).sum();
            data[c * n + i] = base + v + 0.12 * fields[c][i];
        }
    }
    Tensor::new(&[3, size, size], data).expect("shape")
}

fn medical_blobs<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let n = size * size;
    let count = 3 + (size * size) / 160;
    let s = size as f64;
    let blobs: Vec<[f64; 6]> = (0..count)
        .map(|_| {
            [
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(0.15 * s..0.85 * s),
                rng.random_range(1.5..6.0),
                rng.random_range(1.5..6.0),
                rng.random_range(0.0..PI),
                rng.random_range(0.25..0.7),
            ]
        })
        .collect();
    let ground = rng.random_range(0.03..0.1);
    let mut plane = vec![ground; n];
    for (i, p) in plane.iter_mut().enumerate() {
        let (y, x) = ((i / size) as f64, (i % size) as f64);
        for &[cy, cx, ry, rx, rot, amp] in &blobs {
            let (dy, dx) = (y - cy, x - cx);
            let u = dx * rot.cos() + dy * rot.sin();
            let v = -dx * rot.sin() + dy * rot.cos();
            *p += amp * (-(u * u / (rx * rx) + v * v / (ry * ry))).exp();
        }
    }
    let mut data = plane.clone();
    data.extend_from_slice(&plane);
    data.extend_from_slice(&plane);
    Tensor::new(&[3, size, size], data).expect("shape")
}

const REMOTE_PALETTE: [[f64; 3]; 5] = [
    [0.25, 0.45, 0.2],
    [0.45, 0.6, 0.3],
    [0.55, 0.45, 0.3],
    [0.6, 0.6, 0.58],
    [0.35, 0.35, 0.4],
];

fn cut_points<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Vec<usize> {
    let mut cuts = Vec::new();
    let mut pos = rng.random_range(1..6);
    while pos < size {
        cuts.push(pos);
        pos += rng.random_range(3..9);
    }
    cuts
}

/// Optical point-spread applied to mosaics so field edges are a few pixels wide.
const REMOTE_PSF_SIGMA: f64 = 0.8;

fn remote_mosaic<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor {
    let n = size * size;
    let rows = cut_points(size, rng);
    let cols = cut_points(size, rng);
    let cell = |cuts: &[usize], v: usize| cuts.iter().filter(|&&c| c <= v).count();
    let tiles = (rows.len() + 1) * (cols.len() + 1);
    let tile_color: Vec<([f64; 3], f64, f64)> = (0..tiles)
        .map(|_| {
            let base = REMOTE_PALETTE[rng.random_range(0..REMOTE_PALETTE.len())];
            let shift = rng.random_range(-0.06..0.06);
            let color = [base[0] + shift, base[1] + shift, base[2] + shift];
            (color, rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01))
        })
        .collect();
    let road_row = rng.random_range(0..size - 1);
    let road_col = rng.random_range(0..size - 1);
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let t = cell(&rows, y) * (cols.len() + 1) + cell(&cols, x);
            let (color, gy, gx) = tile_color[t];
            let shade = gy * (y as f64 - size as f64 / 2.0) + gx * (x as f64 - size as f64 / 2.0);
            let road = (road_row..road_row + 2).contains(&y) || (road_col..road_col + 2).contains(&x);
            for c in 0..3 {
                data[c * n + y * size + x] = if road { 0.85 } else { color[c] + shade };
            }
        }
    }
    gaussian_blur(&Tensor::new(&[3, size, size], data).expect("shape"), REMOTE_PSF_SIGMA)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let off = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[off + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * src[off + y * w + reflect(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[off + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[off + reflect(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(img.shape(), out).expect("shape")
}

/// Applies one degradation; the result keeps the input shape and lies in [0, 1].
pub fn degrade<R: Rng + ?Sized>(hq: &Tensor, task: &TaskSpec, rng: &mut R) -> Result<Tensor> {
    task.params.validate()?;
    if hq.rank() != 3 {
        return Err(Error::invalid("degrade", format!("expects c × h × w, got {:?}", hq.shape())));
    }
    let p = &task.params;
    let (c, h, w) = (hq.shape()[0], hq.shape()[1], hq.shape()[2]);
    let mut lq = match task.kind {
        TaskKind::Noise => {
            let mut lq = hq.clone();
            if p.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, p.noise_sigma).expect("valid sigma");
                lq.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
            }
            lq
        }
        TaskKind::Blur => gaussian_blur(hq, p.blur_sigma),
        TaskKind::Streak => {
            let mut lq = hq.clone();
            let count = (p.streak_count * h * w).div_ceil(32 * 32);
            let angle = rng.random_range(0.35 * PI..0.65 * PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            for _ in 0..count {
                let len = rng.random_range(6.0..14.0);
                let (x0, y0) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
                let amp = p.streak_intensity * rng.random_range(0.6..1.0);
                let steps = len as usize * 2;
                let mut last = None;
                for s in 0..steps {
                    let t = s as f64 * 0.5;
                    let (x, y) = ((x0 + t * dx).round(), (y0 + t * dy).round());
                    if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
                        continue;
                    }
                    let px = (y as usize, x as usize);
                    if last == Some(px) {
                        continue;
                    }
                    last = Some(px);
                    for ch in 0..c {
                        lq.data_mut()[(ch * h + px.0) * w + px.1] += amp;
                    }
                }
            }
            lq
        }
        TaskKind::Downsample => {
            let s = p.downsample_scale;
            if h % s != 0 || w % s != 0 {
                return Err(Error::invalid(
                    "degrade",
                    format!("size {h}×{w} not divisible by scale {s}"),
                ));
            }
            let mut lq = hq.clone();
            let src = hq.data();
            let dst = lq.data_mut();
            for ch in 0..c {
                for by in 0..h / s {
                    for bx in 0..w / s {
                        let mut mean = 0.0;
                        for y in 0..s {
                            for x in 0..s {
                                mean += src[(ch * h + by * s + y) * w + bx * s + x];
                            }
                        }
                        mean /= (s * s) as f64;
                        for y in 0..s {
                            for x in 0..s {
                                dst[(ch * h + by * s + y) * w + bx * s + x] = mean;
                            }
                        }
                    }
                }
            }
            lq
        }
        TaskKind::Mask => {
            let mut lq = hq.clone();
            let target = (p.mask_density * (h * w) as f64).round() as usize;
            let mut hidden = vec![false; h * w];
            let mut covered = 0;
            let mut guard = 0;
            while covered < target && guard < 10_000 {
                guard += 1;
                let ph = rng.random_range(3..7).min(h);
                let pw = rng.random_range(3..7).min(w);
                let y0 = rng.random_range(0..=h - ph);
                let x0 = rng.random_range(0..=w - pw);
                for y in y0..y0 + ph {
                    for x in x0..x0 + pw {
                        if !hidden[y * w + x] {
                            hidden[y * w + x] = true;
                            covered += 1;
                        }
                    }
                }
            }
            for ch in 0..c {
                for (i, &m) in hidden.iter().enumerate() {
                    if m {
                        lq.data_mut()[ch * h * w + i] = 0.0;
                    }
                }
            }
            lq
        }
        TaskKind::Haze => hq.map(|v| p.haze_transmission * v + (1.0 - p.haze_transmission) * p.haze_airlight),
    };
    clamp01(&mut lq);
    Ok(lq)
}

/// Roster plus generators: everything needed to draw training and eval samples.
#[derive(Clone, Debug)]
pub struct SyntheticSuite {
    pub domains: Vec<DomainSpec>,
    pub params: TaskParams,
    pub oracle: TextOracle,
    pub jitter: f64,
}

impl SyntheticSuite {
    pub fn new(roster: &[(Domain, Vec<TaskKind>)], params: TaskParams, dim: usize, anchor_seed: u64, jitter: f64) -> Result<Self> {
        if roster.is_empty() || roster.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::invalid("suite", "every domain needs at least one task"));
        }
        params.validate()?;
        let oracle = TextOracle::new(dim, anchor_seed)?;
        let domains = roster
            .iter()
            .map(|(d, tasks)| DomainSpec {
                domain: *d,
                tasks: tasks.clone(),
                anchor: oracle.anchor(*d).to_vec(),
            })
            .collect();
        Ok(SyntheticSuite {
            domains,
            params,
            oracle,
            jitter,
        })
    }

    /// (domain, task) cells in roster order.
    pub fn cells(&self) -> Vec<(Domain, TaskKind)> {
        self.domains
            .iter()
            .flat_map(|d| d.tasks.iter().map(move |&t| (d.domain, t)))
            .collect()
    }

    pub fn task_spec(&self, kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            params: self.params.clone(),
        }
    }

    /// One sample drawn entirely from `seed`.
    pub fn sample(&self, domain: Domain, task: TaskKind, size: usize, seed: u64) -> Result<SyntheticSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hq = generate_hq(domain, size, &mut rng)?;
        let lq = degrade(&hq, &self.task_spec(task), &mut rng)?;
        let text_feature = self.oracle.text_feature(domain, task, &mut rng, self.jitter)?;
        Ok(SyntheticSample {
            lq,
            hq,
            domain,
            task,
            text_feature,
        })
    }

    /// Domain-balanced batch: per-domain counts differ by at most one, the
    /// domains receiving the extra samples rotate with a seeded offset, and
    /// tasks are uniform within each domain.
    pub fn balanced_batch<R: Rng + ?Sized>(&self, batch_size: usize, size: usize, rng: &mut R) -> Result<Vec<SyntheticSample>> {
        let nd = self.domains.len();
        if batch_size < nd {
            return Err(Error::invalid(
                "balanced_batch",
                format!("batch of {batch_size} cannot cover {nd} domains"),
            ));
        }
        let offset = rng.random_range(0..nd);
        (0..batch_size)
            .map(|i| {
                let spec = &self.domains[(offset + i) % nd];
                let task = spec.tasks[rng.random_range(0..spec.tasks.len())];
                let seed: u64 = rng.random();
                self.sample(spec.domain, task, size, seed)
            })
            .collect()
    }

    /// Fixed evaluation samples, `per_cell` for every (domain, task) cell.
    pub fn eval_set(&self, size: usize, per_cell: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for (d, t) in self.cells() {
            for _ in 0..per_cell {
                let s: u64 = rng.random();
                out.push(self.sample(d, t, size, s)?);
            }
        }
        Ok(out)
    }
}

/// Writes a `3 × h × w` image in [0, 1] as a binary portable pixmap (P6).
pub fn write_ppm(path: &Path, img: &Tensor) -> Result<()> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::invalid("write_ppm", format!("expects 3 × h × w, got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = img.data()[(c * h + y) * w + x].clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
