//! Task-conditioned generation of per-module LoRA factors.
//!
//! For task `k` and target module `m` the hypernetwork reads
//! `concat(e_k, P[m])` and runs it through a mixer, two residual MLP blocks
//! and an output projection to a shared latent of width `head_in`. Module
//! `m`'s own linear head then maps that latent to `r·(d_in + d_out)` values,
//! split B-first: the leading `r·d_in` entries are `B` (`d_in×r`, row-major),
//! the rest are `A` (`r×d_out`, row-major). The adapted linear computes
//! `y = x·W + b + (α/r)·(x·B)·A` without materializing `B·A`.
//!
//! Head weights start at zero. The bias segment producing `B` starts random
//! and the one producing `A` at zero, so at initialization every task shares
//! one `B`, every delta is exactly zero, and gradient still reaches `A`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};
use crate::vit::{ModuleDescriptor, TapeDeltas, TapeFactors};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperArch {
    /// Mixer, two residual blocks, output projection, per-module heads.
    Residual,
    /// Linear → SiLU → Linear → SiLU → per-module heads.
    Mlp3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub arch: HyperArch,
    pub task_embed_dim: usize,
    pub pos_embed_dim: usize,
    pub latent: usize,
    pub head_in: usize,
    /// Hidden width of the `mlp3` trunk.
    pub mlp_hidden: usize,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        HyperConfig {
            arch: HyperArch::Residual,
            task_embed_dim: 64,
            pos_embed_dim: 16,
            latent: 32,
            head_in: 64,
            mlp_hidden: 64,
            rank: 4,
            alpha: 4.0,
            dropout: 0.05,
        }
    }
}

impl HyperConfig {
    pub fn reference() -> Self {
        HyperConfig {
            arch: HyperArch::Residual,
            task_embed_dim: 512,
            pos_embed_dim: 64,
            latent: 128,
            head_in: 512,
            mlp_hidden: 64,
            rank: 16,
            alpha: 16.0,
            dropout: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("task_embed_dim", self.task_embed_dim),
            ("pos_embed_dim", self.pos_embed_dim),
            ("latent", self.latent),
            ("head_in", self.head_in),
            ("mlp_hidden", self.mlp_hidden),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("hyperlora.{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("hyperlora.dropout must lie in [0, 1)".into()));
        }
        if !(self.alpha / self.rank as f64).is_finite() {
            return Err(Error::Config("hyperlora.alpha / rank must be finite".into()));
        }
        Ok(())
    }

    /// Width of the latent fed to the per-module heads.
    pub fn head_input(&self) -> usize {
        match self.arch {
            HyperArch::Residual => self.head_in,
            HyperArch::Mlp3 => self.mlp_hidden,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One generated factor pair.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors<S: Real = f32> {
    /// `d_in × r`
    pub b: Tensor<S>,
    /// `r × d_out`
    pub a: Tensor<S>,
    pub rank: usize,
    pub alpha: f64,
}

impl<S: Real> LoraFactors<S> {
    pub fn new(b: Tensor<S>, a: Tensor<S>, alpha: f64) -> Result<Self> {
        let (bs, as_) = (b.shape(), a.shape());
        if bs.len() != 2 || as_.len() != 2 || bs[1] != as_[0] {
            return Err(Error::shape("lora factors", bs, as_));
        }
        let rank = bs[1];
        if rank == 0 || rank > bs[0].min(as_[1]) {
            return Err(Error::InvalidArgument(format!(
                "rank {rank} outside 1..=min({}, {})",
                bs[0], as_[1]
            )));
        }
        if !(alpha / rank as f64).is_finite() {
            return Err(Error::InvalidArgument("alpha / rank is not finite".into()));
        }
        Ok(LoraFactors { b, a, rank, alpha })
    }

    pub fn zeros(d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Self {
        LoraFactors {
            b: Tensor::zeros(&[d_in, rank]),
            a: Tensor::zeros(&[rank, d_out]),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn d_in(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn check_dims(&self, m: &ModuleDescriptor) -> Result<()> {
        if self.d_in() != m.d_in || self.d_out() != m.d_out {
            return Err(Error::shape(
                "lora delta",
                &[self.d_in(), self.d_out()],
                &[m.d_in, m.d_out],
            ));
        }
        Ok(())
    }

    /// Dense `(α/r)·B·A`, `d_in × d_out`.
    pub fn materialize(&self) -> Result<Tensor<S>> {
        Ok(tensor::matmul(&self.b, &self.a)?.scale(self.scale()))
    }
}

/// `y = x·W + b + (α/r)·(x·B)·A` for row-vector inputs `x: [n × d_in]`.
pub fn apply_delta<S: Real>(
    w: &Tensor<S>,
    bias: &Tensor<S>,
    f: &LoraFactors<S>,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (d_in, d_out) = w.dims2();
    if f.d_in() != d_in || f.d_out() != d_out || bias.numel() != d_out {
        return Err(Error::shape("apply_delta", w.shape(), &[f.d_in(), f.d_out()]));
    }
    let base = tensor::matmul(x, w)?;
    let side = tensor::matmul(&tensor::matmul(x, &f.b)?, &f.a)?;
    let scale = f.scale();
    let bd = bias.data();
    let data: Vec<f64> = base
        .data()
        .iter()
        .zip(side.data())
        .enumerate()
        .map(|(i, (y, s))| y.to_f64() + bd[i % d_out].to_f64() + scale * s.to_f64())
        .collect();
    Tensor::from_f64(base.shape(), &data)
}

/// Final-projection cost of generating one square `D×D` target through
/// LoRA factors: `d_h·D·2r`.
pub fn param_count_lora(d_h: u64, d: u64, r: u64) -> u64 {
    d_h * d * 2 * r
}

/// Final-projection cost of generating one full `D×D` matrix: `d_h·D²`.
pub fn param_count_full(d_h: u64, d: u64) -> u64 {
    d_h * d * d
}

const TASK_EMBED: &str = "task_embed";
const POS_EMBED: &str = "pos_embed";

#[derive(Clone, Debug)]
struct LinearPaths {
    w: String,
    b: String,
}

impl LinearPaths {
    fn new(prefix: &str) -> Self {
        LinearPaths {
            w: format!("{prefix}.weight"),
            b: format!("{prefix}.bias"),
        }
    }
}

#[derive(Clone, Debug)]
struct NormPaths {
    gamma: String,
    beta: String,
}

impl NormPaths {
    fn new(prefix: &str) -> Self {
        NormPaths {
            gamma: format!("{prefix}.gamma"),
            beta: format!("{prefix}.beta"),
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    norm: NormPaths,
    fc0: LinearPaths,
    fc1: LinearPaths,
}

/// How a parameter tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `N(0, std²)`.
    Normal(f64),
    /// Leading `count` entries `N(0, std²)`, the rest zero.
    LeadingNormal { count: usize, std: f64 },
}

/// Parameter layout entry: path, shape, initializer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }
}

/// The hypernetwork's structure; its parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HyperNet {
    cfg: HyperConfig,
    num_tasks: usize,
    modules: Vec<ModuleDescriptor>,
    mixer: [LinearPaths; 2],
    blocks: [ResidualBlock; 2],
    out_norm: NormPaths,
    out: [LinearPaths; 2],
    mlp: [LinearPaths; 2],
    heads: Vec<LinearPaths>,
}

/// Dropout control for a generation pass.
pub enum Dropout<'r, R: Rng> {
    Off,
    On(&'r mut R),
}

impl HyperNet {
    pub fn new(cfg: &HyperConfig, num_tasks: usize, modules: &[ModuleDescriptor]) -> Result<Self> {
        cfg.validate()?;
        if num_tasks == 0 {
            return Err(Error::Config("at least one task is required".into()));
        }
        for m in modules {
            if cfg.rank > m.d_in.min(m.d_out) {
                return Err(Error::Config(format!(
                    "rank {} exceeds min(d_in, d_out) of module {}",
                    cfg.rank, m.flat_index
                )));
            }
        }
        let block = |i: usize| ResidualBlock {
            norm: NormPaths::new(&format!("hyper.block.{i}.norm")),
            fc0: LinearPaths::new(&format!("hyper.block.{i}.fc0")),
            fc1: LinearPaths::new(&format!("hyper.block.{i}.fc1")),
        };
        Ok(HyperNet {
            cfg: cfg.clone(),
            num_tasks,
            modules: modules.to_vec(),
            mixer: [LinearPaths::new("hyper.mixer.0"), LinearPaths::new("hyper.mixer.1")],
            blocks: [block(0), block(1)],
            out_norm: NormPaths::new("hyper.out.norm"),
            out: [LinearPaths::new("hyper.out.fc0"), LinearPaths::new("hyper.out.fc1")],
            mlp: [LinearPaths::new("hyper.mlp.0"), LinearPaths::new("hyper.mlp.1")],
            heads: (0..modules.len())
                .map(|m| LinearPaths::new(&format!("hyper.head.{m}")))
                .collect(),
        })
    }

    pub fn config(&self) -> &HyperConfig {
        &self.cfg
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn modules(&self) -> &[ModuleDescriptor] {
        &self.modules
    }

    pub fn head_out_len(&self, m: &ModuleDescriptor) -> usize {
        self.cfg.rank * (m.d_in + m.d_out)
    }

    /// Full parameter layout, grouped as embeddings, trunk, heads.
    pub fn layout(&self) -> Vec<(Component, ParamSpec)> {
        let c = &self.cfg;
        let mut out = Vec::new();
        let lin = |out: &mut Vec<(Component, ParamSpec)>, p: &LinearPaths, fan_in: usize, fan_out: usize| {
            out.push((
                Component::Trunk,
                ParamSpec {
                    path: p.w.clone(),
                    shape: vec![fan_in, fan_out],
                    init: Init::Normal(1.0 / libm::sqrt(fan_in as f64)),
                },
            ));
            out.push((
                Component::Trunk,
                ParamSpec {
                    path: p.b.clone(),
                    shape: vec![fan_out],
                    init: Init::Zeros,
                },
            ));
        };
        let norm = |out: &mut Vec<(Component, ParamSpec)>, p: &NormPaths, d: usize| {
            out.push((
                Component::Trunk,
                ParamSpec {
                    path: p.gamma.clone(),
                    shape: vec![d],
                    init: Init::Ones,
                },
            ));
            out.push((
                Component::Trunk,
                ParamSpec {
                    path: p.beta.clone(),
                    shape: vec![d],
                    init: Init::Zeros,
                },
            ));
        };
        out.push((
            Component::TaskEmbeddings,
            ParamSpec {
                path: TASK_EMBED.into(),
                shape: vec![self.num_tasks, c.task_embed_dim],
                init: Init::Normal(1.0 / libm::sqrt(c.task_embed_dim as f64)),
            },
        ));
        out.push((
            Component::PositionalEmbeddings,
            ParamSpec {
                path: POS_EMBED.into(),
                shape: vec![self.modules.len(), c.pos_embed_dim],
                init: Init::Normal(1.0 / libm::sqrt(c.pos_embed_dim as f64)),
            },
        ));
        let input = c.task_embed_dim + c.pos_embed_dim;
        match c.arch {
            HyperArch::Residual => {
                lin(&mut out, &self.mixer[0], input, c.latent);
                lin(&mut out, &self.mixer[1], c.latent, c.latent);
                for b in &self.blocks {
                    norm(&mut out, &b.norm, c.latent);
                    lin(&mut out, &b.fc0, c.latent, c.latent);
                    lin(&mut out, &b.fc1, c.latent, c.latent);
                }
                norm(&mut out, &self.out_norm, c.latent);
                lin(&mut out, &self.out[0], c.latent, c.head_in);
                lin(&mut out, &self.out[1], c.head_in, c.head_in);
            }
            HyperArch::Mlp3 => {
                lin(&mut out, &self.mlp[0], input, c.mlp_hidden);
                lin(&mut out, &self.mlp[1], c.mlp_hidden, c.mlp_hidden);
            }
        }
        let head_in = c.head_input();
        for (m, p) in self.modules.iter().zip(&self.heads) {
            let len = self.head_out_len(m);
            out.push((
                Component::Heads,
                ParamSpec {
                    path: p.w.clone(),
                    shape: vec![head_in, len],
                    init: Init::Zeros,
                },
            ));
            // the B segment of the bias starts like a plain LoRA `B`, shared
            // by every task; the A segment is zero so the delta starts at zero
            out.push((
                Component::Heads,
                ParamSpec {
                    path: p.b.clone(),
                    shape: vec![len],
                    init: Init::LeadingNormal {
                        count: c.rank * m.d_in,
                        std: 1.0 / libm::sqrt(m.d_in as f64),
                    },
                },
            ));
        }
        out
    }

    /// Allocates and initializes every hypernetwork parameter into `store`.
    pub fn init_params<S: Real>(&self, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<()> {
        for (_, spec) in self.layout() {
            let t = materialize_init(&spec, rng)?;
            store.insert(spec.path, t, true)?;
        }
        Ok(())
    }

    fn linear<'a, S: Real>(&self, tape: &mut Tape<'a, S>, bound: &Bound, x: Var, p: &LinearPaths) -> Result<Var> {
        let y = tape.matmul(x, bound.var(&p.w)?)?;
        tape.add_row(y, bound.var(&p.b)?)
    }

    fn dropout<'a, S: Real, R: Rng>(&self, tape: &mut Tape<'a, S>, x: Var, drop: &mut Dropout<'_, R>) -> Result<Var> {
        let p = self.cfg.dropout;
        match drop {
            Dropout::On(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let shape = tape.value(x).shape().to_vec();
                let n = tape.value(x).numel();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let m = tape.leaf(Tensor::from_f64(&shape, &mask)?);
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// Shared trunk on `[n × (d_e + d_p)]` rows, returning `[n × head_in]`.
    fn trunk<'a, S: Real, R: Rng>(
        &self,
        tape: &mut Tape<'a, S>,
        bound: &Bound,
        x: Var,
        drop: &mut Dropout<'_, R>,
    ) -> Result<Var> {
        match self.cfg.arch {
            HyperArch::Mlp3 => {
                let h = self.linear(tape, bound, x, &self.mlp[0])?;
                let h = tape.silu(h)?;
                let h = self.dropout(tape, h, drop)?;
                let h = self.linear(tape, bound, h, &self.mlp[1])?;
                let h = tape.silu(h)?;
                self.dropout(tape, h, drop)
            }
            HyperArch::Residual => {
                let mut h = x;
                for p in &self.mixer {
                    h = self.linear(tape, bound, h, p)?;
                    h = tape.silu(h)?;
                    h = self.dropout(tape, h, drop)?;
                }
                for b in &self.blocks {
                    let n = tape.layer_norm(h, bound.var(&b.norm.gamma)?, bound.var(&b.norm.beta)?)?;
                    let mut r = self.linear(tape, bound, n, &b.fc0)?;
                    r = tape.silu(r)?;
                    r = self.dropout(tape, r, drop)?;
                    r = self.linear(tape, bound, r, &b.fc1)?;
                    r = tape.silu(r)?;
                    r = self.dropout(tape, r, drop)?;
                    h = tape.add(h, r)?;
                }
                let n = tape.layer_norm(h, bound.var(&self.out_norm.gamma)?, bound.var(&self.out_norm.beta)?)?;
                let mut o = self.linear(tape, bound, n, &self.out[0])?;
                o = tape.silu(o)?;
                o = self.linear(tape, bound, o, &self.out[1])?;
                tape.silu(o)
            }
        }
    }

    /// Generates factors for `modules` from each row of `e_rows`
    /// (`[G × d_e]`), one [`TapeDeltas`] per row. All rows share one trunk
    /// pass and one application of each module head.
    pub fn generate_on_tape<'a, S: Real, R: Rng>(
        &self,
        tape: &mut Tape<'a, S>,
        bound: &Bound,
        e_rows: Var,
        modules: &[usize],
        drop: &mut Dropout<'_, R>,
    ) -> Result<Vec<TapeDeltas>> {
        let (g, de) = tape.value(e_rows).dims2();
        if de != self.cfg.task_embed_dim {
            return Err(Error::shape("generate", tape.value(e_rows).shape(), &[g, self.cfg.task_embed_dim]));
        }
        if modules.is_empty() || g == 0 {
            return Ok(vec![TapeDeltas::new(); g]);
        }
        for &m in modules {
            if m >= self.modules.len() {
                return Err(Error::IndexOutOfRange {
                    index: m,
                    len: self.modules.len(),
                });
            }
        }
        let nm = modules.len();
        let e_idx: Vec<usize> = (0..g).flat_map(|i| core::iter::repeat_n(i, nm)).collect();
        let pos_idx: Vec<usize> = (0..g).flat_map(|_| modules.iter().copied()).collect();
        let e = tape.gather_rows(e_rows, &e_idx)?;
        let pos = tape.gather_rows(bound.var(POS_EMBED)?, &pos_idx)?;
        let x = tape.concat_cols(&[e, pos])?;
        let latent = self.trunk(tape, bound, x, drop)?;
        let r = self.cfg.rank;
        let scale = self.cfg.scale();
        let mut out = vec![TapeDeltas::new(); g];
        for (j, &m) in modules.iter().enumerate() {
            let desc = &self.modules[m];
            let len = self.head_out_len(desc);
            let rows: Vec<usize> = (0..g).map(|i| i * nm + j).collect();
            let h = tape.gather_rows(latent, &rows)?;
            let y = self.linear(tape, bound, h, &self.heads[m])?;
            for (i, deltas) in out.iter_mut().enumerate() {
                let b = tape.slice_flat(y, i * len, &[desc.d_in, r])?;
                let a = tape.slice_flat(y, i * len + r * desc.d_in, &[r, desc.d_out])?;
                deltas.insert(m, TapeFactors { b, a, scale });
            }
        }
        Ok(out)
    }

    /// All modules for each task in `tasks` (rows of the task-embedding table).
    pub fn generate_tasks_on_tape<'a, S: Real, R: Rng>(
        &self,
        tape: &mut Tape<'a, S>,
        bound: &Bound,
        tasks: &[usize],
        drop: &mut Dropout<'_, R>,
    ) -> Result<Vec<TapeDeltas>> {
        if let Some(&t) = tasks.iter().find(|&&t| t >= self.num_tasks) {
            return Err(Error::IndexOutOfRange {
                index: t,
                len: self.num_tasks,
            });
        }
        let e = tape.gather_rows(bound.var(TASK_EMBED)?, tasks)?;
        let all: Vec<usize> = (0..self.modules.len()).collect();
        self.generate_on_tape(tape, bound, e, &all, drop)
    }

    fn generate_modules<S: Real>(
        &self,
        params: &ParamStore<S>,
        e_k: &Tensor<S>,
        modules: &[usize],
    ) -> Result<crate::vit::DeltaSet<S>> {
        if e_k.numel() != self.cfg.task_embed_dim {
            return Err(Error::shape("generate", e_k.shape(), &[self.cfg.task_embed_dim]));
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let e = tape.leaf(e_k.reshape(&[1, self.cfg.task_embed_dim])?);
        let td = self.generate_on_tape(&mut tape, &bound, e, modules, &mut Dropout::<rng::StreamRng>::Off)?;
        let mut out = crate::vit::DeltaSet::new();
        for (m, f) in td.into_iter().next().unwrap_or_default() {
            out.insert(
                m,
                LoraFactors {
                    b: tape.value(f.b).clone(),
                    a: tape.value(f.a).clone(),
                    rank: self.cfg.rank,
                    alpha: self.cfg.alpha,
                },
            );
        }
        Ok(out)
    }

    /// Factors for one module (evaluation mode, no dropout).
    pub fn generate<S: Real>(
        &self,
        params: &ParamStore<S>,
        e_k: &Tensor<S>,
        m: &ModuleDescriptor,
    ) -> Result<LoraFactors<S>> {
        let mut set = self.generate_modules(params, e_k, &[m.flat_index])?;
        set.remove(&m.flat_index).ok_or(Error::IndexOutOfRange {
            index: m.flat_index,
            len: self.modules.len(),
        })
    }

    /// Factors for every descriptor (evaluation mode, no dropout).
    pub fn generate_all<S: Real>(
        &self,
        params: &ParamStore<S>,
        e_k: &Tensor<S>,
        descriptors: &[ModuleDescriptor],
    ) -> Result<crate::vit::DeltaSet<S>> {
        let idx: Vec<usize> = descriptors.iter().map(|d| d.flat_index).collect();
        self.generate_modules(params, e_k, &idx)
    }

    /// Row `task` of the task-embedding table.
    pub fn task_embedding<S: Real>(&self, params: &ParamStore<S>, task: usize) -> Result<Tensor<S>> {
        let table = params.get(TASK_EMBED)?;
        let d = self.cfg.task_embed_dim;
        if task >= self.num_tasks {
            return Err(Error::IndexOutOfRange {
                index: task,
                len: self.num_tasks,
            });
        }
        Tensor::new(vec![d], table.data()[task * d..(task + 1) * d].to_vec())
    }

    /// Deltas for task `task` (evaluation mode).
    pub fn task_deltas<S: Real>(&self, params: &ParamStore<S>, task: usize) -> Result<crate::vit::DeltaSet<S>> {
        let e = self.task_embedding(params, task)?;
        let all: Vec<usize> = (0..self.modules.len()).collect();
        self.generate_modules(params, &e, &all)
    }

    /// Exact trainable-parameter census against closed forms.
    pub fn audit(&self) -> ParamAudit {
        let c = &self.cfg;
        let layout = self.layout();
        let census = |comp: Component| layout.iter().filter(|(k, _)| *k == comp).map(|(_, s)| s.numel()).sum();
        let k = self.num_tasks as u64;
        let m = self.modules.len() as u64;
        let (de, dp, lat, hin, hid) = (
            c.task_embed_dim as u64,
            c.pos_embed_dim as u64,
            c.latent as u64,
            c.head_input() as u64,
            c.mlp_hidden as u64,
        );
        let r = c.rank as u64;
        let trunk_closed = match c.arch {
            HyperArch::Residual => {
                let mixer = (de + dp) * lat + lat + lat * lat + lat;
                let block = 2 * lat + 2 * (lat * lat + lat);
                let out = 2 * lat + lat * hin + hin + hin * hin + hin;
                mixer + 2 * block + out
            }
            HyperArch::Mlp3 => (de + dp) * hid + hid + hid * hid + hid,
        };
        let heads_closed: u64 = self
            .modules
            .iter()
            .map(|d| {
                let o = r * (d.d_in + d.d_out) as u64;
                hin * o + o
            })
            .sum();
        let square: Vec<&ModuleDescriptor> = self.modules.iter().filter(|d| d.is_square()).collect();
        let square_census: u64 = square
            .iter()
            .map(|d| {
                let o = self.head_out_len(d) as u64;
                hin * o + o
            })
            .sum();
        let square_weights_census: u64 = square.iter().map(|d| hin * self.head_out_len(d) as u64).sum();
        let lora_closed_per_square = square.first().map(|d| param_count_lora(hin, d.d_in as u64, r)).unwrap_or(0);
        let full_closed_per_square = square.first().map(|d| param_count_full(hin, d.d_in as u64)).unwrap_or(0);
        let rows = vec![
            AuditRow::new("task_embeddings", census(Component::TaskEmbeddings), k * de),
            AuditRow::new("positional_embeddings", census(Component::PositionalEmbeddings), m * dp),
            AuditRow::new("trunk", census(Component::Trunk), trunk_closed),
            AuditRow::new("heads", census(Component::Heads), heads_closed),
            AuditRow::new(
                "heads_square_modules",
                square_census,
                square
                    .iter()
                    .map(|d| hin * 2 * r * d.d_in as u64 + 2 * r * d.d_in as u64)
                    .sum(),
            ),
            AuditRow::new(
                "heads_square_weights_vs_lora_formula",
                square_weights_census,
                square.len() as u64 * lora_closed_per_square,
            ),
        ];
        let total = layout.iter().map(|(_, s)| s.numel()).sum();
        ParamAudit {
            rows,
            total,
            square_modules: square.len(),
            lora_head_per_square: lora_closed_per_square,
            full_head_per_square: full_closed_per_square,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TaskEmbeddings,
    PositionalEmbeddings,
    Trunk,
    Heads,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub component: String,
    pub census: u64,
    pub closed_form: u64,
}

impl AuditRow {
    fn new(component: &str, census: u64, closed_form: u64) -> Self {
        AuditRow {
            component: component.into(),
            census,
            closed_form,
        }
    }

    pub fn matches(&self) -> bool {
        self.census == self.closed_form
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub rows: Vec<AuditRow>,
    pub total: u64,
    pub square_modules: usize,
    /// `head_in·D·2r` for one square module.
    pub lora_head_per_square: u64,
    /// `head_in·D²` for one square module, had it been generated full rank.
    pub full_head_per_square: u64,
}

impl ParamAudit {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(AuditRow::matches)
    }

    pub fn row(&self, component: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.component == component)
    }
}

pub fn materialize_init<S: Real>(spec: &ParamSpec, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let n = spec.numel() as usize;
    let values: Vec<f64> = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => (0..n).map(|_| rng::normal(rng) * std).collect(),
        Init::LeadingNormal { count, std } => (0..n)
            .map(|i| if i < count { rng::normal(rng) * std } else { 0.0 })
            .collect(),
    };
    Tensor::from_f64(&spec.shape, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{enumerate_target_modules, BackboneConfig};

    #[test]
    fn closed_form_reference_values() {
        assert_eq!(param_count_lora(64, 768, 16), 1_572_864);
        assert_eq!(param_count_full(64, 768), 37_748_736);
        // 2r = D crossover
        assert_eq!(param_count_lora(64, 32, 16), param_count_full(64, 32));
        assert_eq!(param_count_lora(64, 1536, 16), 2 * param_count_lora(64, 768, 16));
        assert_eq!(param_count_full(64, 1536), 4 * param_count_full(64, 768));
    }

    #[test]
    fn reference_fc1_head_width() {
        let bb = BackboneConfig::reference();
        let mods = enumerate_target_modules(&bb);
        let net = HyperNet::new(&HyperConfig::reference(), 25, &mods).unwrap();
        let fc1 = mods.iter().find(|m| m.kind == crate::vit::ModuleKind::Fc1).unwrap();
        assert_eq!(net.head_out_len(fc1), 61_440);
    }

    #[test]
    fn audit_matches_closed_forms() {
        for arch in [HyperArch::Residual, HyperArch::Mlp3] {
            let cfg = HyperConfig { arch, ..Default::default() };
            let mods = enumerate_target_modules(&BackboneConfig::default());
            let net = HyperNet::new(&cfg, 6, &mods).unwrap();
            let audit = net.audit();
            assert!(audit.all_match(), "{audit:?}");
            let mut store = ParamStore::<f32>::new();
            net.init_params(&mut store, &mut rng::stream(1, 0)).unwrap();
            assert_eq!(store.trainable_count() as u64, audit.total);
        }
    }

    #[test]
    fn zero_modules_heads_census_is_zero() {
        let net = HyperNet::new(&HyperConfig::default(), 3, &[]).unwrap();
        assert_eq!(net.audit().row("heads").unwrap().census, 0);
    }

    #[test]
    fn factor_validation() {
        assert!(LoraFactors::<f32>::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[2, 3]), 2.0).is_ok());
        assert!(LoraFactors::<f32>::new(Tensor::zeros(&[4, 2]), Tensor::zeros(&[3, 3]), 2.0).is_err());
        assert!(LoraFactors::<f32>::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[3, 8]), 2.0).is_err());
    }

    #[test]
    fn alpha_equal_rank_gives_unit_scale() {
        assert_eq!(LoraFactors::<f32>::zeros(4, 4, 3, 3.0).scale(), 1.0);
    }
}
