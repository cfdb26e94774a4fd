//! A small pre-norm Vision Transformer with six LoRA injection points per
//! block (Q, K, V, attention output, fc1, fc2).
//!
//! Backbone weights are drawn once from a seeded truncated normal and never
//! trained. Slice triplets enter as `H×W×3` images; a scan's pooled feature is
//! the mean of the per-triplet CLS features.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyper::LoraFactors;
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::rng::{self, streams};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

/// Backbone weight init standard deviation.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub image_side: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            patch_size: 8,
            mlp_ratio: 4,
            image_side: 24,
        }
    }
}

impl BackboneConfig {
    /// ViT-Base dimensions (12 blocks, width 768) at 144-pixel inputs.
    pub fn reference() -> Self {
        BackboneConfig {
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            patch_size: 16,
            mlp_ratio: 4,
            image_side: 144,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("patch_size", self.patch_size),
            ("mlp_ratio", self.mlp_ratio),
            ("image_side", self.image_side),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("backbone.{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config("backbone.hidden_dim must be divisible by num_heads".into()));
        }
        if self.image_side % self.patch_size != 0 {
            return Err(Error::Config("backbone.image_side must be divisible by patch_size".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_side / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    /// Token sequence length including CLS.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.hidden_dim
    }

    pub fn num_modules(&self) -> usize {
        ModuleKind::ALL.len() * self.num_layers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleKind {
    Query,
    Key,
    Value,
    AttnOut,
    Fc1,
    Fc2,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 6] = [
        ModuleKind::Query,
        ModuleKind::Key,
        ModuleKind::Value,
        ModuleKind::AttnOut,
        ModuleKind::Fc1,
        ModuleKind::Fc2,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Query => "q",
            ModuleKind::Key => "k",
            ModuleKind::Value => "v",
            ModuleKind::AttnOut => "attn_out",
            ModuleKind::Fc1 => "fc1",
            ModuleKind::Fc2 => "fc2",
        }
    }
}

/// One LoRA injection point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDescriptor {
    pub flat_index: usize,
    pub layer: usize,
    pub kind: ModuleKind,
    pub d_in: usize,
    pub d_out: usize,
}

impl ModuleDescriptor {
    pub fn is_square(&self) -> bool {
        self.d_in == self.d_out
    }
}

/// All target modules in flat order `layer·6 + kind`.
pub fn enumerate_target_modules(cfg: &BackboneConfig) -> Vec<ModuleDescriptor> {
    let d = cfg.hidden_dim;
    let hidden = cfg.mlp_dim();
    let mut out = Vec::with_capacity(cfg.num_modules());
    for layer in 0..cfg.num_layers {
        for kind in ModuleKind::ALL {
            let (d_in, d_out) = match kind {
                ModuleKind::Fc1 => (d, hidden),
                ModuleKind::Fc2 => (hidden, d),
                _ => (d, d),
            };
            out.push(ModuleDescriptor {
                flat_index: layer * ModuleKind::ALL.len() + kind.ordinal(),
                layer,
                kind,
                d_in,
                d_out,
            });
        }
    }
    out
}

/// Generated factors keyed by flat module index.
pub type DeltaSet<S = f32> = BTreeMap<usize, LoraFactors<S>>;

/// LoRA factors living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct TapeFactors {
    pub b: Var,
    pub a: Var,
    pub scale: f64,
}

pub type TapeDeltas = BTreeMap<usize, TapeFactors>;

struct LayerPaths {
    ln1: (String, String),
    ln2: (String, String),
    linear: [(String, String); 6],
}

pub struct Backbone<S: Real = f32> {
    cfg: BackboneConfig,
    params: ParamStore<S>,
    layers: Vec<LayerPaths>,
    descriptors: Vec<ModuleDescriptor>,
}

fn linear_paths(layer: usize, kind: ModuleKind) -> (String, String) {
    (
        format!("layer.{layer}.{}.weight", kind.name()),
        format!("layer.{layer}.{}.bias", kind.name()),
    )
}

impl<S: Real> Backbone<S> {
    /// Random frozen backbone from `(seed, backbone stream)`.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, streams::BACKBONE);
        let mut tn = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng::truncated_normal(&mut rng, INIT_STD)).collect();
            Tensor::<S>::from_f64(shape, &v)
        };
        let d = cfg.hidden_dim;
        let mut params = ParamStore::new();
        params.insert("patch.weight", tn(&[cfg.patch_dim(), d])?, false)?;
        params.insert("patch.bias", Tensor::zeros(&[d]), false)?;
        params.insert("cls", tn(&[1, d])?, false)?;
        params.insert("pos", tn(&[cfg.seq_len(), d])?, false)?;
        let descriptors = enumerate_target_modules(cfg);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for layer in 0..cfg.num_layers {
            let ln1 = (format!("layer.{layer}.ln1.gamma"), format!("layer.{layer}.ln1.beta"));
            let ln2 = (format!("layer.{layer}.ln2.gamma"), format!("layer.{layer}.ln2.beta"));
            for (g, b) in [&ln1, &ln2] {
                params.insert(g.clone(), Tensor::filled(&[d], S::ONE), false)?;
                params.insert(b.clone(), Tensor::zeros(&[d]), false)?;
            }
            let linear = ModuleKind::ALL.map(|k| linear_paths(layer, k));
            for desc in &descriptors[layer * 6..layer * 6 + 6] {
                let (w, b) = &linear[desc.kind.ordinal()];
                params.insert(w.clone(), tn(&[desc.d_in, desc.d_out])?, false)?;
                params.insert(b.clone(), Tensor::zeros(&[desc.d_out]), false)?;
            }
            layers.push(LayerPaths { ln1, ln2, linear });
        }
        params.insert("final_ln.gamma", Tensor::filled(&[d], S::ONE), false)?;
        params.insert("final_ln.beta", Tensor::zeros(&[d]), false)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            params,
            layers,
            descriptors,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    /// Mutable access for tests and tooling; training never calls this.
    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn descriptors(&self) -> &[ModuleDescriptor] {
        &self.descriptors
    }

    /// Frozen weight and bias of a target module.
    pub fn linear(&self, m: &ModuleDescriptor) -> Result<(&Tensor<S>, &Tensor<S>)> {
        let (w, b) = &self.layers[m.layer].linear[m.kind.ordinal()];
        Ok((self.params.get(w)?, self.params.get(b)?))
    }

    /// `H×W×3` image → `[num_patches × 3p²]`, patches in row-major grid
    /// order, each flattened as `(dy, dx, channel)`.
    pub fn patch_matrix(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let side = self.cfg.image_side;
        if input.shape() != [side, side, 3] {
            return Err(Error::shape("patchify", input.shape(), &[side, side, 3]));
        }
        let p = self.cfg.patch_size;
        let grid = self.cfg.patches_per_side();
        let src = input.data();
        let mut out = Vec::with_capacity(self.cfg.num_patches() * self.cfg.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for dy in 0..p {
                    let row = gy * p + dy;
                    let start = (row * side + gx * p) * 3;
                    out.extend_from_slice(&src[start..start + p * 3]);
                }
            }
        }
        Tensor::new(vec![self.cfg.num_patches(), self.cfg.patch_dim()], out)
    }

    /// Token sequence `[(H/p)² + 1 × D]`: CLS first, then projected
    /// patches, all with positional embeddings added.
    pub fn patchify(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        let patches = self.patch_matrix(input)?;
        let projected = tensor::matmul(&patches, self.params.get("patch.weight")?)?;
        let bias = self.params.get("patch.bias")?.data();
        let cls = self.params.get("cls")?.data();
        let pos = self.params.get("pos")?.data();
        let d = self.cfg.hidden_dim;
        let mut out = Vec::with_capacity(self.cfg.seq_len() * d);
        for c in 0..d {
            out.push(S::from_f64(cls[c].to_f64() + pos[c].to_f64()));
        }
        for (r, row) in projected.data().chunks_exact(d).enumerate() {
            for c in 0..d {
                let v = row[c].to_f64() + bias[c].to_f64() + pos[(r + 1) * d + c].to_f64();
                out.push(S::from_f64(v));
            }
        }
        Tensor::new(vec![self.cfg.seq_len(), d], out)
    }

    /// Token sequences for several images stacked as `[n·seq × D]`.
    pub fn embed_images(&self, images: &[Tensor<S>]) -> Result<Tensor<S>> {
        let mut data = Vec::with_capacity(images.len() * self.cfg.seq_len() * self.cfg.hidden_dim);
        for img in images {
            data.extend_from_slice(self.patchify(img)?.data());
        }
        Tensor::new(vec![images.len() * self.cfg.seq_len(), self.cfg.hidden_dim], data)
    }

    fn check_deltas(&self, deltas: &DeltaSet<S>) -> Result<()> {
        for (&m, f) in deltas {
            let desc = self.descriptors.get(m).ok_or(Error::IndexOutOfRange {
                index: m,
                len: self.descriptors.len(),
            })?;
            f.check_dims(desc)?;
        }
        Ok(())
    }

    /// Registers `deltas` as constants on the tape.
    pub fn deltas_on_tape<'a>(&self, tape: &mut Tape<'a, S>, deltas: &'a DeltaSet<S>) -> Result<TapeDeltas> {
        self.check_deltas(deltas)?;
        Ok(deltas
            .iter()
            .map(|(&m, f)| {
                let b = tape.constant(&f.b);
                let a = tape.constant(&f.a);
                (m, TapeFactors { b, a, scale: f.scale() })
            })
            .collect())
    }

    fn lora_linear<'a>(
        &self,
        tape: &mut Tape<'a, S>,
        bound: &Bound,
        x: Var,
        desc: &ModuleDescriptor,
        deltas: &TapeDeltas,
    ) -> Result<Var> {
        let (w, b) = &self.layers[desc.layer].linear[desc.kind.ordinal()];
        let y = tape.matmul(x, bound.var(w)?)?;
        let y = tape.add_row(y, bound.var(b)?)?;
        match deltas.get(&desc.flat_index) {
            None => Ok(y),
            Some(f) => {
                let bs = tape.value(f.b).shape().to_vec();
                let as_ = tape.value(f.a).shape().to_vec();
                if bs.len() != 2 || as_.len() != 2 || bs[0] != desc.d_in || as_[1] != desc.d_out || bs[1] != as_[0] {
                    return Err(Error::shape("lora delta", &bs, &as_));
                }
                let xb = tape.matmul(x, f.b)?;
                let xba = tape.matmul(xb, f.a)?;
                let side = tape.scale(xba, f.scale)?;
                tape.add(y, side)
            }
        }
    }

    /// Runs the block stack on `[n·seq × D]` tokens and returns the final
    /// layer-normed CLS features `[n × D]`.
    ///
    /// The last block only evaluates query/MLP paths for CLS rows; every
    /// operation is row-independent so this equals the full computation.
    pub fn forward_tokens<'a>(
        &'a self,
        tape: &mut Tape<'a, S>,
        tokens: Var,
        deltas: &TapeDeltas,
    ) -> Result<Var> {
        let bound = self.params.bind(tape);
        let seq = self.cfg.seq_len();
        let (rows, d) = tape.value(tokens).dims2();
        if d != self.cfg.hidden_dim || rows % seq != 0 || rows == 0 {
            return Err(Error::shape("forward_tokens", tape.value(tokens).shape(), &[seq, self.cfg.hidden_dim]));
        }
        let n = rows / seq;
        let cls_rows: Vec<usize> = (0..n).map(|i| i * seq).collect();
        let heads = self.cfg.num_heads;
        let mut x = tokens;
        for (layer, paths) in self.layers.iter().enumerate() {
            let last = layer + 1 == self.layers.len();
            let desc = &self.descriptors[layer * 6..layer * 6 + 6];
            let h = tape.layer_norm(x, bound.var(&paths.ln1.0)?, bound.var(&paths.ln1.1)?)?;
            let k = self.lora_linear(tape, &bound, h, &desc[1], deltas)?;
            let v = self.lora_linear(tape, &bound, h, &desc[2], deltas)?;
            let (q_in, q_seq) = if last {
                (tape.gather_rows(h, &cls_rows)?, 1)
            } else {
                (h, seq)
            };
            let q = self.lora_linear(tape, &bound, q_in, &desc[0], deltas)?;
            let a = tape.attention_cross(q, k, v, heads, q_seq, seq)?;
            let o = self.lora_linear(tape, &bound, a, &desc[3], deltas)?;
            if last {
                x = tape.gather_rows(x, &cls_rows)?;
            }
            x = tape.add(x, o)?;
            let h2 = tape.layer_norm(x, bound.var(&paths.ln2.0)?, bound.var(&paths.ln2.1)?)?;
            let f = self.lora_linear(tape, &bound, h2, &desc[4], deltas)?;
            let f = tape.gelu(f)?;
            let f = self.lora_linear(tape, &bound, f, &desc[5], deltas)?;
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, bound.var("final_ln.gamma")?, bound.var("final_ln.beta")?)
    }

    /// Pooled feature `[D]` of one slice-triplet image.
    pub fn forward(&self, input: &Tensor<S>, deltas: &DeltaSet<S>) -> Result<Tensor<S>> {
        self.forward_images(core::slice::from_ref(input), deltas)?
            .reshape(&[self.cfg.hidden_dim])
    }

    /// CLS features `[n × D]` for several images.
    pub fn forward_images(&self, images: &[Tensor<S>], deltas: &DeltaSet<S>) -> Result<Tensor<S>> {
        if images.is_empty() {
            return Err(Error::Empty("image batch"));
        }
        let tokens = self.embed_images(images)?;
        let mut tape = Tape::new();
        let td = self.deltas_on_tape(&mut tape, deltas)?;
        let t = tape.leaf(tokens);
        let out = self.forward_tokens(&mut tape, t, &td)?;
        Ok(tape.value(out).clone())
    }

    /// Scan-level feature: mean over the per-triplet CLS features.
    pub fn forward_scan(&self, triplets: &[Tensor<S>], deltas: &DeltaSet<S>) -> Result<Tensor<S>> {
        let feats = self.forward_images(triplets, deltas)?;
        let (n, d) = feats.dims2();
        let mean: Vec<f64> = (0..d)
            .map(|c| (0..n).map(|r| feats.data()[r * d + c].to_f64()).sum::<f64>() / n as f64)
            .collect();
        Tensor::from_f64(&[d], &mean)
    }
}
