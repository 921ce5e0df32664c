//! Tiny transformer encoder with factorized embeddings and genotype-driven FFNs.

mod cost;
mod forward;
mod params;
mod surface;

pub use cost::{count_mult_adds, count_params, CostReport, LayerCost};
pub use forward::{forward, ForwardArtifacts, Head, TokenBatch};
pub use params::{leading_mask, Binder, GradMap, ParamStore};
pub use surface::{nonlinearity_surface, GridSpec, Surface, SurfacePoint};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn_space::{validate, FfnGenotype, SpaceLimits};
use crate::tensor::{Checkpoint, Tensor};

/// Epsilon of every layer norm.
pub const LN_EPS: f64 = 1e-12;

/// A prediction head on the pooled first position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub width: usize,
}

impl HeadSpec {
    pub fn new(name: impl Into<String>, width: usize) -> Self {
        HeadSpec {
            name: name.into(),
            width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Base width the expansion ratios multiply.
    pub d_ref: usize,
    pub genotype: FfnGenotype,
    #[serde(default)]
    pub task_heads: Vec<HeadSpec>,
    /// Token-prediction head over the vocabulary.
    #[serde(default)]
    pub mlm_head: bool,
}

impl ModelConfig {
    /// Standard encoder: every layer input -> expand -> GeLU -> contract at `d_i`.
    pub fn standard(
        num_layers: usize,
        hidden: usize,
        num_heads: usize,
        d_i: usize,
        vocab_size: usize,
        max_len: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            hidden,
            num_heads,
            max_len,
            vocab_size,
            embed_dim: (hidden / 4).max(1),
            d_ref: d_i,
            genotype: FfnGenotype::baseline(num_layers),
            task_heads: Vec::new(),
            mlm_head: false,
        }
    }

    /// Desk-scale teacher: 4 layers, d=64, 4 heads, d_i=256.
    pub fn desk_teacher() -> Self {
        Self::standard(4, 64, 4, 256, 512, 32)
    }

    /// Desk-scale student base: 2 layers, d=32, 4 heads, d_ref=32.
    pub fn desk_student() -> Self {
        Self::standard(2, 32, 4, 32, 512, 32)
    }

    pub fn with_genotype(mut self, genotype: FfnGenotype) -> Self {
        self.genotype = genotype;
        self
    }

    pub fn with_heads(mut self, heads: Vec<HeadSpec>, mlm_head: bool) -> Self {
        self.task_heads = heads;
        self.mlm_head = mlm_head;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads.max(1)
    }

    pub fn head(&self, name: &str) -> Option<&HeadSpec> {
        self.task_heads.iter().find(|h| h.name == name)
    }

    pub fn check(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("d_ref", self.d_ref),
        ];
        if let Some((k, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden {} not divisible by {} heads",
                self.hidden, self.num_heads
            )));
        }
        if let Some(h) = self.task_heads.iter().find(|h| h.width == 0) {
            return Err(Error::Config(format!("head `{}` has zero width", h.name)));
        }
        let report = validate(&self.genotype, self.num_layers, &SpaceLimits::default());
        if !report.is_ok() {
            return Err(Error::Config(format!(
                "invalid genotype: {}",
                report.violations.join("; ")
            )));
        }
        Ok(())
    }

    /// Every parameter with its extent and initializer.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.hidden;
        let mut out = Vec::new();
        let linear = |out: &mut Vec<_>, prefix: String, fan_in: usize, fan_out: usize| {
            out.push((
                format!("{prefix}.weight"),
                vec![fan_in, fan_out],
                Init::Normal(1.0 / (fan_in as f64).sqrt()),
            ));
            out.push((format!("{prefix}.bias"), vec![fan_out], Init::Zeros));
        };
        let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str| {
            out.push((format!("{prefix}.gamma"), vec![d], Init::Ones));
            out.push((format!("{prefix}.beta"), vec![d], Init::Zeros));
        };
        out.push((
            "embed.tokens".into(),
            vec![self.vocab_size, self.embed_dim],
            Init::Normal(1.0),
        ));
        linear(&mut out, "embed.proj".into(), self.embed_dim, d);
        out.push(("embed.pos".into(), vec![self.max_len, d], Init::Normal(0.1)));
        norm(&mut out, "embed.ln");
        for (l, spec) in self.genotype.layers.iter().enumerate() {
            for p in ["q", "k", "v", "o"] {
                linear(&mut out, format!("layer{l}.attn.{p}"), d, d);
            }
            norm(&mut out, &format!("layer{l}.attn_ln"));
            let w = spec.width(self.d_ref);
            for s in 0..spec.stack as usize {
                for k in 0..spec.count_linear(true) {
                    linear(&mut out, expand_name(l, s, k), d, w);
                }
                for k in 0..spec.count_linear(false) {
                    linear(&mut out, contract_name(l, s, k), w, d);
                }
            }
            norm(&mut out, &format!("layer{l}.ffn_ln"));
        }
        for h in &self.task_heads {
            linear(&mut out, format!("head.{}", h.name), d, h.width);
        }
        if self.mlm_head {
            linear(&mut out, "mlm".into(), d, self.vocab_size);
        }
        out
    }
}

pub(crate) fn expand_name(layer: usize, stack: usize, slot: usize) -> String {
    format!("layer{layer}.ffn{stack}.expand{slot}")
}

pub(crate) fn contract_name(layer: usize, stack: usize, slot: usize) -> String {
    format!("layer{layer}.ffn{stack}.contract{slot}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// An encoder: its configuration plus parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Random initialization. The genotype is stored canonically, which fixes the
    /// node order that assigns linear nodes to weight slots.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Model> {
        let mut cfg = cfg;
        cfg.genotype = cfg.genotype.canonical();
        cfg.check()?;
        let mut params = ParamStore::new();
        for (name, dims, init) in cfg.param_specs() {
            let t = match init {
                Init::Normal(std) => Tensor::randn(&dims, std, rng),
                Init::Zeros => Tensor::zeros(&dims),
                Init::Ones => Tensor::ones(&dims),
            };
            params.insert(name, t.with_requires_grad(true));
        }
        Ok(Model { cfg, params })
    }

    /// Builds a model around existing parameters, checking names and extents.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Model> {
        let mut cfg = cfg;
        cfg.genotype = cfg.genotype.canonical();
        cfg.check()?;
        for (name, dims, _) in cfg.param_specs() {
            match params.get(&name) {
                Some(t) if t.dims() == dims.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has extent {:?}, config needs {dims:?}",
                        t.dims()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Model { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "config": serde_json::to_value(&self.cfg)?, "info": extra });
        Ok(self.params.to_checkpoint(meta))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Model> {
        let cfg: ModelConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("index has no model config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut params = ParamStore::from_checkpoint(ck);
        params.set_requires_grad(true);
        Model::from_parts(cfg, params)
    }
}

/// The weight donor: every layer runs the complete DAG with stack 4 at ratio 1.
pub fn build_supernet<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Model> {
    let cfg = cfg
        .clone()
        .with_genotype(FfnGenotype::supernet(cfg.num_layers));
    Model::new(cfg, rng)
}
