//! Run configuration and its `section.key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// One decision per temporal step from the TemporalFormer context.
    Temporal,
    /// One decision per token from the token itself.
    Token,
    /// One decision per step from the channel mean of the normalized tokens.
    Mean,
    /// A single dense feed-forward network.
    Dense,
}

impl FromStr for RoutingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(RoutingMode::Temporal),
            "token" => Ok(RoutingMode::Token),
            "mean" => Ok(RoutingMode::Mean),
            "dense" => Ok(RoutingMode::Dense),
            other => Err(Error::Config(format!("unknown routing mode {other:?}"))),
        }
    }
}

impl RoutingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RoutingMode::Temporal => "temporal",
            RoutingMode::Token => "token",
            RoutingMode::Mean => "mean",
            RoutingMode::Dense => "dense",
        }
    }
}

/// Which probabilities enter `p_k` of the balancing loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuxProbDomain {
    /// Softmax over all N router logits.
    All,
    /// The top-K restricted gate values.
    TopK,
}

impl FromStr for AuxProbDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(AuxProbDomain::All),
            "topk" => Ok(AuxProbDomain::TopK),
            other => Err(Error::Config(format!("unknown aux probability domain {other:?}"))),
        }
    }
}

impl AuxProbDomain {
    pub fn as_str(self) -> &'static str {
        match self {
            AuxProbDomain::All => "all",
            AuxProbDomain::TopK => "topk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub patch_len: usize,
    pub temporal_kernels: Vec<usize>,
    pub conv_stride: usize,
    pub conv_filters: usize,
    pub gn_groups: usize,
    pub d: usize,
    /// `log(1 + |.|)` on the spectral branch instead of the plain magnitude.
    pub spectral_log: bool,
    pub chpe_kernels: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    /// Width of the dense feed-forward network.
    pub ffn_dim: usize,
    pub tf_queries: usize,
    pub tf_heads: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    pub routing_mode: RoutingMode,
    pub experts: usize,
    pub top_k: usize,
    pub shared_expert: bool,
    /// Hidden width of one expert; `None` means `ffn_dim / top_k`.
    pub expert_dim: Option<usize>,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_len: 200,
            temporal_kernels: vec![25, 49, 99],
            conv_stride: 25,
            conv_filters: 8,
            gn_groups: 4,
            d: 200,
            spectral_log: true,
            chpe_kernels: vec![5, 11, 19],
            layers: 12,
            heads: 8,
            ffn_dim: 800,
            tf_queries: 4,
            tf_heads: 4,
            rope_base: 10_000.0,
            rms_eps: 1e-6,
            routing_mode: RoutingMode::Temporal,
            experts: 64,
            top_k: 8,
            shared_expert: true,
            expert_dim: None,
        }
    }
}

impl ModelConfig {
    pub fn expert_width(&self) -> usize {
        self.expert_dim.unwrap_or(self.ffn_dim / self.top_k.max(1))
    }

    pub fn spectral_bins(&self) -> usize {
        self.patch_len / 2 + 1
    }

    /// Output length of temporal branch `q` after the strided convolution.
    pub fn branch_len(&self, q: usize) -> usize {
        (self.patch_len - q) / self.conv_stride + 1
    }

    /// Width of the concatenated temporal branches.
    pub fn temporal_width(&self) -> usize {
        self.temporal_kernels
            .iter()
            .map(|&q| self.conv_filters * self.branch_len(q))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.layers == 0 || self.patch_len == 0 {
            return bad("d, layers and patch_len must be positive".into());
        }
        if self.temporal_kernels.is_empty() {
            return bad("at least one temporal kernel is required".into());
        }
        if let Some(&q) = self.temporal_kernels.iter().find(|&&q| q == 0 || q > self.patch_len) {
            return bad(format!("temporal kernel {q} does not fit patch length {}", self.patch_len));
        }
        if self.conv_stride == 0 || self.conv_filters == 0 {
            return bad("conv stride and filters must be positive".into());
        }
        if self.gn_groups == 0 || self.conv_filters % self.gn_groups != 0 {
            return bad(format!("{} filters not divisible into {} groups", self.conv_filters, self.gn_groups));
        }
        if let Some(&q) = self.chpe_kernels.iter().find(|&&q| q % 2 == 0) {
            return bad(format!("channel kernel {q} must be odd"));
        }
        if self.heads == 0 || self.d % self.heads != 0 || self.d / self.heads < 2 {
            return bad(format!("d={} must split into {} heads at least 2 wide", self.d, self.heads));
        }
        if self.tf_heads == 0 || self.d % self.tf_heads != 0 || self.tf_queries == 0 {
            return bad(format!("d={} must split into {} TemporalFormer heads", self.d, self.tf_heads));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return bad(format!("need 1 <= K <= N, got K={} N={}", self.top_k, self.experts));
        }
        if self.expert_width() == 0 {
            return bad("expert width must be at least 1".into());
        }
        if self.routing_mode == RoutingMode::Dense && self.ffn_dim == 0 {
            return bad("dense FFN width must be positive".into());
        }
        if !(self.rope_base > 0.0 && self.rms_eps > 0.0) {
            return bad("rope base and RMS epsilon must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub horizons: Vec<usize>,
    pub huber_delta: f64,
    pub lambda_aux: f64,
    pub aux_prob_domain: AuxProbDomain,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            horizons: vec![1, 2, 4],
            huber_delta: 1.0,
            lambda_aux: 1e-2,
            aux_prob_domain: AuxProbDomain::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(Error::Config("horizons must be a non-empty list of positive integers".into()));
        }
        let mut sorted = self.horizons.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.horizons.len() {
            return Err(Error::Config("horizons must be distinct".into()));
        }
        if !(self.huber_delta > 0.0) || !(self.lambda_aux >= 0.0) {
            return Err(Error::Config("huber_delta must be positive and lambda_aux non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,
    pub seed: u64,
    pub window_s: f64,
    pub log_interval: u64,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 16,
            lr: 1e-3,
            lr_floor: 0.0,
            warmup: 2_000,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip: 1.0,
            seed: 0,
            window_s: 30.0,
            log_interval: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup >= self.steps {
            return Err(Error::Config(format!("warmup {} must be below total steps {}", self.warmup, self.steps)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return Err(Error::Config("need 0 <= lr_floor <= lr and lr > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.weight_decay < 0.0 || !(self.window_s > 0.0) || self.log_interval == 0 {
            return Err(Error::Config("weight decay, window length or log interval out of range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub classes: usize,
    pub freeze_backbone: bool,
    pub seed: u64,
    pub eval_interval: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 500,
            batch_size: 16,
            lr: 2e-3,
            warmup: 50,
            weight_decay: 5e-2,
            dropout: 0.1,
            classes: 2,
            freeze_backbone: false,
            seed: 0,
            eval_interval: 50,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("finetune steps, batch size and eval interval must be positive".into()));
        }
        if self.warmup >= self.steps {
            return Err(Error::Config("finetune warmup must be below total steps".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("dropout must lie in [0, 1), lr be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs besides file paths.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{v:?} is not a comma-separated integer list")))
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{v:?} is not a boolean"))),
    }
}

fn onoff(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.finetune.validate()
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (m, l, t, f) = (&mut self.model, &mut self.loss, &mut self.train, &mut self.finetune);
        match key {
            "encoder.patch_len" => m.patch_len = num(key, v)?,
            "encoder.kernels" => m.temporal_kernels = parse_list(v)?,
            "encoder.stride" => m.conv_stride = num(key, v)?,
            "encoder.filters" => m.conv_filters = num(key, v)?,
            "encoder.gn_groups" => m.gn_groups = num(key, v)?,
            "encoder.d" => m.d = num(key, v)?,
            "encoder.spectral_log" => m.spectral_log = parse_bool(v)?,
            "encoder.chpe_kernels" => m.chpe_kernels = if v.is_empty() { Vec::new() } else { parse_list(v)? },
            "model.layers" => m.layers = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.ffn_dim" => m.ffn_dim = num(key, v)?,
            "model.tf_queries" => m.tf_queries = num(key, v)?,
            "model.tf_heads" => m.tf_heads = num(key, v)?,
            "model.rope_base" => m.rope_base = num(key, v)?,
            "model.rms_eps" => m.rms_eps = num(key, v)?,
            "routing.mode" => m.routing_mode = v.parse()?,
            "routing.experts" => m.experts = num(key, v)?,
            "routing.topk" => m.top_k = num(key, v)?,
            "routing.shared" => m.shared_expert = parse_bool(v)?,
            "routing.expert_dim" => {
                m.expert_dim = if v == "auto" { None } else { Some(num(key, v)?) }
            }
            "loss.horizons" => l.horizons = parse_list(v)?,
            "loss.huber_delta" => l.huber_delta = num(key, v)?,
            "loss.lambda_aux" => l.lambda_aux = num(key, v)?,
            "loss.aux_prob_domain" => l.aux_prob_domain = v.parse()?,
            "train.steps" => t.steps = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.lr_floor" => t.lr_floor = num(key, v)?,
            "train.warmup" => t.warmup = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.beta1" => t.beta1 = num(key, v)?,
            "train.beta2" => t.beta2 = num(key, v)?,
            "train.adam_eps" => t.adam_eps = num(key, v)?,
            "train.clip" => t.clip = num(key, v)?,
            "train.seed" => t.seed = num(key, v)?,
            "train.window_s" => t.window_s = num(key, v)?,
            "train.log_interval" => t.log_interval = num(key, v)?,
            "train.checkpoint_interval" => t.checkpoint_interval = num(key, v)?,
            "finetune.steps" => f.steps = num(key, v)?,
            "finetune.batch_size" => f.batch_size = num(key, v)?,
            "finetune.lr" => f.lr = num(key, v)?,
            "finetune.warmup" => f.warmup = num(key, v)?,
            "finetune.weight_decay" => f.weight_decay = num(key, v)?,
            "finetune.dropout" => f.dropout = num(key, v)?,
            "finetune.classes" => f.classes = num(key, v)?,
            "finetune.freeze_backbone" => f.freeze_backbone = parse_bool(v)?,
            "finetune.seed" => f.seed = num(key, v)?,
            "finetune.eval_interval" => f.eval_interval = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `section.key = value`", i + 1)));
            };
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form listing every key; `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let (m, l, t, f) = (&self.model, &self.loss, &self.train, &self.finetune);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("encoder.patch_len", m.patch_len.to_string());
        kv("encoder.kernels", join(&m.temporal_kernels));
        kv("encoder.stride", m.conv_stride.to_string());
        kv("encoder.filters", m.conv_filters.to_string());
        kv("encoder.gn_groups", m.gn_groups.to_string());
        kv("encoder.d", m.d.to_string());
        kv("encoder.spectral_log", onoff(m.spectral_log).into());
        kv("encoder.chpe_kernels", join(&m.chpe_kernels));
        kv("model.layers", m.layers.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.ffn_dim", m.ffn_dim.to_string());
        kv("model.tf_queries", m.tf_queries.to_string());
        kv("model.tf_heads", m.tf_heads.to_string());
        kv("model.rope_base", m.rope_base.to_string());
        kv("model.rms_eps", m.rms_eps.to_string());
        kv("routing.mode", m.routing_mode.as_str().into());
        kv("routing.experts", m.experts.to_string());
        kv("routing.topk", m.top_k.to_string());
        kv("routing.shared", onoff(m.shared_expert).into());
        kv("routing.expert_dim", m.expert_dim.map_or("auto".into(), |e| e.to_string()));
        kv("loss.horizons", join(&l.horizons));
        kv("loss.huber_delta", l.huber_delta.to_string());
        kv("loss.lambda_aux", l.lambda_aux.to_string());
        kv("loss.aux_prob_domain", l.aux_prob_domain.as_str().into());
        kv("train.steps", t.steps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.lr_floor", t.lr_floor.to_string());
        kv("train.warmup", t.warmup.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.adam_eps", t.adam_eps.to_string());
        kv("train.clip", t.clip.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.window_s", t.window_s.to_string());
        kv("train.log_interval", t.log_interval.to_string());
        kv("train.checkpoint_interval", t.checkpoint_interval.to_string());
        kv("finetune.steps", f.steps.to_string());
        kv("finetune.batch_size", f.batch_size.to_string());
        kv("finetune.lr", f.lr.to_string());
        kv("finetune.warmup", f.warmup.to_string());
        kv("finetune.weight_decay", f.weight_decay.to_string());
        kv("finetune.dropout", f.dropout.to_string());
        kv("finetune.classes", f.classes.to_string());
        kv("finetune.freeze_backbone", onoff(f.freeze_backbone).into());
        kv("finetune.seed", f.seed.to_string());
        kv("finetune.eval_interval", f.eval_interval.to_string());
        s
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
