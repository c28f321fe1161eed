//! Experiment configuration, its TOML file format, and the mapping from a
//! method name to attachment plans and freeze policies.
//!
//! Unknown keys are rejected at every level. `--set a.b=value` overrides are
//! applied to the parsed TOML tree before deserialisation, so they go
//! through the same validation as the file itself.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tasks::TaskConfig;
use crate::backbone::{
    AttachmentSpec, BackboneConfig, Combine, DecomposedSpec, DeltaSpec, FreezePolicy, Site,
    SiteKind, VisualMode,
};
use crate::error::{PetError, Result};
use crate::granularity::{GranularityLevel, InitPolicy};
use crate::modification::HeadVariant;

/// Environment variable that replaces the configured seed list.
pub const SEED_ENV: &str = "PET_SEED";

/// A tuning method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Multi-head modification with a gate of the given level at encoder sites.
    Vlpet(GranularityLevel),
    /// `H + ΔH + G_large` at encoder sites.
    VlpetAdd,
    /// Single-head bottleneck at every planned site, no gate.
    Adapter,
    /// Single-head bottleneck with a gate of the given level at encoder sites.
    AdapterPlusG(GranularityLevel),
    /// Low-rank updates of every attention query and value projection.
    Lora,
    /// Only biases (and LayerNorm shifts) train.
    Bitfit,
    FullFinetune,
    /// Nothing trains.
    Frozen,
}

impl Method {
    pub fn all() -> Vec<Method> {
        let mut v: Vec<Method> = GranularityLevel::ALL
            .into_iter()
            .map(Method::Vlpet)
            .collect();
        v.push(Method::VlpetAdd);
        v.push(Method::Adapter);
        v.push(Method::AdapterPlusG(GranularityLevel::Large));
        v.extend([
            Method::Lora,
            Method::Bitfit,
            Method::FullFinetune,
            Method::Frozen,
        ]);
        v
    }

    pub fn has_attachments(self) -> bool {
        !matches!(self, Method::Bitfit | Method::FullFinetune | Method::Frozen)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Vlpet(l) => write!(f, "vlpet_{l}"),
            Method::VlpetAdd => f.write_str("vlpet_add"),
            Method::Adapter => f.write_str("adapter"),
            Method::AdapterPlusG(l) => write!(f, "adapter_plus_g_{l}"),
            Method::Lora => f.write_str("lora"),
            Method::Bitfit => f.write_str("bitfit"),
            Method::FullFinetune => f.write_str("full_finetune"),
            Method::Frozen => f.write_str("frozen"),
        }
    }
}

impl FromStr for Method {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vlpet_add" => Method::VlpetAdd,
            "adapter" => Method::Adapter,
            "lora" => Method::Lora,
            "bitfit" => Method::Bitfit,
            "full_finetune" => Method::FullFinetune,
            "frozen" => Method::Frozen,
            _ => {
                if let Some(level) = s.strip_prefix("adapter_plus_g_") {
                    Method::AdapterPlusG(level.parse()?)
                } else if let Some(level) = s.strip_prefix("vlpet_") {
                    Method::Vlpet(level.parse()?)
                } else {
                    return Err(PetError::config(format!("unknown method {s:?}")));
                }
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    pub name: Method,
    pub variant: HeadVariant,
    /// Bottleneck width at encoder sites.
    pub r: usize,
    pub heads: usize,
    /// Bottleneck width and head count at decoder sites.
    pub dec_r: usize,
    pub dec_heads: usize,
    /// Scaling factor of encoder and decoder gates.
    pub s: f64,
    pub dec_s: f64,
    /// LoRA rank; 0 means `round(128 · d / 768)`.
    pub lora_r: usize,
    pub init: InitPolicy,
    /// Encoder site kinds, e.g. `self_attn_out`, `ff_out`.
    pub encoder_sites: Vec<String>,
    /// Decoder site kinds, e.g. `cross_attn_value`.
    pub decoder_sites: Vec<String>,
}

impl Default for MethodConfig {
    fn default() -> Self {
        Self {
            name: Method::Vlpet(GranularityLevel::Large),
            variant: HeadVariant::Down,
            r: 8,
            heads: 4,
            dec_r: 8,
            dec_heads: 1,
            s: 1.0,
            dec_s: 1.0,
            lora_r: 0,
            init: InitPolicy::ZeroUp,
            encoder_sites: lightweight_encoder(),
            decoder_sites: lightweight_decoder(),
        }
    }
}

pub fn lightweight_encoder() -> Vec<String> {
    vec!["self_attn_out".into(), "ff_out".into()]
}

pub fn lightweight_decoder() -> Vec<String> {
    vec!["cross_attn_value".into()]
}

pub fn conventional_decoder() -> Vec<String> {
    vec![
        "self_attn_out".into(),
        "cross_attn_out".into(),
        "ff_out".into(),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeConfig {
    pub encoder_ln: bool,
    pub decoder_ln: bool,
    pub visual_mode: VisualMode,
    /// Gate the decomposed projector with a large-level gate.
    pub visual_gate: bool,
    pub visual_r: usize,
    pub visual_heads: usize,
}

impl Default for FreezeConfig {
    fn default() -> Self {
        Self {
            encoder_ln: true,
            decoder_ln: false,
            visual_mode: VisualMode::Trainable,
            visual_gate: false,
            visual_r: 32,
            visual_heads: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// One model, task batches interleaved round-robin.
    Multi,
    /// One model per task.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub mode: TaskMode,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 1e-2,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            clip_norm: 1.0,
            mode: TaskMode::Multi,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub backbone: BackboneConfig,
    pub method: MethodConfig,
    pub freeze: FreezeConfig,
    pub train: TrainConfig,
    pub tasks: TaskConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            seeds: vec![0],
            backbone: BackboneConfig::toy(),
            method: MethodConfig::default(),
            freeze: FreezeConfig::default(),
            train: TrainConfig::default(),
            tasks: TaskConfig::default(),
        }
    }
}

fn parse_site_kind(name: &str, encoder: bool) -> Result<SiteKind> {
    SiteKind::ALL
        .into_iter()
        .find(|k| k.is_encoder() == encoder && k.as_str() == name)
        .ok_or_else(|| {
            let side = if encoder { "encoder" } else { "decoder" };
            PetError::config(format!("unknown {side} site {name:?}"))
        })
}

impl ExperimentConfig {
    /// The BART-base accounting shape with the lightweight plan.
    pub fn bart_base_accounting(method: Method) -> Self {
        let mut cfg = Self {
            name: "bart_base".into(),
            backbone: BackboneConfig::bart_base(),
            ..Self::default()
        };
        cfg.method.name = method;
        cfg.method.r = 96;
        cfg.method.dec_r = 96;
        cfg.method.heads = 4;
        cfg.method.dec_heads = 1;
        cfg.freeze.visual_r = 96;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PetError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies `key=value` overrides, then `PET_SEED`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, overrides, std::env::var(SEED_ENV).ok().as_deref())
    }

    pub fn from_toml_with_overrides(
        text: &str,
        overrides: &[String],
        seed_env: Option<&str>,
    ) -> Result<Self> {
        let mut tree: toml::Table =
            toml::from_str(text).map_err(|e| PetError::config(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut tree, ov)?;
        }
        let mut cfg: Self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| PetError::config(e.to_string()))?;
        if let Some(seed) = seed_env {
            let seed = seed.trim().parse().map_err(|_| {
                PetError::config(format!("{SEED_ENV} must be an integer, got {seed:?}"))
            })?;
            cfg.seeds = vec![seed];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serialises")
    }

    /// Short stable digest of the serialised config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.seeds.is_empty() {
            return Err(PetError::config("at least one seed is required"));
        }
        if self.train.batch == 0 {
            return Err(PetError::config("batch must be positive"));
        }
        if self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return Err(PetError::config("lr must be positive"));
        }
        for s in &self.method.encoder_sites {
            parse_site_kind(s, true)?;
        }
        for s in &self.method.decoder_sites {
            parse_site_kind(s, false)?;
        }
        let m = &self.method;
        if m.name.has_attachments() && m.name != Method::Lora {
            let (enc_r, enc_h, dec_h) = match m.name {
                Method::Vlpet(_) | Method::VlpetAdd => (m.r, m.heads, m.dec_heads),
                _ => (m.r, 1, 1),
            };
            m.variant.validate(self.backbone.d, enc_r, enc_h)?;
            m.variant.validate(self.backbone.d, m.dec_r, dec_h)?;
        }
        if self.freeze.visual_mode == VisualMode::Decomposed {
            HeadVariant::Down.validate(
                self.backbone.d,
                self.freeze.visual_r,
                self.freeze.visual_heads,
            )?;
        }
        Ok(())
    }

    pub fn lora_rank(&self) -> usize {
        if self.method.lora_r > 0 {
            self.method.lora_r
        } else {
            ((128.0 * self.backbone.d as f64 / 768.0).round() as usize).max(1)
        }
    }

    pub fn decomposed_spec(&self) -> DecomposedSpec {
        DecomposedSpec {
            r: self.freeze.visual_r,
            heads: self.freeze.visual_heads,
            gated: self.freeze.visual_gate,
            s: self.method.s,
        }
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        let base = FreezePolicy {
            backbone_frozen: true,
            encoder_ln_trainable: self.freeze.encoder_ln,
            decoder_ln_trainable: self.freeze.decoder_ln,
            biases_trainable: false,
            pet_trainable: true,
            visual_mode: self.freeze.visual_mode,
        };
        match self.method.name {
            Method::Frozen => FreezePolicy::all_frozen(self.freeze.visual_mode),
            Method::Bitfit => FreezePolicy {
                biases_trainable: true,
                ..base
            },
            Method::FullFinetune => FreezePolicy {
                backbone_frozen: false,
                ..base
            },
            _ => base,
        }
    }

    /// Attachment specs implied by the method and site lists.
    pub fn attachment_plan(&self) -> Result<Vec<AttachmentSpec>> {
        let m = &self.method;
        let b = &self.backbone;
        let mut specs = Vec::new();
        if m.name == Method::Lora {
            let r = self.lora_rank();
            let lora = |site| AttachmentSpec {
                site,
                gate: GranularityLevel::Identity,
                gate_r: 0,
                s: 1.0,
                combine: Combine::Gated,
                delta: DeltaSpec::Lora { r },
            };
            for l in 0..b.enc_layers {
                specs.push(lora(Site::new(SiteKind::EncSelfAttnQuery, l)));
                specs.push(lora(Site::new(SiteKind::EncSelfAttnValue, l)));
            }
            for l in 0..b.dec_layers {
                specs.push(lora(Site::new(SiteKind::DecSelfAttnQuery, l)));
                specs.push(lora(Site::new(SiteKind::DecSelfAttnValue, l)));
                specs.push(lora(Site::new(SiteKind::DecCrossAttnQuery, l)));
                specs.push(lora(Site::new(SiteKind::DecCrossAttnValue, l)));
            }
            return Ok(specs);
        }
        if !m.name.has_attachments() {
            return Ok(specs);
        }
        let (enc_gate, combine) = match m.name {
            Method::Vlpet(l) | Method::AdapterPlusG(l) => (l, Combine::Gated),
            Method::VlpetAdd => (GranularityLevel::Large, Combine::Additive),
            _ => (GranularityLevel::Identity, Combine::Gated),
        };
        let multi_head = matches!(m.name, Method::Vlpet(_) | Method::VlpetAdd);
        let delta = |r: usize, heads: usize| {
            if multi_head {
                DeltaSpec::MultiHead {
                    variant: m.variant,
                    r,
                    heads,
                }
            } else {
                DeltaSpec::Adapter { r }
            }
        };
        let enc_kinds: Vec<SiteKind> = m
            .encoder_sites
            .iter()
            .map(|s| parse_site_kind(s, true))
            .collect::<Result<_>>()?;
        let dec_kinds: Vec<SiteKind> = m
            .decoder_sites
            .iter()
            .map(|s| parse_site_kind(s, false))
            .collect::<Result<_>>()?;
        for l in 0..b.enc_layers {
            for &kind in &enc_kinds {
                specs.push(AttachmentSpec {
                    site: Site::new(kind, l),
                    gate: enc_gate,
                    gate_r: m.r,
                    s: m.s,
                    combine,
                    delta: delta(m.r, m.heads),
                });
            }
        }
        for l in 0..b.dec_layers {
            for &kind in &dec_kinds {
                specs.push(AttachmentSpec {
                    site: Site::new(kind, l),
                    gate: GranularityLevel::Identity,
                    gate_r: m.dec_r,
                    s: m.dec_s,
                    combine: Combine::Gated,
                    delta: delta(m.dec_r, m.dec_heads),
                });
            }
        }
        Ok(specs)
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as TOML when
/// possible and taken as a bare string otherwise.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PetError::config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| PetError::config("empty override key"))?;
    let mut table = tree;
    for p in parts {
        let slot = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = slot
            .as_table_mut()
            .ok_or_else(|| PetError::config(format!("override key {key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(ExperimentConfig::from_toml_str("sedes = [1]").is_err());
        assert!(ExperimentConfig::from_toml_str("[train]\nstpes = 3").is_err());
    }

    #[test]
    fn overrides_and_seed_env() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "",
            &[
                "train.steps=7".into(),
                "method.name=vlpet_small".into(),
                "freeze.visual_mode=absent".into(),
            ],
            Some("42"),
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.method.name, Method::Vlpet(GranularityLevel::Small));
        assert_eq!(cfg.freeze.visual_mode, VisualMode::Absent);
        assert_eq!(cfg.seeds, vec![42]);
        assert!(
            ExperimentConfig::from_toml_with_overrides("", &["train.nope=1".into()], None).is_err()
        );
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::all() {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("vlpet_huge".parse::<Method>().is_err());
    }

    #[test]
    fn lightweight_plan_site_count() {
        let cfg = ExperimentConfig::default();
        let plan = cfg.attachment_plan().unwrap();
        assert_eq!(
            plan.len(),
            2 * cfg.backbone.enc_layers + cfg.backbone.dec_layers
        );
        assert!(plan
            .iter()
            .filter(|s| !s.site.kind.is_encoder())
            .all(|s| s.gate == GranularityLevel::Identity
                && s.site.kind == SiteKind::DecCrossAttnValue));
    }

    #[test]
    fn conventional_plan_has_three_decoder_sites_per_layer() {
        let mut cfg = ExperimentConfig::default();
        cfg.method.decoder_sites = conventional_decoder();
        let plan = cfg.attachment_plan().unwrap();
        let dec = plan.iter().filter(|s| !s.site.kind.is_encoder()).count();
        assert_eq!(dec, 3 * cfg.backbone.dec_layers);
    }

    #[test]
    fn lora_rank_scales_with_width() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lora_rank(), 11);
        let bart = ExperimentConfig::bart_base_accounting(Method::Lora);
        assert_eq!(bart.lora_rank(), 128);
    }
}
