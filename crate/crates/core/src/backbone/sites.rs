//! Named insertion points and the records that bind PET modules to them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::granularity::{GranularityController, GranularityLevel};
use crate::modification::{HeadVariant, Modification};

/// Where in a layer a module sits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    EncSelfAttnOut,
    EncFeedForwardOut,
    DecSelfAttnOut,
    DecCrossAttnOut,
    DecCrossAttnKey,
    DecCrossAttnValue,
    DecFeedForwardOut,
    EncSelfAttnQuery,
    EncSelfAttnValue,
    DecSelfAttnQuery,
    DecSelfAttnValue,
    DecCrossAttnQuery,
}

/// Which tensor feeds the modification `ΔH`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// `X′` is the sublayer output `H`.
    ModuleOutput,
    /// `X′` is the sublayer (or projection) input.
    ModuleInput,
    /// `X′` is the encoder's final hidden state.
    EncoderFinalOutput,
}

impl SiteKind {
    pub const ALL: [SiteKind; 12] = [
        SiteKind::EncSelfAttnOut,
        SiteKind::EncFeedForwardOut,
        SiteKind::DecSelfAttnOut,
        SiteKind::DecCrossAttnOut,
        SiteKind::DecCrossAttnKey,
        SiteKind::DecCrossAttnValue,
        SiteKind::DecFeedForwardOut,
        SiteKind::EncSelfAttnQuery,
        SiteKind::EncSelfAttnValue,
        SiteKind::DecSelfAttnQuery,
        SiteKind::DecSelfAttnValue,
        SiteKind::DecCrossAttnQuery,
    ];

    pub fn is_encoder(self) -> bool {
        matches!(
            self,
            SiteKind::EncSelfAttnOut
                | SiteKind::EncFeedForwardOut
                | SiteKind::EncSelfAttnQuery
                | SiteKind::EncSelfAttnValue
        )
    }

    /// True for sites whose `H` is a whole sublayer output, followed by the
    /// residual add and LayerNorm.
    pub fn is_sublayer_output(self) -> bool {
        matches!(
            self,
            SiteKind::EncSelfAttnOut
                | SiteKind::EncFeedForwardOut
                | SiteKind::DecSelfAttnOut
                | SiteKind::DecCrossAttnOut
                | SiteKind::DecFeedForwardOut
        )
    }

    pub fn wiring(self) -> Wiring {
        match self {
            SiteKind::DecCrossAttnKey | SiteKind::DecCrossAttnValue => Wiring::EncoderFinalOutput,
            SiteKind::EncSelfAttnQuery
            | SiteKind::EncSelfAttnValue
            | SiteKind::DecSelfAttnQuery
            | SiteKind::DecSelfAttnValue
            | SiteKind::DecCrossAttnQuery => Wiring::ModuleInput,
            _ => Wiring::ModuleOutput,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SiteKind::EncSelfAttnOut => "self_attn_out",
            SiteKind::EncFeedForwardOut => "ff_out",
            SiteKind::DecSelfAttnOut => "self_attn_out",
            SiteKind::DecCrossAttnOut => "cross_attn_out",
            SiteKind::DecCrossAttnKey => "cross_attn_key",
            SiteKind::DecCrossAttnValue => "cross_attn_value",
            SiteKind::DecFeedForwardOut => "ff_out",
            SiteKind::EncSelfAttnQuery => "self_attn_query",
            SiteKind::EncSelfAttnValue => "self_attn_value",
            SiteKind::DecSelfAttnQuery => "self_attn_query",
            SiteKind::DecSelfAttnValue => "self_attn_value",
            SiteKind::DecCrossAttnQuery => "cross_attn_query",
        }
    }
}

/// A site kind in one layer. Written as `enc.0.self_attn_out`,
/// `dec.1.cross_attn_value` and so on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub kind: SiteKind,
    pub layer: usize,
}

impl Site {
    pub fn new(kind: SiteKind, layer: usize) -> Self {
        Self { kind, layer }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = if self.kind.is_encoder() { "enc" } else { "dec" };
        write!(f, "{side}.{}.{}", self.layer, self.kind.as_str())
    }
}

impl FromStr for Site {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            PetError::config(format!(
                "cannot parse site {s:?}; expected e.g. enc.0.self_attn_out"
            ))
        };
        let mut parts = s.splitn(3, '.');
        let side = parts.next().ok_or_else(bad)?;
        let layer = parts.next().and_then(|l| l.parse().ok()).ok_or_else(bad)?;
        let name = parts.next().ok_or_else(bad)?;
        let encoder = match side {
            "enc" => true,
            "dec" => false,
            _ => return Err(bad()),
        };
        SiteKind::ALL
            .into_iter()
            .find(|k| k.is_encoder() == encoder && k.as_str() == name)
            .map(|kind| Site { kind, layer })
            .ok_or_else(bad)
    }
}

impl Serialize for Site {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Site {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How `ΔH` and `G` combine with `H`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    /// `G ⊙ (H + ΔH)`
    Gated,
    /// `H + ΔH + G`
    Additive,
}

/// Recipe for the `ΔH` producer at a site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DeltaSpec {
    MultiHead {
        variant: HeadVariant,
        r: usize,
        heads: usize,
    },
    Adapter {
        r: usize,
    },
    Lora {
        r: usize,
    },
}

impl DeltaSpec {
    pub fn param_count(&self, d_in: usize, d_out: usize) -> usize {
        match *self {
            DeltaSpec::MultiHead { variant, r, heads } => {
                variant.param_count(d_in, d_out, r, heads)
            }
            DeltaSpec::Adapter { r } | DeltaSpec::Lora { r } => r * (d_in + d_out),
        }
    }
}

/// Everything needed to build one attachment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachmentSpec {
    pub site: Site,
    pub gate: GranularityLevel,
    /// Hidden width of the large gate.
    pub gate_r: usize,
    pub s: f64,
    pub combine: Combine,
    pub delta: DeltaSpec,
}

impl AttachmentSpec {
    pub fn param_count(&self, d: usize) -> usize {
        self.gate.param_count(d, d, self.gate_r) + self.delta.param_count(d, d)
    }
}

/// A built PET module bound to one site.
#[derive(Clone, Debug)]
pub struct PetAttachment {
    pub site: Site,
    pub gate: GranularityController,
    pub modification: Modification,
    pub wiring: Wiring,
    pub combine: Combine,
}

impl PetAttachment {
    pub fn param_count(&self) -> usize {
        self.gate.param_count() + self.modification.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_names_round_trip() {
        for kind in SiteKind::ALL {
            let site = Site::new(kind, 3);
            let parsed: Site = site.to_string().parse().unwrap();
            assert_eq!(parsed, site);
        }
        assert_eq!(
            "dec.1.cross_attn_value".parse::<Site>().unwrap(),
            Site::new(SiteKind::DecCrossAttnValue, 1)
        );
        assert!("enc.x.ff_out".parse::<Site>().is_err());
        assert!("enc.0.cross_attn_value".parse::<Site>().is_err());
    }

    #[test]
    fn wiring_follows_site_kind() {
        assert_eq!(SiteKind::EncSelfAttnOut.wiring(), Wiring::ModuleOutput);
        assert_eq!(SiteKind::EncFeedForwardOut.wiring(), Wiring::ModuleOutput);
        assert_eq!(
            SiteKind::DecCrossAttnValue.wiring(),
            Wiring::EncoderFinalOutput
        );
        assert_eq!(
            SiteKind::DecCrossAttnKey.wiring(),
            Wiring::EncoderFinalOutput
        );
        assert_eq!(SiteKind::DecSelfAttnQuery.wiring(), Wiring::ModuleInput);
    }
}
