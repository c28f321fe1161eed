//! Post-norm encoder–decoder transformer with named PET insertion sites.
//!
//! The encoder reads `[projected visual tokens ‖ text embeddings]` plus
//! learned absolute positions; the decoder is causal, cross-attends to the
//! encoder output, and predicts through the tied token embedding.
//!
//! Batches are packed: every sequence of the batch occupies a contiguous
//! block of rows, so linear layers run once over the whole batch and only
//! attention and pooling look at sequence boundaries.
//!
//! At an attached sublayer site the output `H` is replaced by
//! `G ⊙ (H + ΔH)` before the residual add and LayerNorm:
//!
//! ```text
//! out = LayerNorm(x + G ⊙ (H + ΔH)),   H = sublayer(x)
//! ```

pub mod checkpoint;
pub mod freeze;
pub mod projector;
pub mod sites;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::granularity::{
    apply_update, apply_update_add, GranularityController, InitPolicy, Pooling,
};
use crate::modification::{LoraModification, Modification, MultiHeadModification};
use crate::params::{Fill, Group, Kind, ParamId, ParamStore};
use crate::tensor::{Real, Rng, Segment, Tape, Tensor, Var};

pub use freeze::{FreezePolicy, VisualMode};
pub use projector::{DecomposedSpec, Projector};
pub use sites::{AttachmentSpec, Combine, DeltaSpec, PetAttachment, Site, SiteKind, Wiring};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub vocab: usize,
    /// Rows of each learned position table.
    pub max_len: usize,
    pub visual_dim: usize,
    pub visual_tokens: usize,
    /// Std of attention, feed-forward, position and projector weights.
    pub init_std: f64,
    /// Std of the (tied) token embedding.
    pub embed_std: f64,
    pub ln_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            heads: 4,
            d_ffn: 256,
            vocab: 64,
            max_len: 64,
            visual_dim: 32,
            visual_tokens: 9,
            // A random frozen backbone needs wider weights than a pretrained
            // one for its outputs to be steerable; the embedding std is 1/√d.
            init_std: 0.1,
            embed_std: 0.125,
            ln_eps: 1e-5,
        }
    }

    /// BART-base dimensions with 2048-wide grid features (6×6 tokens).
    pub fn bart_base() -> Self {
        Self {
            d: 768,
            enc_layers: 6,
            dec_layers: 6,
            heads: 12,
            d_ffn: 3072,
            vocab: 50265,
            max_len: 1026,
            visual_dim: 2048,
            visual_tokens: 36,
            init_std: 0.02,
            embed_std: 0.02,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(PetError::config(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.vocab <= EOS || self.max_len == 0 || self.d_ffn == 0 {
            return Err(PetError::config(
                "vocab, max_len and d_ffn must be positive",
            ));
        }
        Ok(())
    }

    /// Backbone weight count: embeddings, positions, layers and norms.
    pub fn backbone_params(&self) -> usize {
        let d = self.d;
        let norm = 2 * d;
        let linear = |i: usize, o: usize| i * o + o;
        let attn = 4 * linear(d, d);
        let ff = linear(d, self.d_ffn) + linear(self.d_ffn, d);
        let enc_layer = attn + ff + 2 * norm;
        let dec_layer = 2 * attn + ff + 3 * norm;
        self.vocab * d
            + 2 * self.max_len * d
            + 2 * norm
            + self.enc_layers * enc_layer
            + self.dec_layers * dec_layer
    }

    /// Weights in encoder-side LayerNorms, including the embedding norm.
    pub fn encoder_norm_params(&self) -> usize {
        2 * self.d * (1 + 2 * self.enc_layers)
    }

    pub fn decoder_norm_params(&self) -> usize {
        2 * self.d * (1 + 3 * self.dec_layers)
    }

    /// Every linear bias plus every LayerNorm shift.
    pub fn bias_params(&self) -> usize {
        let d = self.d;
        let enc = 4 * d + self.d_ffn + d + 2 * d;
        let dec = 8 * d + self.d_ffn + d + 3 * d;
        2 * d + self.enc_layers * enc + self.dec_layers * dec
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub self_attn: AttnBlock,
    pub self_norm: Norm,
    pub ff: FeedForward,
    pub ff_norm: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttnBlock,
    pub self_norm: Norm,
    pub cross_attn: AttnBlock,
    pub cross_norm: Norm,
    pub ff: FeedForward,
    pub ff_norm: Norm,
}

/// One training or evaluation example.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sample {
    /// `visual_tokens × visual_dim` features, row-major; empty for none.
    pub visual: Vec<f64>,
    pub text: Vec<usize>,
    /// Output tokens, ending with [`EOS`].
    pub target: Vec<usize>,
}

impl Sample {
    /// Teacher-forcing decoder input: `BOS` followed by the target shifted right.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len());
        v.push(BOS);
        v.extend_from_slice(&self.target[..self.target.len().saturating_sub(1)]);
        v
    }
}

/// Tape handles observed at one attached site during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SiteRecord {
    pub site: Site,
    /// Module input.
    pub x: Var,
    /// Module output before the update.
    pub h: Var,
    pub delta: Var,
    pub gate: Option<Var>,
    pub updated: Var,
    /// Residual branch input and post-LayerNorm output, for sublayer sites.
    pub residual: Option<Var>,
    pub output: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: Var,
    pub segs: Vec<Segment>,
}

#[derive(Clone, Debug)]
pub struct Output {
    pub logits: Var,
    pub loss: Var,
    pub records: Vec<SiteRecord>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: BackboneConfig,
    pub store: ParamStore<T>,
    embed: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc_embed_norm: Norm,
    dec_embed_norm: Norm,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    projector: Projector,
    visual_mode: VisualMode,
    attachments: BTreeMap<Site, PetAttachment>,
    force_unit_gate: bool,
}

struct Builder<'s, 'r, T> {
    store: &'s mut ParamStore<T>,
    rng: Option<&'r mut Rng>,
    std: f64,
}

impl<T: Real> Builder<'_, '_, T> {
    fn param(
        &mut self,
        name: String,
        shape: &[usize],
        fill: Fill,
        group: Group,
        kind: Kind,
    ) -> Result<ParamId> {
        self.store
            .create(name, shape, fill, self.rng.as_deref_mut(), group, kind)
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.param(
                format!("{name}.w"),
                &[i, o],
                Fill::Normal(self.std),
                Group::Backbone,
                Kind::Weight,
            )?,
            b: self.param(
                format!("{name}.b"),
                &[1, o],
                Fill::Zeros,
                Group::Backbone,
                Kind::Bias,
            )?,
        })
    }

    fn norm(&mut self, name: &str, d: usize, group: Group) -> Result<Norm> {
        Ok(Norm {
            gain: self.param(
                format!("{name}.g"),
                &[1, d],
                Fill::Ones,
                group,
                Kind::NormGain,
            )?,
            shift: self.param(
                format!("{name}.b"),
                &[1, d],
                Fill::Zeros,
                group,
                Kind::NormBias,
            )?,
        })
    }

    fn attn(&mut self, name: &str, d: usize) -> Result<AttnBlock> {
        Ok(AttnBlock {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn ff(&mut self, name: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, f)?,
            down: self.linear(&format!("{name}.down"), f, d)?,
        })
    }
}

impl<T: Real> Model<T> {
    /// Builds the backbone. Without an `rng` all weights are zero (except
    /// LayerNorm gains), which is enough for parameter accounting.
    pub fn new(
        cfg: &BackboneConfig,
        visual_mode: VisualMode,
        decomposed: DecomposedSpec,
        init: InitPolicy,
        rng: Option<&mut Rng>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng,
            std: cfg.init_std,
        };
        let embed = b.param(
            "embed".into(),
            &[cfg.vocab, d],
            Fill::Normal(cfg.embed_std),
            Group::Backbone,
            Kind::Weight,
        )?;
        let enc_pos = b.param(
            "enc.pos".into(),
            &[cfg.max_len, d],
            Fill::Normal(cfg.init_std),
            Group::Backbone,
            Kind::Weight,
        )?;
        let dec_pos = b.param(
            "dec.pos".into(),
            &[cfg.max_len, d],
            Fill::Normal(cfg.init_std),
            Group::Backbone,
            Kind::Weight,
        )?;
        let enc_embed_norm = b.norm("enc.embed_norm", d, Group::EncoderNorm)?;
        let dec_embed_norm = b.norm("dec.embed_norm", d, Group::DecoderNorm)?;
        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            enc.push(EncoderLayer {
                self_attn: b.attn(&format!("enc.{l}.self_attn"), d)?,
                self_norm: b.norm(&format!("enc.{l}.self_norm"), d, Group::EncoderNorm)?,
                ff: b.ff(&format!("enc.{l}.ff"), d, cfg.d_ffn)?,
                ff_norm: b.norm(&format!("enc.{l}.ff_norm"), d, Group::EncoderNorm)?,
            });
        }
        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            dec.push(DecoderLayer {
                self_attn: b.attn(&format!("dec.{l}.self_attn"), d)?,
                self_norm: b.norm(&format!("dec.{l}.self_norm"), d, Group::DecoderNorm)?,
                cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d)?,
                cross_norm: b.norm(&format!("dec.{l}.cross_norm"), d, Group::DecoderNorm)?,
                ff: b.ff(&format!("dec.{l}.ff"), d, cfg.d_ffn)?,
                ff_norm: b.norm(&format!("dec.{l}.ff_norm"), d, Group::DecoderNorm)?,
            });
        }
        let Builder { rng, std, .. } = b;
        let projector = Projector::new(
            &mut store,
            visual_mode,
            cfg.visual_dim,
            d,
            std,
            decomposed,
            init,
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            embed,
            enc_pos,
            dec_pos,
            enc_embed_norm,
            dec_embed_norm,
            enc,
            dec,
            projector,
            visual_mode,
            attachments: BTreeMap::new(),
            force_unit_gate: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn visual_mode(&self) -> VisualMode {
        self.visual_mode
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn encoder_layers(&self) -> &[EncoderLayer] {
        &self.enc
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.dec
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    pub fn position_ids(&self) -> (ParamId, ParamId) {
        (self.enc_pos, self.dec_pos)
    }

    pub fn embed_norms(&self) -> (Norm, Norm) {
        (self.enc_embed_norm, self.dec_embed_norm)
    }

    pub fn attachments(&self) -> impl Iterator<Item = &PetAttachment> {
        self.attachments.values()
    }

    pub fn attachment(&self, site: Site) -> Option<&PetAttachment> {
        self.attachments.get(&site)
    }

    /// Replaces every generated gate with ones.
    pub fn set_force_unit_gate(&mut self, flag: bool) {
        self.force_unit_gate = flag;
    }

    fn site_exists(&self, site: Site) -> bool {
        let layers = if site.kind.is_encoder() {
            self.cfg.enc_layers
        } else {
            self.cfg.dec_layers
        };
        site.layer < layers
    }

    /// Builds and binds one PET module per spec.
    pub fn attach(
        &mut self,
        specs: &[AttachmentSpec],
        init: InitPolicy,
        mut rng: Option<&mut Rng>,
    ) -> Result<()> {
        let d = self.cfg.d;
        for spec in specs {
            if !self.site_exists(spec.site) {
                return Err(PetError::config(format!(
                    "site {} is outside the configured layers",
                    spec.site
                )));
            }
            if self.attachments.contains_key(&spec.site) {
                return Err(PetError::config(format!(
                    "site {} already has an attachment",
                    spec.site
                )));
            }
            let prefix = format!("pet.{}", spec.site);
            let gate = GranularityController::new(
                &mut self.store,
                &prefix,
                spec.gate,
                d,
                d,
                spec.gate_r,
                spec.s,
                init,
                rng.as_deref_mut(),
            )?;
            let modification = match spec.delta {
                DeltaSpec::MultiHead { variant, r, heads } => {
                    Modification::MultiHead(MultiHeadModification::new(
                        &mut self.store,
                        &prefix,
                        variant,
                        d,
                        d,
                        r,
                        heads,
                        init,
                        rng.as_deref_mut(),
                    )?)
                }
                DeltaSpec::Adapter { r } => Modification::adapter(
                    &mut self.store,
                    &prefix,
                    d,
                    d,
                    r,
                    init,
                    rng.as_deref_mut(),
                )?,
                DeltaSpec::Lora { r } => Modification::Lora(LoraModification::new(
                    &mut self.store,
                    &prefix,
                    d,
                    d,
                    r,
                    init,
                    rng.as_deref_mut(),
                )?),
            };
            self.attachments.insert(
                spec.site,
                PetAttachment {
                    site: spec.site,
                    gate,
                    modification,
                    wiring: spec.site.kind.wiring(),
                    combine: spec.combine,
                },
            );
        }
        Ok(())
    }

    pub fn apply_freeze(&mut self, policy: &FreezePolicy) {
        policy.apply(&mut self.store);
    }

    // ---------------------------------------------------------------
    // Building blocks
    // ---------------------------------------------------------------

    fn linear(&self, tape: &mut Tape<T>, lin: Linear, x: Var) -> Result<Var> {
        let w = self.store.bind(tape, lin.w)?;
        let b = self.store.bind(tape, lin.b)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape<T>, n: Norm, x: Var) -> Result<Var> {
        let g = self.store.bind(tape, n.gain)?;
        let b = self.store.bind(tape, n.shift)?;
        let y = tape.normalize_rows(x, self.cfg.ln_eps);
        let y = tape.mul_row(y, g)?;
        tape.add_row(y, b)
    }

    /// Applies the attachment at `site`, if any, to `h`.
    #[allow(clippy::too_many_arguments)]
    fn site(
        &self,
        tape: &mut Tape<T>,
        site: Site,
        x: Var,
        h: Var,
        memory: Option<Var>,
        pool: &Pooling,
        records: &mut Vec<SiteRecord>,
    ) -> Result<Var> {
        let Some(att) = self.attachments.get(&site) else {
            return Ok(h);
        };
        let x_prime = match att.wiring {
            Wiring::ModuleOutput => h,
            Wiring::ModuleInput => x,
            Wiring::EncoderFinalOutput => memory.unwrap_or(x),
        };
        let delta = att.modification.forward(tape, &self.store, x_prime)?;
        let gate = if self.force_unit_gate {
            None
        } else {
            att.gate.generate(tape, &self.store, x, h, pool)?
        };
        let updated = match (att.combine, gate) {
            (Combine::Additive, Some(g)) => apply_update_add(tape, h, delta, g)?,
            (_, g) => apply_update(tape, h, delta, g)?,
        };
        records.push(SiteRecord {
            site,
            x,
            h,
            delta,
            gate,
            updated,
            residual: None,
            output: None,
        });
        Ok(updated)
    }

    /// `LayerNorm(x + h)`, noting the result on the site's record.
    fn residual_norm(
        &self,
        tape: &mut Tape<T>,
        norm: Norm,
        x: Var,
        h: Var,
        site: Site,
        records: &mut [SiteRecord],
    ) -> Result<Var> {
        let sum = tape.add(x, h)?;
        let out = self.norm(tape, norm, sum)?;
        if let Some(r) = records.last_mut().filter(|r| r.site == site) {
            r.residual = Some(x);
            r.output = Some(out);
        }
        Ok(out)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<T>,
        block: AttnBlock,
        xq: Var,
        xkv: Var,
        q_segs: &[Segment],
        k_segs: &[Segment],
        causal: bool,
        sites: [Option<Site>; 3],
        q_pool: &Pooling,
        k_pool: &Pooling,
        records: &mut Vec<SiteRecord>,
    ) -> Result<Var> {
        let [q_site, k_site, v_site] = sites;
        let memory = (!causal).then_some(xkv);
        let mut q = self.linear(tape, block.q, xq)?;
        if let Some(s) = q_site {
            q = self.site(tape, s, xq, q, None, q_pool, records)?;
        }
        let mut k = self.linear(tape, block.k, xkv)?;
        if let Some(s) = k_site {
            k = self.site(tape, s, xkv, k, memory, k_pool, records)?;
        }
        let mut v = self.linear(tape, block.v, xkv)?;
        // Value modules act per memory token, before the attention mix.
        if let Some(s) = v_site {
            v = self.site(tape, s, xkv, v, memory, k_pool, records)?;
        }
        let a = tape.attention(q, k, v, q_segs, k_segs, self.cfg.heads, causal)?;
        self.linear(tape, block.o, a)
    }

    fn feed_forward(&self, tape: &mut Tape<T>, ff: FeedForward, x: Var) -> Result<Var> {
        let h = self.linear(tape, ff.up, x)?;
        let h = tape.gelu(h);
        self.linear(tape, ff.down, h)
    }

    // ---------------------------------------------------------------
    // Forward
    // ---------------------------------------------------------------

    /// Projects visual features through the configured projector.
    pub fn project_visual(&self, tape: &mut Tape<T>, feats: Var) -> Result<Var> {
        self.projector
            .forward(tape, &self.store, feats, self.force_unit_gate)
    }

    /// Encoder input rows (embedding LayerNorm applied) and segments.
    fn encoder_input(
        &self,
        tape: &mut Tape<T>,
        samples: &[&Sample],
    ) -> Result<(Var, Vec<Segment>)> {
        if samples.is_empty() {
            return Err(PetError::contract("empty batch"));
        }
        let nv = self.cfg.visual_tokens;
        let vdim = self.cfg.visual_dim;
        let use_visual = !self.projector.is_absent();
        let mut vis = Vec::new();
        let mut ids = Vec::new();
        let mut segs = Vec::with_capacity(samples.len());
        let mut lens = Vec::with_capacity(samples.len());
        for s in samples {
            let v_rows = if use_visual && !s.visual.is_empty() {
                if s.visual.len() != nv * vdim {
                    return Err(PetError::dim(
                        "visual features",
                        &[nv, vdim],
                        &[s.visual.len()],
                    ));
                }
                vis.extend(s.visual.iter().map(|&v| T::of(v)));
                nv
            } else {
                0
            };
            let len = v_rows + s.text.len();
            if len == 0 {
                return Err(PetError::contract("empty encoder input"));
            }
            if len > self.cfg.max_len {
                return Err(PetError::contract(format!(
                    "encoder input of {len} tokens exceeds max_len {}",
                    self.cfg.max_len
                )));
            }
            ids.extend_from_slice(&s.text);
            lens.push((v_rows, s.text.len()));
        }
        let n_vis = vis.len() / vdim.max(1);
        let table = self.store.bind(tape, self.embed)?;
        let text = if ids.is_empty() {
            None
        } else {
            Some(tape.gather(table, &ids)?)
        };
        let rows = if n_vis > 0 {
            let feats = tape.matrix(n_vis, vdim, vis, false)?;
            let proj = self.project_visual(tape, feats)?;
            let all = match text {
                Some(t) => tape.concat_rows(&[proj, t])?,
                None => proj,
            };
            let mut order = Vec::with_capacity(n_vis + ids.len());
            let (mut vi, mut ti) = (0, n_vis);
            for &(v, t) in &lens {
                order.extend(vi..vi + v);
                order.extend(ti..ti + t);
                vi += v;
                ti += t;
            }
            tape.group_expand(all, order)?
        } else {
            text.expect("non-empty input without visual rows has text")
        };
        let mut pos = Vec::new();
        let mut start = 0;
        for &(v, t) in &lens {
            pos.extend(0..v + t);
            segs.push((start, v + t));
            start += v + t;
        }
        let pos_table = self.store.bind(tape, self.enc_pos)?;
        let p = tape.gather(pos_table, &pos)?;
        let x = tape.add(rows, p)?;
        let x = self.norm(tape, self.enc_embed_norm, x)?;
        Ok((x, segs))
    }

    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        samples: &[&Sample],
        records: &mut Vec<SiteRecord>,
    ) -> Result<Encoded> {
        let (mut x, segs) = self.encoder_input(tape, samples)?;
        let pool = Pooling::segments(tape.shape(x).0, &segs);
        for (l, layer) in self.enc.iter().enumerate() {
            let sa = Site::new(SiteKind::EncSelfAttnOut, l);
            let h = self.attention(
                tape,
                layer.self_attn,
                x,
                x,
                &segs,
                &segs,
                false,
                [
                    Some(Site::new(SiteKind::EncSelfAttnQuery, l)),
                    None,
                    Some(Site::new(SiteKind::EncSelfAttnValue, l)),
                ],
                &pool,
                &pool,
                records,
            )?;
            let h = self.site(tape, sa, x, h, None, &pool, records)?;
            x = self.residual_norm(tape, layer.self_norm, x, h, sa, records)?;

            let ff = Site::new(SiteKind::EncFeedForwardOut, l);
            let h = self.feed_forward(tape, layer.ff, x)?;
            let h = self.site(tape, ff, x, h, None, &pool, records)?;
            x = self.residual_norm(tape, layer.ff_norm, x, h, ff, records)?;
        }
        Ok(Encoded { out: x, segs })
    }

    /// Decoder logits for the given input token sequences.
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        enc: &Encoded,
        inputs: &[Vec<usize>],
        records: &mut Vec<SiteRecord>,
    ) -> Result<Var> {
        if inputs.len() != enc.segs.len() {
            return Err(PetError::dim(
                "decode batch",
                &[enc.segs.len()],
                &[inputs.len()],
            ));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::with_capacity(inputs.len());
        for seq in inputs {
            if seq.is_empty() || seq.len() > self.cfg.max_len {
                return Err(PetError::contract(format!(
                    "decoder input length {} outside 1..={}",
                    seq.len(),
                    self.cfg.max_len
                )));
            }
            segs.push((ids.len(), seq.len()));
            ids.extend_from_slice(seq);
            pos.extend(0..seq.len());
        }
        let table = self.store.bind(tape, self.embed)?;
        let e = tape.gather(table, &ids)?;
        let pos_table = self.store.bind(tape, self.dec_pos)?;
        let p = tape.gather(pos_table, &pos)?;
        let y = tape.add(e, p)?;
        let mut y = self.norm(tape, self.dec_embed_norm, y)?;
        let pool = Pooling::segments(ids.len(), &segs);
        let mem_pool = Pooling::segments(tape.shape(enc.out).0, &enc.segs);
        for (l, layer) in self.dec.iter().enumerate() {
            let sa = Site::new(SiteKind::DecSelfAttnOut, l);
            let h = self.attention(
                tape,
                layer.self_attn,
                y,
                y,
                &segs,
                &segs,
                true,
                [
                    Some(Site::new(SiteKind::DecSelfAttnQuery, l)),
                    None,
                    Some(Site::new(SiteKind::DecSelfAttnValue, l)),
                ],
                &pool,
                &pool,
                records,
            )?;
            let h = self.site(tape, sa, y, h, None, &pool, records)?;
            y = self.residual_norm(tape, layer.self_norm, y, h, sa, records)?;

            let ca = Site::new(SiteKind::DecCrossAttnOut, l);
            let h = self.attention(
                tape,
                layer.cross_attn,
                y,
                enc.out,
                &segs,
                &enc.segs,
                false,
                [
                    Some(Site::new(SiteKind::DecCrossAttnQuery, l)),
                    Some(Site::new(SiteKind::DecCrossAttnKey, l)),
                    Some(Site::new(SiteKind::DecCrossAttnValue, l)),
                ],
                &pool,
                &mem_pool,
                records,
            )?;
            let h = self.site(tape, ca, y, h, None, &pool, records)?;
            y = self.residual_norm(tape, layer.cross_norm, y, h, ca, records)?;

            let ff = Site::new(SiteKind::DecFeedForwardOut, l);
            let h = self.feed_forward(tape, layer.ff, y)?;
            let h = self.site(tape, ff, y, h, None, &pool, records)?;
            y = self.residual_norm(tape, layer.ff_norm, y, h, ff, records)?;
        }
        tape.matmul_t(y, table)
    }

    /// Teacher-forced logits and mean token cross-entropy.
    pub fn forward(&self, tape: &mut Tape<T>, samples: &[&Sample]) -> Result<Output> {
        let mut records = Vec::new();
        let enc = self.encode(tape, samples, &mut records)?;
        let inputs: Vec<Vec<usize>> = samples.iter().map(|s| s.decoder_input()).collect();
        let logits = self.decode(tape, &enc, &inputs, &mut records)?;
        let targets: Vec<usize> = samples
            .iter()
            .flat_map(|s| s.target.iter().copied())
            .collect();
        let loss = tape.cross_entropy(logits, &targets)?;
        Ok(Output {
            logits,
            loss,
            records,
        })
    }

    /// Loss value and, if anything is trainable, gradients absorbed into the
    /// store.
    pub fn loss_and_grad(&mut self, samples: &[&Sample]) -> Result<f64> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, samples)?;
        tape.backward(out.loss)?;
        self.store.absorb_grads(&tape);
        Ok(tape.scalar(out.loss).as_f64())
    }

    /// Teacher-forced loss without building gradients.
    pub fn loss(&self, samples: &[&Sample]) -> Result<f64> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, samples)?;
        Ok(tape.scalar(out.loss).as_f64())
    }

    /// Greedy decoding; each output stops after `EOS` or `max_new` tokens.
    pub fn greedy(&self, samples: &[&Sample], max_new: usize) -> Result<Vec<Vec<usize>>> {
        let mut tape = Tape::inference();
        let mut records = Vec::new();
        let enc = self.encode(&mut tape, samples, &mut records)?;
        let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; samples.len()];
        let mut done = vec![false; samples.len()];
        let vocab = self.cfg.vocab;
        let max_new = max_new.min(self.cfg.max_len - 1);
        for _ in 0..max_new {
            if done.iter().all(|&d| d) {
                break;
            }
            // Finished sequences keep decoding; their extra tokens are dropped.
            let logits = self.decode(&mut tape, &enc, &seqs, &mut records)?;
            let lv = tape.value(logits);
            let mut row = 0;
            let mut next = Vec::with_capacity(seqs.len());
            for seq in &seqs {
                row += seq.len();
                let last = &lv[(row - 1) * vocab..row * vocab];
                let best = last
                    .iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    )
                    .0;
                next.push(best);
            }
            for ((seq, d), tok) in seqs.iter_mut().zip(done.iter_mut()).zip(next) {
                if !*d {
                    seq.push(tok);
                    *d = tok == EOS;
                } else {
                    seq.push(PAD);
                }
            }
            records.clear();
        }
        Ok(seqs
            .into_iter()
            .map(|s| {
                let mut out: Vec<usize> = s.into_iter().skip(1).collect();
                if let Some(p) = out.iter().position(|&t| t == EOS) {
                    out.truncate(p + 1);
                }
                out
            })
            .collect())
    }

    /// The gate produced at `site` for one sample, as an `N × d` matrix.
    pub fn gate_matrix(&self, sample: &Sample, site: Site) -> Result<Tensor<T>> {
        if !self.attachments.contains_key(&site) {
            return Err(PetError::config(format!("no attachment at site {site}")));
        }
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &[sample])?;
        let rec = out
            .records
            .iter()
            .find(|r| r.site == site)
            .ok_or_else(|| PetError::contract(format!("site {site} was not visited")))?;
        Ok(match rec.gate {
            Some(g) => tape.tensor(g),
            None => {
                let (n, d) = tape.shape(rec.h);
                Tensor::ones(&[n, d])
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::granularity::GranularityLevel;
    use crate::modification::HeadVariant;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            d: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            d_ffn: 16,
            vocab: 12,
            max_len: 16,
            visual_dim: 4,
            visual_tokens: 2,
            init_std: 0.3,
            embed_std: 0.5,
            ln_eps: 1e-5,
        }
    }

    fn spec() -> DecomposedSpec {
        DecomposedSpec {
            r: 4,
            heads: 2,
            gated: false,
            s: 1.0,
        }
    }

    fn sample(rng: &mut Rng, cfg: &BackboneConfig) -> Sample {
        Sample {
            visual: (0..cfg.visual_tokens * cfg.visual_dim)
                .map(|_| rng.normal())
                .collect(),
            text: vec![3, 4, 5],
            target: vec![6, 7, EOS],
        }
    }

    #[test]
    fn counts_agree_with_closed_form() {
        let cfg = tiny();
        let m =
            Model::<f64>::new(&cfg, VisualMode::Absent, spec(), InitPolicy::ZeroUp, None).unwrap();
        assert_eq!(m.store.total_count(), cfg.backbone_params());
        assert_eq!(
            m.store.count_where(|e| e.group == Group::EncoderNorm),
            cfg.encoder_norm_params()
        );
        assert_eq!(
            m.store.count_where(|e| e.group == Group::DecoderNorm),
            cfg.decoder_norm_params()
        );
        assert_eq!(m.store.count_where(|e| e.kind.is_bias()), cfg.bias_params());
    }

    #[test]
    fn bart_base_backbone_count() {
        assert_eq!(BackboneConfig::bart_base().backbone_params(), 139_420_416);
    }

    #[test]
    fn duplicate_and_out_of_range_sites_are_rejected() {
        let cfg = tiny();
        let mut m =
            Model::<f64>::new(&cfg, VisualMode::Absent, spec(), InitPolicy::ZeroUp, None).unwrap();
        let a = AttachmentSpec {
            site: Site::new(SiteKind::EncSelfAttnOut, 0),
            gate: GranularityLevel::Large,
            gate_r: 4,
            s: 1.0,
            combine: Combine::Gated,
            delta: DeltaSpec::MultiHead {
                variant: HeadVariant::Down,
                r: 4,
                heads: 2,
            },
        };
        m.attach(&[a], InitPolicy::ZeroUp, None).unwrap();
        assert!(matches!(
            m.attach(&[a], InitPolicy::ZeroUp, None),
            Err(PetError::Config(_))
        ));
        let far = AttachmentSpec {
            site: Site::new(SiteKind::EncSelfAttnOut, 5),
            ..a
        };
        assert!(matches!(
            m.attach(&[far], InitPolicy::ZeroUp, None),
            Err(PetError::Config(_))
        ));
    }

    #[test]
    fn overlength_input_is_a_contract_error() {
        let cfg = tiny();
        let m = Model::<f64>::new(
            &cfg,
            VisualMode::Absent,
            spec(),
            InitPolicy::ZeroUp,
            Some(&mut Rng::new(1)),
        )
        .unwrap();
        let s = Sample {
            visual: vec![],
            text: vec![3; 40],
            target: vec![EOS],
        };
        assert!(matches!(m.loss(&[&s]), Err(PetError::Contract(_))));
    }

    #[test]
    fn packed_batch_matches_individual_losses() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let m = Model::<f64>::new(
            &cfg,
            VisualMode::Trainable,
            spec(),
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .unwrap();
        let a = sample(&mut rng, &cfg);
        let mut b = sample(&mut rng, &cfg);
        b.text = vec![9, 10];
        b.target = vec![3, 3, 4, EOS];
        let both = m.loss(&[&a, &b]).unwrap();
        let la = m.loss(&[&a]).unwrap();
        let lb = m.loss(&[&b]).unwrap();
        let weighted = (la * 3.0 + lb * 4.0) / 7.0;
        assert!((both - weighted).abs() < 1e-12, "{both} vs {weighted}");
    }

    #[test]
    fn greedy_output_ends_at_eos_or_limit() {
        let cfg = tiny();
        let mut rng = Rng::new(4);
        let m = Model::<f64>::new(
            &cfg,
            VisualMode::Trainable,
            spec(),
            InitPolicy::GaussianAll,
            Some(&mut rng),
        )
        .unwrap();
        let s = sample(&mut rng, &cfg);
        let out = m.greedy(&[&s, &s], 5).unwrap();
        assert_eq!(out[0], out[1]);
        assert!(out[0].len() <= 5);
    }
}
