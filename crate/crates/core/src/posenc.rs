//! Positional encodings: none, absolute, relative, their structure-informed
//! versions, and the nonstationary relative kernel.
//!
//! Absolute variants add one embedding per index stream to the projected
//! input. Relative variants add `q_t · p(i_t - i_t')` per stream to the
//! attention logits; the nonstationary variants further add
//! `q_t · (p_lag(t - t') + p_abs(t))` for pairs sharing the same label of one
//! category and nothing otherwise.
//!
//! Relative terms are computed by projecting the queries onto the whole
//! embedding table once (`q · Tᵀ`, an `L × rows` matrix) and gathering the
//! entry for each pair's clipped difference, so the cost per stream is
//! `O(L · rows · d_head + L²)`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{measure_indices, Category, StructureVector, REST};
use crate::pianoroll::{Window, RESOLUTION};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var, GATHER_NONE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    NoPe,
    Ape,
    Rpe,
    LearnedSApe,
    SinusoidalSApe,
    LearnedSRpe,
    SinusoidalSRpe,
    NsRpeChord,
    NsRpeSection,
    SApeBaseline,
    SRpeBaseline,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::NoPe,
        Variant::Ape,
        Variant::Rpe,
        Variant::LearnedSApe,
        Variant::SinusoidalSApe,
        Variant::LearnedSRpe,
        Variant::SinusoidalSRpe,
        Variant::NsRpeChord,
        Variant::NsRpeSection,
        Variant::SApeBaseline,
        Variant::SRpeBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NoPe => "NoPE",
            Variant::Ape => "APE",
            Variant::Rpe => "RPE",
            Variant::LearnedSApe => "L-S-APE",
            Variant::SinusoidalSApe => "S-S-APE",
            Variant::LearnedSRpe => "L-S-RPE",
            Variant::SinusoidalSRpe => "S-S-RPE",
            Variant::NsRpeChord => "NS-RPE-chord",
            Variant::NsRpeSection => "NS-RPE-section",
            Variant::SApeBaseline => "S-APE/b",
            Variant::SRpeBaseline => "S-RPE/b",
        }
    }

    pub fn is_absolute(self) -> bool {
        matches!(
            self,
            Variant::Ape | Variant::LearnedSApe | Variant::SinusoidalSApe | Variant::SApeBaseline
        )
    }

    pub fn is_relative(self) -> bool {
        matches!(
            self,
            Variant::Rpe
                | Variant::LearnedSRpe
                | Variant::SinusoidalSRpe
                | Variant::NsRpeChord
                | Variant::NsRpeSection
                | Variant::SRpeBaseline
        )
    }

    /// The category whose labels gate the nonstationary kernel.
    pub fn ns_category(self) -> Option<Category> {
        match self {
            Variant::NsRpeChord => Some(Category::Chord),
            Variant::NsRpeSection => Some(Category::Section),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown PE variant `{s}`")))
    }
}

impl Serialize for Variant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Learnable,
    Sinusoidal,
}

/// One positional index per timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    /// Timestep within the window.
    Time,
    Structure(Category),
    /// Bar number within the window.
    Bar,
    /// Step within the bar.
    PosInBar,
}

impl StreamKind {
    pub fn name(self) -> String {
        match self {
            StreamKind::Time => "time".into(),
            StreamKind::Structure(c) => c.name().into(),
            StreamKind::Bar => "bar".into(),
            StreamKind::PosInBar => "pos_in_bar".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PEConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub structural_set: Vec<Category>,
    /// Clipping radius for temporal lags.
    pub k_time: usize,
    /// Clipping radius for ordinal differences (tempo, section, chord, bar).
    pub k_ordinal: usize,
    /// Clipping radius for melody-pitch intervals.
    pub k_mpitch: usize,
    /// Embedding used by the nonstationary variants for all their tables.
    pub ns_embedding: EmbeddingKind,
    /// Longest sequence the learnable position tables must cover.
    pub max_len: usize,
    pub beats_per_bar: usize,
}

impl Default for PEConfig {
    fn default() -> Self {
        PEConfig {
            variant: Variant::NoPe,
            d_model: 256,
            structural_set: Category::ALL.to_vec(),
            k_time: 128,
            k_ordinal: 16,
            k_mpitch: 48,
            ns_embedding: EmbeddingKind::Learnable,
            max_len: 1024,
            beats_per_bar: 4,
        }
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Category::parse(&s).map_err(serde::de::Error::custom)
    }
}

impl PEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        if self.k_time == 0 || self.k_ordinal == 0 || self.k_mpitch == 0 {
            return Err(Error::Config("clipping radii must be >= 1".into()));
        }
        if self.max_len == 0 || self.beats_per_bar == 0 {
            return Err(Error::Config("max_len and beats_per_bar must be >= 1".into()));
        }
        let mut seen = self.structural_set.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.structural_set.len() {
            return Err(Error::Config("structural_set has duplicates".into()));
        }
        let structural = matches!(
            self.variant,
            Variant::LearnedSApe
                | Variant::SinusoidalSApe
                | Variant::LearnedSRpe
                | Variant::SinusoidalSRpe
                | Variant::NsRpeChord
                | Variant::NsRpeSection
        );
        if structural && self.structural_set.is_empty() {
            return Err(Error::Config(format!("{} needs a structural set", self.variant)));
        }
        if let Some(phi) = self.variant.ns_category() {
            if !self.structural_set.contains(&phi) {
                return Err(Error::Config(format!(
                    "{} requires {phi} in the structural set",
                    self.variant
                )));
            }
        }
        Ok(())
    }

    /// Index streams consumed by the variant, in table order.
    pub fn streams(&self) -> Vec<StreamKind> {
        let structural = || {
            self.structural_set
                .iter()
                .map(|&c| StreamKind::Structure(c))
                .collect()
        };
        match self.variant {
            Variant::NoPe => vec![],
            Variant::Ape | Variant::Rpe => vec![StreamKind::Time],
            Variant::LearnedSApe
            | Variant::SinusoidalSApe
            | Variant::LearnedSRpe
            | Variant::SinusoidalSRpe
            | Variant::NsRpeChord
            | Variant::NsRpeSection => structural(),
            Variant::SApeBaseline => vec![StreamKind::Bar, StreamKind::PosInBar],
            Variant::SRpeBaseline => {
                vec![StreamKind::Structure(Category::Mpitch), StreamKind::Time]
            }
        }
    }

    /// Embedding used for the stream tables of this variant.
    pub fn embedding(&self) -> EmbeddingKind {
        match self.variant {
            Variant::Ape | Variant::SinusoidalSApe | Variant::SinusoidalSRpe => {
                EmbeddingKind::Sinusoidal
            }
            Variant::NsRpeChord | Variant::NsRpeSection => self.ns_embedding,
            _ => EmbeddingKind::Learnable,
        }
    }

    pub fn clip_radius(&self, kind: StreamKind) -> usize {
        match kind {
            StreamKind::Time => self.k_time,
            StreamKind::Structure(Category::Mpitch) => self.k_mpitch,
            StreamKind::Structure(_) | StreamKind::Bar => self.k_ordinal,
            StreamKind::PosInBar => RESOLUTION * self.beats_per_bar,
        }
    }

    /// Rows of a learnable absolute table for a stream.
    pub fn absolute_capacity(&self, kind: StreamKind) -> usize {
        let bar = RESOLUTION * self.beats_per_bar;
        match kind {
            StreamKind::Structure(Category::Mpitch) => REST as usize + 1,
            StreamKind::PosInBar => bar,
            StreamKind::Bar => self.max_len.div_ceil(bar) + 1,
            StreamKind::Time | StreamKind::Structure(_) => self.max_len,
        }
    }
}

/// `[sin(i w_0), cos(i w_0), sin(i w_1), …]` with `w_m = 10000^(-2m/d)`.
pub fn sinusoidal_embed(i: i64, d: usize) -> Vec<f64> {
    assert!(d % 2 == 0, "sinusoidal width must be even");
    let mut out = vec![0.0; d];
    for m in 0..d / 2 {
        let angle = i as f64 / 10000f64.powf(2.0 * m as f64 / d as f64);
        out[2 * m] = angle.sin();
        out[2 * m + 1] = angle.cos();
    }
    out
}

fn sinusoid_table(from: i64, to: i64, d: usize) -> Tensor {
    let rows: Vec<f64> = (from..=to).flat_map(|i| sinusoidal_embed(i, d)).collect();
    Tensor::new(vec![(to - from + 1) as usize, d], rows).expect("table shape")
}

/// Index streams for one window.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionIndices {
    pub len: usize,
    pub streams: Vec<(StreamKind, Vec<i64>)>,
    /// Labels of the nonstationary category, when the variant uses one.
    pub phi: Option<Vec<i64>>,
}

impl PositionIndices {
    pub fn new(
        len: usize,
        streams: Vec<(StreamKind, Vec<i64>)>,
        phi: Option<Vec<i64>>,
    ) -> Result<Self> {
        if streams.iter().any(|(_, v)| v.len() != len) || phi.as_ref().is_some_and(|p| p.len() != len) {
            return Err(Error::Shape(format!("index streams must all have length {len}")));
        }
        Ok(PositionIndices { len, streams, phi })
    }

    /// Streams for `window` of a song whose per-step structure is given.
    /// Ordinal streams restart at 0 at the window start, as does time.
    pub fn for_window(
        cfg: &PEConfig,
        structure: &[StructureVector],
        window: Window,
    ) -> Result<Self> {
        if window.end() > structure.len() || window.length == 0 {
            return Err(Error::Index(format!(
                "window [{}, {}) outside {} labelled steps",
                window.start,
                window.end(),
                structure.len()
            )));
        }
        let steps = &structure[window.start..window.end()];
        let measures = measure_indices(window.end(), cfg.beats_per_bar)?;
        let measures = &measures[window.start..];
        let stream = |kind: StreamKind| -> Vec<i64> {
            match kind {
                StreamKind::Time => (0..window.length as i64).collect(),
                StreamKind::Structure(Category::Mpitch) => {
                    steps.iter().map(|v| v.mpitch as i64).collect()
                }
                StreamKind::Structure(c) => {
                    let base = steps[0].get(c);
                    steps.iter().map(|v| v.get(c) - base).collect()
                }
                StreamKind::Bar => {
                    let base = measures[0].0 as i64;
                    measures.iter().map(|m| m.0 as i64 - base).collect()
                }
                StreamKind::PosInBar => measures.iter().map(|m| m.1 as i64).collect(),
            }
        };
        let streams = cfg.streams().into_iter().map(|k| (k, stream(k))).collect();
        let phi = cfg
            .variant
            .ns_category()
            .map(|c| steps.iter().map(|v| v.get(c)).collect());
        PositionIndices::new(window.length, streams, phi)
    }

    pub fn stream(&self, kind: StreamKind) -> Option<&[i64]> {
        self.streams
            .iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, v)| v.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    /// Bar number and position in bar.
    SApeB,
    /// Melody pitch and onset time.
    SRpeB,
}

/// Index streams of the structure baselines for a whole roll.
pub fn baseline_indices(
    mode: BaselineMode,
    melody: &[u8],
    beats_per_bar: usize,
) -> Result<Vec<(StreamKind, Vec<i64>)>> {
    let n = melody.len();
    Ok(match mode {
        BaselineMode::SApeB => {
            let m = measure_indices(n, beats_per_bar)?;
            vec![
                (StreamKind::Bar, m.iter().map(|x| x.0 as i64).collect()),
                (StreamKind::PosInBar, m.iter().map(|x| x.1 as i64).collect()),
            ]
        }
        BaselineMode::SRpeB => vec![
            (
                StreamKind::Structure(Category::Mpitch),
                melody.iter().map(|&p| p as i64).collect(),
            ),
            (StreamKind::Time, (0..n as i64).collect()),
        ],
    })
}

/// Learnable tables of one model's positional encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct PEState {
    pub cfg: PEConfig,
    pub d_head: usize,
    /// Learnable absolute tables, `capacity × d_model`.
    pub ape_tables: Vec<(StreamKind, ParamId)>,
    /// Learnable relative tables, `(2K + 1) × d_head`, row `diff + K`.
    pub rpe_tables: Vec<(StreamKind, ParamId)>,
    /// Nonstationary lag table, `(2 k_time + 1) × d_head`.
    pub ns_lag: Option<ParamId>,
    /// Nonstationary absolute-position table, `max_len × d_head`.
    pub ns_abs: Option<ParamId>,
}

impl PEState {
    pub fn new<R: Rng>(
        cfg: &PEConfig,
        d_head: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if d_head % 2 != 0 && cfg.variant.is_relative() {
            return Err(Error::Config(format!("d_head {d_head} must be even")));
        }
        let init = Init::Normal { std: 0.02 };
        let mut state = PEState {
            cfg: cfg.clone(),
            d_head,
            ape_tables: vec![],
            rpe_tables: vec![],
            ns_lag: None,
            ns_abs: None,
        };
        let learnable = cfg.embedding() == EmbeddingKind::Learnable;
        for kind in cfg.streams() {
            if cfg.variant.is_absolute() && learnable {
                let rows = cfg.absolute_capacity(kind);
                let id = store.add(format!("pe.ape.{}", kind.name()), &[rows, cfg.d_model], init, rng)?;
                state.ape_tables.push((kind, id));
            }
            if cfg.variant.is_relative() && learnable {
                let rows = 2 * cfg.clip_radius(kind) + 1;
                let id = store.add(format!("pe.rpe.{}", kind.name()), &[rows, d_head], init, rng)?;
                state.rpe_tables.push((kind, id));
            }
        }
        if cfg.variant.ns_category().is_some() && learnable {
            state.ns_lag = Some(store.add("pe.ns.lag", &[2 * cfg.k_time + 1, d_head], init, rng)?);
            state.ns_abs = Some(store.add("pe.ns.abs", &[cfg.max_len, d_head], init, rng)?);
        }
        Ok(state)
    }

    fn rpe_table(&self, kind: StreamKind) -> Option<ParamId> {
        self.rpe_tables.iter().find(|(k, _)| *k == kind).map(|(_, id)| *id)
    }

    fn ape_table(&self, kind: StreamKind) -> Option<ParamId> {
        self.ape_tables.iter().find(|(k, _)| *k == kind).map(|(_, id)| *id)
    }

    /// `p_lag(lag)` of the nonstationary kernel.
    pub fn ns_lag_embedding(&self, store: &ParamStore, lag: i64) -> Vec<f64> {
        match self.ns_lag {
            Some(id) => {
                let k = self.cfg.k_time as i64;
                store.get(id).value.row((lag.clamp(-k, k) + k) as usize).to_vec()
            }
            None => sinusoidal_embed(lag, self.d_head),
        }
    }

    /// `p_abs(t)` of the nonstationary kernel.
    pub fn ns_abs_embedding(&self, store: &ParamStore, t: usize) -> Vec<f64> {
        match self.ns_abs {
            Some(id) => store.get(id).value.row(t.min(self.cfg.max_len - 1)).to_vec(),
            None => sinusoidal_embed(t as i64, self.d_head),
        }
    }

    /// Binds tables and precomputes gather maps for one window.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore, idx: &PositionIndices) -> Result<BoundPE> {
        let cfg = &self.cfg;
        let l = idx.len;
        let mut bound = BoundPE {
            variant: cfg.variant,
            len: l,
            d_head: self.d_head,
            ape: vec![],
            rpe: vec![],
            ns: None,
        };
        if cfg.variant.is_absolute() {
            for kind in cfg.streams() {
                let values = idx
                    .stream(kind)
                    .ok_or_else(|| Error::Invalid(format!("missing {} stream", kind.name())))?;
                let term = match self.ape_table(kind) {
                    Some(id) => {
                        let cap = store.get(id).value.shape()[0];
                        let rows: Vec<usize> = values
                            .iter()
                            .map(|&v| {
                                usize::try_from(v).ok().filter(|&v| v < cap).ok_or_else(|| {
                                    Error::Index(format!(
                                        "{} index {v} exceeds learnable table capacity {cap}",
                                        kind.name()
                                    ))
                                })
                            })
                            .collect::<Result<_>>()?;
                        let table = g.param(store, id);
                        g.embedding(table, &rows)?
                    }
                    None => {
                        let rows: Vec<f64> = values
                            .iter()
                            .flat_map(|&v| sinusoidal_embed(v, cfg.d_model))
                            .collect();
                        g.constant(Tensor::new(vec![l, cfg.d_model], rows)?)
                    }
                };
                bound.ape.push(term);
            }
        }
        if cfg.variant.is_relative() {
            for kind in cfg.streams() {
                let values = idx
                    .stream(kind)
                    .ok_or_else(|| Error::Invalid(format!("missing {} stream", kind.name())))?;
                let (table, radius) = match self.rpe_table(kind) {
                    Some(id) => (g.param(store, id), cfg.clip_radius(kind) as i64),
                    None => {
                        let lo = values.iter().min().copied().unwrap_or(0);
                        let hi = values.iter().max().copied().unwrap_or(0);
                        let r = hi - lo;
                        (g.constant(sinusoid_table(-r, r, self.d_head)), r)
                    }
                };
                let mut map = vec![0u32; l * l];
                for t in 0..l {
                    for s in 0..l {
                        map[t * l + s] = ((values[t] - values[s]).clamp(-radius, radius) + radius) as u32;
                    }
                }
                bound.rpe.push((table, Rc::new(map)));
            }
            if let Some(phi_cat) = cfg.variant.ns_category() {
                let phi = idx
                    .phi
                    .as_ref()
                    .ok_or_else(|| Error::Invalid(format!("missing {phi_cat} labels")))?;
                let (lag_table, radius) = match self.ns_lag {
                    Some(id) => (g.param(store, id), cfg.k_time as i64),
                    None => {
                        let r = l as i64 - 1;
                        (g.constant(sinusoid_table(-r, r, self.d_head)), r)
                    }
                };
                let abs_rows = match self.ns_abs {
                    Some(id) => {
                        let table = g.param(store, id);
                        let rows: Vec<usize> = (0..l).map(|t| t.min(cfg.max_len - 1)).collect();
                        g.embedding(table, &rows)?
                    }
                    None => g.constant(sinusoid_table(0, l as i64 - 1, self.d_head)),
                };
                let mut lag_map = vec![GATHER_NONE; l * l];
                let mut abs_map = vec![GATHER_NONE; l * l];
                for t in 0..l {
                    for s in 0..l {
                        if phi[t] == phi[s] {
                            let lag = (t as i64 - s as i64).clamp(-radius, radius) + radius;
                            lag_map[t * l + s] = lag as u32;
                            abs_map[t * l + s] = 0;
                        }
                    }
                }
                let ones = g.constant(Tensor::filled(&[self.d_head, 1], 1.0));
                bound.ns = Some(NsBound {
                    lag_table,
                    lag_map: Rc::new(lag_map),
                    abs_rows,
                    abs_map: Rc::new(abs_map),
                    ones,
                });
            }
        }
        Ok(bound)
    }
}

struct NsBound {
    lag_table: Var,
    lag_map: Rc<Vec<u32>>,
    abs_rows: Var,
    abs_map: Rc<Vec<u32>>,
    ones: Var,
}

/// Tables and gather maps of a [`PEState`] bound to one graph and window.
pub struct BoundPE {
    variant: Variant,
    len: usize,
    d_head: usize,
    ape: Vec<Var>,
    rpe: Vec<(Var, Rc<Vec<u32>>)>,
    ns: Option<NsBound>,
}

impl BoundPE {
    pub fn variant(&self) -> Variant {
        self.variant
    }
}

/// Adds the absolute embeddings of every stream to `x` (`L × d_model`).
/// Identity for NoPE and relative variants.
pub fn apply_sape(g: &mut Graph, x: Var, pe: &BoundPE) -> Result<Var> {
    if g.shape(x)[0] != pe.len {
        return Err(Error::Shape(format!(
            "input has {} steps, indices have {}",
            g.shape(x)[0],
            pe.len
        )));
    }
    let mut out = x;
    for &term in &pe.ape {
        out = g.add(out, term)?;
    }
    Ok(out)
}

fn srpe_parts(g: &mut Graph, q: Var, pe: &BoundPE) -> Result<Vec<(Var, Rc<Vec<u32>>)>> {
    pe.rpe
        .iter()
        .map(|(table, map)| Ok((g.matmul_nt(q, *table)?, map.clone())))
        .collect()
}

fn ns_parts(g: &mut Graph, q: Var, pe: &BoundPE) -> Result<Vec<(Var, Rc<Vec<u32>>)>> {
    let Some(ns) = &pe.ns else { return Ok(vec![]) };
    let lag_proj = g.matmul_nt(q, ns.lag_table)?;
    let qa = g.mul(q, ns.abs_rows)?;
    let qa = g.matmul(qa, ns.ones)?;
    Ok(vec![(lag_proj, ns.lag_map.clone()), (qa, ns.abs_map.clone())])
}

/// `Σ_s q_t · p_s(clip(i_t^s - i_t'^s))` as an `L × L` matrix, unscaled.
pub fn relative_logits_srpe(g: &mut Graph, q: Var, pe: &BoundPE) -> Result<Var> {
    if !pe.variant.is_relative() || pe.rpe.is_empty() {
        return Err(Error::Invalid(format!("{} has no relative terms", pe.variant)));
    }
    let parts = srpe_parts(g, q, pe)?;
    g.gather_sum(&parts, pe.len)
}

/// `q_t · κ(t, t')` as an `L × L` matrix, unscaled; `None` for stationary
/// variants.
pub fn nonstationary_logits(g: &mut Graph, q: Var, pe: &BoundPE) -> Result<Option<Var>> {
    let parts = ns_parts(g, q, pe)?;
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.gather_sum(&parts, pe.len)?))
}

/// Relative and nonstationary terms together, unscaled, in a single gather;
/// `None` when the variant has neither.
pub fn relative_bias(g: &mut Graph, q: Var, pe: &BoundPE) -> Result<Option<Var>> {
    let mut parts = srpe_parts(g, q, pe)?;
    parts.extend(ns_parts(g, q, pe)?);
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some(g.gather_sum(&parts, pe.len)?))
}

/// `κ_φ(t, t')`: lag plus absolute embedding when the φ-labels of t and t'
/// agree, zero otherwise.
pub fn ns_kernel(
    t: usize,
    t_prime: usize,
    phi: &[i64],
    state: &PEState,
    store: &ParamStore,
) -> Vec<f64> {
    if phi[t] != phi[t_prime] {
        return vec![0.0; state.d_head];
    }
    let lag = state.ns_lag_embedding(store, t as i64 - t_prime as i64);
    let abs = state.ns_abs_embedding(store, t);
    lag.iter().zip(&abs).map(|(a, b)| a + b).collect()
}

/// Full attention logits for one head, scaled by `1/√d_head`:
/// content term, plus relative terms for relative variants, plus the
/// nonstationary kernel term for NS variants.
pub fn attention_logits(g: &mut Graph, q: Var, k: Var, pe: &BoundPE) -> Result<Var> {
    if g.shape(q) != g.shape(k) || g.shape(q)[0] != pe.len || g.shape(q)[1] != pe.d_head {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, expected {}x{}",
            g.shape(q),
            g.shape(k),
            pe.len,
            pe.d_head
        )));
    }
    let mut z = g.matmul_nt(q, k)?;
    if pe.variant.is_relative() {
        let rel = relative_logits_srpe(g, q, pe)?;
        z = g.add(z, rel)?;
    }
    if let Some(ns) = nonstationary_logits(g, q, pe)? {
        z = g.add(z, ns)?;
    }
    Ok(g.scale(z, 1.0 / (pe.d_head as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: Variant, d_model: usize) -> PEConfig {
        PEConfig {
            variant,
            d_model,
            max_len: 64,
            ..PEConfig::default()
        }
    }

    fn idx_for(cfg: &PEConfig, chords: &[u32]) -> PositionIndices {
        let structure: Vec<StructureVector> = chords
            .iter()
            .enumerate()
            .map(|(t, &c)| StructureVector {
                tempo: 0,
                section: (t / 4) as u32,
                chord: c,
                mpitch: 60 + (t % 5) as u8,
            })
            .collect();
        PositionIndices::for_window(cfg, &structure, Window::new(0, chords.len())).unwrap()
    }

    #[test]
    fn sinusoid_examples() {
        let e = sinusoidal_embed(0, 6);
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let e = sinusoidal_embed(1, 2);
        assert!((e[0] - 0.841471).abs() < 1e-6 && (e[1] - 0.540302).abs() < 1e-6);
        for i in [-7, 3, 100] {
            let e = sinusoidal_embed(i, 8);
            for m in 0..4 {
                assert!((e[2 * m].powi(2) + e[2 * m + 1].powi(2) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(Variant::NoPe, 7).validate().is_err());
        let mut c = cfg(Variant::NsRpeChord, 8);
        c.structural_set = vec![Category::Section];
        assert!(c.validate().is_err());
        c.variant = Variant::NsRpeSection;
        c.validate().unwrap();
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn nope_leaves_input_and_constant_chord_adds_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let c = cfg(Variant::NoPe, 4);
        let st = PEState::new(&c, 2, &mut store, &mut rng).unwrap();
        let idx = idx_for(&c, &[0, 0, 1]);
        let mut g = Graph::new();
        let b = st.bind(&mut g, &store, &idx).unwrap();
        let x = g.constant(Tensor::filled(&[3, 4], 0.5));
        let y = apply_sape(&mut g, x, &b).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let mut c = cfg(Variant::LearnedSApe, 4);
        c.structural_set = vec![Category::Chord];
        let st = PEState::new(&c, 2, &mut store, &mut rng).unwrap();
        let idx = idx_for(&c, &[3, 3, 3]);
        let mut g = Graph::new();
        let b = st.bind(&mut g, &store, &idx).unwrap();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let y = apply_sape(&mut g, x, &b).unwrap();
        let row0 = store.get(st.ape_tables[0].1).value.row(0).to_vec();
        for t in 0..3 {
            assert_eq!(g.value(y).row(t), row0.as_slice());
        }
    }

    #[test]
    fn learnable_capacity_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut c = cfg(Variant::Ape, 4);
        c.variant = Variant::LearnedSApe;
        c.structural_set = vec![Category::Chord];
        c.max_len = 2;
        let st = PEState::new(&c, 2, &mut store, &mut rng).unwrap();
        let idx = idx_for(&c, &[0, 1, 2]);
        let mut g = Graph::new();
        assert!(matches!(st.bind(&mut g, &store, &idx), Err(Error::Index(_))));
    }

    #[test]
    fn zero_query_and_zero_lag_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = cfg(Variant::LearnedSRpe, 8);
        let st = PEState::new(&c, 4, &mut store, &mut rng).unwrap();
        let structure = vec![
            StructureVector { tempo: 2, section: 1, chord: 5, mpitch: 64 };
            5
        ];
        let idx = PositionIndices::for_window(&c, &structure, Window::new(0, 5)).unwrap();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &store, &idx).unwrap();
        let q0 = g.constant(Tensor::zeros(&[5, 4]));
        let z = relative_logits_srpe(&mut g, q0, &b).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));

        let q = g.constant(Tensor::new(vec![5, 4], (0..20).map(|i| i as f64 * 0.1).collect()).unwrap());
        let z = relative_logits_srpe(&mut g, q, &b).unwrap();
        for t in 0..5 {
            let row = g.value(z).row(t);
            assert!(row.iter().all(|&v| v == row[0]));
        }
    }

    #[test]
    fn ns_kernel_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let c = cfg(Variant::NsRpeChord, 8);
        let st = PEState::new(&c, 4, &mut store, &mut rng).unwrap();
        let phi = vec![0, 0, 1, 1];
        assert_eq!(ns_kernel(1, 2, &phi, &st, &store), vec![0.0; 4]);
        let k = ns_kernel(3, 3, &phi, &st, &store);
        let lag0 = store.get(st.ns_lag.unwrap()).value.row(c.k_time).to_vec();
        let abs3 = store.get(st.ns_abs.unwrap()).value.row(3).to_vec();
        for j in 0..4 {
            assert_eq!(k[j], lag0[j] + abs3[j]);
        }
    }

    #[test]
    fn nope_logits_are_scaled_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let c = cfg(Variant::NoPe, 8);
        let st = PEState::new(&c, 4, &mut store, &mut rng).unwrap();
        let idx = idx_for(&c, &[0, 1, 2]);
        let mut g = Graph::new();
        let b = st.bind(&mut g, &store, &idx).unwrap();
        let qv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = g.constant(Tensor::new(vec![3, 4], qv.clone()).unwrap());
        let k = g.constant(Tensor::new(vec![3, 4], kv.clone()).unwrap());
        let z = attention_logits(&mut g, q, k, &b).unwrap();
        for t in 0..3 {
            for s in 0..3 {
                let d: f64 = (0..4).map(|j| qv[t * 4 + j] * kv[s * 4 + j]).sum();
                assert!((g.value(z).row(t)[s] - d / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn baseline_streams() {
        let melody = vec![REST; 128];
        let s = baseline_indices(BaselineMode::SApeB, &melody, 4).unwrap();
        let bars: std::collections::BTreeSet<i64> = s[0].1.iter().copied().collect();
        assert_eq!(bars.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        let s = baseline_indices(BaselineMode::SRpeB, &melody, 4).unwrap();
        assert!(s[0].1.iter().all(|&p| p == 128));
        let s = baseline_indices(BaselineMode::SRpeB, &[64, 60], 4).unwrap();
        assert_eq!(s[0].1[0] - s[0].1[1], 4);
    }

    #[test]
    fn window_rebases_ordinals() {
        let c = PEConfig {
            variant: Variant::LearnedSApe,
            d_model: 4,
            ..PEConfig::default()
        };
        let structure: Vec<StructureVector> = (0..8)
            .map(|t| StructureVector {
                tempo: 0,
                section: 0,
                chord: (t / 2) as u32,
                mpitch: 70,
            })
            .collect();
        let idx = PositionIndices::for_window(&c, &structure, Window::new(3, 4)).unwrap();
        assert_eq!(idx.stream(StreamKind::Structure(Category::Chord)).unwrap(), &[0, 1, 1, 2]);
        assert_eq!(idx.stream(StreamKind::Structure(Category::Mpitch)).unwrap(), &[70; 4]);
    }
}
