//! Structural label streams and their per-timestep ordinal encoding.
//!
//! Beat positions are held as grid steps (one beat = one quarter = 16 steps),
//! so every offset and boundary is exact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::midi::TempoMap;
use crate::pianoroll::{Pianoroll, N_PITCHES, RESOLUTION};

/// Melody pitch sentinel for a silent timestep.
pub const REST: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    Tempo,
    Section,
    Chord,
    Mpitch,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Tempo,
        Category::Section,
        Category::Chord,
        Category::Mpitch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Tempo => "tempo",
            Category::Section => "section",
            Category::Chord => "chord",
            Category::Mpitch => "mpitch",
        }
    }

    pub fn parse(s: &str) -> Result<Category> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown structural category `{s}`")))
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a beat position (`4`, `-1.5`, `9/2`) into grid steps.
pub fn parse_beats(s: &str) -> Result<i64> {
    let bad = || Error::Labels(format!("`{s}` is not a beat position on the 1/16 grid"));
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let (num, den): (i64, i64) = if let Some((n, d)) = body.split_once('/') {
        (n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    } else if let Some((whole, frac)) = body.split_once('.') {
        if frac.is_empty() || frac.len() > 8 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let den = 10i64.pow(frac.len() as u32);
        let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| bad())? };
        (whole * den + frac.parse::<i64>().map_err(|_| bad())?, den)
    } else {
        (body.parse().map_err(|_| bad())?, 1)
    };
    if den <= 0 || num < 0 {
        return Err(bad());
    }
    let scaled = num * RESOLUTION as i64;
    if scaled % den != 0 {
        return Err(bad());
    }
    let steps = scaled / den;
    Ok(if neg { -steps } else { steps })
}

/// Formats grid steps as beats, as a fraction when not whole.
pub fn format_beats(steps: i64) -> String {
    let r = RESOLUTION as i64;
    if steps % r == 0 {
        return (steps / r).to_string();
    }
    let g = gcd(steps.unsigned_abs(), r as u64) as i64;
    format!("{}/{}", steps / g, r / g)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: i64,
    pub label: String,
}

/// One category's segments. Segment k spans `[start_k, start_{k+1})`; the last
/// one runs to `end`, or open-ended when `end` is `None`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LabelStream {
    pub segments: Vec<Segment>,
    pub end: Option<i64>,
}

impl LabelStream {
    pub fn new(segments: Vec<Segment>, end: Option<i64>) -> Result<Self> {
        if segments.windows(2).any(|w| w[1].start < w[0].start) {
            return Err(Error::Labels("segment starts must be non-decreasing".into()));
        }
        if let (Some(end), Some(last)) = (end, segments.last()) {
            if end < last.start {
                return Err(Error::Labels("stream ends before its last segment".into()));
            }
        }
        Ok(LabelStream { segments, end })
    }

    fn segment_end(&self, k: usize) -> Option<i64> {
        self.segments.get(k + 1).map(|s| s.start).or(self.end)
    }
}

/// Raw annotation streams for tempo, section and chord.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RawLabels {
    pub streams: BTreeMap<Category, LabelStream>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentOffset {
    /// Shift in grid steps; positive delays the labels.
    pub steps: i64,
}

impl AlignmentOffset {
    pub fn from_beats(s: &str) -> Result<Self> {
        Ok(AlignmentOffset {
            steps: parse_beats(s)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StructureVector {
    pub tempo: u32,
    pub section: u32,
    pub chord: u32,
    /// MIDI pitch 0..=127, or [`REST`].
    pub mpitch: u8,
}

impl StructureVector {
    pub fn get(&self, c: Category) -> i64 {
        match c {
            Category::Tempo => self.tempo as i64,
            Category::Section => self.section as i64,
            Category::Chord => self.chord as i64,
            Category::Mpitch => self.mpitch as i64,
        }
    }
}

pub fn apply_offset(labels: &RawLabels, off: AlignmentOffset) -> Result<RawLabels> {
    let mut out = RawLabels::default();
    for (&cat, stream) in &labels.streams {
        let mut segments = Vec::new();
        for (k, seg) in stream.segments.iter().enumerate() {
            let start = seg.start + off.steps;
            let end = stream.segment_end(k).map(|e| e + off.steps);
            if end.is_some_and(|e| e <= 0) {
                continue;
            }
            segments.push(Segment {
                start: start.max(0),
                label: seg.label.clone(),
            });
        }
        if segments.is_empty() {
            return Err(Error::Labels(format!(
                "offset {} beats leaves no {cat} segments",
                format_beats(off.steps)
            )));
        }
        let end = stream.end.map(|e| e + off.steps);
        out.streams.insert(cat, LabelStream { segments, end });
    }
    Ok(out)
}

/// Ordinal index per timestep for one stream: consecutive segments with the
/// same label merge, empty segments are skipped, and every other boundary
/// advances the index by one.
fn stream_ordinals(cat: Category, stream: &LabelStream, n_time: usize) -> Result<Vec<u32>> {
    let n = n_time as i64;
    let first = stream
        .segments
        .first()
        .ok_or_else(|| Error::Labels(format!("{cat} stream is empty")))?;
    if first.start > 0 {
        return Err(Error::Labels(format!(
            "gap in {cat} coverage: first segment starts at beat {}",
            format_beats(first.start)
        )));
    }
    if let Some(end) = stream.end {
        if end < n {
            return Err(Error::Labels(format!(
                "gap in {cat} coverage: labels end at beat {} before the roll ends at beat {}",
                format_beats(end),
                format_beats(n)
            )));
        }
    }
    let mut out = vec![0u32; n_time];
    let mut ordinal: Option<u32> = None;
    let mut last_label: Option<&str> = None;
    for (k, seg) in stream.segments.iter().enumerate() {
        let lo = seg.start.clamp(0, n);
        let hi = stream.segment_end(k).unwrap_or(n).clamp(0, n);
        if hi <= lo {
            continue;
        }
        if last_label != Some(seg.label.as_str()) {
            ordinal = Some(ordinal.map_or(0, |o| o + 1));
            last_label = Some(seg.label.as_str());
        }
        for v in &mut out[lo as usize..hi as usize] {
            *v = ordinal.unwrap();
        }
    }
    Ok(out)
}

/// Highest active pitch per timestep of one track, or [`REST`].
pub fn melody_pitches(roll: &Pianoroll, track: usize) -> Result<Vec<u8>> {
    if track >= roll.n_tracks() {
        return Err(Error::Index(format!(
            "melody track {track} outside roll with {} tracks",
            roll.n_tracks()
        )));
    }
    Ok((0..roll.n_time())
        .map(|t| {
            (0..N_PITCHES)
                .rev()
                .find(|&p| roll.is_on(track, p, t))
                .map_or(REST, |p| p as u8)
        })
        .collect())
}

/// Per-timestep structure vectors. Categories absent from `labels` are a
/// single segment (index 0 throughout).
pub fn derive_indices(
    labels: &RawLabels,
    melody: &[u8],
    n_time: usize,
) -> Result<Vec<StructureVector>> {
    if melody.len() != n_time {
        return Err(Error::Shape(format!(
            "melody has {} steps, roll has {n_time}",
            melody.len()
        )));
    }
    let ordinals = |cat| match labels.streams.get(&cat) {
        Some(s) => stream_ordinals(cat, s, n_time),
        None => Ok(vec![0; n_time]),
    };
    let tempo = ordinals(Category::Tempo)?;
    let section = ordinals(Category::Section)?;
    let chord = ordinals(Category::Chord)?;
    Ok((0..n_time)
        .map(|t| StructureVector {
            tempo: tempo[t],
            section: section[t],
            chord: chord[t],
            mpitch: melody[t],
        })
        .collect())
}

/// Tempo label stream from a MIDI tempo map: one segment per change point.
pub fn tempo_stream(tempo: &TempoMap, ppq: u64) -> LabelStream {
    let segments = tempo
        .entries()
        .iter()
        .map(|&(tick, us)| Segment {
            start: crate::midi::tick_to_step(tick, ppq) as i64,
            label: us.to_string(),
        })
        .collect();
    LabelStream {
        segments,
        end: None,
    }
}

/// (bar index, position in bar) per timestep.
pub fn measure_indices(n_time: usize, beats_per_bar: usize) -> Result<Vec<(usize, usize)>> {
    if beats_per_bar == 0 {
        return Err(Error::Invalid("beats_per_bar must be >= 1".into()));
    }
    let bar = RESOLUTION * beats_per_bar;
    Ok((0..n_time).map(|t| (t / bar, t % bar)).collect())
}

const LABELS_HEADER: &str = "LABELS v1";
/// Reserved label closing a category's last segment.
pub const END_LABEL: &str = "END";

/// Parses a label file. A line `<category> <beat> END` sets the end of that
/// category's last segment.
pub fn parse_labels(text: &str) -> Result<RawLabels> {
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n').map(|raw| {
        let start = offset;
        offset += raw.len();
        (start, raw.trim_end_matches(['\n', '\r']))
    });
    match lines.next() {
        Some((_, l)) if l == LABELS_HEADER => {}
        _ => return Err(Error::format(0, "missing `LABELS v1` header")),
    }
    let mut raw: BTreeMap<Category, (Vec<Segment>, Option<i64>)> = BTreeMap::new();
    for (off, line) in lines {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, ' ');
        let (cat, beat, label) = match (parts.next(), parts.next(), parts.next()) {
            (Some(c), Some(b), Some(l)) if !l.is_empty() => (c, b, l),
            _ => return Err(Error::format(off, format!("label line `{line}` needs 3 fields"))),
        };
        let cat = Category::parse(cat).map_err(|e| Error::format(off, e.to_string()))?;
        if cat == Category::Mpitch {
            return Err(Error::format(off, "mpitch is derived from the melody track"));
        }
        let start = parse_beats(beat).map_err(|e| Error::format(off, e.to_string()))?;
        let entry = raw.entry(cat).or_default();
        if entry.1.is_some() {
            return Err(Error::format(off, format!("{cat} line after its END marker")));
        }
        if entry.0.last().is_some_and(|s| s.start > start) {
            return Err(Error::format(off, format!("{cat} starts must be non-decreasing")));
        }
        if label == END_LABEL {
            entry.1 = Some(start);
        } else {
            entry.0.push(Segment {
                start,
                label: label.to_string(),
            });
        }
    }
    let mut labels = RawLabels::default();
    for (cat, (segments, end)) in raw {
        if segments.is_empty() {
            return Err(Error::Labels(format!("{cat} has an END marker but no segments")));
        }
        labels.streams.insert(cat, LabelStream::new(segments, end)?);
    }
    Ok(labels)
}

pub fn format_labels(labels: &RawLabels) -> String {
    let mut s = format!("{LABELS_HEADER}\n");
    for (cat, stream) in &labels.streams {
        for seg in &stream.segments {
            s.push_str(&format!("{cat} {} {}\n", format_beats(seg.start), seg.label));
        }
        if let Some(end) = stream.end {
            s.push_str(&format!("{cat} {} {END_LABEL}\n", format_beats(end)));
        }
    }
    s
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<RawLabels> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text)
}

/// Offset sidecar: lines `<song_id> <offset_beats>`.
pub fn parse_offsets(text: &str) -> Result<BTreeMap<String, AlignmentOffset>> {
    let mut out = BTreeMap::new();
    let mut offset = 0;
    for raw in text.split_inclusive('\n') {
        let start = offset;
        offset += raw.len();
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, beats) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::format(start, format!("offset line `{line}` needs 2 fields")))?;
        let off = AlignmentOffset::from_beats(beats.trim())
            .map_err(|e| Error::format(start, e.to_string()))?;
        if out.insert(id.to_string(), off).is_some() {
            return Err(Error::format(start, format!("duplicate offset for `{id}`")));
        }
    }
    Ok(out)
}

const INDEX_HEADER: &str = "INDICES v1";

/// Index file: header, `length=<n>`, then `tempo section chord mpitch` per step.
pub fn format_indices(indices: &[StructureVector]) -> String {
    let mut s = format!("{INDEX_HEADER}\nlength={}\n", indices.len());
    for v in indices {
        s.push_str(&format!("{} {} {} {}\n", v.tempo, v.section, v.chord, v.mpitch));
    }
    s
}

pub fn parse_indices(text: &str) -> Result<Vec<StructureVector>> {
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::format(0, "missing `INDICES v1` header"));
    }
    let n: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("length="))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(INDEX_HEADER.len() + 1, "missing `length=<n>`"))?;
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let nums: Vec<u32> = line
            .split(' ')
            .map(|t| t.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Labels(format!("index line {} is not numeric", i + 3)))?;
        if nums.len() != 4 || nums[3] > REST as u32 {
            return Err(Error::Labels(format!("index line {} is malformed", i + 3)));
        }
        out.push(StructureVector {
            tempo: nums[0],
            section: nums[1],
            chord: nums[2],
            mpitch: nums[3] as u8,
        });
    }
    if out.len() != n {
        return Err(Error::Labels(format!(
            "index file declares {n} steps, has {}",
            out.len()
        )));
    }
    Ok(out)
}
