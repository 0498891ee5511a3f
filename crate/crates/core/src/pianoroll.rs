//! Binary pianoroll grid, its probability/velocity counterpart, and the
//! plain-text roll file format.
//!
//! Cells are stored time-major: all `n_tracks * 128` cells of one timestep are
//! contiguous, in (track, pitch) order. This is the column layout the model
//! consumes.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Timesteps per quarter note.
pub const RESOLUTION: usize = 16;

/// Number of MIDI pitches per track.
pub const N_PITCHES: usize = 128;

const HEADER: &str = "PIANOROLL v1";
const HEADER_VELOCITY: &str = "PIANOROLL v1V";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pianoroll {
    n_tracks: usize,
    n_time: usize,
    data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub length: usize,
}

impl Window {
    pub fn new(start: usize, length: usize) -> Self {
        Window { start, length }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

#[inline]
fn cell_index(n_tracks: usize, track: usize, pitch: usize, t: usize) -> usize {
    (t * n_tracks + track) * N_PITCHES + pitch
}

impl Pianoroll {
    /// All-zero roll.
    pub fn zeros(n_tracks: usize, n_time: usize) -> Result<Self> {
        if n_tracks == 0 || n_time == 0 {
            return Err(Error::Shape(format!(
                "pianoroll needs n_tracks >= 1 and n_time >= 1, got {n_tracks}x{n_time}"
            )));
        }
        Ok(Pianoroll {
            n_tracks,
            n_time,
            data: vec![0; n_tracks * N_PITCHES * n_time],
        })
    }

    /// Builds a roll from time-major cells; every cell must be 0 or 1.
    pub fn from_cells(n_tracks: usize, n_time: usize, data: Vec<u8>) -> Result<Self> {
        let roll = Pianoroll::zeros(n_tracks, n_time)?;
        if data.len() != roll.data.len() {
            return Err(Error::Shape(format!(
                "expected {} cells, got {}",
                roll.data.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Invalid(format!(
                "non-binary cell value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Pianoroll { data, ..roll })
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    fn check(&self, track: usize, pitch: usize, t: usize) -> Result<usize> {
        if track >= self.n_tracks || pitch >= N_PITCHES || t >= self.n_time {
            return Err(Error::Index(format!(
                "cell ({track}, {pitch}, {t}) outside ({}, {N_PITCHES}, {})",
                self.n_tracks, self.n_time
            )));
        }
        Ok(cell_index(self.n_tracks, track, pitch, t))
    }

    pub fn get(&self, track: usize, pitch: usize, t: usize) -> Result<bool> {
        Ok(self.data[self.check(track, pitch, t)?] == 1)
    }

    pub fn set(&mut self, track: usize, pitch: usize, t: usize, on: bool) -> Result<()> {
        let i = self.check(track, pitch, t)?;
        self.data[i] = on as u8;
        Ok(())
    }

    /// Unchecked accessor for hot loops; panics when out of range.
    #[inline]
    pub fn is_on(&self, track: usize, pitch: usize, t: usize) -> bool {
        self.data[cell_index(self.n_tracks, track, pitch, t)] == 1
    }

    /// The `n_tracks * 128` cells of timestep `t`.
    pub fn column(&self, t: usize) -> &[u8] {
        let w = self.n_tracks * N_PITCHES;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn cells(&self) -> &[u8] {
        &self.data
    }

    pub fn count_on(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Maximal runs of set cells as (track, pitch, onset, offset_exclusive),
    /// sorted by track, pitch, onset.
    pub fn note_runs(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut runs = Vec::new();
        for k in 0..self.n_tracks {
            for p in 0..N_PITCHES {
                let mut t = 0;
                while t < self.n_time {
                    if self.is_on(k, p, t) {
                        let onset = t;
                        while t < self.n_time && self.is_on(k, p, t) {
                            t += 1;
                        }
                        runs.push((k, p, onset, t));
                    } else {
                        t += 1;
                    }
                }
            }
        }
        runs
    }

    pub fn slice_window(&self, w: Window) -> Result<Pianoroll> {
        if w.length == 0 || w.end() > self.n_time {
            return Err(Error::Index(format!(
                "window [{}, {}) outside roll of {} timesteps",
                w.start,
                w.end(),
                self.n_time
            )));
        }
        let width = self.n_tracks * N_PITCHES;
        Ok(Pianoroll {
            n_tracks: self.n_tracks,
            n_time: w.length,
            data: self.data[w.start * width..w.end() * width].to_vec(),
        })
    }

    /// Keeps the listed tracks, in the given order.
    pub fn select_tracks(&self, tracks: &[usize]) -> Result<Pianoroll> {
        if let Some(&bad) = tracks.iter().find(|&&k| k >= self.n_tracks) {
            return Err(Error::Index(format!(
                "track {bad} outside roll with {} tracks",
                self.n_tracks
            )));
        }
        let mut out = Pianoroll::zeros(tracks.len(), self.n_time)?;
        for t in 0..self.n_time {
            for (new_k, &k) in tracks.iter().enumerate() {
                let src = cell_index(self.n_tracks, k, 0, t);
                let dst = cell_index(tracks.len(), new_k, 0, t);
                out.data[dst..dst + N_PITCHES].copy_from_slice(&self.data[src..src + N_PITCHES]);
            }
        }
        Ok(out)
    }

    /// Splits into (conditioning tracks, remaining tracks), both in ascending
    /// track order.
    pub fn split_tracks(&self, conditioning: &[usize]) -> Result<(Pianoroll, Pianoroll)> {
        let cond: BTreeSet<usize> = conditioning.iter().copied().collect();
        if cond.is_empty() || cond.len() >= self.n_tracks {
            return Err(Error::Invalid(format!(
                "conditioning set must be a nonempty proper subset of {} tracks, got {:?}",
                self.n_tracks, conditioning
            )));
        }
        let cond: Vec<usize> = cond.into_iter().collect();
        let rest: Vec<usize> = (0..self.n_tracks).filter(|k| !cond.contains(k)).collect();
        Ok((self.select_tracks(&cond)?, self.select_tracks(&rest)?))
    }

    /// Stacks rolls of equal length track-wise.
    pub fn stack(parts: &[&Pianoroll]) -> Result<Pianoroll> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("nothing to stack".into()))?;
        let n_time = first.n_time;
        if parts.iter().any(|r| r.n_time != n_time) {
            return Err(Error::Shape("stacked rolls differ in length".into()));
        }
        let n_tracks = parts.iter().map(|r| r.n_tracks).sum();
        let mut out = Pianoroll::zeros(n_tracks, n_time)?;
        for t in 0..n_time {
            let mut k0 = 0;
            for r in parts {
                let src = r.column(t);
                let dst = cell_index(n_tracks, k0, 0, t);
                out.data[dst..dst + src.len()].copy_from_slice(src);
                k0 += r.n_tracks;
            }
        }
        Ok(out)
    }

    /// Canonical text serialization.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        writeln!(
            s,
            "tracks={} time={} resolution={RESOLUTION}",
            self.n_tracks, self.n_time
        )
        .unwrap();
        for (k, p, on, off) in self.note_runs() {
            writeln!(s, "{k} {p} {on} {off}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Pianoroll> {
        let parsed = parse_roll_text(text, false)?;
        let mut roll = Pianoroll::zeros(parsed.n_tracks, parsed.n_time)
            .map_err(|e| Error::format(parsed.header_offset, e.to_string()))?;
        for rec in parsed.records {
            for t in rec.onset..rec.offset {
                roll.data[cell_index(roll.n_tracks, rec.track, rec.pitch, t)] = 1;
            }
        }
        Ok(roll)
    }
}

pub fn load_roll(path: impl AsRef<Path>) -> Result<Pianoroll> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Pianoroll::from_text(&text)
}

pub fn save_roll(roll: &Pianoroll, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, roll.to_text()).map_err(|e| Error::io(path, e))
}

/// How the cells of a [`ContinuousRoll`] are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellScale {
    /// Model probabilities in [0, 1].
    Probability,
    /// Integral MIDI velocities 0..=127, 0 meaning silence.
    Velocity,
}

/// Real-valued roll with the same layout as [`Pianoroll`].
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousRoll {
    n_tracks: usize,
    n_time: usize,
    scale: CellScale,
    data: Vec<f64>,
}

impl ContinuousRoll {
    pub fn new(n_tracks: usize, n_time: usize, scale: CellScale, data: Vec<f64>) -> Result<Self> {
        if n_tracks == 0 || n_time == 0 {
            return Err(Error::Shape(format!(
                "continuous roll needs positive shape, got {n_tracks}x{n_time}"
            )));
        }
        if data.len() != n_tracks * N_PITCHES * n_time {
            return Err(Error::Shape(format!(
                "expected {} cells, got {}",
                n_tracks * N_PITCHES * n_time,
                data.len()
            )));
        }
        let ok = match scale {
            CellScale::Probability => data.iter().all(|v| (0.0..=1.0).contains(v)),
            CellScale::Velocity => data
                .iter()
                .all(|v| v.fract() == 0.0 && (0.0..=127.0).contains(v)),
        };
        if !ok {
            return Err(Error::Invalid(format!(
                "cell outside the {scale:?} range"
            )));
        }
        Ok(ContinuousRoll {
            n_tracks,
            n_time,
            scale,
            data,
        })
    }

    pub fn n_tracks(&self) -> usize {
        self.n_tracks
    }

    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn scale(&self) -> CellScale {
        self.scale
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn value(&self, track: usize, pitch: usize, t: usize) -> f64 {
        self.data[cell_index(self.n_tracks, track, pitch, t)]
    }

    pub fn column(&self, t: usize) -> &[f64] {
        let w = self.n_tracks * N_PITCHES;
        &self.data[t * w..(t + 1) * w]
    }

    /// Text form of a velocity roll: one record per maximal run of constant
    /// nonzero velocity.
    pub fn to_velocity_text(&self) -> Result<String> {
        if self.scale != CellScale::Velocity {
            return Err(Error::Invalid("only velocity rolls serialize".into()));
        }
        let mut s = String::new();
        writeln!(s, "{HEADER_VELOCITY}").unwrap();
        writeln!(
            s,
            "tracks={} time={} resolution={RESOLUTION}",
            self.n_tracks, self.n_time
        )
        .unwrap();
        for k in 0..self.n_tracks {
            for p in 0..N_PITCHES {
                let mut t = 0;
                while t < self.n_time {
                    let v = self.value(k, p, t);
                    if v > 0.0 {
                        let onset = t;
                        while t < self.n_time && self.value(k, p, t) == v {
                            t += 1;
                        }
                        writeln!(s, "{k} {p} {onset} {t} velocity={}", v as u8).unwrap();
                    } else {
                        t += 1;
                    }
                }
            }
        }
        Ok(s)
    }

    pub fn from_velocity_text(text: &str) -> Result<ContinuousRoll> {
        let parsed = parse_roll_text(text, true)?;
        if parsed.n_tracks == 0 || parsed.n_time == 0 {
            return Err(Error::format(parsed.header_offset, "empty roll dimensions"));
        }
        let mut data = vec![0.0; parsed.n_tracks * N_PITCHES * parsed.n_time];
        for rec in parsed.records {
            for t in rec.onset..rec.offset {
                data[cell_index(parsed.n_tracks, rec.track, rec.pitch, t)] = rec.velocity as f64;
            }
        }
        ContinuousRoll::new(parsed.n_tracks, parsed.n_time, CellScale::Velocity, data)
    }
}

/// Either kind of roll file, as found on disk.
#[derive(Debug, Clone)]
pub enum AnyRoll {
    Binary(Pianoroll),
    Velocity(ContinuousRoll),
}

pub fn load_any_roll(path: impl AsRef<Path>) -> Result<AnyRoll> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.starts_with(&format!("{HEADER_VELOCITY}\n")) {
        Ok(AnyRoll::Velocity(ContinuousRoll::from_velocity_text(&text)?))
    } else {
        Ok(AnyRoll::Binary(Pianoroll::from_text(&text)?))
    }
}

pub fn save_velocity_roll(roll: &ContinuousRoll, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, roll.to_velocity_text()?).map_err(|e| Error::io(path, e))
}

struct Record {
    track: usize,
    pitch: usize,
    onset: usize,
    offset: usize,
    velocity: u8,
}

struct ParsedRoll {
    n_tracks: usize,
    n_time: usize,
    header_offset: usize,
    records: Vec<Record>,
}

fn parse_field(tok: &str, key: &str, offset: usize) -> Result<usize> {
    tok.strip_prefix(key)
        .and_then(|v| v.strip_prefix('='))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(offset, format!("expected `{key}=<n>`, found `{tok}`")))
}

fn parse_roll_text(text: &str, velocity: bool) -> Result<ParsedRoll> {
    let magic = if velocity { HEADER_VELOCITY } else { HEADER };
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n').map(|raw| {
        let start = offset;
        offset += raw.len();
        (start, raw.strip_suffix('\n').unwrap_or(raw))
    });

    match lines.next() {
        Some((_, l)) if l == magic => {}
        _ => return Err(Error::format(0, format!("missing `{magic}` header"))),
    }
    let (header_offset, dims) = lines
        .next()
        .ok_or_else(|| Error::format(text.len(), "missing dimension line"))?;
    let toks: Vec<&str> = dims.split(' ').collect();
    if toks.len() != 3 {
        return Err(Error::format(header_offset, "dimension line needs 3 fields"));
    }
    let n_tracks = parse_field(toks[0], "tracks", header_offset)?;
    let n_time = parse_field(toks[1], "time", header_offset)?;
    let res = parse_field(toks[2], "resolution", header_offset)?;
    if res != RESOLUTION {
        return Err(Error::format(
            header_offset,
            format!("unsupported resolution {res}, expected {RESOLUTION}"),
        ));
    }

    let mut records: Vec<Record> = Vec::new();
    for (off, line) in lines {
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(' ').collect();
        let expected = if velocity { 5 } else { 4 };
        if toks.len() != expected {
            return Err(Error::format(
                off,
                format!("record `{line}` needs {expected} fields"),
            ));
        }
        let nums: Vec<usize> = toks[..4]
            .iter()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(off, format!("non-numeric field in record `{line}`")))?;
        let (track, pitch, onset, offset_step) = (nums[0], nums[1], nums[2], nums[3]);
        if track >= n_tracks || pitch >= N_PITCHES || offset_step > n_time {
            return Err(Error::format(
                off,
                format!("record `{line}` outside declared dimensions"),
            ));
        }
        if offset_step <= onset {
            return Err(Error::format(off, format!("record `{line}` has empty interval")));
        }
        let vel = if velocity {
            let v = toks[4]
                .strip_prefix("velocity=")
                .and_then(|v| v.parse::<u8>().ok())
                .filter(|v| (1..=127).contains(v))
                .ok_or_else(|| Error::format(off, format!("bad velocity in `{line}`")))?;
            v
        } else {
            1
        };
        if let Some(prev) = records.last() {
            let key = (track, pitch, onset);
            let prev_key = (prev.track, prev.pitch, prev.onset);
            if key <= prev_key {
                return Err(Error::format(off, format!("record `{line}` out of order")));
            }
            if prev.track == track && prev.pitch == pitch && onset < prev.offset {
                return Err(Error::format(
                    off,
                    format!("record `{line}` overlaps the previous note"),
                ));
            }
        }
        records.push(Record {
            track,
            pitch,
            onset,
            offset: offset_step,
            velocity: vel,
        });
    }
    Ok(ParsedRoll {
        n_tracks,
        n_time,
        header_offset,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_note() -> &'static str {
        "PIANOROLL v1\ntracks=1 time=4 resolution=16\n0 60 0 4\n"
    }

    #[test]
    fn single_note_file_sets_four_cells() {
        let r = Pianoroll::from_text(one_note()).unwrap();
        assert_eq!(r.count_on(), 4);
        assert!((0..4).all(|t| r.is_on(0, 60, t)));
        assert_eq!(r.to_text(), one_note());
    }

    #[test]
    fn non_binary_cell_is_rejected() {
        let err = Pianoroll::from_cells(1, 1, {
            let mut v = vec![0; 128];
            v[3] = 2;
            v
        })
        .unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    #[test]
    fn malformed_record_reports_its_offset() {
        let text = "PIANOROLL v1\ntracks=1 time=4 resolution=16\n0 60 0 2\n0 60 1 3\n";
        match Pianoroll::from_text(text) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset, text.find("0 60 1 3").unwrap());
                assert!(message.contains("overlaps"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let bad = "PIANOROLL v1\ntracks=1 time=4 resolution=16\n0 200 0 2\n";
        match Pianoroll::from_text(bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bad.find("0 200").unwrap()),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            Pianoroll::from_text("PIANOROL v1\n"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn empty_roll_has_no_records_and_header_counts_tracks() {
        let r = Pianoroll::zeros(2, 8).unwrap();
        let text = r.to_text();
        assert_eq!(text, "PIANOROLL v1\ntracks=2 time=8 resolution=16\n");
        assert_eq!(Pianoroll::from_text(&text).unwrap(), r);
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        assert!(Pianoroll::zeros(0, 3).is_err());
        assert!(Pianoroll::zeros(1, 0).is_err());
        let r = Pianoroll::zeros(1, 3).unwrap();
        assert!(r.get(1, 0, 0).is_err());
        assert!(r.get(0, 128, 0).is_err());
        assert!(r.get(0, 0, 3).is_err());
    }

    #[test]
    fn window_slicing() {
        let mut r = Pianoroll::zeros(1, 6).unwrap();
        r.set(0, 64, 3, true).unwrap();
        assert_eq!(r.slice_window(Window::new(0, 6)).unwrap(), r);
        let col = r.slice_window(Window::new(3, 1)).unwrap();
        assert_eq!(col.n_time(), 1);
        assert_eq!(col.column(0), r.column(3));
        assert!(r.slice_window(Window::new(4, 3)).is_err());
    }

    #[test]
    fn split_tracks_partitions() {
        let mut r = Pianoroll::zeros(3, 4).unwrap();
        r.set(0, 60, 0, true).unwrap();
        r.set(1, 62, 1, true).unwrap();
        r.set(2, 64, 2, true).unwrap();
        let (cond, rest) = r.split_tracks(&[0, 1]).unwrap();
        assert_eq!((cond.n_tracks(), rest.n_tracks()), (2, 1));
        assert_eq!(Pianoroll::stack(&[&cond, &rest]).unwrap(), r);
        assert!(r.split_tracks(&[0, 1, 2]).is_err());
        assert!(r.split_tracks(&[]).is_err());
    }

    #[test]
    fn velocity_text_round_trip() {
        let mut data = vec![0.0; 128 * 4];
        data[60] = 100.0;
        data[128 + 60] = 100.0;
        data[2 * 128 + 60] = 64.0;
        let roll = ContinuousRoll::new(1, 4, CellScale::Velocity, data).unwrap();
        let text = roll.to_velocity_text().unwrap();
        assert_eq!(
            text,
            "PIANOROLL v1V\ntracks=1 time=4 resolution=16\n0 60 0 2 velocity=100\n0 60 2 3 velocity=64\n"
        );
        assert_eq!(ContinuousRoll::from_velocity_text(&text).unwrap(), roll);
    }

    fn arb_roll() -> impl Strategy<Value = Pianoroll> {
        (1usize..4, 1usize..24).prop_flat_map(|(k, n)| {
            proptest::collection::vec(prop::bool::weighted(0.05), k * 128 * n).prop_map(
                move |bits| {
                    Pianoroll::from_cells(k, n, bits.into_iter().map(u8::from).collect()).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn save_load_round_trip(r in arb_roll()) {
            let text = r.to_text();
            let back = Pianoroll::from_text(&text).unwrap();
            prop_assert_eq!(&back, &r);
            prop_assert_eq!(back.to_text(), text);
        }

        #[test]
        fn slices_are_projections(r in arb_roll(), a in 0usize..24, b in 1usize..24) {
            let start = a % r.n_time();
            let len = 1 + (b - 1) % (r.n_time() - start);
            let s = r.slice_window(Window::new(start, len)).unwrap();
            for t in 0..len {
                prop_assert_eq!(s.column(t), r.column(start + t));
            }
        }
    }

    #[test]
    fn file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.roll");
        std::fs::write(&path, one_note()).unwrap();
        let r = load_roll(&path).unwrap();
        let out = dir.path().join("b.roll");
        save_roll(&r, &out).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&out).unwrap());
        assert!(matches!(load_roll(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
