//! Standard MIDI File reader (formats 0 and 1) and quantization onto the
//! pianoroll grid. A small writer is included for building fixtures.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pianoroll::{save_roll, Pianoroll, RESOLUTION};

pub const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteEvent {
    /// Index among the note-bearing tracks of the file, in chunk order.
    pub track: usize,
    pub pitch: u8,
    pub velocity: u8,
    pub onset_tick: u64,
    pub offset_tick: u64,
}

/// Tempo change points as (tick, microseconds per quarter). Always starts at
/// tick 0 and ticks strictly increase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TempoMap(Vec<(u64, u32)>);

impl TempoMap {
    pub fn new(mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|&(tick, _)| tick);
        // Later events at the same tick win.
        let mut merged: Vec<(u64, u32)> = Vec::with_capacity(changes.len() + 1);
        for (tick, us) in changes {
            match merged.last_mut() {
                Some(last) if last.0 == tick => last.1 = us,
                _ => merged.push((tick, us)),
            }
        }
        if merged.first().map_or(true, |&(t, _)| t != 0) {
            merged.insert(0, (0, DEFAULT_TEMPO));
        }
        TempoMap(merged)
    }

    pub fn entries(&self) -> &[(u64, u32)] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct Smf {
    pub events: Vec<NoteEvent>,
    pub tempo: TempoMap,
    pub ppq: u16,
    /// Number of tracks that carry at least one note.
    pub n_note_tracks: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Midi {
            offset,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err(self.pos, format!("truncated: need {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.err(start, "variable-length quantity longer than 4 bytes"))
    }
}

pub fn parse_smf(bytes: &[u8]) -> Result<Smf> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(b"MThd".as_slice()) {
        return Err(r.err(0, "missing MThd magic"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(r.err(4, format!("header length {header_len} < 6")));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let n_chunks = r.u16()?;
    let division = r.u16()?;
    r.take(header_len - 6)?;
    match format {
        0 | 1 => {}
        2 => return Err(r.err(header_start, "format 2 files are not supported")),
        f => return Err(r.err(header_start, format!("unknown SMF format {f}"))),
    }
    if division & 0x8000 != 0 {
        return Err(r.err(header_start + 4, "SMPTE time division is not supported"));
    }
    if division == 0 {
        return Err(r.err(header_start + 4, "ticks per quarter must be positive"));
    }

    let mut events = Vec::new();
    let mut tempo = Vec::new();
    let mut note_track = 0;
    let mut seen_tracks = 0;
    while seen_tracks < n_chunks as usize && r.pos < bytes.len() {
        let chunk_start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if r.pos + len > bytes.len() {
            return Err(r.err(chunk_start, "truncated chunk"));
        }
        if id != b"MTrk" {
            // Unknown chunk types are skipped.
            r.pos += len;
            continue;
        }
        seen_tracks += 1;
        let mut track = Reader {
            bytes: &bytes[..r.pos + len],
            pos: r.pos,
        };
        let before = events.len();
        parse_track(&mut track, note_track, &mut events, &mut tempo)?;
        if events.len() > before {
            note_track += 1;
        }
        r.pos += len;
    }
    if seen_tracks < n_chunks as usize {
        return Err(r.err(
            r.pos,
            format!("header declares {n_chunks} tracks, found {seen_tracks}"),
        ));
    }
    events.sort_by_key(|e: &NoteEvent| (e.track, e.onset_tick, e.pitch, e.offset_tick));
    Ok(Smf {
        events,
        tempo: TempoMap::new(tempo),
        ppq: division,
        n_note_tracks: note_track,
    })
}

fn parse_track(
    r: &mut Reader<'_>,
    track_idx: usize,
    events: &mut Vec<NoteEvent>,
    tempo: &mut Vec<(u64, u32)>,
) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    // (channel, pitch) -> (onset, velocity)
    let mut open: HashMap<(u8, u8), (u64, u8)> = HashMap::new();
    let close = |events: &mut Vec<NoteEvent>, pitch: u8, (onset, vel): (u64, u8), at: u64| {
        events.push(NoteEvent {
            track: track_idx,
            pitch,
            velocity: vel,
            onset_tick: onset,
            offset_tick: at.max(onset + 1),
        });
    };

    while r.pos < r.bytes.len() {
        tick += r.vlq()? as u64;
        let status_pos = r.pos;
        let mut status = r.u8()?;
        if status < 0x80 {
            status = running.ok_or_else(|| r.err(status_pos, "data byte without running status"))?;
            r.pos -= 1;
        }
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        tempo.push((tick, us));
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let data_len = match status & 0xf0 {
                    0xc0 | 0xd0 => 1,
                    _ => 2,
                };
                let d = r.take(data_len)?;
                let kind = status & 0xf0;
                if kind == 0x90 || kind == 0x80 {
                    let (pitch, vel) = (d[0] & 0x7f, d[1] & 0x7f);
                    let key = (channel, pitch);
                    if let Some(prev) = open.remove(&key) {
                        close(events, pitch, prev, tick);
                    }
                    if kind == 0x90 && vel > 0 {
                        open.insert(key, (tick, vel));
                    }
                }
            }
            _ => return Err(r.err(status_pos, format!("unexpected status byte {status:#04x}"))),
        }
    }
    let mut dangling: Vec<_> = open.into_iter().collect();
    dangling.sort();
    for ((_, pitch), note) in dangling {
        close(events, pitch, note, tick);
    }
    Ok(())
}

/// Tick to grid step, rounding half up.
pub fn tick_to_step(tick: u64, ppq: u64) -> u64 {
    (2 * tick * RESOLUTION as u64 + ppq) / (2 * ppq)
}

pub fn quantize(events: &[NoteEvent], ppq: u64, n_tracks: usize) -> Result<Pianoroll> {
    if ppq == 0 {
        return Err(Error::Invalid("ppq must be >= 1".into()));
    }
    if let Some(e) = events.iter().find(|e| e.track >= n_tracks) {
        return Err(Error::Invalid(format!(
            "event on track {} but roll has {n_tracks} tracks",
            e.track
        )));
    }
    let spans: Vec<(usize, usize, usize, usize)> = events
        .iter()
        .map(|e| {
            let on = tick_to_step(e.onset_tick, ppq);
            let off = tick_to_step(e.offset_tick, ppq).max(on + 1);
            (e.track, e.pitch as usize, on as usize, off as usize)
        })
        .collect();
    let n_time = spans.iter().map(|s| s.3).max().unwrap_or(0);
    if n_time == 0 || n_tracks == 0 {
        return Err(Error::EmptyPerformance);
    }
    let mut roll = Pianoroll::zeros(n_tracks, n_time)?;
    for (k, p, on, off) in spans {
        for t in on..off {
            roll.set(k, p, t, true)?;
        }
    }
    Ok(roll)
}

/// Parses a MIDI file and quantizes it. Returns the roll and the tempo map.
pub fn read_midi_roll(midi_path: impl AsRef<Path>) -> Result<(Pianoroll, Smf)> {
    let path = midi_path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let smf = parse_smf(&bytes)?;
    let roll = quantize(&smf.events, smf.ppq as u64, smf.n_note_tracks)?;
    Ok((roll, smf))
}

pub fn ingest(midi_path: impl AsRef<Path>, roll_path: impl AsRef<Path>) -> Result<()> {
    let (roll, _) = read_midi_roll(midi_path)?;
    save_roll(&roll, roll_path)
}

fn write_vlq(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (v & 0x7f) as u8;
        n += 1;
        v >>= 7;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(buf[i] | if i > 0 { 0x80 } else { 0 });
    }
}

/// Encodes a format-1 file: a conductor track holding the tempo map, then one
/// track per note-track index. Notes use channel = track index mod 16.
pub fn encode_smf(events: &[NoteEvent], tempo: &TempoMap, ppq: u16) -> Vec<u8> {
    let n_tracks = events.iter().map(|e| e.track + 1).max().unwrap_or(0);
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&((n_tracks + 1) as u16).to_be_bytes());
    out.extend_from_slice(&ppq.to_be_bytes());

    let mut chunk = |body: Vec<u8>| {
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
    };

    let mut conductor = Vec::new();
    let mut last = 0;
    for &(tick, us) in tempo.entries() {
        write_vlq(&mut conductor, (tick - last) as u32);
        conductor.extend_from_slice(&[0xff, 0x51, 0x03]);
        conductor.extend_from_slice(&us.to_be_bytes()[1..]);
        last = tick;
    }
    conductor.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
    chunk(conductor);

    for k in 0..n_tracks {
        // (tick, order, status, pitch, velocity); offs sort before ons.
        let mut msgs: BTreeMap<(u64, u8, u8), u8> = BTreeMap::new();
        let ch = (k % 16) as u8;
        for e in events.iter().filter(|e| e.track == k) {
            msgs.insert((e.offset_tick, 0, e.pitch), 0);
            msgs.insert((e.onset_tick, 1, e.pitch), e.velocity);
        }
        let mut body = Vec::new();
        let mut last = 0;
        for ((tick, order, pitch), vel) in msgs {
            write_vlq(&mut body, (tick - last) as u32);
            let status = if order == 0 { 0x80 } else { 0x90 } | ch;
            body.extend_from_slice(&[status, pitch, if order == 0 { 64 } else { vel }]);
            last = tick;
        }
        body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        chunk(body);
    }
    out
}
