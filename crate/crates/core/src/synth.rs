//! Synthetic two-track songs in C major built from a repeating four-bar
//! chord pattern.
//!
//! Track 0 is a melody of chord tones, one note every eighth note; track 1 is
//! a piano holding the current triad. Chord and section labels are exact, so
//! the corpus exercises structure-aware encodings with a known ground truth.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::labels::{
    derive_indices, format_beats, format_labels, melody_pitches, Category, LabelStream, RawLabels,
    Segment,
};
use crate::midi::{encode_smf, NoteEvent, TempoMap, DEFAULT_TEMPO};
use crate::pianoroll::{Pianoroll, RESOLUTION};
use crate::train::Song;

const BAR: usize = 4 * RESOLUTION;
/// Ticks per quarter note of the emitted MIDI files; 6 ticks per grid step.
pub const SYNTH_PPQ: u16 = 96;

/// Triads on the scale degrees of a major key, as semitones above the tonic.
const DEGREES: [[u8; 3]; 6] = [
    [0, 4, 7],
    [2, 5, 9],
    [4, 7, 11],
    [5, 9, 12],
    [7, 11, 14],
    [9, 12, 16],
];

/// Chord block lengths in steps; each pattern is 256 steps.
const BLOCK_LAYOUTS: [&[usize]; 4] = [
    &[64, 64, 64, 64],
    &[32, 32, 64, 64, 64],
    &[64, 32, 32, 96, 32],
    &[96, 32, 64, 64],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthConfig {
    /// Times the 4-bar pattern is played.
    pub repeats: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { repeats: 4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSong {
    pub id: String,
    pub roll: Pianoroll,
    pub labels: RawLabels,
}

impl SynthSong {
    /// Structure vectors with the melody taken from track 0.
    pub fn song(&self) -> Result<Song> {
        let melody = melody_pitches(&self.roll, 0)?;
        let structure = derive_indices(&self.labels, &melody, self.roll.n_time())?;
        Song::new(self.id.clone(), self.roll.clone(), structure)
    }

    pub fn labels_text(&self) -> String {
        format_labels(&self.labels)
    }

    /// Format-1 MIDI file with one track per roll track.
    pub fn midi_bytes(&self) -> Vec<u8> {
        let ticks = (SYNTH_PPQ as u64) / RESOLUTION as u64;
        let events: Vec<NoteEvent> = self
            .roll
            .note_runs()
            .into_iter()
            .map(|(track, pitch, start, end)| NoteEvent {
                track,
                pitch: pitch as u8,
                velocity: 90,
                onset_tick: start as u64 * ticks,
                offset_tick: end as u64 * ticks,
            })
            .collect();
        encode_smf(&events, &TempoMap::new(vec![(0, DEFAULT_TEMPO)]), SYNTH_PPQ)
    }
}

pub fn synth_song<R: Rng>(id: &str, cfg: SynthConfig, rng: &mut R) -> Result<SynthSong> {
    let layout = *BLOCK_LAYOUTS.choose(rng).expect("layouts");
    let chords: Vec<usize> = layout.iter().map(|_| rng.gen_range(0..DEGREES.len())).collect();
    let pattern_len = 4 * BAR;
    let n_time = pattern_len * cfg.repeats;

    // one pattern of melody notes, reused on every repeat
    let mut pattern_melody = Vec::new();
    let mut t = 0;
    for (&len, &c) in layout.iter().zip(&chords) {
        for k in (0..len).step_by(RESOLUTION / 2) {
            let tone = *DEGREES[c].choose(rng).expect("triad");
            pattern_melody.push((t + k, 60 + tone));
        }
        t += len;
    }

    let mut roll = Pianoroll::zeros(2, n_time)?;
    let mut chord_segs = Vec::new();
    let mut section_segs = Vec::new();
    for r in 0..cfg.repeats {
        let base = r * pattern_len;
        section_segs.push(Segment {
            start: base as i64,
            label: if r % 2 == 0 { "A".into() } else { "B".into() },
        });
        for &(s, p) in &pattern_melody {
            for dt in 0..RESOLUTION / 2 - 2 {
                roll.set(0, p as usize, base + s + dt, true)?;
            }
        }
        let mut t = base;
        for (&len, &c) in layout.iter().zip(&chords) {
            for &tone in &DEGREES[c] {
                for s in t..t + len {
                    roll.set(1, (48 + tone) as usize, s, true)?;
                }
            }
            chord_segs.push(Segment {
                start: t as i64,
                label: format!("deg{}", c + 1),
            });
            t += len;
        }
    }
    let end = Some(n_time as i64);
    let mut streams = BTreeMap::new();
    streams.insert(Category::Chord, LabelStream::new(chord_segs, end)?);
    streams.insert(Category::Section, LabelStream::new(section_segs, end)?);
    Ok(SynthSong {
        id: id.to_string(),
        roll,
        labels: RawLabels { streams },
    })
}

/// `n` songs with ids `song00`, `song01`, … from one seed.
pub fn synth_corpus(n: usize, cfg: SynthConfig, seed: u64) -> Result<Vec<SynthSong>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| synth_song(&format!("song{i:02}"), cfg, &mut rng)).collect()
}

/// Offsets file text giving every song a zero offset.
pub fn zero_offsets(songs: &[SynthSong]) -> String {
    songs
        .iter()
        .map(|s| format!("{} {}\n", s.id, format_beats(0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::parse_labels;
    use crate::midi::{parse_smf, quantize};

    #[test]
    fn song_shape_and_labels() {
        let songs = synth_corpus(3, SynthConfig::default(), 7).unwrap();
        for s in &songs {
            assert_eq!(s.roll.n_time(), 1024);
            let song = s.song().unwrap();
            assert_eq!(song.structure.len(), 1024);
            assert_eq!(song.structure[1023].section, 3);
            // piano holds exactly one triad per step
            for t in 0..1024 {
                let on = (0..128).filter(|&p| s.roll.is_on(1, p, t)).count();
                assert_eq!(on, 3);
            }
            assert_eq!(parse_labels(&s.labels_text()).unwrap(), s.labels);
        }
        assert_ne!(songs[0].roll, songs[1].roll);
    }

    #[test]
    fn midi_round_trip() {
        let s = &synth_corpus(1, SynthConfig { repeats: 1 }, 3).unwrap()[0];
        let smf = parse_smf(&s.midi_bytes()).unwrap();
        let roll = quantize(&smf.events, smf.ppq as u64, smf.n_note_tracks).unwrap();
        assert_eq!(roll, s.roll);
    }
}
