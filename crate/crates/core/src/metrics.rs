//! Evaluation metrics: self-similarity matrix distance, chroma similarity,
//! grooving similarity and note density distance. Reported values use the
//! ×100 scale for SSMD, CS and GS; NDD is the raw mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pianoroll::{ContinuousRoll, Pianoroll, N_PITCHES, RESOLUTION};

/// Half a 4/4 bar.
pub const HALF_MEASURE: usize = 2 * RESOLUTION;
pub const GROOVE_BAR: usize = 4 * RESOLUTION;
pub const GROOVE_BINS: usize = 16;
/// Steps per sixteenth-note density cell.
pub const DENSITY_CELL: usize = RESOLUTION / 4;

/// Rolls whose cells can be read as on/off.
pub trait ActiveCells {
    fn n_tracks(&self) -> usize;
    fn n_time(&self) -> usize;
    fn active(&self, track: usize, pitch: usize, t: usize) -> bool;
}

impl ActiveCells for Pianoroll {
    fn n_tracks(&self) -> usize {
        Pianoroll::n_tracks(self)
    }
    fn n_time(&self) -> usize {
        Pianoroll::n_time(self)
    }
    fn active(&self, track: usize, pitch: usize, t: usize) -> bool {
        self.is_on(track, pitch, t)
    }
}

/// Any positive value counts as active.
impl ActiveCells for ContinuousRoll {
    fn n_tracks(&self) -> usize {
        ContinuousRoll::n_tracks(self)
    }
    fn n_time(&self) -> usize {
        ContinuousRoll::n_time(self)
    }
    fn active(&self, track: usize, pitch: usize, t: usize) -> bool {
        self.value(track, pitch, t) > 0.0
    }
}

fn onset<R: ActiveCells + ?Sized>(r: &R, k: usize, p: usize, t: usize) -> bool {
    r.active(k, p, t) && (t == 0 || !r.active(k, p, t - 1))
}

fn same_length<A: ActiveCells + ?Sized, B: ActiveCells + ?Sized>(a: &A, b: &B) -> Result<()> {
    if a.n_time() != b.n_time() {
        return Err(Error::Shape(format!(
            "length mismatch: {} vs {} steps",
            a.n_time(),
            b.n_time()
        )));
    }
    Ok(())
}

/// Inputs are integer counts, so sums are exact and `cosine(a, a)` is 1.
fn cosine(a: &[f64; 12], b: &[f64; 12]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb).sqrt())
}

fn pitch_class_counts<R: ActiveCells + ?Sized>(
    roll: &R,
    window: usize,
    hit: impl Fn(usize, usize, usize) -> bool,
) -> Vec<[f64; 12]> {
    let n = roll.n_time();
    let mut out = vec![[0.0; 12]; n.div_ceil(window)];
    for t in 0..n {
        let v = &mut out[t / window];
        for k in 0..roll.n_tracks() {
            for p in 0..N_PITCHES {
                if hit(k, p, t) {
                    v[p % 12] += 1.0;
                }
            }
        }
    }
    out
}

/// Active-cell counts per pitch class for each window; a trailing partial
/// window is kept.
pub fn chroma_profile<R: ActiveCells + ?Sized>(roll: &R, window_steps: usize) -> Result<Vec<[f64; 12]>> {
    if window_steps == 0 {
        return Err(Error::Invalid("window must be >= 1 step".into()));
    }
    Ok(pitch_class_counts(roll, window_steps, |k, p, t| roll.active(k, p, t)))
}

/// Cosine similarities between window chroma profiles. A zero profile has
/// similarity 0 with everything except itself on the diagonal.
pub fn ssm<R: ActiveCells + ?Sized>(roll: &R, window_steps: usize) -> Result<Vec<Vec<f64>>> {
    let prof = chroma_profile(roll, window_steps)?;
    if prof.is_empty() {
        return Err(Error::Invalid("roll has no windows".into()));
    }
    let n = prof.len();
    Ok((0..n)
        .map(|a| {
            (0..n)
                .map(|b| {
                    if a == b {
                        1.0
                    } else {
                        cosine(&prof[a], &prof[b]).unwrap_or(0.0)
                    }
                })
                .collect()
        })
        .collect())
}

pub fn ssmd<A, B>(target: &A, pred: &B, window_steps: usize) -> Result<f64>
where
    A: ActiveCells + ?Sized,
    B: ActiveCells + ?Sized,
{
    same_length(target, pred)?;
    let (s1, s2) = (ssm(target, window_steps)?, ssm(pred, window_steps)?);
    let n = s1.len();
    let total: f64 = s1
        .iter()
        .zip(&s2)
        .flat_map(|(r1, r2)| r1.iter().zip(r2).map(|(a, b)| (a - b).abs()))
        .sum();
    Ok(100.0 * total / (n * n) as f64)
}

/// Onset counts per pitch class for each half-measure.
pub fn onset_chroma<R: ActiveCells + ?Sized>(roll: &R) -> Vec<[f64; 12]> {
    pitch_class_counts(roll, HALF_MEASURE, |k, p, t| onset(roll, k, p, t))
}

pub fn chroma_similarity<A, B>(target: &A, pred: &B) -> Result<f64>
where
    A: ActiveCells + ?Sized,
    B: ActiveCells + ?Sized,
{
    same_length(target, pred)?;
    let (c1, c2) = (onset_chroma(target), onset_chroma(pred));
    if c1.is_empty() {
        return Ok(100.0);
    }
    let total: f64 = c1
        .iter()
        .zip(&c2)
        .map(|(a, b)| {
            let za = a.iter().all(|&x| x == 0.0);
            let zb = b.iter().all(|&x| x == 0.0);
            match (za, zb) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ => cosine(a, b).expect("nonzero vectors"),
            }
        })
        .sum();
    Ok(100.0 * total / c1.len() as f64)
}

/// Onset counts in 16 position-in-bar bins of 4 steps each.
pub fn onset_histogram<R: ActiveCells + ?Sized>(roll: &R) -> [f64; GROOVE_BINS] {
    let mut h = [0.0; GROOVE_BINS];
    let per_bin = GROOVE_BAR / GROOVE_BINS;
    for t in 0..roll.n_time() {
        let bin = (t % GROOVE_BAR) / per_bin;
        for k in 0..roll.n_tracks() {
            for p in 0..N_PITCHES {
                if onset(roll, k, p, t) {
                    h[bin] += 1.0;
                }
            }
        }
    }
    h
}

pub fn grooving_similarity<A, B>(target: &A, pred: &B) -> Result<f64>
where
    A: ActiveCells + ?Sized,
    B: ActiveCells + ?Sized,
{
    same_length(target, pred)?;
    let (h1, h2) = (onset_histogram(target), onset_histogram(pred));
    let (s1, s2): (f64, f64) = (h1.iter().sum(), h2.iter().sum());
    Ok(match (s1 == 0.0, s2 == 0.0) {
        (true, true) => 100.0,
        (true, false) | (false, true) => 0.0,
        // min(a/s1, b/s2) summed over bins, kept in integer arithmetic
        _ => 100.0 * h1.iter().zip(&h2).map(|(a, b)| (a * s2).min(b * s1)).sum::<f64>() / (s1 * s2),
    })
}

/// Distinct active pitches (over all tracks) in each 4-step cell.
pub fn note_density<R: ActiveCells + ?Sized>(roll: &R) -> Vec<f64> {
    let n = roll.n_time();
    (0..n.div_ceil(DENSITY_CELL))
        .map(|c| {
            let span = c * DENSITY_CELL..((c + 1) * DENSITY_CELL).min(n);
            (0..N_PITCHES)
                .filter(|&p| {
                    span.clone()
                        .any(|t| (0..roll.n_tracks()).any(|k| roll.active(k, p, t)))
                })
                .count() as f64
        })
        .collect()
}

pub fn note_density_distance<A, B>(target: &A, pred: &B) -> Result<f64>
where
    A: ActiveCells + ?Sized,
    B: ActiveCells + ?Sized,
{
    same_length(target, pred)?;
    let (d1, d2) = (note_density(target), note_density(pred));
    if d1.is_empty() {
        return Ok(0.0);
    }
    Ok(d1.iter().zip(&d2).map(|(a, b)| (a - b).abs()).sum::<f64>() / d1.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ssmd: f64,
    pub cs: f64,
    pub gs: f64,
    pub ndd: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 4] = ["SSMD", "CS", "GS", "NDD"];

    pub fn values(&self) -> [f64; 4] {
        [self.ssmd, self.cs, self.gs, self.ndd]
    }
}

pub fn evaluate<A, B>(target: &A, pred: &B, ssm_window: usize) -> Result<MetricReport>
where
    A: ActiveCells + ?Sized,
    B: ActiveCells + ?Sized,
{
    Ok(MetricReport {
        ssmd: ssmd(target, pred, ssm_window)?,
        cs: chroma_similarity(target, pred)?,
        gs: grooving_similarity(target, pred)?,
        ndd: note_density_distance(target, pred)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roll_with(n_time: usize, notes: &[(usize, usize, std::ops::Range<usize>)]) -> Pianoroll {
        let mut r = Pianoroll::zeros(2, n_time).unwrap();
        for (k, p, span) in notes {
            for t in span.clone() {
                r.set(*k, *p, t, true).unwrap();
            }
        }
        r
    }

    #[test]
    fn chroma_examples() {
        let r = roll_with(64, &[(0, 60, 0..32)]);
        let c = chroma_profile(&r, 32).unwrap();
        assert_eq!(c[0][0], 32.0);
        assert!(c[0][1..].iter().all(|&x| x == 0.0));
        assert!(c[1].iter().all(|&x| x == 0.0));
        assert_eq!(chroma_profile(&roll_with(40, &[]), 32).unwrap().len(), 2);
    }

    #[test]
    fn ssm_conventions() {
        let r = roll_with(96, &[(0, 60, 0..32), (1, 64, 64..96)]);
        let s = ssm(&r, 32).unwrap();
        for a in 0..3 {
            assert_eq!(s[a][a], 1.0);
            for b in 0..3 {
                assert_eq!(s[a][b], s[b][a]);
            }
        }
        assert_eq!(s[0][1], 0.0);
        assert_eq!(s[0][2], 0.0);
    }

    #[test]
    fn identity_and_extremes() {
        let a = roll_with(128, &[(0, 60, 0..8), (1, 67, 20..40), (0, 62, 70..71)]);
        let rep = evaluate(&a, &a, 32).unwrap();
        assert_eq!(rep.values(), [0.0, 100.0, 100.0, 0.0]);
        let empty = roll_with(128, &[]);
        assert_eq!(chroma_similarity(&a, &empty).unwrap(), 50.0);
        assert_eq!(grooving_similarity(&a, &empty).unwrap(), 0.0);
        assert_eq!(grooving_similarity(&empty, &empty).unwrap(), 100.0);
        let beat1 = roll_with(64, &[(0, 60, 0..2)]);
        let beat2 = roll_with(64, &[(0, 60, 16..18)]);
        assert_eq!(grooving_similarity(&beat1, &beat2).unwrap(), 0.0);
        assert!(ssmd(&a, &roll_with(64, &[]), 32).is_err());
    }

    #[test]
    fn density_constant_case() {
        let t = roll_with(16, &[(0, 60, 0..16), (0, 64, 0..16), (1, 67, 0..16)]);
        let p = roll_with(16, &[(1, 60, 0..16)]);
        assert_eq!(note_density_distance(&t, &p).unwrap(), 2.0);
        assert_eq!(note_density_distance(&p, &t).unwrap(), 2.0);
    }
}
