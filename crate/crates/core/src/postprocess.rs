//! Binarization of probability rolls and velocity encoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pianoroll::{CellScale, ContinuousRoll, Pianoroll, N_PITCHES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Threshold,
    ThresholdMerge,
    Topk,
    TopkMerge,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Threshold,
        Method::ThresholdMerge,
        Method::Topk,
        Method::TopkMerge,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinarizeSpec {
    pub method: Method,
    pub theta: f64,
    pub k: usize,
    pub max_gap: usize,
    pub seed: u64,
}

impl Default for BinarizeSpec {
    fn default() -> Self {
        BinarizeSpec {
            method: Method::Threshold,
            theta: 0.5,
            k: 8,
            max_gap: 4,
            seed: 0,
        }
    }
}

impl BinarizeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta {} must lie in (0, 1)", self.theta)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        Ok(())
    }

    /// The same parameters under each of the four methods.
    pub fn all_methods(&self) -> Vec<BinarizeSpec> {
        Method::ALL
            .iter()
            .map(|&method| BinarizeSpec { method, ..*self })
            .collect()
    }
}

fn check_probs(probs: &ContinuousRoll) -> Result<()> {
    if probs.scale() != CellScale::Probability {
        return Err(Error::Invalid("expected a probability roll".into()));
    }
    Ok(())
}

/// Cell on iff `p >= theta`.
pub fn binarize_threshold(probs: &ContinuousRoll, theta: f64) -> Result<Pianoroll> {
    check_probs(probs)?;
    let data = probs.values().iter().map(|&p| u8::from(p >= theta)).collect();
    Pianoroll::from_cells(probs.n_tracks(), probs.n_time(), data)
}

/// Fills interior zero runs of length at most `max_gap` in every row.
pub fn merge_gaps(roll: &Pianoroll, max_gap: usize) -> Pianoroll {
    let mut out = roll.clone();
    if max_gap == 0 {
        return out;
    }
    for k in 0..roll.n_tracks() {
        for p in 0..N_PITCHES {
            let mut last_on: Option<usize> = None;
            for t in 0..roll.n_time() {
                if !roll.is_on(k, p, t) {
                    continue;
                }
                if let Some(prev) = last_on {
                    let gap = t - prev - 1;
                    if gap > 0 && gap <= max_gap {
                        for s in prev + 1..t {
                            out.set(k, p, s, true).expect("in range");
                        }
                    }
                }
                last_on = Some(t);
            }
        }
    }
    out
}

/// Per timestep, keeps the `k` most probable cells (ties to the lower pitch,
/// then the lower track) and sets each with an independent Bernoulli draw of
/// its own probability.
pub fn binarize_topk<R: Rng>(probs: &ContinuousRoll, k: usize, rng: &mut R) -> Result<Pianoroll> {
    check_probs(probs)?;
    let n_tracks = probs.n_tracks();
    let width = n_tracks * N_PITCHES;
    if k == 0 || k > width {
        return Err(Error::Invalid(format!("k={k} outside 1..={width}")));
    }
    let mut out = Pianoroll::zeros(n_tracks, probs.n_time())?;
    let mut order: Vec<usize> = Vec::with_capacity(width);
    for t in 0..probs.n_time() {
        let col = probs.column(t);
        order.clear();
        order.extend(0..width);
        // cell index = track * 128 + pitch; rank by (-p, pitch, track)
        order.sort_by(|&a, &b| {
            col[b]
                .total_cmp(&col[a])
                .then((a % N_PITCHES).cmp(&(b % N_PITCHES)))
                .then((a / N_PITCHES).cmp(&(b / N_PITCHES)))
        });
        for &cell in &order[..k] {
            if rng.gen::<f64>() < col[cell] {
                out.set(cell / N_PITCHES, cell % N_PITCHES, t, true)?;
            }
        }
    }
    Ok(out)
}

/// Applies one spec, seeding top-k sampling from the spec's seed.
pub fn binarize(probs: &ContinuousRoll, spec: &BinarizeSpec) -> Result<Pianoroll> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    binarize_with(probs, spec, &mut rng)
}

pub fn binarize_with<R: Rng>(
    probs: &ContinuousRoll,
    spec: &BinarizeSpec,
    rng: &mut R,
) -> Result<Pianoroll> {
    spec.validate()?;
    Ok(match spec.method {
        Method::Threshold => binarize_threshold(probs, spec.theta)?,
        Method::ThresholdMerge => merge_gaps(&binarize_threshold(probs, spec.theta)?, spec.max_gap),
        Method::Topk => binarize_topk(probs, spec.k, rng)?,
        Method::TopkMerge => merge_gaps(&binarize_topk(probs, spec.k, rng)?, spec.max_gap),
    })
}

pub fn mse(a: &Pianoroll, b: &Pianoroll) -> Result<f64> {
    if a.n_tracks() != b.n_tracks() || a.n_time() != b.n_time() {
        return Err(Error::Shape(format!(
            "rolls differ: {}x{} vs {}x{}",
            a.n_tracks(),
            a.n_time(),
            b.n_tracks(),
            b.n_time()
        )));
    }
    let diff = a.cells().iter().zip(b.cells()).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.cells().len() as f64)
}

/// Index of the spec with the lowest MSE against `target` (first wins ties)
/// and every spec's MSE.
pub fn select_binarization(
    probs: &ContinuousRoll,
    target: &Pianoroll,
    specs: &[BinarizeSpec],
) -> Result<(usize, Vec<f64>)> {
    if specs.is_empty() {
        return Err(Error::Invalid("no binarization specs".into()));
    }
    let errors = specs
        .iter()
        .map(|s| mse(&binarize(probs, s)?, target))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, &e) in errors.iter().enumerate() {
        if e < errors[best] {
            best = i;
        }
    }
    Ok((best, errors))
}

/// `round(127 p)` with halves rounded up.
pub fn velocity_encode(probs: &ContinuousRoll) -> Result<ContinuousRoll> {
    check_probs(probs)?;
    let data = probs
        .values()
        .iter()
        .map(|&p| (127.0 * p + 0.5).floor())
        .collect();
    ContinuousRoll::new(probs.n_tracks(), probs.n_time(), CellScale::Velocity, data)
}
