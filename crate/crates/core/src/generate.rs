//! Generation with a trained model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::StructureVector;
use crate::model::{column_matrix, Model, Task};
use crate::pianoroll::{CellScale, ContinuousRoll, Pianoroll, Window, N_PITCHES};
use crate::posenc::PositionIndices;
use crate::postprocess::{binarize_with, BinarizeSpec};
use crate::tensor::Tensor;

fn require_task(model: &Model, task: Task) -> Result<()> {
    if model.cfg.task != task {
        return Err(Error::Invalid(format!(
            "model is trained for {:?}, not {task:?}",
            model.cfg.task
        )));
    }
    Ok(())
}

/// Extends `seed_roll` by `horizon` columns, each predicted from the
/// preceding ones (at most `pe.max_len` of them), binarized, and fed back.
/// `structure` must cover the seed and the horizon.
pub fn generate_next(
    model: &Model,
    seed_roll: &Pianoroll,
    structure: &[StructureVector],
    horizon: usize,
    spec: &BinarizeSpec,
) -> Result<Pianoroll> {
    require_task(model, Task::NextTimestep)?;
    spec.validate()?;
    if horizon == 0 {
        return Ok(seed_roll.clone());
    }
    let width = model.cfg.input_width();
    if seed_roll.n_tracks() * N_PITCHES != width {
        return Err(Error::Shape(format!(
            "seed has {} tracks, model expects {}",
            seed_roll.n_tracks(),
            model.cfg.n_tracks
        )));
    }
    let total = seed_roll.n_time() + horizon;
    if structure.len() < total {
        return Err(Error::Labels(format!(
            "structure covers {} steps, generation needs {total}",
            structure.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cells: Vec<u8> = seed_roll.cells().to_vec();
    for n in seed_roll.n_time()..total {
        let ctx = n.min(model.cfg.pe.max_len);
        let window = Window::new(n - ctx, ctx);
        let input = Tensor::new(
            vec![ctx, width],
            cells[window.start * width..n * width].iter().map(|&c| c as f64).collect(),
        )?;
        let indices = PositionIndices::for_window(&model.cfg.pe, structure, window)?;
        let probs = model.predict(&input, &indices)?;
        let last = ContinuousRoll::new(
            seed_roll.n_tracks(),
            1,
            CellScale::Probability,
            probs.row(ctx - 1).to_vec(),
        )?;
        let col = binarize_with(&last, spec, &mut rng)?;
        cells.extend_from_slice(col.cells());
    }
    Pianoroll::from_cells(seed_roll.n_tracks(), total, cells)
}

/// Teacher-forced predictions for `window`: row t holds the probabilities
/// of column `window.start + t + 1` given the true columns up to
/// `window.start + t`.
pub fn predict_next(
    model: &Model,
    roll: &Pianoroll,
    structure: &[StructureVector],
    window: Window,
) -> Result<ContinuousRoll> {
    require_task(model, Task::NextTimestep)?;
    let input = column_matrix(roll, window)?;
    let indices = PositionIndices::for_window(&model.cfg.pe, structure, window)?;
    model.to_roll(&model.predict(&input, &indices)?)
}

/// Target-track probabilities for a conditioning roll in one causal pass.
pub fn generate_accomp(
    model: &Model,
    conditioning: &Pianoroll,
    structure: &[StructureVector],
) -> Result<ContinuousRoll> {
    require_task(model, Task::Accompaniment)?;
    let expected = model.cfg.n_tracks - 1;
    if conditioning.n_tracks() != expected {
        return Err(Error::Shape(format!(
            "conditioning roll has {} tracks, model expects {expected}",
            conditioning.n_tracks()
        )));
    }
    let window = Window::new(0, conditioning.n_time());
    let input = column_matrix(conditioning, window)?;
    let indices = PositionIndices::for_window(&model.cfg.pe, structure, window)?;
    model.to_roll(&model.predict(&input, &indices)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::posenc::{PEConfig, Variant};
    use rand::Rng;

    fn structure(n: usize) -> Vec<StructureVector> {
        (0..n)
            .map(|t| StructureVector { tempo: 0, section: 0, chord: (t / 4) as u32, mpitch: 60 })
            .collect()
    }

    fn model(task: Task, variant: Variant) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            dropout: 0.0,
            task,
            n_tracks: 2,
            target_track: 1,
            pe: PEConfig { variant, d_model: 8, max_len: 16, ..PEConfig::default() },
            ..ModelConfig::default()
        };
        Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    fn random_roll(n_tracks: usize, n_time: usize, seed: u64) -> Pianoroll {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells = (0..n_tracks * n_time * N_PITCHES).map(|_| u8::from(rng.gen_bool(0.05))).collect();
        Pianoroll::from_cells(n_tracks, n_time, cells).unwrap()
    }

    #[test]
    fn zero_horizon_returns_seed() {
        let m = model(Task::NextTimestep, Variant::Rpe);
        let seed = random_roll(2, 5, 0);
        assert_eq!(generate_next(&m, &seed, &structure(5), 0, &BinarizeSpec::default()).unwrap(), seed);
    }

    #[test]
    fn generation_is_deterministic_and_keeps_seed() {
        let m = model(Task::NextTimestep, Variant::LearnedSApe);
        let seed = random_roll(2, 4, 1);
        let spec = BinarizeSpec { method: crate::postprocess::Method::Topk, k: 4, seed: 3, ..Default::default() };
        let a = generate_next(&m, &seed, &structure(24), 20, &spec).unwrap();
        let b = generate_next(&m, &seed, &structure(24), 20, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_time(), 24);
        assert_eq!(&a.cells()[..seed.cells().len()], seed.cells());
        assert!(matches!(
            generate_next(&m, &seed, &structure(10), 20, &spec),
            Err(Error::Labels(_))
        ));
    }

    #[test]
    fn accompaniment_totality() {
        let m = model(Task::Accompaniment, Variant::NsRpeChord);
        let cond = Pianoroll::zeros(1, 12).unwrap();
        let out = generate_accomp(&m, &cond, &structure(12)).unwrap();
        assert_eq!(out.n_time(), 12);
        assert!(out.values().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(generate_accomp(&m, &random_roll(2, 12, 0), &structure(12)).is_err());
    }
}
