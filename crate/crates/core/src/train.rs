//! Training loop: length curriculum, inverse-square-root schedule with
//! warmup, early stopping on validation loss.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::StructureVector;
use crate::model::{column_matrix, derive_seed, Example, Model, ModelConfig, Task};
use crate::pianoroll::{Pianoroll, Window};
use crate::posenc::PositionIndices;
use crate::tensor::{adam_step, AdamState, Checkpoint, ParamStore, Tensor};

/// A pianoroll with its per-step structure labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Song {
    pub id: String,
    pub roll: Pianoroll,
    pub structure: Vec<StructureVector>,
}

impl Song {
    pub fn new(id: impl Into<String>, roll: Pianoroll, structure: Vec<StructureVector>) -> Result<Self> {
        if structure.len() != roll.n_time() {
            return Err(Error::Labels(format!(
                "{} structure steps for a roll of {}",
                structure.len(),
                roll.n_time()
            )));
        }
        Ok(Song { id: id.into(), roll, structure })
    }
}

/// Task settings binding training length L1 and generation length L2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SettingTag {
    N1,
    N2,
    A1,
    A2,
    A3,
    #[serde(rename = "custom")]
    Custom,
}

impl SettingTag {
    pub fn lengths(self) -> Option<(usize, usize)> {
        match self {
            SettingTag::N1 => Some((512, 1024)),
            SettingTag::N2 => Some((1024, 1024)),
            SettingTag::A1 => Some((512, 512)),
            SettingTag::A2 => Some((512, 1024)),
            SettingTag::A3 => Some((1024, 1024)),
            SettingTag::Custom => None,
        }
    }

    pub fn task(self) -> Option<Task> {
        match self {
            SettingTag::N1 | SettingTag::N2 => Some(Task::NextTimestep),
            SettingTag::A1 | SettingTag::A2 | SettingTag::A3 => Some(Task::Accompaniment),
            SettingTag::Custom => None,
        }
    }
}

impl fmt::Display for SettingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SettingTag::N1 => "N1",
            SettingTag::N2 => "N2",
            SettingTag::A1 => "A1",
            SettingTag::A2 => "A2",
            SettingTag::A3 => "A3",
            SettingTag::Custom => "custom",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub length: usize,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub curriculum: Vec<Phase>,
    pub batch_size: usize,
    /// Hard cap on optimizer steps across all phases.
    pub max_steps: Option<usize>,
    /// Steps per epoch; by default the number of windows of the phase
    /// length in the training songs divided by the batch size.
    pub steps_per_epoch: Option<usize>,
    /// Share of songs (by sorted id, from the end) held out for validation.
    pub valid_fraction: f64,
    pub setting: SettingTag,
    pub l1: Option<usize>,
    pub l2: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1.0,
            warmup_steps: 4000,
            patience: 5,
            curriculum: vec![
                Phase { length: 128, epochs: 2 },
                Phase { length: 256, epochs: 2 },
                Phase { length: 512, epochs: 50 },
            ],
            batch_size: 8,
            max_steps: None,
            steps_per_epoch: None,
            valid_fraction: 0.1,
            setting: SettingTag::N1,
            l1: None,
            l2: None,
        }
    }
}

impl TrainConfig {
    /// (L1, L2) after reconciling the tag with explicit lengths.
    pub fn lengths(&self) -> Result<(usize, usize)> {
        match (self.setting.lengths(), self.l1, self.l2) {
            (Some((a, b)), l1, l2) => {
                if l1.is_some_and(|v| v != a) || l2.is_some_and(|v| v != b) {
                    return Err(Error::Config(format!(
                        "setting {} fixes (L1, L2) = ({a}, {b})",
                        self.setting
                    )));
                }
                Ok((a, b))
            }
            (None, Some(a), Some(b)) if a >= 1 && b >= 1 => Ok((a, b)),
            (None, ..) => Err(Error::Config("custom setting needs l1 and l2 >= 1".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (l1, _) = self.lengths()?;
        if self.curriculum.is_empty() {
            return Err(Error::Config("empty curriculum".into()));
        }
        if self.curriculum.windows(2).any(|w| w[1].length < w[0].length) {
            return Err(Error::Config("curriculum lengths must not decrease".into()));
        }
        if self.curriculum.iter().any(|p| p.length == 0) {
            return Err(Error::Config("curriculum lengths must be >= 1".into()));
        }
        let last = self.curriculum.last().map(|p| p.length);
        if last != Some(l1) {
            return Err(Error::Config(format!(
                "final curriculum length {last:?} must equal L1 = {l1}"
            )));
        }
        if self.batch_size == 0 || self.warmup_steps == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, warmup_steps and patience must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(Error::Config("valid_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// `base · min(step^-1/2, step · warmup^-3/2)` for steps counted from 1.
pub fn noam_lr(base: f64, warmup: usize, step: usize) -> f64 {
    let s = step.max(1) as f64;
    base * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the validation loss has not improved for `patience` epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, since_best: 0 }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if self.best.is_none_or(|(_, b)| loss < b) {
            self.best = Some((epoch, loss));
            self.since_best = 0;
            return StopDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub phase: usize,
    pub length: usize,
    pub step: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

pub fn log_to_ndjson(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log record") + "\n")
        .collect()
}

pub fn write_log(log: &[LogRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, log_to_ndjson(log)).map_err(|e| Error::io(path, e))
}

/// Usable steps of a song for one example.
fn available(task: Task, song: &Song) -> usize {
    match task {
        Task::NextTimestep => song.roll.n_time().saturating_sub(1),
        Task::Accompaniment => song.roll.n_time(),
    }
}

/// The training pair for `window` of a song.
pub fn make_example(cfg: &ModelConfig, song: &Song, window: Window) -> Result<Example> {
    if song.roll.n_tracks() != cfg.n_tracks {
        return Err(Error::Shape(format!(
            "song {} has {} tracks, model expects {}",
            song.id,
            song.roll.n_tracks(),
            cfg.n_tracks
        )));
    }
    if window.length == 0 || window.end() > available(cfg.task, song) {
        return Err(Error::Index(format!(
            "window [{}, {}) too long for song {}",
            window.start,
            window.end(),
            song.id
        )));
    }
    let (input, target) = match cfg.task {
        Task::NextTimestep => (
            column_matrix(&song.roll, window)?,
            column_matrix(&song.roll, Window::new(window.start + 1, window.length))?,
        ),
        Task::Accompaniment => {
            let cond = song.roll.select_tracks(&cfg.conditioning_tracks())?;
            let tgt = song.roll.select_tracks(&[cfg.target_track])?;
            (column_matrix(&cond, window)?, column_matrix(&tgt, window)?)
        }
    };
    let mask = Tensor::filled(target.shape(), 1.0);
    let indices = PositionIndices::for_window(&cfg.pe, &song.structure, window)?;
    Ok(Example { input, target, mask, indices })
}

/// Consecutive non-overlapping windows of `length` (the whole song when
/// shorter).
pub fn fixed_windows(task: Task, song: &Song, length: usize) -> Vec<Window> {
    let avail = available(task, song);
    if avail == 0 {
        return vec![];
    }
    if avail <= length {
        return vec![Window::new(0, avail)];
    }
    (0..avail / length).map(|i| Window::new(i * length, length)).collect()
}

/// Sorted train and validation songs. With a single song it serves both.
pub fn split_corpus(songs: &[Song], valid_fraction: f64) -> Result<(Vec<&Song>, Vec<&Song>)> {
    if songs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sorted: Vec<&Song> = songs.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    if sorted.len() == 1 {
        return Ok((sorted.clone(), sorted));
    }
    let n_valid = ((sorted.len() as f64 * valid_fraction).ceil() as usize).clamp(1, sorted.len() - 1);
    let valid = sorted.split_off(sorted.len() - n_valid);
    Ok((sorted, valid))
}

pub struct TrainOutcome {
    /// Model with the best-validation parameters.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub best_epoch: usize,
    pub steps: usize,
}

pub fn train(model_cfg: &ModelConfig, tc: &TrainConfig, songs: &[Song], seed: u64) -> Result<TrainOutcome> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let model = Model::new(model_cfg, &mut init_rng)?;
    train_model(model, tc, songs, seed)
}

/// Trains an existing model in place of a fresh one.
pub fn train_model(mut model: Model, tc: &TrainConfig, songs: &[Song], seed: u64) -> Result<TrainOutcome> {
    tc.validate()?;
    let cfg = model.cfg.clone();
    let (l1, _) = tc.lengths()?;
    let (train_songs, valid_songs) = split_corpus(songs, tc.valid_fraction)?;
    let train_songs: Vec<&Song> = train_songs.into_iter().filter(|s| available(cfg.task, s) > 0).collect();
    if train_songs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let valid: Vec<Example> = valid_songs
        .iter()
        .flat_map(|s| fixed_windows(cfg.task, s, l1).into_iter().map(move |w| (s, w)))
        .map(|(s, w)| make_example(&cfg, s, w))
        .collect::<Result<_>>()?;
    if valid.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let mut adam = AdamState::new(&model.store);
    let mut sampler = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 2));
    let mut stopper = EarlyStopping::new(tc.patience);
    let mut best: Option<(ParamStore, AdamState)> = None;
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut epoch = 0usize;
    let cap = tc.max_steps.unwrap_or(usize::MAX);

    'phases: for (phase_idx, phase) in tc.curriculum.iter().enumerate() {
        let windows: usize = train_songs
            .iter()
            .map(|s| fixed_windows(cfg.task, s, phase.length).len())
            .sum();
        let per_epoch = tc.steps_per_epoch.unwrap_or((windows / tc.batch_size).max(1));
        for _ in 0..phase.epochs {
            if step >= cap {
                break 'phases;
            }
            epoch += 1;
            let mut loss_sum = 0.0;
            let mut n_steps = 0;
            let mut lr = 0.0;
            while n_steps < per_epoch && step < cap {
                step += 1;
                let batch = (0..tc.batch_size)
                    .map(|_| {
                        let song = train_songs[sampler.gen_range(0..train_songs.len())];
                        let avail = available(cfg.task, song);
                        let len = phase.length.min(avail);
                        let start = sampler.gen_range(0..=avail - len);
                        make_example(&cfg, song, Window::new(start, len))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (loss, grads) = model.loss_and_grads(&batch, derive_seed(seed, step as u64, 1)).map_err(|e| {
                    Error::Numeric(format!("step {step}, phase {phase_idx}, L={}: {e}", phase.length))
                })?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite training loss {loss} at step {step}, phase {phase_idx}, L={}",
                        phase.length
                    )));
                }
                lr = noam_lr(tc.base_lr, tc.warmup_steps, step);
                adam_step(&mut model.store, &grads, &mut adam, lr)?;
                loss_sum += loss;
                n_steps += 1;
            }
            let valid_loss = model.mean_loss(&valid)?;
            log.push(LogRecord {
                epoch,
                phase: phase_idx,
                length: phase.length,
                step,
                train_loss: loss_sum / n_steps.max(1) as f64,
                valid_loss,
                lr,
            });
            match stopper.observe(epoch, valid_loss) {
                StopDecision::Improved => best = Some((model.store.clone(), adam.clone())),
                StopDecision::Continue => {}
                StopDecision::Stop => break 'phases,
            }
        }
    }

    let (best_epoch, _) = stopper
        .best
        .ok_or_else(|| Error::Invalid("training ran no epochs".into()))?;
    let (params, optim) = best.expect("best snapshot recorded with best epoch");
    model.store = params;
    let checkpoint = model.to_checkpoint(Some(optim))?;
    Ok(TrainOutcome { model, checkpoint, log, best_epoch, steps: step })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let w = 100;
        assert!(noam_lr(1.0, w, 50) < noam_lr(1.0, w, 100));
        assert!((noam_lr(1.0, w, 100) - 0.1).abs() < 1e-15);
        assert!(noam_lr(1.0, w, 400) < noam_lr(1.0, w, 100));
        assert!((noam_lr(2.0, w, 400) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn early_stopping_example() {
        let mut es = EarlyStopping::new(2);
        let decisions: Vec<_> = [1.0, 0.9, 0.95, 0.96]
            .iter()
            .enumerate()
            .map(|(i, &l)| es.observe(i + 1, l))
            .collect();
        assert_eq!(
            decisions,
            vec![StopDecision::Improved, StopDecision::Improved, StopDecision::Continue, StopDecision::Stop]
        );
        assert_eq!(es.best, Some((2, 0.9)));
    }

    #[test]
    fn setting_lengths() {
        let mut tc = TrainConfig { setting: SettingTag::A2, ..Default::default() };
        assert_eq!(tc.lengths().unwrap(), (512, 1024));
        tc.l1 = Some(256);
        assert!(tc.lengths().is_err());
        tc.setting = SettingTag::Custom;
        assert!(tc.lengths().is_err());
        tc.l2 = Some(512);
        assert_eq!(tc.lengths().unwrap(), (256, 512));
    }

    #[test]
    fn curriculum_validation() {
        let mut tc = TrainConfig::default();
        tc.validate().unwrap();
        tc.curriculum = vec![Phase { length: 256, epochs: 1 }, Phase { length: 128, epochs: 1 }];
        assert!(tc.validate().is_err());
        tc.curriculum = vec![Phase { length: 256, epochs: 1 }];
        assert!(tc.validate().is_err());
    }

    #[test]
    fn split_holds_out_last_ids() {
        let roll = Pianoroll::zeros(1, 4).unwrap();
        let st = vec![StructureVector { tempo: 0, section: 0, chord: 0, mpitch: 128 }; 4];
        let songs: Vec<Song> = ["c", "a", "b"]
            .iter()
            .map(|id| Song::new(*id, roll.clone(), st.clone()).unwrap())
            .collect();
        let (tr, va) = split_corpus(&songs, 0.1).unwrap();
        assert_eq!(tr.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(va[0].id, "c");
        assert!(matches!(split_corpus(&[], 0.1), Err(Error::EmptyCorpus)));
    }
}
