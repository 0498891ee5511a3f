//! Batch commands behind the `structpe` binary. Every command reads a
//! [`RunConfig`], writes files under the configured directories, echoes the
//! effective config to `<out_dir>/config.json`, and returns the per-item
//! failures it collected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generate::{generate_accomp, generate_next, predict_next};
use crate::labels::{
    apply_offset, derive_indices, format_indices, load_labels, melody_pitches, parse_indices,
    parse_offsets, tempo_stream, Category,
};
use crate::metrics::{evaluate, ssm, MetricReport};
use crate::midi::read_midi_roll;
use crate::model::{Model, Task};
use crate::pianoroll::{
    load_any_roll, load_roll, save_roll, save_velocity_roll, AnyRoll, ContinuousRoll, Pianoroll,
    Window,
};
use crate::postprocess::{binarize, select_binarization, velocity_encode, BinarizeSpec};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::train::{train, write_log, Song};

pub const MANIFEST: &str = "manifest.tsv";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Train,
    Generate,
    Evaluate,
    PlotSsm,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Train => "train",
            Command::Generate => "generate",
            Command::Evaluate => "evaluate",
            Command::PlotSsm => "plot-ssm",
        }
    }
}

/// Items (songs or rolls) that a command could not process.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Failures(pub Vec<(String, String)>);

impl Failures {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("item\treason\n");
        for (id, reason) in &self.0 {
            let _ = writeln!(s, "{id}\t{}", reason.replace(['\t', '\n'], " "));
        }
        s
    }
}

pub fn run(cmd: Command, cfg: &RunConfig) -> Result<Failures> {
    create_dir(&cfg.paths.out_dir)?;
    write_file(&cfg.paths.out_dir.join(CONFIG_ECHO), &cfg.to_json())?;
    let failures = match cmd {
        Command::Ingest => cmd_ingest(cfg)?,
        Command::Train => cmd_train(cfg)?,
        Command::Generate => cmd_generate(cfg)?,
        Command::Evaluate => cmd_evaluate(cfg)?,
        Command::PlotSsm => cmd_plot_ssm(cfg)?,
    };
    write_file(
        &cfg.paths.out_dir.join(format!("{}_failures.tsv", cmd.name())),
        &failures.to_tsv(),
    )?;
    Ok(failures)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn read_file(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

/// Sorted stems of files in `dir` with the given extension.
fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeSet::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out.into_iter().collect())
}

pub struct IngestedSong {
    pub roll: Pianoroll,
    pub indices: Vec<crate::labels::StructureVector>,
    pub coverage: Vec<Category>,
}

/// MIDI file, label file and offset of one song to roll and index streams.
/// A missing tempo stream is filled from the MIDI tempo map.
pub fn ingest_song(
    midi: &Path,
    labels: &Path,
    offset: crate::labels::AlignmentOffset,
    melody_track: usize,
) -> Result<IngestedSong> {
    let (roll, smf) = read_midi_roll(midi)?;
    let mut raw = apply_offset(&load_labels(labels)?, offset)?;
    raw.streams
        .entry(Category::Tempo)
        .or_insert_with(|| tempo_stream(&smf.tempo, smf.ppq as u64));
    let melody = melody_pitches(&roll, melody_track)?;
    let indices = derive_indices(&raw, &melody, roll.n_time())?;
    let coverage = raw.streams.keys().copied().collect();
    Ok(IngestedSong { roll, indices, coverage })
}

fn cmd_ingest(cfg: &RunConfig) -> Result<Failures> {
    let p = &cfg.paths;
    let ids = stems(&p.midi_dir, "mid")?;
    if ids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let offsets = parse_offsets(&read_file(&p.offsets)?)?;
    create_dir(&p.corpus_dir)?;
    let results: Vec<(String, Result<IngestedSong>)> = ids
        .par_iter()
        .map(|id| {
            let r = match offsets.get(id) {
                None => Err(Error::Labels("no offset".into())),
                Some(&off) => ingest_song(
                    &p.midi_dir.join(format!("{id}.mid")),
                    &p.labels_dir.join(format!("{id}.labels")),
                    off,
                    cfg.ingest.melody_track,
                ),
            };
            (id.clone(), r)
        })
        .collect();
    let mut manifest = String::from("id\tn_time\tn_tracks\tcoverage\n");
    let mut failures = Failures::default();
    for (id, r) in results {
        match r {
            Ok(s) => {
                save_roll(&s.roll, p.corpus_dir.join(format!("{id}.roll")))?;
                write_file(&p.corpus_dir.join(format!("{id}.idx")), &format_indices(&s.indices))?;
                let cov: Vec<&str> = s.coverage.iter().map(|c| c.name()).collect();
                let _ = writeln!(
                    manifest,
                    "{id}\t{}\t{}\t{}",
                    s.roll.n_time(),
                    s.roll.n_tracks(),
                    cov.join(",")
                );
            }
            Err(Error::Labels(m)) if m == "no offset" => failures.0.push((id, m)),
            Err(e) => failures.0.push((id, e.to_string())),
        }
    }
    write_file(&p.corpus_dir.join(MANIFEST), &manifest)?;
    Ok(failures)
}

/// Songs listed in the corpus manifest, in manifest order.
pub fn load_corpus(dir: &Path) -> Result<Vec<Song>> {
    let path = dir.join(MANIFEST);
    let text = read_file(&path)?;
    let mut songs = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let id = line.split('\t').next().unwrap_or_default();
        let roll = load_roll(dir.join(format!("{id}.roll")))?;
        let indices = parse_indices(&read_file(&dir.join(format!("{id}.idx")))?)?;
        songs.push(Song::new(id, roll, indices)?);
    }
    if songs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(songs)
}

fn cmd_train(cfg: &RunConfig) -> Result<Failures> {
    let songs = load_corpus(&cfg.paths.corpus_dir)?;
    let out = train(&cfg.model, &cfg.train, &songs, cfg.seed)?;
    let ckpt = cfg.paths.checkpoint();
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_checkpoint(&out.checkpoint, &ckpt)?;
    write_log(&out.log, cfg.paths.out_dir.join("train_log.ndjson"))?;
    Ok(Failures::default())
}

/// Model from the configured checkpoint; its PE variant must match the
/// config's.
pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    let model = Model::from_checkpoint(&read_checkpoint(cfg.paths.checkpoint())?)?;
    if model.cfg.pe.variant != cfg.model.pe.variant {
        return Err(Error::Config(format!(
            "PE variant mismatch: checkpoint has {}, config has {}",
            model.cfg.pe.variant, cfg.model.pe.variant
        )));
    }
    if model.cfg.task != cfg.model.task {
        return Err(Error::Config(format!(
            "task mismatch: checkpoint has {:?}, config has {:?}",
            model.cfg.task, cfg.model.task
        )));
    }
    Ok(model)
}

/// Probabilities and aligned ground truth for one song.
pub struct Prediction {
    pub probs: Option<ContinuousRoll>,
    pub generated: Pianoroll,
    pub target: Pianoroll,
}

/// Runs the configured setting on one song. Accompaniment covers
/// `[0, L2)`; next-timestep generation is teacher-forced over the L2 window
/// unless `generate.horizon` asks for free-running continuation of an L1
/// seed.
pub fn predict_song(model: &Model, cfg: &RunConfig, song: &Song) -> Result<Prediction> {
    let (l1, l2) = cfg.train.lengths()?;
    let n = song.roll.n_time();
    let short = |need: usize| {
        Error::Invalid(format!("song has {n} steps, setting needs {need}"))
    };
    match model.cfg.task {
        Task::Accompaniment => {
            let len = l2.min(n);
            let w = Window::new(0, len);
            let roll = song.roll.slice_window(w)?;
            let (cond, target) = roll.split_tracks(&model.cfg.conditioning_tracks())?;
            let probs = generate_accomp(model, &cond, &song.structure[..len])?;
            let generated = binarize_for(&probs, &target, cfg)?;
            Ok(Prediction { probs: Some(probs), generated, target })
        }
        Task::NextTimestep if cfg.generate.horizon == 0 => {
            if n < 2 {
                return Err(short(2));
            }
            let len = l2.min(n - 1);
            let probs = predict_next(model, &song.roll, &song.structure, Window::new(0, len))?;
            let target = song.roll.slice_window(Window::new(1, len))?;
            let generated = binarize_for(&probs, &target, cfg)?;
            Ok(Prediction { probs: Some(probs), generated, target })
        }
        Task::NextTimestep => {
            let h = cfg.generate.horizon;
            if n < l1 + h {
                return Err(short(l1 + h));
            }
            let seed = song.roll.slice_window(Window::new(0, l1))?;
            let full = generate_next(model, &seed, &song.structure, h, &cfg.binarize)?;
            Ok(Prediction {
                probs: None,
                generated: full.slice_window(Window::new(l1, h))?,
                target: song.roll.slice_window(Window::new(l1, h))?,
            })
        }
    }
}

fn binarize_for(probs: &ContinuousRoll, target: &Pianoroll, cfg: &RunConfig) -> Result<Pianoroll> {
    if cfg.generate.select {
        let cands = cfg.binarize.all_methods();
        let (best, _) = select_binarization(probs, target, &cands)?;
        binarize(probs, &cands[best])
    } else {
        binarize(probs, &cfg.binarize)
    }
}

fn chosen_spec(probs: &ContinuousRoll, target: &Pianoroll, cfg: &RunConfig) -> Result<BinarizeSpec> {
    let cands = cfg.binarize.all_methods();
    Ok(cands[select_binarization(probs, target, &cands)?.0].clone())
}

fn cmd_generate(cfg: &RunConfig) -> Result<Failures> {
    let model = load_model(cfg)?;
    let songs = load_corpus(&cfg.paths.corpus_dir)?;
    let wanted: Vec<&Song> = if cfg.generate.songs.is_empty() {
        songs.iter().collect()
    } else {
        cfg.generate
            .songs
            .iter()
            .map(|id| {
                songs
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| Error::Config(format!("unknown song `{id}`")))
            })
            .collect::<Result<_>>()?
    };
    let gen_dir = cfg.paths.generated_dir();
    let tgt_dir = cfg.paths.target_dir();
    let vel_dir = cfg.paths.out_dir.join("velocity");
    for d in [&gen_dir, &tgt_dir, &vel_dir] {
        create_dir(d)?;
    }
    let mut failures = Failures::default();
    let mut choices = String::from("id\tmethod\n");
    for song in wanted {
        match predict_song(&model, cfg, song) {
            Ok(pred) => {
                save_roll(&pred.generated, gen_dir.join(format!("{}.roll", song.id)))?;
                save_roll(&pred.target, tgt_dir.join(format!("{}.roll", song.id)))?;
                if let Some(probs) = &pred.probs {
                    save_velocity_roll(&velocity_encode(probs)?, vel_dir.join(format!("{}.roll", song.id)))?;
                    if cfg.generate.select {
                        let spec = chosen_spec(probs, &pred.target, cfg)?;
                        let _ = writeln!(choices, "{}\t{}", song.id, serde_json::to_string(&spec.method).unwrap_or_default().trim_matches('"'));
                    }
                }
            }
            Err(e) => failures.0.push((song.id.clone(), e.to_string())),
        }
    }
    if cfg.generate.select {
        write_file(&cfg.paths.out_dir.join("binarization.tsv"), &choices)?;
    }
    Ok(failures)
}

fn any_evaluate(target: &AnyRoll, pred: &AnyRoll, window: usize) -> Result<MetricReport> {
    match (target, pred) {
        (AnyRoll::Binary(a), AnyRoll::Binary(b)) => evaluate(a, b, window),
        (AnyRoll::Binary(a), AnyRoll::Velocity(b)) => evaluate(a, b, window),
        (AnyRoll::Velocity(a), AnyRoll::Binary(b)) => evaluate(a, b, window),
        (AnyRoll::Velocity(a), AnyRoll::Velocity(b)) => evaluate(a, b, window),
    }
}

pub const REPORT_HEADER: &str = "\
# structpe evaluation report
# SSMD, CS and GS are on a x100 scale. NDD is the raw mean absolute difference
# in distinct pitches per sixteenth-note cell and is not rescaled.
# CS counts a half-measure where exactly one side has no onsets as 0.
";

/// Report text for per-song metrics (in the given order) and the failures.
pub fn format_report(rows: &[(String, MetricReport)], failures: &Failures, ssm_window: usize) -> String {
    let mut s = String::from(REPORT_HEADER);
    let _ = writeln!(s, "# ssm_window={ssm_window} songs={} failed={}", rows.len(), failures.0.len());
    s.push_str("song\tmetric\tvalue\n");
    for (id, rep) in rows {
        for (name, v) in MetricReport::NAMES.iter().zip(rep.values()) {
            let _ = writeln!(s, "{id}\t{name}\t{v:.2}");
        }
    }
    if !rows.is_empty() {
        for (i, name) in MetricReport::NAMES.iter().enumerate() {
            let mean = rows.iter().map(|(_, r)| r.values()[i]).sum::<f64>() / rows.len() as f64;
            let _ = writeln!(s, "mean\t{name}\t{mean:.2}");
        }
    }
    for (id, reason) in &failures.0 {
        let _ = writeln!(s, "# failed {id}: {}", reason.replace('\n', " "));
    }
    s
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<Failures> {
    let gen_dir = cfg.paths.generated_dir();
    let tgt_dir = cfg.paths.target_dir();
    let ids = stems(&tgt_dir, "roll")?;
    if ids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let window = cfg.metrics.ssm_window;
    let results: Vec<(String, Result<MetricReport>)> = ids
        .par_iter()
        .map(|id| {
            let r = (|| {
                let target = load_any_roll(tgt_dir.join(format!("{id}.roll")))?;
                let pred = load_any_roll(gen_dir.join(format!("{id}.roll")))?;
                any_evaluate(&target, &pred, window)
            })();
            (id.clone(), r)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Failures::default();
    for (id, r) in results {
        match r {
            Ok(rep) => rows.push((id, rep)),
            Err(e) => failures.0.push((id, e.to_string())),
        }
    }
    write_file(&cfg.paths.out_dir.join("report.tsv"), &format_report(&rows, &failures, window))?;
    Ok(failures)
}

/// Plain-text graymap with pixel (a, b) = round(255 · m[a][b]).
pub fn ssm_pgm(m: &[Vec<f64>]) -> String {
    let pixels: Vec<Vec<u8>> = m
        .iter()
        .map(|row| row.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect())
        .collect();
    pgm(&pixels)
}

fn pgm(pixels: &[Vec<u8>]) -> String {
    let h = pixels.len();
    let w = pixels.first().map_or(0, Vec::len);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for row in pixels {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

const MONTAGE_GAP: usize = 2;
pub const MONTAGE_MAX: usize = 5;

/// Matrices side by side, top-aligned, separated by white columns; shorter
/// images are padded with black.
pub fn montage_pgm(ms: &[Vec<Vec<f64>>]) -> String {
    let h = ms.iter().map(Vec::len).max().unwrap_or(0);
    let rows: Vec<Vec<u8>> = (0..h)
        .map(|r| {
            let mut row = Vec::new();
            for (i, m) in ms.iter().enumerate() {
                if i > 0 {
                    row.extend(std::iter::repeat(255).take(MONTAGE_GAP));
                }
                match m.get(r) {
                    Some(line) => row.extend(line.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)),
                    None => row.extend(std::iter::repeat(0).take(m.len())),
                }
            }
            row
        })
        .collect();
    pgm(&rows)
}

fn load_roll_ssm(path: &Path, window: usize) -> Result<Vec<Vec<f64>>> {
    match load_any_roll(path)? {
        AnyRoll::Binary(r) => ssm(&r, window),
        AnyRoll::Velocity(r) => ssm(&r, window),
    }
}

fn cmd_plot_ssm(cfg: &RunConfig) -> Result<Failures> {
    let inputs = &cfg.plot.rolls;
    if inputs.is_empty() {
        return Err(Error::Config("plot.rolls lists no roll files".into()));
    }
    let dir = cfg.paths.out_dir.join("ssm");
    create_dir(&dir)?;
    let mut failures = Failures::default();
    let mut mats = Vec::new();
    for (i, path) in inputs.iter().enumerate() {
        match load_roll_ssm(path, cfg.metrics.ssm_window) {
            Ok(m) => {
                write_file(&dir.join(plot_name(i, path)), &ssm_pgm(&m))?;
                mats.push(m);
            }
            Err(e) => failures.0.push((path.display().to_string(), e.to_string())),
        }
    }
    if inputs.len() <= MONTAGE_MAX && !mats.is_empty() {
        write_file(&dir.join("montage.pgm"), &montage_pgm(&mats))?;
    }
    Ok(failures)
}

/// `<index>_<stem>.pgm`; the index keeps equal stems apart.
pub fn plot_name(i: usize, path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("roll");
    PathBuf::from(format!("{i:02}_{stem}.pgm"))
}
