//! Training loop: per-sample grid augmentation, padded batches, masked
//! cross-entropy with hard negative mining and step-decay Adam.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassSet, Document};
use crate::error::{Error, Result};
use crate::metrics::DocPrediction;
use crate::gridder::{map_pieces, sample_shape, AugmentParams, Grid, GridShape};
use crate::model::{Checkpoint, CutieModel};
use crate::nn::layers::IdGrid;
use crate::nn::loss::per_cell_xent;
use crate::nn::{masked_softmax_xent, AdamHyper, AdamState, Scalar, Tensor};
use crate::tokenizer::{tokenize_document, TokenPiece, Vocabulary, PAD_ID};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_steps: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    /// `(step, lr)` pairs: from `step` on, the learning rate is `lr`.
    pub decay: Vec<(u64, f64)>,
    /// Background cells kept per positive cell by hard negative mining.
    pub neg_ratio: f64,
    /// Draw a grid shape per sample; otherwise every sample uses the mean.
    pub augment: bool,
    pub grid: AugmentParams,
    pub adam: AdamHyper,
    pub seed: u64,
    /// Write `step-<N>.ckpt` every this many steps (0 disables).
    pub checkpoint_interval: u64,
    /// Emit an info log line every this many steps (0 disables).
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 40_000,
            batch_size: 32,
            base_lr: 1e-3,
            decay: vec![(15_000, 1e-4), (30_000, 1e-5)],
            neg_ratio: 3.0,
            augment: true,
            grid: AugmentParams::default(),
            adam: AdamHyper::default(),
            seed: 0,
            checkpoint_interval: 5_000,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.neg_ratio >= 0.0 && self.neg_ratio.is_finite()) {
            return bad(format!("negative ratio {} must be non-negative", self.neg_ratio));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.base_lr));
        }
        let mut prev = (0u64, self.base_lr);
        for (i, &(step, lr)) in self.decay.iter().enumerate() {
            if (i > 0 && step <= prev.0) || !(lr > 0.0 && lr < prev.1) {
                return bad(format!(
                    "decay boundaries must ascend with decreasing positive rates, got {:?}",
                    self.decay
                ));
            }
            prev = (step, lr);
        }
        self.grid.validate()
    }
}

/// Piecewise-constant learning rate.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    config
        .decay
        .iter()
        .rev()
        .find(|(boundary, _)| step >= *boundary)
        .map_or(config.base_lr, |&(_, lr)| lr)
}

/// Counts behind one sample's loss mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskStats {
    pub positives: usize,
    pub negatives: usize,
    pub kept_negatives: usize,
}

/// Per-cell loss weights for one sample. `labels` has `None` for empty cells.
///
/// Every non-background cell gets weight 1, as do the
/// `floor(ratio * positives)` background cells with the highest `cell_loss`
/// (ties broken by cell index). When a sample has no positive cell, every
/// background cell is kept.
pub fn build_loss_mask(
    labels: &[Option<usize>],
    cell_loss: &[f64],
    background: usize,
    ratio: f64,
) -> Result<(Vec<f64>, MaskStats)> {
    if labels.len() != cell_loss.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} cell losses",
            labels.len(),
            cell_loss.len()
        )));
    }
    let mut mask = vec![0.0; labels.len()];
    let mut negatives = Vec::new();
    let mut positives = 0;
    for (i, label) in labels.iter().enumerate() {
        match label {
            Some(c) if *c == background => negatives.push(i),
            Some(_) => {
                mask[i] = 1.0;
                positives += 1;
            }
            None => {}
        }
    }
    let keep = if positives == 0 {
        if !negatives.is_empty() {
            debug!("sample without positive cells; keeping all {} background cells", negatives.len());
        }
        negatives.len()
    } else {
        ((ratio * positives as f64).floor() as usize).min(negatives.len())
    };
    if keep < negatives.len() {
        negatives.sort_by(|&a, &b| cell_loss[b].total_cmp(&cell_loss[a]).then(a.cmp(&b)));
    }
    for &i in &negatives[..keep] {
        mask[i] = 1.0;
    }
    Ok((
        mask,
        MaskStats {
            positives,
            negatives: negatives.len(),
            kept_negatives: keep,
        },
    ))
}

/// A tokenized document ready to be gridded at any shape.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub size: (f64, f64),
    pub pieces: Vec<TokenPiece>,
    /// Class per piece; unlabeled tokens count as background.
    pub labels: Vec<usize>,
}

impl Example {
    pub fn new(doc: &Document, vocab: &Vocabulary, classes: &ClassSet) -> Self {
        let token_labels = doc.label_indices(classes);
        let pieces = tokenize_document(doc, vocab);
        let labels = pieces
            .iter()
            .map(|p| token_labels[p.token_index].unwrap_or(0))
            .collect();
        Example {
            id: doc.id.clone(),
            size: (doc.width, doc.height),
            pieces,
            labels,
        }
    }

    pub fn grid(&self, shape: GridShape) -> Result<Grid> {
        let labels: Vec<Option<usize>> = self.labels.iter().map(|&l| Some(l)).collect();
        map_pieces(&self.pieces, &labels, self.size, shape)
    }
}

pub fn prepare(docs: &[Document], vocab: &Vocabulary, classes: &ClassSet) -> Vec<Example> {
    docs.iter().map(|d| Example::new(d, vocab, classes)).collect()
}

/// Stacks grids into one batch, padding each to the largest extent with PAD
/// cells. Returns the ids and the per-cell labels (`None` for empty cells).
pub fn pad_batch(grids: &[Grid]) -> Result<(IdGrid, Vec<Option<usize>>)> {
    let h = grids.iter().map(|g| g.shape.rows).max().unwrap_or(0);
    let w = grids.iter().map(|g| g.shape.cols).max().unwrap_or(0);
    let mut ids = vec![PAD_ID; grids.len() * h * w];
    let mut labels = vec![None; grids.len() * h * w];
    for (s, g) in grids.iter().enumerate() {
        for r in 0..g.shape.rows {
            let src = r * g.shape.cols;
            let dst = s * h * w + r * w;
            ids[dst..dst + g.shape.cols].copy_from_slice(&g.ids[src..src + g.shape.cols]);
            labels[dst..dst + g.shape.cols].copy_from_slice(&g.labels[src..src + g.shape.cols]);
        }
    }
    Ok((IdGrid::new(grids.len(), h, w, ids)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub masked_cells: usize,
    pub positives: usize,
    pub rows: usize,
    pub cols: usize,
    pub wall_ms: u64,
}

const STREAM_BATCH: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_SHAPE: u64 = 2;

/// Independent generator for one `(step, slot)` and purpose, so a run can be
/// resumed from any step with the same random draws.
fn step_rng(seed: u64, step: u64, slot: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 24) | (slot << 2) | purpose);
    rng
}

/// Hooks called by [`Trainer::run`].
pub trait Observer<T> {
    fn on_step(&mut self, _entry: &LogEntry, _model: &CutieModel<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

pub struct Trainer<T> {
    pub checkpoint: Checkpoint<T>,
    pub config: TrainConfig,
    out_dir: Option<PathBuf>,
}

impl<T: Scalar> Trainer<T> {
    /// Starts from `checkpoint`, resuming its optimizer state when present.
    pub fn new(mut checkpoint: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if checkpoint.optimizer.is_none() {
            let params = checkpoint.model.named_params().into_iter().map(|(_, p)| p);
            checkpoint.optimizer = Some(AdamState::new(params, config.adam));
        }
        if checkpoint.grid.is_none() {
            checkpoint.grid = Some(config.grid.mean_shape());
        }
        Ok(Trainer {
            checkpoint,
            config,
            out_dir: None,
        })
    }

    /// Writes `train_log.jsonl` and periodic checkpoints under `dir`.
    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        self.out_dir = Some(dir.to_path_buf());
        self
    }

    pub fn step(&self) -> u64 {
        self.checkpoint.optimizer.as_ref().map_or(0, |o| o.step)
    }

    /// Trains until `max_steps` and returns the log of the steps taken.
    pub fn run(&mut self, data: &[Example], observer: &mut dyn Observer<T>) -> Result<Vec<LogEntry>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let n_classes = self.checkpoint.model.config.num_classes;
        if let Some(bad) = data.iter().flat_map(|e| &e.labels).find(|&&l| l >= n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside a model with {n_classes} classes"
            )));
        }
        let mut writer = match &self.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("train_log.jsonl"))?;
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let started = Instant::now();
        let mut log = Vec::new();
        while self.step() < self.config.max_steps {
            let entry = self.train_step(data, started)?;
            if let Some(w) = writer.as_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                w.write_all(b"\n")?;
            }
            if self.config.log_interval > 0 && entry.step % self.config.log_interval == 0 {
                info!(
                    "step {} loss {:.5} lr {:e} cells {} grid {}x{}",
                    entry.step, entry.loss, entry.lr, entry.masked_cells, entry.rows, entry.cols
                );
            }
            observer.on_step(&entry, &self.checkpoint.model)?;
            let done = self.step();
            if let Some(dir) = &self.out_dir {
                let interval = self.config.checkpoint_interval;
                if (interval > 0 && done.is_multiple_of(interval)) || done == self.config.max_steps {
                    if let Some(w) = writer.as_mut() {
                        w.flush()?;
                    }
                    self.checkpoint.save(&dir.join(format!("step-{done}.ckpt")))?;
                }
            }
            log.push(entry);
        }
        if let Some(mut w) = writer {
            w.flush()?;
        }
        Ok(log)
    }

    fn train_step(&mut self, data: &[Example], started: Instant) -> Result<LogEntry> {
        let step = self.step();
        let seed = self.config.seed;
        let lr = lr_at(step, &self.config);

        let mut pick = step_rng(seed, step, 0, STREAM_BATCH);
        let mut grids = Vec::with_capacity(self.config.batch_size);
        for slot in 0..self.config.batch_size {
            let example = &data[pick.random_range(0..data.len())];
            let shape = if self.config.augment {
                sample_shape(&self.config.grid, &mut step_rng(seed, step, slot as u64, STREAM_SHAPE))?
            } else {
                self.config.grid.mean_shape()
            };
            grids.push(example.grid(shape)?);
        }
        let (ids, labels) = pad_batch(&grids)?;
        let cells = ids.h * ids.w;

        let model = &mut self.checkpoint.model;
        let mut drop_rng = step_rng(seed, step, 0, STREAM_DROPOUT);
        let (logits, trace) = model.forward_train(&ids, true, &mut drop_rng)?;
        let dense: Vec<usize> = labels.iter().map(|l| l.unwrap_or(0)).collect();
        let cell_loss: Vec<f64> = per_cell_xent(&logits, &dense)?
            .into_iter()
            .map(|v| v.to_f64().unwrap_or(f64::NAN))
            .collect();
        let mut mask = Vec::with_capacity(labels.len());
        let mut positives = 0;
        for s in 0..ids.n {
            let range = s * cells..(s + 1) * cells;
            let (m, stats) = build_loss_mask(&labels[range.clone()], &cell_loss[range], 0, self.config.neg_ratio)?;
            positives += stats.positives;
            mask.extend(m);
        }
        let masked_cells = mask.iter().filter(|&&m| m > 0.0).count();
        let mask_t: Vec<T> = mask.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let (loss, grad) = masked_softmax_xent(&logits, &dense, &mask_t)?;
        let loss = loss.to_f64().unwrap_or(f64::NAN);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        drop(logits);
        model.zero_grad();
        model.backward(trace, &grad)?;
        let optimizer = self.checkpoint.optimizer.as_mut().expect("created in new");
        optimizer.step(&mut self.checkpoint.model.params_mut(), lr)?;
        Ok(LogEntry {
            step,
            loss,
            lr,
            masked_cells,
            positives,
            rows: ids.h,
            cols: ids.w,
            wall_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Trains a freshly built or loaded model and returns the final checkpoint.
pub fn train<T: Scalar>(
    checkpoint: Checkpoint<T>,
    data: &[Example],
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Checkpoint<T>, Vec<LogEntry>)> {
    let mut trainer = Trainer::new(checkpoint, config.clone())?;
    if let Some(dir) = out_dir {
        trainer = trainer.with_out_dir(dir);
    }
    let log = trainer.run(data, &mut ())?;
    Ok((trainer.checkpoint, log))
}

/// Class per cell (argmax over logits), sample by sample.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let base = s * k * hw + p;
            let mut best = 0;
            for c in 1..k {
                if d[base + c * hw] > d[base + best * hw] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Predicted class for every piece of `example`, gridded at `shape`.
pub fn predict_example<T: Scalar>(model: &CutieModel<T>, example: &Example, shape: GridShape) -> Result<Vec<usize>> {
    let grid = example.grid(shape)?;
    let ids = IdGrid::new(1, grid.shape.rows, grid.shape.cols, grid.ids.clone())?;
    let classes = argmax_classes(&model.infer(&ids)?)?;
    let mut out = vec![0; example.pieces.len()];
    for (piece, class) in crate::gridder::read_back(&grid, &classes, grid.shape)? {
        out[piece] = class;
    }
    Ok(out)
}

/// Ground truth and predictions for every example, ready for
/// [`metrics::evaluate`](crate::metrics::evaluate).
pub fn predict_all<T: Scalar>(model: &CutieModel<T>, data: &[Example], shape: GridShape) -> Result<Vec<DocPrediction>> {
    data.iter()
        .map(|e| {
            let pred = predict_example(model, e, shape)?;
            let keys = e.pieces.iter().map(|p| (p.token_index, p.piece_index)).collect();
            DocPrediction::new(e.id.clone(), keys, e.labels.clone(), pred)
        })
        .collect()
}

/// Fraction of pieces whose predicted class equals the label, over all pieces.
pub fn training_accuracy<T: Scalar>(model: &CutieModel<T>, data: &[Example], shape: GridShape) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for e in data {
        let pred = predict_example(model, e, shape)?;
        right += pred.iter().zip(&e.labels).filter(|(p, l)| p == l).count();
        total += pred.len();
    }
    Ok(right as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let c = TrainConfig::default();
        let got: Vec<f64> = [0, 14_999, 15_000, 29_999, 30_000, 39_999]
            .iter()
            .map(|&s| lr_at(s, &c))
            .collect();
        assert_eq!(got, vec![1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let c = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for s in (0..45_000).step_by(250) {
            let lr = lr_at(s, &c);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_schedules() {
        for decay in [vec![(10, 1e-4), (5, 1e-5)], vec![(10, 1e-2)], vec![(10, 0.0)]] {
            let c = TrainConfig { decay, ..TrainConfig::default() };
            assert!(c.validate().is_err());
        }
        let c = TrainConfig { neg_ratio: -1.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    fn mask_case(pos: usize, neg: usize, empty: usize) -> (Vec<Option<usize>>, Vec<f64>) {
        let mut labels = vec![Some(2); pos];
        labels.extend(vec![Some(0); neg]);
        labels.extend(vec![None; empty]);
        let loss = (0..labels.len()).map(|i| (i * 7 % 13) as f64).collect();
        (labels, loss)
    }

    #[test]
    fn mask_keeps_ratio_of_hardest_negatives() {
        let (labels, loss) = mask_case(4, 40, 10);
        let (mask, stats) = build_loss_mask(&labels, &loss, 0, 3.0).unwrap();
        assert_eq!(stats.kept_negatives, 12);
        assert_eq!(mask.iter().sum::<f64>(), 16.0);
        assert!(mask[44..].iter().all(|&m| m == 0.0));
        let kept_min = (4..44).filter(|&i| mask[i] > 0.0).map(|i| loss[i]).fold(f64::MAX, f64::min);
        let dropped_max = (4..44).filter(|&i| mask[i] == 0.0).map(|i| loss[i]).fold(f64::MIN, f64::max);
        assert!(kept_min >= dropped_max);
    }

    #[test]
    fn mask_degenerate_ratios() {
        let (labels, loss) = mask_case(4, 40, 0);
        let (mask, _) = build_loss_mask(&labels, &loss, 0, 0.0).unwrap();
        assert_eq!(mask.iter().sum::<f64>(), 4.0);
        let (labels, loss) = mask_case(4, 2, 3);
        let (mask, _) = build_loss_mask(&labels, &loss, 0, 3.0).unwrap();
        assert_eq!(mask, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
        let (labels, loss) = mask_case(0, 5, 2);
        let (mask, _) = build_loss_mask(&labels, &loss, 0, 3.0).unwrap();
        assert_eq!(mask.iter().sum::<f64>(), 5.0);
    }

    #[test]
    fn padding_fills_with_pad_cells() {
        let g = |rows, cols, id| Grid {
            shape: GridShape { rows, cols },
            ids: vec![id; rows * cols],
            labels: vec![Some(1); rows * cols],
            pieces: (0..rows * cols).map(Some).collect(),
        };
        let (ids, labels) = pad_batch(&[g(2, 3, 5), g(3, 2, 6)]).unwrap();
        assert_eq!((ids.n, ids.h, ids.w), (2, 3, 3));
        assert_eq!(&ids.ids[..9], &[5, 5, 5, 5, 5, 5, 0, 0, 0]);
        assert_eq!(&ids.ids[9..], &[6, 6, 0, 6, 6, 0, 6, 6, 0]);
        assert_eq!(labels.iter().filter(|l| l.is_none()).count(), 6);
    }
}
