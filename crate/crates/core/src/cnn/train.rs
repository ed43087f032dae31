use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, class_of, cross_entropy, AdamState, CnnError, CnnModel, Scalar};
use crate::dataset::WindowClass;
use crate::eval::prf_counts;

/// Images the trainer can draw from by index.
pub trait ImageSource<F: Scalar>: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn label(&self, i: usize) -> usize;
    /// Writes image `i` (`C x H x W`) into `out`.
    fn write_image(&self, i: usize, out: &mut [F]);
}

/// In-memory images, mostly for tests.
#[derive(Debug, Clone, Default)]
pub struct VecSource<F> {
    pub images: Vec<Vec<F>>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> ImageSource<F> for VecSource<F> {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
    fn write_image(&self, i: usize, out: &mut [F]) {
        out.copy_from_slice(&self.images[i]);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without test-loss improvement before the rate is cut.
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Epochs without test-loss improvement before training stops.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    /// Smallest test-loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.00025,
            plateau_patience: 3,
            plateau_factor: 0.5,
            early_stop_patience: 8,
            max_epochs: 100,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        let bad = |m: &str| Err(CnnError::InvalidTrainConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("improvement threshold must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }
}

pub fn write_history_csv<W: Write>(mut sink: W, history: &TrainHistory) -> std::io::Result<()> {
    writeln!(sink, "epoch,train_loss,test_loss,precision,recall,f1,learning_rate")?;
    for e in &history.epochs {
        writeln!(
            sink,
            "{},{},{},{},{},{},{}",
            e.epoch, e.train_loss, e.test_loss, e.precision, e.recall, e.f1, e.learning_rate
        )?;
    }
    Ok(())
}

const EVAL_BATCH: usize = 256;

/// Test loss and anomalous-class precision/recall/F1.
fn evaluate<F: Scalar>(model: &CnnModel<F>, data: &dyn ImageSource<F>) -> Result<(f64, f64, f64, f64), CnnError> {
    let n = model.config.input_len();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut loss_sum = 0.0;
    let mut buf = vec![F::zero(); EVAL_BATCH * n];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let images = &mut buf[..chunk.len() * n];
        for (slot, &i) in images.chunks_mut(n).zip(chunk) {
            data.write_image(i, slot);
        }
        let labels: Vec<usize> = chunk.iter().map(|&i| data.label(i)).collect();
        let logits = model.forward(images, chunk.len())?;
        loss_sum += cross_entropy(&logits, &labels).f64() * chunk.len() as f64;
        for (l, &y) in logits.iter().zip(&labels) {
            let predicted = class_of(l).0 == WindowClass::Anomalous;
            match (predicted, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let m = prf_counts(tp, fp, fn_);
    Ok((loss_sum / data.len() as f64, m.precision, m.recall, m.f1))
}

/// Mini-batch Adam with learning-rate reduction on test-loss plateaus and
/// early stopping. Returns the weights of the best test-loss epoch.
pub fn train<F: Scalar>(
    model: CnnModel<F>,
    train_set: &dyn ImageSource<F>,
    test_set: &dyn ImageSource<F>,
    cfg: &TrainConfig,
) -> Result<(CnnModel<F>, TrainHistory), CnnError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CnnError::EmptySplit("training"));
    }
    if test_set.is_empty() {
        return Err(CnnError::EmptySplit("test"));
    }
    let n = model.config.input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(&model);
    let mut model = model;
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut lr = cfg.learning_rate;
    let (mut since_best, mut since_cut) = (0, 0);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut images = vec![F::zero(); cfg.batch_size * n];

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let buf = &mut images[..batch.len() * n];
            for (slot, &i) in buf.chunks_mut(n).zip(batch) {
                train_set.write_image(i, slot);
            }
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();
            let (loss, grads) = model.loss_and_grads(buf, &labels, batch.len())?;
            if !loss.is_finite() {
                return Err(CnnError::NonFinite { epoch });
            }
            train_loss += loss.f64() * batch.len() as f64;
            adam_step(&mut model, &grads, &mut state, lr);
        }
        train_loss /= train_set.len() as f64;

        let (test_loss, precision, recall, f1) = evaluate(&model, test_set)?;
        if !test_loss.is_finite() || !model.is_finite() {
            return Err(CnnError::NonFinite { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            test_loss,
            precision,
            recall,
            f1,
            learning_rate: lr,
        });

        if test_loss < best_loss - cfg.min_delta {
            best_loss = test_loss;
            best = model.clone();
            history.best_epoch = epoch;
            since_best = 0;
            since_cut = 0;
        } else {
            since_best += 1;
            since_cut += 1;
            if since_best >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
            if since_cut >= cfg.plateau_patience {
                lr *= cfg.plateau_factor;
                since_cut = 0;
            }
        }
    }
    Ok((best, history))
}
