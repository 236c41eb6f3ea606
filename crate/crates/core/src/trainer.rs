//! Alternating minimax training of the releaser against an attacker.
//!
//! Each outer iteration takes `k` RMSprop steps on the attacker's
//! cross-entropy with the releaser frozen, then one step on the releaser loss
//! `D − λ·h` with the attacker frozen. The entropy term `h` is backpropagated
//! through the frozen attacker into the release and on into the releaser.
//!
//! Consumption is standardized with train-split statistics before it reaches
//! either network. Distortion during training is measured in standardized
//! units; releases are mapped back to kW for evaluation.
//!
//! The releaser input at step `t` is `[w_t ‖ u_t]` (plus a one-hot label when
//! `observe_labels` is set), where `u_t ~ U[0,1]^m` is drawn fresh for every
//! minibatch. Its head is linear. Attackers read the standardized release and
//! end in a softmax over the label alphabet.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{balanced_accuracy, format_sig};
use crate::data::{Dataset, LabelKind, Splits};
use crate::engine::{HeadActivation, LayerStack, StackArch};
use crate::error::{Error, Result};
use crate::objectives::{
    argmax_decisions, attacker_xent_grad, ne_p, normalized_distortion_grad,
    predictive_entropy_rate_grad, releaser_loss, EntropyTerm,
};
use crate::optim::{Rmsprop, RmspropConfig};
use crate::rng::{derive_seed, rng_from_seed, stream, RunRng};

/// Hidden layer sizes for the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub releaser: Vec<usize>,
    pub attacker: Vec<usize>,
    pub test_attacker: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(LabelKind::Occupancy)
    }
}

impl ModelConfig {
    /// Full-size architectures per application.
    pub fn preset(kind: LabelKind) -> Self {
        match kind {
            LabelKind::Occupancy => Self {
                releaser: vec![64; 4],
                attacker: vec![32; 2],
                test_attacker: vec![32; 3],
            },
            LabelKind::Identity => Self {
                releaser: vec![128; 6],
                attacker: vec![32; 4],
                test_attacker: vec![32; 4],
            },
            LabelKind::Acorn => Self {
                releaser: vec![100; 5],
                attacker: vec![32; 3],
                test_attacker: vec![32; 4],
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, sizes) in [
            ("releaser", &self.releaser),
            ("attacker", &self.attacker),
            ("test_attacker", &self.test_attacker),
        ] {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(Error::config(format!(
                    "model.{name} needs at least one layer and no zero-sized layer"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Minibatch size `B`.
    pub batch_size: usize,
    /// Attacker steps per outer iteration `k`.
    pub attacker_steps: usize,
    /// Seed-noise dimension `m`.
    pub noise_dim: usize,
    /// Per-component gradient clip `C`, shared by both networks.
    pub clip: f64,
    /// Recurrent ℓ2 weight `β` (releaser only).
    pub recurrent_l2: f64,
    /// Trade-off weight `λ`.
    pub lambda: f64,
    /// Grid used by sweeps; `lambda` is ignored there.
    pub lambda_grid: Vec<f64>,
    /// Distortion order `p`.
    pub order: f64,
    pub iterations: usize,
    pub seed: u64,
    pub optimizer: RmspropConfig,
    pub entropy_term: EntropyTerm,
    /// Feed the one-hot label to the releaser alongside consumption.
    pub observe_labels: bool,
    pub test_attacker_epochs: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self::preset(LabelKind::Occupancy)
    }
}

impl TrainSettings {
    pub fn preset(kind: LabelKind) -> Self {
        let (recurrent_l2, attacker_steps, noise_dim) = match kind {
            LabelKind::Occupancy => (1.5, 4, 8),
            LabelKind::Identity => (2.0, 5, 3),
            LabelKind::Acorn => (0.1, 7, 3),
        };
        Self {
            batch_size: 128,
            attacker_steps,
            noise_dim,
            clip: 1.0,
            recurrent_l2,
            lambda: 0.0,
            lambda_grid: vec![0.0, 0.5, 1.0, 2.0, 4.0, 8.0],
            order: 2.0,
            iterations: 500,
            seed: 7,
            optimizer: RmspropConfig::default(),
            entropy_term: EntropyTerm::Predictive,
            observe_labels: false,
            test_attacker_epochs: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if self.attacker_steps == 0 {
            return Err(Error::config("train.attacker_steps must be at least 1"));
        }
        if self.attacker_steps == 1 {
            log::warn!("train.attacker_steps = 1 gives a weak training attacker; use k > 1");
        }
        if !(self.clip > 0.0) {
            return Err(Error::config("train.clip must be positive"));
        }
        if !(self.recurrent_l2 >= 0.0) {
            return Err(Error::config("train.recurrent_l2 must be non-negative"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("train.lambda must be finite and non-negative"));
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::config("train.lambda_grid entries must be finite and non-negative"));
        }
        if !(self.order >= 2.0) || !self.order.is_finite() {
            return Err(Error::config("train.order must be at least 2"));
        }
        if self.test_attacker_epochs == 0 {
            return Err(Error::config("train.test_attacker_epochs must be at least 1"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
}

impl TrainConfig {
    pub fn preset(kind: LabelKind) -> Self {
        Self {
            model: ModelConfig::preset(kind),
            train: TrainSettings::preset(kind),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// The same configuration at a different trade-off weight.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut cfg = self.clone();
        cfg.train.lambda = lambda;
        cfg
    }

    pub fn releaser_arch(&self, alphabet_size: usize) -> StackArch {
        let labels = if self.train.observe_labels {
            alphabet_size
        } else {
            0
        };
        StackArch {
            input_size: 1 + self.train.noise_dim + labels,
            hidden_sizes: self.model.releaser.clone(),
            output_size: 1,
            head: HeadActivation::Linear,
        }
    }

    pub fn attacker_arch(&self, alphabet_size: usize) -> StackArch {
        classifier_arch(&self.model.attacker, alphabet_size)
    }

    pub fn test_attacker_arch(&self, alphabet_size: usize) -> StackArch {
        classifier_arch(&self.model.test_attacker, alphabet_size)
    }
}

fn classifier_arch(hidden: &[usize], alphabet_size: usize) -> StackArch {
    StackArch {
        input_size: 1,
        hidden_sizes: hidden.to_vec(),
        output_size: alphabet_size,
        head: HeadActivation::Softmax,
    }
}

/// Affine map between kW and standardized units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Pooled mean and standard deviation of every step in `dataset`.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::EmptyDataset("cannot standardize an empty dataset".into()));
        }
        let values = dataset.consumption();
        let mean = values.mean().unwrap_or(0.0);
        let std = values.std(0.0);
        if !(std > 0.0) {
            return Err(Error::Degenerate(
                "training consumption has zero variance".into(),
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, kw: ArrayView2<'_, f64>) -> Array2<f64> {
        kw.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, standardized: ArrayView2<'_, f64>) -> Array2<f64> {
        standardized.mapv(|v| v * self.std + self.mean)
    }
}

/// Aligned minibatch: labels, standardized consumption and seed noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `(B, T)` labels.
    pub x: Array2<usize>,
    /// `(B, T)` standardized consumption, the observed signal and the
    /// distortion target.
    pub w: Array2<f64>,
    /// `(B, T, m)` seed noise in `[0, 1]`.
    pub u: Array3<f64>,
}

impl SequenceBatch {
    /// Draws fresh noise for the given rows.
    pub fn gather<R: Rng + ?Sized>(
        x: &Array2<usize>,
        w: &Array2<f64>,
        rows: &[usize],
        noise_dim: usize,
        rng: &mut R,
    ) -> Self {
        let steps = w.ncols();
        let x = x.select(Axis(0), rows);
        let w = w.select(Axis(0), rows);
        let u = Array3::from_shape_simple_fn((rows.len(), steps, noise_dim), || rng.gen::<f64>());
        Self { x, w, u }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Builds the `(B, T, 1 + m [+ |X|])` releaser input.
fn releaser_input(batch: &SequenceBatch, onehot_size: Option<usize>) -> Result<Array3<f64>> {
    let (b, t) = batch.w.dim();
    let (ub, ut, m) = batch.u.dim();
    if (ub, ut) != (b, t) || batch.x.dim() != (b, t) {
        return Err(Error::usage(format!(
            "batch fields disagree: w {:?}, u {:?}, x {:?}",
            batch.w.dim(),
            batch.u.dim(),
            batch.x.dim()
        )));
    }
    let extra = onehot_size.unwrap_or(0);
    let mut input = Array3::zeros((b, t, 1 + m + extra));
    input.slice_mut(s![.., .., 0]).assign(&batch.w);
    input.slice_mut(s![.., .., 1..1 + m]).assign(&batch.u);
    if let Some(k) = onehot_size {
        for ((i, j), &label) in batch.x.indexed_iter() {
            if label >= k {
                return Err(Error::usage(format!("label {label} outside alphabet of size {k}")));
            }
            input[[i, j, 1 + m + label]] = 1.0;
        }
    }
    Ok(input)
}

/// Standardized release `(B, T)` for observed signal `w` and noise `u`.
pub fn make_release(
    releaser: &LayerStack,
    batch: &SequenceBatch,
    onehot_size: Option<usize>,
) -> Result<Array2<f64>> {
    let input = releaser_input(batch, onehot_size)?;
    if input.dim().2 != releaser.input_size() {
        return Err(Error::config(format!(
            "releaser expects {} input features, batch provides {}",
            releaser.input_size(),
            input.dim().2
        )));
    }
    Ok(releaser.predict(input.view())?.index_axis_move(Axis(2), 0))
}

fn as_attacker_input(z: &Array2<f64>) -> Array3<f64> {
    z.clone().insert_axis(Axis(2))
}

/// Values of the releaser loss and its parts on one minibatch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReleaserEval {
    pub loss: f64,
    pub distortion: f64,
    /// The entropy term `h` (zero when `λ = 0`; the attacker is not run).
    pub entropy_term: f64,
}

/// Releaser loss and its gradient w.r.t. the releaser parameters, with the
/// attacker frozen. Pure: nothing is updated.
pub fn releaser_objective(
    releaser: &LayerStack,
    attacker: &LayerStack,
    batch: &SequenceBatch,
    settings: &TrainSettings,
    onehot_size: Option<usize>,
) -> Result<(ReleaserEval, LayerStack)> {
    let input = releaser_input(batch, onehot_size)?;
    let (outputs, tape) = releaser.forward(input.view())?;
    let z = outputs.index_axis(Axis(2), 0).to_owned();
    let (distortion, mut grad_z) =
        normalized_distortion_grad(z.view(), batch.w.view(), settings.order)?;

    let lambda = settings.lambda;
    let mut entropy_term = 0.0;
    if lambda > 0.0 {
        let (probs, attacker_tape) = attacker.forward(as_attacker_input(&z).view())?;
        let (value, grad_probs) = match settings.entropy_term {
            EntropyTerm::Predictive => predictive_entropy_rate_grad(probs.view())?,
            EntropyTerm::AdversarialXent => attacker_xent_grad(probs.view(), batch.x.view())?,
        };
        entropy_term = value;
        let (_, grad_input) = attacker.backward(&attacker_tape, (&grad_probs * -lambda).view())?;
        grad_z += &grad_input.index_axis(Axis(2), 0);
    }
    let grad_out = grad_z.insert_axis(Axis(2));
    let (grads, _) = releaser.backward(&tape, grad_out.view())?;
    Ok((
        ReleaserEval {
            loss: releaser_loss(distortion, entropy_term, lambda),
            distortion,
            entropy_term,
        },
        grads,
    ))
}

/// Attacker cross-entropy on a release and its gradient w.r.t. the attacker.
pub fn attacker_objective(
    attacker: &LayerStack,
    release: &Array2<f64>,
    labels: &Array2<usize>,
) -> Result<(f64, LayerStack)> {
    let (probs, tape) = attacker.forward(as_attacker_input(release).view())?;
    let (loss, grad_probs) = attacker_xent_grad(probs.view(), labels.view())?;
    let (grads, _) = attacker.backward(&tape, grad_probs.view())?;
    Ok((loss, grads))
}

/// Minibatch indices drawn without replacement, reshuffled every epoch.
/// A trailing partial batch is dropped; with fewer rows than `B` the whole
/// set forms each batch.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: RunRng,
}

impl BatchSampler {
    pub fn new(rows: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if rows == 0 {
            return Err(Error::EmptyDataset("no rows to sample minibatches from".into()));
        }
        let mut sampler = Self {
            order: (0..rows).collect(),
            cursor: 0,
            batch_size: batch_size.min(rows),
            rng: rng_from_seed(seed),
        };
        sampler.order.shuffle(&mut sampler.rng);
        Ok(sampler)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let rows = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        rows
    }
}

/// One outer iteration's record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean attacker cross-entropy over the iteration's `k` steps.
    pub attacker_loss: f64,
    pub releaser_loss: f64,
    pub distortion: f64,
    pub entropy_term: f64,
    /// Cumulative update counts.
    pub attacker_updates: usize,
    pub releaser_updates: usize,
}

/// Training trace. Wall-clock times are kept separately and are not part of
/// equality, so two runs with the same seed compare equal.
#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    pub records: Vec<IterationRecord>,
    pub elapsed_seconds: Vec<f64>,
}

impl PartialEq for RunHistory {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records
    }
}

impl RunHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        wtr.write_record([
            "iteration",
            "attacker_loss",
            "releaser_loss",
            "distortion",
            "entropy_term",
        ])?;
        for r in &self.records {
            wtr.write_record([
                r.iteration.to_string(),
                format_sig(r.attacker_loss),
                format_sig(r.releaser_loss),
                format_sig(r.distortion),
                format_sig(r.entropy_term),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

/// Mutable state of one minimax run.
pub struct Trainer {
    config: TrainConfig,
    onehot: Option<usize>,
    labels: Array2<usize>,
    signal: Array2<f64>,
    pub releaser: LayerStack,
    pub attacker: LayerStack,
    releaser_opt: Rmsprop,
    attacker_opt: Rmsprop,
    sampler: BatchSampler,
    noise_rng: RunRng,
    attacker_updates: usize,
    releaser_updates: usize,
}

impl Trainer {
    /// Fresh networks for `train_split`, which must already be standardized
    /// by `standardizer`'s source statistics.
    pub fn new(config: &TrainConfig, train_split: &Dataset, standardizer: &Standardizer) -> Result<Self> {
        config.validate()?;
        if train_split.is_empty() {
            return Err(Error::EmptyDataset("training split is empty".into()));
        }
        let k = train_split.alphabet_size;
        let seed = config.train.seed;
        let releaser = LayerStack::init(&config.releaser_arch(k), derive_seed(seed, stream::RELEASER_INIT))?;
        let attacker = LayerStack::init(&config.attacker_arch(k), derive_seed(seed, stream::ATTACKER_INIT))?;
        Ok(Self {
            onehot: config.train.observe_labels.then_some(k),
            labels: train_split.labels(),
            signal: standardizer.apply(train_split.consumption().view()),
            releaser_opt: Rmsprop::new(config.train.optimizer, &releaser)?,
            attacker_opt: Rmsprop::new(config.train.optimizer, &attacker)?,
            releaser,
            attacker,
            sampler: BatchSampler::new(
                train_split.len(),
                config.train.batch_size,
                derive_seed(seed, stream::TRAIN_BATCHES),
            )?,
            noise_rng: rng_from_seed(derive_seed(seed, stream::TRAIN_NOISE)),
            config: config.clone(),
            attacker_updates: 0,
            releaser_updates: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn update_counts(&self) -> (usize, usize) {
        (self.attacker_updates, self.releaser_updates)
    }

    fn next_batch(&mut self) -> SequenceBatch {
        let rows = self.sampler.next_batch();
        SequenceBatch::gather(
            &self.labels,
            &self.signal,
            &rows,
            self.config.train.noise_dim,
            &mut self.noise_rng,
        )
    }

    /// `k` attacker steps against the frozen releaser. Returns the losses.
    pub fn attacker_round(&mut self) -> Result<Vec<f64>> {
        let steps = self.config.train.attacker_steps;
        if steps == 0 {
            return Err(Error::config("train.attacker_steps must be at least 1"));
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let batch = self.next_batch();
            let release = make_release(&self.releaser, &batch, self.onehot)?;
            let (loss, grads) = attacker_objective(&self.attacker, &release, &batch.x)?;
            self.attacker_opt
                .update(&mut self.attacker, grads, self.config.train.clip, 0.0)?;
            self.attacker_updates += 1;
            losses.push(loss);
        }
        Ok(losses)
    }

    /// One releaser step against the frozen attacker.
    pub fn releaser_round(&mut self) -> Result<ReleaserEval> {
        let batch = self.next_batch();
        let (eval, grads) = releaser_objective(
            &self.releaser,
            &self.attacker,
            &batch,
            &self.config.train,
            self.onehot,
        )?;
        self.releaser_opt.update(
            &mut self.releaser,
            grads,
            self.config.train.clip,
            self.config.train.recurrent_l2,
        )?;
        self.releaser_updates += 1;
        Ok(eval)
    }

    /// Runs every configured iteration.
    pub fn run(&mut self) -> Result<RunHistory> {
        let start = Instant::now();
        let mut history = RunHistory::default();
        for iteration in 0..self.config.train.iterations {
            let tag = |e: Error| Error::Training {
                iteration,
                message: e.to_string(),
            };
            let losses = self.attacker_round().map_err(tag)?;
            let eval = self.releaser_round().map_err(tag)?;
            let record = IterationRecord {
                iteration,
                attacker_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                releaser_loss: eval.loss,
                distortion: eval.distortion,
                entropy_term: eval.entropy_term,
                attacker_updates: self.attacker_updates,
                releaser_updates: self.releaser_updates,
            };
            if ![record.attacker_loss, record.releaser_loss, record.distortion, record.entropy_term]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(Error::Training {
                    iteration,
                    message: "non-finite loss".into(),
                });
            }
            if iteration % 50 == 0 {
                log::debug!(
                    "iteration {iteration}: attacker {:.4} releaser {:.4} distortion {:.4}",
                    record.attacker_loss,
                    record.releaser_loss,
                    record.distortion
                );
            }
            history.records.push(record);
            history.elapsed_seconds.push(start.elapsed().as_secs_f64());
        }
        Ok(history)
    }
}

/// Algorithm entry point: returns the final releaser, training attacker and
/// history.
pub fn train(
    config: &TrainConfig,
    train_split: &Dataset,
    standardizer: &Standardizer,
) -> Result<(LayerStack, LayerStack, RunHistory)> {
    let mut trainer = Trainer::new(config, train_split, standardizer)?;
    let history = trainer.run()?;
    Ok((trainer.releaser, trainer.attacker, history))
}

/// Standardized release of a whole split with a fixed noise seed.
pub fn release_split(
    releaser: &LayerStack,
    split: &Dataset,
    standardizer: &Standardizer,
    config: &TrainConfig,
    noise_seed: u64,
) -> Result<Array2<f64>> {
    let rows: Vec<usize> = (0..split.len()).collect();
    let batch = SequenceBatch::gather(
        &split.labels(),
        &standardizer.apply(split.consumption().view()),
        &rows,
        config.train.noise_dim,
        &mut rng_from_seed(noise_seed),
    );
    let onehot = config.train.observe_labels.then_some(split.alphabet_size);
    make_release(releaser, &batch, onehot)
}

/// Balanced accuracy of `attacker`'s per-step argmax on a standardized release.
pub fn attacker_accuracy(
    attacker: &LayerStack,
    release: &Array2<f64>,
    labels: &Array2<usize>,
    alphabet_size: usize,
) -> Result<f64> {
    let probs = attacker.predict(as_attacker_input(release).view())?;
    balanced_accuracy(argmax_decisions(probs.view()).view(), labels.view(), alphabet_size)
}

/// A test attacker with the epoch it was taken from.
#[derive(Clone, Debug)]
pub struct TestAttacker {
    pub model: LayerStack,
    pub best_epoch: usize,
    pub validation_accuracy: f64,
    /// Validation balanced accuracy after each epoch.
    pub validation_curve: Vec<f64>,
}

/// Trains a fresh attacker on releases of `attacker_train` by the frozen
/// releaser and keeps the epoch with the best validation balanced accuracy.
pub fn train_test_attacker(
    releaser: &LayerStack,
    attacker_train: &Dataset,
    attacker_validation: &Dataset,
    standardizer: &Standardizer,
    config: &TrainConfig,
) -> Result<TestAttacker> {
    config.validate()?;
    if attacker_train.is_empty() || attacker_validation.is_empty() {
        return Err(Error::EmptyDataset(
            "test attacker needs nonempty training and validation splits".into(),
        ));
    }
    let settings = &config.train;
    let k = attacker_train.alphabet_size;
    let seed = settings.seed;
    let onehot = settings.observe_labels.then_some(k);
    let labels = attacker_train.labels();
    let signal = standardizer.apply(attacker_train.consumption().view());
    let val_release = release_split(
        releaser,
        attacker_validation,
        standardizer,
        config,
        derive_seed(seed, stream::EVAL_NOISE ^ 0x5A),
    )?;
    let val_labels = attacker_validation.labels();

    let mut model = LayerStack::init(
        &config.test_attacker_arch(k),
        derive_seed(seed, stream::TEST_ATTACKER_INIT),
    )?;
    let mut opt = Rmsprop::new(settings.optimizer, &model)?;
    let mut order_rng = rng_from_seed(derive_seed(seed, stream::TEST_ATTACKER_BATCHES));
    let mut noise_rng = rng_from_seed(derive_seed(seed, stream::TEST_ATTACKER_BATCHES ^ 0xA5));
    let n = attacker_train.len();
    let batch_size = settings.batch_size.min(n);

    let mut best: Option<(f64, usize, LayerStack)> = None;
    let mut curve = Vec::with_capacity(settings.test_attacker_epochs);
    for epoch in 0..settings.test_attacker_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        for rows in order.chunks(batch_size) {
            let batch = SequenceBatch::gather(&labels, &signal, rows, settings.noise_dim, &mut noise_rng);
            let release = make_release(releaser, &batch, onehot)?;
            let (_, grads) = attacker_objective(&model, &release, &batch.x).map_err(|e| {
                Error::Training {
                    iteration: epoch,
                    message: format!("test attacker: {e}"),
                }
            })?;
            opt.update(&mut model, grads, settings.clip, 0.0)?;
        }
        let acc = attacker_accuracy(&model, &val_release, &val_labels, k)?;
        curve.push(acc);
        if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
            best = Some((acc, epoch, model.clone()));
        }
    }
    let (validation_accuracy, best_epoch, model) =
        best.expect("at least one epoch is configured");
    Ok(TestAttacker {
        model,
        best_epoch,
        validation_accuracy,
        validation_curve: curve,
    })
}

/// Test-split metrics of a releaser / test-attacker pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub ne2: f64,
    pub ne4: f64,
    pub balanced_accuracy: f64,
    /// Test split consumption, kW, `(days, T)`.
    pub consumption: Array2<f64>,
    /// Release of the test split, kW, `(days, T)`.
    pub release: Array2<f64>,
}

pub fn evaluate(
    releaser: &LayerStack,
    test_attacker: &LayerStack,
    test_split: &Dataset,
    standardizer: &Standardizer,
    config: &TrainConfig,
) -> Result<Evaluation> {
    let z = release_split(
        releaser,
        test_split,
        standardizer,
        config,
        derive_seed(config.train.seed, stream::EVAL_NOISE),
    )?;
    let consumption = test_split.consumption();
    let release = standardizer.invert(z.view());
    Ok(Evaluation {
        ne2: ne_p(release.view(), consumption.view(), 2.0)?,
        ne4: ne_p(release.view(), consumption.view(), 4.0)?,
        balanced_accuracy: attacker_accuracy(
            test_attacker,
            &z,
            &test_split.labels(),
            test_split.alphabet_size,
        )?,
        consumption,
        release,
    })
}

/// Everything produced by one train → test-attacker → evaluate pipeline.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub releaser: LayerStack,
    pub attacker: LayerStack,
    pub test_attacker: TestAttacker,
    pub history: RunHistory,
    pub standardizer: Standardizer,
    pub evaluation: Evaluation,
}

/// Trains on `splits.train`, attacks with a fresh attacker trained on the
/// same split, and evaluates on `splits.test`.
pub fn run_pipeline(config: &TrainConfig, splits: &Splits) -> Result<RunOutcome> {
    let standardizer = Standardizer::fit(&splits.train)?;
    let (releaser, attacker, history) = train(config, &splits.train, &standardizer)?;
    let test_attacker =
        train_test_attacker(&releaser, &splits.train, &splits.validation, &standardizer, config)?;
    let evaluation = evaluate(&releaser, &test_attacker.model, &splits.test, &standardizer, config)?;
    Ok(RunOutcome {
        releaser,
        attacker,
        test_attacker,
        history,
        standardizer,
        evaluation,
    })
}
