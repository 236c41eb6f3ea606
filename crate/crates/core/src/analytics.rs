//! Post-training assessment: balanced accuracy, trade-off sweeps, Welch PSD of
//! the release error, power-quality indicators, peak preservation and the
//! data-mismatch experiment.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::ArrayView2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::engine::LayerStack;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::trainer::{
    evaluate, train, train_test_attacker, Evaluation, RunHistory, Standardizer, TestAttacker,
    TrainConfig,
};

/// Formats with 9 significant digits, fixed notation for moderate magnitudes.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if (-5..9).contains(&magnitude) {
        let decimals = (8 - magnitude).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{x:.8e}")
    }
}

/// Mean per-class recall over the classes present in `labels`. Classes in
/// `0..alphabet_size` with no instance are skipped with a warning.
pub fn balanced_accuracy(
    predictions: ArrayView2<'_, usize>,
    labels: ArrayView2<'_, usize>,
    alphabet_size: usize,
) -> Result<f64> {
    if predictions.dim() != labels.dim() {
        return Err(Error::usage(format!(
            "predictions {:?} and labels {:?} differ in shape",
            predictions.dim(),
            labels.dim()
        )));
    }
    let mut hits = vec![0usize; alphabet_size];
    let mut counts = vec![0usize; alphabet_size];
    for (&p, &l) in predictions.iter().zip(labels.iter()) {
        if l >= alphabet_size {
            return Err(Error::usage(format!(
                "label {l} outside alphabet of size {alphabet_size}"
            )));
        }
        counts[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let present: Vec<usize> = (0..alphabet_size).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Err(Error::EmptyDataset("no labels to score".into()));
    }
    if present.len() < alphabet_size {
        log::warn!(
            "balanced accuracy: {} of {alphabet_size} classes absent from labels, excluded",
            alphabet_size - present.len()
        );
    }
    let total: f64 = present
        .iter()
        .map(|&c| hits[c] as f64 / counts[c] as f64)
        .sum();
    Ok(total / present.len() as f64)
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::usage("spearman needs two equal-length series of at least 2"));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Degenerate("spearman of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; len],
            // Periodic Hann, the usual choice for spectral estimation.
            Window::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WelchOptions {
    pub segment_len: usize,
    /// Fraction of a segment shared with the next one, in `[0, 1)`.
    pub overlap: f64,
    pub window: Window,
    /// Subtract each segment's mean before windowing.
    pub remove_mean: bool,
    /// Samples per day; frequencies are reported in cycles/day.
    pub samples_per_day: usize,
    /// Number of error signals averaged.
    pub signals: usize,
}

impl Default for WelchOptions {
    fn default() -> Self {
        Self {
            segment_len: 24,
            overlap: 0.5,
            window: Window::Hann,
            remove_mean: false,
            samples_per_day: 24,
            signals: 10,
        }
    }
}

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdEstimate {
    /// Bin frequencies in cycles/day, ascending.
    pub frequencies: Vec<f64>,
    /// Density per bin (power per cycle/day).
    pub density: Vec<f64>,
    pub segment_len: usize,
    pub overlap: f64,
    pub window: Window,
}

impl PsdEstimate {
    /// `Σ density · Δf`, the mean-square power the estimate accounts for.
    pub fn total_power(&self) -> f64 {
        let df = if self.frequencies.len() > 1 {
            self.frequencies[1] - self.frequencies[0]
        } else {
            0.0
        };
        self.density.iter().sum::<f64>() * df
    }

    pub fn peak_bin(&self) -> usize {
        let mut best = 0;
        for (i, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = i;
            }
        }
        best
    }
}

/// Welch estimate of each row of `signals`, averaged across rows.
pub fn welch_psd(signals: ArrayView2<'_, f64>, options: &WelchOptions) -> Result<PsdEstimate> {
    let (n, len) = signals.dim();
    let seg = options.segment_len;
    if n == 0 || len == 0 {
        return Err(Error::usage("welch_psd needs at least one nonempty signal"));
    }
    if seg == 0 || seg > len {
        return Err(Error::usage(format!(
            "segment length {seg} must lie in 1..={len}"
        )));
    }
    if !(0.0..1.0).contains(&options.overlap) {
        return Err(Error::usage("overlap must lie in [0, 1)"));
    }
    if options.samples_per_day == 0 {
        return Err(Error::usage("samples_per_day must be positive"));
    }
    let fs = options.samples_per_day as f64;
    let hop = (seg - (options.overlap * seg as f64).round() as usize).max(1);
    let window = options.window.coefficients(seg);
    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(seg);
    let bins = seg / 2 + 1;

    let mut total = vec![0.0; bins];
    let mut buffer = vec![Complex::new(0.0, 0.0); seg];
    for row in signals.rows() {
        let row = row.to_vec();
        let mut acc = vec![0.0; bins];
        let mut segments = 0;
        let mut start = 0;
        while start + seg <= len {
            let chunk = &row[start..start + seg];
            let mean = if options.remove_mean {
                chunk.iter().sum::<f64>() / seg as f64
            } else {
                0.0
            };
            for ((b, &v), &w) in buffer.iter_mut().zip(chunk).zip(&window) {
                *b = Complex::new((v - mean) * w, 0.0);
            }
            fft.process(&mut buffer);
            for (k, a) in acc.iter_mut().enumerate() {
                let mut p = buffer[k].norm_sqr() / (fs * window_power);
                if k != 0 && !(seg.is_multiple_of(2) && k == seg / 2) {
                    p *= 2.0;
                }
                *a += p;
            }
            segments += 1;
            start += hop;
        }
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a / segments as f64;
        }
    }
    Ok(PsdEstimate {
        frequencies: (0..bins).map(|k| k as f64 * fs / seg as f64).collect(),
        density: total.into_iter().map(|v| v / n as f64).collect(),
        segment_len: seg,
        overlap: options.overlap,
        window: options.window,
    })
}

/// Mean, skewness, kurtosis, std/mean and max/mean of pooled values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QualityIndicators {
    pub mean: f64,
    pub skewness: f64,
    /// Pearson (non-excess) kurtosis.
    pub kurtosis: f64,
    pub std_over_mean: f64,
    pub max_over_mean: f64,
}

pub const INDICATOR_NAMES: [&str; 5] = ["mean", "skewness", "kurtosis", "std_over_mean", "max_over_mean"];

impl QualityIndicators {
    pub fn of(values: ArrayView2<'_, f64>) -> Result<Self> {
        let n = values.len();
        if n == 0 {
            return Err(Error::Degenerate("no values to summarize".into()));
        }
        let mean = values.sum() / n as f64;
        let central = |k: i32| values.iter().map(|v| (v - mean).powi(k)).sum::<f64>() / n as f64;
        let var = central(2);
        if mean == 0.0 || var == 0.0 {
            return Err(Error::Degenerate(
                "indicators need nonzero mean and variance".into(),
            ));
        }
        let std = var.sqrt();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            mean,
            skewness: central(3) / std.powi(3),
            kurtosis: central(4) / (var * var),
            std_over_mean: std / mean,
            max_over_mean: max / mean,
        })
    }

    pub fn as_array(&self) -> [f64; 5] {
        [
            self.mean,
            self.skewness,
            self.kurtosis,
            self.std_over_mean,
            self.max_over_mean,
        ]
    }
}

/// `|ind(z) − ind(y)| / |ind(y)|` in percent, for each indicator.
pub fn quality_indicators(y: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Result<[f64; 5]> {
    if y.dim() != z.dim() {
        return Err(Error::usage("consumption and release differ in shape"));
    }
    let reference = QualityIndicators::of(y)?.as_array();
    let release = QualityIndicators::of(z)?.as_array();
    let mut out = [0.0; 5];
    for (i, (r, z)) in reference.iter().zip(release).enumerate() {
        if *r == 0.0 {
            return Err(Error::Degenerate(format!(
                "reference {} is zero, relative error undefined",
                INDICATOR_NAMES[i]
            )));
        }
        out[i] = 100.0 * (z - r).abs() / r.abs();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakTolerance {
    /// Allowed distance in steps between the two argmaxes.
    pub location: usize,
    /// Allowed relative magnitude error of the release maximum.
    pub magnitude: f64,
}

impl Default for PeakTolerance {
    fn default() -> Self {
        Self {
            location: 1,
            magnitude: 0.2,
        }
    }
}

fn argmax(row: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

/// Fraction of days whose release maximum sits within `location` steps of the
/// true peak and within `magnitude` (relative) of its height.
pub fn peak_preservation(
    y: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    tolerance: &PeakTolerance,
) -> Result<f64> {
    if y.dim() != z.dim() {
        return Err(Error::usage("consumption and release differ in shape"));
    }
    if !(tolerance.magnitude > 0.0) {
        return Err(Error::config("peak magnitude tolerance must be positive"));
    }
    if y.nrows() == 0 {
        return Err(Error::EmptyDataset("no days to check for peaks".into()));
    }
    let preserved = y
        .rows()
        .into_iter()
        .zip(z.rows())
        .filter(|(yr, zr)| {
            let (iy, my) = argmax(yr.iter().copied());
            let (iz, mz) = argmax(zr.iter().copied());
            iy.abs_diff(iz) <= tolerance.location && (mz - my).abs() <= tolerance.magnitude * my.abs()
        })
        .count();
    Ok(preserved as f64 / y.nrows() as f64)
}

/// One point of a privacy-utility curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub ne2: f64,
    pub ne4: f64,
    pub accuracy: f64,
    pub indicator_errors: [f64; 5],
    pub peak_preservation: f64,
    pub checkpoint: Option<String>,
}

/// Seed of the run at `lambda`, derived from the master seed.
pub fn lambda_seed(master: u64, lambda: f64) -> u64 {
    derive_seed(master, lambda.to_bits())
}

/// A trained releaser and what produced it.
#[derive(Clone, Debug)]
pub struct ReleaserRun {
    pub lambda: f64,
    pub config: TrainConfig,
    pub releaser: LayerStack,
    pub attacker: LayerStack,
    pub history: RunHistory,
    pub standardizer: Standardizer,
}

/// Trains one releaser per grid value, ascending in λ, each with its own
/// derived seed and freshly initialized networks.
pub fn train_releasers(grid: &[f64], base: &TrainConfig, splits: &Splits) -> Result<Vec<ReleaserRun>> {
    let grid = sorted_grid(grid)?;
    let standardizer = Standardizer::fit(&splits.train)?;
    grid.into_iter()
        .map(|lambda| {
            let mut config = base.with_lambda(lambda);
            config.train.seed = lambda_seed(base.train.seed, lambda);
            log::info!("training releaser at lambda = {lambda}");
            let (releaser, attacker, history) = train(&config, &splits.train, &standardizer)
                .map_err(|e| Error::Training {
                    iteration: usize::MAX,
                    message: format!("lambda {lambda}: {e}"),
                })?;
            Ok(ReleaserRun {
                lambda,
                config,
                releaser,
                attacker,
                history,
                standardizer,
            })
        })
        .collect()
}

fn sorted_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::usage("lambda grid is empty"));
    }
    if grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(Error::usage("lambda grid entries must be finite and non-negative"));
    }
    if !grid.contains(&0.0) {
        return Err(Error::usage("lambda grid must include 0"));
    }
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    g.dedup();
    Ok(g)
}

/// A releaser assessed by a fresh test attacker on an attacker's splits.
#[derive(Clone, Debug)]
pub struct Assessment {
    pub point: TradeoffPoint,
    pub test_attacker: TestAttacker,
    pub evaluation: Evaluation,
}

/// Trains a test attacker on `attacker_splits.train` releases and evaluates on
/// `attacker_splits.test`.
pub fn assess(run: &ReleaserRun, attacker_splits: &Splits, peaks: &PeakTolerance) -> Result<Assessment> {
    let test_attacker = train_test_attacker(
        &run.releaser,
        &attacker_splits.train,
        &attacker_splits.validation,
        &run.standardizer,
        &run.config,
    )?;
    let evaluation = evaluate(
        &run.releaser,
        &test_attacker.model,
        &attacker_splits.test,
        &run.standardizer,
        &run.config,
    )?;
    let y = evaluation.consumption.view();
    let z = evaluation.release.view();
    let point = TradeoffPoint {
        lambda: run.lambda,
        ne2: evaluation.ne2,
        ne4: evaluation.ne4,
        accuracy: evaluation.balanced_accuracy,
        indicator_errors: quality_indicators(y, z)?,
        peak_preservation: peak_preservation(y, z, peaks)?,
        checkpoint: None,
    };
    Ok(Assessment {
        point,
        test_attacker,
        evaluation,
    })
}

/// Per λ: train a releaser, train a fresh test attacker on its releases of
/// the training split, evaluate on the test split.
pub fn tradeoff_sweep(
    grid: &[f64],
    base: &TrainConfig,
    splits: &Splits,
    peaks: &PeakTolerance,
) -> Result<(Vec<ReleaserRun>, Vec<Assessment>)> {
    let runs = train_releasers(grid, base, splits)?;
    let assessed = runs
        .iter()
        .map(|run| assess(run, splits, peaks))
        .collect::<Result<Vec<_>>>()?;
    Ok((runs, assessed))
}

pub fn write_tradeoff_csv(points: &[TradeoffPoint], path: &Path) -> Result<()> {
    let mut wtr = csv_writer(path)?;
    let mut header = vec!["lambda", "ne2", "ne4", "accuracy"];
    let errors: Vec<String> = INDICATOR_NAMES.iter().map(|n| format!("{n}_error_pct")).collect();
    header.extend(errors.iter().map(String::as_str));
    header.push("peak_preservation");
    wtr.write_record(&header)?;
    let mut sorted: Vec<&TradeoffPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    for p in sorted {
        let mut row = vec![
            format_sig(p.lambda),
            format_sig(p.ne2),
            format_sig(p.ne4),
            format_sig(p.accuracy),
        ];
        row.extend(p.indicator_errors.iter().map(|&v| format_sig(v)));
        row.push(format_sig(p.peak_preservation));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// PSD columns side by side: `frequency_cpd` then one column per label.
pub fn write_psd_csv(estimates: &[(String, PsdEstimate)], path: &Path) -> Result<()> {
    let Some((_, first)) = estimates.first() else {
        return Err(Error::usage("no PSD estimates to write"));
    };
    if estimates.iter().any(|(_, e)| e.frequencies != first.frequencies) {
        return Err(Error::usage("PSD estimates use different frequency bins"));
    }
    let mut wtr = csv_writer(path)?;
    let mut header = vec!["frequency_cpd".to_string()];
    header.extend(estimates.iter().map(|(label, _)| label.clone()));
    wtr.write_record(&header)?;
    for (k, f) in first.frequencies.iter().enumerate() {
        let mut row = vec![format_sig(*f)];
        row.extend(estimates.iter().map(|(_, e)| format_sig(e.density[k])));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

/// Which houses train the releaser and which the attacker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchScenario {
    pub name: String,
    pub releaser_houses: Vec<u32>,
    pub attacker_houses: Vec<u32>,
}

impl MismatchScenario {
    /// Full overlap, partial overlap and disjoint house sets.
    pub fn standard(houses: &[u32]) -> Vec<Self> {
        vec![
            Self {
                name: "full".into(),
                releaser_houses: houses.to_vec(),
                attacker_houses: houses.to_vec(),
            },
            Self {
                name: "partial".into(),
                releaser_houses: houses.to_vec(),
                attacker_houses: vec![1, 3],
            },
            Self {
                name: "disjoint".into(),
                releaser_houses: vec![1, 2, 4, 5],
                attacker_houses: vec![3],
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MismatchRow {
    pub scenario: String,
    pub point: TradeoffPoint,
}

/// For each scenario and λ: train the releaser on the releaser houses' training
/// days, train a test attacker on releases of the attacker houses' training
/// days, and evaluate on the attacker houses' test days. Releasers trained on
/// every house can be passed in through `all_house_runs` to avoid retraining.
pub fn mismatch_experiment(
    grid: &[f64],
    base: &TrainConfig,
    splits: &Splits,
    scenarios: &[MismatchScenario],
    all_house_runs: Option<&[ReleaserRun]>,
    peaks: &PeakTolerance,
) -> Result<Vec<MismatchRow>> {
    let grid = sorted_grid(grid)?;
    let all_houses = {
        let mut h = splits.train.houses();
        h.extend(splits.validation.houses());
        h.extend(splits.test.houses());
        h.sort_unstable();
        h.dedup();
        h
    };
    let mut cached: Option<Vec<ReleaserRun>> = all_house_runs.map(|r| r.to_vec());
    if let Some(runs) = &cached {
        let lambdas: Vec<f64> = runs.iter().map(|r| r.lambda).collect();
        if lambdas != grid {
            return Err(Error::usage("cached releasers were trained on a different lambda grid"));
        }
    }
    let mut rows = Vec::new();
    for scenario in scenarios {
        let mut releaser_houses = scenario.releaser_houses.clone();
        releaser_houses.sort_unstable();
        let uses_all = releaser_houses == all_houses;
        let runs = if uses_all {
            if cached.is_none() {
                cached = Some(train_releasers(&grid, base, splits)?);
            }
            cached.clone().expect("populated above")
        } else {
            train_releasers(&grid, base, &splits.restrict_houses(&releaser_houses)?)?
        };
        let attacker_splits = splits.restrict_houses(&scenario.attacker_houses)?;
        for run in &runs {
            log::info!("mismatch scenario {} at lambda = {}", scenario.name, run.lambda);
            rows.push(MismatchRow {
                scenario: scenario.name.clone(),
                point: assess(run, &attacker_splits, peaks)?.point,
            });
        }
    }
    Ok(rows)
}

pub fn write_mismatch_csv(rows: &[MismatchRow], order: f64, path: &Path) -> Result<()> {
    let mut wtr = csv_writer(path)?;
    wtr.write_record(["scenario", "lambda", "ne_p", "accuracy"])?;
    for r in rows {
        let ne = if order == 4.0 { r.point.ne4 } else { r.point.ne2 };
        wtr.write_record([
            r.scenario.clone(),
            format_sig(r.point.lambda),
            format_sig(ne),
            format_sig(r.point.accuracy),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// Error signals `z − y` for the first `count` days.
pub fn error_signals(y: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, count: usize) -> ndarray::Array2<f64> {
    let n = count.min(y.nrows());
    &z.slice(ndarray::s![..n, ..]) - &y.slice(ndarray::s![..n, ..])
}
