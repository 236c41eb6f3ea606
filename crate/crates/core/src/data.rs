//! Daily consumption sequences with per-step private labels.
//!
//! The synthetic generator drives consumption with a two-state occupancy
//! Markov chain (absent → present with probability `a`, present → absent with
//! probability `b`), started from its stationary law so the process is
//! stationary:
//!
//! ```text
//! y_t = max(0, base + x_t·boost + Σ_k A_k·sin(2π·c_k·t/T + φ_k) + N(0, σ²))
//! ```
//!
//! Base, boost and harmonic amplitudes are jittered per house.
//!
//! CSV layout: header `house_id,day_index,step,x,y`, one row per step, `x` an
//! integer label and `y` in kW. A JSON sidecar (`<name>.meta.json`) carries
//! `{"T", "alphabet_size", "houses"}`.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Harmonic {
    pub amplitude: f64,
    pub cycles_per_day: f64,
    pub phase: f64,
}

/// Which private label the generator attaches to each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// Presence (1) or absence (0) of residents.
    #[default]
    Occupancy,
    /// The house index, one class per house.
    Identity,
    /// Base-load tercile of the house (three classes).
    Acorn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub steps_per_day: usize,
    /// P(absent → present).
    pub arrive_prob: f64,
    /// P(present → absent).
    pub leave_prob: f64,
    pub base_load: f64,
    pub occupancy_boost: f64,
    pub harmonics: Vec<Harmonic>,
    pub noise_std: f64,
    pub houses: usize,
    pub days_per_house: usize,
    /// Relative half-width of the per-house multiplicative jitter.
    pub house_jitter: f64,
    pub label: LabelKind,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            steps_per_day: 24,
            arrive_prob: 0.2,
            leave_prob: 0.1,
            base_load: 0.3,
            occupancy_boost: 0.8,
            harmonics: vec![
                Harmonic {
                    amplitude: 0.2,
                    cycles_per_day: 1.0,
                    phase: -3.4,
                },
                Harmonic {
                    amplitude: 0.1,
                    cycles_per_day: 2.0,
                    phase: 0.0,
                },
            ],
            noise_std: 0.1,
            houses: 5,
            days_per_house: 200,
            house_jitter: 0.1,
            label: LabelKind::Occupancy,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("data.{name} must lie in [0, 1], got {v}")))
            }
        };
        prob("arrive_prob", self.arrive_prob)?;
        prob("leave_prob", self.leave_prob)?;
        if self.steps_per_day == 0 {
            return Err(Error::config("data.steps_per_day must be at least 1"));
        }
        if self.houses == 0 || self.days_per_house == 0 {
            return Err(Error::config("data.houses and data.days_per_house must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("data.noise_std must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.house_jitter) {
            return Err(Error::config("data.house_jitter must lie in [0, 1)"));
        }
        if self.harmonics.iter().any(|h| !(h.amplitude >= 0.0)) {
            return Err(Error::config("data.harmonics amplitudes must be non-negative"));
        }
        if !(self.base_load.is_finite() && self.occupancy_boost.is_finite()) {
            return Err(Error::config("data.base_load and data.occupancy_boost must be finite"));
        }
        Ok(())
    }

    /// Long-run fraction of steps with residents present.
    pub fn stationary_presence(&self) -> f64 {
        let total = self.arrive_prob + self.leave_prob;
        if total == 0.0 {
            0.5
        } else {
            self.arrive_prob / total
        }
    }

    pub fn alphabet_size(&self) -> usize {
        match self.label {
            LabelKind::Occupancy => 2,
            LabelKind::Identity => self.houses,
            LabelKind::Acorn => 3,
        }
    }
}

/// One day of one house.
#[derive(Clone, Debug, PartialEq)]
pub struct DayRecord {
    pub house: u32,
    pub day: u32,
    pub x: Vec<usize>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub steps: usize,
    pub alphabet_size: usize,
    pub days: Vec<DayRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    #[serde(rename = "T")]
    pub steps: usize,
    pub alphabet_size: usize,
    pub houses: Vec<u32>,
}

/// Train / validation / test partition at day granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

struct HouseProfile {
    base: f64,
    boost: f64,
    harmonics: Vec<Harmonic>,
}

/// Generates `config.days_per_house` days for each of `config.houses` houses.
pub fn generate(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let steps = config.steps_per_day;
    let mut profile_rng = rng_from_seed(derive_seed(config.seed, 0xDA7A));
    let profiles: Vec<HouseProfile> = (0..config.houses)
        .map(|_| {
            let mut jitter = || 1.0 + config.house_jitter * profile_rng.gen_range(-1.0..=1.0);
            HouseProfile {
                base: config.base_load * jitter(),
                boost: config.occupancy_boost * jitter(),
                harmonics: config
                    .harmonics
                    .iter()
                    .map(|h| Harmonic {
                        amplitude: h.amplitude * jitter(),
                        ..*h
                    })
                    .collect(),
            }
        })
        .collect();
    let acorn = acorn_classes(&profiles);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let presence = config.stationary_presence();

    let mut days = Vec::with_capacity(config.houses * config.days_per_house);
    for (h, profile) in profiles.iter().enumerate() {
        let mut rng = rng_from_seed(derive_seed(config.seed, 0x1000 + h as u64));
        let mut occupied = rng.gen_bool(presence);
        for day in 0..config.days_per_house {
            let mut occupancy = Vec::with_capacity(steps);
            let mut y = Vec::with_capacity(steps);
            for t in 0..steps {
                if t > 0 || day > 0 {
                    let flip = if occupied {
                        config.leave_prob
                    } else {
                        config.arrive_prob
                    };
                    if rng.gen_bool(flip) {
                        occupied = !occupied;
                    }
                }
                let phase = 2.0 * PI * t as f64 / steps as f64;
                let seasonal: f64 = profile
                    .harmonics
                    .iter()
                    .map(|hm| hm.amplitude * (hm.cycles_per_day * phase + hm.phase).sin())
                    .sum();
                let eps = if config.noise_std > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                let boost = if occupied { profile.boost } else { 0.0 };
                y.push((profile.base + boost + seasonal + eps).max(0.0));
                occupancy.push(usize::from(occupied));
            }
            let x = match config.label {
                LabelKind::Occupancy => occupancy,
                LabelKind::Identity => vec![h; steps],
                LabelKind::Acorn => vec![acorn[h]; steps],
            };
            days.push(DayRecord {
                house: h as u32 + 1,
                day: day as u32,
                x,
                y,
            });
        }
    }
    Ok(Dataset {
        steps,
        alphabet_size: config.alphabet_size(),
        days,
    })
}

fn acorn_classes(profiles: &[HouseProfile]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profiles.len()).collect();
    order.sort_by(|&a, &b| profiles[a].base.total_cmp(&profiles[b].base));
    let mut classes = vec![0; profiles.len()];
    for (rank, &h) in order.iter().enumerate() {
        classes[h] = rank * 3 / profiles.len();
    }
    classes
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }

    pub fn houses(&self) -> Vec<u32> {
        self.days
            .iter()
            .map(|d| d.house)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            steps: self.steps,
            alphabet_size: self.alphabet_size,
            houses: self.houses(),
        }
    }

    /// Labels as a `(days, T)` array.
    pub fn labels(&self) -> Array2<usize> {
        Array2::from_shape_fn((self.len(), self.steps), |(i, t)| self.days[i].x[t])
    }

    /// Consumption as a `(days, T)` array.
    pub fn consumption(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), self.steps), |(i, t)| self.days[i].y[t])
    }

    fn with_days(&self, days: Vec<DayRecord>) -> Dataset {
        Dataset {
            steps: self.steps,
            alphabet_size: self.alphabet_size,
            days,
        }
    }

    /// Days belonging to `houses`, in dataset order.
    pub fn restrict_houses(&self, houses: &[u32]) -> Result<Dataset> {
        let known = self.houses();
        if let Some(bad) = houses.iter().find(|h| !known.contains(h)) {
            return Err(Error::usage(format!("unknown house id {bad}")));
        }
        let wanted: BTreeSet<u32> = houses.iter().copied().collect();
        Ok(self.with_days(
            self.days
                .iter()
                .filter(|d| wanted.contains(&d.house))
                .cloned()
                .collect(),
        ))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_io(path, e))?;
        wtr.write_record(["house_id", "day_index", "step", "x", "y"])?;
        for d in &self.days {
            for t in 0..self.steps {
                wtr.write_record([
                    d.house.to_string(),
                    d.day.to_string(),
                    t.to_string(),
                    d.x[t].to_string(),
                    d.y[t].to_string(),
                ])?;
            }
        }
        wtr.flush().map_err(|e| Error::io(path, e))?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        let meta_path = sidecar_path(path);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// `data.csv` → `data.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Loads a dataset in the documented CSV layout. Reads the sidecar when it
/// exists; otherwise infers `T` and the alphabet from the rows.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let meta_path = sidecar_path(path);
    let meta: Option<DatasetMeta> = if meta_path.exists() {
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };

    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| csv_io(path, e))?.clone();
    let expected = ["house_id", "day_index", "step", "x", "y"];
    if headers.iter().ne(expected.iter().copied()) {
        return Err(Error::Parse {
            location: format!("{}:1", path.display()),
            message: format!("expected header {}", expected.join(",")),
        });
    }

    type Key = (u32, u32);
    let mut groups: BTreeMap<Key, BTreeMap<usize, (usize, f64, usize)>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let loc = || format!("{}:{line}", path.display());
        let record = record.map_err(|e| Error::Parse {
            location: loc(),
            message: e.to_string(),
        })?;
        if record.len() != 5 {
            return Err(Error::Parse {
                location: loc(),
                message: format!("expected 5 fields, found {}", record.len()),
            });
        }
        fn field<T: std::str::FromStr>(s: &str, name: &str, loc: &dyn Fn() -> String) -> Result<T> {
            s.trim().parse().map_err(|_| Error::Parse {
                location: loc(),
                message: format!("malformed {name} {s:?}"),
            })
        }
        let house: u32 = field(&record[0], "house_id", &loc)?;
        let day: u32 = field(&record[1], "day_index", &loc)?;
        let step: usize = field(&record[2], "step", &loc)?;
        let x: usize = field(&record[3], "x", &loc)?;
        let y: f64 = field(&record[4], "y", &loc)?;
        if !y.is_finite() || y < 0.0 {
            return Err(Error::Parse {
                location: loc(),
                message: format!("consumption must be finite and non-negative, got {y}"),
            });
        }
        if groups
            .entry((house, day))
            .or_default()
            .insert(step, (x, y, line))
            .is_some()
        {
            return Err(Error::Parse {
                location: loc(),
                message: format!("duplicate step {step} for house {house}, day {day}"),
            });
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset(path.display().to_string()));
    }

    let steps = match &meta {
        Some(m) => m.steps,
        None => {
            groups
                .values()
                .flat_map(|g| g.keys())
                .max()
                .copied()
                .unwrap_or(0)
                + 1
        }
    };
    let max_label = groups
        .values()
        .flat_map(|g| g.values().map(|v| v.0))
        .max()
        .unwrap_or(0);
    let alphabet_size = meta.as_ref().map_or(max_label + 1, |m| m.alphabet_size);

    let mut days = Vec::with_capacity(groups.len());
    for ((house, day), rows) in groups {
        if rows.len() != steps || rows.keys().next_back() != Some(&(steps - 1)) {
            return Err(Error::Parse {
                location: format!("{} (house {house}, day {day})", path.display()),
                message: format!("incomplete day: {} of {steps} steps present", rows.len()),
            });
        }
        let mut x = Vec::with_capacity(steps);
        let mut y = Vec::with_capacity(steps);
        for (label, value, line) in rows.into_values() {
            if label >= alphabet_size {
                return Err(Error::Parse {
                    location: format!("{}:{line}", path.display()),
                    message: format!("unknown label {label} (alphabet size {alphabet_size})"),
                });
            }
            x.push(label);
            y.push(value);
        }
        days.push(DayRecord { house, day, x, y });
    }
    Ok(Dataset {
        steps,
        alphabet_size,
        days,
    })
}

/// 85:15 split of whole days into a training pool and a test set, then 10% of
/// the pool held out for validation. Each part keeps dataset order.
pub fn split(dataset: &Dataset, seed: u64) -> Result<Splits> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot split an empty dataset".into()));
    }
    let n = dataset.len();
    let pool = ((n as f64) * 0.85).round() as usize;
    let val = ((pool as f64) * 0.10).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, stream::SPLIT)));

    let take = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        dataset.with_days(idx.into_iter().map(|i| dataset.days[i].clone()).collect())
    };
    Ok(Splits {
        validation: take(0..val),
        train: take(val..pool),
        test: take(pool..n),
    })
}

/// One sub-dataset per requested house set.
pub fn partition_by_house(dataset: &Dataset, house_sets: &[Vec<u32>]) -> Result<Vec<Dataset>> {
    house_sets
        .iter()
        .map(|set| dataset.restrict_houses(set))
        .collect()
}

impl Splits {
    pub fn restrict_houses(&self, houses: &[u32]) -> Result<Splits> {
        let restrict = |d: &Dataset| -> Result<Dataset> {
            let present: Vec<u32> = d
                .houses()
                .into_iter()
                .filter(|h| houses.contains(h))
                .collect();
            d.restrict_houses(&present)
        };
        let all: BTreeSet<u32> = self
            .train
            .houses()
            .into_iter()
            .chain(self.validation.houses())
            .chain(self.test.houses())
            .collect();
        if let Some(bad) = houses.iter().find(|h| !all.contains(h)) {
            return Err(Error::usage(format!("unknown house id {bad}")));
        }
        Ok(Splits {
            train: restrict(&self.train)?,
            validation: restrict(&self.validation)?,
            test: restrict(&self.test)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            days_per_house: 20,
            seed,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn absorbing_chain_gives_constant_days() {
        let cfg = SyntheticConfig {
            arrive_prob: 0.0,
            leave_prob: 0.0,
            ..small(3)
        };
        let ds = generate(&cfg).unwrap();
        for d in &ds.days {
            assert!(d.x.iter().all(|&v| v == d.x[0]));
        }
    }

    #[test]
    fn noiseless_consumption_takes_two_values() {
        let cfg = SyntheticConfig {
            noise_std: 0.0,
            harmonics: vec![],
            house_jitter: 0.0,
            ..small(4)
        };
        let ds = generate(&cfg).unwrap();
        for d in &ds.days {
            for (&x, &y) in d.x.iter().zip(&d.y) {
                let expect = if x == 1 { 0.3 + 0.8 } else { 0.3 };
                assert_eq!(y, expect);
            }
        }
    }

    #[test]
    fn stationary_presence_fraction() {
        let cfg = SyntheticConfig {
            houses: 1,
            days_per_house: 5000,
            ..SyntheticConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let labels: Vec<usize> = ds.days.iter().flat_map(|d| d.x.clone()).collect();
        assert!(labels.len() >= 100_000);
        let frac = labels.iter().sum::<usize>() as f64 / labels.len() as f64;
        assert!((frac - 2.0 / 3.0).abs() < 0.02, "presence fraction {frac}");

        let (mut to_present, mut absent, mut to_absent, mut present) = (0, 0, 0, 0);
        for w in labels.windows(2) {
            match (w[0], w[1]) {
                (0, n) => {
                    absent += 1;
                    to_present += n;
                }
                (_, n) => {
                    present += 1;
                    to_absent += 1 - n;
                }
            }
        }
        let a = to_present as f64 / absent as f64;
        let b = to_absent as f64 / present as f64;
        assert!((a - 0.2).abs() < 0.02 && (b - 0.1).abs() < 0.02, "a={a} b={b}");
    }

    #[test]
    fn consumption_is_non_negative() {
        let cfg = SyntheticConfig {
            noise_std: 0.6,
            ..small(5)
        };
        let ds = generate(&cfg).unwrap();
        assert!(ds.days.iter().all(|d| d.y.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn invalid_probability_names_the_field() {
        let cfg = SyntheticConfig {
            arrive_prob: 1.5,
            ..small(1)
        };
        match generate(&cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("arrive_prob")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(ds.len(), 1000);
        let s = split(&ds, 11).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (765, 85, 150));
        assert_eq!(s, split(&ds, 11).unwrap());
        assert_ne!(s, split(&ds, 12).unwrap());

        let key = |d: &DayRecord| (d.house, d.day);
        let mut all: Vec<_> = s
            .train
            .days
            .iter()
            .chain(&s.validation.days)
            .chain(&s.test.days)
            .map(key)
            .collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        assert_eq!(before, all.len(), "splits overlap");
        let mut orig: Vec<_> = ds.days.iter().map(key).collect();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn house_partitions() {
        let ds = generate(&small(2)).unwrap();
        let parts = partition_by_house(&ds, &[vec![1, 2, 4, 5], vec![3]]).unwrap();
        assert_eq!(parts[0].houses(), vec![1, 2, 4, 5]);
        assert_eq!(parts[1].houses(), vec![3]);
        assert_eq!(parts[0].len() + parts[1].len(), ds.len());
        assert_eq!(ds.restrict_houses(&[1, 2, 3, 4, 5]).unwrap(), ds);
        assert!(ds.restrict_houses(&[]).unwrap().is_empty());
        assert!(matches!(ds.restrict_houses(&[9]), Err(Error::Usage(_))));
    }

    #[test]
    fn label_kinds() {
        let id = generate(&SyntheticConfig {
            label: LabelKind::Identity,
            ..small(1)
        })
        .unwrap();
        assert_eq!(id.alphabet_size, 5);
        assert!(id.days.iter().all(|d| d.x.iter().all(|&x| x == d.house as usize - 1)));

        let acorn = generate(&SyntheticConfig {
            label: LabelKind::Acorn,
            ..small(1)
        })
        .unwrap();
        assert_eq!(acorn.alphabet_size, 3);
        let classes: BTreeSet<usize> = acorn.days.iter().map(|d| d.x[0]).collect();
        assert_eq!(classes.len(), 3);
    }
}
