//! Command-line pipeline around `privrel-core`.
//!
//! Every command reads one JSON run configuration, applies command-line
//! overrides, writes the fully resolved configuration next to its outputs and
//! then produces its artifacts. Rerunning a command with `--config
//! <out>/resolved_config.json` reproduces its outputs bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use privrel_core::analytics::{
    self, error_signals, mismatch_experiment, quality_indicators, tradeoff_sweep, welch_psd,
    write_mismatch_csv, write_psd_csv, write_tradeoff_csv, MismatchScenario, PeakTolerance,
    QualityIndicators, WelchOptions, INDICATOR_NAMES,
};
use privrel_core::data::{generate, load_csv, split, Dataset, Splits, SyntheticConfig};
use privrel_core::engine::LayerStack;
use privrel_core::oracle::{verify_bound_chain, verify_xent_bound, JointProcessSpec};
use privrel_core::rng::{derive_seed, rng_from_seed};
use privrel_core::trainer::{
    evaluate, train, train_test_attacker, ModelConfig, Standardizer, TrainConfig, TrainSettings,
};
use privrel_core::Error;

pub type Result<T> = privrel_core::Result<T>;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Generator settings, used when `csv` is absent.
    pub synthetic: SyntheticConfig,
    /// Load this dataset instead of generating one.
    pub csv: Option<PathBuf>,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synthetic: SyntheticConfig::default(),
            csv: None,
            split_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub welch: WelchOptions,
    pub peaks: PeakTolerance,
    pub indicators: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MismatchSection {
    pub scenarios: Vec<MismatchScenario>,
}

impl Default for MismatchSection {
    fn default() -> Self {
        Self {
            scenarios: MismatchScenario::standard(&[1, 2, 3, 4, 5]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub specs: usize,
    pub seed: u64,
    pub steps: usize,
    pub alphabet_size: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            specs: 1000,
            seed: 3,
            steps: 3,
            alphabet_size: 2,
        }
    }
}

/// The whole run configuration file. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalSection,
    pub mismatch: MismatchSection,
    pub oracle: OracleSection,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.csv.is_none() {
            self.data.synthetic.validate()?;
        }
        self.train_config().validate()
    }
}

/// Command-line overrides shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda_grid: Option<Vec<f64>>,
    pub specs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Attack,
    Eval,
    Sweep,
    Psd,
    Indicators,
    Mismatch,
    OracleVerify,
}

impl Overrides {
    /// Applies the overrides; `--seed` targets the generator for `gen-data`,
    /// the oracle for `oracle-verify` and training everywhere else.
    pub fn apply(&self, mut config: RunConfigFile, command: Command) -> RunConfigFile {
        if let Some(seed) = self.seed {
            match command {
                Command::GenData => config.data.synthetic.seed = seed,
                Command::OracleVerify => config.oracle.seed = seed,
                _ => config.train.seed = seed,
            }
        }
        if let Some(grid) = &self.lambda_grid {
            config.train.lambda_grid = grid.clone();
        }
        if let Some(specs) = self.specs {
            config.oracle.specs = specs;
        }
        config
    }
}

/// Process exit code for each error category.
pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        "usage" => 2,
        "config" => 3,
        "schema" => 4,
        "parse" => 5,
        "io" => 6,
        "numeric" => 7,
        "degenerate" => 8,
        _ => 1,
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn prepare_out(out: &Path, config: &RunConfigFile) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let path = out.join(RESOLVED_CONFIG);
    let text = serde_json::to_string_pretty(config)?;
    fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn dataset(config: &RunConfigFile) -> Result<Dataset> {
    match &config.data.csv {
        Some(path) => load_csv(path),
        None => generate(&config.data.synthetic),
    }
}

fn splits(config: &RunConfigFile) -> Result<Splits> {
    split(&dataset(config)?, config.data.split_seed)
}

fn require_checkpoint(checkpoint: Option<&Path>) -> Result<&Path> {
    checkpoint.ok_or_else(|| Error::Usage("this command needs --checkpoint <releaser.json>".into()))
}

/// Everything a command needs besides the configuration.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config: RunConfigFile,
    pub out: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub attacker: Option<PathBuf>,
}

pub fn run(inv: &Invocation) -> Result<()> {
    inv.config.validate()?;
    prepare_out(&inv.out, &inv.config)?;
    let first = inv.checkpoints.first().map(PathBuf::as_path);
    match inv.command {
        Command::GenData => cmd_gen_data(&inv.config, &inv.out),
        Command::Train => cmd_train(&inv.config, &inv.out),
        Command::Attack => cmd_attack(&inv.config, &inv.out, require_checkpoint(first)?),
        Command::Eval => cmd_eval(
            &inv.config,
            &inv.out,
            require_checkpoint(first)?,
            inv.attacker.as_deref(),
        ),
        Command::Sweep => cmd_sweep(&inv.config, &inv.out),
        Command::Psd => cmd_psd(&inv.config, &inv.out, &inv.checkpoints),
        Command::Indicators => cmd_indicators(&inv.config, &inv.out, require_checkpoint(first)?),
        Command::Mismatch => cmd_mismatch(&inv.config, &inv.out),
        Command::OracleVerify => cmd_oracle_verify(&inv.config, &inv.out),
    }
}

pub fn cmd_gen_data(config: &RunConfigFile, out: &Path) -> Result<()> {
    let data = generate(&config.data.synthetic)?;
    data.write_csv(&out.join("data.csv"))?;
    log::info!("wrote {} days to {}", data.len(), out.join("data.csv").display());
    Ok(())
}

pub fn cmd_train(config: &RunConfigFile, out: &Path) -> Result<()> {
    let splits = splits(config)?;
    let standardizer = Standardizer::fit(&splits.train)?;
    let (releaser, attacker, history) = train(&config.train_config(), &splits.train, &standardizer)?;
    releaser.save(&out.join("releaser.json"))?;
    attacker.save(&out.join("attacker.json"))?;
    history.write_csv(&out.join("history.csv"))?;
    Ok(())
}

fn load_releaser(path: &Path, config: &TrainConfig, alphabet_size: usize) -> Result<LayerStack> {
    let releaser = LayerStack::load(path)?;
    if releaser.arch() != config.releaser_arch(alphabet_size) {
        return Err(Error::Config(format!(
            "checkpoint {} does not match the configured releaser architecture",
            path.display()
        )));
    }
    Ok(releaser)
}

#[derive(Serialize)]
struct AttackSummary {
    best_epoch: usize,
    validation_accuracy: f64,
    validation_curve: Vec<f64>,
}

pub fn cmd_attack(config: &RunConfigFile, out: &Path, checkpoint: &Path) -> Result<()> {
    let splits = splits(config)?;
    let cfg = config.train_config();
    let releaser = load_releaser(checkpoint, &cfg, splits.train.alphabet_size)?;
    let standardizer = Standardizer::fit(&splits.train)?;
    let attacker = train_test_attacker(&releaser, &splits.train, &splits.validation, &standardizer, &cfg)?;
    attacker.model.save(&out.join("test_attacker.json"))?;
    write_json(
        &out.join("attack.json"),
        &AttackSummary {
            best_epoch: attacker.best_epoch,
            validation_accuracy: attacker.validation_accuracy,
            validation_curve: attacker.validation_curve,
        },
    )
}

#[derive(Serialize)]
struct EvalSummary {
    ne2: f64,
    ne4: f64,
    balanced_accuracy: f64,
    indicator_errors_pct: Option<Vec<(String, f64)>>,
    peak_preservation: f64,
}

pub fn cmd_eval(
    config: &RunConfigFile,
    out: &Path,
    checkpoint: &Path,
    attacker: Option<&Path>,
) -> Result<()> {
    let splits = splits(config)?;
    let cfg = config.train_config();
    let k = splits.train.alphabet_size;
    let releaser = load_releaser(checkpoint, &cfg, k)?;
    let standardizer = Standardizer::fit(&splits.train)?;
    let attacker = match attacker {
        Some(path) => {
            let model = LayerStack::load(path)?;
            if model.arch() != cfg.test_attacker_arch(k) {
                return Err(Error::Config(format!(
                    "attacker checkpoint {} does not match the configured test attacker",
                    path.display()
                )));
            }
            model
        }
        None => {
            train_test_attacker(&releaser, &splits.train, &splits.validation, &standardizer, &cfg)?
                .model
        }
    };
    let ev = evaluate(&releaser, &attacker, &splits.test, &standardizer, &cfg)?;
    let indicators = if config.eval.indicators {
        let errs = quality_indicators(ev.consumption.view(), ev.release.view())?;
        Some(
            INDICATOR_NAMES
                .iter()
                .zip(errs)
                .map(|(n, e)| (n.to_string(), e))
                .collect(),
        )
    } else {
        None
    };
    write_json(
        &out.join("eval.json"),
        &EvalSummary {
            ne2: ev.ne2,
            ne4: ev.ne4,
            balanced_accuracy: ev.balanced_accuracy,
            indicator_errors_pct: indicators,
            peak_preservation: analytics::peak_preservation(
                ev.consumption.view(),
                ev.release.view(),
                &config.eval.peaks,
            )?,
        },
    )
}

fn lambda_label(lambda: f64) -> String {
    analytics::format_sig(lambda)
}

pub fn cmd_sweep(config: &RunConfigFile, out: &Path) -> Result<()> {
    let splits = splits(config)?;
    let (runs, assessed) = tradeoff_sweep(
        &config.train.lambda_grid,
        &config.train_config(),
        &splits,
        &config.eval.peaks,
    )?;
    let mut points = Vec::with_capacity(runs.len());
    for (run, a) in runs.iter().zip(assessed) {
        let name = format!("releaser_lambda_{}.json", lambda_label(run.lambda));
        run.releaser.save(&out.join(&name))?;
        let mut point = a.point;
        point.checkpoint = Some(name);
        points.push(point);
    }
    write_tradeoff_csv(&points, &out.join("tradeoff.csv"))
}

/// Welch PSD of the release error for each releaser checkpoint.
pub fn cmd_psd(config: &RunConfigFile, out: &Path, checkpoints: &[PathBuf]) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("psd needs at least one --checkpoint".into()));
    }
    let splits = splits(config)?;
    let cfg = config.train_config();
    let standardizer = Standardizer::fit(&splits.train)?;
    let mut estimates = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let releaser = load_releaser(path, &cfg, splits.train.alphabet_size)?;
        let z = privrel_core::trainer::release_split(
            &releaser,
            &splits.test,
            &standardizer,
            &cfg,
            derive_seed(cfg.train.seed, privrel_core::rng::stream::EVAL_NOISE),
        )?;
        let release = standardizer.invert(z.view());
        let errors = error_signals(
            splits.test.consumption().view(),
            release.view(),
            config.eval.welch.signals,
        );
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        estimates.push((label, welch_psd(errors.view(), &config.eval.welch)?));
    }
    write_psd_csv(&estimates, &out.join("psd.csv"))
}

pub fn cmd_indicators(config: &RunConfigFile, out: &Path, checkpoint: &Path) -> Result<()> {
    let splits = splits(config)?;
    let cfg = config.train_config();
    let releaser = load_releaser(checkpoint, &cfg, splits.train.alphabet_size)?;
    let standardizer = Standardizer::fit(&splits.train)?;
    let z = privrel_core::trainer::release_split(
        &releaser,
        &splits.test,
        &standardizer,
        &cfg,
        derive_seed(cfg.train.seed, privrel_core::rng::stream::EVAL_NOISE),
    )?;
    let release = standardizer.invert(z.view());
    let y = splits.test.consumption();
    let reference = QualityIndicators::of(y.view())?.as_array();
    let released = QualityIndicators::of(release.view())?.as_array();
    let errors = quality_indicators(y.view(), release.view())?;
    let path = out.join("indicators.csv");
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)?;
    wtr.write_record(["indicator", "consumption", "release", "error_pct"])?;
    for i in 0..5 {
        wtr.write_record([
            INDICATOR_NAMES[i].to_string(),
            analytics::format_sig(reference[i]),
            analytics::format_sig(released[i]),
            analytics::format_sig(errors[i]),
        ])?;
    }
    wtr.flush().map_err(|e| io_error(&path, e))
}

pub fn cmd_mismatch(config: &RunConfigFile, out: &Path) -> Result<()> {
    let splits = splits(config)?;
    let rows = mismatch_experiment(
        &config.train.lambda_grid,
        &config.train_config(),
        &splits,
        &config.mismatch.scenarios,
        None,
        &config.eval.peaks,
    )?;
    write_mismatch_csv(&rows, config.train.order, &out.join("mismatch.csv"))
}

pub fn cmd_oracle_verify(config: &RunConfigFile, out: &Path) -> Result<()> {
    let o = &config.oracle;
    let mut rng = rng_from_seed(o.seed);
    let path = out.join("oracle.csv");
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)?;
    wtr.write_record([
        "spec",
        "directed_information",
        "conditioned_bound",
        "entropy_bound",
        "conditioning_slack",
        "ceiling_slack",
        "cross_entropy",
        "guess_entropy_rate",
        "label_entropy_rate",
        "guess_slack",
        "label_slack",
    ])?;
    let mut negative_guess = 0;
    for i in 0..o.specs {
        let spec = JointProcessSpec::random(&mut rng, o.steps, o.alphabet_size, o.alphabet_size, o.alphabet_size);
        let chain = verify_bound_chain(&spec)?;
        let xent = verify_xent_bound(&spec)?;
        if xent.guess_slack() < -1e-9 {
            negative_guess += 1;
        }
        let f = analytics::format_sig;
        wtr.write_record([
            i.to_string(),
            f(chain.directed_information),
            f(chain.conditioned_bound),
            f(chain.entropy_bound),
            f(chain.conditioning_slack()),
            f(chain.ceiling_slack()),
            f(xent.cross_entropy),
            f(xent.guess_entropy_rate),
            f(xent.label_entropy_rate),
            f(xent.guess_slack()),
            f(xent.label_slack()),
        ])?;
    }
    wtr.flush().map_err(|e| io_error(&path, e))?;
    if negative_guess > 0 {
        log::warn!(
            "{negative_guess} of {} specs have cross-entropy below the attacker's own entropy rate",
            o.specs
        );
    }
    Ok(())
}
