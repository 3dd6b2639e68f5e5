//! End-to-end orchestration: a declarative config, seeds derived from one
//! master seed, and stage artifacts under a single output root.
//!
//! Layout under `out`:
//! `pretrain/<backbone>/`, `stats/<backbone>/`, `distilled/`, `relabel/`,
//! `eval/`, and one run record per stage in `logs/<stage>.toml`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{load_model, pretrain_pool, save_model, BackboneSpec, Model, PretrainConfig, MODEL_MANIFEST, PRESETS};
use crate::blob::{create_dir, read_bytes, read_toml, sha256_hex, write_toml, Dtype};
use crate::data::{load_dataset, Augment, ExternalSource, Splits};
use crate::error::{Error, Result};
use crate::evaluate::{diversity_metric, save_report, train_eval_model, Diversity, EvalConfig, EvalReport};
use crate::relabel::{load_soft_labels, relabel_dataset, save_soft_labels, RelabelConfig, SOFT_LABEL_FILE};
use crate::stats::{capture_bank, load_bank, save_bank, StatBank, BANK_MANIFEST};
use crate::synth::{
    init_synthetic, load_synthetic, run_synthesis, save_synthetic, PlanMode, SynthesisConfig, DISTILLED_MANIFEST,
};

/// Stage names in execution order.
pub const STAGES: [&str; 5] = ["pretrain", "capture-stats", "synthesize", "relabel", "evaluate"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Source files of `cifar-subset`.
    pub external: Option<ExternalSource>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            name: "digits-16".into(),
            external: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureConfig {
    /// Patch grid side of the convolution statistics.
    pub n_p: usize,
    pub batch_size: usize,
    pub dtype: Dtype,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        CaptureConfig {
            n_p: 4,
            batch_size: 100,
            dtype: Dtype::F64,
        }
    }
}

/// Seeds of every stage, all derived from the master seed.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub dataset: u64,
    /// Per pool member: initialization and data order.
    pub pretrain: Vec<u64>,
    pub init: u64,
    pub synthesize: u64,
    pub relabel: u64,
    pub evaluate: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Output root; every artifact path is relative to it.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    /// Backbone preset names; matched during synthesis and ensembled for labels.
    pub pool: Vec<String>,
    /// View augmentation of pretraining and relabeling. Defaults to none for
    /// blobs-2, whose classes differ only by a global direction, and to
    /// crop+flip otherwise.
    pub augment: Option<Augment>,
    pub ipc: usize,
    pub pretrain: PretrainConfig,
    pub capture: CaptureConfig,
    pub synthesis: SynthesisConfig,
    pub relabel: RelabelConfig,
    pub evaluate: EvalConfig,
    /// Filled in by [`PipelineConfig::resolve`]; any value in a file is replaced.
    pub seeds: StageSeeds,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out: PathBuf::from("run"),
            dataset: DatasetConfig::default(),
            pool: PRESETS.iter().map(|s| s.to_string()).collect(),
            augment: None,
            ipc: 10,
            pretrain: PretrainConfig::default(),
            capture: CaptureConfig::default(),
            synthesis: SynthesisConfig::default(),
            relabel: RelabelConfig::default(),
            evaluate: EvalConfig::default(),
            seeds: StageSeeds::default(),
        }
    }
}

/// Seed of `stage` under `master`; 63 bits so it fits a TOML integer.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes")) >> 1
}

/// Reads a config file; parse failures and unknown keys are config errors.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

impl PipelineConfig {
    /// Validates every section, fills the derived seeds and the augmentation.
    pub fn resolve(mut self) -> Result<PipelineConfig> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        if self.pool.is_empty() {
            return bad("pool must name at least one backbone".into());
        }
        for (i, name) in self.pool.iter().enumerate() {
            if !PRESETS.contains(&name.as_str()) {
                return bad(format!("unknown backbone `{name}` (expected one of {PRESETS:?})"));
            }
            if self.pool[..i].contains(name) {
                return bad(format!("backbone `{name}` listed twice"));
            }
        }
        if self.ipc == 0 {
            return bad("ipc must be >= 1".into());
        }
        if self.capture.n_p == 0 || self.capture.batch_size == 0 {
            return bad("capture n_p and batch_size must be >= 1".into());
        }
        if self.pretrain.epochs == 0 {
            return bad("pretrain epochs must be >= 1".into());
        }
        self.synthesis.validate()?;
        self.relabel.validate()?;
        self.evaluate.validate()?;
        let augment = self.augment.unwrap_or(if self.dataset.name == "blobs-2" {
            Augment::None
        } else {
            Augment::CropFlip
        });
        self.augment = Some(augment);
        self.pretrain.augment = augment;
        self.relabel.augment = augment;
        let m = self.seed;
        self.seeds = StageSeeds {
            dataset: derive_seed(m, "dataset"),
            pretrain: self.pool.iter().map(|b| derive_seed(m, &format!("pretrain/{b}"))).collect(),
            init: derive_seed(m, "init"),
            synthesize: derive_seed(m, "synthesize"),
            relabel: derive_seed(m, "relabel"),
            evaluate: derive_seed(m, "evaluate"),
        };
        self.synthesis.seed = self.seeds.synthesize;
        self.relabel.seed = self.seeds.relabel;
        self.evaluate.seed = self.seeds.evaluate;
        Ok(self)
    }

    pub fn pretrain_dir(&self, backbone: &str) -> PathBuf {
        self.out.join("pretrain").join(backbone)
    }

    pub fn stats_dir(&self, backbone: &str) -> PathBuf {
        self.out.join("stats").join(backbone)
    }

    pub fn distilled_dir(&self) -> PathBuf {
        self.out.join("distilled")
    }

    pub fn relabel_dir(&self) -> PathBuf {
        self.out.join("relabel")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join("eval")
    }

    pub fn record_path(&self, stage: &str) -> PathBuf {
        self.out.join("logs").join(format!("{stage}.toml"))
    }

    pub fn splits(&self) -> Result<Splits> {
        load_dataset(&self.dataset.name, self.seeds.dataset, self.dataset.external.as_ref())
    }
}

/// Command-line overrides of config keys; `None` keeps the file's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub ipc: Option<usize>,
    pub alpha: Option<f64>,
    pub beta_dr: Option<f64>,
    pub gamma: Option<f64>,
    pub tau_dd: Option<f64>,
    pub iterations: Option<usize>,
    pub ln: Option<bool>,
    pub w_dd: Option<f64>,
    pub w_bn: Option<f64>,
    pub w_conv: Option<f64>,
    pub batch_plan: Option<PlanMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut cfg.seed, &self.seed);
        set(&mut cfg.out, &self.out);
        set(&mut cfg.ipc, &self.ipc);
        set(&mut cfg.synthesis.alpha, &self.alpha);
        set(&mut cfg.synthesis.beta_dr, &self.beta_dr);
        set(&mut cfg.evaluate.gamma, &self.gamma);
        set(&mut cfg.synthesis.tau_dd, &self.tau_dd);
        set(&mut cfg.synthesis.iterations, &self.iterations);
        set(&mut cfg.relabel.use_ln, &self.ln);
        set(&mut cfg.synthesis.w_dd, &self.w_dd);
        set(&mut cfg.synthesis.w_bn, &self.w_bn);
        set(&mut cfg.synthesis.w_conv, &self.w_conv);
        set(&mut cfg.synthesis.batch_plan, &self.batch_plan);
    }
}

/// What one stage consumed and produced, with the resolved config echoed so
/// the stage can be replayed from this record alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    /// Content hashes of input artifacts, keyed by path relative to `out`.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Stage-specific measurements.
    pub notes: BTreeMap<String, String>,
    pub config: PipelineConfig,
}

pub fn load_run_record(path: &Path) -> Result<RunRecord> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            stage: "pipeline",
            path: path.to_path_buf(),
        });
    }
    read_toml(path)
}

struct Recorder<'a> {
    cfg: &'a PipelineConfig,
    record: RunRecord,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a PipelineConfig, stage: &str) -> Self {
        Recorder {
            cfg,
            record: RunRecord {
                stage: stage.into(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                notes: BTreeMap::new(),
                config: cfg.clone(),
            },
        }
    }

    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.cfg.out).unwrap_or(path).display().to_string()
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_hex(&read_bytes(path)?);
        self.record.inputs.insert(self.key(path), h);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let h = sha256_hex(&read_bytes(path)?);
        self.record.outputs.insert(self.key(path), h);
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.record.notes.insert(key.into(), value.to_string());
    }

    fn finish(self) -> Result<RunRecord> {
        let path = self.cfg.record_path(&self.record.stage);
        create_dir(path.parent().expect("logs dir"))?;
        write_toml(&path, &self.record)?;
        log::info!("stage {} done; record at {}", self.record.stage, path.display());
        Ok(self.record)
    }
}

/// Trains every pool member on the training split.
pub fn stage_pretrain(cfg: &PipelineConfig) -> Result<RunRecord> {
    let mut rec = Recorder::new(cfg, "pretrain");
    let splits = cfg.splits()?;
    let shape = splits.train.image_shape();
    let specs = cfg
        .pool
        .iter()
        .map(|b| BackboneSpec::preset(b, shape, splits.train.classes))
        .collect::<Result<Vec<_>>>()?;
    let trained = pretrain_pool(&specs, &splits.train, &cfg.pretrain, &cfg.seeds.pretrain)?;
    for (model, report) in &trained {
        let dir = cfg.pretrain_dir(model.name());
        save_model(model, &dir)?;
        rec.output(&dir.join(MODEL_MANIFEST))?;
        rec.note(&format!("{}.train_accuracy", model.name()), report.train_accuracy);
    }
    rec.finish()
}

/// Loads the pool, checking each model against the configured dataset.
fn load_pool(cfg: &PipelineConfig, splits: &Splits, rec: &mut Recorder) -> Result<Vec<Model>> {
    cfg.pool
        .iter()
        .map(|b| {
            let dir = cfg.pretrain_dir(b);
            let m = load_model(&dir)?;
            if m.name() != b || m.spec().input != splits.train.image_shape() || m.classes() != splits.train.classes {
                return Err(Error::Mismatch(format!(
                    "{} holds `{}` for {:?} / {} classes; the config needs `{b}` for {:?} / {}",
                    dir.display(),
                    m.name(),
                    m.spec().input,
                    m.classes(),
                    splits.train.image_shape(),
                    splits.train.classes
                )));
            }
            rec.input(&dir.join(MODEL_MANIFEST))?;
            Ok(m)
        })
        .collect()
}

/// Captures each member's statistic bank on the training split.
pub fn stage_capture(cfg: &PipelineConfig) -> Result<RunRecord> {
    let mut rec = Recorder::new(cfg, "capture-stats");
    let splits = cfg.splits()?;
    let pool = load_pool(cfg, &splits, &mut rec)?;
    for m in &pool {
        let bank = capture_bank(m, &splits.train, cfg.capture.n_p, cfg.capture.batch_size)?;
        let dir = cfg.stats_dir(m.name());
        save_bank(&bank, &dir, cfg.capture.dtype)?;
        rec.output(&dir.join(BANK_MANIFEST))?;
    }
    rec.finish()
}

fn load_banks(cfg: &PipelineConfig, splits: &Splits, rec: &mut Recorder) -> Result<Vec<StatBank>> {
    let expected = splits.train.fingerprint();
    cfg.pool
        .iter()
        .map(|b| {
            let dir = cfg.stats_dir(b);
            let bank = load_bank(&dir, b)?;
            if let Some(why) = bank.fingerprint_mismatch(&expected) {
                return Err(Error::Mismatch(why));
            }
            rec.input(&dir.join(BANK_MANIFEST))?;
            Ok(bank)
        })
        .collect()
}

/// Optimizes the distilled images against the pool and its banks.
pub fn stage_synthesize(cfg: &PipelineConfig) -> Result<RunRecord> {
    let mut rec = Recorder::new(cfg, "synthesize");
    let splits = cfg.splits()?;
    // Banks first: a missing bank names the stage that makes it.
    let banks = load_banks(cfg, &splits, &mut rec)?;
    let pool = load_pool(cfg, &splits, &mut rec)?;
    let init = init_synthetic(
        &splits.train,
        &splits.normalization,
        cfg.ipc,
        cfg.synthesis.init,
        cfg.seeds.init,
    )?;
    let out = run_synthesis(&pool, &banks, init, &cfg.synthesis)?;
    let dir = cfg.distilled_dir();
    save_synthetic(&out.data, &dir)?;
    rec.output(&dir.join(DISTILLED_MANIFEST))?;
    for (b, n) in cfg.pool.iter().zip(&out.draws) {
        rec.note(&format!("{b}.draws"), n);
    }
    if let Some(last) = out.history.last() {
        rec.note("final_loss", last.total);
    }
    rec.finish()
}

/// Manifest tying a soft-label store to the distilled set it labels.
#[derive(Debug, Serialize, Deserialize)]
struct RelabelManifest {
    distilled_sha256: String,
    pool: Vec<String>,
    store_sha256: String,
}

const RELABEL_MANIFEST: &str = "manifest.toml";

/// Records ensemble logits of the distilled set.
pub fn stage_relabel(cfg: &PipelineConfig) -> Result<RunRecord> {
    let mut rec = Recorder::new(cfg, "relabel");
    let splits = cfg.splits()?;
    let data = load_synthetic(&cfg.distilled_dir())?;
    let distilled_manifest = cfg.distilled_dir().join(DISTILLED_MANIFEST);
    rec.input(&distilled_manifest)?;
    let pool = load_pool(cfg, &splits, &mut rec)?;
    let store = relabel_dataset(&data, &pool, &cfg.relabel)?;
    let dir = cfg.relabel_dir();
    create_dir(&dir)?;
    let path = dir.join(SOFT_LABEL_FILE);
    save_soft_labels(&store, &path)?;
    let manifest = RelabelManifest {
        distilled_sha256: sha256_hex(&read_bytes(&distilled_manifest)?),
        pool: cfg.pool.clone(),
        store_sha256: sha256_hex(&read_bytes(&path)?),
    };
    write_toml(&dir.join(RELABEL_MANIFEST), &manifest)?;
    rec.output(&path)?;
    rec.output(&dir.join(RELABEL_MANIFEST))?;
    rec.finish()
}

/// Trains and scores the evaluation model.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<(RunRecord, EvalReport)> {
    let mut rec = Recorder::new(cfg, "evaluate");
    let splits = cfg.splits()?;
    let data = load_synthetic(&cfg.distilled_dir())?;
    let distilled_manifest = cfg.distilled_dir().join(DISTILLED_MANIFEST);
    let mpath = cfg.relabel_dir().join(RELABEL_MANIFEST);
    if !mpath.exists() {
        return Err(Error::MissingArtifact { stage: "relabel", path: mpath });
    }
    let manifest: RelabelManifest = read_toml(&mpath)?;
    let current = sha256_hex(&read_bytes(&distilled_manifest)?);
    if manifest.distilled_sha256 != current {
        return Err(Error::Mismatch(format!(
            "soft labels in {} were computed for distilled set {}, found {current}; rerun relabel",
            cfg.relabel_dir().display(),
            manifest.distilled_sha256
        )));
    }
    let spath = cfg.relabel_dir().join(SOFT_LABEL_FILE);
    let store = load_soft_labels(&spath)?;
    if sha256_hex(&read_bytes(&spath)?) != manifest.store_sha256 {
        return Err(Error::corrupt(&spath, "content hash differs from the relabel manifest"));
    }
    rec.input(&distilled_manifest)?;
    rec.input(&spath)?;
    let (report, _) = train_eval_model(&data, &store, &splits.test, &cfg.evaluate)?;
    save_report(&report, &cfg.eval_dir())?;
    rec.output(&cfg.eval_dir().join(crate::evaluate::REPORT_FILE))?;
    rec.note("accuracy", report.accuracy);
    Ok((rec.finish()?, report))
}

/// Runs the named stage; `evaluate` also returns its report.
pub fn run_stage(cfg: &PipelineConfig, stage: &str) -> Result<(RunRecord, Option<EvalReport>)> {
    match stage {
        "pretrain" => stage_pretrain(cfg).map(|r| (r, None)),
        "capture-stats" => stage_capture(cfg).map(|r| (r, None)),
        "synthesize" => stage_synthesize(cfg).map(|r| (r, None)),
        "relabel" => stage_relabel(cfg).map(|r| (r, None)),
        "evaluate" => stage_evaluate(cfg).map(|(r, e)| (r, Some(e))),
        other => Err(Error::Config(format!("unknown stage `{other}` (expected one of {STAGES:?})"))),
    }
}

/// All stages in order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    stage_pretrain(cfg)?;
    stage_capture(cfg)?;
    stage_synthesize(cfg)?;
    stage_relabel(cfg)?;
    Ok(stage_evaluate(cfg)?.1)
}

/// Diversity diagnostics of a stored distilled set.
pub fn diag(distilled: &Path) -> Result<Diversity> {
    let data = load_synthetic(distilled)?;
    diversity_metric(&data.images, &data.labels)
}
