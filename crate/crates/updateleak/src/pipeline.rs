//! The staged experiment pipeline: prepare → victim → corpus → attack →
//! evaluate.
//!
//! Every stage exists as an in-memory function. [`run_pipeline`] chains them
//! through a run directory, stamping every artifact with the config hash and
//! refusing artifacts produced under a different one.
//!
//! Run directory layout:
//!
//! ```text
//! manifest.json            split indices
//! data/checkin.st          synthesized surrogate (check-in runs only)
//! victims/{target,shadow}.st
//! corpus/{shadow,target}.st
//! attack/model.st          plus attack/ae.st and attack/li.st for ssr
//! report.json, report.csv, figures/*.png
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use updateleak_core::checkin::synthesize_checkin_dataset;
use updateleak_core::dataset::{sample_updating_sets, split_train_pool, LabeledDataset, SplitIndices};
use updateleak_core::noise::NoisePolicy;

use crate::attack::{train_label_distribution, train_label_inference, LabelAttack};
use crate::config::{AttackKind, ExperimentConfig};
use crate::container::{Array, Container};
use crate::corpus::{build_corpus, AttackCorpus, CorpusOptions, Projection, Role};
use crate::data::{load_dataset, DatasetName, ProbeSet, SplitManifest};
use crate::error::usage;
use crate::eval::{self, EvalContext, EvaluationReport};
use crate::msr::{train_cbm_gan, CbmGan};
use crate::ssr::{assemble_and_train_ssr, train_autoencoder, AeArch, AutoencoderPair, SsrModel};
use crate::victim::{build_classifier, train_classifier, ClassifierHandle};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Victim,
    Corpus,
    Attack,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Victim, Stage::Corpus, Stage::Attack, Stage::Evaluate];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Victim => "victim",
            Stage::Corpus => "corpus",
            Stage::Attack => "attack",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| usage(format!("unknown stage `{s}` (expected victim, corpus, attack or evaluate)")))
    }
}

/// The splits every later stage works on.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: DatasetName,
    pub manifest: SplitManifest,
    pub target_train: LabeledDataset,
    pub target_pool: LabeledDataset,
    pub shadow_train: LabeledDataset,
    pub shadow_pool: LabeledDataset,
    /// The adversary's whole shadow split, used by the baselines.
    pub shadow: LabeledDataset,
    pub probe: ProbeSet,
}

/// Loads (or synthesizes) the configured dataset.
pub fn load_source(cfg: &ExperimentConfig) -> Result<LabeledDataset> {
    load_dataset(cfg.data.dataset, &cfg.data.root, &cfg.data.checkin.params())
}

/// Draws the three-way split and cuts the target and shadow splits into
/// victim training data and updating pools.
pub fn prepare(cfg: &ExperimentConfig, source: &LabeledDataset) -> Result<Prepared> {
    cfg.validate_sizes(source.len())?;
    let d = &cfg.data;
    let plan = updateleak_core::dataset::SplitPlan {
        target_size: d.target_size,
        shadow_size: d.shadow_size,
        probe_size: d.probe_size,
        seed: cfg.seed_for("split"),
    };
    let idx = updateleak_core::dataset::split_indices(source.len(), &plan)?;
    let manifest = SplitManifest::new(d.dataset, plan.seed, &cfg.hash(), source.len(), &idx);
    from_manifest(cfg, source, manifest)
}

/// Rebuilds the splits recorded in `manifest`.
pub fn from_manifest(cfg: &ExperimentConfig, source: &LabeledDataset, manifest: SplitManifest) -> Result<Prepared> {
    if manifest.num_samples != source.len() {
        return Err(usage(format!(
            "split manifest covers {} samples, the dataset has {}",
            manifest.num_samples,
            source.len()
        )));
    }
    let SplitIndices { target, shadow, probe } = manifest.indices();
    let target = source.subset(&target);
    let shadow = match (cfg.data.dataset, cfg.data.checkin.shadow_params()) {
        (DatasetName::Checkin, Some(p)) => synthesize_checkin_dataset(&p)?.subset(&shadow),
        _ => source.subset(&shadow),
    };
    let (target_train, target_pool) = split_train_pool(&target, cfg.data.train_size)?;
    let (shadow_train, shadow_pool) = split_train_pool(&shadow, cfg.data.train_size)?;
    Ok(Prepared {
        dataset: cfg.data.dataset,
        probe: ProbeSet::new(source.subset(&probe), &probe),
        manifest,
        target_train,
        target_pool,
        shadow_train,
        shadow_pool,
        shadow,
    })
}

#[derive(Debug, Clone)]
pub struct Victims {
    pub target: ClassifierHandle,
    pub shadow: ClassifierHandle,
}

/// Trains the target model and the adversary's shadow model on disjoint
/// data.
pub fn train_victims(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Victims> {
    let c = cfg.num_classes();
    let target = build_classifier(cfg.target_arch(), c, cfg.seed_for("victim.target.init"))?;
    let target = train_classifier(&target, &prep.target_train, &cfg.victim_settings("target"))?;
    let shadow = build_classifier(cfg.shadow_arch(), c, cfg.seed_for("victim.shadow.init"))?;
    let shadow = train_classifier(&shadow, &prep.shadow_train, &cfg.victim_settings("shadow"))?;
    Ok(Victims { target, shadow })
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Shadow => "shadow",
        Role::Target => "target",
    }
}

/// One corpus per configured cardinality, rows split evenly; several
/// cardinalities are interleaved row by row into one mixed corpus.
fn corpus_for(
    cfg: &ExperimentConfig,
    role: Role,
    base: &ClassifierHandle,
    pool: &LabeledDataset,
    probe: &ProbeSet,
    cards: &[usize],
    m: usize,
    noise: Option<NoisePolicy>,
) -> Result<AttackCorpus> {
    let mut parts = Vec::with_capacity(cards.len());
    for (j, &k) in cards.iter().enumerate() {
        let m_j = m / cards.len() + usize::from(j < m % cards.len());
        let sets_seed = cfg.seed_for(&format!("sets.{}.{k}", role_name(role)));
        let update_seed = cfg.seed_for(&format!("update.{}.{k}", role_name(role)));
        let batch = sample_updating_sets(pool.len(), k, m_j, sets_seed)?;
        let opts = CorpusOptions {
            role,
            update_epochs: cfg.victim.update_epochs,
            sets_seed,
            update_seed,
            noise,
        };
        parts.push(build_corpus(base, pool, probe, &batch, &opts)?);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    let longest = parts.iter().map(AttackCorpus::len).max().unwrap_or(0);
    let mut offsets = Vec::with_capacity(parts.len());
    let mut at = 0;
    for p in &parts {
        offsets.push(at);
        at += p.len();
    }
    let order: Vec<usize> = (0..longest)
        .flat_map(|r| parts.iter().zip(&offsets).filter(move |(p, _)| r < p.len()).map(move |(_, &o)| o + r))
        .collect();
    Ok(AttackCorpus::concat(&parts)?.select(&order))
}

/// The adversary's training corpus from the shadow model.
pub fn build_shadow_corpus(cfg: &ExperimentConfig, prep: &Prepared, victims: &Victims) -> Result<AttackCorpus> {
    corpus_for(cfg, Role::Shadow, &victims.shadow, &prep.shadow_pool, &prep.probe, &cfg.corpus.cardinalities, cfg.corpus.m_shadow, None)
}

/// The test corpus from the target model, probed through the defense when
/// it is enabled.
pub fn build_target_corpus(cfg: &ExperimentConfig, prep: &Prepared, victims: &Victims) -> Result<AttackCorpus> {
    corpus_for(
        cfg,
        Role::Target,
        &victims.target,
        &prep.target_pool,
        &prep.probe,
        cfg.corpus.target_cardinalities(),
        cfg.corpus.m_target,
        cfg.noise_policy(),
    )
}

pub enum TrainedAttack {
    Label(LabelAttack),
    Ssr {
        ae: AutoencoderPair,
        model: SsrModel,
        /// Supplies the inferred labels of the Label-random baseline.
        li: LabelAttack,
    },
    Msr(CbmGan),
}

/// Trains the configured attack on the shadow corpus.
pub fn train_attack(cfg: &ExperimentConfig, prep: &Prepared, shadow_corpus: &AttackCorpus) -> Result<TrainedAttack> {
    let pool = &prep.shadow_pool;
    Ok(match cfg.attack.kind {
        AttackKind::Li => TrainedAttack::Label(train_label_inference(
            &shadow_corpus.project_targets(Projection::Label, pool)?,
            &cfg.attack_training(),
        )?),
        AttackKind::Lde => TrainedAttack::Label(train_label_distribution(
            &shadow_corpus.project_targets(Projection::Distribution, pool)?,
            &cfg.attack_training(),
        )?),
        AttackKind::Ssr => {
            let ae = train_autoencoder(&prep.shadow_train, AeArch::for_dataset(prep.dataset), &cfg.ae_training())?;
            let samples = shadow_corpus.project_targets(Projection::Samples, pool)?;
            let model = assemble_and_train_ssr(&ae, &samples, &cfg.ssr_training())?;
            let li = train_label_inference(&shadow_corpus.project_targets(Projection::Label, pool)?, &cfg.attack_training())?;
            TrainedAttack::Ssr { ae, model, li }
        }
        AttackKind::Msr => TrainedAttack::Msr(train_cbm_gan(
            &shadow_corpus.project_targets(Projection::Samples, pool)?,
            prep.dataset,
            &cfg.gan_settings(),
        )?),
    })
}

/// Scores the trained attack on the target corpus against its baselines.
pub fn evaluate(cfg: &ExperimentConfig, prep: &Prepared, target_corpus: &AttackCorpus, attack: &TrainedAttack) -> Result<EvaluationReport> {
    let mut report = EvaluationReport::new(cfg.attack.kind.as_str(), prep.dataset.as_str(), &cfg.hash());
    report.seeds.insert("seed".into(), cfg.seed);
    for name in ["split", "victim.target.init", "victim.shadow.init", "attack", "baseline"] {
        report.seeds.insert(name.into(), cfg.seed_for(name));
    }
    if let Some(p) = cfg.noise_policy() {
        report.seeds.insert("defense".into(), p.seed);
        report.notes.push(format!("target posteriors perturbed with U[0, {}] noise", p.scale));
    }
    let ctx = EvalContext {
        shadow: &prep.shadow,
        target_pool: &prep.target_pool,
        draws: cfg.eval.draws,
        seed: cfg.seed_for("baseline"),
        max_instances: cfg.eval.max_instances,
    };
    match (cfg.attack.kind, attack) {
        (AttackKind::Li, TrainedAttack::Label(m)) => eval::evaluate_li(&mut report, m, target_corpus, &ctx)?,
        (AttackKind::Lde, TrainedAttack::Label(m)) => eval::evaluate_lde(&mut report, m, target_corpus, &ctx)?,
        (AttackKind::Ssr, TrainedAttack::Ssr { ae, model, li }) => {
            eval::evaluate_ssr(&mut report, model, ae, li, target_corpus, &ctx)?
        }
        (AttackKind::Msr, TrainedAttack::Msr(m)) => {
            let extract = cfg.extract_settings();
            report.seeds.insert("extract".into(), extract.seed);
            eval::evaluate_msr(&mut report, m, target_corpus, &extract, &cfg.msr.candidate_ks, &ctx)?
        }
        _ => return Err(usage("trained attack does not match attack.kind")),
    }
    Ok(report)
}

/// Runs every stage in memory and returns the report.
pub fn run_in_memory(cfg: &ExperimentConfig, source: &LabeledDataset) -> Result<EvaluationReport> {
    let prep = prepare(cfg, source)?;
    let victims = train_victims(cfg, &prep)?;
    let shadow = build_shadow_corpus(cfg, &prep, &victims)?;
    let target = build_target_corpus(cfg, &prep, &victims)?;
    let attack = train_attack(cfg, &prep, &shadow)?;
    evaluate(cfg, &prep, &target, &attack)
}

/// Artifact paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn checkin_data(&self) -> PathBuf {
        self.root.join("data").join("checkin.st")
    }

    pub fn victim(&self, role: &str) -> PathBuf {
        self.root.join("victims").join(format!("{role}.st"))
    }

    pub fn corpus(&self, role: &str) -> PathBuf {
        self.root.join("corpus").join(format!("{role}.st"))
    }

    pub fn attack(&self, part: &str) -> PathBuf {
        self.root.join("attack").join(format!("{part}.st"))
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
}

fn missing(stage: &str, artifact: &Path) -> Error {
    Error::MissingStage {
        stage: stage.into(),
        artifact: artifact.to_path_buf(),
    }
}

fn check_hash(stage: &str, artifact: &Path, found: Option<&str>, expected: &str) -> Result<()> {
    match found {
        Some(h) if h == expected => Ok(()),
        other => Err(Error::HashMismatch {
            stage: stage.into(),
            artifact: artifact.to_path_buf(),
            expected: expected.into(),
            found: other.unwrap_or("<none>").into(),
        }),
    }
}

/// Loads an artifact written by `stage`, failing with the stage to run when
/// it is absent or stale.
fn load_checked<T>(stage: &str, path: &Path, hash: &str, load: impl FnOnce(&Path) -> Result<(T, Container)>) -> Result<T> {
    if !path.exists() {
        return Err(missing(stage, path));
    }
    let (value, c) = load(path)?;
    check_hash(stage, path, c.config_hash(), hash)?;
    Ok(value)
}

fn fresh(path: &Path, hash: &str) -> bool {
    Container::load(path).is_ok_and(|c| c.config_hash() == Some(hash))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrepareOutcome {
    Written,
    UpToDate,
}

/// Writes the split manifest (and the synthesized surrogate for check-in
/// runs). Does nothing when a manifest for the same config exists.
pub fn prepare_data(cfg: &ExperimentConfig, dir: &RunDir) -> Result<PrepareOutcome> {
    let hash = cfg.hash();
    if SplitManifest::load(&dir.manifest()).is_ok_and(|m| m.config_hash == hash) {
        return Ok(PrepareOutcome::UpToDate);
    }
    let source = load_source(cfg)?;
    let prep = prepare(cfg, &source)?;
    std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
    if cfg.data.dataset == DatasetName::Checkin {
        let mut c = Container::new("dataset", &hash);
        c.set_meta("dataset", "checkin");
        c.insert("features", Array::f32(vec![source.len(), source.feature_len()], source.features().to_vec()));
        c.insert("labels", Array::i64(source.labels().iter().map(|&l| i64::from(l)).collect()));
        c.save(&dir.checkin_data())?;
    }
    prep.manifest.save(&dir.manifest())?;
    Ok(PrepareOutcome::Written)
}

/// Loads the prepared splits of a run directory.
pub fn load_prepared(cfg: &ExperimentConfig, dir: &RunDir) -> Result<Prepared> {
    let path = dir.manifest();
    if !path.exists() {
        return Err(missing("prepare-data", &path));
    }
    let manifest = SplitManifest::load(&path)?;
    check_hash("prepare-data", &path, Some(&manifest.config_hash), &cfg.hash())?;
    from_manifest(cfg, &load_source(cfg)?, manifest)
}

fn load_attack(cfg: &ExperimentConfig, dir: &RunDir, hash: &str) -> Result<TrainedAttack> {
    let st = Stage::Attack.as_str();
    Ok(match cfg.attack.kind {
        AttackKind::Li | AttackKind::Lde => TrainedAttack::Label(load_checked(st, &dir.attack("model"), hash, LabelAttack::load)?),
        AttackKind::Ssr => TrainedAttack::Ssr {
            model: load_checked(st, &dir.attack("model"), hash, SsrModel::load)?,
            ae: load_checked(st, &dir.attack("ae"), hash, AutoencoderPair::load)?,
            li: load_checked(st, &dir.attack("li"), hash, LabelAttack::load)?,
        },
        AttackKind::Msr => TrainedAttack::Msr(load_checked(st, &dir.attack("model"), hash, CbmGan::load)?),
    })
}

fn save_attack(attack: &TrainedAttack, dir: &RunDir, hash: &str) -> Result<()> {
    match attack {
        TrainedAttack::Label(m) => m.save(&dir.attack("model"), hash),
        TrainedAttack::Ssr { ae, model, li } => {
            ae.save(&dir.attack("ae"), hash)?;
            li.save(&dir.attack("li"), hash)?;
            model.save(&dir.attack("model"), hash)
        }
        TrainedAttack::Msr(m) => m.save(&dir.attack("model"), hash),
    }
}

/// Runs the requested stages through `dir`. A requested stage whose
/// artifacts already exist for this config is skipped unless `force` is
/// set; stages not requested must have left their artifacts behind.
/// Returns the report when `evaluate` ran.
pub fn run_pipeline(cfg: &ExperimentConfig, dir: &RunDir, stages: &[Stage], force: bool) -> Result<Option<EvaluationReport>> {
    let hash = cfg.hash();
    let wants = |s: Stage| stages.contains(&s);
    let prep = load_prepared(cfg, dir)?;

    let victims = if wants(Stage::Victim) && (force || !fresh(&dir.victim("target"), &hash) || !fresh(&dir.victim("shadow"), &hash)) {
        log::info!("stage victim: training target and shadow models");
        let v = train_victims(cfg, &prep)?;
        v.target.save(&dir.victim("target"), &hash)?;
        v.shadow.save(&dir.victim("shadow"), &hash)?;
        Some(v)
    } else {
        None
    };
    let get_victims = |cached: Option<Victims>| -> Result<Victims> {
        match cached {
            Some(v) => Ok(v),
            None => Ok(Victims {
                target: load_checked("victim", &dir.victim("target"), &hash, ClassifierHandle::load)?,
                shadow: load_checked("victim", &dir.victim("shadow"), &hash, ClassifierHandle::load)?,
            }),
        }
    };

    let mut corpora = None;
    if wants(Stage::Corpus) && (force || !fresh(&dir.corpus("shadow"), &hash) || !fresh(&dir.corpus("target"), &hash)) {
        let v = get_victims(victims)?;
        log::info!("stage corpus: {} shadow and {} target updates", cfg.corpus.m_shadow, cfg.corpus.m_target);
        let shadow = build_shadow_corpus(cfg, &prep, &v)?;
        let target = build_target_corpus(cfg, &prep, &v)?;
        shadow.save(&dir.corpus("shadow"), &hash)?;
        target.save(&dir.corpus("target"), &hash)?;
        corpora = Some((shadow, target));
    } else if wants(Stage::Victim) {
        log::info!("stage victim: up to date");
    }

    let mut attack = None;
    if wants(Stage::Attack) && (force || !fresh(&dir.attack("model"), &hash)) {
        let shadow = match &corpora {
            Some((s, _)) => s.clone(),
            None => load_checked("corpus", &dir.corpus("shadow"), &hash, AttackCorpus::load)?,
        };
        log::info!("stage attack: training {}", cfg.attack.kind.as_str());
        let a = train_attack(cfg, &prep, &shadow)?;
        save_attack(&a, dir, &hash)?;
        attack = Some(a);
    }

    if !wants(Stage::Evaluate) {
        return Ok(None);
    }
    if !force && attack.is_none() && corpora.is_none() {
        if let Ok(r) = EvaluationReport::load_json(&dir.report_json()) {
            if r.config_hash == hash {
                log::info!("stage evaluate: up to date");
                return Ok(Some(r));
            }
        }
    }
    let target = match corpora {
        Some((_, t)) => t,
        None => load_checked("corpus", &dir.corpus("target"), &hash, AttackCorpus::load)?,
    };
    let attack = match attack {
        Some(a) => a,
        None => load_attack(cfg, dir, &hash)?,
    };
    log::info!("stage evaluate");
    let report = evaluate(cfg, &prep, &target, &attack)?;
    report.save_json(&dir.report_json())?;
    report.save_csv(&dir.report_csv())?;
    if cfg.eval.figures {
        eval::write_figures(&report, &dir.figures())?;
    }
    Ok(Some(report))
}

/// Loads the report of a finished run.
pub fn load_report(dir: &RunDir) -> Result<EvaluationReport> {
    let path = dir.report_json();
    if !path.exists() {
        return Err(missing("evaluate", &path));
    }
    EvaluationReport::load_json(&path)
}
