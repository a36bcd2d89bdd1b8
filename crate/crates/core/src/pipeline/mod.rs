//! End-to-end diagnosis run: supervised feature learning, reliable subset
//! construction and semi-supervised retraining.

pub mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::consistency::{consistent_filter, ConsistencyOutcome};
use crate::dataio::{self, Dataset, Normalizer, Role, Sample};
use crate::eval::{self, DiagnosisReport};
use crate::graph::{gaussian_weights, pairwise_distances, LaplacianBundle, SensorGraph};
use crate::nnet::{self, GcnModel};
use crate::openset::{self, fit_class_gaussians, ClassGaussian, DiscriminantResult, LayerSelection};
use crate::{Error, Result};

pub use config::{DataSource, RunConfig};

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// Score in the logits space only.
    NoFusion,
    /// Use every rejected sample for retraining.
    NoConsistency,
    /// Score in the normalized input space instead of learned features.
    RawFeatureSpace,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoFusion => "no_fusion",
            Variant::NoConsistency => "no_consistency",
            Variant::RawFeatureSpace => "raw_feature_space",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Variant::Full, Variant::NoFusion, Variant::NoConsistency, Variant::RawFeatureSpace]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// One line of the subset audit: every rejected test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: usize,
    pub score: f64,
    pub threshold: f64,
    pub agreeing: Option<usize>,
    pub retained: bool,
}

/// Wall-clock seconds per stage. Kept out of the report so that reports of
/// identical runs are byte-identical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub variant: Variant,
    pub graph: SensorGraph,
    pub normalizer: Normalizer,
    pub m0: GcnModel,
    pub m1: GcnModel,
    pub m0_history: Vec<f64>,
    pub m1_history: Vec<f64>,
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub labeled_features: Vec<Vec<f64>>,
    pub unlabeled_features: Vec<Vec<f64>>,
    pub classes: Vec<ClassGaussian>,
    pub scores: Vec<DiscriminantResult>,
    pub pseudo: Dataset,
    pub reliable: Dataset,
    pub audit: Vec<AuditRow>,
    pub predictions: Vec<usize>,
    pub report: DiagnosisReport,
    pub timings: Timings,
    pub output_dir: Option<PathBuf>,
}

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage { stage: name, source: Box::new(other) },
    })
}

/// Loads labeled samples (label = source class code) for a configuration.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match cfg.dataset.source {
        DataSource::Synthetic => {
            let mut spec = cfg.synthetic.spec();
            spec.speed = cfg.dataset.speed.unwrap_or(1);
            dataio::generate_synthetic(&spec)
        }
        DataSource::Prepared => dataio::read_prepared(&cfg.dataset.resolved_path()?),
        DataSource::Raw => {
            let path = cfg.dataset.resolved_path()?;
            let records = dataio::load_raw(&path, &cfg.dataset.schema)?;
            let (samples, unassigned) = dataio::prepare_samples(records, &cfg.dataset.schema)?;
            if unassigned > 0 {
                log::info!("{unassigned} rows match no single operating condition and were dropped");
            }
            Ok(samples)
        }
    }
}

fn seed_for(seed: u64, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
}

/// Builds the sensor graph from normalized training samples.
pub fn build_graph(labeled: &Dataset, cfg: &RunConfig) -> Result<(SensorGraph, LaplacianBundle)> {
    let m = labeled.dim().ok_or_else(|| Error::Empty("training set".into()))?;
    let mut train = DMatrix::zeros(labeled.len(), m);
    for (r, s) in labeled.samples.iter().enumerate() {
        for (c, v) in s.x.iter().enumerate() {
            train[(r, c)] = *v;
        }
    }
    let d = pairwise_distances(&train)?;
    let graph = gaussian_weights(&d, cfg.graph.sigma2, cfg.graph.epsilon)?;
    let bundle = LaplacianBundle::from_graph(&graph, cfg.graph.use_weights)?;
    Ok((graph, bundle))
}

/// Features used for scoring and neighbour search.
fn feature_space(model: &GcnModel, data: &Dataset, variant: Variant, selection: &LayerSelection) -> Result<Vec<Vec<f64>>> {
    if variant == Variant::RawFeatureSpace {
        return Ok(data.features());
    }
    let selection = if variant == Variant::NoFusion { &LayerSelection::Last } else { selection };
    let trace = model.forward(&data.samples)?;
    Ok(openset::fuse(&trace, selection)?.into_iter().map(|f| f.z).collect())
}

pub fn run(cfg: &RunConfig) -> Result<RunArtifacts> {
    run_ablation(cfg, Variant::Full)
}

/// Runs the pipeline with an ablation switch and persists every stage
/// output when `output_dir` is set.
pub fn run_ablation(cfg: &RunConfig, variant: Variant) -> Result<RunArtifacts> {
    let out_dir = (!cfg.output_dir.is_empty()).then(|| PathBuf::from(&cfg.output_dir));
    let result = run_stages(cfg, variant, out_dir.as_deref());
    match (&result, &out_dir) {
        (Err(e), Some(dir)) => {
            if std::fs::create_dir_all(dir).is_ok() {
                let record = serde_json::json!({
                    "stage": e.stage().unwrap_or("unknown"),
                    "error": e.to_string(),
                });
                let _ = std::fs::write(dir.join("error.json"), format!("{record:#}\n"));
            }
        }
        (Ok(art), Some(dir)) => stage("persist", || persist(art, dir))?,
        _ => {}
    }
    result
}

fn run_stages(cfg: &RunConfig, variant: Variant, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut timings = Timings::default();
    let mut clock = Instant::now();
    let mut tick = |name: &str, timings: &mut Timings| {
        timings.stages.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let samples = stage("load", || load_samples(cfg))?;
    let split = stage("split", || dataio::build_split(&samples, &cfg.split_config()))?;
    let truth = split.truth;
    let k = split.labeled.class_count;
    tick("load", &mut timings);

    // Stage 1: supervised feature learning
    let (normalizer, labeled, unlabeled) = stage("normalize", || {
        let n = Normalizer::fit(&split.labeled)?;
        let l = n.apply(&split.labeled)?;
        let u = n.apply(&split.unlabeled)?;
        Ok((n, l, u))
    })?;
    let (graph, bundle) = stage("graph", || build_graph(&labeled, cfg))?;
    log::info!(
        "graph: {} nodes, {} edges, lambda_max {:.6}",
        graph.node_count(),
        graph.edge_count(),
        bundle.lambda_max
    );
    let speed = cfg.dataset.speed;
    let mut m0_cfg = cfg.train_m0.clone();
    m0_cfg.seed = seed_for(cfg.seed, 1);
    let (m0, m0_history) = stage("train_m0", || {
        let arch = cfg.model.architecture(speed, cfg.graph.cheb_order, k);
        let mut m0 = GcnModel::new(bundle.clone(), arch, seed_for(cfg.seed, 2))?;
        let h = nnet::train(&mut m0, &labeled, &m0_cfg)?;
        Ok((m0, h))
    })?;
    tick("stage1", &mut timings);

    // Stage 2: reliable subset construction
    let selection = &cfg.rejection.layers;
    let labeled_features = stage("fuse", || feature_space(&m0, &labeled, variant, selection))?;
    let unlabeled_features = stage("fuse", || feature_space(&m0, &unlabeled, variant, selection))?;
    let fused_dim = labeled_features.first().map_or(0, |f| f.len());
    let labels = labeled.labels().expect("training samples are labeled");
    let classes = stage("fit_gaussians", || fit_class_gaussians(&labeled_features, &labels, k, &cfg.rejection))?;
    let (pseudo, scores) = stage("reject", || {
        openset::build_pseudo_set(&unlabeled, &unlabeled_features, &classes, cfg.rejection.literal_boundary)
    })?;
    let (reliable, outcomes): (Dataset, Vec<Option<ConsistencyOutcome>>) = if variant == Variant::NoConsistency {
        let mut r = pseudo.clone();
        r.role = Role::Reliable;
        (r, vec![None; pseudo.len()])
    } else {
        let (r, o) = stage("consistency", || consistent_filter(&pseudo, &unlabeled, &unlabeled_features, &cfg.consistency))?;
        (r, o.into_iter().map(Some).collect())
    };
    let audit = audit_rows(&unlabeled, &scores, &pseudo, &outcomes);
    log::info!("rejected {} test samples, kept {} after consistency", pseudo.len(), reliable.len());
    tick("stage2", &mut timings);

    // Stage 3: semi-supervised diagnosis with K + 1 outputs
    let mut flags = Vec::new();
    if reliable.is_empty() {
        log::warn!("reliable subset is empty; the unknown output receives no training signal");
        flags.push(eval::FLAG_EMPTY_RELIABLE.to_string());
    }
    let mut m1_cfg = cfg.train_m1.clone();
    m1_cfg.seed = seed_for(cfg.seed, 3);
    let (m1, m1_history) = stage("train_m1", || {
        let mut combined = labeled.samples.clone();
        combined.extend(reliable.samples.iter().cloned());
        let train_set = Dataset::new(combined, Role::Labeled, k);
        let mut m1 = GcnModel::new(bundle.clone(), m0.arch.with_outputs(k + 1), seed_for(cfg.seed, 4))?;
        let h = nnet::train(&mut m1, &train_set, &m1_cfg)?;
        Ok((m1, h))
    })?;
    let predictions = stage("predict", || Ok(m1.predict(&unlabeled.samples)?.0))?;
    tick("stage3", &mut timings);

    // evaluation is the only reader of the ground truth
    let report = stage("evaluate", || {
        let cm = eval::confusion_matrix(&truth, &predictions, k + 1)?;
        let (u_recall, acc, macro_f1, mut metric_flags) = eval::metrics(&cm);
        flags.append(&mut metric_flags);
        let truth_of: std::collections::HashMap<usize, usize> =
            unlabeled.ids().into_iter().zip(truth.iter().copied()).collect();
        Ok(DiagnosisReport {
            variant: variant.name().to_string(),
            speed,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            known_classes: k,
            u_recall,
            acc,
            macro_f1,
            confusion: cm,
            test_count: unlabeled.len(),
            unknown_in_test: truth.iter().filter(|&&t| t == k).count(),
            pseudo_count: pseudo.len(),
            reliable_count: reliable.len(),
            reliable_unknown: reliable.samples.iter().filter(|s| truth_of.get(&s.id) == Some(&k)).count(),
            fused_dim,
            flags: flags.clone(),
        })
    })?;
    tick("evaluate", &mut timings);
    let _ = out_dir;

    Ok(RunArtifacts {
        config: cfg.clone(),
        variant,
        graph,
        normalizer,
        m0,
        m1,
        m0_history,
        m1_history,
        labeled,
        unlabeled,
        labeled_features,
        unlabeled_features,
        classes,
        scores,
        pseudo,
        reliable,
        audit,
        predictions,
        report,
        timings,
        output_dir: out_dir.map(Path::to_path_buf),
    })
}

fn audit_rows(
    unlabeled: &Dataset,
    scores: &[DiscriminantResult],
    pseudo: &Dataset,
    outcomes: &[Option<ConsistencyOutcome>],
) -> Vec<AuditRow> {
    let score_of: std::collections::HashMap<usize, &DiscriminantResult> =
        unlabeled.ids().into_iter().zip(scores).collect();
    pseudo
        .samples
        .iter()
        .zip(outcomes)
        .map(|(s, o)| {
            let r = score_of[&s.id];
            AuditRow {
                id: s.id,
                score: r.score,
                threshold: r.threshold,
                agreeing: o.map(|o| o.agreeing),
                retained: o.is_none_or(|o| o.retained),
            }
        })
        .collect()
}

pub fn audit_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("id,score,threshold,n_p,retained\n");
    for r in rows {
        let n_p = r.agreeing.map_or(String::new(), |n| n.to_string());
        let _ = writeln!(out, "{},{:?},{:?},{n_p},{}", r.id, r.score, r.threshold, r.retained);
    }
    out
}

pub fn features_csv(ids: &[usize], features: &[Vec<f64>]) -> String {
    let d = features.first().map_or(0, |f| f.len());
    let mut out = String::from("id");
    for i in 1..=d {
        let _ = write!(out, ",z{i}");
    }
    out.push('\n');
    for (id, f) in ids.iter().zip(features) {
        let _ = write!(out, "{id}");
        for v in f {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, contents).map_err(|e| Error::io(p, e))
}

/// Writes the config echo, graph, checkpoints, loss curves, audit, fused
/// features, predictions, confusion matrix and report.
pub fn persist(art: &RunArtifacts, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(dir, "config.toml", art.config.to_toml()?)?;
    write(dir, "graph.txt", art.graph.to_edge_list())?;
    art.m0.save(&dir.join("m0.ckpt"))?;
    art.m1.save(&dir.join("m1.ckpt"))?;
    write(dir, "m0_loss.csv", nnet::loss_history_csv(&art.m0_history))?;
    write(dir, "m1_loss.csv", nnet::loss_history_csv(&art.m1_history))?;
    write(dir, "subset_audit.csv", audit_csv(&art.audit))?;
    write(dir, "fused_features.csv", features_csv(&art.unlabeled.ids(), &art.unlabeled_features))?;
    let mut preds = String::from("id,pred\n");
    for (id, p) in art.unlabeled.ids().iter().zip(&art.predictions) {
        let _ = writeln!(preds, "{id},{}", p + 1);
    }
    write(dir, "predictions.csv", preds)?;
    write(dir, "confusion.csv", art.report.confusion.to_csv())?;
    write(dir, "metrics_long.csv", eval::long_csv(std::slice::from_ref(&art.report)))?;
    write(dir, "timings.json", serde_json::to_string_pretty(&art.timings)? + "\n")?;
    eval::write_report(&art.report, &dir.join("report.json"))?;
    Ok(())
}
