//! Dataset ingestion, condition labelling, open-set splits, normalization
//! and synthetic fixtures.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The seventeen monitored variables, in the canonical order used as graph
/// nodes.
pub const SELECTED_VARIABLES: [&str; 17] = [
    "GT shaft torque",
    "GT speed",
    "Shaft torque stbd",
    "HP turbine exit temperature",
    "Generator of gas speed",
    "Fuel flow",
    "ABB TIC control signal",
    "GT compressor outlet air pressure",
    "CGT compressor outlet air temperature",
    "External pressure",
    "HP turbine exit pressure",
    "TCS TIC control signal",
    "Average controllable pitch propeller thrust",
    "Average shaft rpm",
    "Average thrust coefficient",
    "Average propeller rps",
    "Average propeller torque",
];

/// Raw measurements that are dropped because they are linearly related to
/// the selected set.
pub const EXTRA_RAW_VARIABLES: [&str; 8] = [
    "Lever position",
    "Ship speed",
    "Shaft torque port",
    "Shaft rpm port",
    "Shaft rpm stbd",
    "Propeller thrust port",
    "Propeller thrust stbd",
    "GT compressor inlet air temperature",
];

pub const RAW_SENSOR_COUNT: usize = 25;

/// Operating condition of the propulsion plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    Normal,
    /// Propeller decay.
    Fault1,
    /// Hull decay.
    Fault2,
    /// Gas turbine compressor decay.
    Fault3,
    /// Gas turbine decay.
    Fault4,
}

impl Condition {
    pub const ALL: [Condition; 5] = [
        Condition::Normal,
        Condition::Fault1,
        Condition::Fault2,
        Condition::Fault3,
        Condition::Fault4,
    ];

    /// Integer code used in prepared files and split configuration:
    /// Normal = 0, Fault k = k.
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    fn ranges(self) -> [Interval; 4] {
        let kkt = Interval::closed(0.95, 1.0);
        let kh = Interval::closed(1.0, 1.1);
        let kkc = Interval::closed(0.98, 1.0);
        let kmt = Interval::closed(0.99, 1.0);
        match self {
            Condition::Normal => [kkt, kh, kkc, kmt],
            Condition::Fault1 => [Interval::right_open(0.9, 0.95), kh, kkc, kmt],
            Condition::Fault2 => [kkt, Interval::left_open(1.1, 1.2), kkc, kmt],
            Condition::Fault3 => [kkt, kh, Interval::right_open(0.95, 0.98), kmt],
            Condition::Fault4 => [kkt, kh, kkc, Interval::closed(0.975, 0.99)],
        }
    }

    /// Condition whose coefficient box contains `c`. Checked in table order,
    /// so a value on an endpoint closed on both sides goes to the earlier row.
    pub fn classify(c: &DecayCoefficients) -> Option<Condition> {
        let values = [c.kkt, c.kh, c.kkc, c.kmt];
        Self::ALL.into_iter().find(|cond| {
            cond.ranges()
                .iter()
                .zip(values)
                .all(|(range, v)| range.contains(v))
        })
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Normal => write!(f, "Normal"),
            Condition::Fault1 => write!(f, "F1"),
            Condition::Fault2 => write!(f, "F2"),
            Condition::Fault3 => write!(f, "F3"),
            Condition::Fault4 => write!(f, "F4"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    lo: f64,
    hi: f64,
    lo_closed: bool,
    hi_closed: bool,
}

impl Interval {
    fn closed(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: true }
    }
    fn right_open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: false }
    }
    fn left_open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: false, hi_closed: true }
    }
    fn contains(&self, v: f64) -> bool {
        let above = if self.lo_closed { v >= self.lo } else { v > self.lo };
        let below = if self.hi_closed { v <= self.hi } else { v < self.hi };
        above && below
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCoefficients {
    pub kkt: f64,
    pub kh: f64,
    pub kkc: f64,
    pub kmt: f64,
}

impl DecayCoefficients {
    pub fn nominal() -> Self {
        Self { kkt: 0.975, kh: 1.05, kkc: 0.99, kmt: 0.995 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub speed_index: u8,
    pub coefficients: DecayCoefficients,
    pub sensors: Vec<f64>,
}

/// Column mapping for the raw plant CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schema {
    pub speed_column: String,
    /// Raw speed values mapped to indices 1..=9 by position. Empty means the
    /// column already holds the index.
    pub speed_levels: Vec<f64>,
    pub kkt_column: String,
    pub kh_column: String,
    pub kkc_column: String,
    pub kmt_column: String,
    pub sensor_columns: Vec<String>,
    pub selected: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        let sensor_columns = SELECTED_VARIABLES
            .iter()
            .chain(EXTRA_RAW_VARIABLES.iter())
            .map(|s| s.to_string())
            .collect();
        Self {
            speed_column: "speed".into(),
            speed_levels: Vec::new(),
            kkt_column: "kKt".into(),
            kh_column: "kH".into(),
            kkc_column: "kKc".into(),
            kmt_column: "kMt".into(),
            sensor_columns,
            selected: SELECTED_VARIABLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Schema {
    fn speed_index(&self, raw: f64, row: usize) -> Result<u8> {
        let bad = |message: String| Error::Malformed {
            row,
            column: self.speed_column.clone(),
            message,
        };
        if self.speed_levels.is_empty() {
            let rounded = raw.round();
            if (raw - rounded).abs() > 1e-9 || !(1.0..=9.0).contains(&rounded) {
                return Err(bad(format!("speed index {raw} not an integer in 1..=9")));
            }
            Ok(rounded as u8)
        } else {
            self.speed_levels
                .iter()
                .position(|level| (level - raw).abs() <= 1e-6 * level.abs().max(1.0))
                .map(|p| (p + 1) as u8)
                .ok_or_else(|| bad(format!("speed value {raw} not among configured levels")))
        }
    }

    /// Positions of the selected variables inside `sensor_columns`.
    pub fn selection_indices(&self) -> Result<Vec<usize>> {
        self.selected
            .iter()
            .map(|name| {
                self.sensor_columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::Schema(format!("variable '{name}' is not mapped to a column")))
            })
            .collect()
    }
}

/// Reads the raw plant CSV. Rows come back in file order.
pub fn load_raw(path: &Path, schema: &Schema) -> Result<Vec<RawRecord>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::Schema("file has no header".into()));
    }
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let column = |name: &str| -> Result<usize> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    if schema.sensor_columns.len() != RAW_SENSOR_COUNT {
        return Err(Error::Schema(format!(
            "schema lists {} sensor columns, expected {RAW_SENSOR_COUNT}",
            schema.sensor_columns.len()
        )));
    }
    let speed_col = column(&schema.speed_column)?;
    let coef_cols = [
        column(&schema.kkt_column)?,
        column(&schema.kh_column)?,
        column(&schema.kkc_column)?,
        column(&schema.kmt_column)?,
    ];
    let sensor_cols = schema
        .sensor_columns
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        if row.len() != headers.len() {
            return Err(Error::Malformed {
                row: row_no,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
        }
        let cell = |col: usize| -> Result<f64> {
            let text = &row[col];
            let v: f64 = text.parse().map_err(|_| Error::Malformed {
                row: row_no,
                column: headers[col].to_string(),
                message: format!("'{text}' is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Malformed {
                    row: row_no,
                    column: headers[col].to_string(),
                    message: "value is not finite".into(),
                });
            }
            Ok(v)
        };
        let speed_index = schema.speed_index(cell(speed_col)?, row_no)?;
        let coefficients = DecayCoefficients {
            kkt: cell(coef_cols[0])?,
            kh: cell(coef_cols[1])?,
            kkc: cell(coef_cols[2])?,
            kmt: cell(coef_cols[3])?,
        };
        let sensors = sensor_cols.iter().map(|&c| cell(c)).collect::<Result<Vec<_>>>()?;
        records.push(RawRecord { speed_index, coefficients, sensors });
    }
    Ok(records)
}

/// Tags each record with its Table-style condition, or `None` when the
/// coefficients fall outside every condition box.
pub fn label_conditions(records: Vec<RawRecord>) -> Vec<(RawRecord, Option<Condition>)> {
    records
        .into_iter()
        .map(|r| {
            let c = Condition::classify(&r.coefficients);
            (r, c)
        })
        .collect()
}

/// Projects a raw record onto the selected variables in canonical order.
pub fn select_variables(record: &RawRecord, schema: &Schema) -> Result<Vec<f64>> {
    let idx = schema.selection_indices()?;
    project(record, &idx)
}

fn project(record: &RawRecord, idx: &[usize]) -> Result<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            record.sensors.get(i).copied().ok_or_else(|| {
                Error::Shape(format!("record has {} sensors, index {i} requested", record.sensors.len()))
            })
        })
        .collect()
}

/// Raw rows → labeled samples (label = condition code). Unassigned rows are
/// dropped and counted.
pub fn prepare_samples(records: Vec<RawRecord>, schema: &Schema) -> Result<(Vec<Sample>, usize)> {
    let idx = schema.selection_indices()?;
    let mut samples = Vec::with_capacity(records.len());
    let mut unassigned = 0;
    for (record, cond) in label_conditions(records) {
        match cond {
            Some(c) => {
                let x = project(&record, &idx)?;
                samples.push(Sample {
                    id: samples.len(),
                    x,
                    label: Some(c.code()),
                    speed: record.speed_index,
                });
            }
            None => unassigned += 1,
        }
    }
    Ok((samples, unassigned))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Stable identity, preserved through splits and subsets.
    pub id: usize,
    pub x: Vec<f64>,
    pub label: Option<usize>,
    pub speed: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Labeled training set.
    Labeled,
    /// Unlabeled test set.
    Unlabeled,
    /// Test samples rejected by the statistical rule.
    Pseudo,
    /// Rejected samples that survived the neighbour-consistency filter.
    Reliable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub role: Role,
    /// Number of known classes.
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, role: Role, class_count: usize) -> Self {
        Self { samples, role, class_count }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.x.len())
    }

    /// Number of samples per label, indexed 0..=class_count.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count + 1];
        for s in &self.samples {
            if let Some(l) = s.label {
                if l < counts.len() {
                    counts[l] += 1;
                }
            }
        }
        counts
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn features(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.x.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    /// Source label codes of the known classes; they become classes 0..K.
    pub known_classes: Vec<usize>,
    /// Source label code of the held-out class; it becomes class K.
    pub unknown_class: usize,
    /// Restrict to one speed index. `None` keeps every speed.
    pub speed: Option<u8>,
    pub per_class: usize,
    pub train_frac: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Split {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    /// Ground-truth class of each unlabeled sample (K = unknown), aligned
    /// with `unlabeled.samples`. Only evaluation reads it.
    pub truth: Vec<usize>,
}

/// Builds the open-set split: a labeled training set of known classes and an
/// unlabeled test set mixing held-out known samples with unknown-class
/// samples.
pub fn build_split(samples: &[Sample], cfg: &SplitConfig) -> Result<Split> {
    if !(cfg.train_frac > 0.0 && cfg.train_frac < 1.0) {
        return Err(Error::Precondition(format!(
            "train_frac must lie strictly between 0 and 1, got {}",
            cfg.train_frac
        )));
    }
    if cfg.known_classes.is_empty() {
        return Err(Error::Precondition("no known classes configured".into()));
    }
    if cfg.known_classes.contains(&cfg.unknown_class) {
        return Err(Error::Precondition(format!(
            "unknown class {} is also listed as known",
            cfg.unknown_class
        )));
    }
    let mut seen = cfg.known_classes.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != cfg.known_classes.len() {
        return Err(Error::Precondition("duplicate known class".into()));
    }
    let n_train = (cfg.per_class as f64 * cfg.train_frac).round() as usize;
    if n_train == 0 || n_train >= cfg.per_class {
        return Err(Error::Precondition(format!(
            "per_class {} with train_frac {} leaves an empty train or test part",
            cfg.per_class, cfg.train_frac
        )));
    }

    let k = cfg.known_classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labeled = Vec::new();
    let mut unlabeled: Vec<(Sample, usize)> = Vec::new();
    let sources = cfg
        .known_classes
        .iter()
        .copied()
        .enumerate()
        .chain(std::iter::once((k, cfg.unknown_class)));
    for (class, code) in sources {
        let mut pool: Vec<&Sample> = samples
            .iter()
            .filter(|s| s.label == Some(code) && cfg.speed.is_none_or(|sp| s.speed == sp))
            .collect();
        if pool.len() < cfg.per_class {
            return Err(Error::Precondition(format!(
                "class {code} has {} samples, {} required",
                pool.len(),
                cfg.per_class
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(cfg.per_class);
        let (train, test) = pool.split_at(n_train);
        if class < k {
            labeled.extend(train.iter().map(|s| Sample { label: Some(class), ..(*s).clone() }));
        }
        unlabeled.extend(test.iter().map(|s| (Sample { label: None, ..(*s).clone() }, class)));
    }
    unlabeled.shuffle(&mut rng);
    let truth = unlabeled.iter().map(|(_, c)| *c).collect();
    let unlabeled = unlabeled.into_iter().map(|(s, _)| s).collect();
    Ok(Split {
        labeled: Dataset::new(labeled, Role::Labeled, k),
        unlabeled: Dataset::new(unlabeled, Role::Unlabeled, k),
        truth,
    })
}

/// Per-variable standardization frozen on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Population mean and standard deviation of each variable. Columns with
    /// zero variance get std 1.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let rows: Vec<&[f64]> = data.samples.iter().map(|s| s.x.as_slice()).collect();
        Self::fit_rows(&rows)
    }

    pub fn fit_rows(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Empty("cannot fit a normalizer".into()))?;
        let m = first.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("rows of unequal length".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; m];
        for r in rows {
            for (acc, v) in mean.iter_mut().zip(r.iter()) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; m];
        for r in rows {
            for ((acc, v), mu) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 && s.is_finite() { s } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (mu, sd))| (v - mu) / sd)
            .collect()
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let m = self.mean.len();
        let samples = data
            .samples
            .iter()
            .map(|s| {
                if s.x.len() != m {
                    return Err(Error::Shape(format!(
                        "sample {} has {} variables, normalizer expects {m}",
                        s.id,
                        s.x.len()
                    )));
                }
                Ok(Sample { x: self.transform(&s.x), ..s.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(samples, data.role, data.class_count))
    }
}

/// Isotropic Gaussian class clouds for tests and demos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub means: Vec<Vec<f64>>,
    /// Standard deviation of every coordinate.
    pub cov_scale: f64,
    pub per_class: usize,
    pub seed: u64,
    #[serde(default = "default_speed")]
    pub speed: u8,
}

fn default_speed() -> u8 {
    1
}

impl SyntheticSpec {
    /// `classes` clouds in `dim` dimensions; class c is centred at
    /// `separation` along axis c (cycling through axes and sign when there
    /// are more classes than axes).
    pub fn separated(classes: usize, dim: usize, separation: f64, per_class: usize, seed: u64) -> Self {
        let means = (0..classes)
            .map(|c| {
                let mut mu = vec![0.0; dim];
                let axis = c % dim.max(1);
                let sign = if (c / dim.max(1)).is_multiple_of(2) { 1.0 } else { -1.0 };
                if dim > 0 {
                    mu[axis] = sign * separation;
                }
                mu
            })
            .collect();
        Self { means, cov_scale: 1.0, per_class, seed, speed: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.means.first() else {
            return Err(Error::Config("synthetic spec has no classes".into()));
        };
        if self.means.iter().any(|m| m.len() != first.len()) {
            return Err(Error::Config("synthetic class means differ in dimension".into()));
        }
        if !(self.cov_scale >= 0.0 && self.cov_scale.is_finite()) {
            return Err(Error::Config("synthetic covariance scale must be finite and non-negative".into()));
        }
        for i in 0..self.means.len() {
            for j in i + 1..self.means.len() {
                if self.means[i] == self.means[j] {
                    return Err(Error::Config(format!("synthetic classes {} and {} share a mean", i + 1, j + 1)));
                }
            }
        }
        Ok(())
    }
}

/// Draws `per_class` samples around each class mean. Labels run 1..=classes
/// so they line up with fault condition codes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(spec.means.len() * spec.per_class);
    for (c, mu) in spec.means.iter().enumerate() {
        for _ in 0..spec.per_class {
            let x = mu
                .iter()
                .map(|m| m + spec.cov_scale * noise.sample(&mut rng))
                .collect();
            out.push(Sample { id: out.len(), x, label: Some(c + 1), speed: spec.speed });
        }
    }
    Ok(out)
}

/// Writes labeled samples as `id,speed,label,x1..xm`.
pub fn write_prepared(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = samples.first().map_or(0, |s| s.x.len());
    let mut header = vec!["id".to_string(), "speed".into(), "label".into()];
    header.extend((1..=m).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.id.to_string(),
            s.speed.to_string(),
            s.label.map_or(String::new(), |l| l.to_string()),
        ];
        row.extend(s.x.iter().map(|v| format!("{v:?}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_prepared(path: &Path) -> Result<Vec<Sample>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 4 || &headers[0] != "id" || &headers[1] != "speed" || &headers[2] != "label" {
        return Err(Error::Schema("prepared file must start with id,speed,label".into()));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let bad = |col: usize| Error::Malformed {
            row: i + 1,
            column: headers[col].to_string(),
            message: format!("cannot parse '{}'", &row[col]),
        };
        let id = row[0].parse().map_err(|_| bad(0))?;
        let speed = row[1].parse().map_err(|_| bad(1))?;
        let label = if row[2].is_empty() { None } else { Some(row[2].parse().map_err(|_| bad(2))?) };
        let x = (3..row.len())
            .map(|c| row[c].parse::<f64>().map_err(|_| bad(c)))
            .collect::<Result<Vec<_>>>()?;
        out.push(Sample { id, x, label, speed });
    }
    Ok(out)
}
