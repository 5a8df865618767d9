//! Tabular data model: feature schema, well records, CSV ingestion,
//! z-score normalization, leave-one-out splitting and the synthetic
//! ground-truth generator used to check the whole pipeline end to end.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::seed;

/// Name of the identifier column in every CSV file.
pub const ID_COLUMN: &str = "id";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema mismatch on column `{column}`: {detail}")]
    SchemaMismatch { column: String, detail: String },
    #[error("cannot parse value {value:?} at row {row}, column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("feature `{0}` has zero variance")]
    DegenerateFeature(String),
    #[error("index {index} out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("training split would be empty")]
    TrainTooSmall,
    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("record `{0}` has no target value")]
    MissingTarget(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Adjustable,
    Fixed,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// The unreachable bound the transformed emulator output is pulled towards.
    pub fn bound(self) -> f64 {
        match self {
            Direction::Minimize => -1.0,
            Direction::Maximize => 1.0,
        }
    }

    /// `true` if `candidate` is strictly better than `reference`.
    pub fn improves(self, candidate: f64, reference: f64) -> bool {
        match self {
            Direction::Minimize => candidate < reference,
            Direction::Maximize => candidate > reference,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Minimize => f.write_str("minimize"),
            Direction::Maximize => f.write_str("maximize"),
        }
    }
}

/// Closed physical range used by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub unit: String,
    #[serde(default)]
    pub integer_valued: bool,
    /// Only consulted by [`generate_synthetic`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<FeatureRange>,
}

impl FeatureSpec {
    pub fn new(name: &str, role: Role, unit: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            role,
            unit: unit.to_string(),
            integer_valued: false,
            range: None,
        }
    }

    pub fn integer(mut self) -> Self {
        self.integer_valued = true;
        self
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some(FeatureRange { lo, hi });
        self
    }
}

#[derive(Deserialize)]
struct RawSchema {
    features: Vec<FeatureSpec>,
    #[serde(default = "default_direction")]
    objective_direction: Direction,
}

fn default_direction() -> Direction {
    Direction::Minimize
}

/// Ordered feature specs plus the optimization direction.
///
/// Input features are every non-target spec, in schema order; that order is
/// the column order of every normalized vector in the crate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct FeatureSchema {
    features: Vec<FeatureSpec>,
    objective_direction: Direction,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = DatasetError;

    fn try_from(raw: RawSchema) -> Result<Self> {
        FeatureSchema::new(raw.features, raw.objective_direction)
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>, objective_direction: Direction) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.is_empty() || f.name == ID_COLUMN {
                return Err(DatasetError::InvalidSchema(format!(
                    "feature name {:?} is reserved or empty",
                    f.name
                )));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DatasetError::InvalidSchema(format!(
                    "duplicate feature name `{}`",
                    f.name
                )));
            }
            if let Some(r) = f.range {
                if !(r.lo.is_finite() && r.hi.is_finite() && r.lo < r.hi) {
                    return Err(DatasetError::InvalidSchema(format!(
                        "feature `{}` has an empty or non-finite range",
                        f.name
                    )));
                }
            }
        }
        let targets = features.iter().filter(|f| f.role == Role::Target).count();
        if targets != 1 {
            return Err(DatasetError::InvalidSchema(format!(
                "expected exactly one target feature, found {targets}"
            )));
        }
        if features.len() < 2 {
            return Err(DatasetError::InvalidSchema(
                "schema needs at least one input feature".into(),
            ));
        }
        Ok(FeatureSchema {
            features,
            objective_direction,
        })
    }

    /// The 12-input shale gas layout: eight operational parameters that may be
    /// changed and four geological/production parameters that may not.
    pub fn shale_gas() -> Self {
        use Role::*;
        let features = vec![
            FeatureSpec::new("acid_fluid", Adjustable, "m3").with_range(10.0, 60.0),
            FeatureSpec::new("guar_gum", Adjustable, "m3").with_range(50.0, 400.0),
            FeatureSpec::new("slick_water", Adjustable, "m3").with_range(20_000.0, 60_000.0),
            FeatureSpec::new("quartz_sand", Adjustable, "t").with_range(200.0, 1_500.0),
            FeatureSpec::new("ceramsite", Adjustable, "t").with_range(500.0, 2_500.0),
            FeatureSpec::new("fracturing_stages", Adjustable, "count")
                .integer()
                .with_range(10.0, 40.0),
            FeatureSpec::new("horizontal_length", Adjustable, "m").with_range(1_000.0, 2_500.0),
            FeatureSpec::new("wells_on_platform", Adjustable, "count")
                .integer()
                .with_range(2.0, 8.0),
            FeatureSpec::new("reservoir_thickness", Fixed, "m").with_range(2.0, 10.0),
            FeatureSpec::new("pressure_coefficient", Fixed, "").with_range(1.2, 2.1),
            FeatureSpec::new("depth", Fixed, "m").with_range(2_300.0, 4_200.0),
            FeatureSpec::new("first_year_gas", Fixed, "m3/day").with_range(20_000.0, 200_000.0),
            FeatureSpec::new("average_cost", Target, "USD/m3"),
        ];
        FeatureSchema::new(features, Direction::Minimize).expect("built-in schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    /// Hex SHA-256 of the compact JSON form; ties a model artifact to a schema.
    pub fn fingerprint(&self) -> String {
        let compact = serde_json::to_string(self).expect("schema serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn direction(&self) -> Direction {
        self.objective_direction
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.objective_direction = direction;
        self
    }

    pub fn target(&self) -> &FeatureSpec {
        self.features
            .iter()
            .find(|f| f.role == Role::Target)
            .expect("validated at construction")
    }

    pub fn inputs(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter().filter(|f| f.role != Role::Target)
    }

    pub fn input_names(&self) -> Vec<String> {
        self.inputs().map(|f| f.name.clone()).collect()
    }

    pub fn n_inputs(&self) -> usize {
        self.features.len() - 1
    }

    /// Positions (in input order) of features with the given role.
    pub fn input_indices(&self, role: Role) -> Vec<usize> {
        self.inputs()
            .enumerate()
            .filter(|(_, f)| f.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn adjustable_indices(&self) -> Vec<usize> {
        self.input_indices(Role::Adjustable)
    }

    pub fn fixed_indices(&self) -> Vec<usize> {
        self.input_indices(Role::Fixed)
    }

    /// Optimization needs something to move and something to hold.
    pub fn validate_for_optimization(&self) -> Result<()> {
        if self.adjustable_indices().is_empty() {
            return Err(DatasetError::InvalidSchema(
                "optimization needs at least one adjustable feature".into(),
            ));
        }
        if self.fixed_indices().is_empty() {
            return Err(DatasetError::InvalidSchema(
                "optimization needs at least one fixed feature".into(),
            ));
        }
        Ok(())
    }
}

/// One well: input values in physical units (schema input order) and an
/// optional target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellRecord {
    pub id: String,
    pub inputs: Vec<f64>,
    pub target: Option<f64>,
}

impl WellRecord {
    pub fn new(id: impl Into<String>, inputs: Vec<f64>, target: Option<f64>) -> Result<Self> {
        let id = id.into();
        if inputs.iter().any(|v| !v.is_finite()) || target.is_some_and(|t| !t.is_finite()) {
            return Err(DatasetError::InvalidRecord(format!(
                "record `{id}` has non-finite values"
            )));
        }
        Ok(WellRecord { id, inputs, target })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<WellRecord>,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, records: Vec<WellRecord>) -> Result<Self> {
        let width = schema.n_inputs();
        let mut ids = HashSet::new();
        for r in &records {
            if r.inputs.len() != width {
                return Err(DatasetError::InvalidRecord(format!(
                    "record `{}` has {} inputs, schema has {width}",
                    r.id,
                    r.inputs.len()
                )));
            }
            if !ids.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Dataset { schema, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn find(&self, id: &str) -> Option<&WellRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Targets of every record; errors on the first unscored record.
    pub fn targets(&self) -> Result<Vec<f64>> {
        self.records
            .iter()
            .map(|r| r.target.ok_or_else(|| DatasetError::MissingTarget(r.id.clone())))
            .collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(ID_COLUMN);
        for f in self.schema.features() {
            out.push(',');
            out.push_str(&f.name);
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.id);
            let mut inputs = r.inputs.iter();
            for f in self.schema.features() {
                out.push(',');
                if f.role == Role::Target {
                    if let Some(t) = r.target {
                        out.push_str(&t.to_string());
                    }
                } else {
                    out.push_str(&inputs.next().expect("width checked").to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

/// Loads a dataset whose header must contain `id` and every schema column.
pub fn load_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, schema, true)
}

/// Like [`load_csv`], but the target column and target cells may be absent.
pub fn load_csv_unscored(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?, schema, false)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: &FeatureSchema,
    require_target: bool,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DatasetError::SchemaMismatch {
                column: h.clone(),
                detail: "column appears twice in header".into(),
            });
        }
        if h != ID_COLUMN && !schema.features().iter().any(|f| &f.name == h) {
            return Err(DatasetError::SchemaMismatch {
                column: h.clone(),
                detail: "column is not in the schema".into(),
            });
        }
    }
    let position = |name: &str| header.iter().position(|h| h == name);
    let id_col = position(ID_COLUMN).ok_or_else(|| DatasetError::SchemaMismatch {
        column: ID_COLUMN.into(),
        detail: "missing identifier column".into(),
    })?;
    let mut input_cols = Vec::with_capacity(schema.n_inputs());
    for f in schema.inputs() {
        input_cols.push(position(&f.name).ok_or_else(|| DatasetError::SchemaMismatch {
            column: f.name.clone(),
            detail: "missing column".into(),
        })?);
    }
    let target_name = &schema.target().name;
    let target_col = position(target_name);
    if require_target && target_col.is_none() {
        return Err(DatasetError::SchemaMismatch {
            column: target_name.clone(),
            detail: "missing target column".into(),
        });
    }

    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let row_no = i + 1;
        let parse = |col: usize| -> Result<f64> {
            let cell = row.get(col).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(DatasetError::Parse {
                    row: row_no,
                    column: header[col].clone(),
                    value: cell.to_string(),
                }),
            }
        };
        let id = row.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(DatasetError::Parse {
                row: row_no,
                column: ID_COLUMN.into(),
                value: id,
            });
        }
        if !ids.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        let inputs = input_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?;
        let target = match target_col {
            Some(c) if !require_target && row.get(c).unwrap_or("").is_empty() => None,
            Some(c) => Some(parse(c)?),
            None => None,
        };
        records.push(WellRecord { id, inputs, target });
    }
    Dataset::new(schema.clone(), records)
}

/// Per-feature z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl NormStats {
    pub fn identity(n_inputs: usize) -> Self {
        NormStats {
            input_mean: vec![0.0; n_inputs],
            input_std: vec![1.0; n_inputs],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.input_mean.len()
    }

    pub fn normalize_inputs(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize_inputs(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_input(&self, index: usize, v: f64) -> f64 {
        (v - self.input_mean[index]) / self.input_std[index]
    }

    pub fn denormalize_input(&self, index: usize, z: f64) -> f64 {
        z * self.input_std[index] + self.input_mean[index]
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

#[derive(Default, Clone, Copy)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.n;
        self.m2 += delta * (x - self.mean);
    }

    fn population_std(&self) -> f64 {
        (self.m2 / self.n).max(0.0).sqrt()
    }
}

fn is_degenerate(mean: f64, std: f64) -> bool {
    !(std.is_finite() && std > f64::EPSILON * mean.abs().max(f64::MIN_POSITIVE))
}

/// Fits input and target statistics over every record.
///
/// A zero-variance input is an error. A constant target is centred but kept
/// at unit scale so that downstream R² can report the degenerate case.
pub fn fit_normalizer(data: &Dataset) -> Result<NormStats> {
    if data.len() < 2 {
        return Err(DatasetError::TooFewRecords {
            needed: 2,
            got: data.len(),
        });
    }
    let targets = data.targets()?;
    let width = data.schema.n_inputs();
    let mut acc = vec![Welford::default(); width];
    for r in &data.records {
        for (a, v) in acc.iter_mut().zip(&r.inputs) {
            a.push(*v);
        }
    }
    let names = data.schema.input_names();
    let mut input_mean = Vec::with_capacity(width);
    let mut input_std = Vec::with_capacity(width);
    for (a, name) in acc.iter().zip(names) {
        let std = a.population_std();
        if is_degenerate(a.mean, std) {
            return Err(DatasetError::DegenerateFeature(name));
        }
        input_mean.push(a.mean);
        input_std.push(std);
    }
    let mut t = Welford::default();
    targets.iter().for_each(|y| t.push(*y));
    let target_std = t.population_std();
    Ok(NormStats {
        input_mean,
        input_std,
        target_mean: t.mean,
        target_std: if is_degenerate(t.mean, target_std) {
            1.0
        } else {
            target_std
        },
    })
}

/// Leave-one-out split: everything but `index` for training, `index` held out.
pub fn split_loo(data: &Dataset, index: usize) -> Result<(Dataset, WellRecord)> {
    if index >= data.len() {
        return Err(DatasetError::IndexOutOfRange {
            index,
            len: data.len(),
        });
    }
    if data.len() < 2 {
        return Err(DatasetError::TrainTooSmall);
    }
    let holdout = data.records[index].clone();
    let records = data
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != index)
        .map(|(_, r)| r.clone())
        .collect();
    Ok((
        Dataset {
            schema: data.schema.clone(),
            records,
        },
        holdout,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub a: usize,
    pub b: usize,
    pub coef: f64,
}

/// `-amplitude * (1 - exp(-rate * u))` on one unit-scaled feature: a benefit
/// with diminishing marginal return, offset by that feature's linear cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturating {
    pub feature: usize,
    pub amplitude: f64,
    pub rate: f64,
}

/// Analytic cost over unit-scaled inputs `u = (x - lo) / (hi - lo)`:
/// `intercept + Σ linear·u + Σ coef·u_a·u_b + saturating(u_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub intercept: f64,
    pub linear: Vec<f64>,
    pub interactions: Vec<Interaction>,
    pub saturating: Option<Saturating>,
    pub ranges: Vec<FeatureRange>,
    pub noise_std: f64,
    pub seed: u64,
}

const SATURATION_RATE: f64 = 5.0;
/// Unit-scale position of the cost minimum along the saturating feature.
const SATURATION_OPTIMUM: f64 = 0.4;
const SATURATING_LINEAR: f64 = 0.3;

impl SyntheticGroundTruth {
    /// Draws a cost function for `schema` from `seed`.
    ///
    /// The saturating term sits on the first integer-valued adjustable
    /// feature (a stage count), or the first adjustable one otherwise. The
    /// intercept is chosen so the cost is at least 0.5 on the whole box.
    pub fn for_schema(schema: &FeatureSchema, noise_std: f64, seed: u64) -> Result<Self> {
        if !(noise_std.is_finite() && noise_std >= 0.0) {
            return Err(DatasetError::InvalidArgument(format!(
                "noise std must be finite and non-negative, got {noise_std}"
            )));
        }
        let n = schema.n_inputs();
        let mut rng = seed::rng_for(seed, 0xC0EF);
        let ranges: Vec<FeatureRange> = schema
            .inputs()
            .map(|f| {
                f.range.unwrap_or(if f.integer_valued {
                    FeatureRange { lo: 0.0, hi: 10.0 }
                } else {
                    FeatureRange { lo: 0.0, hi: 1.0 }
                })
            })
            .collect();
        let mut linear: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();

        let mut interactions = Vec::new();
        if n >= 2 {
            for _ in 0..n.min(4) {
                let a = rng.random_range(0..n);
                let mut b = rng.random_range(0..n - 1);
                if b >= a {
                    b += 1;
                }
                interactions.push(Interaction {
                    a: a.min(b),
                    b: a.max(b),
                    coef: rng.random_range(-0.15..0.15),
                });
            }
        }

        let adjustable = schema.adjustable_indices();
        let stage = adjustable
            .iter()
            .copied()
            .find(|&i| schema.inputs().nth(i).is_some_and(|f| f.integer_valued))
            .or_else(|| adjustable.first().copied());
        let saturating = stage.map(|feature| {
            linear[feature] = SATURATING_LINEAR;
            Saturating {
                feature,
                amplitude: SATURATING_LINEAR * (SATURATION_RATE * SATURATION_OPTIMUM).exp()
                    / SATURATION_RATE,
                rate: SATURATION_RATE,
            }
        });

        let lowest = linear.iter().map(|c| c.min(0.0)).sum::<f64>()
            + interactions.iter().map(|i| i.coef.min(0.0)).sum::<f64>()
            - saturating.map_or(0.0, |s| s.amplitude);
        Ok(SyntheticGroundTruth {
            intercept: 0.5 - lowest,
            linear,
            interactions,
            saturating,
            ranges,
            noise_std,
            seed,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.linear.len()
    }

    pub fn unit_scale(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.ranges)
            .map(|(v, r)| (v - r.lo) / (r.hi - r.lo))
            .collect()
    }

    /// Noiseless cost at physical inputs `x`.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        let u = self.unit_scale(x);
        let mut y = self.intercept;
        for (c, v) in self.linear.iter().zip(&u) {
            y += c * v;
        }
        for i in &self.interactions {
            y += i.coef * u[i.a] * u[i.b];
        }
        if let Some(s) = self.saturating {
            y -= s.amplitude * (1.0 - (-s.rate * u[s.feature]).exp());
        }
        y
    }

    /// Physical value of the saturating feature at which the cost is minimal
    /// along that feature, if it has no interactions.
    pub fn saturating_optimum(&self) -> Option<(usize, f64)> {
        self.saturating.map(|s| {
            let u = (s.amplitude * s.rate / self.linear[s.feature]).ln() / s.rate;
            let r = self.ranges[s.feature];
            (s.feature, r.lo + u * (r.hi - r.lo))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

/// Draws `n_wells` records uniformly over each feature's range (integers for
/// integer-valued features) and scores them with `truth` plus Gaussian noise.
pub fn generate_synthetic(
    n_wells: usize,
    schema: &FeatureSchema,
    truth: &SyntheticGroundTruth,
) -> Result<Dataset> {
    if n_wells == 0 {
        return Err(DatasetError::InvalidArgument("n_wells must be at least 1".into()));
    }
    if truth.n_inputs() != schema.n_inputs() || truth.ranges.len() != schema.n_inputs() {
        return Err(DatasetError::InvalidArgument(format!(
            "ground truth covers {} inputs, schema has {}",
            truth.n_inputs(),
            schema.n_inputs()
        )));
    }
    let specs: Vec<&FeatureSpec> = schema.inputs().collect();
    let mut feature_rng = seed::rng_for(truth.seed, 0xFEA7);
    let mut noise_rng = seed::rng_for(truth.seed, 0x2015E);
    let noise = Normal::new(0.0, truth.noise_std.max(0.0))
        .map_err(|e| DatasetError::InvalidArgument(e.to_string()))?;
    let width = n_wells.to_string().len().max(4);

    let mut records = Vec::with_capacity(n_wells);
    for i in 0..n_wells {
        let inputs: Vec<f64> = specs
            .iter()
            .zip(&truth.ranges)
            .map(|(spec, r)| {
                if spec.integer_valued {
                    let lo = r.lo.ceil() as i64;
                    let hi = r.hi.floor() as i64;
                    feature_rng.random_range(lo..=hi.max(lo)) as f64
                } else {
                    feature_rng.random_range(r.lo..=r.hi)
                }
            })
            .collect();
        let clean = truth.evaluate(&inputs);
        let target = if truth.noise_std > 0.0 {
            clean + noise.sample(&mut noise_rng)
        } else {
            clean
        };
        records.push(WellRecord {
            id: format!("W{:0width$}", i + 1),
            inputs,
            target: Some(target),
        });
    }
    Dataset::new(schema.clone(), records)
}
