//! Vintage panels in the age x time layout.
//!
//! A [`PanelGrid`] stores one response value per observed `(age, time)` cell,
//! with ages `0..=A` indexing rows and times `1..=T` indexing columns. The
//! vintage of a cell is `time - age`; vintages `<= 0` originated before the
//! observation window and are legal everywhere in the toolkit.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{EmvError, Result};

/// Vintage index of the cell observed at `age` in calendar period `time`.
#[inline]
pub fn vintage_of(age: u32, time: u32) -> i64 {
    time as i64 - age as i64
}

/// One observed cell in long format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub age: u32,
    pub time: u32,
    pub value: f64,
    pub weight: f64,
}

impl Cell {
    pub fn vintage(&self) -> i64 {
        vintage_of(self.age, self.time)
    }
}

/// Observation array of ages `0..=max_age` by times `1..=max_time`.
///
/// Immutable after construction. Unobserved cells carry `NaN` and weight 0.
#[derive(Debug, Clone)]
pub struct PanelGrid {
    max_age: u32,
    max_time: u32,
    values: Vec<f64>,
    weights: Vec<f64>,
    mask: Vec<bool>,
}

impl PanelGrid {
    /// Build a grid from long-format cells. `A` and `T` are inferred as maxima.
    pub fn from_cells<I: IntoIterator<Item = Cell>>(cells: I) -> Result<Self> {
        let cells: Vec<Cell> = cells.into_iter().collect();
        if cells.is_empty() {
            return Err(EmvError::NoObservations);
        }
        let max_age = cells.iter().map(|c| c.age).max().unwrap_or(0);
        let max_time = cells.iter().map(|c| c.time).max().unwrap_or(1);
        let size = (max_age as usize + 1) * max_time as usize;
        let mut grid = PanelGrid {
            max_age,
            max_time,
            values: vec![f64::NAN; size],
            weights: vec![0.0; size],
            mask: vec![false; size],
        };
        for cell in cells {
            if cell.time < 1 {
                return Err(EmvError::InvalidCell {
                    age: cell.age,
                    time: cell.time,
                    message: "time index must be >= 1".into(),
                });
            }
            if !cell.value.is_finite() {
                return Err(EmvError::InvalidCell {
                    age: cell.age,
                    time: cell.time,
                    message: format!("non-finite value {}", cell.value),
                });
            }
            if !(cell.weight.is_finite() && cell.weight > 0.0) {
                return Err(EmvError::InvalidCell {
                    age: cell.age,
                    time: cell.time,
                    message: format!("weight must be positive, got {}", cell.weight),
                });
            }
            let idx = grid.index(cell.age, cell.time);
            if grid.mask[idx] {
                return Err(EmvError::DuplicateCell {
                    age: cell.age,
                    time: cell.time,
                });
            }
            grid.mask[idx] = true;
            grid.values[idx] = cell.value;
            grid.weights[idx] = cell.weight;
        }
        Ok(grid)
    }

    /// Read a long-format CSV with header `age,time,value[,weight]`.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let header = match records.next() {
            None => return Err(EmvError::NoObservations),
            Some(h) => h?,
        };
        let col = |name: &str| header.iter().position(|h| h.eq_ignore_ascii_case(name));
        let (age_col, time_col, value_col) = match (col("age"), col("time"), col("value")) {
            (Some(a), Some(t), Some(v)) => (a, t, v),
            _ => {
                return Err(EmvError::Parse {
                    row: 1,
                    message: "header must contain age,time,value[,weight]".into(),
                })
            }
        };
        let weight_col = col("weight");

        let mut cells = Vec::new();
        for (i, record) in records.enumerate() {
            let record = record?;
            let row = record.position().map(|p| p.line() as usize).unwrap_or(i + 2);
            if record.iter().all(|f| f.is_empty()) {
                continue;
            }
            let field = |c: usize, name: &str| {
                record.get(c).ok_or_else(|| EmvError::Parse {
                    row,
                    message: format!("missing {name} field"),
                })
            };
            let age = parse_index(field(age_col, "age")?, "age", row)?;
            let time = parse_index(field(time_col, "time")?, "time", row)?;
            let value = parse_real(field(value_col, "value")?, "value", row)?;
            let weight = match weight_col {
                Some(c) => parse_real(field(c, "weight")?, "weight", row)?,
                None => 1.0,
            };
            if time < 1 {
                return Err(EmvError::Parse {
                    row,
                    message: "time must be >= 1".into(),
                });
            }
            cells.push(Cell {
                age,
                time,
                value,
                weight,
            });
        }
        Self::from_cells(cells)
    }

    pub fn from_csv_path<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    /// Write long-format CSV (`age,time,value,weight`), cells in age-major order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["age", "time", "value", "weight"])?;
        for c in self.cells() {
            wtr.write_record([
                c.age.to_string(),
                c.time.to_string(),
                c.value.to_string(),
                c.weight.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PanelRecord::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: PanelRecord = serde_json::from_str(text)?;
        Self::from_cells(rec.cells)
    }

    #[inline]
    fn index(&self, age: u32, time: u32) -> usize {
        age as usize * self.max_time as usize + (time as usize - 1)
    }

    pub fn max_age(&self) -> u32 {
        self.max_age
    }

    pub fn max_time(&self) -> u32 {
        self.max_time
    }

    pub fn is_observed(&self, age: u32, time: u32) -> bool {
        age <= self.max_age && time >= 1 && time <= self.max_time && self.mask[self.index(age, time)]
    }

    pub fn value(&self, age: u32, time: u32) -> Option<f64> {
        self.is_observed(age, time)
            .then(|| self.values[self.index(age, time)])
    }

    pub fn weight(&self, age: u32, time: u32) -> Option<f64> {
        self.is_observed(age, time)
            .then(|| self.weights[self.index(age, time)])
    }

    /// Observed cells in age-major, then time order.
    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..=self.max_age).flat_map(move |age| {
            (1..=self.max_time).filter_map(move |time| {
                let idx = self.index(age, time);
                self.mask[idx].then(|| Cell {
                    age,
                    time,
                    value: self.values[idx],
                    weight: self.weights[idx],
                })
            })
        })
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Distinct vintages present among observed cells.
    pub fn vintages(&self) -> BTreeSet<i64> {
        self.cells().map(|c| c.vintage()).collect()
    }

    /// Apply `g` cellwise. Mask and weights are unchanged.
    pub fn transform(&self, g: &ResponseTransform) -> Result<Self> {
        let mut out = self.clone();
        for age in 0..=self.max_age {
            for time in 1..=self.max_time {
                let idx = self.index(age, time);
                if self.mask[idx] {
                    out.values[idx] = g.apply_at(self.values[idx], age, time)?;
                }
            }
        }
        Ok(out)
    }

    /// Same grid with every cell whose time exceeds `max_time` removed.
    pub fn truncate_time(&self, max_time: u32) -> Result<Self> {
        Self::from_cells(self.cells().filter(|c| c.time <= max_time))
    }

    /// Same mask and weights with the values replaced, in [`cells`](Self::cells) order.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.n_observed() {
            return Err(EmvError::ShapeMismatch(format!(
                "{} values for {} observed cells",
                values.len(),
                self.n_observed()
            )));
        }
        let cells: Vec<Cell> = self
            .cells()
            .zip(values)
            .map(|(c, &value)| Cell { value, ..c })
            .collect();
        Self::from_cells(cells)
    }
}

/// Equality over observed cells, bit-exact on values and weights.
impl PartialEq for PanelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.max_age == other.max_age
            && self.max_time == other.max_time
            && self.mask == other.mask
            && self.cells().zip(other.cells()).all(|(a, b)| {
                a.value.to_bits() == b.value.to_bits() && a.weight.to_bits() == b.weight.to_bits()
            })
    }
}

fn parse_index(text: &str, name: &str, row: usize) -> Result<u32> {
    if let Ok(v) = text.parse::<u32>() {
        return Ok(v);
    }
    match text.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 => Ok(v as u32),
        _ => Err(EmvError::Parse {
            row,
            message: format!("{name} must be a non-negative integer, got {text:?}"),
        }),
    }
}

fn parse_real(text: &str, name: &str, row: usize) -> Result<f64> {
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(EmvError::Parse {
            row,
            message: format!("{name} is not numeric: {text:?}"),
        }),
    }
}

#[derive(Serialize, Deserialize)]
struct PanelRecord {
    max_age: u32,
    max_time: u32,
    cells: Vec<Cell>,
}

impl From<&PanelGrid> for PanelRecord {
    fn from(grid: &PanelGrid) -> Self {
        PanelRecord {
            max_age: grid.max_age,
            max_time: grid.max_time,
            cells: grid.cells().collect(),
        }
    }
}

/// Link applied to the response before additive modelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Identity,
    Log,
    Logit,
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Log => "log",
            TransformKind::Logit => "logit",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = EmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "log" => Ok(TransformKind::Log),
            "logit" => Ok(TransformKind::Logit),
            other => Err(EmvError::InvalidSpec(format!("unknown transform {other:?}"))),
        }
    }
}

/// Response transform `g` with an epsilon guard against `log(0)`/`logit(0|1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseTransform {
    pub kind: TransformKind,
    pub epsilon: f64,
}

impl Default for ResponseTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ResponseTransform {
    pub const DEFAULT_EPSILON: f64 = 1e-9;

    pub fn new(kind: TransformKind) -> Self {
        ResponseTransform {
            kind,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn identity() -> Self {
        Self::new(TransformKind::Identity)
    }

    pub fn log() -> Self {
        Self::new(TransformKind::Log)
    }

    pub fn logit() -> Self {
        Self::new(TransformKind::Logit)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// `g(clip(value))`, or `None` when the value is outside the domain.
    pub fn apply(&self, value: f64) -> Option<f64> {
        let eps = self.epsilon;
        match self.kind {
            TransformKind::Identity => value.is_finite().then_some(value),
            TransformKind::Log => (value > -eps).then(|| value.max(eps).ln()),
            TransformKind::Logit => (value > -eps && value < 1.0 + eps).then(|| {
                let p = value.clamp(eps, 1.0 - eps);
                (p / (1.0 - p)).ln()
            }),
        }
    }

    fn apply_at(&self, value: f64, age: u32, time: u32) -> Result<f64> {
        self.apply(value).ok_or(EmvError::TransformDomain {
            age,
            time,
            transform: self.kind.name(),
            value,
        })
    }

    /// Pointwise inverse (median scale; no retransformation bias correction).
    pub fn inverse(&self, theta: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => theta,
            TransformKind::Log => theta.exp(),
            TransformKind::Logit => 1.0 / (1.0 + (-theta).exp()),
        }
    }
}
