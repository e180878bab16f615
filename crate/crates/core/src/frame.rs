//! Longitudinal population frame: unit × period rows carrying auxiliaries, an
//! optional response and a sample flag.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One population element observed (or not) in one period.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub domain: String,
    pub unit: String,
    /// 1-based period index.
    pub period: u32,
    /// Response; `None` when not observed.
    pub y: Option<f64>,
    pub x: Vec<f64>,
    pub in_sample: bool,
}

/// Column-name mapping for CSV ingestion.
///
/// When `aux` is empty every column not claimed by another role is taken as
/// an auxiliary, in header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub domain: String,
    pub unit: String,
    pub period: String,
    pub in_sample: String,
    pub y: String,
    pub aux: Vec<String>,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            domain: "domain".into(),
            unit: "unit".into(),
            period: "period".into(),
            in_sample: "in_sample".into(),
            y: "y".into(),
            aux: Vec::new(),
        }
    }
}

/// Domain selector for a subset: one domain or every domain.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum DomainFilter {
    All,
    Id(String),
}

impl From<Option<String>> for DomainFilter {
    fn from(value: Option<String>) -> Self {
        match value {
            None => DomainFilter::All,
            Some(s) if s == "*" => DomainFilter::All,
            Some(s) => DomainFilter::Id(s),
        }
    }
}

impl From<DomainFilter> for Option<String> {
    fn from(value: DomainFilter) -> Self {
        match value {
            DomainFilter::All => Some("*".into()),
            DomainFilter::Id(s) => Some(s),
        }
    }
}

impl fmt::Display for DomainFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainFilter::All => f.write_str("*"),
            DomainFilter::Id(s) => f.write_str(s),
        }
    }
}

/// Immutable longitudinal frame.
///
/// Invariants checked at construction: unique `(domain, unit, period)`
/// triples, exactly `p` finite auxiliaries per row, a finite response on
/// every sampled row, and `period >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LongFrame {
    rows: Vec<UnitRecord>,
    aux_names: Vec<String>,
    domains: Vec<String>,
    domain_of_row: Vec<usize>,
    n_periods: u32,
}

impl LongFrame {
    pub fn new(aux_names: Vec<String>, rows: Vec<UnitRecord>) -> Result<Self> {
        let p = aux_names.len();
        let mut seen = HashSet::with_capacity(rows.len());
        let mut domain_ids: HashMap<String, usize> = HashMap::new();
        let mut domains = Vec::new();
        let mut domain_of_row = Vec::with_capacity(rows.len());
        let mut n_periods = 0;
        for (i, row) in rows.iter().enumerate() {
            if row.period == 0 {
                return Err(Error::Integrity(format!("row {i}: period must be >= 1")));
            }
            if row.x.len() != p {
                return Err(Error::Integrity(format!(
                    "row {i}: expected {p} auxiliary values, found {}",
                    row.x.len()
                )));
            }
            if let Some(j) = row.x.iter().position(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "row {i}: auxiliary '{}' is not finite",
                    aux_names[j]
                )));
            }
            match row.y {
                Some(y) if !y.is_finite() => {
                    return Err(Error::Integrity(format!("row {i}: response is not finite")))
                }
                None if row.in_sample => {
                    return Err(Error::Integrity(format!(
                        "row {i}: sampled row ({}, {}, {}) has no response",
                        row.domain, row.unit, row.period
                    )))
                }
                _ => {}
            }
            if !seen.insert((row.domain.as_str(), row.unit.as_str(), row.period)) {
                return Err(Error::Integrity(format!(
                    "duplicate (domain, unit, period) = ({}, {}, {})",
                    row.domain, row.unit, row.period
                )));
            }
            let next = domains.len();
            let d = *domain_ids.entry(row.domain.clone()).or_insert_with(|| {
                domains.push(row.domain.clone());
                next
            });
            domain_of_row.push(d);
            n_periods = n_periods.max(row.period);
        }
        Ok(Self {
            rows,
            aux_names,
            domains,
            domain_of_row,
            n_periods,
        })
    }

    pub fn rows(&self) -> &[UnitRecord] {
        &self.rows
    }

    pub fn aux_names(&self) -> &[String] {
        &self.aux_names
    }

    /// Population size summed over periods, `N_(L)`.
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Number of sampled rows, `n_(L)`.
    pub fn n_sampled(&self) -> usize {
        self.rows.iter().filter(|r| r.in_sample).count()
    }

    /// Number of periods `M` (largest period index present).
    pub fn n_periods(&self) -> u32 {
        self.n_periods
    }

    /// Domain identifiers in order of first appearance.
    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    /// Position of each row's domain in [`LongFrame::domains`].
    pub fn domain_of_row(&self) -> &[usize] {
        &self.domain_of_row
    }

    pub fn aux_index(&self, name: &str) -> Result<usize> {
        self.aux_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Schema(format!("unknown auxiliary column '{name}'")))
    }

    pub fn sampled_indices(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].in_sample).collect()
    }

    pub fn nonsampled_indices(&self) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| !self.rows[i].in_sample).collect()
    }

    pub fn sample_flags(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.in_sample).collect()
    }

    /// Response vector with `None` for unobserved rows.
    pub fn responses(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.y).collect()
    }

    /// Responses of the sampled rows, in row order.
    pub fn sampled_responses(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.in_sample)
            .map(|r| r.y.expect("sampled rows carry a response"))
            .collect()
    }

    /// Full response vector; errors if any row lacks a response.
    pub fn full_responses(&self) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.y.ok_or_else(|| Error::Integrity(format!("row {i} has no response")))
            })
            .collect()
    }

    /// `rows × cols` matrix of the selected auxiliary columns.
    pub fn aux_matrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.rows[rows[i]].x[cols[j]])
    }

    /// Copy of the frame with every row's response replaced by `y`.
    pub fn with_responses(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.rows.len() {
            return Err(Error::Shape(format!(
                "response vector has length {}, frame has {} rows",
                y.len(),
                self.rows.len()
            )));
        }
        let rows = self
            .rows
            .iter()
            .zip(y)
            .map(|(r, &v)| UnitRecord {
                y: Some(v),
                ..r.clone()
            })
            .collect();
        LongFrame::new(self.aux_names.clone(), rows)
    }

    /// Copy of the frame with new sample flags.
    pub fn with_sample_flags(&self, flags: &[bool]) -> Result<Self> {
        if flags.len() != self.rows.len() {
            return Err(Error::Shape(format!(
                "flag vector has length {}, frame has {} rows",
                flags.len(),
                self.rows.len()
            )));
        }
        let rows = self
            .rows
            .iter()
            .zip(flags)
            .map(|(r, &s)| UnitRecord {
                in_sample: s,
                ..r.clone()
            })
            .collect();
        LongFrame::new(self.aux_names.clone(), rows)
    }

    /// Indices of all rows (sampled or not) in `domain` × `period`.
    pub fn subset_mask(&self, domain: &DomainFilter, period: u32) -> Result<Vec<usize>> {
        if period == 0 || period > self.n_periods {
            return Err(Error::Lookup(format!(
                "period {period} outside 1..={}",
                self.n_periods
            )));
        }
        let domain_idx = match domain {
            DomainFilter::All => None,
            DomainFilter::Id(id) => Some(
                self.domains
                    .iter()
                    .position(|d| d == id)
                    .ok_or_else(|| Error::Lookup(format!("unknown domain '{id}'")))?,
            ),
        };
        let mask: Vec<usize> = (0..self.rows.len())
            .filter(|&i| {
                self.rows[i].period == period
                    && domain_idx.is_none_or(|d| self.domain_of_row[i] == d)
            })
            .collect();
        if mask.is_empty() {
            return Err(Error::Lookup(format!(
                "no rows in domain '{domain}' at period {period}"
            )));
        }
        Ok(mask)
    }

    /// Write the frame as CSV with the fixed header
    /// `domain,unit,period,in_sample,y,<aux...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["domain", "unit", "period", "in_sample", "y"];
        header.extend(self.aux_names.iter().map(String::as_str));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.domain.clone(),
                r.unit.clone(),
                r.period.to_string(),
                if r.in_sample { "1" } else { "0" }.to_string(),
                r.y.map(|v| v.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

/// Load a frame from a CSV file.
pub fn load_frame(path: impl AsRef<Path>, schema: &Schema) -> Result<LongFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_frame(file, schema)
}

/// Parse a frame from any CSV reader.
pub fn read_frame<R: Read>(reader: R, schema: &Schema) -> Result<LongFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let domain_col = find(&schema.domain)?;
    let unit_col = find(&schema.unit)?;
    let period_col = find(&schema.period)?;
    let sample_col = find(&schema.in_sample)?;
    let y_col = find(&schema.y)?;
    let role_cols = [domain_col, unit_col, period_col, sample_col, y_col];
    let (aux_names, aux_cols): (Vec<String>, Vec<usize>) = if schema.aux.is_empty() {
        headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !role_cols.contains(i))
            .map(|(i, h)| (h.to_string(), i))
            .unzip()
    } else {
        let cols = schema
            .aux
            .iter()
            .map(|a| find(a))
            .collect::<Result<Vec<_>>>()?;
        (schema.aux.clone(), cols)
    };

    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let field = |c: usize| record.get(c).unwrap_or("");
        let parse_err = |message: String| Error::Parse { row, message };

        let period: u32 = field(period_col)
            .parse()
            .map_err(|_| parse_err(format!("period '{}' is not a positive integer", field(period_col))))?;
        let in_sample = match field(sample_col) {
            "1" | "true" | "TRUE" | "True" => true,
            "0" | "false" | "FALSE" | "False" => false,
            other => return Err(parse_err(format!("in_sample '{other}' is not 0/1"))),
        };
        let y = match field(y_col) {
            "" => None,
            s => Some(parse_finite(s).ok_or_else(|| parse_err(format!("response '{s}' is not a finite number")))?),
        };
        let x = aux_cols
            .iter()
            .zip(&aux_names)
            .map(|(&c, name)| {
                parse_finite(field(c)).ok_or_else(|| {
                    parse_err(format!("auxiliary '{name}' value '{}' is not a finite number", field(c)))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(UnitRecord {
            domain: field(domain_col).to_string(),
            unit: field(unit_col).to_string(),
            period,
            y,
            x,
            in_sample,
        });
    }
    LongFrame::new(aux_names, rows)
}

fn parse_finite(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Number of units selected for a sampling fraction: `floor(fraction * n)`,
/// with products within rounding noise of an integer snapped to it.
pub fn panel_sample_size(fraction: f64, n_units: usize) -> usize {
    let raw = fraction * n_units as f64;
    let nearest = raw.round();
    if (raw - nearest).abs() <= 1e-9 * (n_units as f64).max(1.0) {
        nearest as usize
    } else {
        raw.floor() as usize
    }
}

/// Draw a simple random sample without replacement of `floor(fraction * N)`
/// units in period 1 and flag the same units in every period.
///
/// Requires a balanced panel: every period `1..=M` holds the same set of
/// `(domain, unit)` pairs.
pub fn draw_panel_sample(frame: &LongFrame, fraction: f64, seed: u64) -> Result<LongFrame> {
    let flags = panel_sample_flags(frame, fraction, seed)?;
    frame.with_sample_flags(&flags)
}

/// Sample flags of [`draw_panel_sample`] without rebuilding the frame, for
/// frames whose responses are generated later.
pub fn panel_sample_flags(frame: &LongFrame, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Design(format!("sampling fraction {fraction} not in (0, 1]")));
    }
    let units = balanced_units(frame)?;
    let n = panel_sample_size(fraction, units.len());
    if n == 0 {
        return Err(Error::Design(format!(
            "fraction {fraction} of {} units selects no unit",
            units.len()
        )));
    }
    let mut rng = rng::stream(seed, "panel-sample", &[]);
    let chosen: HashSet<(&str, &str)> = rand::seq::index::sample(&mut rng, units.len(), n)
        .into_iter()
        .map(|i| units[i])
        .collect();
    Ok(frame
        .rows()
        .iter()
        .map(|r| chosen.contains(&(r.domain.as_str(), r.unit.as_str())))
        .collect())
}

/// Period-1 units in order of appearance, after checking the panel is
/// balanced.
fn balanced_units(frame: &LongFrame) -> Result<Vec<(&str, &str)>> {
    let m = frame.n_periods() as usize;
    let mut per_period: Vec<BTreeSet<(&str, &str)>> = vec![BTreeSet::new(); m];
    let mut first_period = Vec::new();
    for r in frame.rows() {
        let key = (r.domain.as_str(), r.unit.as_str());
        per_period[r.period as usize - 1].insert(key);
        if r.period == 1 {
            first_period.push(key);
        }
    }
    if first_period.is_empty() {
        return Err(Error::Design("frame has no rows in period 1".into()));
    }
    for (t, set) in per_period.iter().enumerate().skip(1) {
        if *set != per_period[0] {
            return Err(Error::Design(format!(
                "unbalanced panel: unit set of period {} differs from period 1",
                t + 1
            )));
        }
    }
    Ok(first_period)
}
