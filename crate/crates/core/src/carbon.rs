//! Per-region carbon-intensity time series: ingest, synthesis and queries.
//!
//! Every series is a zero-order hold signal: a point's value holds from its
//! timestamp until the next point. Emissions are expressed in relative
//! emission units (REU), i.e. gCO2-eq accrued per kW of constant draw, so a
//! job running for `h` hours at `v` gCO2-eq/kWh costs `v * h` REU.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default signal resolution, matching 5-minute grid signals.
pub const DEFAULT_RESOLUTION_S: i64 = 300;

const SECONDS_PER_HOUR: f64 = 3600.0;
const MAX_JITTER_S: i64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("malformed row {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("irregular resolution in region {region}: {reason}")]
    IrregularResolution { region: String, reason: String },
    #[error("negative intensity {value} in region {region} at line {line}")]
    NegativeIntensity { region: String, line: usize, value: f64 },
    #[error("intensity file contains no data rows")]
    EmptyFile,
    #[error("instant {t} is outside the coverage of region {region}")]
    OutOfCoverage { region: String, t: DateTime<Utc> },
    #[error("unknown region {0}")]
    UnknownRegion(String),
    #[error("duration must be positive, got {0} s")]
    ZeroOrNegativeDuration(i64),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
}

/// Short region token such as `eu-central-1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(String);

impl RegionId {
    /// Builds a region id; the token must be non-empty and free of whitespace.
    pub fn new(id: impl Into<String>) -> Option<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            None
        } else {
            Some(Self(id))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntensityKind {
    Actual,
    Forecast,
}

impl IntensityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IntensityKind::Actual => "actual",
            IntensityKind::Forecast => "forecast",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "actual" => Some(IntensityKind::Actual),
            "forecast" => Some(IntensityKind::Forecast),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityPoint {
    pub timestamp: DateTime<Utc>,
    /// gCO2-eq/kWh
    pub value: f64,
}

/// How queries outside a series' coverage are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CoveragePolicy {
    /// Reject with [`DataError::OutOfCoverage`].
    #[default]
    Strict,
    /// Extend the first and last values beyond the covered interval.
    HoldEdges,
}

/// Result of an emissions integral.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Emissions {
    pub reu: f64,
    /// True when part of the window fell outside the covered interval and was
    /// charged at the nearest known value.
    pub coverage_gap: bool,
}

/// An equally spaced zero-order hold series. Points are stored as values on
/// the grid `start + i * resolution`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarbonIntensitySeries {
    region: RegionId,
    kind: IntensityKind,
    start: i64,
    resolution: i64,
    values: Vec<f64>,
}

impl CarbonIntensitySeries {
    pub fn new(
        region: RegionId,
        kind: IntensityKind,
        start: DateTime<Utc>,
        resolution_s: i64,
        values: Vec<f64>,
    ) -> Result<Self, DataError> {
        if resolution_s <= 0 {
            return Err(DataError::IrregularResolution {
                region: region.to_string(),
                reason: format!("non-positive resolution {resolution_s}"),
            });
        }
        if values.is_empty() {
            return Err(DataError::EmptyFile);
        }
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(DataError::NegativeIntensity {
                region: region.to_string(),
                line: i,
                value: v,
            });
        }
        Ok(Self {
            region,
            kind,
            start: start.timestamp(),
            resolution: resolution_s,
            values,
        })
    }

    pub fn region(&self) -> &RegionId {
        &self.region
    }

    pub fn kind(&self) -> IntensityKind {
        self.kind
    }

    pub fn resolution_s(&self) -> i64 {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Half-open `[start, end)` covered interval, in epoch seconds.
    pub fn coverage_secs(&self) -> (i64, i64) {
        (self.start, self.start + self.resolution * self.values.len() as i64)
    }

    pub fn coverage(&self) -> (DateTime<Utc>, DateTime<Utc>) {
        let (s, e) = self.coverage_secs();
        (to_instant(s), to_instant(e))
    }

    pub fn points(&self) -> impl Iterator<Item = IntensityPoint> + '_ {
        self.values.iter().enumerate().map(move |(i, &value)| IntensityPoint {
            timestamp: to_instant(self.start + i as i64 * self.resolution),
            value,
        })
    }

    fn index_of(&self, t: i64) -> Option<usize> {
        let (s, e) = self.coverage_secs();
        if t < s || t >= e {
            None
        } else {
            Some(((t - s) / self.resolution) as usize)
        }
    }

    pub fn value_at_secs(&self, t: i64) -> Option<f64> {
        self.index_of(t).map(|i| self.values[i])
    }

    /// Exact zero-order hold integral over `[start, start + duration)`.
    ///
    /// The sum `Σ value × overlap_seconds` is accumulated first and divided
    /// by 3600 once, so integer-valued inputs produce exactly rounded results.
    pub fn integrate_secs(
        &self,
        start: i64,
        duration: i64,
        policy: CoveragePolicy,
    ) -> Result<Emissions, DataError> {
        if duration <= 0 {
            return Err(DataError::ZeroOrNegativeDuration(duration));
        }
        let end = start + duration;
        let (cov_start, cov_end) = self.coverage_secs();
        let gap = start < cov_start || end > cov_end;
        if gap && policy == CoveragePolicy::Strict {
            let t = if start < cov_start { start } else { end };
            return Err(DataError::OutOfCoverage {
                region: self.region.to_string(),
                t: to_instant(t),
            });
        }

        let mut weighted = 0.0;
        if start < cov_start {
            weighted += self.values[0] * (end.min(cov_start) - start) as f64;
        }
        let lo = start.max(cov_start);
        let hi = end.min(cov_end);
        if lo < hi {
            let first = ((lo - cov_start) / self.resolution) as usize;
            let mut slot_start = cov_start + first as i64 * self.resolution;
            for &value in &self.values[first..] {
                if slot_start >= hi {
                    break;
                }
                let slot_end = slot_start + self.resolution;
                let overlap = slot_end.min(hi) - slot_start.max(lo);
                weighted += value * overlap as f64;
                slot_start = slot_end;
            }
        }
        if end > cov_end {
            let last = *self.values.last().expect("series is non-empty");
            weighted += last * (end - start.max(cov_end)) as f64;
        }
        Ok(Emissions {
            reu: weighted / SECONDS_PER_HOUR,
            coverage_gap: gap,
        })
    }

    fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Immutable collection of series, one Actual and one Forecast per region.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityDataset {
    series: BTreeMap<(RegionId, IntensityKind), CarbonIntensitySeries>,
    resolution: i64,
}

impl IntensityDataset {
    /// Builds a dataset from series. A region that only has one kind gets
    /// the other kind mirrored from it (perfect forecast).
    pub fn from_series(
        series: impl IntoIterator<Item = CarbonIntensitySeries>,
    ) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        let mut resolution = None;
        for s in series {
            match resolution {
                None => resolution = Some(s.resolution),
                Some(r) if r != s.resolution => {
                    return Err(DataError::IrregularResolution {
                        region: s.region.to_string(),
                        reason: format!("resolution {} s differs from {} s", s.resolution, r),
                    })
                }
                Some(_) => {}
            }
            map.insert((s.region.clone(), s.kind), s);
        }
        let resolution = resolution.ok_or(DataError::EmptyFile)?;

        let regions: BTreeSet<RegionId> = map.keys().map(|(r, _)| r.clone()).collect();
        for region in regions {
            for (have, missing) in [
                (IntensityKind::Actual, IntensityKind::Forecast),
                (IntensityKind::Forecast, IntensityKind::Actual),
            ] {
                if !map.contains_key(&(region.clone(), missing)) {
                    let mut mirrored = map[&(region.clone(), have)].clone();
                    mirrored.kind = missing;
                    map.insert((region.clone(), missing), mirrored);
                }
            }
        }
        Ok(Self {
            series: map,
            resolution,
        })
    }

    /// Replaces every forecast series with a copy of the actual one.
    pub fn with_perfect_forecast(&self) -> Self {
        let mut out = self.clone();
        for region in self.regions() {
            let mut s = self.series[&(region.clone(), IntensityKind::Actual)].clone();
            s.kind = IntensityKind::Forecast;
            out.series.insert((region, IntensityKind::Forecast), s);
        }
        out
    }

    /// Takes actual series from `self` and forecast series from `forecast`.
    pub fn with_forecast_from(&self, forecast: &IntensityDataset) -> Result<Self, DataError> {
        let actual = self.series.values().filter(|s| s.kind == IntensityKind::Actual);
        let predicted = forecast
            .series
            .values()
            .filter(|s| s.kind == IntensityKind::Forecast);
        Self::from_series(actual.chain(predicted).cloned())
    }

    /// Regions in lexicographic order.
    pub fn regions(&self) -> Vec<RegionId> {
        let set: BTreeSet<&RegionId> = self.series.keys().map(|(r, _)| r).collect();
        set.into_iter().cloned().collect()
    }

    pub fn resolution_s(&self) -> i64 {
        self.resolution
    }

    pub fn series(&self, region: &RegionId, kind: IntensityKind) -> Result<&CarbonIntensitySeries, DataError> {
        self.series
            .get(&(region.clone(), kind))
            .ok_or_else(|| DataError::UnknownRegion(region.to_string()))
    }

    pub fn all_series(&self) -> impl Iterator<Item = &CarbonIntensitySeries> {
        self.series.values()
    }

    /// Interval covered by every series (intersection).
    pub fn coverage(&self) -> (DateTime<Utc>, DateTime<Utc>) {
        let (s, e) = self.coverage_secs();
        (to_instant(s), to_instant(e))
    }

    pub fn coverage_secs(&self) -> (i64, i64) {
        self.series.values().fold((i64::MIN, i64::MAX), |(s, e), series| {
            let (a, b) = series.coverage_secs();
            (s.max(a), e.min(b))
        })
    }

    pub fn intensity_at(
        &self,
        region: &RegionId,
        t: DateTime<Utc>,
        kind: IntensityKind,
    ) -> Result<f64, DataError> {
        let series = self.series(region, kind)?;
        series
            .value_at_secs(t.timestamp())
            .ok_or_else(|| DataError::OutOfCoverage {
                region: region.to_string(),
                t,
            })
    }

    /// Emissions in REU of a unit load over `[start, start + duration_s)`.
    pub fn integrate_emissions(
        &self,
        region: &RegionId,
        start: DateTime<Utc>,
        duration_s: i64,
        kind: IntensityKind,
    ) -> Result<f64, DataError> {
        self.integrate(region, start.timestamp(), duration_s, kind, CoveragePolicy::Strict)
            .map(|e| e.reu)
    }

    /// Integral in epoch seconds with an explicit coverage policy.
    pub fn integrate(
        &self,
        region: &RegionId,
        start: i64,
        duration_s: i64,
        kind: IntensityKind,
        policy: CoveragePolicy,
    ) -> Result<Emissions, DataError> {
        self.series(region, kind)?.integrate_secs(start, duration_s, policy)
    }

    /// Multiplies every value of every series by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            series: self
                .series
                .iter()
                .map(|(k, s)| (k.clone(), s.scaled(factor)))
                .collect(),
            resolution: self.resolution,
        }
    }

    /// Writes the four-column CSV format (`region,timestamp,intensity_g_per_kwh,kind`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| DataError::Io {
            path: "<writer>".into(),
            reason: e.to_string(),
        };
        w.write_record(["region", "timestamp", "intensity_g_per_kwh", "kind"])
            .map_err(io)?;
        for kind in [IntensityKind::Actual, IntensityKind::Forecast] {
            for series in self.series.values().filter(|s| s.kind == kind) {
                for p in series.points() {
                    w.write_record([
                        series.region.as_str(),
                        &format_instant(p.timestamp),
                        &p.value.to_string(),
                        kind.as_str(),
                    ])
                    .map_err(io)?;
                }
            }
        }
        w.flush().map_err(|e| DataError::Io {
            path: "<writer>".into(),
            reason: e.to_string(),
        })
    }
}

pub fn to_instant(secs: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(secs, 0).single().expect("timestamp in range")
}

pub fn format_instant(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Parses an ISO-8601 instant. Offsets are converted to UTC; a naive
/// timestamp is taken as UTC.
pub fn parse_instant(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc());
        }
    }
    None
}

/// Loads an intensity CSV. Rows without a `kind` column are taken as
/// `default_kind`; a region missing one kind gets it mirrored from the other.
pub fn load_intensity_csv(
    path: impl AsRef<Path>,
    default_kind: IntensityKind,
) -> Result<IntensityDataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_intensity_csv(file, default_kind)
}

pub fn read_intensity_csv<R: Read>(
    reader: R,
    default_kind: IntensityKind,
) -> Result<IntensityDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);

    let mut rows: BTreeMap<(RegionId, IntensityKind), Vec<(i64, f64)>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| DataError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() < 3 {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("expected at least 3 fields, got {}", record.len()),
            });
        }
        let region = RegionId::new(&record[0]).ok_or_else(|| DataError::MalformedRow {
            line,
            reason: format!("bad region token {:?}", &record[0]),
        })?;
        let t = parse_instant(&record[1]).ok_or_else(|| DataError::MalformedRow {
            line,
            reason: format!("bad timestamp {:?}", &record[1]),
        })?;
        let value: f64 = record[2].parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("bad intensity {:?}", &record[2]),
        })?;
        if !value.is_finite() {
            return Err(DataError::MalformedRow {
                line,
                reason: format!("non-finite intensity {value}"),
            });
        }
        if value < 0.0 {
            return Err(DataError::NegativeIntensity {
                region: region.to_string(),
                line,
                value,
            });
        }
        let kind = match record.get(3).filter(|k| !k.is_empty()) {
            Some(k) => IntensityKind::parse(k).ok_or_else(|| DataError::MalformedRow {
                line,
                reason: format!("bad kind {k:?}"),
            })?,
            None => default_kind,
        };
        rows.entry((region, kind)).or_default().push((t.timestamp(), value));
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile);
    }

    let fallback_resolution = rows
        .values()
        .find(|r| r.len() >= 2)
        .map(|r| {
            let mut ts: Vec<i64> = r.iter().map(|p| p.0).collect();
            ts.sort_unstable();
            ts[1] - ts[0]
        })
        .unwrap_or(DEFAULT_RESOLUTION_S);

    let mut series = Vec::with_capacity(rows.len());
    for ((region, kind), mut points) in rows {
        points.sort_by_key(|p| p.0);
        let mut resolution = if points.len() >= 2 {
            points[1].0 - points[0].0
        } else {
            fallback_resolution
        };
        if resolution <= 0 {
            return Err(DataError::IrregularResolution {
                region: region.to_string(),
                reason: "duplicate timestamps".into(),
            });
        }
        let origin = points[0].0;
        if points.len() > 2 {
            // the overall span averages out jitter on the second point
            let span = points[points.len() - 1].0 - origin;
            let refined = (span as f64 / (points.len() - 1) as f64).round() as i64;
            if refined > 0 && (refined - resolution).abs() <= MAX_JITTER_S * 2 {
                resolution = refined;
            }
        }
        for (i, &(t, _)) in points.iter().enumerate() {
            let expected = origin + i as i64 * resolution;
            if (t - expected).abs() > MAX_JITTER_S {
                return Err(DataError::IrregularResolution {
                    region: region.to_string(),
                    reason: format!(
                        "point {} at {} deviates from the {} s grid",
                        i,
                        format_instant(to_instant(t)),
                        resolution
                    ),
                });
            }
        }
        series.push(CarbonIntensitySeries {
            region,
            kind,
            start: origin,
            resolution,
            values: points.into_iter().map(|p| p.1).collect(),
        });
    }
    IntensityDataset::from_series(series)
}

/// Synthetic sinusoidal dataset generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub regions: usize,
    pub resolution_s: i64,
    pub days: f64,
    /// Base level per region, cycled when shorter than `regions`.
    #[serde(deserialize_with = "one_or_many")]
    pub base: Vec<f64>,
    pub amplitude: f64,
    pub period_h: f64,
    /// Phase shift between consecutive regions, in hours.
    pub phase_step_h: f64,
    /// Relative standard deviation of the multiplicative forecast error.
    pub noise: f64,
    pub seed: u64,
    pub start: DateTime<Utc>,
}

fn one_or_many<'de, D>(d: D) -> Result<Vec<f64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(f64),
        Many(Vec<f64>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            regions: 12,
            resolution_s: DEFAULT_RESOLUTION_S,
            days: 4.0,
            base: vec![300.0],
            amplitude: 150.0,
            period_h: 24.0,
            phase_step_h: 2.0,
            noise: 0.0,
            seed: 0,
            start: Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

impl SyntheticConfig {
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::InvalidConfig(e.to_string()))
    }
}

const REGION_NAMES: [&str; 12] = [
    "af-south-1",
    "ap-southeast-2",
    "ca-central-1",
    "eu-central-1",
    "eu-north-1",
    "eu-south-1",
    "eu-west-1",
    "eu-west-2",
    "eu-west-3",
    "us-east-1",
    "us-east-2",
    "us-west-2",
];

fn synthetic_region_name(i: usize, total: usize) -> String {
    if total <= REGION_NAMES.len() {
        REGION_NAMES[i].to_string()
    } else {
        format!("region-{i:03}")
    }
}

/// Generates phase-shifted sinusoidal regions. Deterministic for a seed;
/// the seed only drives the forecast noise.
pub fn synthesize_dataset(config: &SyntheticConfig) -> Result<IntensityDataset, DataError> {
    if config.resolution_s <= 0 {
        return Err(DataError::InvalidConfig("resolution_s must be positive".into()));
    }
    if !(config.days > 0.0) {
        return Err(DataError::InvalidConfig("days must be positive".into()));
    }
    if config.regions == 0 {
        return Err(DataError::InvalidConfig("regions must be positive".into()));
    }
    if config.base.is_empty() || config.base.iter().any(|b| !b.is_finite()) {
        return Err(DataError::InvalidConfig("base must hold finite values".into()));
    }
    if !(config.period_h > 0.0) {
        return Err(DataError::InvalidConfig("period_h must be positive".into()));
    }
    if !(config.noise >= 0.0) {
        return Err(DataError::InvalidConfig("noise must be non-negative".into()));
    }

    let points = ((config.days * 86_400.0) / config.resolution_s as f64).round() as usize;
    if points == 0 {
        return Err(DataError::InvalidConfig("duration shorter than one resolution step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let omega = 2.0 * std::f64::consts::PI / config.period_h;

    let mut series = Vec::with_capacity(config.regions * 2);
    for r in 0..config.regions {
        let region = RegionId::new(synthetic_region_name(r, config.regions)).expect("valid name");
        let base = config.base[r % config.base.len()];
        let phase = omega * config.phase_step_h * r as f64;
        let actual: Vec<f64> = (0..points)
            .map(|i| {
                let hours = (i as i64 * config.resolution_s) as f64 / SECONDS_PER_HOUR;
                (base + config.amplitude * (omega * hours + phase).sin()).max(0.0)
            })
            .collect();
        let forecast: Vec<f64> = actual
            .iter()
            .map(|&v| {
                if config.noise == 0.0 {
                    v
                } else {
                    (v * (1.0 + config.noise * normal.sample(&mut rng))).max(0.0)
                }
            })
            .collect();
        series.push(CarbonIntensitySeries::new(
            region.clone(),
            IntensityKind::Actual,
            config.start,
            config.resolution_s,
            actual,
        )?);
        series.push(CarbonIntensitySeries::new(
            region,
            IntensityKind::Forecast,
            config.start,
            config.resolution_s,
            forecast,
        )?);
    }
    IntensityDataset::from_series(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn region(s: &str) -> RegionId {
        RegionId::new(s).unwrap()
    }

    fn t(h: u32, m: u32, s: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 3, 1, h, m, s).unwrap()
    }

    fn two_step() -> IntensityDataset {
        let s = CarbonIntensitySeries::new(
            region("a"),
            IntensityKind::Actual,
            t(0, 0, 0),
            3600,
            vec![100.0, 50.0],
        )
        .unwrap();
        IntensityDataset::from_series([s]).unwrap()
    }

    #[test]
    fn zero_order_hold_queries() {
        let ds = two_step();
        let a = region("a");
        assert_eq!(ds.intensity_at(&a, t(0, 30, 0), IntensityKind::Actual).unwrap(), 100.0);
        assert_eq!(ds.intensity_at(&a, t(1, 0, 0), IntensityKind::Actual).unwrap(), 50.0);
        assert_eq!(ds.intensity_at(&a, t(1, 59, 59), IntensityKind::Forecast).unwrap(), 50.0);
        assert!(matches!(
            ds.intensity_at(&a, t(2, 0, 0), IntensityKind::Actual),
            Err(DataError::OutOfCoverage { .. })
        ));
        assert!(matches!(
            ds.intensity_at(&region("b"), t(0, 0, 0), IntensityKind::Actual),
            Err(DataError::UnknownRegion(_))
        ));
    }

    #[test]
    fn piecewise_integral() {
        let ds = two_step();
        let a = region("a");
        let e = ds.integrate_emissions(&a, t(0, 30, 0), 3600, IntensityKind::Actual).unwrap();
        assert_eq!(e, 75.0);
        assert!(matches!(
            ds.integrate_emissions(&a, t(0, 30, 0), 0, IntensityKind::Actual),
            Err(DataError::ZeroOrNegativeDuration(0))
        ));
        assert!(matches!(
            ds.integrate_emissions(&a, t(1, 30, 0), 3600, IntensityKind::Actual),
            Err(DataError::OutOfCoverage { .. })
        ));
    }

    #[test]
    fn constant_integral() {
        let s = CarbonIntensitySeries::new(
            region("a"),
            IntensityKind::Actual,
            t(0, 0, 0),
            300,
            vec![100.0; 48],
        )
        .unwrap();
        let ds = IntensityDataset::from_series([s]).unwrap();
        assert_eq!(
            ds.integrate_emissions(&region("a"), t(0, 0, 0), 7200, IntensityKind::Actual).unwrap(),
            200.0
        );
    }

    #[test]
    fn hold_edges_charges_nearest_value() {
        let ds = two_step();
        let e = ds
            .integrate(&region("a"), t(1, 30, 0).timestamp(), 3600, IntensityKind::Actual, CoveragePolicy::HoldEdges)
            .unwrap();
        assert!(e.coverage_gap);
        assert_eq!(e.reu, 50.0);
        let e = ds
            .integrate(&region("a"), t(0, 0, 0).timestamp() - 1800, 3600, IntensityKind::Actual, CoveragePolicy::HoldEdges)
            .unwrap();
        assert_eq!(e.reu, 100.0);
    }

    const CSV_SORTED: &str = "region,timestamp,intensity_g_per_kwh\n\
        a,2024-03-01T00:00:00Z,10\n\
        a,2024-03-01T01:00:00Z,20\n\
        a,2024-03-01T02:00:00Z,30\n\
        b,2024-03-01T00:00:00Z,40\n\
        b,2024-03-01T01:00:00Z,50\n\
        b,2024-03-01T02:00:00Z,60\n";

    #[test]
    fn csv_two_regions() {
        let ds = read_intensity_csv(CSV_SORTED.as_bytes(), IntensityKind::Actual).unwrap();
        assert_eq!(ds.regions(), vec![region("a"), region("b")]);
        assert_eq!(ds.resolution_s(), 3600);
        assert_eq!(ds.all_series().count(), 4);
        assert_eq!(ds.series(&region("b"), IntensityKind::Forecast).unwrap().values(), &[40.0, 50.0, 60.0]);
    }

    #[test]
    fn csv_unsorted_equals_sorted() {
        let shuffled = "region,timestamp,intensity_g_per_kwh\n\
            b,2024-03-01T02:00:00Z,60\n\
            a,2024-03-01T01:00:00Z,20\n\
            b,2024-03-01T00:00:00Z,40\n\
            a,2024-03-01T02:00:00Z,30\n\
            b,2024-03-01T01:00:00Z,50\n\
            a,2024-03-01T00:00:00Z,10\n";
        let a = read_intensity_csv(CSV_SORTED.as_bytes(), IntensityKind::Actual).unwrap();
        let b = read_intensity_csv(shuffled.as_bytes(), IntensityKind::Actual).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_errors() {
        let neg = "region,timestamp,intensity_g_per_kwh\na,2024-03-01T00:00:00Z,-5\n";
        assert!(matches!(
            read_intensity_csv(neg.as_bytes(), IntensityKind::Actual),
            Err(DataError::NegativeIntensity { line: 2, .. })
        ));
        let bad_ts = "region,timestamp,intensity_g_per_kwh\na,yesterday,5\n";
        assert!(matches!(
            read_intensity_csv(bad_ts.as_bytes(), IntensityKind::Actual),
            Err(DataError::MalformedRow { .. })
        ));
        let bad_num = "region,timestamp,intensity_g_per_kwh\na,2024-03-01T00:00:00Z,lots\n";
        assert!(matches!(
            read_intensity_csv(bad_num.as_bytes(), IntensityKind::Actual),
            Err(DataError::MalformedRow { .. })
        ));
        let gap = "region,timestamp,intensity_g_per_kwh\n\
            a,2024-03-01T00:00:00Z,1\na,2024-03-01T01:00:00Z,1\na,2024-03-01T03:00:00Z,1\n";
        assert!(matches!(
            read_intensity_csv(gap.as_bytes(), IntensityKind::Actual),
            Err(DataError::IrregularResolution { .. })
        ));
        let header_only = "region,timestamp,intensity_g_per_kwh\n";
        assert_eq!(
            read_intensity_csv(header_only.as_bytes(), IntensityKind::Actual),
            Err(DataError::EmptyFile)
        );
    }

    #[test]
    fn csv_tolerates_one_second_jitter() {
        let jitter = "region,timestamp,intensity_g_per_kwh\n\
            a,2024-03-01T00:00:00Z,1\na,2024-03-01T00:05:01Z,2\na,2024-03-01T00:10:00Z,3\n";
        let ds = read_intensity_csv(jitter.as_bytes(), IntensityKind::Actual).unwrap();
        assert_eq!(ds.resolution_s(), 300);
        let jitter = "region,timestamp,intensity_g_per_kwh\n\
            a,2024-03-01T00:00:00Z,1\na,2024-03-01T00:05:00Z,2\na,2024-03-01T00:10:01Z,3\n";
        assert!(read_intensity_csv(jitter.as_bytes(), IntensityKind::Actual).is_ok());
        let jitter = "region,timestamp,intensity_g_per_kwh\n\
            a,2024-03-01T00:00:00Z,1\na,2024-03-01T00:05:00Z,2\na,2024-03-01T00:10:00Z,3\n\
            a,2024-03-01T00:15:02Z,4\na,2024-03-01T00:20:00Z,5\n";
        assert!(read_intensity_csv(jitter.as_bytes(), IntensityKind::Actual).is_err());
    }

    #[test]
    fn csv_with_kind_column() {
        let text = "region,timestamp,intensity_g_per_kwh,kind\n\
            a,2024-03-01T00:00:00Z,10,actual\n\
            a,2024-03-01T01:00:00Z,20,actual\n\
            a,2024-03-01T00:00:00Z,11,forecast\n\
            a,2024-03-01T01:00:00Z,19,forecast\n";
        let ds = read_intensity_csv(text.as_bytes(), IntensityKind::Actual).unwrap();
        assert_eq!(ds.series(&region("a"), IntensityKind::Forecast).unwrap().values(), &[11.0, 19.0]);
        assert_eq!(ds.series(&region("a"), IntensityKind::Actual).unwrap().values(), &[10.0, 20.0]);
    }

    #[test]
    fn csv_round_trip() {
        let cfg = SyntheticConfig {
            regions: 3,
            days: 0.5,
            noise: 0.1,
            seed: 3,
            ..SyntheticConfig::default()
        };
        let ds = synthesize_dataset(&cfg).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_intensity_csv(buf.as_slice(), IntensityKind::Actual).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn synthetic_flat() {
        let cfg = SyntheticConfig {
            regions: 2,
            amplitude: 0.0,
            base: vec![100.0],
            days: 1.0,
            ..SyntheticConfig::default()
        };
        let ds = synthesize_dataset(&cfg).unwrap();
        assert!(ds.all_series().all(|s| s.values().iter().all(|&v| v == 100.0)));
    }

    #[test]
    fn synthetic_shape_and_determinism() {
        let cfg = SyntheticConfig {
            regions: 12,
            days: 4.0,
            resolution_s: 300,
            noise: 0.05,
            seed: 7,
            ..SyntheticConfig::default()
        };
        let a = synthesize_dataset(&cfg).unwrap();
        let b = synthesize_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.regions().len(), 12);
        // 4 days * 24 h * 12 points per hour
        assert!(a.all_series().all(|s| s.len() == 4 * 24 * 12));
        let mut x = Vec::new();
        let mut y = Vec::new();
        a.write_csv(&mut x).unwrap();
        b.write_csv(&mut y).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        for cfg in [
            SyntheticConfig { resolution_s: 0, ..SyntheticConfig::default() },
            SyntheticConfig { days: 0.0, ..SyntheticConfig::default() },
            SyntheticConfig { days: -1.0, ..SyntheticConfig::default() },
        ] {
            assert!(matches!(synthesize_dataset(&cfg), Err(DataError::InvalidConfig(_))));
        }
    }

    #[test]
    fn synthetic_config_from_toml() {
        let cfg = SyntheticConfig::from_toml(
            "regions = 2\nresolution_s = 600\ndays = 1\nbase = [100, 200]\namplitude = 0\nseed = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.base, vec![100.0, 200.0]);
        let ds = synthesize_dataset(&cfg).unwrap();
        assert_eq!(ds.resolution_s(), 600);
        assert!(SyntheticConfig::from_toml("bogus = 1").is_err());
    }

    fn arb_series() -> impl Strategy<Value = CarbonIntensitySeries> {
        proptest::collection::vec(0u32..1000, 4..64).prop_map(|vals| {
            CarbonIntensitySeries::new(
                RegionId::new("r").unwrap(),
                IntensityKind::Actual,
                Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(),
                300,
                vals.into_iter().map(f64::from).collect(),
            )
            .unwrap()
        })
    }

    proptest! {
        #[test]
        fn additivity(s in arb_series(), a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let (start, end) = s.coverage_secs();
            let span = end - start;
            let t0 = start + (a * (span - 2) as f64) as i64;
            let rest = end - t0;
            let d1 = 1 + (b * (rest - 2) as f64) as i64;
            let d2 = 1 + (c * (rest - d1 - 1) as f64) as i64;
            let whole = s.integrate_secs(t0, d1 + d2, CoveragePolicy::Strict).unwrap().reu;
            let parts = s.integrate_secs(t0, d1, CoveragePolicy::Strict).unwrap().reu
                + s.integrate_secs(t0 + d1, d2, CoveragePolicy::Strict).unwrap().reu;
            prop_assert!((whole - parts).abs() <= 1e-9 * whole.abs().max(1.0));
        }

        #[test]
        fn monotone_in_duration(s in arb_series(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (start, end) = s.coverage_secs();
            let t0 = start + (a * (end - start - 2) as f64) as i64;
            let d1 = 1 + (b * (end - t0 - 2) as f64) as i64;
            let short = s.integrate_secs(t0, d1, CoveragePolicy::Strict).unwrap().reu;
            let long = s.integrate_secs(t0, d1 + 1, CoveragePolicy::Strict).unwrap().reu;
            prop_assert!(long >= short);
        }

        #[test]
        fn scale_equivariance(s in arb_series(), k in 0.0f64..10.0, a in 0.0f64..1.0) {
            let (start, end) = s.coverage_secs();
            let t0 = start + (a * (end - start - 600) as f64) as i64;
            let base = s.integrate_secs(t0, 600, CoveragePolicy::Strict).unwrap().reu;
            let scaled = s.scaled(k).integrate_secs(t0, 600, CoveragePolicy::Strict).unwrap().reu;
            prop_assert!((scaled - k * base).abs() <= 1e-9 * (k * base).abs().max(1.0));
        }

        #[test]
        fn hold_is_constant_within_interval(s in arb_series(), i in 0usize..4, off in 0i64..300) {
            let (start, _) = s.coverage_secs();
            let slot = start + i as i64 * 300;
            prop_assert_eq!(s.value_at_secs(slot), s.value_at_secs(slot + off));
        }
    }
}
