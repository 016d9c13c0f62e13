//! Typed ingestion of the search log and the destination latent-feature table.
//!
//! Input files are comma-separated UTF-8 text with a header row. The log
//! schema follows the upstream column names exactly (`date_time`,
//! `site_name`, ..., `hotel_cluster`); the destinations file carries
//! `srch_destination_id` plus 149 latent columns `d1..d149`.
//!
//! Missing values are typed absences, never sentinel numbers: downstream
//! models branch on missingness. Malformed dates and negative distances are
//! recorded as absent with a warning count, since the real logs contain both.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use thiserror::Error;

use crate::{CLUSTER_COUNT, LATENT_DIM};

/// Cluster label; always in `0..100`.
pub type ClusterId = u8;

const DATE_FMT: &str = "%Y-%m-%d";
const DATETIME_FMT: &str = "%Y-%m-%d %H:%M:%S";

/// Log columns in canonical file order. `hotel_cluster` is last and is the
/// only column allowed to be absent (test files).
pub const EVENT_COLUMNS: [&str; 24] = [
    "date_time",
    "site_name",
    "posa_continent",
    "user_location_country",
    "user_location_region",
    "user_location_city",
    "orig_destination_distance",
    "user_id",
    "is_mobile",
    "is_package",
    "channel",
    "srch_ci",
    "srch_co",
    "srch_adults_cnt",
    "srch_children_cnt",
    "srch_rm_cnt",
    "srch_destination_id",
    "srch_destination_type_id",
    "hotel_continent",
    "hotel_country",
    "hotel_market",
    "is_booking",
    "cnt",
    "hotel_cluster",
];

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("line {line}, column `{column}`: expected {expected}, got `{value}`")]
    BadValue {
        line: u64,
        column: &'static str,
        expected: &'static str,
        value: String,
    },
    #[error("line {line}: hotel_cluster {value} outside [0,99]")]
    ClusterRange { line: u64, value: i64 },
    #[error("line {line}: train row without hotel_cluster")]
    MissingCluster { line: u64 },
    #[error("line {line}: test row carries hotel_cluster value `{value}`")]
    UnexpectedCluster { line: u64, value: String },
    #[error("destinations file: expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("write: {0}")]
    Write(#[from] std::io::Error),
}

/// Whether a dataset holds labeled train rows or unlabeled test rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Test,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Train => write!(f, "train"),
            Provenance::Test => write!(f, "test"),
        }
    }
}

/// One row of the search log.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchEvent {
    pub date_time: Option<NaiveDateTime>,
    pub site_name: u32,
    pub posa_continent: u32,
    pub user_location_country: u32,
    pub user_location_region: u32,
    pub user_location_city: u32,
    /// Physical user-to-hotel distance in km; heavily missing in real logs.
    pub orig_destination_distance: Option<f64>,
    pub user_id: u64,
    pub is_mobile: bool,
    pub is_package: bool,
    pub channel: u32,
    pub srch_ci: Option<NaiveDate>,
    pub srch_co: Option<NaiveDate>,
    pub srch_adults_cnt: u32,
    pub srch_children_cnt: u32,
    pub srch_rm_cnt: u32,
    pub srch_destination_id: u64,
    pub srch_destination_type_id: u32,
    pub hotel_continent: u32,
    pub hotel_country: u32,
    pub hotel_market: u32,
    pub is_booking: bool,
    pub cnt: u32,
    /// Absent on test rows.
    pub hotel_cluster: Option<ClusterId>,
}

/// One destination's 149 latent features.
#[derive(Debug, Clone, PartialEq)]
pub struct DestinationLatent {
    pub id: u64,
    pub features: Vec<f64>,
}

/// Parsed log plus the latent table it will be joined against.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub events: Vec<SearchEvent>,
    pub latents: HashMap<u64, DestinationLatent>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(events: Vec<SearchEvent>, provenance: Provenance) -> Self {
        Dataset {
            events,
            latents: HashMap::new(),
            provenance,
        }
    }

    pub fn is_train(&self) -> bool {
        self.provenance == Provenance::Train
    }

    pub fn attach_latents(&mut self, latents: HashMap<u64, DestinationLatent>) {
        self.latents = latents;
    }
}

/// Non-fatal findings collected while parsing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseWarnings {
    /// Cells that looked like dates but did not parse; recorded as absent.
    pub invalid_dates: usize,
    /// Negative distances; recorded as absent.
    pub negative_distances: usize,
    /// Header columns outside the known schema, ignored.
    pub unknown_columns: Vec<String>,
}

impl ParseWarnings {
    pub fn total(&self) -> usize {
        self.invalid_dates + self.negative_distances + self.unknown_columns.len()
    }
}

#[derive(Debug)]
pub struct ParsedLog {
    pub dataset: Dataset,
    pub warnings: ParseWarnings,
}

struct ColumnMap {
    idx: HashMap<String, usize>,
}

impl ColumnMap {
    fn from_headers(headers: &csv::StringRecord, warnings: &mut ParseWarnings) -> Self {
        let mut idx = HashMap::new();
        for (i, name) in headers.iter().enumerate() {
            let name = name.trim();
            if !EVENT_COLUMNS.contains(&name) {
                warnings.unknown_columns.push(name.to_string());
            }
            idx.insert(name.to_string(), i);
        }
        ColumnMap { idx }
    }

    fn require(&self, name: &str) -> Result<usize, SchemaError> {
        self.idx
            .get(name)
            .copied()
            .ok_or_else(|| SchemaError::MissingColumn(name.to_string()))
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.idx.get(name).copied()
    }
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize) -> &'r str {
    record.get(idx).unwrap_or("").trim()
}

fn parse_u32(
    record: &csv::StringRecord,
    idx: usize,
    line: u64,
    column: &'static str,
) -> Result<u32, SchemaError> {
    let raw = field(record, idx);
    raw.parse::<u32>().map_err(|_| SchemaError::BadValue {
        line,
        column,
        expected: "non-negative integer",
        value: raw.to_string(),
    })
}

fn parse_u64(
    record: &csv::StringRecord,
    idx: usize,
    line: u64,
    column: &'static str,
) -> Result<u64, SchemaError> {
    let raw = field(record, idx);
    raw.parse::<u64>().map_err(|_| SchemaError::BadValue {
        line,
        column,
        expected: "non-negative integer",
        value: raw.to_string(),
    })
}

fn parse_bool(
    record: &csv::StringRecord,
    idx: usize,
    line: u64,
    column: &'static str,
) -> Result<bool, SchemaError> {
    match field(record, idx) {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(SchemaError::BadValue {
            line,
            column,
            expected: "0 or 1",
            value: other.to_string(),
        }),
    }
}

fn parse_distance(
    record: &csv::StringRecord,
    idx: usize,
    line: u64,
    warnings: &mut ParseWarnings,
) -> Result<Option<f64>, SchemaError> {
    let raw = field(record, idx);
    if raw.is_empty() {
        return Ok(None);
    }
    let v: f64 = raw.parse().map_err(|_| SchemaError::BadValue {
        line,
        column: "orig_destination_distance",
        expected: "real number",
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(SchemaError::BadValue {
            line,
            column: "orig_destination_distance",
            expected: "finite real number",
            value: raw.to_string(),
        });
    }
    if v < 0.0 {
        warnings.negative_distances += 1;
        return Ok(None);
    }
    Ok(Some(v))
}

fn parse_date(record: &csv::StringRecord, idx: usize, warnings: &mut ParseWarnings) -> Option<NaiveDate> {
    let raw = field(record, idx);
    if raw.is_empty() {
        return None;
    }
    match NaiveDate::parse_from_str(raw, DATE_FMT) {
        Ok(d) => Some(d),
        Err(_) => {
            warnings.invalid_dates += 1;
            None
        }
    }
}

fn parse_datetime(
    record: &csv::StringRecord,
    idx: usize,
    warnings: &mut ParseWarnings,
) -> Option<NaiveDateTime> {
    let raw = field(record, idx);
    if raw.is_empty() {
        return None;
    }
    match NaiveDateTime::parse_from_str(raw, DATETIME_FMT) {
        Ok(d) => Some(d),
        Err(_) => {
            warnings.invalid_dates += 1;
            None
        }
    }
}

fn parse_cluster(
    record: &csv::StringRecord,
    idx: Option<usize>,
    line: u64,
    kind: Provenance,
) -> Result<Option<ClusterId>, SchemaError> {
    let raw = idx.map(|i| field(record, i)).unwrap_or("");
    if raw.is_empty() {
        return match kind {
            Provenance::Train => Err(SchemaError::MissingCluster { line }),
            Provenance::Test => Ok(None),
        };
    }
    if kind == Provenance::Test {
        return Err(SchemaError::UnexpectedCluster {
            line,
            value: raw.to_string(),
        });
    }
    let v: i64 = raw.parse().map_err(|_| SchemaError::BadValue {
        line,
        column: "hotel_cluster",
        expected: "integer in [0,99]",
        value: raw.to_string(),
    })?;
    if !(0..CLUSTER_COUNT as i64).contains(&v) {
        return Err(SchemaError::ClusterRange { line, value: v });
    }
    Ok(Some(v as ClusterId))
}

/// Parses a search log into a typed dataset.
///
/// Row order is preserved. Empty cells become absent optionals. Train files
/// must carry `hotel_cluster` on every row; test files must not carry it.
pub fn parse_events(path: impl AsRef<Path>, kind: Provenance) -> Result<ParsedLog, SchemaError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_events_from_reader(BufReader::new(file), kind)
}

/// Same as [`parse_events`] but over any reader.
pub fn parse_events_from_reader<R: Read>(
    reader: R,
    kind: Provenance,
) -> Result<ParsedLog, SchemaError> {
    let mut warnings = ParseWarnings::default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = ColumnMap::from_headers(&headers, &mut warnings);

    // Every column except hotel_cluster is required for both kinds.
    let mut required = HashMap::new();
    for name in EVENT_COLUMNS.iter().take(EVENT_COLUMNS.len() - 1) {
        required.insert(*name, cols.require(name)?);
    }
    let cluster_idx = cols.optional("hotel_cluster");
    if kind == Provenance::Train && cluster_idx.is_none() {
        return Err(SchemaError::MissingColumn("hotel_cluster".to_string()));
    }
    let col = |name: &str| -> usize { required[name] };

    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(events.len() as u64 + 2);
        let event = SearchEvent {
            date_time: parse_datetime(&record, col("date_time"), &mut warnings),
            site_name: parse_u32(&record, col("site_name"), line, "site_name")?,
            posa_continent: parse_u32(&record, col("posa_continent"), line, "posa_continent")?,
            user_location_country: parse_u32(
                &record,
                col("user_location_country"),
                line,
                "user_location_country",
            )?,
            user_location_region: parse_u32(
                &record,
                col("user_location_region"),
                line,
                "user_location_region",
            )?,
            user_location_city: parse_u32(
                &record,
                col("user_location_city"),
                line,
                "user_location_city",
            )?,
            orig_destination_distance: parse_distance(
                &record,
                col("orig_destination_distance"),
                line,
                &mut warnings,
            )?,
            user_id: parse_u64(&record, col("user_id"), line, "user_id")?,
            is_mobile: parse_bool(&record, col("is_mobile"), line, "is_mobile")?,
            is_package: parse_bool(&record, col("is_package"), line, "is_package")?,
            channel: parse_u32(&record, col("channel"), line, "channel")?,
            srch_ci: parse_date(&record, col("srch_ci"), &mut warnings),
            srch_co: parse_date(&record, col("srch_co"), &mut warnings),
            srch_adults_cnt: parse_u32(&record, col("srch_adults_cnt"), line, "srch_adults_cnt")?,
            srch_children_cnt: parse_u32(
                &record,
                col("srch_children_cnt"),
                line,
                "srch_children_cnt",
            )?,
            srch_rm_cnt: parse_u32(&record, col("srch_rm_cnt"), line, "srch_rm_cnt")?,
            srch_destination_id: parse_u64(
                &record,
                col("srch_destination_id"),
                line,
                "srch_destination_id",
            )?,
            srch_destination_type_id: parse_u32(
                &record,
                col("srch_destination_type_id"),
                line,
                "srch_destination_type_id",
            )?,
            hotel_continent: parse_u32(&record, col("hotel_continent"), line, "hotel_continent")?,
            hotel_country: parse_u32(&record, col("hotel_country"), line, "hotel_country")?,
            hotel_market: parse_u32(&record, col("hotel_market"), line, "hotel_market")?,
            is_booking: parse_bool(&record, col("is_booking"), line, "is_booking")?,
            cnt: {
                let v = parse_u32(&record, col("cnt"), line, "cnt")?;
                if v == 0 {
                    return Err(SchemaError::BadValue {
                        line,
                        column: "cnt",
                        expected: "positive integer",
                        value: "0".to_string(),
                    });
                }
                v
            },
            hotel_cluster: parse_cluster(&record, cluster_idx, line, kind)?,
        };
        events.push(event);
    }

    Ok(ParsedLog {
        dataset: Dataset::new(events, kind),
        warnings,
    })
}

#[derive(Debug)]
pub struct ParsedDestinations {
    pub latents: HashMap<u64, DestinationLatent>,
    /// Rows whose id repeated an earlier row (last occurrence wins).
    pub duplicate_ids: usize,
}

/// Parses the destination latent table (`srch_destination_id,d1..d149`).
pub fn parse_destinations(path: impl AsRef<Path>) -> Result<ParsedDestinations, SchemaError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_destinations_from_reader(BufReader::new(file))
}

/// Same as [`parse_destinations`] but over any reader.
pub fn parse_destinations_from_reader<R: Read>(
    reader: R,
) -> Result<ParsedDestinations, SchemaError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != LATENT_DIM + 1 {
        return Err(SchemaError::ColumnCount {
            expected: LATENT_DIM + 1,
            found: headers.len(),
        });
    }

    let mut latents = HashMap::new();
    let mut duplicate_ids = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != LATENT_DIM + 1 {
            return Err(SchemaError::ColumnCount {
                expected: LATENT_DIM + 1,
                found: record.len(),
            });
        }
        let id = parse_u64(&record, 0, line, "srch_destination_id")?;
        let mut features = Vec::with_capacity(LATENT_DIM);
        for i in 1..=LATENT_DIM {
            let raw = field(&record, i);
            let v: f64 = raw.parse().map_err(|_| SchemaError::BadValue {
                line,
                column: "d*",
                expected: "real number",
                value: raw.to_string(),
            })?;
            features.push(v);
        }
        if latents.insert(id, DestinationLatent { id, features }).is_some() {
            duplicate_ids += 1;
        }
    }
    Ok(ParsedDestinations {
        latents,
        duplicate_ids,
    })
}

fn fmt_opt_date(d: Option<NaiveDate>) -> String {
    d.map(|d| d.format(DATE_FMT).to_string()).unwrap_or_default()
}

/// Writes a dataset back to log CSV. Train datasets emit the
/// `hotel_cluster` column, test datasets omit it.
pub fn write_events<W: Write>(dataset: &Dataset, writer: W) -> Result<(), SchemaError> {
    let mut w = BufWriter::new(writer);
    let with_cluster = dataset.is_train();
    let header: Vec<&str> = if with_cluster {
        EVENT_COLUMNS.to_vec()
    } else {
        EVENT_COLUMNS[..EVENT_COLUMNS.len() - 1].to_vec()
    };
    writeln!(w, "{}", header.join(","))?;
    for e in &dataset.events {
        let mut fields = vec![
            e.date_time
                .map(|d| d.format(DATETIME_FMT).to_string())
                .unwrap_or_default(),
            e.site_name.to_string(),
            e.posa_continent.to_string(),
            e.user_location_country.to_string(),
            e.user_location_region.to_string(),
            e.user_location_city.to_string(),
            e.orig_destination_distance
                .map(|d| d.to_string())
                .unwrap_or_default(),
            e.user_id.to_string(),
            (e.is_mobile as u8).to_string(),
            (e.is_package as u8).to_string(),
            e.channel.to_string(),
            fmt_opt_date(e.srch_ci),
            fmt_opt_date(e.srch_co),
            e.srch_adults_cnt.to_string(),
            e.srch_children_cnt.to_string(),
            e.srch_rm_cnt.to_string(),
            e.srch_destination_id.to_string(),
            e.srch_destination_type_id.to_string(),
            e.hotel_continent.to_string(),
            e.hotel_country.to_string(),
            e.hotel_market.to_string(),
            (e.is_booking as u8).to_string(),
            e.cnt.to_string(),
        ];
        if with_cluster {
            fields.push(e.hotel_cluster.map(|c| c.to_string()).unwrap_or_default());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the destination latent table.
pub fn write_destinations<'a, W: Write>(
    rows: impl Iterator<Item = &'a DestinationLatent>,
    writer: W,
) -> Result<(), SchemaError> {
    let mut w = BufWriter::new(writer);
    let mut header = String::from("srch_destination_id");
    for i in 1..=LATENT_DIM {
        header.push_str(&format!(",d{i}"));
    }
    writeln!(w, "{header}")?;
    for row in rows {
        let mut line = row.id.to_string();
        for v in &row.features {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// One invariant violation located at an event index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub row: usize,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    CheckoutBeforeCheckin,
    NegativeDistance,
    ClusterOutOfRange,
    MissingClusterInTrain,
    UnexpectedClusterInTest,
    ZeroCnt,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::CheckoutBeforeCheckin => "srch_co before srch_ci",
            ViolationKind::NegativeDistance => "negative orig_destination_distance",
            ViolationKind::ClusterOutOfRange => "hotel_cluster outside [0,99]",
            ViolationKind::MissingClusterInTrain => "train row without hotel_cluster",
            ViolationKind::UnexpectedClusterInTest => "test row with hotel_cluster",
            ViolationKind::ZeroCnt => "cnt is zero",
        };
        f.write_str(s)
    }
}

/// Per-column missing counts plus located invariant violations.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: usize,
    /// (column name, missing count) for every optional column.
    pub missing: Vec<(String, usize)>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn missing_fraction(&self, column: &str) -> Option<f64> {
        self.missing.iter().find(|(name, _)| name == column).map(|(_, n)| {
            if self.rows == 0 {
                0.0
            } else {
                *n as f64 / self.rows as f64
            }
        })
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows: {}", self.rows)?;
        for (name, n) in &self.missing {
            let pct = if self.rows == 0 {
                0.0
            } else {
                100.0 * *n as f64 / self.rows as f64
            };
            writeln!(f, "missing {name}: {n} ({pct:.1}%)")?;
        }
        if self.violations.is_empty() {
            writeln!(f, "violations: none")?;
        } else {
            writeln!(f, "violations: {}", self.violations.len())?;
            for v in &self.violations {
                writeln!(f, "  row {}: {}", v.row, v.kind)?;
            }
        }
        Ok(())
    }
}

/// Checks dataset invariants and counts missing values. Pure; findings are
/// reported, not raised.
pub fn validate(dataset: &Dataset) -> ValidationReport {
    let mut missing_date_time = 0usize;
    let mut missing_distance = 0usize;
    let mut missing_ci = 0usize;
    let mut missing_co = 0usize;
    let mut missing_cluster = 0usize;
    let mut violations = Vec::new();

    for (row, e) in dataset.events.iter().enumerate() {
        if e.date_time.is_none() {
            missing_date_time += 1;
        }
        if e.orig_destination_distance.is_none() {
            missing_distance += 1;
        }
        if e.srch_ci.is_none() {
            missing_ci += 1;
        }
        if e.srch_co.is_none() {
            missing_co += 1;
        }
        if e.hotel_cluster.is_none() {
            missing_cluster += 1;
        }

        if let (Some(ci), Some(co)) = (e.srch_ci, e.srch_co) {
            if co < ci {
                violations.push(Violation {
                    row,
                    kind: ViolationKind::CheckoutBeforeCheckin,
                });
            }
        }
        if let Some(d) = e.orig_destination_distance {
            if d < 0.0 {
                violations.push(Violation {
                    row,
                    kind: ViolationKind::NegativeDistance,
                });
            }
        }
        if let Some(c) = e.hotel_cluster {
            if c as usize >= CLUSTER_COUNT {
                violations.push(Violation {
                    row,
                    kind: ViolationKind::ClusterOutOfRange,
                });
            }
        }
        match dataset.provenance {
            Provenance::Train => {
                if e.hotel_cluster.is_none() {
                    violations.push(Violation {
                        row,
                        kind: ViolationKind::MissingClusterInTrain,
                    });
                }
            }
            Provenance::Test => {
                if e.hotel_cluster.is_some() {
                    violations.push(Violation {
                        row,
                        kind: ViolationKind::UnexpectedClusterInTest,
                    });
                }
            }
        }
        if e.cnt == 0 {
            violations.push(Violation {
                row,
                kind: ViolationKind::ZeroCnt,
            });
        }
    }

    ValidationReport {
        rows: dataset.events.len(),
        missing: vec![
            ("date_time".to_string(), missing_date_time),
            ("orig_destination_distance".to_string(), missing_distance),
            ("srch_ci".to_string(), missing_ci),
            ("srch_co".to_string(), missing_co),
            ("hotel_cluster".to_string(), missing_cluster),
        ],
        violations,
    }
}
