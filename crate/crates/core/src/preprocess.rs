//! Feature engineering over the raw search log.
//!
//! The pipeline prunes users who never booked, splits each user's searches
//! into per-destination-type sessions closed by bookings, encodes the
//! clusters rejected/selected within a session as a ±1 preference vector,
//! derives stay duration and a one-hot month of the stay start, and joins
//! reduced destination latents and completed distances into model-ready
//! feature rows.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};

use thiserror::Error;

use crate::completion::{predict_distance, CompletedMatrix};
use crate::pca::{transform, LatentProjection};
use crate::schema::{ClusterId, Dataset, SearchEvent};
use crate::{CLUSTER_COUNT, LATENT_DIM};

/// Stays longer than this are treated as data noise and recorded as absent.
pub const MAX_STAY_NIGHTS: i64 = 365;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("projection has input dimension {got}, expected {expected}")]
    ProjectionDimension { expected: usize, got: usize },
    #[error("operation requires a {expected}-marked dataset, got {got}")]
    WrongProvenance { expected: &'static str, got: String },
    #[error("features file: {0}")]
    BadFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A maximal run of one user's searches for one destination type, closed by
/// a booking when one occurred.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user_id: u64,
    pub srch_destination_type_id: u32,
    /// Indices into the source dataset's events, in time order. Includes the
    /// terminal booking when present (always last).
    pub events: Vec<usize>,
    pub terminal_booking: Option<usize>,
}

/// ±1 encoding of clusters rejected (−1) and selected (+1) within a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceVector(pub [i8; CLUSTER_COUNT]);

impl PreferenceVector {
    pub fn zeros() -> Self {
        PreferenceVector([0; CLUSTER_COUNT])
    }

    pub fn positive_index(&self) -> Option<usize> {
        self.0.iter().position(|&v| v == 1)
    }
}

impl Default for PreferenceVector {
    fn default() -> Self {
        Self::zeros()
    }
}

/// Drops every user without at least one booking. Row order is preserved.
pub fn prune_non_bookers(dataset: &Dataset) -> Result<Dataset, PreprocessError> {
    if !dataset.is_train() {
        return Err(PreprocessError::WrongProvenance {
            expected: "train",
            got: dataset.provenance.to_string(),
        });
    }
    let mut bookers: HashMap<u64, bool> = HashMap::new();
    for e in &dataset.events {
        let slot = bookers.entry(e.user_id).or_insert(false);
        *slot |= e.is_booking;
    }
    let events: Vec<SearchEvent> = dataset
        .events
        .iter()
        .filter(|e| bookers[&e.user_id])
        .cloned()
        .collect();
    let mut out = Dataset::new(events, dataset.provenance);
    out.latents = dataset.latents.clone();
    Ok(out)
}

/// Splits a dataset into per-(user, destination type) sessions.
///
/// Events are taken in (user_id, date_time, file order) order; within a
/// (user, type) group a booking closes the current session and the next
/// event opens a new one. Trailing unbooked events form a session without a
/// terminal booking. Sessions are emitted sorted by (user, first event).
pub fn build_sessions(dataset: &Dataset) -> Vec<Session> {
    let mut order: Vec<usize> = (0..dataset.events.len()).collect();
    order.sort_by(|&a, &b| {
        let ea = &dataset.events[a];
        let eb = &dataset.events[b];
        (ea.user_id, ea.date_time, a).cmp(&(eb.user_id, eb.date_time, b))
    });

    let mut sessions: Vec<Session> = Vec::new();
    let mut open: HashMap<(u64, u32), Session> = HashMap::new();
    let mut current_user: Option<u64> = None;

    fn flush_user(open: &mut HashMap<(u64, u32), Session>, sessions: &mut Vec<Session>) {
        let mut rest: Vec<Session> = open.drain().map(|(_, s)| s).collect();
        rest.sort_by_key(|s| s.events[0]);
        sessions.append(&mut rest);
    }

    for idx in order {
        let e = &dataset.events[idx];
        if current_user != Some(e.user_id) {
            flush_user(&mut open, &mut sessions);
            current_user = Some(e.user_id);
        }
        let key = (e.user_id, e.srch_destination_type_id);
        let session = open.entry(key).or_insert_with(|| Session {
            user_id: e.user_id,
            srch_destination_type_id: e.srch_destination_type_id,
            events: Vec::new(),
            terminal_booking: None,
        });
        session.events.push(idx);
        if e.is_booking {
            session.terminal_booking = Some(idx);
            let done = open.remove(&key).expect("session just inserted");
            sessions.push(done);
        }
    }
    flush_user(&mut open, &mut sessions);

    sessions.sort_by_key(|s| (s.user_id, s.events[0]));
    sessions
}

/// Builds the ±1 preference vector for one session.
///
/// The booked cluster gets +1; every distinct cluster clicked but not booked
/// in the session gets −1. If a cluster was both clicked and booked, the +1
/// wins.
pub fn build_preference_vector(dataset: &Dataset, session: &Session) -> PreferenceVector {
    let mut v = PreferenceVector::zeros();
    let booked = session
        .terminal_booking
        .and_then(|i| dataset.events[i].hotel_cluster);
    for &i in &session.events {
        let e = &dataset.events[i];
        if e.is_booking {
            continue;
        }
        if let Some(c) = e.hotel_cluster {
            if (c as usize) < CLUSTER_COUNT {
                v.0[c as usize] = -1;
            }
        }
    }
    if let Some(c) = booked {
        if (c as usize) < CLUSTER_COUNT {
            v.0[c as usize] = 1;
        }
    }
    v
}

/// Whole-night stay duration: `srch_co − srch_ci` in days.
///
/// Absent when either date is missing, the difference is negative, or the
/// stay exceeds [`MAX_STAY_NIGHTS`].
pub fn compute_duration(event: &SearchEvent) -> Option<u32> {
    let (ci, co) = (event.srch_ci?, event.srch_co?);
    let nights = (co - ci).num_days();
    if (0..=MAX_STAY_NIGHTS).contains(&nights) {
        Some(nights as u32)
    } else {
        None
    }
}

/// One-hot month of the stay start; all zeros when `srch_ci` is absent.
pub fn month_onehot(event: &SearchEvent) -> [u8; 12] {
    let mut bits = [0u8; 12];
    if let Some(ci) = event.srch_ci {
        let month = chrono::Datelike::month(&ci) as usize;
        bits[month - 1] = 1;
    }
    bits
}

/// Model-ready feature row for one booking (train) or one query row (test).
#[derive(Debug, Clone, PartialEq)]
pub struct EngineeredFeatures {
    /// Index of the source event in its dataset; ties predictions back to
    /// rows and truth tables.
    pub row: usize,
    pub site_name: u32,
    pub posa_continent: u32,
    pub user_location_country: u32,
    pub user_location_region: u32,
    pub user_location_city: u32,
    pub channel: u32,
    pub is_mobile: bool,
    pub is_package: bool,
    pub srch_adults_cnt: u32,
    pub srch_children_cnt: u32,
    pub srch_rm_cnt: u32,
    pub srch_destination_type_id: u32,
    pub hotel_continent: u32,
    pub hotel_country: u32,
    pub hotel_market: u32,
    pub preference: PreferenceVector,
    pub duration: Option<u32>,
    pub month_onehot: [u8; 12],
    /// Reduced destination latents; zeros when the destination is unknown.
    pub latent: Vec<f64>,
    /// Observed distance when present, completed-matrix prediction otherwise.
    pub distance: f64,
    pub label: Option<ClusterId>,
}

/// How a dense feature column is interpreted by models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    /// Integer id; naive Bayes one-hot binarizes these, trees split on the
    /// ordered integer values directly.
    Categorical,
    /// Ordinary numeric value; binarized at the training median where a
    /// Bernoulli input is required.
    Numeric,
}

/// Ablation/reporting group a column belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureGroup {
    Geography,
    Search,
    Duration,
    Month,
    Preference,
    Latent,
    Distance,
}

impl FeatureGroup {
    pub const ALL: [FeatureGroup; 7] = [
        FeatureGroup::Geography,
        FeatureGroup::Search,
        FeatureGroup::Duration,
        FeatureGroup::Month,
        FeatureGroup::Preference,
        FeatureGroup::Latent,
        FeatureGroup::Distance,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FeatureGroup::Geography => "geography",
            FeatureGroup::Search => "search",
            FeatureGroup::Duration => "duration",
            FeatureGroup::Month => "month",
            FeatureGroup::Preference => "preference",
            FeatureGroup::Latent => "latents",
            FeatureGroup::Distance => "distance",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|g| g.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub group: FeatureGroup,
}

/// Names, kinds, and groups of the dense feature columns, in the order
/// produced by [`FeatureLayout::to_dense`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub columns: Vec<ColumnSpec>,
    latent_dim: usize,
}

impl FeatureLayout {
    /// Layout for feature rows carrying `latent_dim` reduced latents.
    pub fn new(latent_dim: usize) -> Self {
        use ColumnKind::*;
        use FeatureGroup::*;
        let mut columns = Vec::new();
        let mut push = |name: &str, kind: ColumnKind, group: FeatureGroup| {
            columns.push(ColumnSpec {
                name: name.to_string(),
                kind,
                group,
            });
        };
        push("site_name", Categorical, Geography);
        push("posa_continent", Categorical, Geography);
        push("user_location_country", Categorical, Geography);
        push("user_location_region", Categorical, Geography);
        push("user_location_city", Categorical, Geography);
        push("channel", Categorical, Search);
        push("is_mobile", Numeric, Search);
        push("is_package", Numeric, Search);
        push("srch_adults_cnt", Numeric, Search);
        push("srch_children_cnt", Numeric, Search);
        push("srch_rm_cnt", Numeric, Search);
        push("srch_destination_type_id", Categorical, Search);
        push("hotel_continent", Categorical, Geography);
        push("hotel_country", Categorical, Geography);
        push("hotel_market", Categorical, Geography);
        push("duration", Numeric, Duration);
        for m in 1..=12 {
            push(&format!("month_{m:02}"), Numeric, Month);
        }
        for c in 0..CLUSTER_COUNT {
            push(&format!("pref_{c:02}"), Numeric, Preference);
        }
        for l in 0..latent_dim {
            push(&format!("latent_{l:02}"), Numeric, Latent);
        }
        push("distance", Numeric, Distance);
        FeatureLayout {
            columns,
            latent_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn kinds(&self) -> Vec<ColumnKind> {
        self.columns.iter().map(|c| c.kind).collect()
    }

    pub fn group_columns(&self, group: FeatureGroup) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.group == group)
            .map(|(i, _)| i)
            .collect()
    }

    /// Dense numeric row for one feature struct. Missing duration becomes
    /// NaN; models decide how to treat it.
    pub fn to_dense(&self, f: &EngineeredFeatures) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.push(f.site_name as f64);
        out.push(f.posa_continent as f64);
        out.push(f.user_location_country as f64);
        out.push(f.user_location_region as f64);
        out.push(f.user_location_city as f64);
        out.push(f.channel as f64);
        out.push(f.is_mobile as u8 as f64);
        out.push(f.is_package as u8 as f64);
        out.push(f.srch_adults_cnt as f64);
        out.push(f.srch_children_cnt as f64);
        out.push(f.srch_rm_cnt as f64);
        out.push(f.srch_destination_type_id as f64);
        out.push(f.hotel_continent as f64);
        out.push(f.hotel_country as f64);
        out.push(f.hotel_market as f64);
        out.push(f.duration.map(|d| d as f64).unwrap_or(f64::NAN));
        for b in f.month_onehot {
            out.push(b as f64);
        }
        for v in f.preference.0 {
            out.push(v as f64);
        }
        out.extend_from_slice(&f.latent);
        out.push(f.distance);
        out
    }
}

/// Most-recent-session preference vectors per (user, destination type),
/// used to featurize test rows where no clicks are observable.
#[derive(Debug, Clone, Default)]
pub struct PreferenceLookup {
    map: HashMap<(u64, u32), PreferenceVector>,
}

impl PreferenceLookup {
    /// Builds the lookup from train sessions. Sessions arrive ordered per
    /// (user, type), so later entries overwrite earlier ones.
    pub fn build(train: &Dataset, sessions: &[Session]) -> Self {
        let mut map = HashMap::new();
        for s in sessions {
            let v = build_preference_vector(train, s);
            map.insert((s.user_id, s.srch_destination_type_id), v);
        }
        PreferenceLookup { map }
    }

    pub fn get(&self, user_id: u64, dest_type: u32) -> PreferenceVector {
        self.map
            .get(&(user_id, dest_type))
            .cloned()
            .unwrap_or_default()
    }
}

/// Assembles model-ready feature rows.
///
/// For a train-marked `dataset`, one row is emitted per session with a
/// terminal booking (label = booked cluster, preference vector from that
/// session); the redundant click rows contribute only through the vector.
/// For a test-marked `dataset`, one row is emitted per event (label absent,
/// preference vector looked up from the user's most recent train session of
/// the same destination type).
///
/// `train` is the dataset `sessions` index into; pass the dataset itself
/// when assembling train features.
pub fn assemble_features(
    dataset: &Dataset,
    train: &Dataset,
    sessions: &[Session],
    projection: &LatentProjection,
    completed: &CompletedMatrix,
) -> Result<Vec<EngineeredFeatures>, PreprocessError> {
    if projection.dim() != LATENT_DIM {
        return Err(PreprocessError::ProjectionDimension {
            expected: LATENT_DIM,
            got: projection.dim(),
        });
    }

    let latent_for = |dataset: &Dataset, dest_id: u64| -> Vec<f64> {
        dataset
            .latents
            .get(&dest_id)
            .map(|l| transform(projection, &l.features).expect("latent rows are 149-dim"))
            .unwrap_or_else(|| vec![0.0; projection.k()])
    };

    let features_of = |ds: &Dataset, row: usize, preference: PreferenceVector| {
        let e = &ds.events[row];
        let distance = e
            .orig_destination_distance
            .unwrap_or_else(|| predict_distance(completed, e.user_location_city, e.hotel_market));
        EngineeredFeatures {
            row,
            site_name: e.site_name,
            posa_continent: e.posa_continent,
            user_location_country: e.user_location_country,
            user_location_region: e.user_location_region,
            user_location_city: e.user_location_city,
            channel: e.channel,
            is_mobile: e.is_mobile,
            is_package: e.is_package,
            srch_adults_cnt: e.srch_adults_cnt,
            srch_children_cnt: e.srch_children_cnt,
            srch_rm_cnt: e.srch_rm_cnt,
            srch_destination_type_id: e.srch_destination_type_id,
            hotel_continent: e.hotel_continent,
            hotel_country: e.hotel_country,
            hotel_market: e.hotel_market,
            preference,
            duration: compute_duration(e),
            month_onehot: month_onehot(e),
            latent: latent_for(ds, e.srch_destination_id),
            distance,
            label: e.hotel_cluster,
        }
    };

    let mut out = Vec::new();
    if dataset.is_train() {
        for session in sessions {
            let Some(booking) = session.terminal_booking else {
                continue;
            };
            let preference = build_preference_vector(dataset, session);
            out.push(features_of(dataset, booking, preference));
        }
    } else {
        let lookup = PreferenceLookup::build(train, sessions);
        for row in 0..dataset.events.len() {
            let e = &dataset.events[row];
            let preference = lookup.get(e.user_id, e.srch_destination_type_id);
            let mut f = features_of(dataset, row, preference);
            f.label = None;
            out.push(f);
        }
    }
    Ok(out)
}

/// Writes feature rows as a columnar CSV cache (documented header:
/// row,label,raw columns...,duration,month_*,pref_*,latent_*,distance).
pub fn write_features<W: Write>(
    features: &[EngineeredFeatures],
    layout: &FeatureLayout,
    writer: W,
) -> Result<(), PreprocessError> {
    let mut w = std::io::BufWriter::new(writer);
    let names: Vec<&str> = layout.columns.iter().map(|c| c.name.as_str()).collect();
    writeln!(w, "row,label,{}", names.join(","))?;
    for f in features {
        let dense = layout.to_dense(f);
        let mut line = format!(
            "{},{}",
            f.row,
            f.label.map(|l| l.to_string()).unwrap_or_default()
        );
        for v in dense {
            line.push(',');
            if !v.is_nan() {
                line.push_str(&v.to_string());
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature cache back. Returns the rows plus the layout recovered
/// from the header.
pub fn read_features<R: Read>(
    reader: R,
) -> Result<(Vec<EngineeredFeatures>, FeatureLayout), PreprocessError> {
    let mut lines = BufReader::new(reader).lines();
    let header = lines
        .next()
        .ok_or_else(|| PreprocessError::BadFile("empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let latent_dim = cols.iter().filter(|c| c.starts_with("latent_")).count();
    let layout = FeatureLayout::new(latent_dim);
    let expected_header: Vec<String> = ["row".to_string(), "label".to_string()]
        .into_iter()
        .chain(layout.columns.iter().map(|c| c.name.clone()))
        .collect();
    if cols != expected_header.iter().map(|s| s.as_str()).collect::<Vec<_>>() {
        return Err(PreprocessError::BadFile(
            "header does not match the feature-cache layout".into(),
        ));
    }

    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != layout.len() + 2 {
            return Err(PreprocessError::BadFile(format!(
                "line {}: {} fields, expected {}",
                lineno + 2,
                fields.len(),
                layout.len() + 2
            )));
        }
        let parse_f = |s: &str| -> Result<f64, PreprocessError> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse()
                    .map_err(|_| PreprocessError::BadFile(format!("bad float `{s}`")))
            }
        };
        let row: usize = fields[0]
            .parse()
            .map_err(|_| PreprocessError::BadFile(format!("bad row id `{}`", fields[0])))?;
        let label: Option<ClusterId> = if fields[1].is_empty() {
            None
        } else {
            Some(
                fields[1]
                    .parse()
                    .map_err(|_| PreprocessError::BadFile(format!("bad label `{}`", fields[1])))?,
            )
        };
        let dense: Result<Vec<f64>, _> = fields[2..].iter().map(|s| parse_f(s)).collect();
        let dense = dense?;

        let g = |i: usize| dense[i] as u32;
        let mut month = [0u8; 12];
        for (i, b) in month.iter_mut().enumerate() {
            *b = dense[16 + i] as u8;
        }
        let mut preference = PreferenceVector::zeros();
        for (i, p) in preference.0.iter_mut().enumerate() {
            *p = dense[28 + i] as i8;
        }
        let latent = dense[128..128 + latent_dim].to_vec();
        out.push(EngineeredFeatures {
            row,
            site_name: g(0),
            posa_continent: g(1),
            user_location_country: g(2),
            user_location_region: g(3),
            user_location_city: g(4),
            channel: g(5),
            is_mobile: dense[6] != 0.0,
            is_package: dense[7] != 0.0,
            srch_adults_cnt: g(8),
            srch_children_cnt: g(9),
            srch_rm_cnt: g(10),
            srch_destination_type_id: g(11),
            hotel_continent: g(12),
            hotel_country: g(13),
            hotel_market: g(14),
            duration: if dense[15].is_nan() {
                None
            } else {
                Some(dense[15] as u32)
            },
            month_onehot: month,
            preference,
            latent,
            distance: dense[128 + latent_dim],
            label,
        });
    }
    Ok((out, layout))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::test_util::event;
    use crate::schema::Provenance;
    use chrono::NaiveDate;

    fn at(mut e: SearchEvent, minute: u32) -> SearchEvent {
        e.date_time = NaiveDate::from_ymd_opt(2014, 1, 1)
            .unwrap()
            .and_hms_opt(12, minute, 0);
        e
    }

    /// The five-row fixture: user 1 clicks clusters 3 and 56 (type 1),
    /// clicks 35 (type 6), then books 23 (type 1) and 25 (type 6).
    fn five_row_fixture() -> Dataset {
        let events = vec![
            at(event(1, 1, 3, false), 0),
            at(event(1, 1, 56, false), 1),
            at(event(1, 6, 35, false), 2),
            at(event(1, 1, 23, true), 3),
            at(event(1, 6, 25, true), 4),
        ];
        Dataset::new(events, Provenance::Train)
    }

    #[test]
    fn prune_keeps_only_booking_users() {
        let events = vec![
            at(event(1, 1, 3, false), 0),
            at(event(1, 1, 23, true), 1),
            at(event(2, 1, 5, false), 2),
            at(event(2, 1, 6, false), 3),
            at(event(3, 1, 9, true), 4),
        ];
        let ds = Dataset::new(events, Provenance::Train);
        let pruned = prune_non_bookers(&ds).unwrap();
        let users: Vec<u64> = pruned.events.iter().map(|e| e.user_id).collect();
        assert_eq!(users, vec![1, 1, 3]);
    }

    #[test]
    fn prune_is_identity_when_everyone_booked() {
        let ds = five_row_fixture();
        let pruned = prune_non_bookers(&ds).unwrap();
        assert_eq!(pruned.events, ds.events);
    }

    #[test]
    fn prune_of_empty_dataset_is_empty() {
        let ds = Dataset::new(Vec::new(), Provenance::Train);
        assert!(prune_non_bookers(&ds).unwrap().events.is_empty());
    }

    #[test]
    fn sessions_split_by_user_and_type() {
        let ds = five_row_fixture();
        let sessions = build_sessions(&ds);
        assert_eq!(sessions.len(), 2);

        let type1 = &sessions[0];
        assert_eq!(type1.srch_destination_type_id, 1);
        assert_eq!(type1.events, vec![0, 1, 3]);
        assert_eq!(type1.terminal_booking, Some(3));

        let type6 = &sessions[1];
        assert_eq!(type6.srch_destination_type_id, 6);
        assert_eq!(type6.events, vec![2, 4]);
        assert_eq!(type6.terminal_booking, Some(4));
    }

    #[test]
    fn single_booking_is_a_session_of_one() {
        let ds = Dataset::new(vec![at(event(7, 1, 50, true), 0)], Provenance::Train);
        let sessions = build_sessions(&ds);
        assert_eq!(sessions.len(), 1);
        assert_eq!(sessions[0].events, vec![0]);
        assert_eq!(sessions[0].terminal_booking, Some(0));
    }

    #[test]
    fn booking_closes_session_and_next_click_opens_new_one() {
        let events = vec![
            at(event(4, 1, 10, false), 0),
            at(event(4, 1, 11, true), 1),
            at(event(4, 1, 12, false), 2),
        ];
        let ds = Dataset::new(events, Provenance::Train);
        let sessions = build_sessions(&ds);
        assert_eq!(sessions.len(), 2);
        assert_eq!(sessions[0].events, vec![0, 1]);
        assert_eq!(sessions[0].terminal_booking, Some(1));
        assert_eq!(sessions[1].events, vec![2]);
        assert_eq!(sessions[1].terminal_booking, None);
    }

    #[test]
    fn session_splitting_is_idempotent() {
        let ds = five_row_fixture();
        for session in build_sessions(&ds) {
            let sub_events: Vec<SearchEvent> = session
                .events
                .iter()
                .map(|&i| ds.events[i].clone())
                .collect();
            let sub = Dataset::new(sub_events, Provenance::Train);
            let again = build_sessions(&sub);
            assert_eq!(again.len(), 1);
            assert_eq!(again[0].events.len(), session.events.len());
            assert_eq!(
                again[0].terminal_booking.is_some(),
                session.terminal_booking.is_some()
            );
        }
    }

    #[test]
    fn preference_vectors_match_the_worked_example() {
        let ds = five_row_fixture();
        let sessions = build_sessions(&ds);

        let v1 = build_preference_vector(&ds, &sessions[0]);
        assert_eq!(v1.0[23], 1);
        assert_eq!(v1.0[3], -1);
        assert_eq!(v1.0[56], -1);
        assert_eq!(v1.0.iter().filter(|&&x| x != 0).count(), 3);

        let v6 = build_preference_vector(&ds, &sessions[1]);
        assert_eq!(v6.0[25], 1);
        assert_eq!(v6.0[35], -1);
        assert_eq!(v6.0.iter().filter(|&&x| x != 0).count(), 2);
    }

    #[test]
    fn booking_only_session_has_single_positive() {
        let ds = Dataset::new(vec![at(event(9, 1, 7, true), 0)], Provenance::Train);
        let sessions = build_sessions(&ds);
        let v = build_preference_vector(&ds, &sessions[0]);
        assert_eq!(v.0[7], 1);
        assert_eq!(v.0.iter().filter(|&&x| x != 0).count(), 1);
    }

    #[test]
    fn clicked_and_booked_cluster_keeps_positive() {
        let events = vec![at(event(9, 1, 7, false), 0), at(event(9, 1, 7, true), 1)];
        let ds = Dataset::new(events, Provenance::Train);
        let sessions = build_sessions(&ds);
        let v = build_preference_vector(&ds, &sessions[0]);
        assert_eq!(v.0[7], 1);
    }

    #[test]
    fn duration_is_whole_nights() {
        let mut e = event(1, 1, 5, true);
        e.srch_ci = NaiveDate::from_ymd_opt(2014, 8, 11);
        e.srch_co = NaiveDate::from_ymd_opt(2014, 8, 14);
        assert_eq!(compute_duration(&e), Some(3));

        e.srch_co = e.srch_ci;
        assert_eq!(compute_duration(&e), Some(0));

        e.srch_co = NaiveDate::from_ymd_opt(2014, 8, 1);
        assert_eq!(compute_duration(&e), None);

        e.srch_co = NaiveDate::from_ymd_opt(2016, 8, 11);
        assert_eq!(compute_duration(&e), None, "cap at {MAX_STAY_NIGHTS}");

        e.srch_ci = None;
        assert_eq!(compute_duration(&e), None);
    }

    #[test]
    fn month_onehot_sets_single_bit() {
        let mut e = event(1, 1, 5, true);
        e.srch_ci = NaiveDate::from_ymd_opt(2014, 8, 11);
        let bits = month_onehot(&e);
        assert_eq!(bits[7], 1);
        assert_eq!(bits.iter().sum::<u8>(), 1);

        e.srch_ci = NaiveDate::from_ymd_opt(2014, 1, 2);
        assert_eq!(month_onehot(&e)[0], 1);

        e.srch_ci = None;
        assert_eq!(month_onehot(&e), [0u8; 12]);
    }

    fn tiny_projection() -> LatentProjection {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..LATENT_DIM).map(|j| ((i * j) % 7) as f64).collect())
            .collect();
        crate::pca::fit_pca(&rows, 2).unwrap()
    }

    fn tiny_completed() -> CompletedMatrix {
        let m = crate::completion::normalize(
            &crate::completion::DistanceMatrix::from_entries(&[
                (48862, 628, 2000.0),
                (48862, 629, 1000.0),
                (111, 628, 1500.0),
            ])
            .unwrap(),
        );
        crate::completion::als_complete(
            &m,
            &crate::completion::CompletionParams {
                rank: 1,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn train_assembly_emits_one_row_per_booking() {
        let ds = five_row_fixture();
        let sessions = build_sessions(&ds);
        let features =
            assemble_features(&ds, &ds, &sessions, &tiny_projection(), &tiny_completed()).unwrap();
        assert_eq!(features.len(), 2);
        assert_eq!(features[0].label, Some(23));
        assert_eq!(features[0].preference.positive_index(), Some(23));
        assert_eq!(features[0].preference.0[3], -1);
        assert_eq!(features[1].label, Some(25));
        assert_eq!(features[1].preference.positive_index(), Some(25));
    }

    #[test]
    fn observed_distance_is_kept_and_missing_is_completed() {
        let mut test_events = vec![at(event(1, 1, 0, false), 0), at(event(1, 1, 0, false), 1)];
        for e in &mut test_events {
            e.hotel_cluster = None;
        }
        test_events[0].orig_destination_distance = Some(777.0);
        test_events[1].orig_destination_distance = None;
        let test = Dataset::new(test_events, Provenance::Test);

        let train = five_row_fixture();
        let sessions = build_sessions(&train);
        let completed = tiny_completed();
        let features =
            assemble_features(&test, &train, &sessions, &tiny_projection(), &completed).unwrap();
        assert_eq!(features[0].distance, 777.0);
        let expected = predict_distance(&completed, 48862, 628);
        assert_eq!(features[1].distance, expected);
    }

    #[test]
    fn test_rows_reuse_latest_train_session_vector() {
        let train = five_row_fixture();
        let sessions = build_sessions(&train);

        let mut q1 = at(event(1, 1, 0, false), 9);
        q1.hotel_cluster = None;
        let mut q2 = at(event(1, 2, 0, false), 10); // type the user never used
        q2.hotel_cluster = None;
        let mut q3 = at(event(99, 1, 0, false), 11); // unseen user
        q3.hotel_cluster = None;
        let test = Dataset::new(vec![q1, q2, q3], Provenance::Test);

        let features = assemble_features(
            &test,
            &train,
            &sessions,
            &tiny_projection(),
            &tiny_completed(),
        )
        .unwrap();
        assert_eq!(features[0].preference.positive_index(), Some(23));
        assert_eq!(features[1].preference, PreferenceVector::zeros());
        assert_eq!(features[2].preference, PreferenceVector::zeros());
        assert!(features.iter().all(|f| f.label.is_none()));
    }

    #[test]
    fn unknown_destination_latents_are_zero() {
        let mut ds = five_row_fixture();
        ds.events[3].srch_destination_id = 4242; // not in the latent table
        let sessions = build_sessions(&ds);
        let features =
            assemble_features(&ds, &ds, &sessions, &tiny_projection(), &tiny_completed()).unwrap();
        assert_eq!(features[0].latent, vec![0.0, 0.0]);
    }

    #[test]
    fn emitted_examples_equal_bookings_after_pruning() {
        let mut events = Vec::new();
        for u in 0..8u64 {
            events.push(at(event(u, 1, (u % 100) as u8, false), 0));
            if u % 2 == 0 {
                events.push(at(event(u, 1, (u % 100) as u8, true), 1));
            }
        }
        let ds = Dataset::new(events, Provenance::Train);
        let pruned = prune_non_bookers(&ds).unwrap();
        let sessions = build_sessions(&pruned);
        let features = assemble_features(
            &pruned,
            &pruned,
            &sessions,
            &tiny_projection(),
            &tiny_completed(),
        )
        .unwrap();
        let bookings = pruned.events.iter().filter(|e| e.is_booking).count();
        assert_eq!(features.len(), bookings);
        for f in &features {
            assert_eq!(f.preference.positive_index().map(|i| i as u8), f.label);
        }
    }

    #[test]
    fn feature_cache_roundtrip() {
        let ds = five_row_fixture();
        let sessions = build_sessions(&ds);
        let layout = FeatureLayout::new(2);
        let mut features =
            assemble_features(&ds, &ds, &sessions, &tiny_projection(), &tiny_completed()).unwrap();
        features[0].duration = None;
        let mut buf = Vec::new();
        write_features(&features, &layout, &mut buf).unwrap();
        let (back, back_layout) = read_features(buf.as_slice()).unwrap();
        assert_eq!(back_layout, layout);
        assert_eq!(back, features);
    }

    #[test]
    fn layout_groups_cover_all_columns() {
        let layout = FeatureLayout::new(20);
        assert_eq!(layout.len(), 149);
        let mut covered = 0;
        for g in FeatureGroup::ALL {
            covered += layout.group_columns(g).len();
        }
        assert_eq!(covered, layout.len());
        assert_eq!(layout.group_columns(FeatureGroup::Preference).len(), 100);
        assert_eq!(layout.group_columns(FeatureGroup::Latent).len(), 20);
    }

    #[test]
    fn dense_row_matches_layout() {
        let ds = five_row_fixture();
        let sessions = build_sessions(&ds);
        let layout = FeatureLayout::new(2);
        let features =
            assemble_features(&ds, &ds, &sessions, &tiny_projection(), &tiny_completed()).unwrap();
        let dense = layout.to_dense(&features[0]);
        assert_eq!(dense.len(), layout.len());
        // spot checks: month bit for August, preference entries
        let month_col = 16 + 7;
        assert_eq!(dense[month_col], 1.0);
        assert_eq!(dense[28 + 23], 1.0);
        assert_eq!(dense[28 + 3], -1.0);
        assert_eq!(*dense.last().unwrap(), features[0].distance);
    }

    #[test]
    fn projection_dimension_mismatch_is_an_error() {
        let ds = five_row_fixture();
        let sessions = build_sessions(&ds);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64; 10]).collect();
        let bad = crate::pca::fit_pca(&rows, 2).unwrap();
        let err = assemble_features(&ds, &ds, &sessions, &bad, &tiny_completed()).unwrap_err();
        assert!(matches!(
            err,
            PreprocessError::ProjectionDimension {
                expected: 149,
                got: 10
            }
        ));
    }
}
