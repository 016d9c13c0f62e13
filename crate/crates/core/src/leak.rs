//! Train/test key matching over the leak columns, with partial-match
//! fallback and popularity fallback.
//!
//! Train rows with an observed distance are indexed at three key levels:
//! L0 = (user country, region, city, distance, hotel market),
//! L1 = (city, distance, market), L2 = (city, distance). Distances compare
//! after rounding to four decimal places so values survive text
//! round-trips. A test row is resolved at the first level with matches;
//! matched clusters are ranked by weighted count (bookings outweigh
//! clicks) and padded from the popularity table.

use std::collections::HashMap;
use std::fmt;

use crate::ensemble::{first_five_distinct, RankedPrediction};
use crate::schema::{ClusterId, Dataset, SearchEvent};
use crate::CLUSTER_COUNT;

/// Match specificity, in cascade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MatchLevel {
    /// All five leak columns matched.
    L0,
    /// (city, distance, market) matched.
    L1,
    /// (city, distance) matched.
    L2,
    /// No level matched (or the row has no distance).
    NoMatch,
}

impl fmt::Display for MatchLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MatchLevel::L0 => "L0",
            MatchLevel::L1 => "L1",
            MatchLevel::L2 => "L2",
            MatchLevel::NoMatch => "none",
        };
        f.write_str(s)
    }
}

/// Weights and cascade used when ranking matched clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct LeakParams {
    pub w_book: f64,
    pub w_click: f64,
    /// Levels tried in order; [`MatchLevel::NoMatch`] entries are ignored.
    pub cascade: Vec<MatchLevel>,
}

impl Default for LeakParams {
    fn default() -> Self {
        LeakParams {
            w_book: 5.0,
            w_click: 1.0,
            cascade: vec![MatchLevel::L0, MatchLevel::L1, MatchLevel::L2],
        }
    }
}

/// Distance key: rounded to 4 decimal places.
fn distance_key(d: f64) -> i64 {
    (d * 1e4).round() as i64
}

type L0Key = (u32, u32, u32, i64, u32);
type L1Key = (u32, i64, u32);
type L2Key = (u32, i64);

/// Multiset index of train (cluster, is_booking) pairs at each key level.
#[derive(Debug, Clone, Default)]
pub struct LeakIndex {
    l0: HashMap<L0Key, Vec<(ClusterId, bool)>>,
    l1: HashMap<L1Key, Vec<(ClusterId, bool)>>,
    l2: HashMap<L2Key, Vec<(ClusterId, bool)>>,
}

impl LeakIndex {
    /// Indexes every train row with an observed distance at all levels.
    /// Rows without a distance are never indexed.
    pub fn build(train: &Dataset) -> Self {
        let mut index = LeakIndex::default();
        for e in &train.events {
            let Some(distance) = e.orig_destination_distance else {
                continue;
            };
            let Some(cluster) = e.hotel_cluster else {
                continue;
            };
            let d = distance_key(distance);
            let entry = (cluster, e.is_booking);
            index
                .l0
                .entry((
                    e.user_location_country,
                    e.user_location_region,
                    e.user_location_city,
                    d,
                    e.hotel_market,
                ))
                .or_default()
                .push(entry);
            index
                .l1
                .entry((e.user_location_city, d, e.hotel_market))
                .or_default()
                .push(entry);
            index
                .l2
                .entry((e.user_location_city, d))
                .or_default()
                .push(entry);
        }
        index
    }

    pub fn len_l0(&self) -> usize {
        self.l0.len()
    }

    fn matches(&self, level: MatchLevel, e: &SearchEvent, d: i64) -> Option<&[(ClusterId, bool)]> {
        match level {
            MatchLevel::L0 => self
                .l0
                .get(&(
                    e.user_location_country,
                    e.user_location_region,
                    e.user_location_city,
                    d,
                    e.hotel_market,
                ))
                .map(|v| v.as_slice()),
            MatchLevel::L1 => self
                .l1
                .get(&(e.user_location_city, d, e.hotel_market))
                .map(|v| v.as_slice()),
            MatchLevel::L2 => self
                .l2
                .get(&(e.user_location_city, d))
                .map(|v| v.as_slice()),
            MatchLevel::NoMatch => None,
        }
    }
}

/// Weighted per-cluster counts over the train log.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityTable {
    weights: Vec<f64>,
    /// All 100 cluster ids ranked by descending weight, ties ascending.
    ranking: Vec<ClusterId>,
}

impl PopularityTable {
    pub fn build(train: &Dataset, w_book: f64, w_click: f64) -> Self {
        let mut weights = vec![0.0f64; CLUSTER_COUNT];
        for e in &train.events {
            if let Some(c) = e.hotel_cluster {
                weights[c as usize] += if e.is_booking { w_book } else { w_click };
            }
        }
        let mut ranking: Vec<ClusterId> = (0..CLUSTER_COUNT as u8).collect();
        ranking.sort_by(|&a, &b| {
            weights[b as usize]
                .partial_cmp(&weights[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        PopularityTable { weights, ranking }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Full cluster ranking by weighted count.
    pub fn ranking(&self) -> &[ClusterId] {
        &self.ranking
    }
}

/// The five most popular clusters; the constant baseline prediction.
pub fn popularity_top5(popularity: &PopularityTable) -> RankedPrediction {
    first_five_distinct(popularity.ranking().iter().copied())
        .expect("ranking covers all 100 clusters")
}

/// One leak resolution: the padded prediction, the level it matched at, and
/// the ranked matched clusters before padding (at most five).
#[derive(Debug, Clone, PartialEq)]
pub struct LeakOutcome {
    pub prediction: RankedPrediction,
    pub level: MatchLevel,
    pub matched: Vec<ClusterId>,
}

/// Resolves one test row against the index.
///
/// Levels are tried in cascade order; at the first level with matches the
/// matched clusters are ranked by weighted count (descending, ties by
/// ascending id) and padded to five with popularity clusters. Rows with no
/// match at any level, or without a distance, get the popularity top-5.
pub fn leak_predict(
    index: &LeakIndex,
    popularity: &PopularityTable,
    row: &SearchEvent,
    params: &LeakParams,
) -> LeakOutcome {
    let fallback = || LeakOutcome {
        prediction: popularity_top5(popularity),
        level: MatchLevel::NoMatch,
        matched: Vec::new(),
    };
    let Some(distance) = row.orig_destination_distance else {
        return fallback();
    };
    let d = distance_key(distance);

    for &level in &params.cascade {
        let Some(entries) = index.matches(level, row, d) else {
            continue;
        };
        if entries.is_empty() {
            continue;
        }
        let mut weight = vec![0.0f64; CLUSTER_COUNT];
        for &(cluster, is_booking) in entries {
            weight[cluster as usize] += if is_booking {
                params.w_book
            } else {
                params.w_click
            };
        }
        let mut matched: Vec<ClusterId> = (0..CLUSTER_COUNT as u8)
            .filter(|&c| weight[c as usize] > 0.0)
            .collect();
        matched.sort_by(|&a, &b| {
            weight[b as usize]
                .partial_cmp(&weight[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        matched.truncate(5);

        let prediction = first_five_distinct(
            matched
                .iter()
                .copied()
                .chain(popularity.ranking().iter().copied()),
        )
        .expect("popularity ranking pads to five");
        return LeakOutcome {
            prediction,
            level,
            matched,
        };
    }
    fallback()
}

/// Merges a leak outcome with the ensemble prediction.
///
/// An L0 (perfect) match wins: its matched clusters come first, padded with
/// ensemble clusters not already present. Anything weaker defers to the
/// ensemble unchanged.
pub fn combine_leak_ensemble(
    leak: &LeakOutcome,
    ensemble: &RankedPrediction,
) -> RankedPrediction {
    if leak.level != MatchLevel::L0 {
        return ensemble.clone();
    }
    first_five_distinct(
        leak.matched
            .iter()
            .copied()
            .chain(ensemble.clusters().iter().copied())
            .chain(leak.prediction.clusters().iter().copied()),
    )
    .expect("two five-lists always yield five distinct ids")
}

/// Share of rows resolved at each level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MatchHistogram {
    pub l0: usize,
    pub l1: usize,
    pub l2: usize,
    pub none: usize,
}

impl MatchHistogram {
    pub fn add(&mut self, level: MatchLevel) {
        match level {
            MatchLevel::L0 => self.l0 += 1,
            MatchLevel::L1 => self.l1 += 1,
            MatchLevel::L2 => self.l2 += 1,
            MatchLevel::NoMatch => self.none += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.l0 + self.l1 + self.l2 + self.none
    }

    pub fn share(&self, level: MatchLevel) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        let count = match level {
            MatchLevel::L0 => self.l0,
            MatchLevel::L1 => self.l1,
            MatchLevel::L2 => self.l2,
            MatchLevel::NoMatch => self.none,
        };
        count as f64 / n as f64
    }
}

impl fmt::Display for MatchHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "level  rows        share")?;
        for (name, count) in [
            ("L0", self.l0),
            ("L1", self.l1),
            ("L2", self.l2),
            ("none", self.none),
        ] {
            let share = if self.total() == 0 {
                0.0
            } else {
                count as f64 / self.total() as f64
            };
            writeln!(f, "{name:<6} {count:<11} {share:.4}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::test_util::event;
    use crate::schema::Provenance;

    fn train_with(events: Vec<SearchEvent>) -> Dataset {
        Dataset::new(events, Provenance::Train)
    }

    fn keyed(
        user: u64,
        cluster: ClusterId,
        booking: bool,
        country: u32,
        region: u32,
        city: u32,
        distance: Option<f64>,
        market: u32,
    ) -> SearchEvent {
        let mut e = event(user, 1, cluster, booking);
        e.user_location_country = country;
        e.user_location_region = region;
        e.user_location_city = city;
        e.orig_destination_distance = distance;
        e.hotel_market = market;
        e
    }

    #[test]
    fn single_row_is_indexed_at_all_levels() {
        let train = train_with(vec![keyed(1, 42, true, 5, 6, 7, Some(123.4567), 9)]);
        let index = LeakIndex::build(&train);
        let pop = PopularityTable::build(&train, 5.0, 1.0);
        let row = keyed(2, 0, true, 5, 6, 7, Some(123.4567), 9);

        for cascade in [
            vec![MatchLevel::L0],
            vec![MatchLevel::L1],
            vec![MatchLevel::L2],
        ] {
            let params = LeakParams {
                cascade: cascade.clone(),
                ..Default::default()
            };
            let outcome = leak_predict(&index, &pop, &row, &params);
            assert_eq!(outcome.level, cascade[0]);
            assert_eq!(outcome.matched, vec![42]);
        }
    }

    #[test]
    fn rows_without_distance_are_not_indexed() {
        let train = train_with(vec![keyed(1, 42, true, 5, 6, 7, None, 9)]);
        let index = LeakIndex::build(&train);
        assert_eq!(index.len_l0(), 0);
    }

    #[test]
    fn identical_keys_accumulate_a_multiset() {
        let train = train_with(vec![
            keyed(1, 42, true, 5, 6, 7, Some(200.0), 9),
            keyed(2, 17, false, 5, 6, 7, Some(200.0), 9),
        ]);
        let index = LeakIndex::build(&train);
        let pop = PopularityTable::build(&train, 5.0, 1.0);
        let row = keyed(3, 0, true, 5, 6, 7, Some(200.0), 9);
        let outcome = leak_predict(&index, &pop, &row, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::L0);
        // booking of 42 (weight 5) outranks click of 17 (weight 1)
        assert_eq!(outcome.matched, vec![42, 17]);
        assert_eq!(outcome.prediction.clusters()[0], 42);
        assert_eq!(outcome.prediction.clusters()[1], 17);
    }

    #[test]
    fn exact_match_leads_prediction() {
        let train = train_with(vec![keyed(1, 42, true, 5, 6, 7, Some(321.5), 9)]);
        let index = LeakIndex::build(&train);
        let pop = PopularityTable::build(&train, 5.0, 1.0);
        let row = keyed(9, 0, true, 5, 6, 7, Some(321.5), 9);
        let outcome = leak_predict(&index, &pop, &row, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::L0);
        assert_eq!(outcome.prediction.clusters()[0], 42);
    }

    #[test]
    fn no_match_returns_popularity_top5() {
        let mut events = Vec::new();
        for (c, n) in [(10u8, 5), (20, 4), (30, 3), (40, 2), (50, 1)] {
            for _ in 0..n {
                events.push(keyed(1, c, true, 1, 1, 1, Some(150.0), 1));
            }
        }
        let train = train_with(events);
        let index = LeakIndex::build(&train);
        let pop = PopularityTable::build(&train, 5.0, 1.0);

        let row = keyed(2, 0, true, 9, 9, 9, Some(999.0), 9);
        let outcome = leak_predict(&index, &pop, &row, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::NoMatch);
        assert_eq!(outcome.prediction.clusters(), &[10, 20, 30, 40, 50]);
        assert!(outcome.matched.is_empty());

        let mut no_distance = keyed(1, 0, true, 1, 1, 1, None, 1);
        no_distance.hotel_cluster = None;
        let outcome = leak_predict(&index, &pop, &no_distance, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::NoMatch);
    }

    #[test]
    fn l1_fallback_ranks_by_weighted_count() {
        // L0 differs by country; L1 matches with clicks on {10, 10, 20}
        let train = train_with(vec![
            keyed(1, 10, false, 1, 1, 7, Some(200.0), 9),
            keyed(2, 10, false, 2, 2, 7, Some(200.0), 9),
            keyed(3, 20, false, 3, 3, 7, Some(200.0), 9),
        ]);
        let index = LeakIndex::build(&train);
        let pop = PopularityTable::build(&train, 5.0, 1.0);
        let row = keyed(4, 0, true, 8, 8, 7, Some(200.0), 9);
        let outcome = leak_predict(&index, &pop, &row, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::L1);
        assert_eq!(outcome.matched, vec![10, 20]);
        assert_eq!(outcome.prediction.clusters()[0], 10);
        assert_eq!(outcome.prediction.clusters()[1], 20);
        // padded entries are distinct and in range by construction
        assert_eq!(outcome.prediction.clusters().len(), 5);
    }

    #[test]
    fn distances_compare_after_rounding() {
        let train = train_with(vec![keyed(1, 42, true, 5, 6, 7, Some(100.00004), 9)]);
        let index = LeakIndex::build(&train);
        let pop = PopularityTable::build(&train, 5.0, 1.0);
        let row = keyed(2, 0, true, 5, 6, 7, Some(100.000044), 9);
        let outcome = leak_predict(&index, &pop, &row, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::L0);

        let far = keyed(2, 0, true, 5, 6, 7, Some(100.0002), 9);
        let outcome = leak_predict(&index, &pop, &far, &LeakParams::default());
        assert_eq!(outcome.level, MatchLevel::NoMatch);
    }

    #[test]
    fn combine_prefers_l0_then_fills_from_ensemble() {
        let ensemble =
            RankedPrediction::new([1, 2, 3, 4, 5]).unwrap();
        let leak = LeakOutcome {
            prediction: RankedPrediction::new([42, 17, 0, 1, 2]).unwrap(),
            level: MatchLevel::L0,
            matched: vec![42, 17],
        };
        let combined = combine_leak_ensemble(&leak, &ensemble);
        assert_eq!(combined.clusters(), &[42, 17, 1, 2, 3]);
    }

    #[test]
    fn combine_defers_to_ensemble_without_perfect_match() {
        let ensemble = RankedPrediction::new([1, 2, 3, 4, 5]).unwrap();
        for level in [MatchLevel::L1, MatchLevel::L2, MatchLevel::NoMatch] {
            let leak = LeakOutcome {
                prediction: RankedPrediction::new([42, 17, 0, 6, 7]).unwrap(),
                level,
                matched: vec![42],
            };
            assert_eq!(combine_leak_ensemble(&leak, &ensemble), ensemble);
        }
    }

    #[test]
    fn combine_with_full_leak_list_ignores_ensemble() {
        let ensemble = RankedPrediction::new([1, 2, 3, 4, 5]).unwrap();
        let leak = LeakOutcome {
            prediction: RankedPrediction::new([90, 91, 92, 93, 94]).unwrap(),
            level: MatchLevel::L0,
            matched: vec![90, 91, 92, 93, 94],
        };
        let combined = combine_leak_ensemble(&leak, &ensemble);
        assert_eq!(combined.clusters(), &[90, 91, 92, 93, 94]);
    }

    #[test]
    fn popularity_tie_break_is_ascending_id() {
        let train = train_with(vec![keyed(1, 0, true, 1, 1, 1, Some(150.0), 1)]);
        // single row: cluster 0 leads, everything else ties at zero
        let pop = PopularityTable::build(&train, 5.0, 1.0);
        assert_eq!(popularity_top5(&pop).clusters(), &[0, 1, 2, 3, 4]);

        let empty = train_with(vec![]);
        let pop = PopularityTable::build(&empty, 5.0, 1.0);
        assert_eq!(popularity_top5(&pop).clusters(), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn popularity_matches_naive_tally_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut events = Vec::new();
        for _ in 0..500 {
            let c: u8 = rng.random_range(0..30);
            let booked = rng.random::<f64>() < 0.4;
            events.push(keyed(1, c, booked, 1, 1, 1, Some(200.0), 1));
        }
        let train = train_with(events.clone());
        let pop = PopularityTable::build(&train, 5.0, 1.0);

        // independent tally
        let mut tally = vec![0.0f64; CLUSTER_COUNT];
        for e in &events {
            tally[e.hotel_cluster.unwrap() as usize] += if e.is_booking { 5.0 } else { 1.0 };
        }
        let mut ids: Vec<u8> = (0..CLUSTER_COUNT as u8).collect();
        ids.sort_by(|&a, &b| {
            tally[b as usize]
                .partial_cmp(&tally[a as usize])
                .unwrap()
                .then(a.cmp(&b))
        });
        assert_eq!(popularity_top5(&pop).clusters()[..], ids[..5]);
    }

    #[test]
    fn histogram_tracks_shares() {
        let mut h = MatchHistogram::default();
        h.add(MatchLevel::L0);
        h.add(MatchLevel::L0);
        h.add(MatchLevel::L1);
        h.add(MatchLevel::NoMatch);
        assert_eq!(h.total(), 4);
        assert_eq!(h.share(MatchLevel::L0), 0.5);
        assert_eq!(h.share(MatchLevel::L2), 0.0);
    }
}
