use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MetadataRecord;

pub const MIN_GAP_MONTHS: i64 = 12;

/// Whole calendar months from `a` to `b`; a partial month does not count.
pub fn month_gap(a: NaiveDate, b: NaiveDate) -> i64 {
    let months = (b.year() as i64 - a.year() as i64) * 12 + (b.month() as i64 - a.month() as i64);
    if b.day() < a.day() {
        months - 1
    } else {
        months
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePair {
    pub first: MetadataRecord,
    pub second: MetadataRecord,
    pub gap_months: i64,
}

impl ImagePair {
    pub fn id(&self) -> String {
        format!("{}__{}", self.first.image_id, self.second.image_id)
    }

    /// Name of the two-frame video built from this pair.
    pub fn video_name(&self) -> String {
        format!("{}.mp4", self.id())
    }

    /// Recomputes the pair invariants from the records alone.
    pub fn is_valid(&self) -> bool {
        self.first.location_id == self.second.location_id
            && self.second.timestamp > self.first.timestamp
            && month_gap(self.first.timestamp, self.second.timestamp) >= MIN_GAP_MONTHS
            && self.gap_months == month_gap(self.first.timestamp, self.second.timestamp)
    }
}

fn chain_walk(images: &[&MetadataRecord]) -> Vec<ImagePair> {
    let mut pairs = Vec::new();
    let mut anchor = 0;
    while let Some(next) =
        (anchor + 1..images.len()).find(|&j| month_gap(images[anchor].timestamp, images[j].timestamp) >= MIN_GAP_MONTHS)
    {
        pairs.push(ImagePair {
            first: images[anchor].clone(),
            second: images[next].clone(),
            gap_months: month_gap(images[anchor].timestamp, images[next].timestamp),
        });
        anchor = next;
    }
    pairs
}

/// Chains images of each location into pairs at least twelve months apart.
///
/// Within a location, images are ordered by date (image id breaks ties).
/// Starting from the oldest, each anchor is paired with the earliest later
/// image that is far enough away, and that image becomes the next anchor.
/// Output is sorted by location, then by first date.
pub fn make_pairs(records: &[MetadataRecord]) -> Vec<ImagePair> {
    let mut by_location: BTreeMap<&str, Vec<&MetadataRecord>> = BTreeMap::new();
    for r in records {
        by_location.entry(&r.location_id).or_default().push(r);
    }
    let groups: Vec<Vec<&MetadataRecord>> = by_location
        .into_values()
        .map(|mut g| {
            g.sort_by(|a, b| (a.timestamp, &a.image_id).cmp(&(b.timestamp, &b.image_id)));
            g
        })
        .collect();
    groups.par_iter().flat_map_iter(|g| chain_walk(g)).collect()
}
