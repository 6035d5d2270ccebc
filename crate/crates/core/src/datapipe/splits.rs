use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{ImagePair, MetadataRecord};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// 1 MiB. Records strictly larger are excluded.
pub const DEFAULT_MAX_BYTES: u64 = 1_048_576;
pub const MAX_REVIEW_SCORE: u8 = 10;
pub const DEFAULT_REVIEW_THRESHOLD: u8 = 9;

/// Splits records into `(kept, excluded)` by `byte_size <= max_bytes`.
pub fn filter_size(records: &[MetadataRecord], max_bytes: u64) -> Result<(Vec<MetadataRecord>, Vec<MetadataRecord>)> {
    if max_bytes == 0 {
        return Err(Error::param("max_bytes must be positive"));
    }
    Ok(records.iter().cloned().partition(|r| r.byte_size <= max_bytes))
}

/// Rubric score for one pair, `0..=10`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewScore {
    pub pair_id: String,
    pub score: u8,
}

/// What to do with a pair that has no review score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingScore {
    Keep,
    Drop,
}

impl MissingScore {
    /// Only the test split is reviewed, so unscored training pairs are kept.
    pub fn for_test_split(test: bool) -> Self {
        if test {
            MissingScore::Drop
        } else {
            MissingScore::Keep
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReviewOutcome {
    pub kept: Vec<ImagePair>,
    /// `(pair id, reason)` for every dropped pair.
    pub dropped: Vec<(String, String)>,
}

pub fn filter_review(
    pairs: &[ImagePair],
    scores: &[ReviewScore],
    threshold: u8,
    missing: MissingScore,
) -> Result<ReviewOutcome> {
    let mut by_id = HashMap::new();
    for s in scores {
        if s.score > 10 {
            return Err(Error::param(format!(
                "review score {} for {} exceeds 10",
                s.score, s.pair_id
            )));
        }
        if by_id.insert(s.pair_id.as_str(), s.score).is_some() {
            return Err(Error::consistency(format!("pair {} scored twice", s.pair_id)));
        }
    }
    let mut out = ReviewOutcome::default();
    for p in pairs {
        let id = p.id();
        match (by_id.get(id.as_str()), missing) {
            (Some(&s), _) if s >= threshold => out.kept.push(p.clone()),
            (Some(&s), _) => out.dropped.push((id, format!("score {s} below {threshold}"))),
            (None, MissingScore::Keep) => out.kept.push(p.clone()),
            (None, MissingScore::Drop) => out.dropped.push((id, "no review score".to_string())),
        }
    }
    Ok(out)
}

/// Reads `pair_id,score` CSV with a header row.
pub fn read_review_scores(text: &str) -> Result<Vec<ReviewScore>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    rdr.deserialize()
        .map(|row| {
            let score: ReviewScore = row.map_err(|e: csv::Error| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::format(format!("review scores line {line}: {e}"))
            })?;
            if score.score > MAX_REVIEW_SCORE {
                return Err(Error::format(format!(
                    "review score {} for {} exceeds {MAX_REVIEW_SCORE}",
                    score.score, score.pair_id
                )));
            }
            Ok(score)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub available: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub location_disjoint: bool,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
    pub manifest: SplitManifest,
}

/// Seeded split into disjoint train and test sets.
///
/// By default pairs are shuffled and dealt out individually, so one
/// location may contribute to both sides. With `location_disjoint`, whole
/// locations are dealt instead; a location that overfills the test side has
/// its surplus pairs discarded rather than moved to training.
pub fn build_splits(
    pairs: &[ImagePair],
    train_count: usize,
    test_count: usize,
    seed: u64,
    location_disjoint: bool,
) -> Result<Splits> {
    let insufficient = |avail: usize| {
        Error::param(format!(
            "requested {train_count} train + {test_count} test pairs but only {avail} are available"
        ))
    };
    if train_count + test_count > pairs.len() {
        return Err(insufficient(pairs.len()));
    }
    let mut rng = SeededRng::new(seed);
    let (mut train_idx, mut test_idx) = (Vec::new(), Vec::new());
    if location_disjoint {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            groups.entry(&p.first.location_id).or_default().push(i);
        }
        let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
        rng.shuffle(&mut groups);
        for g in groups {
            if test_idx.len() < test_count {
                let take = (test_count - test_idx.len()).min(g.len());
                test_idx.extend_from_slice(&g[..take]);
            } else if train_idx.len() < train_count {
                let take = (train_count - train_idx.len()).min(g.len());
                train_idx.extend_from_slice(&g[..take]);
            }
        }
        if train_idx.len() < train_count || test_idx.len() < test_count {
            return Err(insufficient(train_idx.len() + test_idx.len()));
        }
    } else {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        rng.shuffle(&mut order);
        test_idx.extend_from_slice(&order[..test_count]);
        train_idx.extend_from_slice(&order[test_count..test_count + train_count]);
    }
    // pairs arrive in canonical order, so sorted indices keep it
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let (train, test) = (pick(&train_idx), pick(&test_idx));
    let ids: BTreeSet<String> = train.iter().map(ImagePair::id).collect();
    if test.iter().any(|p| ids.contains(&p.id())) {
        return Err(Error::consistency(
            "a pair id occurs in both splits; pair ids must be unique",
        ));
    }
    let manifest = SplitManifest {
        seed,
        available: pairs.len(),
        train_count,
        test_count,
        location_disjoint,
        train_ids: train.iter().map(ImagePair::id).collect(),
        test_ids: test.iter().map(ImagePair::id).collect(),
    };
    Ok(Splits { train, test, manifest })
}
