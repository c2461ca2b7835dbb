//! Identity-disjoint splitting. Attacks bind two identities, so assignment
//! operates on connected components of the identity-sharing graph: every
//! record of a component lands in the same split, which makes cross-split
//! identity leakage impossible by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Label, Medium, SampleRecord, Split};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitStat {
    pub split: Split,
    pub medium: Medium,
    pub label: Label,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignments: BTreeMap<String, Split>,
    pub stats: Vec<SplitStat>,
}

impl SplitManifest {
    pub fn save_json(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self, DataError> {
        let data = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&data)?)
    }

    /// Stamp the assignments onto records. Every record must be covered.
    pub fn apply(&self, records: &mut [SampleRecord]) -> Result<(), DataError> {
        for rec in records.iter_mut() {
            let split = self
                .assignments
                .get(&rec.image_id)
                .ok_or_else(|| DataError::UnknownImage(rec.image_id.clone()))?;
            rec.split = *split;
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, i: usize) -> usize {
        if self.parent[i] != i {
            let root = self.find(self.parent[i]);
            self.parent[i] = root;
        }
        self.parent[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

const SPLITS: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

/// Randomized, seed-deterministic component assignment targeting the given
/// (train, dev, test) ratios, followed by a local refinement pass that moves
/// whole components while it reduces the squared deviation from the targets.
pub fn split_identity_disjoint(
    records: &[SampleRecord],
    ratios: [f64; 3],
    seed: u64,
    attributes: Option<&BTreeMap<String, String>>,
) -> Result<SplitManifest, DataError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r <= 0.0) {
        return Err(DataError::InvalidRatios(ratios));
    }
    for rec in records {
        rec.validate()?;
    }

    // Identity graph over union-find.
    let mut identity_index: BTreeMap<&str, usize> = BTreeMap::new();
    for rec in records {
        for identity in &rec.identity_ids {
            let next = identity_index.len();
            identity_index.entry(identity).or_insert(next);
        }
    }
    let mut uf = UnionFind::new(identity_index.len());
    for rec in records {
        let ids: Vec<usize> = rec
            .identity_ids
            .iter()
            .map(|i| identity_index[i.as_str()])
            .collect();
        for pair in ids.windows(2) {
            uf.union(pair[0], pair[1]);
        }
    }

    // Group record indices by component root; order components by their
    // smallest member image id for a stable base ordering.
    let mut comp_map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (ri, rec) in records.iter().enumerate() {
        let first = rec
            .identity_ids
            .iter()
            .next()
            .expect("validated records have identities");
        let root = uf.find(identity_index[first.as_str()]);
        comp_map.entry(root).or_default().push(ri);
    }
    let mut components: Vec<Vec<usize>> = comp_map.into_values().collect();
    components.sort_by_key(|c| {
        c.iter()
            .map(|&ri| records[ri].image_id.clone())
            .min()
            .unwrap_or_default()
    });

    let total = records.len();
    let targets: [f64; 3] = [
        ratios[0] * total as f64,
        ratios[1] * total as f64,
        ratios[2] * total as f64,
    ];
    let max_target = targets.iter().cloned().fold(0.0, f64::max).ceil() as usize;
    if let Some(comp) = components.iter().find(|c| c.len() > max_target) {
        let first_identity = records[comp[0]]
            .identity_ids
            .iter()
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(DataError::ComponentTooLarge {
            first_identity,
            size: comp.len(),
            max_target,
        });
    }

    // Attribute-aware targets. Without attributes all records share one bucket.
    let attr_of = |rec: &SampleRecord| -> String {
        attributes
            .and_then(|a| a.get(&rec.image_id).cloned())
            .unwrap_or_default()
    };
    let mut attr_totals: BTreeMap<String, f64> = BTreeMap::new();
    for rec in records {
        *attr_totals.entry(attr_of(rec)).or_default() += 1.0;
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    components.shuffle(&mut rng);
    // Stable: equal-size components keep their shuffled relative order.
    components.sort_by_key(|c| std::cmp::Reverse(c.len()));

    // deficit[s][attr] = target - assigned
    let mut deficits: Vec<BTreeMap<String, f64>> = SPLITS
        .iter()
        .enumerate()
        .map(|(si, _)| {
            attr_totals
                .iter()
                .map(|(a, &t)| (a.clone(), ratios[si] * t))
                .collect()
        })
        .collect();
    let mut assignment: Vec<usize> = vec![0; components.len()];
    for (ci, comp) in components.iter().enumerate() {
        let mut attr_counts: BTreeMap<String, f64> = BTreeMap::new();
        for &ri in comp {
            *attr_counts.entry(attr_of(&records[ri])).or_default() += 1.0;
        }
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (si, _) in SPLITS.iter().enumerate() {
            let score: f64 = attr_counts
                .iter()
                .map(|(a, &c)| c * deficits[si].get(a).copied().unwrap_or(0.0))
                .sum();
            if score > best_score {
                best_score = score;
                best = si;
            }
        }
        assignment[ci] = best;
        for (a, &c) in &attr_counts {
            *deficits[best].get_mut(a).expect("attr bucket") -= c;
        }
    }

    // Refinement: move single components between splits while the total
    // squared record-count deviation shrinks.
    let sizes: Vec<usize> = components.iter().map(|c| c.len()).collect();
    let mut counts = [0f64; 3];
    for (ci, &s) in assignment.iter().zip(sizes.iter()) {
        counts[*ci] += s as f64;
    }
    let sq_dev = |counts: &[f64; 3]| -> f64 {
        counts
            .iter()
            .zip(targets.iter())
            .map(|(c, t)| (c - t) * (c - t))
            .sum()
    };
    for _round in 0..64 {
        let mut improved = false;
        let mut best_gain = 1e-9;
        let mut best_move: Option<(usize, usize)> = None;
        let current = sq_dev(&counts);
        for ci in 0..components.len() {
            let from = assignment[ci];
            for to in 0..3 {
                if to == from {
                    continue;
                }
                let mut next = counts;
                next[from] -= sizes[ci] as f64;
                next[to] += sizes[ci] as f64;
                let gain = current - sq_dev(&next);
                if gain > best_gain {
                    best_gain = gain;
                    best_move = Some((ci, to));
                }
            }
        }
        if let Some((ci, to)) = best_move {
            counts[assignment[ci]] -= sizes[ci] as f64;
            counts[to] += sizes[ci] as f64;
            assignment[ci] = to;
            improved = true;
        }
        if !improved {
            break;
        }
    }

    let mut assignments: BTreeMap<String, Split> = BTreeMap::new();
    for (ci, comp) in components.iter().enumerate() {
        for &ri in comp {
            assignments.insert(records[ri].image_id.clone(), SPLITS[assignment[ci]]);
        }
    }

    let mut stat_map: BTreeMap<(Split, Medium, Label), usize> = BTreeMap::new();
    for rec in records {
        let split = assignments[&rec.image_id];
        *stat_map.entry((split, rec.medium, rec.label)).or_default() += 1;
    }
    let stats = stat_map
        .into_iter()
        .map(|((split, medium, label), count)| SplitStat {
            split,
            medium,
            label,
            count,
        })
        .collect();

    Ok(SplitManifest {
        seed,
        ratios,
        assignments,
        stats,
    })
}

/// Exhaustive disjointness check: no identity may appear in two splits.
pub fn verify_identity_disjoint(records: &[SampleRecord]) -> Result<(), DataError> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for rec in records {
        if rec.split == Split::Unassigned {
            continue;
        }
        for identity in &rec.identity_ids {
            match seen.get(identity.as_str()) {
                Some(&s) if s != rec.split => {
                    return Err(DataError::DisjointnessViolation {
                        identity: identity.clone(),
                        a: s,
                        b: rec.split,
                    });
                }
                _ => {
                    seen.insert(identity, rec.split);
                }
            }
        }
    }
    Ok(())
}
