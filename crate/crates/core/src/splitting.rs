//! Jenks natural-breaks binning and stratified train/test assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::annotations::Magnification;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("split CSV row {row}: {msg}")]
    Csv { row: usize, msg: String },
}

type Result<T> = std::result::Result<T, SplitError>;

/// Optimal 1-D partition of a value set into `k` contiguous classes.
#[derive(Debug, Clone, PartialEq)]
pub struct JenksBreaks {
    pub k: usize,
    /// Upper bound (inclusive) of each class except the last; strictly
    /// ascending, `k - 1` entries.
    pub breaks: Vec<f64>,
    /// Goodness of variance fit, `1 - SDCM / SDAM`.
    pub gvf: f64,
    /// Total within-class sum of squared deviations.
    pub within_ss: f64,
}

impl JenksBreaks {
    /// Class index for `value`; a value equal to a break goes to the lower
    /// class.
    pub fn assign(&self, value: f64) -> usize {
        assign_bin(value, self)
    }
}

pub fn assign_bin(value: f64, b: &JenksBreaks) -> usize {
    b.breaks.iter().position(|&t| value <= t).unwrap_or(b.k - 1)
}

/// Fisher's exact dynamic program over the sorted distinct values, each
/// weighted by its multiplicity. Equal values never straddle a break.
pub fn jenks_breaks(values: &[f64], k: usize) -> Result<JenksBreaks> {
    if k == 0 {
        return Err(SplitError::Parameter("class count must be at least 1".into()));
    }
    if values.len() < k {
        return Err(SplitError::Parameter(format!(
            "{} values cannot form {k} classes",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SplitError::Parameter("values must be finite".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut uniq: Vec<f64> = Vec::new();
    let mut weight: Vec<f64> = Vec::new();
    for v in sorted {
        if uniq.last() == Some(&v) {
            *weight.last_mut().unwrap() += 1.0;
        } else {
            uniq.push(v);
            weight.push(1.0);
        }
    }
    let m = uniq.len();
    if k > m {
        return Err(SplitError::Parameter(format!(
            "{k} classes requested but only {m} distinct values"
        )));
    }

    // prefix sums over weighted values
    let mut s1 = vec![0.0; m + 1];
    let mut s2 = vec![0.0; m + 1];
    let mut sw = vec![0.0; m + 1];
    for i in 0..m {
        s1[i + 1] = s1[i] + weight[i] * uniq[i];
        s2[i + 1] = s2[i] + weight[i] * uniq[i] * uniq[i];
        sw[i + 1] = sw[i] + weight[i];
    }
    // sum of squared deviations of uniq[i..=j]
    let ssd = |i: usize, j: usize| {
        let (a, b, w) = (s1[j + 1] - s1[i], s2[j + 1] - s2[i], sw[j + 1] - sw[i]);
        (b - a * a / w).max(0.0)
    };

    // cost[c][j]: best cost of splitting uniq[..=j] into c+1 classes
    let mut cost = vec![vec![f64::INFINITY; m]; k];
    let mut start = vec![vec![0usize; m]; k];
    for j in 0..m {
        cost[0][j] = ssd(0, j);
    }
    for c in 1..k {
        for j in c..m {
            for i in c..=j {
                let candidate = cost[c - 1][i - 1] + ssd(i, j);
                if candidate < cost[c][j] {
                    cost[c][j] = candidate;
                    start[c][j] = i;
                }
            }
        }
    }

    let mut breaks = vec![0.0; k - 1];
    let mut end = m - 1;
    for c in (1..k).rev() {
        let s = start[c][end];
        breaks[c - 1] = uniq[s - 1];
        end = s - 1;
    }
    let within_ss = cost[k - 1][m - 1];
    let total_ss = ssd(0, m - 1);
    let gvf = if total_ss > 0.0 {
        1.0 - within_ss / total_ss
    } else {
        1.0
    };
    Ok(JenksBreaks {
        k,
        breaks,
        gvf,
        within_ss,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Assignment {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Assignment::Train => "train",
            Assignment::Validation => "validation",
            Assignment::Test => "test",
        })
    }
}

impl FromStr for Assignment {
    type Err = SplitError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Assignment::Train),
            "validation" | "val" => Ok(Assignment::Validation),
            "test" => Ok(Assignment::Test),
            _ => Err(SplitError::Parameter(format!("unknown assignment {s:?}"))),
        }
    }
}

/// Input row for splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitItem {
    pub image_id: String,
    pub count: f64,
    pub magnification: Magnification,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEntry {
    pub image_id: String,
    pub count: f64,
    pub bin: usize,
    pub magnification: Magnification,
    pub assignment: Assignment,
}

impl SplitEntry {
    pub fn stratum(&self) -> (usize, Magnification) {
        (self.bin, self.magnification)
    }
}

/// Per-image stratum and assignment, sorted by image id.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<SplitEntry>,
    pub seed: u64,
}

/// Per-stratum membership counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumCounts {
    pub bin: usize,
    pub magnification: Magnification,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl StratumCounts {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

impl SplitManifest {
    pub fn ids(&self, assignment: Assignment) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.assignment == assignment)
            .map(|e| e.image_id.as_str())
            .collect()
    }

    pub fn get(&self, image_id: &str) -> Option<&SplitEntry> {
        self.entries
            .binary_search_by(|e| e.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn strata(&self) -> Vec<StratumCounts> {
        let mut map: BTreeMap<(usize, Magnification), StratumCounts> = BTreeMap::new();
        for e in &self.entries {
            let s = map.entry(e.stratum()).or_insert(StratumCounts {
                bin: e.bin,
                magnification: e.magnification,
                train: 0,
                validation: 0,
                test: 0,
            });
            match e.assignment {
                Assignment::Train => s.train += 1,
                Assignment::Validation => s.validation += 1,
                Assignment::Test => s.test += 1,
            }
        }
        map.into_values().collect()
    }

    pub fn mean_count(&self, assignment: Assignment) -> Option<f64> {
        let counts: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.assignment == assignment)
            .map(|e| e.count)
            .collect();
        (!counts.is_empty()).then(|| counts.iter().sum::<f64>() / counts.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,count,bin,magnification,assignment\n");
        for e in &self.entries {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.image_id, e.count, e.bin, e.magnification, e.assignment
            ));
        }
        out
    }

    pub fn from_csv(text: &str, seed: u64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut entries = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let row = i + 2;
            let bad = |msg: String| SplitError::Csv { row, msg };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", rec.len())));
            }
            entries.push(SplitEntry {
                image_id: rec[0].to_string(),
                count: rec[1].parse().map_err(|_| bad(format!("bad count {:?}", &rec[1])))?,
                bin: rec[2].parse().map_err(|_| bad(format!("bad bin {:?}", &rec[2])))?,
                magnification: rec[3].parse().map_err(|e| bad(format!("{e}")))?,
                assignment: rec[4].parse().map_err(|e| bad(format!("{e}")))?,
            });
        }
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(SplitManifest { entries, seed })
    }

    /// Markdown table of per-stratum membership.
    pub fn strata_markdown(&self) -> String {
        let mut out = String::from(
            "| Bin | Magnification | Train | Validation | Test | Train fraction |\n|---:|---|---:|---:|---:|---:|\n",
        );
        for s in self.strata() {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {:.3} |\n",
                s.bin,
                s.magnification,
                s.train,
                s.validation,
                s.test,
                (s.train + s.validation) as f64 / s.total() as f64
            ));
        }
        out
    }
}

/// Train size for a stratum of `n`: round half up, singletons to train,
/// otherwise at least one test image.
pub fn stratum_train_size(n: usize, ratio: f64) -> usize {
    match n {
        0 => 0,
        1 => 1,
        _ => ((ratio * n as f64 + 0.5 + 1e-9).floor() as usize).min(n - 1),
    }
}

fn stratum_seed(seed: u64, bin: usize, mag: Magnification) -> u64 {
    // splitmix64 finalizer over the combined key
    let mut z = seed ^ ((bin as u64) << 8) ^ (mag as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn assign_strata(
    groups: BTreeMap<(usize, Magnification), Vec<usize>>,
    entries: &mut [SplitEntry],
    ratio: f64,
    seed: u64,
    keep: Assignment,
    rest: Assignment,
) {
    for ((bin, mag), mut members) in groups {
        members.sort_by(|&a, &b| entries[a].image_id.cmp(&entries[b].image_id));
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed(seed, bin, mag));
        members.shuffle(&mut rng);
        let n_keep = stratum_train_size(members.len(), ratio);
        for (rank, &idx) in members.iter().enumerate() {
            entries[idx].assignment = if rank < n_keep { keep } else { rest };
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(SplitError::Parameter(format!("ratio must lie in (0, 1), got {ratio}")))
    }
}

/// Bins counts with Jenks (`k_bins` classes) and splits every
/// (bin, magnification) stratum independently.
pub fn stratified_split(
    items: &[SplitItem],
    k_bins: usize,
    ratio: f64,
    seed: u64,
) -> Result<(SplitManifest, JenksBreaks)> {
    if items.is_empty() {
        return Err(SplitError::Parameter("cannot split an empty manifest".into()));
    }
    check_ratio(ratio)?;
    let counts: Vec<f64> = items.iter().map(|i| i.count).collect();
    let breaks = jenks_breaks(&counts, k_bins)?;

    let mut entries: Vec<SplitEntry> = items
        .iter()
        .map(|i| SplitEntry {
            image_id: i.image_id.clone(),
            count: i.count,
            bin: breaks.assign(i.count),
            magnification: i.magnification,
            assignment: Assignment::Test,
        })
        .collect();
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if entries.windows(2).any(|w| w[0].image_id == w[1].image_id) {
        return Err(SplitError::Parameter("duplicate image ids".into()));
    }
    let mut groups: BTreeMap<(usize, Magnification), Vec<usize>> = BTreeMap::new();
    for (idx, e) in entries.iter().enumerate() {
        groups.entry(e.stratum()).or_default().push(idx);
    }
    assign_strata(groups, &mut entries, ratio, seed, Assignment::Train, Assignment::Test);
    Ok((SplitManifest { entries, seed }, breaks))
}

/// Moves part of the training side to validation, stratum by stratum,
/// keeping `ratio` of each stratum in training.
pub fn carve_validation(split: &SplitManifest, ratio: f64) -> Result<SplitManifest> {
    check_ratio(ratio)?;
    let mut entries = split.entries.clone();
    let mut groups: BTreeMap<(usize, Magnification), Vec<usize>> = BTreeMap::new();
    for (idx, e) in entries.iter().enumerate() {
        if e.assignment == Assignment::Train {
            groups.entry(e.stratum()).or_default().push(idx);
        }
    }
    let seed = split.seed.wrapping_add(0x5EED);
    assign_strata(
        groups,
        &mut entries,
        ratio,
        seed,
        Assignment::Train,
        Assignment::Validation,
    );
    Ok(SplitManifest {
        entries,
        seed: split.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_clusters() {
        let b = jenks_breaks(&[1.0, 2.0, 3.0, 100.0, 101.0, 102.0], 2).unwrap();
        assert_eq!(b.breaks, vec![3.0]);
        assert_eq!(b.assign(3.0), 0);
        assert_eq!(b.assign(100.0), 1);
    }

    #[test]
    fn single_class() {
        let b = jenks_breaks(&[5.0, 1.0, 9.0], 1).unwrap();
        assert!(b.breaks.is_empty());
        assert_eq!(b.assign(1e9), 0);
        assert_eq!(b.gvf, 0.0);
    }

    #[test]
    fn one_class_per_distinct_value() {
        let b = jenks_breaks(&[4.0, 1.0, 4.0, 9.0, 1.0], 3).unwrap();
        assert_eq!(b.breaks, vec![1.0, 4.0]);
        assert_eq!(b.gvf, 1.0);
    }

    #[test]
    fn too_many_classes() {
        assert!(jenks_breaks(&[1.0, 1.0, 2.0], 3).is_err());
        assert!(jenks_breaks(&[1.0], 2).is_err());
        assert!(jenks_breaks(&[1.0], 0).is_err());
    }

    #[test]
    fn bin_tie_rule() {
        let b = JenksBreaks {
            k: 3,
            breaks: vec![10.0, 20.0],
            gvf: 0.0,
            within_ss: 0.0,
        };
        assert_eq!(assign_bin(-5.0, &b), 0);
        assert_eq!(assign_bin(10.0, &b), 0);
        assert_eq!(assign_bin(10.5, &b), 1);
        assert_eq!(assign_bin(20.0, &b), 1);
        assert_eq!(assign_bin(21.0, &b), 2);
    }

    #[test]
    fn train_sizes() {
        assert_eq!(stratum_train_size(10, 0.8), 8);
        assert_eq!(stratum_train_size(1, 0.8), 1);
        assert_eq!(stratum_train_size(2, 0.8), 1);
        assert_eq!(stratum_train_size(5, 0.9), 4);
        assert_eq!(stratum_train_size(4, 0.875), 3);
    }

    fn items(n: usize) -> Vec<SplitItem> {
        (0..n)
            .map(|i| SplitItem {
                image_id: format!("{i:04}"),
                count: ((i * 37) % 101) as f64,
                magnification: if i % 7 == 0 {
                    Magnification::X40
                } else {
                    Magnification::X20
                },
            })
            .collect()
    }

    #[test]
    fn stratum_of_ten() {
        let its: Vec<SplitItem> = (0..10)
            .map(|i| SplitItem {
                image_id: format!("{i}"),
                count: 5.0,
                magnification: Magnification::X20,
            })
            .collect();
        let (s, _) = stratified_split(&its, 1, 0.8, 1).unwrap();
        assert_eq!(s.ids(Assignment::Train).len(), 8);
        assert_eq!(s.ids(Assignment::Test).len(), 2);
    }

    #[test]
    fn singleton_goes_to_train() {
        let mut its = items(20);
        its.push(SplitItem {
            image_id: "lonely".into(),
            count: 1000.0,
            magnification: Magnification::X40,
        });
        let (s, _) = stratified_split(&its, 3, 0.8, 9).unwrap();
        assert_eq!(s.get("lonely").unwrap().assignment, Assignment::Train);
    }

    #[test]
    fn seeds_change_membership_not_sizes() {
        let its = items(200);
        let (a, _) = stratified_split(&its, 4, 0.8, 1).unwrap();
        let (b, _) = stratified_split(&its, 4, 0.8, 2).unwrap();
        assert_ne!(a.ids(Assignment::Train), b.ids(Assignment::Train));
        assert_eq!(a.strata(), b.strata());
        let (a2, _) = stratified_split(&its, 4, 0.8, 1).unwrap();
        assert_eq!(a, a2);
    }

    #[test]
    fn empty_and_bad_ratio() {
        assert!(stratified_split(&[], 2, 0.8, 0).is_err());
        assert!(stratified_split(&items(10), 2, 1.0, 0).is_err());
    }

    #[test]
    fn validation_carve_comes_from_train() {
        let (s, _) = stratified_split(&items(300), 5, 0.8, 4).unwrap();
        let v = carve_validation(&s, 0.875).unwrap();
        for (a, b) in s.entries.iter().zip(&v.entries) {
            if a.assignment == Assignment::Test {
                assert_eq!(b.assignment, Assignment::Test);
            }
        }
        let n_val = v.ids(Assignment::Validation).len();
        assert!(n_val > 20 && n_val < 40, "{n_val}");
    }

    #[test]
    fn csv_round_trip() {
        let (s, _) = stratified_split(&items(30), 3, 0.8, 4).unwrap();
        let back = SplitManifest::from_csv(&s.to_csv(), 4).unwrap();
        assert_eq!(back, s);
    }
}
