//! Ensemble predictive distribution and the uncertainty and performance
//! measures computed from it. All logarithms are natural, so every
//! information quantity is in nats.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed when clamping a slightly negative mutual information.
const MI_SLACK: f64 = 1e-12;

/// Arithmetic mean of the member distributions.
pub fn ensemble_predictive(member_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = member_probs.first().ok_or(Error::EmptyEnsemble)?;
    let c = first.len();
    if let Some(row) = member_probs.iter().find(|r| r.len() != c) {
        return Err(Error::Dimension {
            op: "ensemble_predictive",
            lhs: vec![c],
            rhs: vec![row.len()],
        });
    }
    let m = member_probs.len() as f64;
    let mut mean = vec![0.0; c];
    for row in member_probs {
        for (acc, &p) in mean.iter_mut().zip(row) {
            *acc += p;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    Ok(mean)
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    let mut h = 0.0;
    for &p in probs {
        if p < 0.0 || p.is_nan() {
            return Err(Error::Domain(format!("probability {p} is not in [0, 1]")));
        }
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Entropy of the mean minus the mean member entropy.
pub fn mutual_information(member_probs: &[Vec<f64>]) -> Result<f64> {
    let mean = ensemble_predictive(member_probs)?;
    let total = predictive_entropy(&mean)?;
    let mut expected = 0.0;
    for row in member_probs {
        expected += predictive_entropy(row)?;
    }
    expected /= member_probs.len() as f64;
    let mi = total - expected;
    Ok(if (-MI_SLACK..0.0).contains(&mi) { 0.0 } else { mi })
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub id: String,
    pub entropy: f64,
    #[serde(rename = "mi")]
    pub mutual_information: f64,
    pub probs: Vec<f64>,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
}

impl UncertaintyRecord {
    pub fn from_members(id: impl Into<String>, member_probs: &[Vec<f64>], label: usize) -> Result<Self> {
        let probs = ensemble_predictive(member_probs)?;
        if label >= probs.len() {
            return Err(Error::Input(format!(
                "label {label} out of range for {} classes",
                probs.len()
            )));
        }
        let predicted = argmax(&probs);
        Ok(Self {
            id: id.into(),
            entropy: predictive_entropy(&probs)?,
            mutual_information: mutual_information(member_probs)?,
            label,
            predicted,
            correct: predicted == label,
            probs,
        })
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted]
    }
}

/// Member predictions for a whole dataset, `[N × M × C]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSet {
    probs: Vec<f64>,
    n: usize,
    m: usize,
    c: usize,
    labels: Vec<usize>,
}

impl PredictiveSet {
    /// `per_member[k][i]` is member `k`'s distribution for sample `i`.
    pub fn from_members(per_member: &[Vec<Vec<f64>>], labels: Vec<usize>) -> Result<Self> {
        let m = per_member.len();
        if m == 0 {
            return Err(Error::EmptyEnsemble);
        }
        let n = labels.len();
        let c = per_member[0].first().map_or(0, Vec::len);
        let mut probs = vec![0.0; n * m * c];
        for (k, rows) in per_member.iter().enumerate() {
            if rows.len() != n {
                return Err(Error::Input(format!(
                    "member {k} has {} predictions for {n} labels",
                    rows.len()
                )));
            }
            for (i, row) in rows.iter().enumerate() {
                if row.len() != c {
                    return Err(Error::Input(format!(
                        "member {k} sample {i} has {} classes, expected {c}",
                        row.len()
                    )));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(Error::Domain(format!(
                        "member {k} sample {i} is not a distribution (sum {sum})"
                    )));
                }
                let off = (i * m + k) * c;
                probs[off..off + c].copy_from_slice(row);
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {l} out of range for {c} classes")));
        }
        Ok(Self {
            probs,
            n,
            m,
            c,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn members(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn member_probs(&self, i: usize) -> Vec<Vec<f64>> {
        let base = i * self.m * self.c;
        (0..self.m)
            .map(|k| self.probs[base + k * self.c..base + (k + 1) * self.c].to_vec())
            .collect()
    }

    pub fn records(&self, ids: &[String]) -> Result<Vec<UncertaintyRecord>> {
        if ids.len() != self.n {
            return Err(Error::Input(format!("{} ids for {} samples", ids.len(), self.n)));
        }
        (0..self.n)
            .map(|i| UncertaintyRecord::from_members(ids[i].clone(), &self.member_probs(i), self.labels[i]))
            .collect()
    }

    /// Mean over members of each member's own NLL.
    pub fn mean_member_nll(&self) -> Result<f64> {
        if self.n == 0 {
            return Err(Error::Input("mean member NLL of an empty set".into()));
        }
        let mut total = 0.0;
        for k in 0..self.m {
            let mut member = 0.0;
            for i in 0..self.n {
                member -= self.probs[(i * self.m + k) * self.c + self.labels[i]].ln();
            }
            total += member / self.n as f64;
        }
        Ok(total / self.m as f64)
    }
}

pub fn accuracy(records: &[UncertaintyRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("accuracy of an empty record set".into()));
    }
    Ok(records.iter().filter(|r| r.correct).count() as f64 / records.len() as f64)
}

/// Mean negative log ensemble probability of the true label.
pub fn nll(records: &[UncertaintyRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Input("NLL of an empty record set".into()));
    }
    let mut total = 0.0;
    for r in records {
        total -= r.probs[r.label].ln();
    }
    Ok(total / records.len() as f64)
}

/// Bin of `conf` among `bins` right-closed equal-width bins on `(0, 1]`.
fn ece_bin(conf: f64, bins: usize) -> usize {
    let b = bins as f64;
    let mut idx = ((conf * b).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while idx > 0 && conf <= idx as f64 / b {
        idx -= 1;
    }
    while idx + 1 < bins && conf > (idx + 1) as f64 / b {
        idx += 1;
    }
    idx
}

pub fn ece(records: &[UncertaintyRecord], num_bins: usize) -> Result<f64> {
    if num_bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut count = vec![0usize; num_bins];
    let mut conf_sum = vec![0.0; num_bins];
    let mut correct = vec![0usize; num_bins];
    for r in records {
        let conf = r.confidence();
        let b = ece_bin(conf, num_bins);
        count[b] += 1;
        conf_sum[b] += conf;
        correct[b] += usize::from(r.correct);
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..num_bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        total += nb / n * (correct[b] as f64 / nb - conf_sum[b] / nb).abs();
    }
    Ok(total)
}

/// Probability that a random `scores_out` value exceeds a random `scores_in`
/// value, ties counting one half. Rank-sum with midranks.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> Result<f64> {
    if scores_in.is_empty() || scores_out.is_empty() {
        return Err(Error::Input("AUROC needs nonempty score arrays".into()));
    }
    if scores_in.iter().chain(scores_out).any(|s| s.is_nan()) {
        return Err(Error::Domain("AUROC scores contain NaN".into()));
    }
    let mut all: Vec<(f64, bool)> = scores_in
        .iter()
        .map(|&s| (s, false))
        .chain(scores_out.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum_out = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let outs = all[i..=j].iter().filter(|x| x.1).count();
        rank_sum_out += mid * outs as f64;
        i = j + 1;
    }
    let n_in = scores_in.len() as f64;
    let n_out = scores_out.len() as f64;
    let u = rank_sum_out - n_out * (n_out + 1.0) / 2.0;
    Ok(u / (n_in * n_out))
}

pub const DEFAULT_ECE_BINS: usize = 10;
pub const DEFAULT_HIST_BINS: usize = 30;

pub fn linspace(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
        .collect()
}

/// Entropy edges over `[0, ln C]` and MI edges over `[0, ln max(M, 2)]`.
/// A single member has no MI range of its own, so it borrows the two-member
/// range to keep the edges strictly increasing.
pub fn default_edges(classes: usize, members: usize, bins: usize) -> (Vec<f64>, Vec<f64>) {
    (
        linspace(0.0, (classes.max(2) as f64).ln(), bins),
        linspace(0.0, (members.max(2) as f64).ln(), bins),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Correct,
    Incorrect,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Correct => "correct",
            Group::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupHistogram {
    pub group: Group,
    /// `counts[i][j]`: entropy bin `i`, MI bin `j`.
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
    pub mean_entropy: Option<f64>,
    pub median_entropy: Option<f64>,
    pub mean_mi: Option<f64>,
    pub median_mi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub entropy_edges: Vec<f64>,
    pub mi_edges: Vec<f64>,
    pub groups: Vec<GroupHistogram>,
}

fn check_edges(edges: &[f64], what: &str) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Input(format!(
            "{what} edges must be at least two strictly increasing values"
        )));
    }
    Ok(())
}

/// Bin `x` falls in; values outside the edges go to the end bins.
fn bin_of(edges: &[f64], x: f64) -> usize {
    let bins = edges.len() - 1;
    edges[1..bins].partition_point(|&e| e <= x)
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn histogram2d(
    records: &[UncertaintyRecord],
    entropy_edges: &[f64],
    mi_edges: &[f64],
) -> Result<Histogram2D> {
    check_edges(entropy_edges, "entropy")?;
    check_edges(mi_edges, "MI")?;
    let groups = [Group::Correct, Group::Incorrect]
        .into_iter()
        .map(|group| {
            let members: Vec<&UncertaintyRecord> = records
                .iter()
                .filter(|r| r.correct == (group == Group::Correct))
                .collect();
            let mut counts = vec![vec![0usize; mi_edges.len() - 1]; entropy_edges.len() - 1];
            for r in &members {
                counts[bin_of(entropy_edges, r.entropy)][bin_of(mi_edges, r.mutual_information)] += 1;
            }
            let h: Vec<f64> = members.iter().map(|r| r.entropy).collect();
            let mi: Vec<f64> = members.iter().map(|r| r.mutual_information).collect();
            GroupHistogram {
                group,
                counts,
                total: members.len(),
                mean_entropy: mean(&h),
                median_entropy: median(&h),
                mean_mi: mean(&mi),
                median_mi: median(&mi),
            }
        })
        .collect();
    Ok(Histogram2D {
        entropy_edges: entropy_edges.to_vec(),
        mi_edges: mi_edges.to_vec(),
        groups,
    })
}
