//! One-class protocol splits, ranking metrics and attack-suite evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{craft_adversarial, AttackConfig, CHUNK};
use crate::data::Dataset;
use crate::detectors::{item_distances, Detector};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const HISTOGRAM_BINS: usize = 50;

fn nonempty(normal: &[f64], anomalous: &[f64]) -> Result<()> {
    if normal.is_empty() || anomalous.is_empty() {
        return Err(Error::contract("both score sets must be non-empty"));
    }
    if normal.iter().chain(anomalous).any(|s| !s.is_finite()) {
        return Err(Error::numeric("non-finite novelty score"));
    }
    Ok(())
}

/// Probability that an anomalous score exceeds a normal one, ties counted
/// as one half (rank-sum form of the Mann-Whitney statistic).
pub fn auroc(normal: &[f64], anomalous: &[f64]) -> Result<f64> {
    nonempty(normal, anomalous)?;
    let mut pooled: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(anomalous.iter().map(|&s| (s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite"));
    // twice the rank sum keeps mid-ranks integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let hits = pooled[i..=j].iter().filter(|p| p.1).count() as u128;
        twice_rank_sum += twice_mid * hits;
        i = j + 1;
    }
    let na = anomalous.len() as u128;
    let nn = normal.len() as u128;
    // 2U = 2R - na(na+1); numerator = U = wins + ties/2
    let twice_u = twice_rank_sum - na * (na + 1);
    Ok((twice_u as f64 * 0.5) / (na as f64 * nn as f64))
}

/// Lowest false-positive rate over thresholds `t` (flag `score >= t`) whose
/// true-positive rate on anomalous scores reaches `tpr`.
pub fn fpr_at_tpr(normal: &[f64], anomalous: &[f64], tpr: f64) -> Result<f64> {
    nonempty(normal, anomalous)?;
    let mut a = anomalous.to_vec();
    a.sort_by(|p, q| q.partial_cmp(p).expect("finite"));
    let mut nsorted = normal.to_vec();
    nsorted.sort_by(|p, q| p.partial_cmp(q).expect("finite"));
    let na = a.len() as f64;
    let mut i = 0;
    while i < a.len() {
        let mut j = i;
        while j + 1 < a.len() && a[j + 1] == a[i] {
            j += 1;
        }
        let hit = (j + 1) as f64;
        if hit / na >= tpr {
            let t = a[i];
            let below = nsorted.partition_point(|&s| s < t);
            return Ok((nsorted.len() - below) as f64 / nsorted.len() as f64);
        }
        i = j + 1;
    }
    Ok(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneClassSplit {
    pub known_classes: Vec<u32>,
    /// Indices into the test set.
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

impl OneClassSplit {
    pub fn len(&self) -> usize {
        self.normal.len() + self.anomalous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Normal items first, then anomalous, with labels +1 / -1.
    pub fn items(&self) -> (Vec<usize>, Vec<f64>) {
        let idx: Vec<usize> = self.normal.iter().chain(&self.anomalous).copied().collect();
        let y = std::iter::repeat_n(1.0, self.normal.len())
            .chain(std::iter::repeat_n(-1.0, self.anomalous.len()))
            .collect();
        (idx, y)
    }
}

/// All test items of the known classes plus an equal number of novel items,
/// drawn at random and spread evenly over the novel classes (remainders to
/// the lowest class ids).
pub fn build_split(labels: &[u32], known: &[u32], seed: u64) -> Result<OneClassSplit> {
    if known.is_empty() {
        return Err(Error::contract("at least one known class is required"));
    }
    let mut known_sorted = known.to_vec();
    known_sorted.sort_unstable();
    known_sorted.dedup();
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for k in &known_sorted {
        if !by_class.contains_key(k) {
            return Err(Error::contract(format!("known class {k} is absent from the data")));
        }
    }
    let normal: Vec<usize> = (0..labels.len())
        .filter(|&i| known_sorted.binary_search(&labels[i]).is_ok())
        .collect();
    let novel: Vec<u32> = by_class
        .keys()
        .copied()
        .filter(|c| known_sorted.binary_search(c).is_err())
        .collect();
    if novel.is_empty() {
        return Err(Error::contract("no novel classes available"));
    }
    let total = normal.len();
    let (base, extra) = (total / novel.len(), total % novel.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anomalous = Vec::with_capacity(total);
    for (r, c) in novel.iter().enumerate() {
        let want = base + usize::from(r < extra);
        let mut pool = by_class[c].clone();
        if pool.len() < want {
            return Err(Error::contract(format!(
                "novel class {c} has {} items, {want} needed",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        pool.truncate(want);
        anomalous.extend(pool);
    }
    anomalous.sort_unstable();
    Ok(OneClassSplit {
        known_classes: known_sorted,
        normal,
        anomalous,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub normal: Vec<u64>,
    pub anomalous: Vec<u64>,
}

pub fn histogram(normal: &[f64], anomalous: &[f64], bins: usize) -> Histogram {
    let all = normal.iter().chain(anomalous);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let bin = |s: f64| -> usize {
        if width <= 0.0 {
            0
        } else {
            (((s - lo) / width) as usize).min(bins - 1)
        }
    };
    let mut h = Histogram {
        edges,
        normal: vec![0; bins],
        anomalous: vec![0; bins],
    };
    for &s in normal {
        h.normal[bin(s)] += 1;
    }
    for &s in anomalous {
        h.anomalous[bin(s)] += 1;
    }
    h
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: usize,
    pub class: u32,
    pub attacked: bool,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub label: String,
    pub attack: Option<AttackConfig>,
    pub auroc: f64,
    pub fpr_at_95_tpr: f64,
    pub latent_stability: Option<f64>,
    pub histogram: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub result: AttackResult,
    pub items: Vec<ItemScore>,
}

pub fn gather<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let per = x.item_len();
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(x.item(i));
    }
    Tensor::new(shape, data)
}

/// Score every split item (attacked when `attack` is given) against the
/// presented input.
pub fn evaluate<T: Scalar>(
    model: &Detector<T>,
    data: &Dataset<T>,
    split: &OneClassSplit,
    attack: Option<&AttackConfig>,
) -> Result<Evaluation> {
    let (idx, y) = split.items();
    let x = gather(&data.images, &idx)?;
    let presented = match attack {
        Some(cfg) => craft_adversarial(model, &x, &y, cfg)?,
        None => x.clone(),
    };
    let scores = model.novelty_scores(&presented, CHUNK)?;
    let nn = split.normal.len();
    let (normal, anomalous) = scores.split_at(nn);
    let items = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| ItemScore {
            id: i,
            class: data.labels[i],
            attacked: attack.is_some() && presented.item(k) != x.item(k),
            score: scores[k],
        })
        .collect();
    let label = attack.map_or_else(|| "clean".to_string(), |a| a.label());
    Ok(Evaluation {
        result: summarize(label, attack.cloned(), normal, anomalous)?,
        items,
    })
}

/// Metrics and histogram of one scored split.
pub fn summarize(
    label: String,
    attack: Option<AttackConfig>,
    normal: &[f64],
    anomalous: &[f64],
) -> Result<AttackResult> {
    Ok(AttackResult {
        label,
        attack,
        auroc: auroc(normal, anomalous)?,
        fpr_at_95_tpr: fpr_at_tpr(normal, anomalous, 0.95)?,
        latent_stability: None,
        histogram: histogram(normal, anomalous, HISTOGRAM_BINS),
    })
}

/// Mean per-item `||Z_adv - Z_clean||_2` of the decoder-side latent.
pub fn latent_stability<T: Scalar>(
    model: &Detector<T>,
    data: &Dataset<T>,
    split: &OneClassSplit,
    attack: &AttackConfig,
) -> Result<f64> {
    let (idx, y) = split.items();
    let x = gather(&data.images, &idx)?;
    let adv = craft_adversarial(model, &x, &y, attack)?;
    latent_shift(model, &x, &adv)
}

/// Mean per-item latent distance between two equally shaped input batches.
pub fn latent_shift<T: Scalar>(model: &Detector<T>, x: &Tensor<T>, adv: &Tensor<T>) -> Result<f64> {
    let s = model.spec.positions();
    let v = model.spec.latent_channels();
    let n = x.dim0();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let part: Vec<usize> = (start..end).collect();
        let za = model.effective_latent(&gather(x, &part)?)?;
        let zb = model.effective_latent(&gather(adv, &part)?)?;
        let shape = [end - start, s * v];
        let za = za.reshape(&shape)?;
        let zb = zb.reshape(&shape)?;
        total += item_distances(&za, &zb).iter().sum::<f64>();
        start = end;
    }
    Ok(total / n as f64)
}

/// Per-item CSV: `id,class,attacked,score`.
pub fn items_csv(items: &[ItemScore]) -> String {
    let mut s = String::from("id,class,attacked,score\n");
    for it in items {
        s.push_str(&format!("{},{},{},{:e}\n", it.id, it.class, it.attacked, it.score));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub known_classes: Vec<u32>,
    /// Keyed by result label (`clean` or the attack label).
    pub results: BTreeMap<String, AttackResult>,
    /// Attack digest to result label.
    pub digests: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn new(known_classes: Vec<u32>) -> Self {
        EvalReport {
            known_classes,
            results: BTreeMap::new(),
            digests: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, r: AttackResult) {
        if let Some(a) = &r.attack {
            self.digests.insert(a.digest(), r.label.clone());
        }
        self.results.insert(r.label.clone(), r);
    }
}

/// Mean AUROC per result label across several one-class reports.
pub fn mean_auroc(reports: &[EvalReport]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in reports {
        for (k, v) in &r.results {
            let e = acc.entry(k.clone()).or_insert((0.0, 0));
            e.0 += v.auroc;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2], &[0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5], &[0.5]).unwrap(), 0.5);
        assert!(matches!(auroc(&[], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&[0.1, 0.2], &[0.8, 0.9], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&[1.0; 4], &[1.0; 4], 0.95).unwrap(), 1.0);
        assert_eq!(
            fpr_at_tpr(&[1., 2., 3., 4.], &[2.5, 3.5, 4.5, 5.5], 0.95).unwrap(),
            0.5
        );
    }

    #[test]
    fn split_allocation() {
        let mut labels = vec![0u32; 100];
        for c in 1..10 {
            labels.extend(std::iter::repeat_n(c, 30));
        }
        let s = build_split(&labels, &[0], 1).unwrap();
        assert_eq!(s.normal.len(), 100);
        assert_eq!(s.anomalous.len(), 100);
        let mut per = BTreeMap::new();
        for &i in &s.anomalous {
            *per.entry(labels[i]).or_insert(0) += 1;
        }
        assert_eq!(per[&1], 12);
        assert!(per.values().all(|&v| v == 11 || v == 12));
        assert_eq!(s, build_split(&labels, &[0], 1).unwrap());
        assert_ne!(s.anomalous, build_split(&labels, &[0], 2).unwrap().anomalous);
    }

    #[test]
    fn two_known_classes() {
        let labels: Vec<u32> = (0..60).map(|i| i % 6).collect();
        let s = build_split(&labels, &[2, 0], 0).unwrap();
        assert_eq!(s.known_classes, vec![0, 2]);
        assert_eq!(s.normal.len(), 20);
        assert!(s.normal.iter().all(|&i| labels[i] == 0 || labels[i] == 2));
        assert_eq!(s.anomalous.len(), 20);
    }

    #[test]
    fn too_few_novel_items() {
        let labels = vec![0, 0, 0, 0, 1];
        assert!(matches!(build_split(&labels, &[0], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&[0.0, 1.0, 2.0], &[2.0, 3.0], 50);
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.normal.iter().sum::<u64>(), 3);
        assert_eq!(h.anomalous.iter().sum::<u64>(), 2);
        assert_eq!(h.anomalous[49], 1);
    }
}
