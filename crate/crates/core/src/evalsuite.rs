//! Classification metrics, rank-sum ROC AUC, stratified subsampling curves
//! and per-region F1.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::records::{Class, PredictionRow, TileKey};
use crate::scalar::{percentile, sample_std, shifted_mean, Scalar};

pub const DEFAULT_REPLICATES: usize = 200;
pub const CURVE_HEADER: &str = "size,metric,mean,std,p2.5,p97.5";

/// Waste is the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn add(&mut self, predicted: Class, truth: Class) {
        match (predicted, truth) {
            (Class::Waste, Class::Waste) => self.tp += 1,
            (Class::Waste, Class::Background) => self.fp += 1,
            (Class::Background, Class::Waste) => self.fn_ += 1,
            (Class::Background, Class::Background) => self.tn += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Class, Class)>) -> Self {
        let mut c = ConfusionCounts::default();
        for (p, t) in pairs {
            c.add(p, t);
        }
        c
    }
}

/// A ratio that is 0 with `defined == false` when its denominator is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metric<T> {
    pub value: T,
    pub defined: bool,
}

impl<T: Scalar> Metric<T> {
    fn ratio(num: usize, den: usize) -> Self {
        if den == 0 {
            Metric {
                value: T::zero(),
                defined: false,
            }
        } else {
            Metric {
                value: T::from_count(num) / T::from_count(den),
                defined: true,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics<T> {
    pub precision: Metric<T>,
    pub recall: Metric<T>,
    pub f1: Metric<T>,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf1<T> {
    pub waste: ClassMetrics<T>,
    pub background: ClassMetrics<T>,
    pub accuracy: T,
}

fn class_metrics<T: Scalar>(tp: usize, fp: usize, fn_: usize) -> ClassMetrics<T> {
    ClassMetrics {
        precision: Metric::ratio(tp, tp + fp),
        recall: Metric::ratio(tp, tp + fn_),
        // 2TP / (2TP + FP + FN), identical to the harmonic mean when defined.
        f1: Metric::ratio(2 * tp, 2 * tp + fp + fn_).defined_if(tp + fp > 0 && tp + fn_ > 0),
        support: tp + fn_,
    }
}

impl<T: Scalar> Metric<T> {
    fn defined_if(mut self, cond: bool) -> Self {
        self.defined &= cond;
        self
    }
}

pub fn prf1<T: Scalar>(c: &ConfusionCounts) -> Result<Prf1<T>> {
    if c.total() == 0 {
        return Err(Error::Undefined("no samples for precision/recall/F1".into()));
    }
    Ok(Prf1 {
        waste: class_metrics(c.tp, c.fp, c.fn_),
        background: class_metrics(c.tn, c.fn_, c.fp),
        accuracy: T::from_count(c.tp + c.tn) / T::from_count(c.total()),
    })
}

/// Pairs each truth row with its prediction. Every truth tile must have a
/// prediction; predictions outside the truth set are ignored.
pub fn join<'a>(
    predictions: &'a [PredictionRow],
    truth: &'a [PredictionRow],
) -> Result<Vec<(&'a PredictionRow, &'a PredictionRow)>> {
    let mut by_key: HashMap<&TileKey, &PredictionRow> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key.insert(&p.key, p).is_some() {
            return Err(Error::Join(format!("duplicate prediction for {}", p.key)));
        }
    }
    let mut seen = std::collections::HashSet::with_capacity(truth.len());
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(truth.len());
    for t in truth {
        if !seen.insert(&t.key) {
            return Err(Error::Join(format!("duplicate truth row for {}", t.key)));
        }
        match by_key.get(&t.key) {
            Some(p) => out.push((*p, t)),
            None => missing.push(t.key.to_string()),
        }
    }
    if !missing.is_empty() {
        let shown: Vec<_> = missing.iter().take(5).cloned().collect();
        return Err(Error::Join(format!(
            "{} truth tiles have no prediction (e.g. {})",
            missing.len(),
            shown.join(", ")
        )));
    }
    Ok(out)
}

pub fn confusion(predictions: &[PredictionRow], truth: &[PredictionRow]) -> Result<ConfusionCounts> {
    Ok(ConfusionCounts::from_pairs(
        join(predictions, truth)?.into_iter().map(|(p, t)| (p.class, t.class)),
    ))
}

/// Average (fractional) ranks, 1-based.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![T::zero(); values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1
        let r = T::from_count(i + j + 2) / T::lit(2.0);
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC: P(score_pos > score_neg) + P(tie) / 2.
pub fn roc_auc<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<T> {
    if scores.len() != positive.len() {
        return Err(Error::Join(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Validation("score is NaN".into()));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("ROC AUC needs both classes in the truth".into()));
    }
    let ranks = average_ranks(scores);
    let r_pos: T = ranks.iter().zip(positive).filter(|(_, p)| **p).map(|(r, _)| *r).sum();
    let (np, nn) = (T::from_count(n_pos), T::from_count(n_neg));
    Ok((r_pos - np * (np + T::one()) / T::lit(2.0)) / (np * nn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointEstimate<T> {
    pub f1: T,
    pub auc: T,
    pub accuracy: T,
}

/// F1 (waste), AUC and accuracy for scores thresholded at 0.5.
pub fn point_estimate<T: Scalar>(scores: &[T], positive: &[bool]) -> Result<PointEstimate<T>> {
    let half = T::lit(0.5);
    let c = ConfusionCounts::from_pairs(scores.iter().zip(positive).map(|(&s, &p)| {
        (
            if s > half { Class::Waste } else { Class::Background },
            if p { Class::Waste } else { Class::Background },
        )
    }));
    let m = prf1::<T>(&c)?;
    Ok(PointEstimate {
        f1: m.waste.f1.value,
        auc: roc_auc(scores, positive)?,
        accuracy: m.accuracy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dispersion<T> {
    pub mean: T,
    pub std: T,
    pub p2_5: T,
    pub p97_5: T,
}

impl<T: Scalar> Dispersion<T> {
    fn of(values: &[T]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        Dispersion {
            mean: shifted_mean(values).expect("at least one replicate"),
            std: sample_std(values),
            p2_5: percentile(&sorted, T::lit(2.5)).expect("non-empty"),
            p97_5: percentile(&sorted, T::lit(97.5)).expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint<T> {
    pub size: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub f1: Dispersion<T>,
    pub auc: Dispersion<T>,
    pub accuracy: Dispersion<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapCurve<T> {
    pub points: Vec<CurvePoint<T>>,
    pub replicates: usize,
    pub seed: u64,
    pub full: PointEstimate<T>,
}

impl<T: Scalar> BootstrapCurve<T> {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CURVE_HEADER}\n");
        for p in &self.points {
            for (name, d) in [("f1", &p.f1), ("auc", &p.auc), ("accuracy", &p.accuracy)] {
                let _ = writeln!(
                    s,
                    "{},{name},{},{},{},{}",
                    p.size,
                    d.mean.as_f64(),
                    d.std.as_f64(),
                    d.p2_5.as_f64(),
                    d.p97_5.as_f64()
                );
            }
        }
        s
    }
}

/// Positive count for a stratified subsample of `size` (round half up).
pub fn stratum_positives(size: usize, n_pos: usize, total: usize) -> usize {
    (size * n_pos * 2 + total) / (2 * total)
}

/// Stratified subsampling without replacement. Replicate `r` of size index
/// `k` draws from ChaCha8 stream `(k << 32) | r` of `seed`, so results do not
/// depend on thread scheduling.
pub fn bootstrap_curves<T: Scalar>(
    scores: &[T],
    positive: &[bool],
    sizes: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<BootstrapCurve<T>> {
    if replicates == 0 {
        return Err(Error::Config("replicates must be at least 1".into()));
    }
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sizes must be non-empty and strictly increasing: {sizes:?}")));
    }
    let full = point_estimate(scores, positive)?;
    let total = scores.len();
    let pos_idx: Vec<usize> = (0..total).filter(|&i| positive[i]).collect();
    let neg_idx: Vec<usize> = (0..total).filter(|&i| !positive[i]).collect();
    if sizes[sizes.len() - 1] > total {
        return Err(Error::Config(format!(
            "size {} exceeds the {total} available samples",
            sizes[sizes.len() - 1]
        )));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let n_pos = stratum_positives(size, pos_idx.len(), total);
        let n_neg = size - n_pos;
        if n_pos < 2 || n_neg < 2 {
            return Err(Error::SampleSize {
                needed: 2,
                actual: n_pos.min(n_neg),
            });
        }
        let reps: Vec<PointEstimate<T>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((k as u64) << 32) | r as u64);
                let mut s = Vec::with_capacity(size);
                let mut p = Vec::with_capacity(size);
                for (pool, n, label) in [(&pos_idx, n_pos, true), (&neg_idx, n_neg, false)] {
                    for j in rand::seq::index::sample(&mut rng, pool.len(), n) {
                        s.push(scores[pool[j]]);
                        p.push(label);
                    }
                }
                point_estimate(&s, &p)
            })
            .collect::<Result<_>>()?;
        let pick = |f: fn(&PointEstimate<T>) -> T| Dispersion::of(&reps.iter().map(f).collect::<Vec<_>>());
        points.push(CurvePoint {
            size,
            n_pos,
            n_neg,
            f1: pick(|e| e.f1),
            auc: pick(|e| e.auc),
            accuracy: pick(|e| e.accuracy),
        });
    }
    Ok(BootstrapCurve {
        points,
        replicates,
        seed,
        full,
    })
}

/// Parses `50,100,200,full` against a test-set size.
pub fn parse_sizes(s: &str, full: usize) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| match p.trim() {
            "full" | "all" => Ok(full),
            v => v
                .parse()
                .map_err(|e| Error::Config(format!("bad size `{v}`: {e}"))),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionF1<T> {
    pub region_id: String,
    pub n_tiles: usize,
    pub f1: Metric<T>,
    /// Truth holds one class only; excluded from the summary statistics.
    pub single_class: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionF1Summary<T> {
    pub regions: Vec<RegionF1<T>>,
    pub min: Option<T>,
    pub max: Option<T>,
    /// Sample standard deviation over unflagged regions.
    pub std: Option<T>,
}

pub fn per_region_f1<T: Scalar>(predictions: &[PredictionRow], truth: &[PredictionRow]) -> Result<RegionF1Summary<T>> {
    let mut groups: BTreeMap<&str, ConfusionCounts> = BTreeMap::new();
    for (p, t) in join(predictions, truth)? {
        groups.entry(&t.key.region_id).or_default().add(p.class, t.class);
    }
    let regions: Vec<RegionF1<T>> = groups
        .into_iter()
        .map(|(region, c)| {
            let pos = c.tp + c.fn_;
            RegionF1 {
                region_id: region.to_string(),
                n_tiles: c.total(),
                f1: class_metrics(c.tp, c.fp, c.fn_).f1,
                single_class: pos == 0 || pos == c.total(),
            }
        })
        .collect();
    let used: Vec<T> = regions.iter().filter(|r| !r.single_class).map(|r| r.f1.value).collect();
    let min = used.iter().copied().reduce(T::min);
    let max = used.iter().copied().reduce(T::max);
    let std = (!used.is_empty()).then(|| sample_std(&used));
    Ok(RegionF1Summary { regions, min, max, std })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub confusion: ConfusionCounts,
    pub metrics: Prf1<f64>,
    pub roc_auc: Option<f64>,
    pub per_region: RegionF1Summary<f64>,
    pub confidence: crate::infer::ConfidenceStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapCurve<f64>>,
}

pub fn evaluate(predictions: &[PredictionRow], truth: &[PredictionRow]) -> Result<EvalReport> {
    let pairs = join(predictions, truth)?;
    if pairs.is_empty() {
        return Err(Error::Join("truth set is empty".into()));
    }
    let confusion = ConfusionCounts::from_pairs(pairs.iter().map(|(p, t)| (p.class, t.class)));
    let scores: Vec<f64> = pairs.iter().map(|(p, _)| p.waste_score()).collect();
    let positive: Vec<bool> = pairs.iter().map(|(_, t)| t.class.is_waste()).collect();
    let roc_auc = match roc_auc(&scores, &positive) {
        Ok(v) => Some(v),
        Err(Error::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    let joined: Vec<PredictionRow> = pairs.iter().map(|(p, _)| (*p).clone()).collect();
    Ok(EvalReport {
        n: pairs.len(),
        confusion,
        metrics: prf1(&confusion)?,
        roc_auc,
        per_region: per_region_f1(predictions, truth)?,
        confidence: crate::infer::confidence_stats(&joined, Some(truth))?,
        bootstrap: None,
    })
}

/// Scores (waste probability) and truth flags for the joined test set.
pub fn joined_scores(predictions: &[PredictionRow], truth: &[PredictionRow]) -> Result<(Vec<f64>, Vec<bool>)> {
    let pairs = join(predictions, truth)?;
    Ok(pairs.iter().map(|(p, t)| (p.waste_score(), t.class.is_waste())).unzip())
}

impl EvalReport {
    pub fn to_markdown(&self) -> String {
        let pct = |v: f64| format!("{:.2}%", v * 100.0);
        let m = |x: &Metric<f64>| if x.defined { pct(x.value) } else { "n/a".to_string() };
        let c = &self.confusion;
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let _ = writeln!(s, "Test tiles: {}\n", self.n);
        let _ = writeln!(s, "| | predicted waste | predicted background |\n|---|---|---|");
        let _ = writeln!(s, "| truth waste | {} | {} |", c.tp, c.fn_);
        let _ = writeln!(s, "| truth background | {} | {} |\n", c.fp, c.tn);
        let _ = writeln!(s, "| class | precision | recall | F1 | support |\n|---|---|---|---|---|");
        for (name, k) in [("waste", &self.metrics.waste), ("background", &self.metrics.background)] {
            let _ = writeln!(s, "| {name} | {} | {} | {} | {} |", m(&k.precision), m(&k.recall), m(&k.f1), k.support);
        }
        let _ = writeln!(s, "\nAccuracy: {}", pct(self.metrics.accuracy));
        match self.roc_auc {
            Some(a) => {
                let _ = writeln!(s, "ROC AUC: {a:.4}");
            }
            None => {
                let _ = writeln!(s, "ROC AUC: undefined (single-class truth)");
            }
        }
        let conf = &self.confidence;
        let _ = writeln!(s, "Mean confidence: {} (median {})", pct(conf.mean), pct(conf.median));
        if let Some(g) = &conf.correct {
            let _ = writeln!(s, "Mean confidence, correct: {} (n={})", pct(g.mean), g.n);
        }
        if let Some(g) = &conf.incorrect {
            let _ = writeln!(s, "Mean confidence, incorrect: {} (n={})", pct(g.mean), g.n);
        }
        let pr = &self.per_region;
        let _ = writeln!(s, "\n| region | tiles | F1 |\n|---|---|---|");
        for r in &pr.regions {
            let flag = if r.single_class { " (single class)" } else { "" };
            let _ = writeln!(s, "| {} | {} | {}{flag} |", r.region_id, r.n_tiles, m(&r.f1));
        }
        if let (Some(lo), Some(hi), Some(sd)) = (pr.min, pr.max, pr.std) {
            let _ = writeln!(s, "\nPer-region F1 range {lo:.3} to {hi:.3} (SD {sd:.3})");
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(s, "\n| size | F1 mean ± std | AUC mean ± std | accuracy mean ± std |\n|---|---|---|---|");
            for p in &b.points {
                let _ = writeln!(
                    s,
                    "| {} | {:.4} ± {:.4} | {:.4} ± {:.4} | {:.4} ± {:.4} |",
                    p.size, p.f1.mean, p.f1.std, p.auc.mean, p.auc.std, p.accuracy.mean, p.accuracy.std
                );
            }
        }
        s
    }
}
