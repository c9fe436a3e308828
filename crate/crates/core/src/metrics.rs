//! Comparison metrics over next-token distributions and parameters, plus the
//! CSV row format every experiment emits.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ParamKey, TransformerParams, UpdateScope};
use crate::tasks::TokenId;

/// Default top-K for overlap metrics.
pub const DEFAULT_TOP_K: usize = 10;

/// Probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceDistribution(Vec<f64>);

impl ConfidenceDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("distribution entries must be finite and >= 0"));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("distribution sums to {s}, not 1")));
        }
        Ok(ConfidenceDistribution(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Highest-probability token; ties go to the smallest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// The `k` most probable tokens, ties broken by smallest id.
    pub fn top_k(&self, k: usize) -> Vec<TokenId> {
        let mut idx: Vec<usize> = (0..self.0.len()).collect();
        idx.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| i as TokenId).collect()
    }
}

/// Fraction of positions whose whole-vocabulary argmax equals the target.
pub fn accuracy(predictions: &[ConfidenceDistribution], targets: &[TokenId]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy over an empty set"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let hits = predictions.iter().zip(targets).filter(|(p, &t)| p.argmax() == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

fn check_k(p1: &ConfidenceDistribution, p2: &ConfidenceDistribution, k: usize) -> Result<()> {
    if p1.len() != p2.len() {
        return Err(Error::invalid("distributions over different vocabularies"));
    }
    if k == 0 || k > p1.len() {
        return Err(Error::invalid(format!("top-k of {k} outside 1..={}", p1.len())));
    }
    Ok(())
}

fn overlap_set(p1: &ConfidenceDistribution, p2: &ConfidenceDistribution, k: usize) -> Vec<TokenId> {
    let t2 = p2.top_k(k);
    let mut o: Vec<TokenId> = p1.top_k(k).into_iter().filter(|t| t2.contains(t)).collect();
    o.sort_unstable();
    o
}

/// `|T1_K ∩ T2_K| / K`.
pub fn token_overlap(p1: &ConfidenceDistribution, p2: &ConfidenceDistribution, k: usize) -> Result<f64> {
    check_k(p1, p2, k)?;
    Ok(overlap_set(p1, p2, k).len() as f64 / k as f64)
}

/// Overlap cosine similarity: cosine of the two distributions restricted to the
/// shared top-K tokens `O`, divided by `sqrt(K - |O|)` (floored at 1). Zero when
/// the top-K sets are disjoint.
pub fn ocs(p1: &ConfidenceDistribution, p2: &ConfidenceDistribution, k: usize) -> Result<f64> {
    check_k(p1, p2, k)?;
    let o = overlap_set(p1, p2, k);
    if o.is_empty() {
        return Ok(0.0);
    }
    let (mut num, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for &t in &o {
        let (a, b) = (p1.0[t as usize], p2.0[t as usize]);
        num += a * b;
        s1 += a * a;
        s2 += b * b;
    }
    let denom = (s1 * s2 * (k - o.len()).max(1) as f64).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(num / denom)
}

/// How per-token spreads are combined into the order-sensitivity score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenOptions {
    pub spread: Spread,
    pub aggregate: Aggregate,
    /// Divide by `n` (population) rather than `n - 1`.
    pub population: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    Std,
    Variance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Sum,
    Mean,
}

impl Default for SenOptions {
    fn default() -> Self {
        SenOptions { spread: Spread::Std, aggregate: Aggregate::Sum, population: true }
    }
}

/// Order sensitivity with the default options: per-token population standard
/// deviation across the distributions, summed over the vocabulary.
pub fn order_sensitivity(dists: &[ConfidenceDistribution]) -> Result<f64> {
    order_sensitivity_with(dists, SenOptions::default())
}

pub fn order_sensitivity_with(dists: &[ConfidenceDistribution], opts: SenOptions) -> Result<f64> {
    if dists.len() < 2 {
        return Err(Error::invalid("order sensitivity needs at least two distributions"));
    }
    let v = dists[0].len();
    if dists.iter().any(|d| d.len() != v) {
        return Err(Error::invalid("distributions over different vocabularies"));
    }
    let n = dists.len() as f64;
    let denom = if opts.population { n } else { n - 1.0 };
    let mut total = 0.0;
    for t in 0..v {
        // shifting by the first value keeps identical inputs at exactly zero spread
        let x0 = dists[0].0[t];
        let mean = dists.iter().map(|d| d.0[t] - x0).sum::<f64>() / n;
        let var = dists.iter().map(|d| (d.0[t] - x0 - mean).powi(2)).sum::<f64>() / denom;
        total += match opts.spread {
            Spread::Std => var.sqrt(),
            Spread::Variance => var,
        };
    }
    Ok(match opts.aggregate {
        Aggregate::Sum => total,
        Aggregate::Mean => total / v as f64,
    })
}

/// Mean absolute entrywise difference over every layer's `w_k`, `w_q` and `w_v`.
pub fn parameter_gap(a: &TransformerParams, b: &TransformerParams) -> Result<f64> {
    gap_where(a, b, |k| matches!(k.name, "w_k" | "w_q" | "w_v") && k.layer.is_some())
}

/// Mean absolute difference over every tensor *outside* `scope`; exactly zero
/// when an update respected its scope.
pub fn out_of_scope_gap(a: &TransformerParams, b: &TransformerParams, scope: UpdateScope) -> Result<f64> {
    gap_where(a, b, |k| !scope.contains(k))
}

fn gap_where(a: &TransformerParams, b: &TransformerParams, keep: impl Fn(&ParamKey) -> bool) -> Result<f64> {
    let ta = a.tensors();
    let tb = b.tensors();
    if ta.len() != tb.len() {
        return Err(Error::invalid("parameter_gap: architectures differ"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ((ka, ma), (kb, mb)) in ta.iter().zip(&tb) {
        if ka != kb || ma.shape() != mb.shape() {
            return Err(Error::invalid(format!("parameter_gap: architectures differ at {ka}")));
        }
        if keep(ka) {
            for (x, y) in ma.data().iter().zip(mb.data()) {
                sum += (x - y).abs();
            }
            count += ma.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ICL")]
    Icl,
    #[serde(rename = "GD")]
    Gd,
    #[serde(rename = "GD-hat-mid")]
    GdHatMid,
    #[serde(rename = "GD-hat-deep")]
    GdHatDeep,
    #[serde(rename = "SGD")]
    Sgd,
    #[serde(rename = "Adam")]
    Adam,
    #[serde(rename = "SGD-hat-deep")]
    SgdHatDeep,
    #[serde(rename = "Adam-hat-deep")]
    AdamHatDeep,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Icl,
        Method::Gd,
        Method::GdHatMid,
        Method::GdHatDeep,
        Method::Sgd,
        Method::Adam,
        Method::SgdHatDeep,
        Method::AdamHatDeep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Icl => "ICL",
            Method::Gd => "GD",
            Method::GdHatMid => "GD-hat-mid",
            Method::GdHatDeep => "GD-hat-deep",
            Method::Sgd => "SGD",
            Method::Adam => "Adam",
            Method::SgdHatDeep => "SGD-hat-deep",
            Method::AdamHatDeep => "Adam-hat-deep",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method tag {s:?}")))
    }
}

/// One named scalar with its experiment coordinates. Coordinates that do not
/// apply to the emitting experiment are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub seed: Option<u64>,
    pub n_demos: Option<usize>,
    pub lr: Option<f64>,
    pub epoch: Option<usize>,
    pub ordering_id: Option<usize>,
    pub method: Option<Method>,
}

pub const CSV_HEADER: [&str; 8] = ["metric", "value", "seed", "n_demos", "lr", "epoch", "ordering_id", "method"];

impl MetricReport {
    pub fn new(metric: impl Into<String>, value: f64) -> Self {
        MetricReport {
            metric: metric.into(),
            value,
            seed: None,
            n_demos: None,
            lr: None,
            epoch: None,
            ordering_id: None,
            method: None,
        }
    }

    pub fn seed(mut self, s: u64) -> Self {
        self.seed = Some(s);
        self
    }

    pub fn n_demos(mut self, n: usize) -> Self {
        self.n_demos = Some(n);
        self
    }

    pub fn lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }

    pub fn epoch(mut self, e: usize) -> Self {
        self.epoch = Some(e);
        self
    }

    pub fn ordering(mut self, o: usize) -> Self {
        self.ordering_id = Some(o);
        self
    }

    pub fn method(mut self, m: Method) -> Self {
        self.method = Some(m);
        self
    }

    fn sort_key(&self, other: &Self) -> std::cmp::Ordering {
        let lr = |r: &Self| r.lr.unwrap_or(f64::NEG_INFINITY);
        self.method
            .cmp(&other.method)
            .then_with(|| self.metric.cmp(&other.metric))
            .then_with(|| self.seed.cmp(&other.seed))
            .then_with(|| self.n_demos.cmp(&other.n_demos))
            .then_with(|| lr(self).total_cmp(&lr(other)))
            .then_with(|| self.epoch.cmp(&other.epoch))
            .then_with(|| self.ordering_id.cmp(&other.ordering_id))
            .then_with(|| self.value.total_cmp(&other.value))
    }

    fn to_record(&self) -> [String; 8] {
        fn opt<T: ToString>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        [
            self.metric.clone(),
            self.value.to_string(),
            opt(self.seed),
            opt(self.n_demos),
            opt(self.lr),
            opt(self.epoch),
            opt(self.ordering_id),
            opt(self.method),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::invalid(format!("csv row has {} fields, expected 8", rec.len())));
        }
        fn opt<T: FromStr>(s: &str) -> Result<Option<T>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::invalid(format!("bad csv field {s:?}")))
            }
        }
        let metric = rec[0].to_string();
        if metric.is_empty() {
            return Err(Error::invalid("empty metric name"));
        }
        let value: f64 = rec[1].parse().map_err(|_| Error::invalid(format!("bad value {:?}", &rec[1])))?;
        if !value.is_finite() {
            return Err(Error::invalid(format!("non-finite value in row {metric}")));
        }
        Ok(MetricReport {
            metric,
            value,
            seed: opt(&rec[2])?,
            n_demos: opt(&rec[3])?,
            lr: opt(&rec[4])?,
            epoch: opt(&rec[5])?,
            ordering_id: opt(&rec[6])?,
            method: opt(&rec[7])?,
        })
    }
}

/// Sorts rows into their canonical order (so serial and parallel runs write
/// identical files) and writes them as CSV with the fixed header.
pub fn write_csv<W: Write>(rows: &[MetricReport], out: W) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(Error::invalid(format!("non-finite value for metric {}", bad.metric)));
    }
    let mut sorted: Vec<&MetricReport> = rows.iter().collect();
    sorted.sort_by(|a, b| a.sort_key(b));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in sorted {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(rows: &[MetricReport], path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(rows, std::io::BufWriter::new(f))
}

/// Parses and validates a metrics CSV produced by [`write_csv`].
pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::invalid(format!("unexpected csv header {header:?}")));
    }
    r.records().map(|rec| MetricReport::from_record(&rec?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> ConfidenceDistribution {
        ConfidenceDistribution::new(p.to_vec()).unwrap()
    }

    /// Distribution with the given unnormalized weights.
    fn normalized(w: &[f64]) -> ConfidenceDistribution {
        let s: f64 = w.iter().sum();
        ConfidenceDistribution::new(w.iter().map(|x| x / s).collect()).unwrap()
    }

    #[test]
    fn distribution_validation() {
        assert!(ConfidenceDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(ConfidenceDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(ConfidenceDistribution::new(vec![]).is_err());
    }

    #[test]
    fn argmax_and_top_k_ties() {
        let d = dist(&[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(d.argmax(), 0);
        assert_eq!(d.top_k(2), vec![0, 1]);
        let d = dist(&[0.1, 0.4, 0.1, 0.4]);
        assert_eq!(d.argmax(), 1);
        assert_eq!(d.top_k(3), vec![1, 3, 0]);
    }

    #[test]
    fn accuracy_counts() {
        let a = dist(&[0.7, 0.2, 0.1]);
        let b = dist(&[0.1, 0.8, 0.1]);
        assert_eq!(accuracy(&[a.clone(), b.clone()], &[0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[a.clone(), b.clone()], &[2, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[a.clone(), b.clone(), a.clone(), b.clone()], &[0, 1, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[a], &[0, 1]).is_err());
    }

    #[test]
    fn overlap_counts() {
        let w1: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        let p = normalized(&w1);
        assert_eq!(token_overlap(&p, &p, 10).unwrap(), 1.0);
        let w2: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
        assert_eq!(token_overlap(&p, &normalized(&w2), 10).unwrap(), 0.0);
        // top-10 of p is 0..10; q's top-10 shares tokens 0..4 only.
        let mut w3 = vec![1.0; 20];
        for t in (0..4).chain(12..18) {
            w3[t] = 10.0 + t as f64;
        }
        let q = normalized(&w3);
        assert!((token_overlap(&p, &q, 10).unwrap() - 0.4).abs() < 1e-15);
        assert!(token_overlap(&p, &q, 21).is_err());
        assert!(token_overlap(&p, &q, 0).is_err());
    }

    #[test]
    fn ocs_cases() {
        let w1: Vec<f64> = (0..20).map(|i| 100.0 - i as f64).collect();
        let p = normalized(&w1);
        assert!((ocs(&p, &p, 10).unwrap() - 1.0).abs() < 1e-12);
        let w2: Vec<f64> = (0..20).map(|i| 1.0 + i as f64).collect();
        assert_eq!(ocs(&p, &normalized(&w2), 10).unwrap(), 0.0);

        // Top-3 overlap on tokens {0, 1}; restricted masses (0.5, 0.3) and (0.4, 0.4).
        let p1 = dist(&[0.5, 0.3, 0.15, 0.05, 0.0]);
        let p2 = dist(&[0.4, 0.4, 0.0, 0.05, 0.15]);
        assert_eq!(p1.top_k(3), vec![0, 1, 2]);
        assert_eq!(p2.top_k(3), vec![0, 1, 4]);
        let oracle = (0.5 * 0.4 + 0.3 * 0.4) / ((0.5f64 * 0.5 + 0.3 * 0.3) * (0.4 * 0.4 + 0.4 * 0.4) * 1.0).sqrt();
        let got = ocs(&p1, &p2, 3).unwrap();
        assert!((got - oracle).abs() < 1e-15);
        assert!((got - 0.9702).abs() < 1e-4, "{got}");
    }

    #[test]
    fn sen_cases() {
        let a = dist(&[1.0, 0.0]);
        let b = dist(&[0.0, 1.0]);
        assert_eq!(order_sensitivity(&[a.clone(), b.clone()]).unwrap(), 1.0);
        assert_eq!(order_sensitivity(&[a.clone(), a.clone(), a.clone()]).unwrap(), 0.0);
        assert!(order_sensitivity(&[a.clone()]).is_err());

        let var = SenOptions { spread: Spread::Variance, aggregate: Aggregate::Mean, population: true };
        assert_eq!(order_sensitivity_with(&[a.clone(), b.clone()], var).unwrap(), 0.25);
        let sample = SenOptions { population: false, ..SenOptions::default() };
        assert!((order_sensitivity_with(&[a, b], sample).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_and_header() {
        let rows = vec![
            MetricReport::new("sen", 0.5).seed(1).n_demos(8).lr(1e-4).epoch(20).method(Method::Sgd),
            MetricReport::new("accuracy", 0.75).seed(0).n_demos(4).method(Method::Icl),
        ];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("metric,value,seed,n_demos,lr,epoch,ordering_id,method\n"));
        assert!(text.contains("accuracy,0.75,0,4,,,,ICL"));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].method, Some(Method::Icl));
        assert!(write_csv(&[MetricReport::new("x", f64::NAN)], Vec::new()).is_err());
        assert!(read_csv("metric,value\nx,1\n".as_bytes()).is_err());
    }

    fn simplex(v: usize) -> impl Strategy<Value = ConfidenceDistribution> {
        proptest::collection::vec(0.01f64..1.0, v).prop_map(|w| normalized(&w))
    }

    proptest! {
        #[test]
        fn overlap_metrics_symmetric_and_bounded(p in simplex(16), q in simplex(16), k in 1usize..=16) {
            let a = token_overlap(&p, &q, k).unwrap();
            prop_assert_eq!(a, token_overlap(&q, &p, k).unwrap());
            prop_assert!((0.0..=1.0).contains(&a));
            let c = ocs(&p, &q, k).unwrap();
            prop_assert!((c - ocs(&q, &p, k).unwrap()).abs() <= 1e-15);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
        }

        #[test]
        fn ocs_self_is_one(p in simplex(12), k in 1usize..=12) {
            prop_assert!((ocs(&p, &p, k).unwrap() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn sen_permutation_invariant_and_scales(
            ds in proptest::collection::vec(simplex(6), 2..6),
            c in 0.0f64..1.0,
        ) {
            let s = order_sensitivity(&ds).unwrap();
            let mut rev = ds.clone();
            rev.reverse();
            prop_assert!((s - order_sensitivity(&rev).unwrap()).abs() <= 1e-12);

            // Shrinking every deviation from the mean by c keeps points on the simplex.
            let n = ds.len() as f64;
            let mean: Vec<f64> = (0..6).map(|t| ds.iter().map(|d| d.probs()[t]).sum::<f64>() / n).collect();
            let shrunk: Vec<_> = ds.iter().map(|d| {
                normalized(&d.probs().iter().zip(&mean).map(|(p, m)| m + c * (p - m)).collect::<Vec<_>>())
            }).collect();
            prop_assert!((order_sensitivity(&shrunk).unwrap() - c * s).abs() <= 1e-9);
        }
    }
}
