//! Ranking and classification metrics over scored candidate links.
//!
//! Rankings are per product, by descending score; equal scores are ordered by
//! aspect key so every report is reproducible.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate link with its model score in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredLink {
    pub product: String,
    pub aspect: String,
    pub score: f64,
    pub label: bool,
}

impl ScoredLink {
    pub fn new(product: impl Into<String>, aspect: impl Into<String>, score: f64, label: bool) -> Self {
        Self { product: product.into(), aspect: aspect.into(), score, label }
    }
}

fn rank_order(a: &ScoredLink, b: &ScoredLink) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.aspect.cmp(&b.aspect))
}

fn check_finite(links: &[ScoredLink]) -> Result<()> {
    if links.iter().any(|l| !l.score.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    Ok(())
}

/// Ranked label lists for products with at least one positive, plus the
/// number of products left out for having none.
pub fn rankings(links: &[ScoredLink]) -> (Vec<Vec<bool>>, usize) {
    let mut by_product: BTreeMap<&str, Vec<&ScoredLink>> = BTreeMap::new();
    for l in links {
        by_product.entry(&l.product).or_default().push(l);
    }
    let mut ranked = Vec::new();
    let mut excluded = 0;
    for (_, mut ls) in by_product {
        if !ls.iter().any(|l| l.label) {
            excluded += 1;
            continue;
        }
        ls.sort_by(|a, b| rank_order(a, b));
        ranked.push(ls.iter().map(|l| l.label).collect());
    }
    (ranked, excluded)
}

fn ranked_products(links: &[ScoredLink]) -> Result<Vec<Vec<bool>>> {
    check_finite(links)?;
    let (ranked, _) = rankings(links);
    if ranked.is_empty() {
        return Err(Error::Metric("no product has a positive candidate".into()));
    }
    Ok(ranked)
}

fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::Metric("k must be at least 1".into()));
    }
    Ok(())
}

pub fn average_precision(ranked: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &y) in ranked.iter().enumerate() {
        if y {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

pub fn reciprocal_rank(ranked: &[bool]) -> f64 {
    ranked.iter().position(|&y| y).map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

pub fn ndcg(ranked: &[bool], k: usize) -> f64 {
    let dcg: f64 = ranked.iter().take(k).enumerate().filter(|(_, &y)| y).map(|(i, _)| 1.0 / ((i + 2) as f64).log2()).sum();
    let positives = ranked.iter().filter(|&&y| y).count();
    let ideal: f64 = (0..positives.min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

pub fn hits(ranked: &[bool], k: usize) -> bool {
    ranked.iter().take(k).any(|&y| y)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn mean_average_precision(links: &[ScoredLink]) -> Result<f64> {
    Ok(mean(ranked_products(links)?.iter().map(|r| average_precision(r))))
}

pub fn mrr(links: &[ScoredLink]) -> Result<f64> {
    Ok(mean(ranked_products(links)?.iter().map(|r| reciprocal_rank(r))))
}

pub fn ndcg_at_k(links: &[ScoredLink], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(mean(ranked_products(links)?.iter().map(|r| ndcg(r, k))))
}

pub fn hits_at_k(links: &[ScoredLink], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(mean(ranked_products(links)?.iter().map(|r| if hits(r, k) { 1.0 } else { 0.0 })))
}

/// Mann–Whitney estimate of P(positive score > negative score), ties ½.
pub fn auc(links: &[ScoredLink]) -> Result<f64> {
    check_finite(links)?;
    let pos = links.iter().filter(|l| l.label).count();
    let neg = links.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("AUC needs both positive and negative candidates".into()));
    }
    let mut sorted: Vec<&ScoredLink> = links.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Sum of positive mid-ranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|l| l.label).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Unweighted mean of per-aspect F1 with prediction `score ≥ τ`. Aspects
/// with no positives and no positive predictions are left out.
pub fn macro_f1(links: &[ScoredLink], tau: f64) -> Result<f64> {
    check_finite(links)?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Metric(format!("threshold must lie in (0, 1), got {tau}")));
    }
    if !links.iter().any(|l| l.label) {
        return Err(Error::Metric("macro-F1 needs at least one positive".into()));
    }
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for l in links {
        let c = counts.entry(&l.aspect).or_default();
        match (l.score >= tau, l.label) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    Ok(mean(
        counts
            .values()
            .filter(|&&(tp, fp, fn_)| tp + fp + fn_ > 0)
            .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64),
    ))
}

/// Values closer than this count as equal when picking a threshold.
const TIE_TOL: f64 = 1e-12;

/// Threshold maximizing macro-F1 over the distinct scores in `(0, 1)`; ties
/// go to the smallest. Falls back to 0.5 when no score is usable.
///
/// One pass in descending score order, moving links into the predicted
/// positive set and updating only their aspect's F1 term.
pub fn select_threshold(links: &[ScoredLink]) -> Result<f64> {
    check_finite(links)?;
    if !links.iter().any(|l| l.label) {
        return Err(Error::Metric("macro-F1 needs at least one positive".into()));
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for l in links {
        let n = index.len();
        index.entry(&l.aspect).or_insert(n);
    }
    // (tp, fp, fn) per aspect, starting with nothing predicted positive
    let mut counts = vec![(0usize, 0usize, 0usize); index.len()];
    for l in links.iter().filter(|l| l.label) {
        counts[index[l.aspect.as_str()]].2 += 1;
    }
    let term = |(tp, fp, fn_): (usize, usize, usize)| {
        if tp + fp + fn_ > 0 {
            (2.0 * tp as f64 / (2 * tp + fp + fn_) as f64, 1usize)
        } else {
            (0.0, 0)
        }
    };
    let (mut sum, mut active) = counts.iter().fold((0.0, 0), |(s, n), &c| {
        let (f, k) = term(c);
        (s + f, n + k)
    });
    let mut order: Vec<&ScoredLink> = links.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut cands: Vec<f64> = links.iter().map(|l| l.score).filter(|&s| s > 0.0 && s < 1.0).collect();
    cands.push(0.5);
    cands.sort_by(|a, b| b.total_cmp(a));
    cands.dedup();
    let mut best = (f64::NEG_INFINITY, 0.5);
    let mut next = 0;
    for tau in cands {
        while next < order.len() && order[next].score >= tau {
            let l = order[next];
            let c = &mut counts[index[l.aspect.as_str()]];
            let (f, k) = term(*c);
            if l.label {
                c.0 += 1;
                c.2 -= 1;
            } else {
                c.1 += 1;
            }
            let (g, j) = term(*c);
            sum += g - f;
            active = active + j - k;
            next += 1;
        }
        let f = sum / active as f64;
        if f >= best.0 - TIE_TOL {
            best = (f.max(best.0), tau);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub candidates: usize,
    pub positives: usize,
    pub negatives: usize,
    pub ranked_products: usize,
    pub excluded_products: usize,
    pub aspects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub map: f64,
    pub auc: f64,
    pub mrr: f64,
    pub ndcg: Vec<AtK>,
    pub hits: Vec<AtK>,
    pub threshold: f64,
    pub support: Support,
}

pub const DEFAULT_KS: [usize; 3] = [5, 10, 100];

/// Every metric on `links` at threshold `tau`.
pub fn evaluate(links: &[ScoredLink], tau: f64, ks: &[usize]) -> Result<EvalReport> {
    let ranked = ranked_products(links)?;
    for &k in ks {
        check_k(k)?;
    }
    let (_, excluded) = rankings(links);
    let positives = links.iter().filter(|l| l.label).count();
    let aspects: std::collections::BTreeSet<&str> = links.iter().map(|l| l.aspect.as_str()).collect();
    Ok(EvalReport {
        macro_f1: macro_f1(links, tau)?,
        map: mean(ranked.iter().map(|r| average_precision(r))),
        auc: auc(links)?,
        mrr: mean(ranked.iter().map(|r| reciprocal_rank(r))),
        ndcg: ks.iter().map(|&k| AtK { k, value: mean(ranked.iter().map(|r| ndcg(r, k))) }).collect(),
        hits: ks
            .iter()
            .map(|&k| AtK { k, value: mean(ranked.iter().map(|r| if hits(r, k) { 1.0 } else { 0.0 })) })
            .collect(),
        threshold: tau,
        support: Support {
            candidates: links.len(),
            positives,
            negatives: links.len() - positives,
            ranked_products: ranked.len(),
            excluded_products: excluded,
            aspects: aspects.len(),
        },
    })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        Self { mean, std }
    }
}

/// Per-metric summaries over repeated runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub metrics: BTreeMap<String, Summary>,
}

impl EvalReport {
    /// Named metric values in a fixed order.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("macro_f1".to_string(), self.macro_f1),
            ("map".to_string(), self.map),
            ("auc".to_string(), self.auc),
            ("mrr".to_string(), self.mrr),
        ];
        out.extend(self.ndcg.iter().map(|a| (format!("ndcg@{}", a.k), a.value)));
        out.extend(self.hits.iter().map(|a| (format!("hits@{}", a.k), a.value)));
        out
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8}", "metric", "%");
        for (name, v) in self.named() {
            let _ = writeln!(s, "{:<10} {:>8.2}", name, 100.0 * v);
        }
        let _ = writeln!(s, "threshold  {:.4}", self.threshold);
        let _ = writeln!(
            s,
            "support    {} candidates, {} positives, {} ranked products, {} excluded",
            self.support.candidates, self.support.positives, self.support.ranked_products, self.support.excluded_products
        );
        s
    }
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| Error::Metric("nothing to aggregate".into()))?;
    let mut metrics = BTreeMap::new();
    for (i, (name, _)) in first.named().into_iter().enumerate() {
        let xs: Vec<f64> = reports.iter().map(|r| r.named()[i].1).collect();
        metrics.insert(name, Summary::of(&xs));
    }
    Ok(AggregateReport { runs: reports.len(), metrics })
}

impl AggregateReport {
    /// "F1 / mAP (%)" line followed by every metric as mean ± std.
    pub fn render_table(&self) -> String {
        let pct = |k: &str| self.metrics.get(k).map_or((f64::NAN, f64::NAN), |s| (100.0 * s.mean, 100.0 * s.std));
        let (f, fs) = pct("macro_f1");
        let (m, ms) = pct("map");
        let mut s = String::new();
        let _ = writeln!(s, "runs: {}", self.runs);
        let _ = writeln!(s, "F1 / mAP (%)  {f:.2} ± {fs:.2} / {m:.2} ± {ms:.2}");
        for (name, sm) in &self.metrics {
            let _ = writeln!(s, "{:<10} {:>8.2} ± {:.2}", name, 100.0 * sm.mean, 100.0 * sm.std);
        }
        s
    }
}
