//! Evaluation metrics, cluster indices and the nonparametric test battery.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// Binary confusion counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_labels(truth: &[u8], predicted: &[u8]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels vs {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut c = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t != 0, p != 0) {
                (true, true) => c.tp += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Labels predictions as 1 when `score ≥ threshold`.
    pub fn from_scores(truth: &[u8], scores: &[f64], threshold: f64) -> Result<Self> {
        let predicted: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Self::from_labels(truth, &predicted)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub tss: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub fn classification_metrics(c: &ConfusionCounts) -> Result<ClassificationMetrics> {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    if c.tp + c.fn_ == 0 {
        return Err(Error::UndefinedMetric("sensitivity: no positive samples"));
    }
    if c.tn + c.fp == 0 {
        return Err(Error::UndefinedMetric("specificity: no negative samples"));
    }
    let sensitivity = tp / (tp + fn_);
    let specificity = tn / (tn + fp);
    Ok(ClassificationMetrics {
        tss: sensitivity + specificity - 1.0,
        f1: 2.0 * tp / (2.0 * tp + fp + fn_),
        sensitivity,
        specificity,
    })
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} targets vs {} predictions", y.len(), yhat.len())));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64], what: &'static str) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance(what));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation of average-tie ranks.
pub fn spearman_rho(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() || y.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "spearman needs two equal series of length ≥ 2, got {} and {}",
            y.len(),
            yhat.len()
        )));
    }
    pearson(&average_ranks(y), &average_ranks(yhat), "spearman: constant ranks")
}

pub const BOYCE_WINDOWS: usize = 100;

/// Continuous Boyce index: moving windows of width range/10 at 100 evenly
/// spaced centres; per window the presence fraction over the background
/// fraction. Windows without background are dropped, as are windows whose
/// ratio repeats the previous retained one. Returns the Spearman correlation
/// of ratio against window centre.
pub fn boyce_index(presence: &[f64], background: &[f64]) -> Result<f64> {
    if presence.is_empty() || background.is_empty() {
        return Err(Error::EmptyData);
    }
    if presence.iter().chain(background).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("suitability score".into()));
    }
    let (lo, hi) = presence
        .iter()
        .chain(background)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let w = (hi - lo) / 10.0;
    if w <= 0.0 {
        return Err(Error::Degenerate("suitability scores have zero range".into()));
    }
    let first = lo + w / 2.0;
    let last = hi - w / 2.0;
    let step = (last - first) / (BOYCE_WINDOWS - 1) as f64;
    let inside = |v: &[f64], c: f64| v.iter().filter(|&&x| x >= c - w / 2.0 && x <= c + w / 2.0).count();
    let (np, nb) = (presence.len() as f64, background.len() as f64);
    let mut ratios = Vec::new();
    let mut centres = Vec::new();
    for k in 0..BOYCE_WINDOWS {
        let c = first + step * k as f64;
        let b = inside(background, c);
        if b == 0 {
            continue;
        }
        let f = (inside(presence, c) as f64 / np) / (b as f64 / nb);
        if ratios.last() == Some(&f) {
            continue;
        }
        ratios.push(f);
        centres.push(c);
    }
    if ratios.len() < 3 {
        return Err(Error::Degenerate(format!("only {} Boyce windows retained", ratios.len())));
    }
    pearson(&average_ranks(&ratios), &average_ranks(&centres), "boyce: constant ratios")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndices {
    pub davies_bouldin: f64,
    pub calinski_harabasz: f64,
}

pub fn cluster_indices(x: &Matrix, labels: &[usize]) -> Result<ClusterIndices> {
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let mut ids: Vec<usize> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let k = ids.len();
    if k < 2 || n <= k {
        return Err(Error::Degenerate(format!("{k} clusters over {n} points")));
    }
    let slot = |l: usize| ids.binary_search(&l).expect("label collected above");
    let d = x.cols();
    let mut centroids = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        let s = slot(l);
        counts[s] += 1;
        for (c, v) in centroids.row_mut(s).iter_mut().zip(x.row(i)) {
            *c += v;
        }
    }
    for s in 0..k {
        let m = counts[s] as f64;
        centroids.row_mut(s).iter_mut().for_each(|c| *c /= m);
    }
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let mut scatter = vec![0.0; k];
    let mut within = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let s = slot(l);
        let d2 = dist2(x.row(i), centroids.row(s));
        scatter[s] += d2.sqrt();
        within += d2;
    }
    for s in 0..k {
        scatter[s] /= counts[s] as f64;
    }
    let mut db = 0.0;
    for i in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for j in 0..k {
            if i == j {
                continue;
            }
            let sep = dist2(centroids.row(i), centroids.row(j)).sqrt();
            if sep == 0.0 {
                return Err(Error::DegenerateCluster(ids[i], ids[j]));
            }
            worst = worst.max((scatter[i] + scatter[j]) / sep);
        }
        db += worst;
    }
    let grand: Vec<f64> = x.column_sums().into_iter().map(|s| s / n as f64).collect();
    let between: f64 = (0..k).map(|s| counts[s] as f64 * dist2(centroids.row(s), &grand)).sum();
    let ch = if within == 0.0 {
        f64::INFINITY
    } else {
        (between / (k - 1) as f64) / (within / (n - k) as f64)
    };
    Ok(ClusterIndices {
        davies_bouldin: db / k as f64,
        calinski_harabasz: ch,
    })
}

/// Mean fraction of shared `k` nearest neighbours (cosine similarity, self
/// excluded) between two embeddings of the same points.
pub fn knn_overlap(a: &Matrix, b: &Matrix, k: usize) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::ShapeMismatch(format!("{} vs {} points", a.rows(), b.rows())));
    }
    let n = a.rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!("k = {k} with {n} points")));
    }
    let na = crate::numerics::l2_normalize_rows(a)?;
    let nb = crate::numerics::l2_normalize_rows(b)?;
    let neighbours = |m: &Matrix, i: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let sims: Vec<f64> = (0..n).map(|j| dot(m.row(i), m.row(j))).collect();
        idx.sort_by(|&p, &q| sims[q].total_cmp(&sims[p]).then(p.cmp(&q)));
        idx.truncate(k);
        idx.sort_unstable();
        idx
    };
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (neighbours(&na, i), neighbours(&nb, i));
        let shared = x.iter().filter(|v| y.binary_search(v).is_ok()).count();
        total += shared as f64 / k as f64;
    }
    Ok(total / n as f64)
}

/// Regularized upper incomplete gamma `Q(a, x)`: series below `x = a + 1`,
/// Lentz continued fraction above.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;
    let log_prefix = -x + a * x.ln() - libm::lgamma(a);
    if x < a + 1.0 {
        let mut ap = a;
        let mut term = 1.0 / a;
        let mut sum = term;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * EPS {
                break;
            }
        }
        (1.0 - sum * log_prefix.exp()).clamp(0.0, 1.0)
    } else {
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < EPS {
                break;
            }
        }
        (log_prefix.exp() * h).clamp(0.0, 1.0)
    }
}

/// Chi-squared survival function.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

/// Two-sided standard normal tail `P(|Z| ≥ z)`.
pub fn normal_two_sided(z: f64) -> f64 {
    gamma_q(0.5, z * z / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub n: usize,
}

/// Friedman test over `N` subjects (rows) × `k` models (columns).
pub fn friedman_test(scores: &Matrix) -> Result<StatResult> {
    let (n, k) = scores.shape();
    if n < 2 || k < 2 {
        return Err(Error::InvalidArgument(format!("Friedman needs N ≥ 2 and k ≥ 2, got {n}×{k}")));
    }
    if !scores.is_finite() {
        return Err(Error::NonFinite("Friedman scores".into()));
    }
    let mut rank_sums = vec![0.0; k];
    for row in scores.iter_rows() {
        for (s, r) in rank_sums.iter_mut().zip(average_ranks(row)) {
            *s += r;
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let chi2 = 12.0 / (nf * kf * (kf + 1.0)) * rank_sums.iter().map(|r| r * r).sum::<f64>() - 3.0 * nf * (kf + 1.0);
    let chi2 = chi2.max(0.0);
    Ok(StatResult {
        statistic: chi2,
        p_value: chi2_sf(chi2, kf - 1.0),
        method: "friedman-chi2".into(),
        n,
    })
}

/// Largest effective sample size for exact enumeration.
pub const WILCOXON_EXACT_MAX: usize = 12;

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<StatResult> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} paired scores", a.len(), b.len())));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Err(Error::AllZeroDifferences);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    if n <= WILCOXON_EXACT_MAX {
        // ranks are multiples of 1/2: count sign patterns on doubled ranks
        let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
        let total2: u64 = doubled.iter().sum();
        let w2 = (2.0 * w).round() as u64;
        let mut extreme = 0u64;
        for mask in 0u64..(1 << n) {
            let plus: u64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
            if plus.min(total2 - plus) <= w2 {
                extreme += 1;
            }
        }
        return Ok(StatResult {
            statistic: w,
            p_value: (extreme as f64 / (1u64 << n) as f64).min(1.0),
            method: "wilcoxon-exact".into(),
            n,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::ZeroVariance("wilcoxon: all differences tied"));
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(StatResult {
        statistic: w,
        p_value: normal_two_sided(z).min(1.0),
        method: "wilcoxon-normal".into(),
        n,
    })
}

/// Holm step-down adjustment, returned in input order.
pub fn holm_adjust(p: &[f64]) -> Result<Vec<f64>> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("p-values must lie in [0, 1]".into()));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        out[i] = running;
    }
    Ok(out)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len().is_multiple_of(2) { (s[m - 1] + s[m]) / 2.0 } else { s[m] })
}

/// Per-unit (species, trophic group) metrics of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: String,
    pub metrics: Vec<String>,
    pub units: Vec<String>,
    /// `units × metrics`.
    pub values: Matrix,
}

impl MetricReport {
    pub fn new(model: impl Into<String>, metrics: &[&str]) -> Self {
        Self {
            model: model.into(),
            metrics: metrics.iter().map(|s| s.to_string()).collect(),
            units: Vec::new(),
            values: Matrix::zeros(0, metrics.len()),
        }
    }

    pub fn push(&mut self, unit: impl Into<String>, values: &[f64]) -> Result<()> {
        if values.len() != self.metrics.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} metrics",
                values.len(),
                self.metrics.len()
            )));
        }
        let mut data = std::mem::replace(&mut self.values, Matrix::zeros(0, 0)).into_data();
        data.extend_from_slice(values);
        self.units.push(unit.into());
        self.values = Matrix::new(self.units.len(), self.metrics.len(), data)?;
        Ok(())
    }

    pub fn column(&self, metric: &str) -> Result<Vec<f64>> {
        let j = self
            .metrics
            .iter()
            .position(|m| m == metric)
            .ok_or_else(|| Error::InvalidArgument(format!("report has no metric {metric:?}")))?;
        Ok((0..self.values.rows()).map(|i| self.values.get(i, j)).collect())
    }

    pub fn means(&self) -> Vec<f64> {
        let n = self.values.rows().max(1) as f64;
        self.values.column_sums().into_iter().map(|s| s / n).collect()
    }

    /// Header `unit,<metric…>`; values printed with 17 significant digits.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["unit".to_string()];
        header.extend(self.metrics.iter().cloned());
        w.write_record(&header)?;
        for (i, unit) in self.units.iter().enumerate() {
            let mut rec = vec![unit.clone()];
            rec.extend(self.values.row(i).iter().map(|v| format_f64(*v)));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// The model name defaults to the file stem.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let header = r.headers()?.clone();
        if header.get(0) != Some("unit") {
            return Err(Error::Config(format!("{}: first column must be `unit`", path.display())));
        }
        let metrics: Vec<&str> = header.iter().skip(1).collect();
        let model = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
        let mut report = Self::new(model, &metrics);
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Config(format!("bad value {v:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            report.push(rec.get(0).unwrap_or_default(), &vals)?;
        }
        Ok(report)
    }

    pub fn pretty(&self) -> String {
        let mut s = format!("{:<24}", "unit");
        for m in &self.metrics {
            let _ = write!(s, " {m:>12}");
        }
        s.push('\n');
        for (i, unit) in self.units.iter().enumerate() {
            let _ = write!(s, "{unit:<24}");
            for v in self.values.row(i) {
                let _ = write!(s, " {v:>12.4}");
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<24}", "mean");
        for v in self.means() {
            let _ = write!(s, " {v:>12.4}");
        }
        s.push('\n');
        s
    }
}

/// Shortest representation that round-trips.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_p(p: f64) -> String {
    if p < 1e-3 {
        format!("{p:.3e}")
    } else {
        format!("{p:.4}")
    }
}

/// One best-versus-other comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub comparison: String,
    pub statistic: f64,
    pub p: f64,
    pub adjusted_p: f64,
    pub median_diff: f64,
    /// Percent change relative to the other model's median; absent when
    /// that median is zero.
    pub pct_change: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub metric: String,
    pub friedman: StatResult,
    pub best: String,
    pub comparisons: Vec<Comparison>,
    pub winner: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub alpha: f64,
    pub higher_is_better: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            higher_is_better: true,
        }
    }
}

/// Friedman test across models, then best-versus-others Wilcoxon tests with
/// Holm correction. A winner is named only when the Friedman test and every
/// adjusted pairwise test reject at `alpha`.
pub fn ablation_report(models: &[String], scores: &Matrix, metric: &str, cfg: &StatsConfig) -> Result<AblationReport> {
    let k = scores.cols();
    if k < 2 || models.len() != k {
        return Err(Error::InvalidArgument(format!("{} model names for {k} score columns", models.len())));
    }
    let friedman = friedman_test(scores)?;
    let col = |j: usize| -> Vec<f64> { (0..scores.rows()).map(|i| scores.get(i, j)).collect() };
    let sign = if cfg.higher_is_better { 1.0 } else { -1.0 };
    let mut rank_sums = vec![0.0; k];
    for row in scores.iter_rows() {
        let oriented: Vec<f64> = row.iter().map(|v| sign * v).collect();
        for (s, r) in rank_sums.iter_mut().zip(average_ranks(&oriented)) {
            *s += r;
        }
    }
    let best = (0..k)
        .max_by(|&a, &b| rank_sums[a].total_cmp(&rank_sums[b]).then(b.cmp(&a)))
        .expect("k ≥ 2");
    let best_scores = col(best);
    let mut comparisons = Vec::new();
    let mut raw_p = Vec::new();
    for j in (0..k).filter(|&j| j != best) {
        let other = col(j);
        let (statistic, p) = match wilcoxon_signed_rank(&best_scores, &other) {
            Ok(r) => (r.statistic, r.p_value),
            Err(Error::AllZeroDifferences) => (0.0, 1.0),
            Err(e) => return Err(e),
        };
        let diffs: Vec<f64> = best_scores.iter().zip(&other).map(|(a, b)| a - b).collect();
        let median_diff = median(&diffs).unwrap_or(0.0);
        let base = median(&other).unwrap_or(0.0);
        raw_p.push(p);
        comparisons.push(Comparison {
            comparison: format!("{} vs {}", models[best], models[j]),
            statistic,
            p,
            adjusted_p: p,
            median_diff,
            pct_change: (base != 0.0).then(|| 100.0 * median_diff / base.abs()),
        });
    }
    for (c, adj) in comparisons.iter_mut().zip(holm_adjust(&raw_p)?) {
        c.adjusted_p = adj;
    }
    let winner = (friedman.p_value < cfg.alpha && comparisons.iter().all(|c| c.adjusted_p < cfg.alpha))
        .then(|| models[best].clone());
    Ok(AblationReport {
        metric: metric.to_owned(),
        friedman,
        best: models[best].clone(),
        comparisons,
        winner,
    })
}

/// Aligns reports on their shared units and collects one metric into an
/// `N units × k models` matrix.
pub fn collect_scores(reports: &[MetricReport], metric: &str) -> Result<(Vec<String>, Vec<String>, Matrix)> {
    let first = reports.first().ok_or(Error::EmptyData)?;
    let units: Vec<String> = first
        .units
        .iter()
        .filter(|u| reports.iter().all(|r| r.units.contains(u)))
        .cloned()
        .collect();
    if units.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut data = vec![0.0; units.len() * reports.len()];
    for (j, r) in reports.iter().enumerate() {
        let col = r.column(metric)?;
        for (i, u) in units.iter().enumerate() {
            let row = r.units.iter().position(|x| x == u).expect("filtered above");
            data[i * reports.len() + j] = col[row];
        }
    }
    let models = reports.iter().map(|r| r.model.clone()).collect();
    Ok((models, units.clone(), Matrix::new(units.len(), reports.len(), data)?))
}

impl AblationReport {
    /// One row for the Friedman test (carrying the winner, or `none`),
    /// then one per pairwise comparison.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["comparison", "statistic", "p", "adjusted_p", "median_diff", "pct_change", "winner"])?;
        w.write_record([
            "friedman".to_string(),
            format_f64(self.friedman.statistic),
            format_f64(self.friedman.p_value),
            String::new(),
            String::new(),
            String::new(),
            self.winner.clone().unwrap_or_else(|| "none".into()),
        ])?;
        for c in &self.comparisons {
            w.write_record([
                c.comparison.clone(),
                format_f64(c.statistic),
                format_f64(c.p),
                format_f64(c.adjusted_p),
                format_f64(c.median_diff),
                c.pct_change.map(format_f64).unwrap_or_default(),
                String::new(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn pretty(&self) -> String {
        let mut s = format!(
            "metric {}: Friedman χ² = {:.4}, p = {} (N = {})\nbest: {}\n",
            self.metric, self.friedman.statistic, fmt_p(self.friedman.p_value), self.friedman.n, self.best
        );
        let _ = writeln!(
            s,
            "{:<32} {:>12} {:>10} {:>10} {:>12} {:>10}",
            "comparison", "Wilcoxon", "p", "p (Holm)", "median diff", "% change"
        );
        for c in &self.comparisons {
            let pct = c.pct_change.map_or("-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                s,
                "{:<32} {:>12.2} {:>10} {:>10} {:>12.4} {:>10}",
                c.comparison, c.statistic, fmt_p(c.p), fmt_p(c.adjusted_p), c.median_diff, pct
            );
        }
        let _ = writeln!(s, "winner: {}", self.winner.as_deref().unwrap_or("none"));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let c = ConfusionCounts {
            tp: 8,
            fn_: 2,
            tn: 6,
            fp: 4,
        };
        let m = classification_metrics(&c).unwrap();
        assert!((m.sensitivity - 0.8).abs() < 1e-15);
        assert!((m.specificity - 0.6).abs() < 1e-15);
        assert!((m.tss - 0.4).abs() < 1e-15);
        assert!((m.f1 - 8.0 / 11.0).abs() < 1e-15);
        let perfect = classification_metrics(&ConfusionCounts {
            tp: 5,
            tn: 5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!((perfect.tss, perfect.f1, perfect.sensitivity), (1.0, 1.0, 1.0));
        assert!(matches!(
            classification_metrics(&ConfusionCounts { tn: 3, ..Default::default() }),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn coin_flip_has_no_skill() {
        let mut rng = Rng::new(11);
        let truth: Vec<u8> = (0..10_000).map(|i| (i % 2) as u8).collect();
        let guess: Vec<u8> = (0..10_000).map(|_| u8::from(rng.bernoulli(0.5))).collect();
        let m = classification_metrics(&ConfusionCounts::from_labels(&truth, &guess).unwrap()).unwrap();
        assert!(m.tss.abs() < 0.1);
    }

    #[test]
    fn regression_metric_examples() {
        let y = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert!((spearman_rho(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman_rho(&y, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!((spearman_rho(&y, &[1.0, 2.0, 4.0, 3.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(spearman_rho(&y, &[1.0; 4]), Err(Error::ZeroVariance(_))));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    /// Background on an integer grid `0..=m`; presences repeat grid value
    /// `k` with multiplicity `weight(k)`.
    fn weighted_case(weight: impl Fn(usize) -> usize) -> (Vec<f64>, Vec<f64>) {
        let m = 200;
        let background: Vec<f64> = (0..=m).map(|k| k as f64).collect();
        let presence = (0..=m).flat_map(|k| std::iter::repeat_n(k as f64, weight(k))).collect();
        (presence, background)
    }

    #[test]
    fn boyce_monotone_cases() {
        let (p, b) = weighted_case(|k| k);
        assert!((boyce_index(&p, &b).unwrap() - 1.0).abs() < 1e-12);
        let (p, b) = weighted_case(|k| 200 - k);
        assert!((boyce_index(&p, &b).unwrap() + 1.0).abs() < 1e-12);
    }

    /// Per-seed BI under the null has a spread near 0.3 (about ten
    /// independent windows), so the bound is asserted on the seed mean.
    #[test]
    fn boyce_uniform_presences_are_uninformative() {
        let bis: Vec<f64> = (0..10)
            .map(|seed| {
                let mut rng = Rng::new(seed);
                let b: Vec<f64> = (0..1000).map(|_| rng.uniform()).collect();
                let p: Vec<f64> = (0..1000).map(|_| b[rng.below(1000)]).collect();
                boyce_index(&p, &b).unwrap()
            })
            .collect();
        let mean = bis.iter().sum::<f64>() / bis.len() as f64;
        assert!(mean.abs() < 0.3, "{bis:?}");
    }

    #[test]
    fn boyce_identical_distributions_are_degenerate() {
        let mut rng = Rng::new(3);
        let b: Vec<f64> = (0..500).map(|_| rng.uniform()).collect();
        assert!(matches!(boyce_index(&b, &b), Err(Error::Degenerate(_))));
    }

    #[test]
    fn boyce_affine_invariance() {
        let mut rng = Rng::new(8);
        let b: Vec<f64> = (0..800).map(|_| rng.uniform()).collect();
        let p: Vec<f64> = (0..300).map(|_| rng.uniform().sqrt()).collect();
        let t = |v: &Vec<f64>| v.iter().map(|x| 3.0 * x - 7.0).collect::<Vec<_>>();
        let a = boyce_index(&p, &b).unwrap();
        assert!((a - boyce_index(&t(&p), &t(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn cluster_hand_case() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap();
        let c = cluster_indices(&x, &[0, 0, 1, 1]).unwrap();
        assert!((c.davies_bouldin - 0.1).abs() < 1e-9);
        assert!((c.calinski_harabasz - 200.0).abs() < 1e-9);
        let same = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(cluster_indices(&same, &[0, 0, 1, 1]), Err(Error::DegenerateCluster(0, 1))));
    }

    #[test]
    fn davies_bouldin_falls_as_clusters_separate() {
        let mut last = f64::INFINITY;
        for gap in [2.0, 4.0, 8.0, 16.0] {
            let x = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [gap, 0.0], [gap, 1.0]]).unwrap();
            let db = cluster_indices(&x, &[0, 0, 1, 1]).unwrap().davies_bouldin;
            assert!(db < last);
            last = db;
        }
    }

    #[test]
    fn chi2_matches_closed_form() {
        // df = 2 survival is e^{-x/2}
        assert!((chi2_sf(6.0, 2.0) - 0.049_787_068_367_863_942_98).abs() < 1e-10);
        for x in [0.1, 1.0, 2.9, 3.1, 10.0, 40.0] {
            assert!((chi2_sf(x, 2.0) - (-x / 2.0f64).exp()).abs() < 1e-13);
        }
        assert!((normal_two_sided(1.959_963_984_540_054) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn chi2_matches_reference_library() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        for df in [1.0, 2.0, 3.0, 5.0, 10.0, 31.0] {
            let dist = ChiSquared::new(df).unwrap();
            for x in [0.01, 0.5, 1.0, 4.0, 9.0, 20.0, 60.0] {
                let want = dist.sf(x);
                let got = chi2_sf(x, df);
                assert!((got - want).abs() < 1e-12 + 1e-9 * want, "df {df} x {x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn friedman_examples() {
        let s = Matrix::from_rows(&[[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]).unwrap();
        let r = friedman_test(&s).unwrap();
        assert!((r.statistic - 6.0).abs() < 1e-12);
        assert!((r.p_value - (-3.0f64).exp()).abs() < 1e-10);
        let flat = Matrix::from_rows(&[[0.5, 0.5], [0.2, 0.2], [0.9, 0.9]]).unwrap();
        let r = friedman_test(&flat).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.25).abs() < 1e-15);
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]),
            Err(Error::AllZeroDifferences)
        ));
    }

    #[test]
    fn wilcoxon_normal_matches_reference() {
        let mut rng = Rng::new(5);
        let a: Vec<f64> = (0..40).map(|_| rng.normal() + 0.3).collect();
        let b: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.method, "wilcoxon-normal");
        let n = 40.0;
        let z = ((r.statistic - n * (n + 1.0) / 4.0).abs() - 0.5) / (n * (n + 1.0) * (2.0 * n + 1.0) / 24.0).sqrt();
        let want = libm::erfc(z / 2f64.sqrt());
        assert!((r.p_value - want).abs() < 1e-14, "{} vs {want}", r.p_value);
    }

    #[test]
    fn holm_examples() {
        let adj = holm_adjust(&[0.01, 0.04, 0.03]).unwrap();
        assert_eq!(adj, vec![0.03, 0.06, 0.06]);
        assert_eq!(holm_adjust(&[0.2]).unwrap(), vec![0.2]);
        assert_eq!(holm_adjust(&[1.0; 4]).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn ablation_examples() {
        let names = vec!["a".to_string(), "b".to_string()];
        let same = Matrix::from_fn(8, 2, |i, _| i as f64 / 10.0);
        let r = ablation_report(&names, &same, "tss", &StatsConfig::default()).unwrap();
        assert_eq!(r.friedman.p_value, 1.0);
        assert!(r.winner.is_none());
        assert_eq!(r.comparisons[0].p, 1.0);

        let n = 10;
        let dominated = Matrix::from_fn(n, 2, |i, j| i as f64 * 0.05 + 0.1 * j as f64);
        let r = ablation_report(&names, &dominated, "tss", &StatsConfig::default()).unwrap();
        assert_eq!(r.best, "b");
        let c = &r.comparisons[0];
        assert!((c.median_diff - 0.1).abs() < 1e-12);
        assert!((c.p - 2.0 / (1u64 << n) as f64).abs() < 1e-15);
        assert_eq!(r.winner.as_deref(), Some("b"));
        assert!(r.to_csv().unwrap().starts_with("comparison,statistic,p,adjusted_p,median_diff,pct_change"));
    }

    #[test]
    fn report_csv_round_trip() {
        let mut r = MetricReport::new("m", &["tss", "f1"]);
        r.push("sp0", &[0.1 + 0.2, 1.0 / 3.0]).unwrap();
        r.push("sp1", &[-0.0, 1e-300]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        r.write_csv(&p).unwrap();
        assert_eq!(MetricReport::read_csv(&p).unwrap(), r);
    }

    #[test]
    fn knn_overlap_bounds() {
        let mut rng = Rng::new(1);
        let a = Matrix::from_fn(30, 4, |_, _| rng.normal());
        assert_eq!(knn_overlap(&a, &a, 5).unwrap(), 1.0);
        let b = Matrix::from_fn(30, 4, |_, _| rng.normal());
        let o = knn_overlap(&a, &b, 5).unwrap();
        assert!((0.0..1.0).contains(&o));
    }

    proptest! {
        #[test]
        fn tss_symmetric_under_class_swap(tp in 1u64..50, fp in 1u64..50, tn in 1u64..50, fn_ in 1u64..50) {
            let a = classification_metrics(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
            let b = classification_metrics(&ConfusionCounts { tp: tn, fp: fn_, tn: tp, fn_: fp }).unwrap();
            prop_assert!((a.tss - b.tss).abs() < 1e-12);
        }

        #[test]
        fn holm_is_bounded(p in proptest::collection::vec(0.0f64..=1.0, 1..12)) {
            let adj = holm_adjust(&p).unwrap();
            let m = p.len() as f64;
            for (a, r) in adj.iter().zip(&p) {
                prop_assert!(*a >= *r);
                prop_assert!(*a <= (m * r).min(1.0) + 1e-15);
            }
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&x, &y| p[x].total_cmp(&p[y]));
            prop_assert!(order.windows(2).all(|w| adj[w[0]] <= adj[w[1]]));
        }

        #[test]
        fn friedman_column_permutation(seed in 0u64..300) {
            let mut rng = Rng::new(seed);
            let s = Matrix::from_fn(6, 4, |_, _| (rng.below(5)) as f64);
            let mut perm: Vec<usize> = (0..4).collect();
            rng.shuffle(&mut perm);
            let t = Matrix::from_fn(6, 4, |i, j| s.get(i, perm[j]));
            let (a, b) = (friedman_test(&s).unwrap(), friedman_test(&t).unwrap());
            prop_assert!((a.statistic - b.statistic).abs() < 1e-9);
        }

        #[test]
        fn wilcoxon_sign_flip(seed in 0u64..300, n in 1usize..20) {
            let mut rng = Rng::new(seed);
            let d: Vec<f64> = (0..n).map(|_| (rng.below(7) as f64) - 3.0).collect();
            prop_assume!(d.iter().any(|&v| v != 0.0));
            let zero = vec![0.0; n];
            let neg: Vec<f64> = d.iter().map(|v| -v).collect();
            let (a, b) = (wilcoxon_signed_rank(&d, &zero).unwrap(), wilcoxon_signed_rank(&neg, &zero).unwrap());
            prop_assert_eq!(a.p_value, b.p_value);
            prop_assert!((0.0..=1.0).contains(&a.p_value));
        }
    }
}
