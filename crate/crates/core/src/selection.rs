//! Per-neuron membership statistics, rankings and top-fraction masks.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::capture::ActivationMatrix;
use crate::io;
use crate::learners::{ForestParams, Matrix, RandomForest};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TTest,
    #[serde(rename = "ks2samp")]
    Ks2Samp,
    KlDivergence,
    Bootstrap,
    RandomForest,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TTest,
        Method::Ks2Samp,
        Method::KlDivergence,
        Method::Bootstrap,
        Method::RandomForest,
    ];

    pub fn id(&self) -> &'static str {
        match self {
            Method::TTest => "t_test",
            Method::Ks2Samp => "ks2samp",
            Method::KlDivergence => "kl_divergence",
            Method::Bootstrap => "bootstrap",
            Method::RandomForest => "random_forest",
        }
    }

    /// Two-letter tag used in mask names such as `rf-40`.
    pub fn short(&self) -> &'static str {
        match self {
            Method::TTest => "tt",
            Method::Ks2Samp => "ks",
            Method::KlDivergence => "kl",
            Method::Bootstrap => "bs",
            Method::RandomForest => "rf",
        }
    }

    /// Methods ranked by ascending p-value rather than descending score.
    pub fn ranks_by_p_value(&self) -> bool {
        matches!(self, Method::TTest | Method::Ks2Samp)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s || m.short() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown selection method '{s}'")))
    }
}

/// Selection threshold stored as a whole percentage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Threshold(u32);

impl Threshold {
    pub const GRID: [Threshold; 4] = [Threshold(20), Threshold(40), Threshold(60), Threshold(80)];
    pub const FULL: Threshold = Threshold(100);

    pub fn percent(&self) -> u32 {
        self.0
    }

    pub fn fraction(&self) -> f64 {
        self.0 as f64 / 100.0
    }

    /// `floor(T * n)`, computed exactly in integers.
    pub fn count(&self, n: usize) -> usize {
        n * self.0 as usize / 100
    }

    pub fn from_fraction(t: f64) -> Result<Self> {
        let pct = (t * 100.0).round();
        if (t * 100.0 - pct).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("threshold {t} is not one of 0.2..1.0")));
        }
        Threshold::try_from(pct as u32)
    }
}

impl TryFrom<u32> for Threshold {
    type Error = Error;

    fn try_from(p: u32) -> Result<Self> {
        match p {
            20 | 40 | 60 | 80 | 100 => Ok(Threshold(p)),
            _ => Err(Error::InvalidArgument(format!(
                "threshold {p}% is not one of 20, 40, 60, 80, 100"
            ))),
        }
    }
}

impl From<Threshold> for u32 {
    fn from(t: Threshold) -> u32 {
        t.0
    }
}

impl FromStr for Threshold {
    type Err = Error;

    /// Accepts `40`, `40%` or `0.4`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_end_matches('%');
        if let Ok(p) = s.parse::<u32>() {
            return Threshold::try_from(p);
        }
        s.parse::<f64>()
            .map_err(|_| Error::InvalidArgument(format!("bad threshold '{s}'")))
            .and_then(Threshold::from_fraction)
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapStatistic {
    Mean,
    Median,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionParams {
    pub kl_bins: usize,
    /// Dirichlet pseudo-count added to every histogram bin; `None` = `1 / bins`.
    pub kl_pseudo_count: Option<f64>,
    /// Probability floor applied after the pseudo-count.
    pub kl_epsilon: f64,
    pub bootstrap_resamples: usize,
    pub bootstrap_statistic: BootstrapStatistic,
    pub forest: ForestParams,
    /// p-value gate for the t-test significance count.
    pub significance: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            kl_bins: 50,
            kl_pseudo_count: None,
            kl_epsilon: 1e-10,
            bootstrap_resamples: 1000,
            bootstrap_statistic: BootstrapStatistic::Mean,
            forest: ForestParams::default(),
            significance: 0.05,
        }
    }
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test: `(t, two-sided p)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 <= 0.0 {
        return (0.0, 1.0);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0);
    (t, p)
}

/// Kolmogorov distribution tail `Q_KS(lambda)`.
fn q_ks(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    let mut prev = 0.0;
    for j in 1..=200 {
        let term = sign * 2.0 * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() <= 1e-12 * prev || term.abs() <= 1e-300 {
            return sum.clamp(0.0, 1.0);
        }
        prev = term.abs();
        sign = -sign;
    }
    1.0
}

/// Two-sample Kolmogorov-Smirnov: `(D, asymptotic p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_unstable_by(f64::total_cmp);
    xb.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (xa.len(), xb.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let v = xa[i].min(xb[j]);
        while i < na && xa[i] <= v {
            i += 1;
        }
        while j < nb && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let en = (na as f64 * nb as f64 / (na + nb) as f64).sqrt();
    (d, q_ks((en + 0.12 + 0.11 / en) * d))
}

/// Histogram KL(mem || nonmem) over shared equal-width bins.
pub fn kl_divergence(a: &[f64], b: &[f64], params: &SelectionParams) -> f64 {
    let bins = params.kl_bins.max(1);
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = |x: &[f64]| {
        let mut h = vec![0.0; bins];
        for &v in x {
            let k = if hi > lo {
                (((v - lo) / (hi - lo)) * bins as f64).floor() as usize
            } else {
                0
            };
            h[k.min(bins - 1)] += 1.0;
        }
        h
    };
    let alpha = params.kl_pseudo_count.unwrap_or(1.0 / bins as f64);
    let normalise = |h: Vec<f64>| {
        let total: f64 = h.iter().sum::<f64>() + alpha * bins as f64;
        let mut p: Vec<f64> = h.iter().map(|c| (c + alpha) / total + params.kl_epsilon).collect();
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
        p
    };
    let p = normalise(hist(a));
    let q = normalise(hist(b));
    p.iter()
        .zip(&q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

fn statistic(x: &mut [f64], which: BootstrapStatistic) -> f64 {
    match which {
        BootstrapStatistic::Mean => x.iter().sum::<f64>() / x.len() as f64,
        BootstrapStatistic::Median => {
            x.sort_unstable_by(f64::total_cmp);
            let n = x.len();
            if n % 2 == 1 {
                x[n / 2]
            } else {
                0.5 * (x[n / 2 - 1] + x[n / 2])
            }
        }
    }
}

/// Mean over resamples of `|stat(mem*) - stat(nonmem*)|`.
pub fn bootstrap_difference(a: &[f64], b: &[f64], params: &SelectionParams, rng: &mut ChaCha8Rng) -> f64 {
    let mut ra = vec![0.0; a.len()];
    let mut rb = vec![0.0; b.len()];
    let mut total = 0.0;
    for _ in 0..params.bootstrap_resamples {
        for v in ra.iter_mut() {
            *v = a[rng.gen_range(0..a.len())];
        }
        for v in rb.iter_mut() {
            *v = b[rng.gen_range(0..b.len())];
        }
        total += (statistic(&mut ra, params.bootstrap_statistic)
            - statistic(&mut rb, params.bootstrap_statistic))
        .abs();
    }
    total / params.bootstrap_resamples.max(1) as f64
}

/// Scores one neuron; p-values exist for the t-test and KS only.
pub fn score_neuron(
    mem: &[f64],
    nonmem: &[f64],
    method: Method,
    params: &SelectionParams,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    if mem.len() < 2 || nonmem.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 values per class, got {} and {}",
            mem.len(),
            nonmem.len()
        )));
    }
    if let Some(v) = mem.iter().chain(nonmem).find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite activation {v}")));
    }
    Ok(match method {
        Method::TTest => {
            let (t, p) = welch_t_test(mem, nonmem);
            (t, Some(p))
        }
        Method::Ks2Samp => {
            let (d, p) = ks_two_sample(mem, nonmem);
            let zero_var = |x: &[f64]| x.iter().all(|v| *v == x[0]);
            if zero_var(mem) && zero_var(nonmem) {
                (d, Some(1.0))
            } else {
                (d, Some(p))
            }
        }
        Method::KlDivergence => (kl_divergence(mem, nonmem, params), None),
        Method::Bootstrap => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (bootstrap_difference(mem, nonmem, params, &mut rng), None)
        }
        Method::RandomForest => {
            return Err(Error::InvalidArgument(
                "random_forest scores a whole layer; use rank_neurons".into(),
            ))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRanking {
    pub layer: String,
    pub method: Method,
    pub scores: Vec<f64>,
    pub p_values: Vec<Option<f64>>,
    /// Neuron indices, most significant first.
    pub order: Vec<usize>,
}

impl NeuronRanking {
    pub fn neurons(&self) -> usize {
        self.scores.len()
    }

    /// Neurons whose p-value clears `alpha` (t-test and KS only).
    pub fn significant_count(&self, alpha: f64) -> Option<usize> {
        self.method
            .ranks_by_p_value()
            .then(|| self.p_values.iter().flatten().filter(|p| **p < alpha).count())
    }

    fn sort(&mut self) {
        let (scores, p) = (&self.scores, &self.p_values);
        let by_p = self.method.ranks_by_p_value();
        self.order.sort_by(|&a, &b| {
            let primary = if by_p {
                p[a].unwrap_or(1.0).total_cmp(&p[b].unwrap_or(1.0))
                    // p-values that underflow together fall back to effect size.
                    .then(scores[b].abs().total_cmp(&scores[a].abs()))
            } else {
                scores[b].total_cmp(&scores[a])
            };
            primary.then(a.cmp(&b))
        });
    }

    pub fn csv_path(run: &Path, method: Method, layer: &str) -> PathBuf {
        run.join("rankings").join(format!("{}-{layer}.csv", method.id()))
    }

    pub fn save(&self, run: &Path) -> Result<PathBuf> {
        let path = Self::csv_path(run, self.method, &self.layer);
        io::ensure_parent(&path)?;
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["layer", "method", "neuron", "score", "p_value", "rank"])?;
        for (rank, &n) in self.order.iter().enumerate() {
            w.write_record([
                self.layer.clone(),
                self.method.id().to_string(),
                n.to_string(),
                format!("{:e}", self.scores[n]),
                self.p_values[n].map_or(String::new(), |p| format!("{p:e}")),
                (rank + 1).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(run: &Path, method: Method, layer: &str) -> Result<Self> {
        let path = Self::csv_path(run, method, layer);
        let mut r = csv::Reader::from_path(&path)?;
        let mut rows: Vec<(usize, f64, Option<f64>, usize)> = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| Error::Serialization(format!("{}: bad {what}", path.display()));
            rows.push((
                field(2).parse().map_err(|_| bad("neuron"))?,
                field(3).parse().map_err(|_| bad("score"))?,
                if field(4).is_empty() {
                    None
                } else {
                    Some(field(4).parse().map_err(|_| bad("p_value"))?)
                },
                field(5).parse().map_err(|_| bad("rank"))?,
            ));
        }
        let n = rows.len();
        let mut scores = vec![0.0; n];
        let mut p_values = vec![None; n];
        let mut order = vec![0; n];
        for (neuron, s, p, rank) in rows {
            if neuron >= n || rank == 0 || rank > n {
                return Err(Error::Serialization(format!("{}: index out of range", path.display())));
            }
            scores[neuron] = s;
            p_values[neuron] = p;
            order[rank - 1] = neuron;
        }
        Ok(Self {
            layer: layer.to_string(),
            method,
            scores,
            p_values,
            order,
        })
    }
}

/// Ranks every neuron of a layer from member and non-member activations.
pub fn rank_neurons(
    mem: &ActivationMatrix,
    nonmem: &ActivationMatrix,
    method: Method,
    params: &SelectionParams,
    seed: u64,
) -> Result<NeuronRanking> {
    if mem.layer != nonmem.layer || mem.cols != nonmem.cols {
        return Err(Error::InvalidInput(format!(
            "member layer {} ({} neurons) does not match non-member layer {} ({} neurons)",
            mem.layer, mem.cols, nonmem.layer, nonmem.cols
        )));
    }
    if mem.rows < 2 || nonmem.rows < 2 {
        return Err(Error::InvalidInput("need at least 2 rows per class".into()));
    }
    let n = mem.cols;
    let (scores, p_values): (Vec<f64>, Vec<Option<f64>>) = if method == Method::RandomForest {
        let mut data = Vec::with_capacity((mem.rows + nonmem.rows) * n);
        data.extend(mem.data.iter().chain(&nonmem.data).map(|&v| v as f64));
        let x = Matrix::new(mem.rows + nonmem.rows, n, data);
        let y: Vec<u8> = std::iter::repeat(1)
            .take(mem.rows)
            .chain(std::iter::repeat(0).take(nonmem.rows))
            .collect();
        let forest = RandomForest::fit(&x, &y, &params.forest, seed);
        (forest.feature_importances(), vec![None; n])
    } else {
        (0..n)
            .into_par_iter()
            .map(|j| {
                let mut neuron_seed = ChaCha8Rng::seed_from_u64(seed);
                neuron_seed.set_stream(j as u64);
                score_neuron(&mem.column(j), &nonmem.column(j), method, params, neuron_seed.gen())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip()
    };
    let mut ranking = NeuronRanking {
        layer: mem.layer.clone(),
        method,
        scores,
        p_values,
        order: (0..n).collect(),
    };
    ranking.sort();
    Ok(ranking)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionMask {
    pub layer: String,
    /// `None` for the unselected baseline.
    pub method: Option<Method>,
    pub threshold: Threshold,
    /// Selected neurons in ranking order.
    pub indices: Vec<usize>,
}

impl SelectionMask {
    /// Short name such as `rf-40`, or `all-100` for the baseline.
    pub fn name(&self) -> String {
        format!("{}-{}", self.method.map_or("all", |m| m.short()), self.threshold)
    }

    /// The identity mask over all `n` neurons.
    pub fn full(layer: &str, n: usize) -> Self {
        Self {
            layer: layer.to_string(),
            method: None,
            threshold: Threshold::FULL,
            indices: (0..n).collect(),
        }
    }
}

pub fn select_top_fraction(ranking: &NeuronRanking, threshold: Threshold) -> SelectionMask {
    let k = threshold.count(ranking.neurons());
    SelectionMask {
        layer: ranking.layer.clone(),
        method: Some(ranking.method),
        threshold,
        indices: ranking.order[..k].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Source;
    use rand_distr_free::normal;

    /// Box-Muller draws so tests need no extra distribution crate.
    mod rand_distr_free {
        use rand::Rng;
        pub fn normal(rng: &mut impl Rng, mu: f64, sigma: f64) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            mu + sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }

    fn matrix(layer: &str, cols: Vec<Vec<f64>>, label: u8) -> ActivationMatrix {
        let rows = cols[0].len();
        let m = Matrix::from_columns(&cols);
        ActivationMatrix {
            layer: layer.into(),
            source: Source::Shadow,
            rows,
            cols: cols.len(),
            data: m.data.iter().map(|&v| v as f32).collect(),
            indices: (0..rows).collect(),
            membership: vec![label; rows],
        }
    }

    #[test]
    fn identical_samples() {
        let p = SelectionParams::default();
        let x = [1.0, 2.0, 3.0];
        assert_eq!(score_neuron(&x, &x, Method::TTest, &p, 0).unwrap(), (0.0, Some(1.0)));
        assert_eq!(score_neuron(&x, &x, Method::Ks2Samp, &p, 0).unwrap(), (0.0, Some(1.0)));
        assert_eq!(score_neuron(&x, &x, Method::KlDivergence, &p, 0).unwrap(), (0.0, None));
        let c = [4.0; 5];
        assert_eq!(score_neuron(&c, &c, Method::TTest, &p, 0).unwrap(), (0.0, Some(1.0)));
        assert!(matches!(
            score_neuron(&[1.0], &x, Method::TTest, &p, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn welch_matches_reference_value() {
        // Reference: t = -3.05381415, p = 0.01371950 (df = 8.9935).
        let a = [19.1, 20.3, 18.6, 21.0, 20.2];
        let b = [21.8, 22.0, 20.9, 22.8, 20.1, 23.2];
        let (t, p) = welch_t_test(&a, &b);
        assert!((t + 3.053_814_151_3).abs() < 1e-8, "{t}");
        assert!((p - 0.013_719_502_6).abs() < 1e-7, "{p}");
    }

    #[test]
    fn ks_statistic_by_brute_force() {
        let a = [0.1, 0.4, 0.4, 0.9, 1.3];
        let b = [0.2, 0.4, 1.0, 1.1];
        let (d, p) = ks_two_sample(&a, &b);
        let ecdf = |x: &[f64], t: f64| x.iter().filter(|v| **v <= t).count() as f64 / x.len() as f64;
        let brute = a
            .iter()
            .chain(&b)
            .map(|&t| (ecdf(&a, t) - ecdf(&b, t)).abs())
            .fold(0.0, f64::max);
        assert!((d - brute).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn kolmogorov_tail_reference_points() {
        assert!((q_ks(1.3581) - 0.049_999_630).abs() < 1e-8);
        assert!((q_ks(1.0) - 0.269_999_672).abs() < 1e-8);
    }

    #[test]
    fn bootstrap_constants_and_kl_bounds() {
        let p = SelectionParams::default();
        let (s, pv) = score_neuron(&[1.0; 4], &[0.0; 4], Method::Bootstrap, &p, 3).unwrap();
        assert_eq!((s, pv), (1.0, None));
        let kl = kl_divergence(&[0.0, 0.0, 1.0], &[5.0, 6.0, 7.0], &p);
        assert!(kl > 0.0);
    }

    #[test]
    fn ranking_directions_and_ties() {
        let mem = matrix("h", vec![vec![0.0, 0.0, 0.0], vec![5.0, 6.0, 7.0], vec![1.0, 1.0, 1.0], vec![5.0, 6.0, 7.0]], 1);
        let non = matrix("h", vec![vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 2.0], vec![1.0, 1.0, 1.0], vec![0.0, 1.0, 2.0]], 0);
        let p = SelectionParams::default();
        for m in [Method::TTest, Method::Ks2Samp, Method::KlDivergence, Method::Bootstrap] {
            let r = rank_neurons(&mem, &non, m, &p, 1).unwrap();
            assert_eq!(r.order, vec![1, 3, 0, 2], "{m}");
        }
        let other = matrix("g", vec![vec![0.0, 1.0]; 4], 0);
        assert!(matches!(
            rank_neurons(&mem, &other, Method::TTest, &p, 0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn masks() {
        let r = NeuronRanking {
            layer: "h".into(),
            method: Method::KlDivergence,
            scores: (0..10).map(|i| i as f64).collect(),
            p_values: vec![None; 10],
            order: (0..10).rev().collect(),
        };
        assert_eq!(select_top_fraction(&r, "0.2".parse().unwrap()).indices, vec![9, 8]);
        assert_eq!(select_top_fraction(&r, Threshold::FULL).indices, r.order);
        assert_eq!(Threshold::GRID[0].count(512), 102);
        assert!("0.3".parse::<Threshold>().is_err());
        assert!("30".parse::<Threshold>().is_err());
        assert_eq!("rf".parse::<Method>().unwrap(), Method::RandomForest);
        assert_eq!(select_top_fraction(&r, Threshold::GRID[1]).name(), "kl-40");
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cols = |mu: f64, rng: &mut ChaCha8Rng| {
            (0..6).map(|_| (0..30).map(|_| normal(rng, mu, 1.0)).collect()).collect::<Vec<Vec<f64>>>()
        };
        let mem = matrix("fc1", cols(0.5, &mut rng), 1);
        let non = matrix("fc1", cols(0.0, &mut rng), 0);
        let dir = tempfile::tempdir().unwrap();
        for m in Method::ALL {
            let r = rank_neurons(&mem, &non, m, &SelectionParams::default(), 2).unwrap();
            r.save(dir.path()).unwrap();
            let back = NeuronRanking::load(dir.path(), m, "fc1").unwrap();
            assert_eq!(back.order, r.order);
            for (a, b) in back.scores.iter().zip(&r.scores) {
                assert_eq!(a, b);
            }
        }
    }
}
