//! Latency benchmarking, rank correlation, and ablation networks.
//!
//! The benchmark protocol preallocates the input, runs the model `warmup`
//! times untimed, then times each of `iters` single forwards with a monotonic
//! clock. The minimum is the headline number because it filters out
//! interrupts from other processes; median and tail percentiles are reported
//! alongside since desktop CPUs are noisier than a dedicated device.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::block::init_conv;
use crate::error::{ensure_dim, Error, Result};
use crate::ops::{conv2d, global_avgpool, linear, Activation, ConvSpec, Linear, SeParams, SE_RATIO};
use crate::tensor::{randn_vec, Scalar, Tensor4};

pub const DEFAULT_ITERS: usize = 1000;
pub const DEFAULT_WARMUP: usize = 1;

/// Summary of timed iterations, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub min: u64,
    pub median: u64,
    pub p90: u64,
    pub p99: u64,
    pub mean: u64,
    pub iterations: usize,
    pub warmup: usize,
}

impl LatencyStats {
    /// Aggregates raw samples. Percentiles use the nearest-rank rule.
    pub fn from_samples(samples: &[u64], warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("latency stats need at least one sample".into()));
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let rank = |q: f64| {
            let r = (q * s.len() as f64).ceil() as usize;
            s[r.clamp(1, s.len()) - 1]
        };
        let total: u128 = s.iter().map(|&v| v as u128).sum();
        Ok(Self {
            min: s[0],
            median: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            mean: (total / s.len() as u128) as u64,
            iterations: s.len(),
            warmup,
        })
    }

    pub fn min_ms(&self) -> f64 {
        self.min as f64 / 1e6
    }

    pub fn median_ms(&self) -> f64 {
        self.median as f64 / 1e6
    }
}

/// Times `runner` on a preallocated input of `input_shape`.
pub fn benchmark<T, F>(mut runner: F, input_shape: [usize; 4], warmup: usize, iters: usize) -> Result<LatencyStats>
where
    T: Scalar,
    F: FnMut(&Tensor4<T>) -> Result<Tensor4<T>>,
{
    if iters == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor4::randn(input_shape, 1.0, &mut rng);
    let fail = |iteration: usize, e: Error| Error::Runner {
        iteration,
        source: Box::new(e),
    };
    for i in 0..warmup {
        runner(&input).map_err(|e| fail(i, e))?;
    }
    let mut samples = Vec::with_capacity(iters);
    for i in 0..iters {
        let start = Instant::now();
        let out = runner(&input).map_err(|e| fail(warmup + i, e))?;
        samples.push(start.elapsed().as_nanos() as u64);
        drop(out);
    }
    LatencyStats::from_samples(&samples, warmup)
}

/// Times several runners on one shared input, visiting them round-robin in
/// every iteration so slow drift in machine load affects all of them alike.
/// Returns one summary per runner, in order.
pub fn benchmark_interleaved<T, F>(
    runners: &mut [F],
    input_shape: [usize; 4],
    warmup: usize,
    iters: usize,
) -> Result<Vec<LatencyStats>>
where
    T: Scalar,
    F: FnMut(&Tensor4<T>) -> Result<Tensor4<T>>,
{
    if iters == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one iteration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor4::randn(input_shape, 1.0, &mut rng);
    let fail = |iteration: usize, e: Error| Error::Runner {
        iteration,
        source: Box::new(e),
    };
    let mut samples = vec![Vec::with_capacity(iters); runners.len()];
    for i in 0..warmup + iters {
        for (runner, out) in runners.iter_mut().zip(samples.iter_mut()) {
            let start = Instant::now();
            let y = runner(&input).map_err(|e| fail(i, e))?;
            let elapsed = start.elapsed().as_nanos() as u64;
            drop(y);
            if i >= warmup {
                out.push(elapsed);
            }
        }
    }
    samples.iter().map(|s| LatencyStats::from_samples(s, warmup)).collect()
}

/// Result of a rank-correlation analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrReport {
    pub x_metric: String,
    pub y_metric: String,
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    /// `"exact-permutation"` (n ≤ 10) or `"t-approximation"`.
    pub p_method: String,
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
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

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Largest sample size for which the exact permutation p-value is used.
pub const EXACT_P_MAX_N: usize = 10;

/// Spearman's ρ with mid-ranks, and a two-sided p-value: exact over all
/// permutations for n ≤ 10, otherwise the t approximation
/// `t = ρ·sqrt((n − 2)/(1 − ρ²))` with n − 2 degrees of freedom.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    ensure_dim("spearman", "length", xs.len(), ys.len())?;
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("spearman needs at least 3 pairs".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("spearman inputs must be finite".into()));
    }
    for (name, v) in [("x", xs), ("y", ys)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(Error::InvalidArgument(format!(
                "spearman: {name} is constant, rank correlation is undefined"
            )));
        }
    }
    let rx = mid_ranks(xs);
    let ry = mid_ranks(ys);
    let rho = pearson(&rx, &ry);
    let n = xs.len();
    let p = if n <= EXACT_P_MAX_N {
        permutation_p(&rx, &ry, rho)
    } else {
        t_approx_p(rho, n)
    };
    Ok((rho, p))
}

fn t_approx_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

/// Fraction of all orderings of `ry` whose |ρ| reaches the observed |ρ|.
fn permutation_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let mut perm = ry.to_vec();
    let n = perm.len();
    let target = rho.abs() - 1e-12;
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut c = vec![0usize; n];
    let mut visit = |p: &[f64]| {
        total += 1;
        if pearson(rx, p).abs() >= target {
            hits += 1;
        }
    };
    // Heap's algorithm
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

/// Named-metric wrapper around [`spearman`].
pub fn correlate(x_metric: &str, xs: &[f64], y_metric: &str, ys: &[f64]) -> Result<CorrReport> {
    let (rho, p_value) = spearman(xs, ys)?;
    Ok(CorrReport {
        x_metric: x_metric.into(),
        y_metric: y_metric.into(),
        rho,
        p_value,
        n: xs.len(),
        p_method: if xs.len() <= EXACT_P_MAX_N {
            "exact-permutation".into()
        } else {
            "t-approximation".into()
        },
    })
}

/// One row of the published ImageNet comparison table. Latencies in ms;
/// missing GPU entries are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub model: String,
    pub top1: f64,
    pub flops_m: f64,
    pub params_m: f64,
    pub cpu_ms: Option<f64>,
    pub gpu_ms: Option<f64>,
    pub mobile_ms: f64,
}

/// Bundled CSV of the comparison table.
pub const LATENCY_TABLE_CSV: &str = include_str!("../data/latency_table.csv");

pub fn parse_latency_table(text: &str) -> Result<Vec<LatencyRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r.deserialize().collect::<std::result::Result<Vec<LatencyRow>, _>>()?;
    Ok(rows)
}

pub fn latency_table() -> Vec<LatencyRow> {
    parse_latency_table(LATENCY_TABLE_CSV).expect("bundled table parses")
}

pub fn load_latency_table(path: impl AsRef<Path>) -> Result<Vec<LatencyRow>> {
    parse_latency_table(&std::fs::read_to_string(path)?)
}

/// ρ between FLOPs and mobile latency over `rows`.
pub fn flops_latency_correlation(rows: &[LatencyRow]) -> Result<CorrReport> {
    let f: Vec<f64> = rows.iter().map(|r| r.flops_m).collect();
    let m: Vec<f64> = rows.iter().map(|r| r.mobile_ms).collect();
    correlate("flops", &f, "mobile_latency", &m)
}

/// Activation choice for the ablation networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationActivation {
    Relu,
    Gelu,
    Silu,
    /// ReLU with a squeeze-excite module in every unit.
    SeRelu,
}

impl std::str::FromStr for AblationActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "gelu" => Ok(Self::Gelu),
            "silu" | "swish" => Ok(Self::Silu),
            "se-relu" | "serelu" | "se_relu" => Ok(Self::SeRelu),
            _ => Err(Error::InvalidArgument(format!(
                "unknown activation {s:?}; expected relu, gelu, silu or se-relu"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Number of depthwise-separable units.
    pub depth: usize,
    pub channels: usize,
    pub resolution: usize,
    pub activation: AblationActivation,
    pub with_se: bool,
    pub with_skip: bool,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            depth: 30,
            channels: 64,
            resolution: 56,
            activation: AblationActivation::Relu,
            with_se: false,
            with_skip: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct AblationUnit<T> {
    dw: ConvSpec<T>,
    pw: ConvSpec<T>,
    se: Option<SeParams<T>>,
}

/// Constant-width stack of depthwise-separable units
/// `x → act(dw3×3) → pw1×1 → [SE] → act → [+x]` followed by a pool and a
/// linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationNet<T> {
    pub config: AblationConfig,
    units: Vec<AblationUnit<T>>,
    head: Linear<T>,
}

/// Builds an ablation network. SE is present when `with_se` is set or the
/// activation is SE-ReLU.
pub fn ablation_net<T: Scalar>(cfg: AblationConfig) -> Result<AblationNet<T>> {
    if cfg.depth < 2 {
        return Err(Error::InvalidArgument(format!("ablation depth must be >= 2, got {}", cfg.depth)));
    }
    if cfg.channels == 0 || cfg.resolution == 0 {
        return Err(Error::InvalidArgument("channels and resolution must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let se = cfg.with_se || cfg.activation == AblationActivation::SeRelu;
    let units = (0..cfg.depth)
        .map(|_| {
            let dw = init_conv(c, c, 3, 1, c, true, &mut rng);
            let pw = init_conv(c, c, 1, 1, 1, true, &mut rng);
            let se = se.then(|| {
                let h = crate::ops::se_hidden(c, SE_RATIO);
                SeParams {
                    reduce: init_conv(c, h, 1, 1, 1, true, &mut rng),
                    expand: init_conv(h, c, 1, 1, 1, true, &mut rng),
                    ratio: SE_RATIO,
                }
            });
            AblationUnit { dw, pw, se }
        })
        .collect();
    let head = Linear::new(randn_vec(c * 10, 0.01, &mut rng), vec![T::zero(); 10], c, 10)?;
    Ok(AblationNet { config: cfg, units, head })
}

impl<T: Scalar> AblationNet<T> {
    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.config.channels, self.config.resolution, self.config.resolution]
    }

    fn act(&self) -> Activation {
        match self.config.activation {
            AblationActivation::Relu | AblationActivation::SeRelu => Activation::Relu,
            AblationActivation::Gelu => Activation::Gelu,
            AblationActivation::Silu => Activation::Silu,
        }
    }

    /// Feature map after the last unit (same shape as the input).
    pub fn features(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        ensure_dim("ablation_net", "channels", self.config.channels, x.c())?;
        let act = self.act();
        let mut h = x.clone();
        for u in &self.units {
            let mut y = conv2d(&act.forward(&conv2d(&h, &u.dw)?), &u.pw)?;
            if let Some(se) = &u.se {
                y = crate::ops::se_block(&y, se)?;
            }
            let mut y = act.forward(&y);
            if self.config.with_skip {
                y.add_assign(&h)?;
            }
            h = y;
        }
        Ok(h)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        linear(&global_avgpool(&self.features(x)?), &self.head)
    }

    pub fn param_count(&self) -> usize {
        self.units
            .iter()
            .map(|u| u.dw.param_count() + u.pw.param_count() + u.se.as_ref().map_or(0, SeParams::param_count))
            .sum::<usize>()
            + self.head.param_count()
    }

    /// Multiply-accumulates for one sample, counted like the model zoo:
    /// conv MACs plus SE pooling/gating and the global pool.
    pub fn macs(&self) -> u64 {
        let c = self.config.channels as u64;
        let hw = (self.config.resolution * self.config.resolution) as u64;
        let per_unit = c * hw * 9
            + c * c * hw
            + self.units[0]
                .se
                .as_ref()
                .map_or(0, |se| 2 * c * hw + 2 * c * se.hidden() as u64);
        self.units.len() as u64 * per_unit + c * hw + c * 10
    }
}

/// One line of a benchmark report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
    pub threads: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub min_ns: u64,
    pub median_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    pub mean_ns: u64,
}

impl ReportRow {
    pub fn new(name: &str, params: u64, macs: u64, threads: usize, s: &LatencyStats) -> Self {
        Self {
            name: name.into(),
            params,
            macs,
            threads,
            iterations: s.iterations,
            warmup: s.warmup,
            min_ns: s.min,
            median_ns: s.median,
            p90_ns: s.p90,
            p99_ns: s.p99,
            mean_ns: s.mean,
        }
    }
}

/// Column order of the CSV report.
pub const REPORT_COLUMNS: [&str; 11] = [
    "name", "params", "macs", "threads", "iterations", "warmup", "min_ns", "median_ns", "p90_ns", "p99_ns",
    "mean_ns",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidArgument(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn report_to_string(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(rows)?),
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
            w.write_record(REPORT_COLUMNS)?;
            for r in rows {
                w.serialize(r)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
        }
    }
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<Vec<ReportRow>> {
    match format {
        ReportFormat::Json => Ok(serde_json::from_str(text)?),
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
            if header != REPORT_COLUMNS {
                return Err(Error::Format(format!("unexpected report columns {header:?}")));
            }
            Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
        }
    }
}

/// Writes `rows` to `path` in `format`.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, report_to_string(rows, format)?)?;
    Ok(())
}
