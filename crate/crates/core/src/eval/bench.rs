//! Latency benchmark for the attention factorization.
//!
//! Kernels, all eval mode on fixed random inputs:
//! - `joint`: one attention over all `S·T` agent-step tokens.
//! - `factorized`: one `T×T` temporal map plus one `S×S` spatial map, the
//!   per-agent / per-step unit the factorization replaces the joint map with.
//! - `factorized_scene`: temporal attention for all `S` agents plus spatial
//!   attention for all `T` steps, i.e. one whole-scene factorized layer.
//! - `model`: normalization plus full single-scene inference.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{attention, Model};
use crate::numcore::{Graph, Mode, Tensor, Var};
use crate::scene::{normalize, AgentTrack, HistoryPoint, Scene};

pub const CSV_HEADER: &str = "kernel,S,T,mean_ms,median_ms,p95_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Kernel {
    Joint,
    Factorized,
    FactorizedScene,
    Model,
}

impl Kernel {
    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Joint => "joint",
            Kernel::Factorized => "factorized",
            Kernel::FactorizedScene => "factorized_scene",
            Kernel::Model => "model",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub hidden: usize,
    pub heads: usize,
    pub s_list: Vec<usize>,
    pub t_list: Vec<usize>,
    pub warmup: usize,
    pub iterations: usize,
    /// Each timed sample repeats the kernel until it lasts at least this long.
    pub min_sample_secs: f64,
    pub seed: u64,
    pub kernels: Vec<Kernel>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            hidden: 128,
            heads: 8,
            s_list: vec![8, 16, 32, 64],
            t_list: vec![8, 16, 32, 64],
            warmup: 5,
            iterations: 30,
            min_sample_secs: 2e-4,
            seed: 0,
            kernels: vec![Kernel::Joint, Kernel::Factorized, Kernel::FactorizedScene, Kernel::Model],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub s: usize,
    pub t: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl BenchRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6}",
            self.kernel.as_str(),
            self.s,
            self.t,
            self.mean_ms,
            self.median_ms,
            self.p95_ms
        )
    }
}

/// Least-squares fit of `median = a + b·S² + c·T²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub r2: f64,
}

/// Least-squares fit of `log median = log a + α·log S + β·log T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFit {
    pub exponent_s: f64,
    pub exponent_t: f64,
    pub r2: f64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn rows_for(&self, kernel: Kernel) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.kernel == kernel)
    }

    pub fn quadratic_fit(&self, kernel: Kernel) -> Result<QuadraticFit> {
        let pts: Vec<([f64; 3], f64)> = self
            .rows_for(kernel)
            .map(|r| ([1.0, (r.s * r.s) as f64, (r.t * r.t) as f64], r.median_ms))
            .collect();
        let (coef, r2) = least_squares(&pts)?;
        Ok(QuadraticFit {
            a: coef[0],
            b: coef[1],
            c: coef[2],
            r2,
        })
    }

    pub fn power_fit(&self, kernel: Kernel) -> Result<PowerFit> {
        let pts: Vec<([f64; 3], f64)> = self
            .rows_for(kernel)
            .map(|r| ([1.0, (r.s as f64).ln(), (r.t as f64).ln()], r.median_ms.ln()))
            .collect();
        let (coef, r2) = least_squares(&pts)?;
        Ok(PowerFit {
            exponent_s: coef[1],
            exponent_t: coef[2],
            r2,
        })
    }

    pub fn median_at(&self, kernel: Kernel, s: usize, t: usize) -> Option<f64> {
        self.rows_for(kernel).find(|r| r.s == s && r.t == t).map(|r| r.median_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Log-log plot of median latency against `T` (one line per `S`) or
    /// against `S` (one line per `T`), for one kernel.
    pub fn to_svg(&self, kernel: Kernel, against_t: bool) -> String {
        let rows: Vec<&BenchRow> = self.rows_for(kernel).collect();
        let (xs, groups) = if against_t {
            (&self.config.t_list, &self.config.s_list)
        } else {
            (&self.config.s_list, &self.config.t_list)
        };
        svg_plot(
            &format!(
                "{} latency vs {}",
                kernel.as_str(),
                if against_t { "T" } else { "S" }
            ),
            if against_t { "T" } else { "S" },
            if against_t { "S" } else { "T" },
            xs,
            groups,
            |x, grp| {
                let (s, t) = if against_t { (grp, x) } else { (x, grp) };
                rows.iter().find(|r| r.s == s && r.t == t).map(|r| r.median_ms)
            },
        )
    }
}

/// Solves the 3-parameter normal equations; returns coefficients and R².
fn least_squares(pts: &[([f64; 3], f64)]) -> Result<([f64; 3], f64)> {
    if pts.len() < 3 {
        return Err(Error::arg("fit", "need at least three points"));
    }
    let mut a = [[0.0; 4]; 3];
    for (x, y) in pts {
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += x[i] * x[j];
            }
            a[i][3] += x[i] * y;
        }
    }
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        a.swap(col, piv);
        if a[col][col].abs() < 1e-300 {
            return Err(Error::arg("fit", "degenerate design (grid needs two distinct S and T)"));
        }
        for row in 0..3 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..4 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let coef = [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]];
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|(x, y)| (y - (coef[0] * x[0] + coef[1] * x[1] + coef[2] * x[2])).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok((coef, r2))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).expect("positive shape")
}

/// `q, k, v` for `batch` independent sequences of `len` tokens.
struct Qkv {
    q: Tensor<f32>,
    k: Tensor<f32>,
    v: Tensor<f32>,
    mask: Vec<bool>,
}

impl Qkv {
    fn new(rng: &mut ChaCha8Rng, batch: usize, len: usize, dim: usize) -> Self {
        Qkv {
            q: random_tensor(rng, &[batch, len, dim]),
            k: random_tensor(rng, &[batch, len, dim]),
            v: random_tensor(rng, &[batch, len, dim]),
            mask: vec![true; batch * len],
        }
    }

    fn run(&self, g: &mut Graph<f32>, heads: usize) -> Result<Var> {
        let q = g.constant(self.q.clone());
        let k = g.constant(self.k.clone());
        let v = g.constant(self.v.clone());
        Ok(attention(g, q, k, v, heads, &self.mask, &self.mask)?.out)
    }
}

/// Times `f`; returns per-call milliseconds for each timed sample.
fn time_samples(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..cfg.warmup.max(1) {
        f()?;
    }
    // Repeat cheap kernels so one sample is long enough to time reliably.
    let start = Instant::now();
    f()?;
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let reps = ((cfg.min_sample_secs / once).ceil() as usize).max(1);
    let mut samples = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let start = Instant::now();
        for _ in 0..reps {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() * 1e3 / reps as f64);
    }
    Ok(samples)
}

fn summarize(kernel: Kernel, s: usize, t: usize, mut samples: Vec<f64>) -> BenchRow {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let p95 = samples[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    BenchRow {
        kernel,
        s,
        t,
        mean_ms: samples.iter().sum::<f64>() / n as f64,
        median_ms: median,
        p95_ms: p95,
    }
}

/// Runs every requested kernel over the `S × T` grid on the calling thread.
/// `model` is required when [`Kernel::Model`] is requested.
pub fn run_bench(cfg: &BenchConfig, model: Option<&Model<f32>>) -> Result<BenchReport> {
    if cfg.iterations < 30 || cfg.warmup < 5 {
        return Err(Error::Config("bench needs at least 5 warmups and 30 timed iterations".into()));
    }
    if cfg.hidden == 0 || cfg.heads == 0 || !cfg.hidden.is_multiple_of(cfg.heads) {
        return Err(Error::Config("bench hidden must be a positive multiple of heads".into()));
    }
    if cfg.s_list.is_empty() || cfg.t_list.is_empty() || cfg.s_list.iter().chain(&cfg.t_list).any(|&x| x == 0) {
        return Err(Error::Config("bench grid needs positive S and T values".into()));
    }
    let d = cfg.hidden;
    let mut rows = Vec::new();
    for &kernel in &cfg.kernels {
        for &s in &cfg.s_list {
            for &t in &cfg.t_list {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((s as u64) << 32) ^ t as u64);
                let samples = match kernel {
                    Kernel::Joint => {
                        let x = Qkv::new(&mut rng, 1, s * t, d);
                        time_samples(cfg, || {
                            let mut g = Graph::new(Mode::Eval, 0);
                            x.run(&mut g, cfg.heads).map(|_| ())
                        })?
                    }
                    Kernel::Factorized => {
                        let temporal = Qkv::new(&mut rng, 1, t, d);
                        let spatial = Qkv::new(&mut rng, 1, s, d);
                        time_samples(cfg, || {
                            let mut g = Graph::new(Mode::Eval, 0);
                            temporal.run(&mut g, cfg.heads)?;
                            spatial.run(&mut g, cfg.heads).map(|_| ())
                        })?
                    }
                    Kernel::FactorizedScene => {
                        let temporal = Qkv::new(&mut rng, s, t, d);
                        let spatial = Qkv::new(&mut rng, t, s, d);
                        time_samples(cfg, || {
                            let mut g = Graph::new(Mode::Eval, 0);
                            temporal.run(&mut g, cfg.heads)?;
                            spatial.run(&mut g, cfg.heads).map(|_| ())
                        })?
                    }
                    Kernel::Model => {
                        let model = model.ok_or_else(|| Error::arg("bench", "model kernel needs a model"))?;
                        let scene = straight_line_scene(&mut rng, s, t);
                        time_samples(cfg, || model.predict(&normalize(&scene)).map(|_| ()))?
                    }
                };
                rows.push(summarize(kernel, s, t, samples));
            }
        }
    }
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
    })
}

/// `agents` constant-velocity tracks observed for `steps` steps, no futures.
fn straight_line_scene(rng: &mut ChaCha8Rng, agents: usize, steps: usize) -> Scene {
    let agents = (0..agents)
        .map(|a| {
            let start = [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)];
            let heading: f64 = rng.random_range(-3.1..3.1);
            let v = rng.random_range(0.2..1.2);
            AgentTrack {
                id: format!("agent_{a}"),
                history: (0..steps)
                    .map(|k| {
                        let s = v * k as f64;
                        HistoryPoint::new(start[0] + s * heading.cos(), start[1] + s * heading.sin())
                    })
                    .collect(),
                future: None,
            }
        })
        .collect();
    Scene {
        scene_id: "bench".into(),
        dt: 0.1,
        target: 0,
        agents,
    }
}

fn svg_plot(
    title: &str,
    x_label: &str,
    group_label: &str,
    xs: &[usize],
    groups: &[usize],
    value: impl Fn(usize, usize) -> Option<f64>,
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 60.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let value = &value;
    let pts: Vec<(usize, usize, f64)> = groups
        .iter()
        .flat_map(|&grp| xs.iter().filter_map(move |&x| value(x, grp).map(|v| (grp, x, v))))
        .filter(|p| p.2 > 0.0)
        .collect();
    let lx = |x: usize| (x as f64).log10();
    let (x0, x1) = xs.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(lx(x)), b.max(lx(x))));
    let (y0, y1) = pts
        .iter()
        .fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.2.log10()), b.max(p.2.log10())));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| M + (x - x0) / span(x0, x1) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / span(y0, y1) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{M}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{b}" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    for &x in xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{x}</text>"#,
            px(lx(x)),
            H - M + 16.0
        );
    }
    if !pts.is_empty() {
        for (label, y) in [(y0, y0), (y1, y1)] {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{:.3}</text>"#,
                M - 6.0,
                py(y) + 4.0,
                10f64.powf(label)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{x_label} (log scale)</text>"#,
        W / 2.0,
        H - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle" font-family="sans-serif" font-size="12">median ms (log scale)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (gi, &grp) in groups.iter().enumerate() {
        let color = COLORS[gi % COLORS.len()];
        let line: Vec<String> = pts
            .iter()
            .filter(|p| p.0 == grp)
            .map(|p| format!("{:.1},{:.1}", px(lx(p.1)), py(p.2.log10())))
            .collect();
        if line.is_empty() {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            line.join(" ")
        );
        for p in &line {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{group_label}={grp}</text>"#,
            W - M + 6.0,
            M + 14.0 * gi as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_quadratic_recovers_coefficients() {
        let cfg = BenchConfig::default();
        let rows = [8usize, 16, 32]
            .iter()
            .flat_map(|&s| {
                [8usize, 16, 32].into_iter().map(move |t| BenchRow {
                    kernel: Kernel::Factorized,
                    s,
                    t,
                    mean_ms: 0.0,
                    median_ms: 0.5 + 0.01 * (s * s) as f64 + 0.02 * (t * t) as f64,
                    p95_ms: 0.0,
                })
            })
            .collect();
        let report = BenchReport { config: cfg, rows };
        let fit = report.quadratic_fit(Kernel::Factorized).unwrap();
        assert!((fit.a - 0.5).abs() < 1e-9 && (fit.b - 0.01).abs() < 1e-12 && (fit.c - 0.02).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_law_exponents() {
        let rows = [8usize, 16, 64]
            .iter()
            .flat_map(|&s| {
                [8usize, 32, 64].into_iter().map(move |t| BenchRow {
                    kernel: Kernel::Joint,
                    s,
                    t,
                    mean_ms: 0.0,
                    median_ms: 3e-6 * ((s * s * t * t) as f64),
                    p95_ms: 0.0,
                })
            })
            .collect();
        let report = BenchReport {
            config: BenchConfig::default(),
            rows,
        };
        let fit = report.power_fit(Kernel::Joint).unwrap();
        assert!((fit.exponent_s - 2.0).abs() < 1e-9 && (fit.exponent_t - 2.0).abs() < 1e-9);
    }

    #[test]
    fn p95_and_median_of_known_samples() {
        let row = summarize(Kernel::Joint, 1, 1, (1..=20).map(f64::from).collect());
        assert_eq!(row.median_ms, 10.5);
        assert_eq!(row.p95_ms, 19.0);
        assert_eq!(row.mean_ms, 10.5);
    }
}
