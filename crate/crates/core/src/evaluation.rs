//! Metrics, multi-run averaging, the paired bias audit and attention
//! heat-maps.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{TaskHead, Target};

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid(format!("pearson: {} values vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::invalid("pearson needs at least 2 values"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::invalid("pearson: non-finite value"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("pearson: constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean per-example Jaccard index of label bitsets; two empty sets score 1.
pub fn jaccard_multilabel(pred: &[Vec<bool>], gold: &[Vec<bool>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!("jaccard: {} predictions vs {} gold", pred.len(), gold.len())));
    }
    if pred.is_empty() {
        return Err(Error::invalid("jaccard: no examples"));
    }
    let mut total = 0.0;
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::invalid(format!("jaccard: example {i} has {} vs {} labels", p.len(), g.len())));
        }
        let inter = p.iter().zip(g).filter(|(a, b)| **a && **b).count();
        let union = p.iter().zip(g).filter(|(a, b)| **a || **b).count();
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / pred.len() as f64)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() || pred.is_empty() {
        return Err(Error::invalid("accuracy needs equal, non-empty label lists"));
    }
    Ok(pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

/// Metric of a task head: Pearson for regression and ordinal heads (on
/// the class index), Jaccard for multilabel.
pub fn metric_name(head: TaskHead) -> &'static str {
    match head {
        TaskHead::Regression | TaskHead::Ordinal(_) => "pearson",
        TaskHead::Multilabel(_) => "jaccard",
    }
}

pub fn score(head: TaskHead, pred: &[Target], gold: &[Target]) -> Result<f64> {
    match head {
        TaskHead::Regression | TaskHead::Ordinal(_) => {
            let p = pred.iter().map(target_value).collect::<Result<Vec<_>>>()?;
            let g = gold.iter().map(target_value).collect::<Result<Vec<_>>>()?;
            pearson(&p, &g)
        }
        TaskHead::Multilabel(_) => {
            let labels = |ts: &[Target]| -> Result<Vec<Vec<bool>>> {
                ts.iter()
                    .map(|t| match t {
                        Target::Labels(l) => Ok(l.clone()),
                        other => Err(Error::invalid(format!("expected label set, got {other:?}"))),
                    })
                    .collect()
            };
            jaccard_multilabel(&labels(pred)?, &labels(gold)?)
        }
    }
}

fn target_value(t: &Target) -> Result<f64> {
    match t {
        Target::Scalar(v) => Ok(*v),
        Target::Class(c) => Ok(*c as f64),
        Target::Labels(_) => Err(Error::invalid("expected a scalar or class target")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub runs: Vec<f64>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "task,metric,value")?;
        for i in 0..self.runs.len() {
            write!(w, ",run{i}")?;
        }
        writeln!(w)?;
        write!(w, "{},{},{}", self.task, self.metric, self.value)?;
        for v in &self.runs {
            write!(w, ",{v}")?;
        }
        writeln!(w)
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }
}

/// Runs `run(seed + i)` for `i in 0..runs` and averages the results. A
/// failing run aborts the evaluation with its index.
pub fn averaged_eval<F>(task: &str, metric: &str, runs: usize, seed: u64, mut run: F) -> Result<EvalReport>
where
    F: FnMut(u64) -> Result<f64>,
{
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    let mut values = Vec::with_capacity(runs);
    for i in 0..runs {
        let v = run(seed.wrapping_add(i as u64)).map_err(|e| Error::Run {
            run: i,
            source: Box::new(e),
        })?;
        values.push(v);
    }
    Ok(EvalReport {
        task: task.to_string(),
        metric: metric.to_string(),
        value: values.iter().sum::<f64>() / runs as f64,
        runs: values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasPair {
    pub id: String,
    pub sentence_a: String,
    pub sentence_b: String,
    pub context: String,
}

/// Reads `id<TAB>sentence_a<TAB>sentence_b<TAB>context` lines; a first line
/// whose id field is `ID` is a header.
pub fn load_bias_pairs(path: &Path) -> Result<Vec<BiasPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let what = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if i == 0 && f[0] == "ID" {
            continue;
        }
        if f.len() != 4 {
            return Err(Error::parse(&what, i + 1, format!("expected 4 tab-separated fields, found {}", f.len())));
        }
        if f[1].trim().is_empty() || f[2].trim().is_empty() {
            return Err(Error::parse(&what, i + 1, "empty sentence"));
        }
        out.push(BiasPair {
            id: f[0].to_string(),
            sentence_a: f[1].to_string(),
            sentence_b: f[2].to_string(),
            context: f[3].to_string(),
        });
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("{what}: no bias pairs")));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasResult {
    pub pairs: usize,
    pub avg_diff: f64,
    pub p_value: f64,
}

/// Largest pair count tested by exhaustive sign enumeration.
pub const EXACT_MAX_PAIRS: usize = 20;
pub const PERMUTATION_RESAMPLES: usize = 100_000;

/// Mean of `a − b` and its two-sided paired sign-flip permutation p-value.
pub fn bias_eval(scores_a: &[f64], scores_b: &[f64], seed: u64) -> Result<BiasResult> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::invalid("bias_eval: score lists differ in length"));
    }
    if scores_a.is_empty() {
        return Err(Error::invalid("bias_eval needs at least one pair"));
    }
    let diffs: Vec<f64> = scores_a.iter().zip(scores_b).map(|(a, b)| a - b).collect();
    let p_value = if diffs.len() <= EXACT_MAX_PAIRS {
        sign_flip_exact(&diffs)
    } else {
        sign_flip_sampled(&diffs, PERMUTATION_RESAMPLES, seed)
    };
    Ok(BiasResult {
        pairs: diffs.len(),
        avg_diff: diffs.iter().sum::<f64>() / diffs.len() as f64,
        p_value,
    })
}

/// Slack for ties between the observed and a permuted statistic.
fn tie_slack(diffs: &[f64]) -> f64 {
    1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>()
}

/// Fraction of all `2^n` sign patterns whose |Σ s_i d_i| reaches the
/// observed |Σ d_i|.
pub fn sign_flip_exact(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    assert!(n < 63, "exact enumeration over {n} pairs");
    let observed = diffs.iter().sum::<f64>().abs() - tie_slack(diffs);
    let mut hits = 0u64;
    for mask in 0..(1u64 << n) {
        let s: f64 = diffs
            .iter()
            .enumerate()
            .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
            .sum();
        if s.abs() >= observed {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

/// Monte Carlo version of [`sign_flip_exact`]: `(hits + 1) / (R + 1)`.
pub fn sign_flip_sampled(diffs: &[f64], resamples: usize, seed: u64) -> f64 {
    let observed = diffs.iter().sum::<f64>().abs() - tie_slack(diffs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..resamples {
        let s: f64 = diffs.iter().map(|d| if rng.random::<bool>() { -d } else { *d }).sum();
        if s.abs() >= observed {
            hits += 1;
        }
    }
    (hits + 1) as f64 / (resamples + 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapFormat {
    Html,
    Ansi,
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "html" => Ok(HeatmapFormat::Html),
            "ansi" => Ok(HeatmapFormat::Ansi),
            _ => Err(Error::invalid(format!("unknown heat-map format {s:?} (expected html or ansi)"))),
        }
    }
}

impl fmt::Display for HeatmapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapFormat::Html => "html",
            HeatmapFormat::Ansi => "ansi",
        })
    }
}

fn html_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// One span per token, shaded by `a_i / max(a)`.
pub fn render_heatmap(tokens: &[String], weights: &[f64], format: HeatmapFormat) -> Result<Vec<u8>> {
    if tokens.len() != weights.len() {
        return Err(Error::invalid(format!("{} tokens but {} attention weights", tokens.len(), weights.len())));
    }
    if tokens.is_empty() {
        return Err(Error::invalid("nothing to render"));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("attention weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("attention weights sum to {total}, not 1")));
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    let intensity = |w: f64| w / max;
    let mut out = String::new();
    match format {
        HeatmapFormat::Html => {
            out.push_str("<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>attention</title>\n");
            out.push_str("<style>span.tok { padding: 0 2px; font-family: sans-serif; }</style>\n");
            out.push_str("</head>\n<body>\n<p>\n");
            for (t, w) in tokens.iter().zip(weights) {
                out.push_str(&format!(
                    "<span class=\"tok\" title=\"{w:.4}\" style=\"background-color: rgba(255, 0, 0, {:.3})\">{}</span>\n",
                    intensity(*w),
                    html_escape(t)
                ));
            }
            out.push_str("</p>\n</body>\n</html>\n");
        }
        HeatmapFormat::Ansi => {
            let spans: Vec<String> = tokens
                .iter()
                .zip(weights)
                .map(|(t, w)| {
                    let fade = 255 - (255.0 * intensity(*w)).round() as u8;
                    let clean: String = t.chars().map(|c| if c.is_control() { '\u{fffd}' } else { c }).collect();
                    format!("\x1b[38;2;0;0;0;48;2;255;{fade};{fade}m{clean}\x1b[0m")
                })
                .collect();
            out.push_str(&spans.join(" "));
            out.push('\n');
        }
    }
    Ok(out.into_bytes())
}
