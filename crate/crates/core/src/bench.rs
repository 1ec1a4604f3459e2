//! Throughput measurement and quality/speed reporting.
//!
//! Only the model call is timed; frames are generated before timing starts.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Summary;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_FRAMES: usize = 100;
pub const DEFAULT_RUNS: usize = 3;
pub const DEFAULT_WARMUP: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchOptions {
    pub frames: usize,
    pub runs: usize,
    /// Untimed calls before the first run.
    pub warmup: usize,
    pub seed: u64,
    pub input: Shape,
    pub scale: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            frames: DEFAULT_FRAMES,
            runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
            seed: 0,
            input: Shape::new(1, 3, 180, 320),
            scale: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub model_id: String,
    pub frames: usize,
    pub runs: usize,
    pub per_run_ms: Vec<f64>,
    /// `frames / mean run seconds`.
    pub fps_mean: f64,
    /// Sample std of the per-run FPS; 0 for a single run.
    pub fps_std: f64,
    pub input_dims: [usize; 4],
    pub scale: usize,
}

/// Seeded uniform frames; a short pool is cycled so long sequences stay cheap.
fn frame_pool<T: Scalar>(opts: &BenchOptions) -> Vec<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.frames.clamp(1, 8))
        .map(|_| Tensor::uniform(opts.input, 0.0, 1.0, &mut rng))
        .collect()
}

/// Times `runs` sequential passes of `runner` over `frames` frames.
pub fn measure_fps<T: Scalar>(
    model_id: &str,
    mut runner: impl FnMut(&Tensor<T>) -> Result<()>,
    opts: &BenchOptions,
) -> Result<BenchResult> {
    if opts.frames == 0 {
        return Err(Error::config("frames", "must be >= 1"));
    }
    if opts.runs == 0 {
        return Err(Error::config("runs", "must be >= 1"));
    }
    let pool = frame_pool::<T>(opts);
    let call = |runner: &mut dyn FnMut(&Tensor<T>) -> Result<()>, i: usize| {
        runner(&pool[i % pool.len()]).map_err(|e| Error::invalid(format!("runner failed at frame {i}: {e}")))
    };
    for i in 0..opts.warmup {
        call(&mut runner, i)?;
    }
    let mut per_run_ms = Vec::with_capacity(opts.runs);
    for _ in 0..opts.runs {
        let start = Instant::now();
        for i in 0..opts.frames {
            call(&mut runner, i)?;
        }
        per_run_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_s = per_run_ms.iter().sum::<f64>() / opts.runs as f64 / 1e3;
    let fps: Vec<f64> = per_run_ms.iter().map(|ms| opts.frames as f64 / (ms / 1e3)).collect();
    Ok(BenchResult {
        model_id: model_id.to_string(),
        frames: opts.frames,
        runs: opts.runs,
        per_run_ms,
        fps_mean: opts.frames as f64 / mean_s,
        fps_std: Summary::of(&fps).std,
        input_dims: opts.input.dims(),
        scale: opts.scale,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub id: String,
    pub quality: f64,
    pub fps: f64,
}

/// Points not dominated in (quality, fps), sorted by ascending fps.
/// `a` dominates `b` when it is at least as good in both and better in one.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let dominates = |a: &ParetoPoint, b: &ParetoPoint| {
        a.quality >= b.quality && a.fps >= b.fps && (a.quality > b.quality || a.fps > b.fps)
    };
    let mut out: Vec<ParetoPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| dominates(q, p)))
        .cloned()
        .collect();
    out.sort_by(|a, b| a.fps.total_cmp(&b.fps).then(a.quality.total_cmp(&b.quality)));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model_id: String,
    pub metrics: BTreeMap<String, MetricCell>,
    pub fps_mean: f64,
    pub fps_std: f64,
}

/// One row per model; metric columns in name order, then FPS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric_names: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Per-video scores of one metric for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricScores {
    pub model_id: String,
    pub metric: String,
    pub values: Vec<f64>,
}

impl Report {
    pub fn build(bench: &[BenchResult], scores: &[MetricScores]) -> Result<Self> {
        let mut rows: Vec<ReportRow> = Vec::with_capacity(bench.len());
        let mut seen = BTreeSet::new();
        for b in bench {
            if !seen.insert(b.model_id.as_str()) {
                return Err(Error::invalid(format!("duplicate model id `{}`", b.model_id)));
            }
            rows.push(ReportRow {
                model_id: b.model_id.clone(),
                metrics: BTreeMap::new(),
                fps_mean: b.fps_mean,
                fps_std: b.fps_std,
            });
        }
        let mut names = BTreeSet::new();
        for s in scores {
            let row = rows
                .iter_mut()
                .find(|r| r.model_id == s.model_id)
                .ok_or_else(|| Error::invalid(format!("metric `{}` names unknown model `{}`", s.metric, s.model_id)))?;
            if s.metric.contains(',') || s.metric.is_empty() {
                return Err(Error::invalid(format!("metric name {:?} is not a valid column", s.metric)));
            }
            let summary = Summary::of(&s.values);
            let cell = MetricCell {
                mean: summary.mean,
                ci95: summary.ci95,
            };
            if row.metrics.insert(s.metric.clone(), cell).is_some() {
                return Err(Error::invalid(format!("duplicate metric `{}` for `{}`", s.metric, s.model_id)));
            }
            names.insert(s.metric.clone());
        }
        for row in &rows {
            if let Some(missing) = names.iter().find(|n| !row.metrics.contains_key(*n)) {
                return Err(Error::invalid(format!("model `{}` has no `{missing}` scores", row.model_id)));
            }
        }
        Ok(Report {
            metric_names: names.into_iter().collect(),
            rows,
        })
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["model_id".to_string()];
        for m in &self.metric_names {
            h.push(format!("{m}_mean"));
            h.push(format!("{m}_ci95"));
        }
        h.push("fps_mean".into());
        h.push("fps_std".into());
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.model_id.clone()];
            for m in &self.metric_names {
                let c = r.metrics[m];
                rec.push(c.mean.to_string());
                rec.push(c.ci95.to_string());
            }
            rec.push(r.fps_mean.to_string());
            rec.push(r.fps_std.to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let bad = |reason: String| Error::Record { line: 1, reason };
        if cols.len() < 3 || cols[0] != "model_id" || cols[cols.len() - 2..] != ["fps_mean", "fps_std"] {
            return Err(bad("expected model_id, metric pairs, fps_mean, fps_std".into()));
        }
        let middle = &cols[1..cols.len() - 2];
        if middle.len() % 2 != 0 {
            return Err(bad("metric columns must come in _mean/_ci95 pairs".into()));
        }
        let mut metric_names = Vec::new();
        for pair in middle.chunks(2) {
            let name = pair[0]
                .strip_suffix("_mean")
                .filter(|n| pair[1].strip_suffix("_ci95") == Some(n))
                .ok_or_else(|| bad(format!("unpaired metric columns {pair:?}")))?;
            metric_names.push(name.to_string());
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let num = |i: usize| -> Result<f64> {
                rec.get(i).unwrap_or("").parse().map_err(|_| Error::Record {
                    line,
                    reason: format!("column `{}` is not a number", cols[i]),
                })
            };
            let mut metrics = BTreeMap::new();
            for (k, name) in metric_names.iter().enumerate() {
                metrics.insert(
                    name.clone(),
                    MetricCell {
                        mean: num(1 + 2 * k)?,
                        ci95: num(2 + 2 * k)?,
                    },
                );
            }
            rows.push(ReportRow {
                model_id: rec.get(0).unwrap_or("").to_string(),
                metrics,
                fps_mean: num(cols.len() - 2)?,
                fps_std: num(cols.len() - 1)?,
            });
        }
        Ok(Report { metric_names, rows })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(q: f64, f: f64) -> ParetoPoint {
        ParetoPoint {
            id: format!("{q}@{f}"),
            quality: q,
            fps: f,
        }
    }

    #[test]
    fn pareto_examples() {
        assert_eq!(pareto_front(&[pt(1.0, 10.0)]), vec![pt(1.0, 10.0)]);
        let all = [pt(1.0, 10.0), pt(2.0, 5.0), pt(0.5, 20.0)];
        assert_eq!(pareto_front(&all), vec![pt(2.0, 5.0), pt(1.0, 10.0), pt(0.5, 20.0)]);
        assert_eq!(pareto_front(&[pt(1.0, 10.0), pt(1.0, 5.0)]), vec![pt(1.0, 10.0)]);
    }

    fn bench_row(id: &str) -> BenchResult {
        BenchResult {
            model_id: id.into(),
            frames: 10,
            runs: 1,
            per_run_ms: vec![50.0],
            fps_mean: 200.0,
            fps_std: 0.0,
            input_dims: [1, 3, 4, 4],
            scale: 2,
        }
    }

    #[test]
    fn fps_only_report() {
        let r = Report::build(&[bench_row("a")], &[]).unwrap();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap(), "model_id,fps_mean,fps_std");
        assert_eq!(Report::from_csv(&csv).unwrap(), r);
    }

    #[test]
    fn report_round_trip_and_ci() {
        let scores = vec![
            MetricScores {
                model_id: "a".into(),
                metric: "psnr".into(),
                values: vec![30.0, 31.0, 32.0, 33.0, 34.0],
            },
            MetricScores {
                model_id: "b".into(),
                metric: "psnr".into(),
                values: vec![29.1],
            },
        ];
        let r = Report::build(&[bench_row("a"), bench_row("b")], &scores).unwrap();
        // sample sd of 30..34 is sqrt(2.5); CI = 1.96 * sqrt(2.5) / sqrt(5)
        assert!((r.rows[0].metrics["psnr"].ci95 - 1.96 * 0.5f64.sqrt()).abs() < 1e-12);
        let back = Report::from_csv(&r.to_csv().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(Report::build(&[bench_row("a"), bench_row("a")], &[]).is_err());
    }

    #[test]
    fn single_run_has_zero_std() {
        let opts = BenchOptions {
            frames: 3,
            runs: 1,
            warmup: 0,
            input: Shape::new(1, 1, 2, 2),
            ..BenchOptions::default()
        };
        let r = measure_fps::<f32>("noop", |_| Ok(()), &opts).unwrap();
        assert_eq!(r.fps_std, 0.0);
        assert_eq!(r.per_run_ms.len(), 1);
    }

    #[test]
    fn runner_error_names_frame() {
        let opts = BenchOptions {
            frames: 5,
            runs: 1,
            warmup: 0,
            input: Shape::new(1, 1, 2, 2),
            ..BenchOptions::default()
        };
        let mut n = 0;
        let err = measure_fps::<f32>(
            "bad",
            |_| {
                n += 1;
                if n == 4 {
                    Err(Error::invalid("boom"))
                } else {
                    Ok(())
                }
            },
            &opts,
        )
        .unwrap_err();
        assert!(err.to_string().contains("frame 3"));
    }
}
