//! Bradley–Terry ranking of pairwise preference judgments.
//!
//! Ties count as half a win for each side. Scores are normalized to mean 1.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pseudo-count added to every ordered pair when some item never wins.
pub const SMOOTHING: f64 = 0.01;
pub const DEFAULT_MAX_ITER: usize = 10_000;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Fraction of failed bootstrap refits above which a warning is raised.
pub const SKIP_WARN_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Response {
    pub worker: String,
    pub left: String,
    pub right: String,
    pub choice: Choice,
    /// Whether the worker answered this verification check correctly.
    pub verified: bool,
}

/// Parses `worker,pair_left,pair_right,choice,verified` rows.
pub fn parse_responses(input: impl std::io::Read) -> Result<Vec<Response>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let want = ["worker", "pair_left", "pair_right", "choice", "verified"];
    if header.iter().collect::<Vec<_>>() != want {
        return Err(Error::Record {
            line: 1,
            reason: format!("header must be {}", want.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::Record { line, reason };
        let choice = match &rec[3] {
            "left" => Choice::Left,
            "right" => Choice::Right,
            "tie" => Choice::Tie,
            other => return Err(bad(format!("choice {other:?} is not left, right or tie"))),
        };
        let verified = match &rec[4] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("verified {other:?} is not 0 or 1"))),
        };
        if rec[1] == rec[2] {
            return Err(bad(format!("item `{}` compared with itself", &rec[1])));
        }
        if rec[0].is_empty() || rec[1].is_empty() || rec[2].is_empty() {
            return Err(bad("empty worker or item id".into()));
        }
        out.push(Response {
            worker: rec[0].to_string(),
            left: rec[1].to_string(),
            right: rec[2].to_string(),
            choice,
            verified,
        });
    }
    Ok(out)
}

pub fn read_responses(path: impl AsRef<Path>) -> Result<Vec<Response>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(Error::at_path(path))?;
    parse_responses(f)
}

/// Aggregated judgments over an ordered item list.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseStudy {
    pub items: Vec<String>,
    /// `wins[i][j]`: times `i` was preferred over `j`, ties counting 1/2.
    pub wins: Vec<Vec<f64>>,
    /// Symmetric tie counts.
    pub ties: Vec<Vec<f64>>,
}

impl PairwiseStudy {
    pub fn new(items: Vec<String>, wins: Vec<Vec<f64>>, ties: Vec<Vec<f64>>) -> Result<Self> {
        let m = items.len();
        if items.iter().collect::<BTreeSet<_>>().len() != m {
            return Err(Error::invalid("duplicate item ids"));
        }
        if wins.len() != m || ties.len() != m || wins.iter().chain(&ties).any(|r| r.len() != m) {
            return Err(Error::invalid(format!("wins and ties must be {m}x{m}")));
        }
        for i in 0..m {
            if wins[i][i] != 0.0 || ties[i][i] != 0.0 {
                return Err(Error::invalid(format!("item `{}` has self-comparisons", items[i])));
            }
            for j in 0..m {
                if !(wins[i][j] >= 0.0 && wins[i][j].is_finite() && ties[i][j] >= 0.0) {
                    return Err(Error::invalid(format!("negative or non-finite count at ({i}, {j})")));
                }
                if ties[i][j] != ties[j][i] {
                    return Err(Error::invalid(format!("tie counts at ({i}, {j}) are not symmetric")));
                }
            }
        }
        Ok(PairwiseStudy { items, wins, ties })
    }

    /// A study of `m` items from a wins matrix with no ties.
    pub fn from_wins(items: Vec<String>, wins: Vec<Vec<f64>>) -> Result<Self> {
        let m = items.len();
        PairwiseStudy::new(items, wins, vec![vec![0.0; m]; m])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total comparisons between `i` and `j`.
    pub fn n(&self, i: usize, j: usize) -> f64 {
        self.wins[i][j] + self.wins[j][i]
    }

    pub fn total_comparisons(&self) -> f64 {
        let m = self.len();
        (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).map(|(i, j)| self.n(i, j)).sum()
    }

    /// Connected components of the comparison graph, as item ids.
    pub fn components(&self) -> Vec<Vec<String>> {
        let m = self.len();
        let mut comp = vec![usize::MAX; m];
        let mut out = Vec::new();
        for start in 0..m {
            if comp[start] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut stack = vec![start];
            comp[start] = id;
            let mut members = Vec::new();
            while let Some(i) = stack.pop() {
                members.push(i);
                for j in 0..m {
                    if comp[j] == usize::MAX && self.n(i, j) > 0.0 {
                        comp[j] = id;
                        stack.push(j);
                    }
                }
            }
            members.sort_unstable();
            out.push(members.into_iter().map(|i| self.items[i].clone()).collect());
        }
        out
    }

    pub fn scaled(&self, k: f64) -> Self {
        let scale = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        PairwiseStudy {
            items: self.items.clone(),
            wins: scale(&self.wins),
            ties: scale(&self.ties),
        }
    }
}

/// Drops every response of any worker who failed a verification check, then
/// aggregates the rest. Items are listed in id order.
pub fn filter_responses(responses: &[Response]) -> PairwiseStudy {
    let failed: BTreeSet<&str> = responses
        .iter()
        .filter(|r| !r.verified)
        .map(|r| r.worker.as_str())
        .collect();
    let kept: Vec<&Response> = responses.iter().filter(|r| !failed.contains(r.worker.as_str())).collect();
    if !failed.is_empty() {
        log::info!(
            "excluded {} workers ({} responses) failing verification",
            failed.len(),
            responses.len() - kept.len()
        );
    }
    let items: Vec<String> = kept
        .iter()
        .flat_map(|r| [r.left.clone(), r.right.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = items.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let m = items.len();
    let mut wins = vec![vec![0.0; m]; m];
    let mut ties = vec![vec![0.0; m]; m];
    for r in kept {
        let (a, b) = (index[r.left.as_str()], index[r.right.as_str()]);
        match r.choice {
            Choice::Left => wins[a][b] += 1.0,
            Choice::Right => wins[b][a] += 1.0,
            Choice::Tie => {
                wins[a][b] += 0.5;
                wins[b][a] += 0.5;
                ties[a][b] += 1.0;
                ties[b][a] += 1.0;
            }
        }
    }
    PairwiseStudy { items, wins, ties }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BtFit {
    /// Strengths, mean 1.
    pub scores: Vec<f64>,
    /// Log-likelihood of the (possibly smoothed) counts after each iteration,
    /// starting with the uniform initial point.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub smoothed: bool,
}

fn log_likelihood(wins: &[Vec<f64>], pi: &[f64]) -> f64 {
    let m = pi.len();
    let mut ll = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j && wins[i][j] > 0.0 {
                ll += wins[i][j] * (pi[i] / (pi[i] + pi[j])).ln();
            }
        }
    }
    ll
}

fn normalize(pi: &mut [f64]) {
    let mean = pi.iter().sum::<f64>() / pi.len() as f64;
    for p in pi {
        *p /= mean;
    }
}

/// Maximum-likelihood strengths by the minorize–maximize iteration
/// `pi_i <- W_i / sum_j n_ij / (pi_i + pi_j)`, all items updated together,
/// until the largest relative change falls below `tol`.
pub fn fit_bradley_terry(study: &PairwiseStudy, max_iter: usize, tol: f64) -> Result<BtFit> {
    let m = study.len();
    if m == 0 {
        return Err(Error::invalid("no items to rank"));
    }
    let comps = study.components();
    if comps.len() > 1 {
        return Err(Error::Disconnected { components: comps });
    }
    let mut wins = study.wins.clone();
    let totals = |w: &[Vec<f64>]| -> Vec<f64> { w.iter().map(|r| r.iter().sum()).collect() };
    let smoothed = m > 1 && totals(&wins).iter().any(|&w| w == 0.0);
    if smoothed {
        for (i, row) in wins.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                if i != j {
                    *w += SMOOTHING;
                }
            }
        }
    }
    let w_tot = totals(&wins);
    let mut pi = vec![1.0; m];
    let mut trace = vec![log_likelihood(&wins, &pi)];
    let mut iterations = 0;
    while iterations < max_iter && m > 1 {
        iterations += 1;
        let mut next = vec![0.0; m];
        for i in 0..m {
            let mut denom = 0.0;
            for j in 0..m {
                let n = wins[i][j] + wins[j][i];
                if j != i && n > 0.0 {
                    denom += n / (pi[i] + pi[j]);
                }
            }
            next[i] = w_tot[i] / denom;
        }
        normalize(&mut next);
        let change = pi
            .iter()
            .zip(&next)
            .map(|(a, b)| ((b - a) / a).abs())
            .fold(0.0, f64::max);
        pi = next;
        trace.push(log_likelihood(&wins, &pi));
        if change < tol {
            break;
        }
    }
    if !pi.iter().all(|p| p.is_finite() && *p > 0.0) {
        return Err(Error::invalid("Bradley–Terry iteration diverged"));
    }
    Ok(BtFit {
        scores: pi,
        log_likelihood: trace,
        iterations,
        smoothed,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapCi {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub replicates: usize,
    pub skipped: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap: each pair's comparisons are redrawn as
/// `Binomial(round(n_ij), wins_ij / n_ij)`, the model is refit, and the
/// 2.5% / 97.5% quantiles of each item's normalized score are reported.
/// Replicate `b` uses ChaCha8 stream `b` of `seed`; failed refits are
/// skipped and counted.
pub fn bootstrap_ci(study: &PairwiseStudy, n_boot: usize, seed: u64, max_iter: usize, tol: f64) -> Result<BootstrapCi> {
    if n_boot == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    fit_bradley_terry(study, max_iter, tol)?;
    let m = study.len();
    let replicate = |b: usize| -> Option<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut wins = vec![vec![0.0; m]; m];
        for i in 0..m {
            for j in i + 1..m {
                let n = study.n(i, j);
                let trials = n.round() as u64;
                if trials == 0 {
                    continue;
                }
                let p = (study.wins[i][j] / n).clamp(0.0, 1.0);
                let k = Binomial::new(trials, p).ok()?.sample(&mut rng) as f64;
                wins[i][j] = k;
                wins[j][i] = trials as f64 - k;
            }
        }
        let s = PairwiseStudy::from_wins(study.items.clone(), wins).ok()?;
        fit_bradley_terry(&s, max_iter, tol).ok().map(|f| f.scores)
    };
    let results: Vec<Option<Vec<f64>>> = (0..n_boot).into_par_iter().map(replicate).collect();
    let ok: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let skipped = n_boot - ok.len();
    if ok.is_empty() {
        return Err(Error::invalid(format!("all {n_boot} bootstrap refits failed")));
    }
    if skipped as f64 > SKIP_WARN_FRACTION * n_boot as f64 {
        log::warn!("{skipped} of {n_boot} bootstrap replicates failed to fit and were skipped");
    }
    let mut low = Vec::with_capacity(m);
    let mut high = Vec::with_capacity(m);
    for i in 0..m {
        let mut v: Vec<f64> = ok.iter().map(|s| s[i]).collect();
        v.sort_by(f64::total_cmp);
        low.push(quantile(&v, 0.025));
        high.push(quantile(&v, 0.975));
    }
    Ok(BootstrapCi {
        low,
        high,
        replicates: n_boot,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item: String,
    pub score: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub items: Vec<RankedItem>,
    pub n_effective: f64,
    pub bootstrap_skipped: usize,
}

/// Fit plus bootstrap intervals. Intervals are widened to contain the point
/// estimate when the bootstrap percentiles exclude it.
pub fn rank(study: &PairwiseStudy, n_boot: usize, seed: u64) -> Result<RankingResult> {
    let fit = fit_bradley_terry(study, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let ci = bootstrap_ci(study, n_boot, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let items = (0..study.len())
        .map(|i| RankedItem {
            item: study.items[i].clone(),
            score: fit.scores[i],
            ci_low: ci.low[i].min(fit.scores[i]),
            ci_high: ci.high[i].max(fit.scores[i]),
        })
        .collect();
    Ok(RankingResult {
        items,
        n_effective: study.total_comparisons(),
        bootstrap_skipped: ci.skipped,
    })
}

/// Writes `item,score,ci_low,ci_high`.
pub fn write_results(path: impl AsRef<Path>, result: &RankingResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["item", "score", "ci_low", "ci_high"])?;
    for r in &result.items {
        w.write_record([r.item.clone(), r.score.to_string(), r.ci_low.to_string(), r.ci_high.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
