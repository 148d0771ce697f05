//! Test sets, the four evaluation metrics, grid sweeps and the
//! benchmark table.
//!
//! Every metric is a mean over a [`TestSet`]. Profiles are processed in
//! fixed-size chunks that may run on any number of threads; per-chunk sums
//! are combined in chunk order, so results do not depend on the thread
//! count.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{player_utility, welfare, Outcome, Profile, Support, TradeMatching, ValuationProfile};
use crate::error::{Error, Result};
use crate::mechanism::{LearnedMechanism, McAfee, Mechanism, Vcg, EVAL_CHUNK};
use crate::training::{ascend_rows, utility_of};

/// Largest test set [`make_grid_testset`] will build.
pub const MAX_GRID_PROFILES: f64 = 1e8;

/// Default step for grid sweeps.
pub const SWEEP_STEP: f64 = 0.005;

/// Step of the deviation scan used for regret of baseline protocols.
pub const DEVIATION_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Grid { step: f64 },
    Sampled { seed: u64, count: usize },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Grid { step } => write!(f, "grid-{step}"),
            Provenance::Sampled { seed, count } => write!(f, "sampled-{count}-seed-{seed}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub n: usize,
    pub m: usize,
    pub profiles: Vec<ValuationProfile>,
    pub provenance: Provenance,
}

impl TestSet {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// Number of intervals when `step` divides the unit interval evenly.
fn grid_intervals(step: f64) -> Result<usize> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidConfig(format!("grid step {step} must lie in (0, 1]")));
    }
    let k = (1.0 / step).round();
    if ((k * step) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("grid step {step} does not divide 1")));
    }
    Ok(k as usize)
}

/// Point `i` of a grid with `k` intervals over `support`.
fn grid_point(support: &Support, i: usize, k: usize) -> f64 {
    support.lo + support.width() * (i as f64 / k as f64)
}

/// Every combination of grid values over all `n + m` coordinates of the
/// unit support. The last seller varies fastest.
pub fn make_grid_testset(n: usize, m: usize, step: f64) -> Result<TestSet> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidConfig("need at least one buyer and one seller".into()));
    }
    let k = grid_intervals(step)?;
    let players = n + m;
    let profiles = ((k + 1) as f64).powi(players as i32);
    if profiles > MAX_GRID_PROFILES {
        return Err(Error::Intractable {
            profiles,
            limit: MAX_GRID_PROFILES,
        });
    }
    let support = Support::default();
    let count = profiles as usize;
    let mut out = Vec::with_capacity(count);
    let mut idx = vec![0usize; players];
    for _ in 0..count {
        let values: Vec<f64> = idx.iter().map(|&i| grid_point(&support, i, k)).collect();
        out.push(Profile::new(values[..n].to_vec(), values[n..].to_vec()));
        for d in (0..players).rev() {
            idx[d] += 1;
            if idx[d] <= k {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(TestSet {
        n,
        m,
        profiles: out,
        provenance: Provenance::Grid { step },
    })
}

/// `count` profiles drawn uniformly from the support with a seeded
/// generator.
pub fn sampled_testset(n: usize, m: usize, count: usize, seed: u64, support: &Support) -> Result<TestSet> {
    if n == 0 || m == 0 || count == 0 {
        return Err(Error::InvalidConfig("sampled test sets need n, m and count >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profiles = (0..count)
        .map(|_| {
            let buyers = (0..n).map(|_| rng.gen_range(support.lo..=support.hi)).collect();
            let sellers = (0..m).map(|_| rng.gen_range(support.lo..=support.hi)).collect();
            Profile::new(buyers, sellers)
        })
        .collect();
    Ok(TestSet {
        n,
        m,
        profiles,
        provenance: Provenance::Sampled { seed, count },
    })
}

/// Sum of `f` over every profile, computed chunk by chunk and combined in
/// order.
fn ordered_sum<T, F>(items: &[T], chunk: usize, f: F) -> Result<f64>
where
    T: Sync,
    F: Fn(&[T]) -> Result<f64> + Sync,
{
    let partial: Vec<f64> = items
        .par_chunks(chunk.max(1))
        .map(|c| f(c))
        .collect::<Result<_>>()?;
    Ok(partial.iter().sum())
}

fn ordered_sums<T, F>(items: &[T], chunk: usize, width: usize, f: F) -> Result<Vec<f64>>
where
    T: Sync,
    F: Fn(&[T]) -> Result<Vec<f64>> + Sync,
{
    let partial: Vec<Vec<f64>> = items
        .par_chunks(chunk.max(1))
        .map(|c| f(c))
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; width];
    for p in &partial {
        for (t, x) in total.iter_mut().zip(p) {
            *t += x;
        }
    }
    Ok(total)
}

fn check_nonempty(tests: &TestSet) -> Result<f64> {
    if tests.is_empty() {
        return Err(Error::InvalidConfig("empty test set".into()));
    }
    Ok(tests.len() as f64)
}

/// Mean welfare under truthful bidding.
pub fn expected_welfare<M: Mechanism + ?Sized>(mech: &M, tests: &TestSet) -> Result<f64> {
    let count = check_nonempty(tests)?;
    let total = ordered_sum(&tests.profiles, EVAL_CHUNK, |chunk| {
        let outcomes = mech.outcomes(chunk)?;
        chunk
            .iter()
            .zip(&outcomes)
            .map(|(v, o)| welfare(v, &o.matching))
            .sum()
    })?;
    Ok(total / count)
}

/// Mean hinge deficit `max(0, sum r - sum p)` under truthful bidding.
pub fn expected_bbp<M: Mechanism + ?Sized>(mech: &M, tests: &TestSet) -> Result<f64> {
    let count = check_nonempty(tests)?;
    let total = ordered_sum(&tests.profiles, EVAL_CHUNK, |chunk| {
        Ok(mech.outcomes(chunk)?.iter().map(deficit).sum())
    })?;
    Ok(total / count)
}

fn deficit(o: &Outcome) -> f64 {
    (o.revenues.iter().sum::<f64>() - o.payments.iter().sum::<f64>()).max(0.0)
}

/// Inner-maximization settings for ex-post regret.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegretConfig {
    pub steps: usize,
    pub lr: f64,
    /// Uniform random starting points in addition to the truthful one.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for RegretConfig {
    fn default() -> Self {
        RegretConfig {
            steps: 25,
            lr: 0.1,
            restarts: 10,
            seed: 0,
        }
    }
}

/// Regret per player and its average over all players.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub buyers: Vec<f64>,
    pub sellers: Vec<f64>,
    pub mean: f64,
}

impl RegretReport {
    fn from_totals(totals: Vec<f64>, n: usize, count: f64) -> Self {
        let per: Vec<f64> = totals.iter().map(|t| t / count).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        RegretReport {
            buyers: per[..n].to_vec(),
            sellers: per[n..].to_vec(),
            mean,
        }
    }
}

/// Ex-post regret of a learned mechanism.
///
/// For each profile and player, projected gradient ascent runs from the
/// truthful report and from `restarts` uniform draws; the best final
/// report's utility gain over truth-telling, clamped at zero, is averaged
/// over the test set.
pub fn expost_regret(mech: &LearnedMechanism, tests: &TestSet, config: &RegretConfig) -> Result<RegretReport> {
    let count = check_nonempty(tests)?;
    let net = &mech.net;
    let (n, m) = (net.n(), net.m());
    if (tests.n, tests.m) != (n, m) {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} test set for a {n}x{m} model",
            tests.n, tests.m
        )));
    }
    let players = n + m;
    let starts = config.restarts + 1;
    let support = net.config.support;

    // Restart points are drawn up front so that they do not depend on how
    // the work is split.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let inits: Vec<f64> = (0..tests.len() * players * config.restarts)
        .map(|_| rng.gen_range(support.lo..=support.hi))
        .collect();
    let indexed: Vec<usize> = (0..tests.len()).collect();
    let per_chunk = (4096 / (players * starts)).max(1);

    let totals = ordered_sums(&indexed, per_chunk, players, |chunk| {
        let profiles: Vec<&Profile> = chunk.iter().map(|&s| &tests.profiles[s]).collect();
        let mut truths = Vec::new();
        let mut who = Vec::new();
        let mut reports = Vec::new();
        for (&s, t) in chunk.iter().zip(&profiles) {
            for k in 0..players {
                for r in 0..starts {
                    truths.push(*t);
                    who.push(k);
                    reports.push(if r == 0 {
                        t.get(k)
                    } else {
                        inits[(s * players + k) * config.restarts + r - 1]
                    });
                }
            }
        }
        ascend_rows(net, &mech.params, &truths, &who, &mut reports, config.steps, config.lr)?;
        let lied: Vec<Profile> = truths
            .iter()
            .zip(&who)
            .zip(&reports)
            .map(|((t, &k), &r)| t.with(k, r))
            .collect();
        let deviated = mech.forward_all(&lied)?;
        let honest_inputs: Vec<Profile> = profiles.iter().map(|p| (*p).clone()).collect();
        let honest = mech.forward_all(&honest_inputs)?;

        let mut sums = vec![0.0; players];
        for (c, (t, h)) in profiles.iter().zip(&honest).enumerate() {
            for (k, sum) in sums.iter_mut().enumerate() {
                let truthful = utility_of(h, t.get(k), k);
                let base = (c * players + k) * starts;
                let best = deviated[base..base + starts]
                    .iter()
                    .map(|d| utility_of(d, t.get(k), k))
                    .fold(f64::NEG_INFINITY, f64::max);
                *sum += (best - truthful).max(0.0);
            }
        }
        Ok(sums)
    })?;
    Ok(RegretReport::from_totals(totals, n, count))
}

/// Regret from an exhaustive scan of single-player deviations on a grid of
/// the support. Suited to protocols whose outcomes are piecewise constant in
/// each bid.
pub fn deviation_regret<M: Mechanism + ?Sized>(
    mech: &M,
    tests: &TestSet,
    step: f64,
    support: &Support,
) -> Result<RegretReport> {
    let count = check_nonempty(tests)?;
    let k = grid_intervals(step)?;
    let (n, m) = (tests.n, tests.m);
    let players = n + m;
    let deviations: Vec<f64> = (0..=k).map(|i| grid_point(support, i, k)).collect();
    let totals = ordered_sums(&tests.profiles, 64, players, |chunk| {
        let mut sums = vec![0.0; players];
        for t in chunk {
            let honest = mech.outcome(t)?;
            for (p, sum) in sums.iter_mut().enumerate() {
                let value = t.get(p);
                let truthful = player_utility(value, &honest, p)?;
                let lied: Vec<Profile> = deviations.iter().map(|&d| t.with(p, d)).collect();
                let mut best = truthful;
                for o in mech.outcomes(&lied)? {
                    best = best.max(player_utility(value, &o, p)?);
                }
                *sum += best - truthful;
            }
        }
        Ok(sums)
    })?;
    Ok(RegretReport::from_totals(totals, n, count))
}

fn plogp(x: f64) -> f64 {
    // residual masses can come out a hair below zero
    let x = x.max(0.0);
    if x == 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// Normalized entropy of one matching, with the no-trade masses taken as the
/// row and column residuals `1 - sum g`.
///
/// Buyer rows are normalized by `log2 m` and seller columns by `log2 n`, so
/// a row that puts mass on the no-trade outcome can contribute more than 1.
pub fn normalized_entropy(g: &TradeMatching) -> Result<f64> {
    let (n, m) = (g.n(), g.m());
    if n < 2 || m < 2 {
        return Err(Error::Unsupported(format!(
            "matching entropy needs at least two buyers and two sellers, got {n}x{m}"
        )));
    }
    let mut buyer_side = 0.0;
    for i in 0..n {
        buyer_side += plogp(1.0 - g.row_sum(i));
        for j in 0..m {
            buyer_side += plogp(g.get(i, j));
        }
    }
    let mut seller_side = 0.0;
    for j in 0..m {
        seller_side += plogp(1.0 - g.col_sum(j));
        for i in 0..n {
            seller_side += plogp(g.get(i, j));
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    let h = -buyer_side / (2.0 * nf * mf.log2()) - seller_side / (2.0 * mf * nf.log2());
    Ok(h.max(0.0))
}

/// Mean normalized entropy of the mechanism's matchings over the test set.
pub fn matching_entropy<M: Mechanism + ?Sized>(mech: &M, tests: &TestSet) -> Result<f64> {
    let count = check_nonempty(tests)?;
    if tests.n < 2 || tests.m < 2 {
        return Err(Error::Unsupported(format!(
            "matching entropy needs at least two buyers and two sellers, got {}x{}",
            tests.n, tests.m
        )));
    }
    let total = ordered_sum(&tests.profiles, EVAL_CHUNK, |chunk| {
        mech.outcomes(chunk)?
            .iter()
            .map(|o| normalized_entropy(&o.matching))
            .sum()
    })?;
    Ok(total / count)
}

/// A coordinate of a bid profile: buyer `i` or seller `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Coord {
    Buyer(usize),
    Seller(usize),
}

impl Coord {
    fn player(self, n: usize) -> usize {
        match self {
            Coord::Buyer(i) => i,
            Coord::Seller(j) => n + j,
        }
    }
}

impl fmt::Display for Coord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coord::Buyer(i) => write!(f, "b{i}"),
            Coord::Seller(j) => write!(f, "s{j}"),
        }
    }
}

impl FromStr for Coord {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::MalformedSweep(format!("bad coordinate `{s}`, expected b<i> or s<j>"));
        let (head, index) = s.split_at_checked(1).ok_or_else(bad)?;
        let index: usize = index.parse().map_err(|_| bad())?;
        match head {
            "b" => Ok(Coord::Buyer(index)),
            "s" => Ok(Coord::Seller(index)),
            _ => Err(bad()),
        }
    }
}

/// Which coordinates a sweep varies and where it pins the rest.
///
/// Text form: `<n>x<m>:<free>[;<coord>=<value>]...[;step=<step>]`, with one
/// or two comma-separated free coordinates, e.g. `1x1:b0,s0` or
/// `2x1:b0,b1;s0=0.5;step=0.01`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub n: usize,
    pub m: usize,
    pub free: Vec<Coord>,
    pub fixed: Vec<(Coord, f64)>,
    pub step: f64,
}

impl SweepSpec {
    pub fn new(n: usize, m: usize, free: Vec<Coord>, fixed: Vec<(Coord, f64)>, step: f64) -> Result<Self> {
        let spec = SweepSpec { n, m, free, fixed, step };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedSweep(msg));
        if self.n == 0 || self.m == 0 {
            return bad("a sweep needs at least one buyer and one seller".into());
        }
        if !(1..=2).contains(&self.free.len()) {
            return bad(format!("{} free coordinates; one or two are allowed", self.free.len()));
        }
        if grid_intervals(self.step).is_err() {
            return bad(format!("step {} does not divide 1", self.step));
        }
        let mut seen = vec![false; self.n + self.m];
        let all = self.free.iter().chain(self.fixed.iter().map(|(c, _)| c));
        for c in all {
            let in_range = match *c {
                Coord::Buyer(i) => i < self.n,
                Coord::Seller(j) => j < self.m,
            };
            if !in_range {
                return bad(format!("coordinate {c} outside a {}x{} market", self.n, self.m));
            }
            let k = c.player(self.n);
            if seen[k] {
                return bad(format!("coordinate {c} given twice"));
            }
            seen[k] = true;
        }
        for (c, v) in &self.fixed {
            if !Support::default().contains(*v) {
                return bad(format!("{c}={v} lies outside [0, 1]"));
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            let c = if k < self.n { Coord::Buyer(k) } else { Coord::Seller(k - self.n) };
            return bad(format!("coordinate {c} is neither free nor fixed"));
        }
        Ok(())
    }

    /// Points along each free axis.
    pub fn axis_len(&self) -> usize {
        grid_intervals(self.step).map_or(0, |k| k + 1)
    }

    pub fn len(&self) -> usize {
        self.axis_len().pow(self.free.len() as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid profiles in record order: the first free coordinate is the
    /// outer loop.
    pub fn profiles(&self) -> Result<Vec<Profile>> {
        self.validate()?;
        let k = grid_intervals(self.step)?;
        let support = Support::default();
        let mut base = Profile::new(vec![0.0; self.n], vec![0.0; self.m]);
        for (c, v) in &self.fixed {
            base.set(c.player(self.n), *v);
        }
        let axis: Vec<f64> = (0..=k).map(|i| grid_point(&support, i, k)).collect();
        let mut out = Vec::with_capacity(self.len());
        match self.free.as_slice() {
            [a] => {
                for &x in &axis {
                    out.push(base.with(a.player(self.n), x));
                }
            }
            [a, b] => {
                for &x in &axis {
                    let row = base.with(a.player(self.n), x);
                    for &y in &axis {
                        out.push(row.with(b.player(self.n), y));
                    }
                }
            }
            _ => unreachable!("validated"),
        }
        Ok(out)
    }
}

impl FromStr for SweepSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::MalformedSweep(format!("{msg} in `{s}`"));
        let (shape, rest) = s.split_once(':').ok_or_else(|| bad("missing `<n>x<m>:`"))?;
        let (n, m) = shape.trim().split_once('x').ok_or_else(|| bad("shape must be <n>x<m>"))?;
        let n: usize = n.trim().parse().map_err(|_| bad("bad buyer count"))?;
        let m: usize = m.trim().parse().map_err(|_| bad("bad seller count"))?;
        let mut parts = rest.split(';');
        let free = parts
            .next()
            .unwrap_or_default()
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Coord>>>()?;
        let mut fixed = Vec::new();
        let mut step = SWEEP_STEP;
        for part in parts {
            let (key, value) = part.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let value: f64 = value.trim().parse().map_err(|_| bad("bad number"))?;
            if key.trim() == "step" {
                step = value;
            } else {
                fixed.push((key.parse()?, value));
            }
        }
        SweepSpec::new(n, m, free, fixed, step)
    }
}

impl fmt::Display for SweepSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let free: Vec<String> = self.free.iter().map(Coord::to_string).collect();
        write!(f, "{}x{}:{}", self.n, self.m, free.join(","))?;
        for (c, v) in &self.fixed {
            write!(f, ";{c}={v}")?;
        }
        write!(f, ";step={}", self.step)
    }
}

/// One grid point of a sweep and the mechanism's outcome there.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub bids: Profile,
    pub outcome: Outcome,
}

pub fn grid_sweep<M: Mechanism + ?Sized>(mech: &M, spec: &SweepSpec) -> Result<Vec<SweepRecord>> {
    let profiles = spec.profiles()?;
    let chunks: Vec<Vec<Outcome>> = profiles
        .par_chunks(EVAL_CHUNK)
        .map(|c| mech.outcomes(c))
        .collect::<Result<_>>()?;
    Ok(profiles
        .into_iter()
        .zip(chunks.into_iter().flatten())
        .map(|(bids, outcome)| SweepRecord { bids, outcome })
        .collect())
}

/// CSV with columns `b*`, `s*`, `g_i_j` (row-major), `p*`, `r*`.
pub fn write_sweep_csv(records: &[SweepRecord], n: usize, m: usize, mut out: impl Write) -> Result<()> {
    let mut header: Vec<String> = Vec::new();
    header.extend((0..n).map(|i| format!("b{i}")));
    header.extend((0..m).map(|j| format!("s{j}")));
    for i in 0..n {
        header.extend((0..m).map(|j| format!("g_{i}_{j}")));
    }
    header.extend((0..n).map(|i| format!("p{i}")));
    header.extend((0..m).map(|j| format!("r{j}")));
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let fields = r
            .bids
            .buyers
            .iter()
            .chain(&r.bids.sellers)
            .chain(r.outcome.matching.as_slice())
            .chain(&r.outcome.payments)
            .chain(&r.outcome.revenues)
            .map(f64::to_string)
            .collect::<Vec<_>>();
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// The benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// 2x2 on the 0.1 grid.
    Grid2x2,
    /// 3x3 on the 0.1 grid.
    Grid3x3,
    /// 5x5 on uniform samples.
    Sampled5x5 { seed: u64, count: usize },
}

impl Setting {
    pub const SAMPLED_COUNT: usize = 10_000;

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Setting::Grid2x2 => (2, 2),
            Setting::Grid3x3 => (3, 3),
            Setting::Sampled5x5 { .. } => (5, 5),
        }
    }

    pub fn testset(&self) -> Result<TestSet> {
        match *self {
            Setting::Grid2x2 => make_grid_testset(2, 2, 0.1),
            Setting::Grid3x3 => make_grid_testset(3, 3, 0.1),
            Setting::Sampled5x5 { seed, count } => sampled_testset(5, 5, count, seed, &Support::default()),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Grid2x2 => f.write_str("2x2"),
            Setting::Grid3x3 => f.write_str("3x3"),
            Setting::Sampled5x5 { .. } => f.write_str("5x5"),
        }
    }
}

impl FromStr for Setting {
    type Err = Error;

    /// `2x2`, `3x3`, `5x5` or `5x5:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "2x2" => Ok(Setting::Grid2x2),
            "3x3" => Ok(Setting::Grid3x3),
            "5x5" => Ok(Setting::Sampled5x5 {
                seed: 0,
                count: Setting::SAMPLED_COUNT,
            }),
            other => {
                let seed = other
                    .strip_prefix("5x5:")
                    .and_then(|x| x.parse().ok())
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown setting `{other}`")))?;
                Ok(Setting::Sampled5x5 {
                    seed,
                    count: Setting::SAMPLED_COUNT,
                })
            }
        }
    }
}

/// One benchmark row. Regret and entropy are absent where not computed or
/// not defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub setting: String,
    pub testset: String,
    pub mechanism: String,
    pub profiles: usize,
    pub welfare: f64,
    pub bbp: f64,
    pub rgt: Option<f64>,
    pub entropy: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "setting,testset,mechanism,profiles,welfare,bbp,rgt,entropy";

    fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.setting,
            self.testset,
            self.mechanism,
            self.profiles,
            self.welfare,
            self.bbp,
            opt(self.rgt),
            opt(self.entropy)
        )
    }
}

pub fn write_metrics_csv(reports: &[MetricsReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", MetricsReport::CSV_HEADER)?;
    for r in reports {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Welfare and deficit of a protocol on a test set.
pub fn baseline_report<M: Mechanism + ?Sized>(mech: &M, setting: &str, tests: &TestSet) -> Result<MetricsReport> {
    Ok(MetricsReport {
        setting: setting.to_string(),
        testset: tests.provenance.to_string(),
        mechanism: mech.name().to_string(),
        profiles: tests.len(),
        welfare: expected_welfare(mech, tests)?,
        bbp: expected_bbp(mech, tests)?,
        rgt: None,
        entropy: None,
    })
}

/// All four metrics for a learned mechanism. Entropy is left out for
/// markets with a single buyer or seller.
pub fn model_report(
    mech: &LearnedMechanism,
    setting: &str,
    tests: &TestSet,
    regret: &RegretConfig,
) -> Result<MetricsReport> {
    let entropy = if tests.n >= 2 && tests.m >= 2 {
        Some(matching_entropy(mech, tests)?)
    } else {
        None
    };
    Ok(MetricsReport {
        rgt: Some(expost_regret(mech, tests, regret)?.mean),
        entropy,
        ..baseline_report(mech, setting, tests)?
    })
}

/// MD and VCG rows, followed by the model's row when one is given.
pub fn table_eval(
    model: Option<&LearnedMechanism>,
    setting: &Setting,
    regret: &RegretConfig,
) -> Result<Vec<MetricsReport>> {
    let tests = setting.testset()?;
    let name = setting.to_string();
    let mut rows = vec![
        baseline_report(&McAfee::default(), &name, &tests)?,
        baseline_report(&Vcg, &name, &tests)?,
    ];
    if let Some(model) = model {
        if (model.net.n(), model.net.m()) != setting.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} model for the {name} setting",
                model.net.n(),
                model.net.m()
            )));
        }
        rows.push(model_report(model, &name, &tests, regret)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drnet::{DrNet, ModelParams, NetworkConfig};
    use crate::protocols::efficient_welfare;

    fn small_model(n: usize, m: usize, seed: u64) -> LearnedMechanism {
        let config = NetworkConfig {
            hidden_layers: vec![8, 8],
            ..NetworkConfig::new(n, m)
        };
        let params = ModelParams::init(&config, seed).unwrap();
        LearnedMechanism::new(DrNet::new(config).unwrap(), params).unwrap()
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(make_grid_testset(1, 1, 0.5).unwrap().len(), 9);
        let t = make_grid_testset(2, 2, 0.1).unwrap();
        assert_eq!(t.len(), 11usize.pow(4));
        assert_eq!(t.profiles[0], Profile::new(vec![0.0, 0.0], vec![0.0, 0.0]));
        assert_eq!(t.profiles[1], Profile::new(vec![0.0, 0.0], vec![0.0, 0.1]));
        assert_eq!(t.profiles.last().unwrap(), &Profile::new(vec![1.0, 1.0], vec![1.0, 1.0]));
        assert!(t.profiles.iter().all(|p| p.check_support(&Support::default()).is_ok()));
    }

    #[test]
    fn three_by_three_grid_size_without_building() {
        assert_eq!(11f64.powi(6), 1_771_561.0);
        assert!(matches!(
            make_grid_testset(5, 5, 0.1),
            Err(Error::Intractable { .. })
        ));
        assert!(make_grid_testset(1, 1, 0.3).is_err());
        assert!(make_grid_testset(1, 1, 0.0).is_err());
    }

    #[test]
    fn vcg_welfare_matches_brute_force_mean() {
        let tests = make_grid_testset(2, 1, 0.1).unwrap();
        let direct = tests
            .profiles
            .iter()
            .map(|p| efficient_welfare(&p.buyers, &p.sellers))
            .sum::<f64>()
            / tests.len() as f64;
        assert!((expected_welfare(&Vcg, &tests).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn md_is_budget_balanced_and_dominated() {
        let tests = make_grid_testset(2, 2, 0.1).unwrap();
        let md = McAfee::default();
        assert!(expected_bbp(&md, &tests).unwrap() <= 1e-12);
        assert!(expected_welfare(&md, &tests).unwrap() <= expected_welfare(&Vcg, &tests).unwrap());
    }

    #[test]
    fn entropy_fixtures() {
        let binary = TradeMatching::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(normalized_entropy(&binary).unwrap(), 0.0);
        assert_eq!(normalized_entropy(&TradeMatching::zeros(3, 2)).unwrap(), 0.0);

        // uniform g = 1/3 on 2x2: every row and column is three masses of
        // 1/3, so each side contributes log2(3) / log2(2) / 2
        let third = 1.0 / 3.0;
        let uniform = TradeMatching::from_rows(&[vec![third; 2], vec![third; 2]]).unwrap();
        let expected = 3f64.log2();
        assert!((normalized_entropy(&uniform).unwrap() - expected).abs() < 1e-12);

        // 2x3: g = 1/4 everywhere; rows have dummy 1/4, columns dummy 1/2
        let q = 0.25;
        let g = TradeMatching::from_rows(&[vec![q; 3], vec![q; 3]]).unwrap();
        let row = -(4.0 * q * q.log2());
        let col = -(2.0 * q * q.log2() + 0.5 * 0.5f64.log2());
        let expected = (2.0 * row) / (2.0 * 2.0 * 3f64.log2()) + (3.0 * col) / (2.0 * 3.0 * 1.0);
        assert!((normalized_entropy(&g).unwrap() - expected).abs() < 1e-12);

        let interior = TradeMatching::from_rows(&[vec![0.1, 0.2], vec![0.3, 0.05]]).unwrap();
        assert!(normalized_entropy(&interior).unwrap() > 0.0);

        assert!(matches!(
            normalized_entropy(&TradeMatching::zeros(1, 2)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn protocol_entropy_is_zero() {
        let tests = make_grid_testset(2, 2, 0.25).unwrap();
        assert_eq!(matching_entropy(&Vcg, &tests).unwrap(), 0.0);
        assert_eq!(matching_entropy(&McAfee::default(), &tests).unwrap(), 0.0);
        let one = make_grid_testset(1, 2, 0.5).unwrap();
        assert!(matching_entropy(&Vcg, &one).is_err());
    }

    #[test]
    fn protocol_regret_by_scan() {
        let tests = make_grid_testset(2, 2, 0.25).unwrap();
        let s = Support::default();
        assert!(deviation_regret(&Vcg, &tests, DEVIATION_STEP, &s).unwrap().mean <= 1e-9);
        assert!(deviation_regret(&McAfee::default(), &tests, DEVIATION_STEP, &s).unwrap().mean <= 1e-9);
    }

    #[test]
    fn model_welfare_is_bounded_by_efficiency() {
        let mech = small_model(2, 2, 1);
        let tests = sampled_testset(2, 2, 500, 2, &Support::default()).unwrap();
        let outcomes = mech.outcomes(&tests.profiles).unwrap();
        for (p, o) in tests.profiles.iter().zip(&outcomes) {
            let w = welfare(p, &o.matching).unwrap();
            assert!(w <= efficient_welfare(&p.buyers, &p.sellers) + 1e-9);
        }
    }

    #[test]
    fn expost_regret_is_nonnegative_and_reproducible() {
        let mech = small_model(2, 2, 3);
        let tests = sampled_testset(2, 2, 40, 4, &Support::default()).unwrap();
        let cfg = RegretConfig {
            steps: 5,
            restarts: 2,
            ..Default::default()
        };
        let a = expost_regret(&mech, &tests, &cfg).unwrap();
        let b = expost_regret(&mech, &tests, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.buyers.iter().chain(&a.sellers).all(|&x| x >= 0.0));
        let none = RegretConfig {
            steps: 0,
            restarts: 0,
            ..Default::default()
        };
        assert_eq!(expost_regret(&mech, &tests, &none).unwrap().mean, 0.0);
        let more = RegretConfig {
            restarts: 6,
            ..cfg.clone()
        };
        // more restarts share the first draws only in distribution, so just
        // check it is a valid regret
        assert!(expost_regret(&mech, &tests, &more).unwrap().mean >= 0.0);
    }

    #[test]
    fn expost_regret_matches_grid_scan_on_one_by_one() {
        // on a 1x1 model the best deviation over a fine grid bounds the
        // ascent result from above
        let mech = small_model(1, 1, 5);
        let tests = make_grid_testset(1, 1, 0.25).unwrap();
        let ascent = expost_regret(&mech, &tests, &RegretConfig::default()).unwrap();
        let scan = deviation_regret(&mech, &tests, 0.001, &Support::default()).unwrap();
        for (a, s) in ascent.buyers.iter().chain(&ascent.sellers).zip(scan.buyers.iter().chain(&scan.sellers)) {
            assert!(*a <= s + 1e-4, "ascent {a} above scan {s}");
        }
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let mech = small_model(2, 2, 6);
        let tests = sampled_testset(2, 2, 3000, 7, &Support::default()).unwrap();
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                (
                    expected_welfare(&mech, &tests).unwrap().to_bits(),
                    expected_bbp(&mech, &tests).unwrap().to_bits(),
                    matching_entropy(&mech, &tests).unwrap().to_bits(),
                )
            })
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn sweep_spec_parsing() {
        let s: SweepSpec = "1x1:b0,s0".parse().unwrap();
        assert_eq!(s.free, vec![Coord::Buyer(0), Coord::Seller(0)]);
        assert_eq!(s.step, SWEEP_STEP);
        assert_eq!(s.len(), 201 * 201);
        let s: SweepSpec = "2x1:b0,b1;s0=0.5;step=0.1".parse().unwrap();
        assert_eq!(s.fixed, vec![(Coord::Seller(0), 0.5)]);
        assert_eq!(s.len(), 121);
        assert_eq!(s.to_string().parse::<SweepSpec>().unwrap(), s);
        for bad in [
            "1x1",
            "1x1:b0",
            "1x1:b0,s0,b0",
            "2x1:b0,b1",
            "1x1:b0,s1;",
            "1x1:b0;s0=1.5",
            "1x1:b0,s0;step=0.3",
            "1x1:x0,s0",
            "2x1:b0,b1,s0",
            "1x1:b0;b0=0.2",
        ] {
            assert!(
                matches!(bad.parse::<SweepSpec>(), Err(Error::MalformedSweep(_))),
                "{bad} accepted"
            );
        }
    }

    #[test]
    fn sweep_order_and_csv() {
        let spec: SweepSpec = "2x1:b0,b1;s0=0.5;step=0.5".parse().unwrap();
        let records = grid_sweep(&McAfee::default(), &spec).unwrap();
        assert_eq!(records.len(), 9);
        assert_eq!(records[1].bids, Profile::new(vec![0.0, 0.5], vec![0.5]));
        assert_eq!(records[3].bids, Profile::new(vec![0.5, 0.0], vec![0.5]));
        let mut buf = Vec::new();
        write_sweep_csv(&records, 2, 1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "b0,b1,s0,g_0_0,g_1_0,p0,p1,r0");
        assert_eq!(lines.count(), 9);
    }

    #[test]
    fn md_trades_are_a_subset_of_efficient_trades() {
        for fixed in [0.2, 0.5, 0.8] {
            let spec = SweepSpec::new(
                2,
                1,
                vec![Coord::Buyer(0), Coord::Buyer(1)],
                vec![(Coord::Seller(0), fixed)],
                0.05,
            )
            .unwrap();
            let md = grid_sweep(&McAfee::default(), &spec).unwrap();
            let vcg = grid_sweep(&Vcg, &spec).unwrap();
            for (a, b) in md.iter().zip(&vcg) {
                for (x, y) in a.outcome.matching.as_slice().iter().zip(b.outcome.matching.as_slice()) {
                    assert!(x <= y);
                }
            }
        }
    }

    #[test]
    fn metrics_csv_leaves_missing_values_empty() {
        let tests = make_grid_testset(1, 1, 0.5).unwrap();
        let row = baseline_report(&Vcg, "1x1", &tests).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",,"));
    }

    #[test]
    fn setting_parsing() {
        assert_eq!("2x2".parse::<Setting>().unwrap(), Setting::Grid2x2);
        assert_eq!(
            "5x5:9".parse::<Setting>().unwrap(),
            Setting::Sampled5x5 { seed: 9, count: 10_000 }
        );
        assert!("4x4".parse::<Setting>().is_err());
    }

    #[test]
    fn table_rejects_wrong_model_shape() {
        let mech = small_model(1, 1, 0);
        assert!(table_eval(Some(&mech), &Setting::Grid2x2, &RegretConfig::default()).is_err());
    }
}
