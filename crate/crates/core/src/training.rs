//! Augmented-Lagrangian training with adversarial misreports.
//!
//! Each minibatch iteration:
//!
//! 1. runs `R` projected gradient-ascent steps on every player's misreport
//!    (others truthful), starting from the value cached for that sample in
//!    the previous epoch (truthful on the first visit);
//! 2. takes one Adam step on the augmented Lagrangian
//!
//!    ```text
//!    C(w; lambda) = -welfare + sum_k lambda_k rgt_k + rho/2 sum_k rgt_k^2
//!                  + lambda_A bbp + rho/2 bbp^2
//!    ```
//!
//!    holding the misreports fixed;
//! 3. every `Q` iterations raises each multiplier by `rho` times its
//!    constraint estimate at the new weights.
//!
//! `rho` grows by a fixed increment every two epochs.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{player_utility, Profile, Support, ValuationProfile};
use crate::diffcore::{adam_step, AdamConfig, AdamState};
use crate::drnet::{DrNet, ForwardResult, ModelParams, NetworkConfig, OutputSeed};
use crate::error::{Error, Result};
use crate::mechanism::Mechanism;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sample_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub misreport_steps: usize,
    pub misreport_lr: f64,
    pub model_lr: f64,
    /// Iterations between multiplier updates.
    pub multiplier_period: usize,
    pub rho_init: f64,
    /// Added to `rho` every two epochs.
    pub rho_increment: f64,
    /// Clamp per-sample regret at zero before averaging.
    pub clamp_regret: bool,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sample_count: 640_000,
            epochs: 80,
            batch_size: 128,
            misreport_steps: 25,
            misreport_lr: 0.1,
            model_lr: 0.001,
            multiplier_period: 100,
            rho_init: 1.0,
            rho_increment: 1.0,
            clamp_regret: true,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sample_count", self.sample_count),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("misreport_steps", self.misreport_steps),
            ("multiplier_period", self.multiplier_period),
        ];
        for (name, value) in counts {
            if value == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.sample_count < self.batch_size {
            return Err(Error::InvalidConfig(format!(
                "sample_count {} is smaller than one batch of {}",
                self.sample_count, self.batch_size
            )));
        }
        let rates = [
            ("misreport_lr", self.misreport_lr),
            ("model_lr", self.model_lr),
            ("rho_init", self.rho_init),
        ];
        for (name, value) in rates {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.rho_increment >= 0.0 && self.rho_increment.is_finite()) {
            return Err(Error::InvalidConfig("rho_increment must be non-negative".into()));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self) -> usize {
        self.sample_count / self.batch_size
    }

    /// Penalty weight in force during `epoch` (0-based).
    pub fn rho_at(&self, epoch: usize) -> f64 {
        self.rho_init + self.rho_increment * (epoch / 2) as f64
    }
}

/// Multipliers for the buyer regret, seller regret and deficit constraints,
/// and the quadratic penalty weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeState {
    pub buyers: Vec<f64>,
    pub sellers: Vec<f64>,
    pub auctioneer: f64,
    pub rho: f64,
}

impl LagrangeState {
    pub fn new(n: usize, m: usize, rho: f64) -> Self {
        LagrangeState {
            buyers: vec![0.0; n],
            sellers: vec![0.0; m],
            auctioneer: 0.0,
            rho,
        }
    }

    /// Multiplier for player `k` (buyers first).
    pub fn player(&self, k: usize) -> f64 {
        if k < self.buyers.len() {
            self.buyers[k]
        } else {
            self.sellers[k - self.buyers.len()]
        }
    }

    /// `lambda += rho * estimate` for every constraint.
    pub fn ascend(&mut self, estimates: &ConstraintEstimates) {
        for (l, r) in self.buyers.iter_mut().zip(&estimates.rgt_buyers) {
            *l += self.rho * r;
        }
        for (l, r) in self.sellers.iter_mut().zip(&estimates.rgt_sellers) {
            *l += self.rho * r;
        }
        self.auctioneer += self.rho * estimates.bbp;
    }
}

/// Best misreport found so far for every training sample and player.
#[derive(Debug, Clone, PartialEq)]
pub struct MisreportCache {
    players: usize,
    values: Vec<f64>,
}

impl MisreportCache {
    /// Starts every entry at the player's truthful value.
    pub fn truthful(samples: &[ValuationProfile]) -> Self {
        let players = samples.first().map_or(0, Profile::players);
        let values = samples
            .iter()
            .flat_map(|p| p.buyers.iter().chain(&p.sellers).copied())
            .collect();
        MisreportCache { players, values }
    }

    pub fn from_values(players: usize, values: Vec<f64>) -> Result<Self> {
        if players == 0 || values.len() % players != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} cached values for {players} players",
                values.len()
            )));
        }
        Ok(MisreportCache { players, values })
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn samples(&self) -> usize {
        self.values.len().checked_div(self.players).unwrap_or(0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, sample: usize) -> &[f64] {
        &self.values[sample * self.players..(sample + 1) * self.players]
    }

    pub fn set(&mut self, sample: usize, misreports: &[f64]) {
        self.values[sample * self.players..(sample + 1) * self.players].copy_from_slice(misreports);
    }
}

/// Draws `count` profiles with every coordinate i.i.d. uniform on the
/// support.
pub fn sample_profiles(rng: &mut impl Rng, count: usize, config: &NetworkConfig) -> Vec<ValuationProfile> {
    let Support { lo, hi } = config.support;
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(lo..=hi)).collect() };
    (0..count)
        .map(|_| {
            let buyers = draw(config.n);
            let sellers = draw(config.m);
            Profile::new(buyers, sellers)
        })
        .collect()
}

/// Gradient seed of `scale * u_k(value; outcome)` for player `k`.
pub(crate) fn utility_seed(n: usize, m: usize, player: usize, value: f64, scale: f64) -> OutputSeed {
    let mut seed = OutputSeed::zeros(n, m);
    if player < n {
        seed.g[player * m..(player + 1) * m].fill(scale * value);
        seed.payments[player] = -scale;
    } else {
        let j = player - n;
        for i in 0..n {
            seed.g[i * m + j] = -scale * value;
        }
        seed.revenues[j] = scale;
    }
    seed
}

pub(crate) fn utility_of(result: &ForwardResult, value: f64, player: usize) -> f64 {
    let n = result.payments.len();
    if player < n {
        value * result.g.row_sum(player) - result.payments[player]
    } else {
        let j = player - n;
        result.revenues[j] - value * result.g.col_sum(j)
    }
}

/// Projected gradient ascent on one player's report.
///
/// For every row `l`, moves `reports[l]` uphill on the player's utility,
/// evaluated at the true value `truths[l]` with all other players truthful,
/// and clips each step to the support.
pub fn ascend_player(
    net: &DrNet,
    params: &ModelParams,
    truths: &[ValuationProfile],
    player: usize,
    reports: &mut [f64],
    steps: usize,
    lr: f64,
) -> Result<()> {
    let players = vec![player; truths.len()];
    let rows: Vec<&ValuationProfile> = truths.iter().collect();
    ascend_rows(net, params, &rows, &players, reports, steps, lr)
}

/// Ascent on independent rows, each with its own deviating player. Rows
/// never interact, so all players of a batch share one forward pass.
pub(crate) fn ascend_rows(
    net: &DrNet,
    params: &ModelParams,
    truths: &[&ValuationProfile],
    players: &[usize],
    reports: &mut [f64],
    steps: usize,
    lr: f64,
) -> Result<()> {
    let (n, m) = (net.n(), net.m());
    let support = net.config.support;
    let seeds: Vec<OutputSeed> = truths
        .iter()
        .zip(players)
        .map(|(t, &k)| utility_seed(n, m, k, t.get(k), 1.0))
        .collect();
    for _ in 0..steps {
        let lied: Vec<Profile> = truths
            .iter()
            .zip(players)
            .zip(reports.iter())
            .map(|((t, &k), &r)| t.with(k, r))
            .collect();
        let (_, trace) = net.forward_batch(params, &lied)?;
        let bid_grads = net.bid_gradients(params, &trace, &seeds)?;
        for ((r, g), &k) in reports.iter_mut().zip(&bid_grads).zip(players) {
            *r = support.clamp(*r + lr * g[k]);
        }
    }
    Ok(())
}

/// Runs `steps` ascent steps for every player of every sample, updating
/// `misreports` (one row of `n + m` reports per sample) in place.
pub fn misreport_ascent(
    net: &DrNet,
    params: &ModelParams,
    batch: &[ValuationProfile],
    misreports: &mut [Vec<f64>],
    steps: usize,
    lr: f64,
) -> Result<()> {
    let players = net.n() + net.m();
    if misreports.len() != batch.len() || misreports.iter().any(|r| r.len() != players) {
        return Err(Error::DimensionMismatch(format!(
            "misreports must be {} rows of {players}",
            batch.len()
        )));
    }
    let mut truths = Vec::with_capacity(players * batch.len());
    let mut who = Vec::with_capacity(players * batch.len());
    let mut reports = Vec::with_capacity(players * batch.len());
    for k in 0..players {
        for (t, r) in batch.iter().zip(misreports.iter()) {
            truths.push(t);
            who.push(k);
            reports.push(r[k]);
        }
    }
    ascend_rows(net, params, &truths, &who, &mut reports, steps, lr)?;
    for (k, chunk) in reports.chunks_exact(batch.len()).enumerate() {
        for (row, &r) in misreports.iter_mut().zip(chunk) {
            row[k] = r;
        }
    }
    Ok(())
}

/// Batch estimates of the constraint violations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintEstimates {
    pub rgt_buyers: Vec<f64>,
    pub rgt_sellers: Vec<f64>,
    pub bbp: f64,
}

impl ConstraintEstimates {
    pub fn mean_buyer_regret(&self) -> f64 {
        mean(&self.rgt_buyers)
    }

    pub fn mean_seller_regret(&self) -> f64 {
        mean(&self.rgt_sellers)
    }

    fn player(&self, k: usize) -> f64 {
        let n = self.rgt_buyers.len();
        if k < n {
            self.rgt_buyers[k]
        } else {
            self.rgt_sellers[k - n]
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Per-player mean utility gain from the given misreports over truthful
/// reporting, for any mechanism.
pub fn empirical_regret<M: Mechanism + ?Sized>(
    mech: &M,
    batch: &[ValuationProfile],
    misreports: &[Vec<f64>],
    clamp: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let (n, m) = (first.n(), first.m());
    let honest = mech.outcomes(batch)?;
    let mut totals = vec![0.0; n + m];
    for k in 0..n + m {
        let lied: Vec<Profile> = batch
            .iter()
            .zip(misreports)
            .map(|(t, r)| t.with(k, r[k]))
            .collect();
        let deviated = mech.outcomes(&lied)?;
        for ((t, h), d) in batch.iter().zip(&honest).zip(&deviated) {
            let gain = player_utility(t.get(k), d, k)? - player_utility(t.get(k), h, k)?;
            totals[k] += if clamp { gain.max(0.0) } else { gain };
        }
    }
    let l = batch.len() as f64;
    let per_player: Vec<f64> = totals.iter().map(|t| t / l).collect();
    Ok((per_player[..n].to_vec(), per_player[n..].to_vec()))
}

/// Batch mean of the auctioneer deficit hinge `max(0, sum r - sum p)`.
pub fn empirical_bbp<M: Mechanism + ?Sized>(mech: &M, batch: &[ValuationProfile]) -> Result<f64> {
    let outcomes = mech.outcomes(batch)?;
    Ok(outcomes.iter().map(deficit).sum::<f64>() / batch.len().max(1) as f64)
}

fn deficit(o: &crate::auction::Outcome) -> f64 {
    (o.revenues.iter().sum::<f64>() - o.payments.iter().sum::<f64>()).max(0.0)
}

fn deficit_of(r: &ForwardResult) -> f64 {
    r.revenues.iter().sum::<f64>() - r.payments.iter().sum::<f64>()
}

fn surplus(v: &Profile, r: &ForwardResult) -> f64 {
    let (n, m) = (v.n(), v.m());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += r.g.get(i, j) * (v.buyers[i] - v.sellers[j]);
        }
    }
    total
}

/// Value of the augmented Lagrangian and its pieces on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangianValue {
    pub loss: f64,
    pub welfare: f64,
    pub constraints: ConstraintEstimates,
}

struct BatchEval {
    value: LagrangianValue,
    truthful: (Vec<ForwardResult>, crate::drnet::BatchTrace),
    lied: Vec<(Vec<ForwardResult>, crate::drnet::BatchTrace)>,
    /// `gains[k][l]`: unclamped utility gain of player `k` on sample `l`.
    gains: Vec<Vec<f64>>,
}

fn evaluate_batch(
    net: &DrNet,
    params: &ModelParams,
    batch: &[ValuationProfile],
    misreports: &[Vec<f64>],
    lagrange: &LagrangeState,
    clamp: bool,
) -> Result<BatchEval> {
    let (n, m) = (net.n(), net.m());
    let l = batch.len() as f64;
    let truthful = net.forward_batch(params, batch)?;
    let mut lied = Vec::with_capacity(n + m);
    let mut gains = Vec::with_capacity(n + m);
    let mut rgt = vec![0.0; n + m];
    for k in 0..n + m {
        let profiles: Vec<Profile> = batch
            .iter()
            .zip(misreports)
            .map(|(t, r)| t.with(k, r[k]))
            .collect();
        let out = net.forward_batch(params, &profiles)?;
        let g: Vec<f64> = batch
            .iter()
            .zip(&out.0)
            .zip(&truthful.0)
            .map(|((t, d), h)| utility_of(d, t.get(k), k) - utility_of(h, t.get(k), k))
            .collect();
        rgt[k] = g.iter().map(|&x| if clamp { x.max(0.0) } else { x }).sum::<f64>() / l;
        gains.push(g);
        lied.push(out);
    }
    let welfare = batch.iter().zip(&truthful.0).map(|(v, r)| surplus(v, r)).sum::<f64>() / l;
    let bbp = truthful.0.iter().map(|r| deficit_of(r).max(0.0)).sum::<f64>() / l;
    let constraints = ConstraintEstimates {
        rgt_buyers: rgt[..n].to_vec(),
        rgt_sellers: rgt[n..].to_vec(),
        bbp,
    };
    let rho = lagrange.rho;
    let mut loss = -welfare + lagrange.auctioneer * bbp + 0.5 * rho * bbp * bbp;
    for (k, r) in rgt.iter().enumerate() {
        loss += lagrange.player(k) * r + 0.5 * rho * r * r;
    }
    Ok(BatchEval {
        value: LagrangianValue {
            loss,
            welfare,
            constraints,
        },
        truthful,
        lied,
        gains,
    })
}

/// Augmented Lagrangian on a batch, with misreports held fixed.
pub fn lagrangian(
    net: &DrNet,
    params: &ModelParams,
    batch: &[ValuationProfile],
    misreports: &[Vec<f64>],
    lagrange: &LagrangeState,
    clamp: bool,
) -> Result<LagrangianValue> {
    Ok(evaluate_batch(net, params, batch, misreports, lagrange, clamp)?.value)
}

/// Augmented Lagrangian and its gradient with respect to the weights. The
/// misreports are constants: no gradient flows into them.
pub fn lagrangian_grad(
    net: &DrNet,
    params: &ModelParams,
    batch: &[ValuationProfile],
    misreports: &[Vec<f64>],
    lagrange: &LagrangeState,
    clamp: bool,
) -> Result<(LagrangianValue, ModelParams)> {
    let (n, m) = (net.n(), net.m());
    let eval = evaluate_batch(net, params, batch, misreports, lagrange, clamp)?;
    let l = batch.len() as f64;
    let rho = lagrange.rho;
    let c = &eval.value.constraints;
    let coef: Vec<f64> = (0..n + m).map(|k| lagrange.player(k) + rho * c.player(k)).collect();
    let coef_bbp = lagrange.auctioneer + rho * c.bbp;
    let active = |k: usize, s: usize| !clamp || eval.gains[k][s] > 0.0;

    let mut truthful_seeds = Vec::with_capacity(batch.len());
    for (s, (v, r)) in batch.iter().zip(&eval.truthful.0).enumerate() {
        let mut seed = OutputSeed::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                seed.g[i * m + j] = -(v.buyers[i] - v.sellers[j]) / l;
            }
        }
        for k in 0..n + m {
            if active(k, s) && coef[k] != 0.0 {
                add_seed(&mut seed, &utility_seed(n, m, k, v.get(k), -coef[k] / l));
            }
        }
        if deficit_of(r) > 0.0 && coef_bbp != 0.0 {
            seed.revenues.iter_mut().for_each(|x| *x += coef_bbp / l);
            seed.payments.iter_mut().for_each(|x| *x -= coef_bbp / l);
        }
        truthful_seeds.push(seed);
    }
    let mut grads = params.zeros_like();
    net.backward_batch(params, &eval.truthful.1, &truthful_seeds, &mut grads)?;

    for k in 0..n + m {
        if coef[k] == 0.0 || !(0..batch.len()).any(|s| active(k, s)) {
            continue;
        }
        let seeds: Vec<OutputSeed> = batch
            .iter()
            .enumerate()
            .map(|(s, v)| {
                if active(k, s) {
                    utility_seed(n, m, k, v.get(k), coef[k] / l)
                } else {
                    OutputSeed::zeros(n, m)
                }
            })
            .collect();
        net.backward_batch(params, &eval.lied[k].1, &seeds, &mut grads)?;
    }
    Ok((eval.value, grads))
}

fn add_seed(acc: &mut OutputSeed, other: &OutputSeed) {
    for (a, b) in acc.g.iter_mut().zip(&other.g) {
        *a += b;
    }
    for (a, b) in acc.payments.iter_mut().zip(&other.payments) {
        *a += b;
    }
    for (a, b) in acc.revenues.iter_mut().zip(&other.revenues) {
        *a += b;
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub welfare: f64,
    pub rgt_buyer: f64,
    pub rgt_seller: f64,
    pub bbp: f64,
    pub lambda_buyer: f64,
    pub lambda_seller: f64,
    pub lambda_auctioneer: f64,
    pub rho: f64,
}

/// Per-epoch training history.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str =
        "epoch,loss,welfare,rgt_buyer,rgt_seller,bbp,lambda_buyer,lambda_seller,lambda_auctioneer,rho";

    pub fn push(&mut self, record: EpochRecord) {
        debug_assert!(self.records.last().is_none_or(|r| r.epoch < record.epoch));
        self.records.push(record);
    }

    /// Writes the log as CSV. Floats use Rust's shortest round-trip
    /// formatting, so identical runs produce identical bytes.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.loss,
                r.welfare,
                r.rgt_buyer,
                r.rgt_seller,
                r.bbp,
                r.lambda_buyer,
                r.lambda_seller,
                r.lambda_auctioneer,
                r.rho
            )?;
        }
        Ok(())
    }
}

/// Adam state for each subnetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAdam {
    pub matching: AdamState,
    pub payment: AdamState,
    pub revenue: AdamState,
}

impl ModelAdam {
    pub fn new(params: &ModelParams, config: &AdamConfig) -> Self {
        ModelAdam {
            matching: AdamState::new(&params.matching, config.clone()),
            payment: AdamState::new(&params.payment, config.clone()),
            revenue: AdamState::new(&params.revenue, config.clone()),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        adam_step(&mut params.matching, &grads.matching, &mut self.matching, lr)?;
        adam_step(&mut params.payment, &grads.payment, &mut self.payment, lr)?;
        adam_step(&mut params.revenue, &grads.revenue, &mut self.revenue, lr)
    }
}

/// Everything needed to continue training from an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub iteration: usize,
    pub lagrange: LagrangeState,
    pub adam: ModelAdam,
    pub cache: MisreportCache,
    pub log: TrainLog,
}

/// Resumable training driver.
///
/// Randomness is derived from the seed alone: the model initialization, the
/// training sample and each epoch's shuffle use separate ChaCha streams, so
/// a run restarted at an epoch boundary replays the same sequence.
pub struct Trainer {
    pub net: DrNet,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub state: TrainState,
    samples: Vec<ValuationProfile>,
}

const SAMPLE_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 2;

impl Trainer {
    pub fn new(network: NetworkConfig, config: TrainConfig) -> Result<Self> {
        let net = DrNet::new(network)?;
        config.validate()?;
        let params = ModelParams::init(&net.config, config.seed)?;
        let samples = Self::draw_samples(&net.config, &config);
        let state = TrainState {
            epochs_done: 0,
            iteration: 0,
            lagrange: LagrangeState::new(net.n(), net.m(), config.rho_at(0)),
            adam: ModelAdam::new(&params, &config.adam),
            cache: MisreportCache::truthful(&samples),
            log: TrainLog::default(),
        };
        Ok(Trainer {
            net,
            config,
            params,
            state,
            samples,
        })
    }

    /// Continues from saved parameters and state.
    pub fn resume(
        network: NetworkConfig,
        config: TrainConfig,
        params: ModelParams,
        state: TrainState,
    ) -> Result<Self> {
        let net = DrNet::new(network)?;
        config.validate()?;
        params.check_config(&net.config)?;
        let samples = Self::draw_samples(&net.config, &config);
        if state.cache.samples() != samples.len() || state.cache.players() != net.n() + net.m() {
            return Err(Error::DimensionMismatch(format!(
                "misreport cache holds {} samples of {} players",
                state.cache.samples(),
                state.cache.players()
            )));
        }
        Ok(Trainer {
            net,
            config,
            params,
            state,
            samples,
        })
    }

    fn draw_samples(network: &NetworkConfig, config: &TrainConfig) -> Vec<ValuationProfile> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLE_STREAM);
        sample_profiles(&mut rng, config.sample_count, network)
    }

    pub fn samples(&self) -> &[ValuationProfile] {
        &self.samples
    }

    pub fn is_done(&self) -> bool {
        self.state.epochs_done >= self.config.epochs
    }

    /// Trains one full epoch and appends its record to the log.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epochs_done;
        let cfg = &self.config;
        self.state.lagrange.rho = cfg.rho_at(epoch);

        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
        order.shuffle(&mut rng);

        let iterations = cfg.iterations_per_epoch();
        let (mut loss, mut welfare, mut rgt_b, mut rgt_s, mut bbp) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks_exact(cfg.batch_size).take(iterations) {
            let batch: Vec<Profile> = chunk.iter().map(|&s| self.samples[s].clone()).collect();
            let mut misreports: Vec<Vec<f64>> =
                chunk.iter().map(|&s| self.state.cache.get(s).to_vec()).collect();
            misreport_ascent(
                &self.net,
                &self.params,
                &batch,
                &mut misreports,
                cfg.misreport_steps,
                cfg.misreport_lr,
            )?;
            for (&s, r) in chunk.iter().zip(&misreports) {
                self.state.cache.set(s, r);
            }

            let (value, grads) = lagrangian_grad(
                &self.net,
                &self.params,
                &batch,
                &misreports,
                &self.state.lagrange,
                cfg.clamp_regret,
            )?;
            if !value.loss.is_finite() {
                return Err(self.non_finite(epoch, format!("loss {}", value.loss)));
            }
            self.state.adam.step(&mut self.params, &grads, cfg.model_lr)?;
            if !self.params.is_finite() {
                return Err(self.non_finite(epoch, "parameters diverged".into()));
            }

            if self.state.iteration % cfg.multiplier_period == 0 {
                let updated = lagrangian(
                    &self.net,
                    &self.params,
                    &batch,
                    &misreports,
                    &self.state.lagrange,
                    cfg.clamp_regret,
                )?;
                self.state.lagrange.ascend(&updated.constraints);
            }
            self.state.iteration += 1;

            loss += value.loss;
            welfare += value.welfare;
            rgt_b += value.constraints.mean_buyer_regret();
            rgt_s += value.constraints.mean_seller_regret();
            bbp += value.constraints.bbp;
        }

        let k = iterations as f64;
        let lagrange = &self.state.lagrange;
        let record = EpochRecord {
            epoch,
            loss: loss / k,
            welfare: welfare / k,
            rgt_buyer: rgt_b / k,
            rgt_seller: rgt_s / k,
            bbp: bbp / k,
            lambda_buyer: mean(&lagrange.buyers),
            lambda_seller: mean(&lagrange.sellers),
            lambda_auctioneer: lagrange.auctioneer,
            rho: lagrange.rho,
        };
        self.state.log.push(record.clone());
        self.state.epochs_done += 1;
        Ok(record)
    }

    fn non_finite(&self, epoch: usize, detail: String) -> Error {
        Error::NonFinite {
            epoch,
            iteration: self.state.iteration,
            detail: format!("{detail}; multipliers {:?}", self.state.lagrange),
        }
    }

    /// Runs the remaining epochs, reporting each finished one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while !self.is_done() {
            let record = self.run_epoch()?;
            on_epoch(&record);
        }
        Ok(())
    }
}

/// Trains from scratch and returns the final weights and log.
pub fn train(network: NetworkConfig, config: TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(network, config)?;
    trainer.run(|_| {})?;
    Ok((trainer.params, trainer.state.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, FD_STEP};
    use crate::mechanism::Vcg;

    fn tiny_network(n: usize, m: usize) -> NetworkConfig {
        NetworkConfig {
            hidden_layers: vec![6, 5],
            ..NetworkConfig::new(n, m)
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            sample_count: 64,
            epochs: 2,
            batch_size: 16,
            misreport_steps: 3,
            multiplier_period: 2,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn samples_are_in_support_and_reproducible() {
        let config = NetworkConfig::new(2, 3);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let xs = sample_profiles(&mut a, 50, &config);
        assert_eq!(xs, sample_profiles(&mut b, 50, &config));
        assert!(xs.iter().all(|p| p.check_support(&config.support).is_ok()));
    }

    #[test]
    fn sample_mean_is_near_one_half() {
        let config = NetworkConfig::new(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs = sample_profiles(&mut rng, 100_000, &config);
        let sigma = (1.0f64 / 12.0).sqrt() / (xs.len() as f64).sqrt();
        let mb = xs.iter().map(|p| p.buyers[0]).sum::<f64>() / xs.len() as f64;
        let ms = xs.iter().map(|p| p.sellers[0]).sum::<f64>() / xs.len() as f64;
        assert!((mb - 0.5).abs() < 3.0 * sigma && (ms - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn utility_seed_matches_utility() {
        let net = DrNet::new(tiny_network(2, 2)).unwrap();
        let params = ModelParams::init(&net.config, 0).unwrap();
        let r = net.forward(&params, &Profile::new(vec![0.3, 0.7], vec![0.2, 0.9])).unwrap();
        for k in 0..4 {
            let seed = utility_seed(2, 2, k, 0.6, 1.0);
            let dot = r.g.as_slice().iter().zip(&seed.g).map(|(a, b)| a * b).sum::<f64>()
                + r.payments.iter().zip(&seed.payments).map(|(a, b)| a * b).sum::<f64>()
                + r.revenues.iter().zip(&seed.revenues).map(|(a, b)| a * b).sum::<f64>();
            assert!((dot - utility_of(&r, 0.6, k)).abs() < 1e-15);
        }
    }

    #[test]
    fn ascent_stays_put_when_matching_ignores_bids() {
        let config = tiny_network(1, 1);
        let net = DrNet::new(config.clone()).unwrap();
        let mut params = ModelParams::init(&config, 4).unwrap();
        // constant outputs: no dependence on the bids except the payment's
        // direct factor, and p~ = 0 kills that
        for set in params.sets_mut() {
            for t in set.tensors_mut() {
                t.data_mut().fill(0.0);
            }
        }
        let last = config.hidden_layers.len();
        params.payment.get_mut(&format!("payment.{last}.bias")).unwrap().data_mut()[0] = -800.0;
        params.revenue.get_mut(&format!("revenue.{last}.bias")).unwrap().data_mut()[0] = 800.0;
        let batch = vec![Profile::new(vec![0.7], vec![0.4])];
        let mut buyer_only = vec![0.6];
        ascend_player(&net, &params, &batch, 0, &mut buyer_only, 10, 0.1).unwrap();
        assert_eq!(buyer_only, vec![0.6]);
        // the seller is paid its bid times the traded mass, so asking more
        // always helps and the report ends on the upper bound
        let mut reports = vec![vec![0.6, 0.3]];
        misreport_ascent(&net, &params, &batch, &mut reports, 20, 0.1).unwrap();
        assert_eq!(reports, vec![vec![0.6, 1.0]]);
        let mut short = vec![vec![0.6]];
        assert!(misreport_ascent(&net, &params, &batch, &mut short, 1, 0.1).is_err());
    }

    #[test]
    fn ascent_projects_onto_support() {
        let config = tiny_network(1, 1);
        let net = DrNet::new(config.clone()).unwrap();
        let params = ModelParams::init(&config, 5).unwrap();
        let batch = vec![Profile::new(vec![0.9], vec![0.1]); 4];
        let mut reports = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![0.5, 0.5], vec![0.99, 0.01]];
        misreport_ascent(&net, &params, &batch, &mut reports, 20, 50.0).unwrap();
        for r in &reports {
            assert!(r.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn regret_is_zero_for_truthful_misreports_and_vcg() {
        let config = tiny_network(2, 2);
        let net = DrNet::new(config.clone()).unwrap();
        let params = ModelParams::init(&config, 6).unwrap();
        let mech = crate::mechanism::LearnedMechanism::new(net, params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = sample_profiles(&mut rng, 32, &config);
        let truthful: Vec<Vec<f64>> = batch.iter().map(|p| [p.buyers.clone(), p.sellers.clone()].concat()).collect();
        let (b, s) = empirical_regret(&mech, &batch, &truthful, true).unwrap();
        assert!(b.iter().chain(&s).all(|&x| x == 0.0));

        let lies: Vec<Vec<f64>> = (0..32).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let (b, s) = empirical_regret(&Vcg, &batch, &lies, true).unwrap();
        assert!(b.iter().chain(&s).all(|&x| x <= 1e-6));
    }

    #[test]
    fn bbp_hinge() {
        struct Fixed;
        impl Mechanism for Fixed {
            fn name(&self) -> &str {
                "fixed"
            }
            fn outcome(&self, _: &Profile) -> Result<crate::auction::Outcome> {
                let g = crate::auction::TradeMatching::from_rows(&[vec![1.0]])?;
                crate::auction::Outcome::new(g, vec![0.3], vec![0.9])
            }
        }
        let batch = vec![Profile::new(vec![0.5], vec![0.5])];
        assert!((empirical_bbp(&Fixed, &batch).unwrap() - 0.6).abs() < 1e-15);
        let mech = crate::mechanism::McAfee::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = sample_profiles(&mut rng, 200, &NetworkConfig::new(3, 3));
        assert_eq!(empirical_bbp(&mech, &batch).unwrap(), 0.0);
    }

    fn grad_check_lagrangian(clamp: bool) -> f64 {
        let config = tiny_network(2, 2);
        let net = DrNet::new(config.clone()).unwrap();
        let params = ModelParams::init(&config, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = sample_profiles(&mut rng, 6, &config);
        let mut misreports: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        misreport_ascent(&net, &params, &batch, &mut misreports, 5, 0.1).unwrap();
        let lagrange = LagrangeState {
            buyers: vec![0.7, 1.3],
            sellers: vec![0.4, 2.0],
            auctioneer: 1.5,
            rho: 3.0,
        };
        let f = |x: &[f64]| {
            let mut p = params.clone();
            p.assign_flat(x).unwrap();
            let (v, g) = lagrangian_grad(&net, &p, &batch, &misreports, &lagrange, clamp).unwrap();
            (v.loss, g.flatten())
        };
        grad_check(f, &params.flatten(), FD_STEP)
    }

    #[test]
    fn lagrangian_gradient_matches_finite_differences() {
        assert!(grad_check_lagrangian(true) < 1e-4);
        assert!(grad_check_lagrangian(false) < 1e-4);
    }

    #[test]
    fn lagrangian_reduces_to_negative_welfare() {
        let config = tiny_network(2, 2);
        let net = DrNet::new(config.clone()).unwrap();
        let params = ModelParams::init(&config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let batch = sample_profiles(&mut rng, 8, &config);
        let misreports: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let zero = LagrangeState::new(2, 2, 1e-300);
        let v = lagrangian(&net, &params, &batch, &misreports, &zero, true).unwrap();
        assert!((v.loss + v.welfare).abs() < 1e-12);

        // truthful misreports: no regret, so only the deficit terms remain
        let truthful: Vec<Vec<f64>> = batch.iter().map(|p| [p.buyers.clone(), p.sellers.clone()].concat()).collect();
        let heavy = LagrangeState {
            buyers: vec![5.0, 5.0],
            sellers: vec![5.0, 5.0],
            auctioneer: 0.0,
            rho: 1e-300,
        };
        let v = lagrangian(&net, &params, &batch, &truthful, &heavy, true).unwrap();
        assert!((v.loss + v.welfare).abs() < 1e-12);
    }

    #[test]
    fn seeded_training_is_reproducible_and_multipliers_grow() {
        let run = || {
            let mut t = Trainer::new(tiny_network(2, 2), tiny_train()).unwrap();
            let mut history = Vec::new();
            while !t.is_done() {
                t.run_epoch().unwrap();
                history.push(t.state.lagrange.clone());
            }
            (t.params, t.state.log, history)
        };
        let (p1, log1, hist) = run();
        let (p2, log2, _) = run();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        let mut a = Vec::new();
        let mut b = Vec::new();
        log1.write_csv(&mut a).unwrap();
        log2.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        for pair in hist.windows(2) {
            assert!(pair[1].auctioneer >= pair[0].auctioneer);
            for (x, y) in pair[0].buyers.iter().zip(&pair[1].buyers) {
                assert!(y >= x);
            }
            for (x, y) in pair[0].sellers.iter().zip(&pair[1].sellers) {
                assert!(y >= x);
            }
        }
        assert_eq!(log1.records.len(), 2);
        assert_eq!(log1.records[1].rho, 1.0);
    }

    #[test]
    fn rho_schedule_steps_every_two_epochs() {
        let cfg = TrainConfig::default();
        let rhos: Vec<f64> = (0..6).map(|e| cfg.rho_at(e)).collect();
        assert_eq!(rhos, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_train();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_train();
        cfg.model_lr = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_train();
        cfg.sample_count = 4;
        assert!(cfg.validate().is_err());
    }
}
