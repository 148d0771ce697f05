//! Property checks that need no training: gradient agreement with finite
//! differences, construction invariants of the network, permutation
//! equivariance and protocol incentive compatibility.
//!
//! Every check reports its worst observed value against a threshold.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::auction::{player_utility, validate_matching, Profile, Support};
use crate::diffcore::{
    dense, dense_backward, elementwise_min, elementwise_min_backward, grad_check, sigmoid, sigmoid_backward,
    softmax_backward, softmax_over_axis, tanh, tanh_backward, Mlp, ParameterSet, Tensor, FD_STEP,
};
use crate::drnet::{model_forward, DrNet, ModelParams, NetworkConfig};
use crate::error::Result;
use crate::mechanism::{McAfee, Mechanism, Vcg};
use crate::training::{lagrangian_grad, misreport_ascent, sample_profiles, LagrangeState};

/// Relative-error bound for single primitives.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// Relative-error bound for composite passes.
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Slack for the payment and revenue bounds.
pub const IR_TOL: f64 = 1e-12;
/// Slack below zero for dummy masses.
pub const DUMMY_TOL: f64 = 1e-9;
/// Largest tolerated profit from a deviation under a protocol.
pub const DSIC_TOL: f64 = 1e-9;

/// A deliberate defect, used to show that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the gradient reported by the `tanh` backward check.
    TanhBackwardSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random points per gradient check.
    pub gradient_points: usize,
    /// `(params, bids)` pairs for the construction invariants.
    pub construction_cases: usize,
    pub equivariance_cases: usize,
    pub dsic_instances: usize,
    pub dsic_deviations: usize,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            gradient_points: 100,
            construction_cases: 10_000,
            equivariance_cases: 1_000,
            dsic_instances: 500,
            dsic_deviations: 20,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    /// Largest error or violation seen.
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when `worst < threshold`.
    fn strict(name: &str, cases: usize, worst: f64, threshold: f64) -> Self {
        CheckResult {
            name: name.into(),
            cases,
            worst,
            threshold,
            passed: worst < threshold,
        }
    }

    /// Passes when `worst <= threshold`.
    fn bounded(name: &str, cases: usize, worst: f64, threshold: f64) -> Self {
        CheckResult {
            passed: worst <= threshold,
            ..Self::strict(name, cases, worst, threshold)
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<32} worst {:.3e} (limit {:.0e}, {} cases)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.threshold,
            self.cases
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-scale..scale)).collect())
        .expect("shape matches data")
}

fn dot(y: &Tensor, c: &Tensor) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn reshape(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("shape matches data")
}

/// Finite-difference checks of every differentiable primitive, each probed
/// through a random linear functional.
pub fn primitive_gradients(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let points = opts.gradient_points;
    let flip = opts.fault == Some(Fault::TanhBackwardSign);
    let mut worst = [0.0f64; 8];
    let names = [
        "grad dense",
        "grad tanh",
        "grad sigmoid",
        "grad softmax axis 0",
        "grad softmax axis 1",
        "grad softmax axis 2",
        "grad elementwise min",
        "grad mlp",
    ];
    let shape = [2usize, 3, 4];
    for _ in 0..points {
        let x = random_tensor(&mut rng, &[3, 4], 1.0);
        let w = random_tensor(&mut rng, &[4, 5], 1.0);
        let b = random_tensor(&mut rng, &[5], 1.0);
        let c = random_tensor(&mut rng, &[3, 5], 1.0);
        let (nx, nw) = (x.len(), w.len());
        let err = grad_check(
            |p| {
                let (xs, ws, bs) = (
                    reshape(&[3, 4], &p[..nx]),
                    reshape(&[4, 5], &p[nx..nx + nw]),
                    reshape(&[5], &p[nx + nw..]),
                );
                let y = dense(&xs, &ws, &bs).expect("dense");
                let d = dense_backward(&xs, &ws, &c).expect("dense backward");
                (dot(&y, &c), [d.input.data(), d.weights.data(), d.bias.data()].concat())
            },
            &[x.data(), w.data(), b.data()].concat(),
            FD_STEP,
        );
        worst[0] = worst[0].max(err);

        let t = random_tensor(&mut rng, &shape, 2.0);
        let c = random_tensor(&mut rng, &shape, 1.0);
        let err = grad_check(
            |p| {
                let y = tanh(&reshape(&shape, p));
                let mut g = tanh_backward(&y, &c).expect("tanh backward").into_data();
                if flip {
                    g.iter_mut().for_each(|v| *v = -*v);
                }
                (dot(&y, &c), g)
            },
            t.data(),
            FD_STEP,
        );
        worst[1] = worst[1].max(err);
        let err = grad_check(
            |p| {
                let y = sigmoid(&reshape(&shape, p));
                (dot(&y, &c), sigmoid_backward(&y, &c).expect("sigmoid backward").into_data())
            },
            t.data(),
            FD_STEP,
        );
        worst[2] = worst[2].max(err);
        for axis in 0..3 {
            let err = grad_check(
                |p| {
                    let y = softmax_over_axis(&reshape(&shape, p), axis).expect("softmax");
                    (dot(&y, &c), softmax_backward(&y, &c, axis).expect("softmax backward").into_data())
                },
                t.data(),
                FD_STEP,
            );
            worst[3 + axis] = worst[3 + axis].max(err);
        }

        // the min is smooth only away from ties
        let a = random_tensor(&mut rng, &[6], 1.0);
        let gap: Vec<f64> = (0..6)
            .map(|_| rng.gen_range(0.01..0.5) * if rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let bvals: Vec<f64> = a.data().iter().zip(&gap).map(|(x, g)| x + g).collect();
        let c6 = random_tensor(&mut rng, &[6], 1.0);
        let err = grad_check(
            |p| {
                let (a, b) = (reshape(&[6], &p[..6]), reshape(&[6], &p[6..]));
                let y = elementwise_min(&a, &b).expect("min");
                let (ga, gb) = elementwise_min_backward(&a, &b, &c6).expect("min backward");
                (dot(&y, &c6), [ga.data(), gb.data()].concat())
            },
            &[a.data(), &bvals].concat(),
            FD_STEP,
        );
        worst[6] = worst[6].max(err);

        let mlp = Mlp::new("probe", vec![3, 4, 4, 2]);
        let mut params = ParameterSet::new();
        mlp.init(&mut params, &mut rng).expect("init");
        let input = random_tensor(&mut rng, &[2, 3], 1.0);
        let c = random_tensor(&mut rng, &[2, 2], 1.0);
        let size = params.size();
        let err = grad_check(
            |p| {
                let mut ps = params.clone();
                ps.assign_flat(&p[..size]).expect("sizes agree");
                let (y, trace) = mlp.forward(&ps, reshape(&[2, 3], &p[size..])).expect("forward");
                let mut grads = ps.zeros_like();
                let dx = mlp.backward(&ps, &trace, c.clone(), &mut grads).expect("backward");
                (dot(&y, &c), [grads.flatten(), dx.into_data()].concat())
            },
            &[params.flatten(), input.into_data()].concat(),
            FD_STEP,
        );
        worst[7] = worst[7].max(err);
    }
    names
        .iter()
        .zip(worst)
        .map(|(name, w)| {
            let tol = if *name == "grad mlp" { COMPOSITE_TOL } else { PRIMITIVE_TOL };
            CheckResult::strict(name, points, w, tol)
        })
        .collect()
}

/// Finite-difference check of the full augmented Lagrangian with respect
/// to the network weights, misreports held fixed.
pub fn lagrangian_gradient(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let points = opts.gradient_points.clamp(1, 20);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let (n, m) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let config = NetworkConfig {
            hidden_layers: vec![4, 3],
            ..NetworkConfig::new(n, m)
        };
        let net = DrNet::new(config.clone())?;
        let params = ModelParams::init(&config, rng.gen())?;
        let batch = sample_profiles(&mut rng, 4, &config);
        let mut misreports: Vec<Vec<f64>> = (0..4).map(|_| (0..n + m).map(|_| rng.gen()).collect()).collect();
        misreport_ascent(&net, &params, &batch, &mut misreports, 3, 0.1)?;
        let lagrange = LagrangeState {
            buyers: (0..n).map(|_| rng.gen_range(0.0..2.0)).collect(),
            sellers: (0..m).map(|_| rng.gen_range(0.0..2.0)).collect(),
            auctioneer: rng.gen_range(0.0..2.0),
            rho: rng.gen_range(0.5..5.0),
        };
        let clamp = rng.gen();
        let err = grad_check(
            |x| {
                let mut p = params.clone();
                p.assign_flat(x).expect("sizes agree");
                let (v, g) = lagrangian_grad(&net, &p, &batch, &misreports, &lagrange, clamp).expect("lagrangian");
                (v.loss, g.flatten())
            },
            &params.flatten(),
            FD_STEP,
        );
        worst = worst.max(err);
    }
    Ok(CheckResult::strict("grad lagrangian", points, worst, COMPOSITE_TOL))
}

/// Random parameters in a spread of regimes: Glorot draws scaled so that
/// some heads saturate.
fn random_params(rng: &mut impl Rng, config: &NetworkConfig) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, rng.gen())?;
    let scale = [0.1, 1.0, 3.0, 10.0][rng.gen_range(0..4)];
    for set in params.sets_mut() {
        for t in set.tensors_mut() {
            for v in t.data_mut() {
                *v = *v * scale + rng.gen_range(-0.5..0.5);
            }
        }
    }
    Ok(params)
}

fn random_config(rng: &mut impl Rng) -> NetworkConfig {
    NetworkConfig {
        hidden_layers: vec![12, 12],
        ..NetworkConfig::new(rng.gen_range(1..=4), rng.gen_range(1..=4))
    }
}

/// Feasibility, payment and revenue bounds, and dummy-mass range over
/// random `(params, bids)` pairs.
pub fn construction_invariants(cases: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_draw = 100;
    let mut done = 0;
    let (mut infeasible, mut pay, mut rev, mut dummy) = (0usize, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    while done < cases {
        let config = random_config(&mut rng);
        let net = DrNet::new(config.clone())?;
        let params = random_params(&mut rng, &config)?;
        let count = per_draw.min(cases - done);
        let bids = sample_profiles(&mut rng, count, &config);
        let (results, _) = net.forward_batch(&params, &bids)?;
        for (b, r) in bids.iter().zip(&results) {
            if !validate_matching(&r.g) {
                infeasible += 1;
            }
            for i in 0..config.n {
                pay = pay.max(r.payments[i] - b.buyers[i] * r.g.row_sum(i));
            }
            for j in 0..config.m {
                rev = rev.max(b.sellers[j] * r.g.col_sum(j) - r.revenues[j]);
            }
            for &d in r.dummy_buyer.iter().chain(&r.dummy_seller) {
                // distance outside [-DUMMY_TOL, 1]
                dummy = dummy.max((-DUMMY_TOL - d).max(d - 1.0));
            }
        }
        done += count;
    }
    Ok(vec![
        CheckResult::bounded("matching feasibility (failures)", cases, infeasible as f64, 0.0),
        CheckResult::bounded("payment <= bid x traded", cases, pay, IR_TOL),
        CheckResult::bounded("revenue >= ask x traded", cases, rev, IR_TOL),
        CheckResult::bounded("dummy mass range", cases, dummy, 0.0),
    ])
}

/// Relabelling the players permutes every output exactly.
pub fn equivariance(cases: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut done = 0;
    while done < cases {
        let config = random_config(&mut rng);
        let net = DrNet::new(config.clone())?;
        let params = random_params(&mut rng, &config)?;
        for _ in 0..100.min(cases - done) {
            let bids = sample_profiles(&mut rng, 1, &config).remove(0);
            let mut pb: Vec<usize> = (0..config.n).collect();
            let mut ps: Vec<usize> = (0..config.m).collect();
            pb.shuffle(&mut rng);
            ps.shuffle(&mut rng);
            let permuted = Profile::new(
                pb.iter().map(|&i| bids.buyers[i]).collect(),
                ps.iter().map(|&j| bids.sellers[j]).collect(),
            );
            let a = model_forward(&net, &params, &bids)?;
            let b = model_forward(&net, &params, &permuted)?;
            let mut same = true;
            for (x, &i) in pb.iter().enumerate() {
                same &= b.payments[x].to_bits() == a.payments[i].to_bits();
                for (y, &j) in ps.iter().enumerate() {
                    same &= b.g.get(x, y).to_bits() == a.g.get(i, j).to_bits();
                }
            }
            for (y, &j) in ps.iter().enumerate() {
                same &= b.revenues[y].to_bits() == a.revenues[j].to_bits();
            }
            if !same {
                mismatches += 1;
            }
            done += 1;
        }
    }
    Ok(CheckResult::bounded("permutation equivariance (failures)", cases, mismatches as f64, 0.0))
}

/// Largest profit from random unilateral deviations under each protocol.
pub fn protocol_dsic(instances: usize, deviations: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = Support::default();
    let md = McAfee { support };
    let mechs: [&dyn Mechanism; 2] = [&Vcg, &md];
    let mut worst = [f64::NEG_INFINITY; 2];
    let mut ir = [f64::NEG_INFINITY; 2];
    for _ in 0..instances {
        let config = NetworkConfig::new(rng.gen_range(1..=5), rng.gen_range(1..=5));
        let truth = sample_profiles(&mut rng, 1, &config).remove(0);
        for (k, mech) in mechs.iter().enumerate() {
            let honest = mech.outcome(&truth)?;
            for p in 0..truth.players() {
                let value = truth.get(p);
                let base = player_utility(value, &honest, p)?;
                ir[k] = ir[k].max(-base);
                for _ in 0..deviations {
                    let lie = truth.with(p, rng.gen_range(support.lo..=support.hi));
                    let gain = player_utility(value, &mech.outcome(&lie)?, p)? - base;
                    worst[k] = worst[k].max(gain);
                }
            }
        }
    }
    let cases = instances * deviations;
    Ok(vec![
        CheckResult::bounded("vcg deviation profit", cases, worst[0], DSIC_TOL),
        CheckResult::bounded("md deviation profit", cases, worst[1], DSIC_TOL),
        CheckResult::bounded("vcg individual rationality", instances, ir[0], DSIC_TOL),
        CheckResult::bounded("md individual rationality", instances, ir[1], DSIC_TOL),
    ])
}

/// Runs every check.
pub fn run_all(opts: &VerifyOptions) -> Result<VerifyReport> {
    let mut checks = primitive_gradients(opts);
    checks.push(lagrangian_gradient(opts)?);
    checks.extend(construction_invariants(opts.construction_cases, opts.seed)?);
    checks.push(equivariance(opts.equivariance_cases, opts.seed)?);
    checks.extend(protocol_dsic(opts.dsic_instances, opts.dsic_deviations, opts.seed)?);
    Ok(VerifyReport { checks })
}
