//! The learnt mechanism: matching, payment and revenue networks behind a
//! sort/unsort wrapper.
//!
//! Bids are sorted (buyers and sellers each in descending order) before
//! they reach the networks, and every output is mapped back to the input
//! order afterwards, so the mechanism is equivariant to relabelling players.
//!
//! * The matching network emits two `(n+1) x (m+1)` logit matrices. The
//!   first is normalized over buyers (per column), the second over sellers
//!   (per row); index 0 on each axis is the "no trade" dummy. Taking the
//!   elementwise minimum of the two normalized matrices on the `n x m`
//!   interior yields a matching whose rows and columns each sum to at most
//!   one.
//! * The payment network outputs `p~ = sigmoid(.)` and charges
//!   `p_i = p~_i * b_i * sum_j g_ij`, never more than the buyer's bid.
//! * The revenue network outputs `r~ = max(sigmoid(.), floor)` and pays
//!   `r_j = s_j * sum_i g_ij / r~_j`, never less than the seller's ask.
//!
//! Forward and backward passes run on whole batches; gradients are produced
//! for parameters and for the reported bids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{BidProfile, Outcome, Profile, Support, TradeMatching};
use crate::diffcore::{
    elementwise_min, elementwise_min_backward, sigmoid, sigmoid_backward, softmax_backward,
    softmax_over_axis, Mlp, MlpTrace, ParameterSet, Tensor,
};
use crate::error::{Error, Result};
use crate::protocols::descending_order;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub n: usize,
    pub m: usize,
    /// Hidden layer widths, shared by all three subnetworks.
    pub hidden_layers: Vec<usize>,
    pub revenue_floor: f64,
    pub support: Support,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n: 2,
            m: 2,
            hidden_layers: vec![100, 100],
            revenue_floor: 1e-3,
            support: Support::default(),
        }
    }
}

impl NetworkConfig {
    pub fn new(n: usize, m: usize) -> Self {
        NetworkConfig {
            n,
            m,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidConfig("need at least one buyer and one seller".into()));
        }
        if self.hidden_layers.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(self.revenue_floor > 0.0 && self.revenue_floor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "revenue floor must lie in (0, 1), got {}",
                self.revenue_floor
            )));
        }
        Support::new(self.support.lo, self.support.hi)?;
        Ok(())
    }

    fn widths(&self, outputs: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers.len() + 2);
        w.push(self.n + self.m);
        w.extend(&self.hidden_layers);
        w.push(outputs);
        w
    }

    pub fn matching_net(&self) -> Mlp {
        Mlp::new("matching", self.widths(2 * (self.n + 1) * (self.m + 1)))
    }

    pub fn payment_net(&self) -> Mlp {
        Mlp::new("payment", self.widths(self.n))
    }

    pub fn revenue_net(&self) -> Mlp {
        Mlp::new("revenue", self.widths(self.m))
    }
}

/// Weights of the three subnetworks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub matching: ParameterSet,
    pub payment: ParameterSet,
    pub revenue: ParameterSet,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut build = |mlp: Mlp| -> Result<ParameterSet> {
            let mut set = ParameterSet::new();
            mlp.init(&mut set, &mut rng)?;
            Ok(set)
        };
        Ok(ModelParams {
            matching: build(config.matching_net())?,
            payment: build(config.payment_net())?,
            revenue: build(config.revenue_net())?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            matching: self.matching.zeros_like(),
            payment: self.payment.zeros_like(),
            revenue: self.revenue.zeros_like(),
        }
    }

    pub fn sets(&self) -> [&ParameterSet; 3] {
        [&self.matching, &self.payment, &self.revenue]
    }

    pub fn sets_mut(&mut self) -> [&mut ParameterSet; 3] {
        [&mut self.matching, &mut self.payment, &mut self.revenue]
    }

    pub fn size(&self) -> usize {
        self.sets().iter().map(|s| s.size()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.sets().iter().flat_map(|s| s.flatten()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.size()
            )));
        }
        let mut offset = 0;
        for set in self.sets_mut() {
            let len = set.size();
            set.assign_flat(&flat[offset..offset + len])?;
            offset += len;
        }
        Ok(())
    }

    /// Checks names and shapes against what `config` requires.
    pub fn check_config(&self, config: &NetworkConfig) -> Result<()> {
        let nets = [config.matching_net(), config.payment_net(), config.revenue_net()];
        for (set, mlp) in self.sets().into_iter().zip(nets) {
            let expected = mlp.shapes();
            if expected.len() != set.len() {
                return Err(Error::ShapeMismatch {
                    name: mlp.prefix.clone(),
                    expected: vec![expected.len()],
                    found: vec![set.len()],
                });
            }
            for ((name, shape), (found_name, tensor)) in expected.iter().zip(set.iter()) {
                if name != found_name || shape.as_slice() != tensor.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: tensor.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.sets().iter().all(|s| s.tensors().all(Tensor::is_finite))
    }
}

/// Bids sorted in descending order on both sides, with the permutations
/// that produced them: `buyer_order[rank]` is the original index of the
/// rank-th buyer.
#[derive(Debug, Clone, PartialEq)]
pub struct SortedBids {
    pub bids: BidProfile,
    pub buyer_order: Vec<usize>,
    pub seller_order: Vec<usize>,
}

pub fn sort_wrap(bids: &BidProfile) -> SortedBids {
    let buyer_order = descending_order(&bids.buyers);
    let seller_order = descending_order(&bids.sellers);
    SortedBids {
        bids: Profile::new(
            buyer_order.iter().map(|&i| bids.buyers[i]).collect(),
            seller_order.iter().map(|&j| bids.sellers[j]).collect(),
        ),
        buyer_order,
        seller_order,
    }
}

/// Mechanism output for one bid profile, in the caller's player order.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub g: TradeMatching,
    /// `1 - sum_j g_ij`: probability that buyer `i` does not trade.
    pub dummy_buyer: Vec<f64>,
    /// `1 - sum_i g_ij`: probability that seller `j` does not trade.
    pub dummy_seller: Vec<f64>,
    pub payments: Vec<f64>,
    pub revenues: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub r_tilde: Vec<f64>,
}

impl ForwardResult {
    pub fn outcome(&self) -> Outcome {
        Outcome {
            matching: self.g.clone(),
            payments: self.payments.clone(),
            revenues: self.revenues.clone(),
        }
    }

    pub fn into_outcome(self) -> Outcome {
        Outcome {
            matching: self.g,
            payments: self.payments,
            revenues: self.revenues,
        }
    }
}

/// Cotangent of a scalar loss with respect to one sample's outputs, in the
/// caller's player order. Empty vectors stand for zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputSeed {
    /// Row-major `n x m`.
    pub g: Vec<f64>,
    pub payments: Vec<f64>,
    pub revenues: Vec<f64>,
}

impl OutputSeed {
    pub fn zeros(n: usize, m: usize) -> Self {
        OutputSeed {
            g: vec![0.0; n * m],
            payments: vec![0.0; n],
            revenues: vec![0.0; m],
        }
    }

    fn touches_payments(&self) -> bool {
        self.payments.iter().any(|&x| x != 0.0)
    }

    fn touches_revenues(&self) -> bool {
        self.revenues.iter().any(|&x| x != 0.0)
    }
}

/// Intermediates of a batched forward pass, in sorted coordinates.
pub struct BatchTrace {
    sorted: Vec<SortedBids>,
    matching: MlpTrace,
    payment: MlpTrace,
    revenue: MlpTrace,
    /// Logits normalized over buyers, `[L, n+1, m+1]`.
    over_buyers: Tensor,
    /// Logits normalized over sellers, `[L, n+1, m+1]`.
    over_sellers: Tensor,
    /// Interiors of the two normalized matrices, `[L, n, m]`.
    inner_buyers: Tensor,
    inner_sellers: Tensor,
    /// Sigmoid outputs of the payment and revenue heads.
    p_tilde: Tensor,
    r_sigmoid: Tensor,
    /// Matching in sorted coordinates, `[L, n, m]`.
    g: Tensor,
}

/// The composed mechanism for a fixed configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DrNet {
    pub config: NetworkConfig,
    matching: Mlp,
    payment: Mlp,
    revenue: Mlp,
}

impl DrNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        Ok(DrNet {
            matching: config.matching_net(),
            payment: config.payment_net(),
            revenue: config.revenue_net(),
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    fn check_bids(&self, bids: &BidProfile) -> Result<()> {
        if bids.n() != self.n() || bids.m() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} bids for a {}x{} model",
                bids.n(),
                bids.m(),
                self.n(),
                self.m()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ModelParams, bids: &BidProfile) -> Result<ForwardResult> {
        let (mut out, _) = self.forward_batch(params, std::slice::from_ref(bids))?;
        Ok(out.pop().expect("one result per profile"))
    }

    /// Forward pass over a batch, keeping what the backward pass needs.
    pub fn forward_batch(
        &self,
        params: &ModelParams,
        batch: &[BidProfile],
    ) -> Result<(Vec<ForwardResult>, BatchTrace)> {
        let (n, m) = (self.n(), self.m());
        let len = batch.len();
        let (rows, cols) = (n + 1, m + 1);
        let cells = rows * cols;

        let mut sorted = Vec::with_capacity(len);
        let mut input = Vec::with_capacity(len * (n + m));
        for bids in batch {
            self.check_bids(bids)?;
            let s = sort_wrap(bids);
            input.extend_from_slice(&s.bids.buyers);
            input.extend_from_slice(&s.bids.sellers);
            sorted.push(s);
        }
        let input = Tensor::new(vec![len, n + m], input)?;

        let (logits, matching) = self.matching.forward(&params.matching, input.clone())?;
        let (mut a, mut a_prime) = (Vec::with_capacity(len * cells), Vec::with_capacity(len * cells));
        for row in logits.data().chunks_exact(2 * cells) {
            a.extend_from_slice(&row[..cells]);
            a_prime.extend_from_slice(&row[cells..]);
        }
        let over_buyers = softmax_over_axis(&Tensor::new(vec![len, rows, cols], a)?, 1)?;
        let over_sellers = softmax_over_axis(&Tensor::new(vec![len, rows, cols], a_prime)?, 2)?;
        let inner_buyers = interior(&over_buyers, n, m);
        let inner_sellers = interior(&over_sellers, n, m);
        let g = elementwise_min(&inner_buyers, &inner_sellers)?;

        let (pay_logits, payment) = self.payment.forward(&params.payment, input.clone())?;
        let p_tilde = sigmoid(&pay_logits);
        let (rev_logits, revenue) = self.revenue.forward(&params.revenue, input)?;
        let r_sigmoid = sigmoid(&rev_logits);

        let floor = self.config.revenue_floor;
        let mut results = Vec::with_capacity(len);
        for (l, s) in sorted.iter().enumerate() {
            let gl = &g.data()[l * n * m..(l + 1) * n * m];
            let row_sum = |a: usize| gl[a * m..(a + 1) * m].iter().sum::<f64>();
            let col_sum = |c: usize| (0..n).map(|a| gl[a * m + c]).sum::<f64>();

            let mut matching_out = TradeMatching::zeros(n, m);
            let mut dummy_buyer = vec![0.0; n];
            let mut dummy_seller = vec![0.0; m];
            let mut payments = vec![0.0; n];
            let mut revenues = vec![0.0; m];
            let mut pt = vec![0.0; n];
            let mut rt = vec![0.0; m];
            for (a, &i) in s.buyer_order.iter().enumerate() {
                for (c, &j) in s.seller_order.iter().enumerate() {
                    matching_out.set(i, j, gl[a * m + c]);
                }
                let traded = row_sum(a);
                let ptl = p_tilde.data()[l * n + a];
                dummy_buyer[i] = 1.0 - traded;
                payments[i] = ptl * s.bids.buyers[a] * traded;
                pt[i] = ptl;
            }
            for (c, &j) in s.seller_order.iter().enumerate() {
                let traded = col_sum(c);
                let rtl = r_sigmoid.data()[l * m + c].max(floor);
                dummy_seller[j] = 1.0 - traded;
                revenues[j] = s.bids.sellers[c] * traded / rtl;
                rt[j] = rtl;
            }
            results.push(ForwardResult {
                g: matching_out,
                dummy_buyer,
                dummy_seller,
                payments,
                revenues,
                p_tilde: pt,
                r_tilde: rt,
            });
        }

        let trace = BatchTrace {
            sorted,
            matching,
            payment,
            revenue,
            over_buyers,
            over_sellers,
            inner_buyers,
            inner_sellers,
            p_tilde,
            r_sigmoid,
            g,
        };
        Ok((results, trace))
    }

    /// Reverse pass for a batch. Parameter gradients are added to `grads`;
    /// the returned vectors hold, per sample, the gradient with respect to
    /// the bids (buyers first, then sellers) in the caller's order.
    pub fn backward_batch(
        &self,
        params: &ModelParams,
        trace: &BatchTrace,
        seeds: &[OutputSeed],
        grads: &mut ModelParams,
    ) -> Result<Vec<Vec<f64>>> {
        self.backward_inner(params, trace, seeds, Some(grads))
    }

    /// Bid gradients of [`DrNet::backward_batch`] without the parameter
    /// gradients.
    pub fn bid_gradients(
        &self,
        params: &ModelParams,
        trace: &BatchTrace,
        seeds: &[OutputSeed],
    ) -> Result<Vec<Vec<f64>>> {
        self.backward_inner(params, trace, seeds, None)
    }

    fn backward_inner(
        &self,
        params: &ModelParams,
        trace: &BatchTrace,
        seeds: &[OutputSeed],
        mut grads: Option<&mut ModelParams>,
    ) -> Result<Vec<Vec<f64>>> {
        let (n, m) = (self.n(), self.m());
        let len = trace.sorted.len();
        if seeds.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "{} seeds for a batch of {len}",
                seeds.len()
            )));
        }
        let (rows, cols) = (n + 1, m + 1);
        let floor = self.config.revenue_floor;
        let need_payment = seeds.iter().any(OutputSeed::touches_payments);
        let need_revenue = seeds.iter().any(OutputSeed::touches_revenues);

        let mut grad_g = vec![0.0; len * n * m];
        let mut grad_pay_logits = vec![0.0; len * n];
        let mut grad_rev_sigmoid = vec![0.0; len * m];
        let mut bid_grads = vec![vec![0.0; n + m]; len];

        for (l, (s, seed)) in trace.sorted.iter().zip(seeds).enumerate() {
            let gl = &trace.g.data()[l * n * m..(l + 1) * n * m];
            let dg = &mut grad_g[l * n * m..(l + 1) * n * m];
            if !seed.g.is_empty() {
                for (a, &i) in s.buyer_order.iter().enumerate() {
                    for (c, &j) in s.seller_order.iter().enumerate() {
                        dg[a * m + c] = seed.g[i * m + j];
                    }
                }
            }
            if !seed.payments.is_empty() {
                for (a, &i) in s.buyer_order.iter().enumerate() {
                    let dp = seed.payments[i];
                    if dp == 0.0 {
                        continue;
                    }
                    let traded: f64 = gl[a * m..(a + 1) * m].iter().sum();
                    let pt = trace.p_tilde.data()[l * n + a];
                    let bid = s.bids.buyers[a];
                    grad_pay_logits[l * n + a] = dp * bid * traded;
                    bid_grads[l][i] += dp * pt * traded;
                    for c in 0..m {
                        dg[a * m + c] += dp * pt * bid;
                    }
                }
            }
            if !seed.revenues.is_empty() {
                for (c, &j) in s.seller_order.iter().enumerate() {
                    let dr = seed.revenues[j];
                    if dr == 0.0 {
                        continue;
                    }
                    let traded: f64 = (0..n).map(|a| gl[a * m + c]).sum();
                    let sig = trace.r_sigmoid.data()[l * m + c];
                    let rt = sig.max(floor);
                    let ask = s.bids.sellers[c];
                    if sig >= floor {
                        grad_rev_sigmoid[l * m + c] = -dr * ask * traded / (rt * rt);
                    }
                    bid_grads[l][n + j] += dr * traded / rt;
                    for a in 0..n {
                        dg[a * m + c] += dr * ask / rt;
                    }
                }
            }
        }

        let grad_g = Tensor::new(vec![len, n, m], grad_g)?;
        let (d_inner_buyers, d_inner_sellers) =
            elementwise_min_backward(&trace.inner_buyers, &trace.inner_sellers, &grad_g)?;
        let d_over_buyers = embed_interior(&d_inner_buyers, rows, cols);
        let d_over_sellers = embed_interior(&d_inner_sellers, rows, cols);
        let d_a = softmax_backward(&trace.over_buyers, &d_over_buyers, 1)?;
        let d_a_prime = softmax_backward(&trace.over_sellers, &d_over_sellers, 2)?;
        let cells = rows * cols;
        let mut d_logits = Vec::with_capacity(len * 2 * cells);
        for (x, y) in d_a.data().chunks_exact(cells).zip(d_a_prime.data().chunks_exact(cells)) {
            d_logits.extend_from_slice(x);
            d_logits.extend_from_slice(y);
        }
        let d_logits = Tensor::new(vec![len, 2 * cells], d_logits)?;
        let mut d_input = match grads.as_deref_mut() {
            Some(g) => self.matching.backward(&params.matching, &trace.matching, d_logits, &mut g.matching)?,
            None => self.matching.input_gradient(&params.matching, &trace.matching, d_logits)?,
        };

        if need_payment {
            let seed = Tensor::new(vec![len, n], grad_pay_logits)?;
            let d = sigmoid_backward(&trace.p_tilde, &seed)?;
            let dx = match grads.as_deref_mut() {
                Some(g) => self.payment.backward(&params.payment, &trace.payment, d, &mut g.payment)?,
                None => self.payment.input_gradient(&params.payment, &trace.payment, d)?,
            };
            add_into(&mut d_input, &dx);
        }
        if need_revenue {
            let seed = Tensor::new(vec![len, m], grad_rev_sigmoid)?;
            let d = sigmoid_backward(&trace.r_sigmoid, &seed)?;
            let dx = match grads.as_deref_mut() {
                Some(g) => self.revenue.backward(&params.revenue, &trace.revenue, d, &mut g.revenue)?,
                None => self.revenue.input_gradient(&params.revenue, &trace.revenue, d)?,
            };
            add_into(&mut d_input, &dx);
        }

        for (l, s) in trace.sorted.iter().enumerate() {
            let row = &d_input.data()[l * (n + m)..(l + 1) * (n + m)];
            for (a, &i) in s.buyer_order.iter().enumerate() {
                bid_grads[l][i] += row[a];
            }
            for (c, &j) in s.seller_order.iter().enumerate() {
                bid_grads[l][n + j] += row[n + c];
            }
        }
        Ok(bid_grads)
    }
}

fn interior(t: &Tensor, n: usize, m: usize) -> Tensor {
    let shape = t.shape();
    let (len, cols) = (shape[0], shape[2]);
    let rows = shape[1];
    let mut out = Vec::with_capacity(len * n * m);
    for l in 0..len {
        for a in 1..=n {
            let start = l * rows * cols + a * cols + 1;
            out.extend_from_slice(&t.data()[start..start + m]);
        }
    }
    Tensor::new(vec![len, n, m], out).expect("interior shape")
}

fn embed_interior(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    let shape = t.shape();
    let (len, n, m) = (shape[0], shape[1], shape[2]);
    let mut out = Tensor::zeros(&[len, rows, cols]);
    for l in 0..len {
        for a in 0..n {
            let src = l * n * m + a * m;
            let dst = l * rows * cols + (a + 1) * cols + 1;
            out.data_mut()[dst..dst + m].copy_from_slice(&t.data()[src..src + m]);
        }
    }
    out
}

fn add_into(acc: &mut Tensor, other: &Tensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

/// Forward pass for a single profile.
pub fn model_forward(net: &DrNet, params: &ModelParams, bids: &BidProfile) -> Result<ForwardResult> {
    bids.check_support(&net.config.support)?;
    net.forward(params, bids)
}
