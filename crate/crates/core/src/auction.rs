//! Double-auction outcomes, utilities, welfare and feasibility.
//!
//! A single commodity is traded between `n` buyers and `m` sellers. A
//! mechanism maps reported bids to an [`Outcome`] `(g, p, r)`: a (possibly
//! randomized) matching `g`, buyer payments `p` and seller revenues `r`.
//! Utilities are quasilinear:
//!
//! * buyer `i`: `v_i * sum_j g_ij - p_i`
//! * seller `j`: `r_j - v_j * sum_i g_ij`
//! * auctioneer: `sum_i p_i - sum_j r_j`
//!
//! Summing all three, payments cancel and what remains is the social
//! surplus computed by [`welfare`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a randomized matching is feasible.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Closed interval that valuations and bids are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Support {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Support {
    fn default() -> Self {
        Support { lo: 0.0, hi: 1.0 }
    }
}

impl Support {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!(
                "support requires finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Support { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutOfSupport {
                value: x,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

/// One value per buyer and one per seller.
///
/// The same shape carries truthful valuations and reported bids; under
/// truthful bidding the two coincide, so [`ValuationProfile`] and
/// [`BidProfile`] are aliases of this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub buyers: Vec<f64>,
    pub sellers: Vec<f64>,
}

pub type ValuationProfile = Profile;
pub type BidProfile = Profile;

impl Profile {
    pub fn new(buyers: Vec<f64>, sellers: Vec<f64>) -> Self {
        Profile { buyers, sellers }
    }

    pub fn n(&self) -> usize {
        self.buyers.len()
    }

    pub fn m(&self) -> usize {
        self.sellers.len()
    }

    /// Number of players, `n + m`.
    pub fn players(&self) -> usize {
        self.n() + self.m()
    }

    /// Flat view indexing buyers first, then sellers.
    pub fn get(&self, player: usize) -> f64 {
        if player < self.n() {
            self.buyers[player]
        } else {
            self.sellers[player - self.n()]
        }
    }

    pub fn set(&mut self, player: usize, value: f64) {
        let n = self.n();
        if player < n {
            self.buyers[player] = value;
        } else {
            self.sellers[player - n] = value;
        }
    }

    /// Copy of `self` with a single player's report replaced.
    pub fn with(&self, player: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.set(player, value);
        out
    }

    pub fn check_support(&self, support: &Support) -> Result<()> {
        self.buyers
            .iter()
            .chain(&self.sellers)
            .try_for_each(|&x| support.check(x))
    }
}

/// Randomized trade matching: `g[i][j]` is the probability that buyer `i`
/// trades with seller `j`. Stored row-major, `n x m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeMatching {
    n: usize,
    m: usize,
    g: Vec<f64>,
}

impl TradeMatching {
    pub fn zeros(n: usize, m: usize) -> Self {
        TradeMatching {
            n,
            m,
            g: vec![0.0; n * m],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::DimensionMismatch("ragged matching rows".into()));
        }
        Ok(TradeMatching {
            n,
            m,
            g: rows.concat(),
        })
    }

    pub fn from_vec(n: usize, m: usize, g: Vec<f64>) -> Result<Self> {
        if g.len() != n * m {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {n}x{m} matching",
                g.len()
            )));
        }
        Ok(TradeMatching { n, m, g })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.g[i * self.m + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.g[i * self.m + j] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.g
    }

    /// Total trade probability of buyer `i`.
    pub fn row_sum(&self, i: usize) -> f64 {
        self.g[i * self.m..(i + 1) * self.m].iter().sum()
    }

    /// Total trade probability of seller `j`.
    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    /// Convex combination `alpha * self + (1 - alpha) * other`.
    pub fn mix(&self, other: &TradeMatching, alpha: f64) -> Result<Self> {
        if (self.n, self.m) != (other.n, other.m) {
            return Err(Error::DimensionMismatch("matching shapes differ".into()));
        }
        let g = self
            .g
            .iter()
            .zip(&other.g)
            .map(|(a, b)| alpha * a + (1.0 - alpha) * b)
            .collect();
        Ok(TradeMatching { n: self.n, m: self.m, g })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub matching: TradeMatching,
    pub payments: Vec<f64>,
    pub revenues: Vec<f64>,
}

impl Outcome {
    pub fn new(matching: TradeMatching, payments: Vec<f64>, revenues: Vec<f64>) -> Result<Self> {
        if payments.len() != matching.n() || revenues.len() != matching.m() {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matching with {} payments and {} revenues",
                matching.n(),
                matching.m(),
                payments.len(),
                revenues.len()
            )));
        }
        Ok(Outcome {
            matching,
            payments,
            revenues,
        })
    }

    /// No trades, nothing paid.
    pub fn empty(n: usize, m: usize) -> Self {
        Outcome {
            matching: TradeMatching::zeros(n, m),
            payments: vec![0.0; n],
            revenues: vec![0.0; m],
        }
    }

    pub fn n(&self) -> usize {
        self.matching.n()
    }

    pub fn m(&self) -> usize {
        self.matching.m()
    }
}

pub fn buyer_utility(value: f64, outcome: &Outcome, i: usize) -> Result<f64> {
    if i >= outcome.n() {
        return Err(Error::IndexOutOfRange {
            what: "buyers",
            index: i,
            len: outcome.n(),
        });
    }
    Ok(value * outcome.matching.row_sum(i) - outcome.payments[i])
}

pub fn seller_utility(value: f64, outcome: &Outcome, j: usize) -> Result<f64> {
    if j >= outcome.m() {
        return Err(Error::IndexOutOfRange {
            what: "sellers",
            index: j,
            len: outcome.m(),
        });
    }
    Ok(outcome.revenues[j] - value * outcome.matching.col_sum(j))
}

/// Utility of `player` (buyers first, then sellers) whose true value is
/// `value`.
pub fn player_utility(value: f64, outcome: &Outcome, player: usize) -> Result<f64> {
    if player < outcome.n() {
        buyer_utility(value, outcome, player)
    } else {
        seller_utility(value, outcome, player - outcome.n())
    }
}

/// Auctioneer surplus `sum p - sum r`; negative means a deficit.
pub fn auctioneer_utility(outcome: &Outcome) -> f64 {
    outcome.payments.iter().sum::<f64>() - outcome.revenues.iter().sum::<f64>()
}

/// Social surplus of the matching `g` under valuations `v`.
pub fn welfare(valuations: &ValuationProfile, g: &TradeMatching) -> Result<f64> {
    if valuations.n() != g.n() || valuations.m() != g.m() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} valuations against a {}x{} matching",
            valuations.n(),
            valuations.m(),
            g.n(),
            g.m()
        )));
    }
    let buyers: f64 = (0..g.n()).map(|i| valuations.buyers[i] * g.row_sum(i)).sum();
    let sellers: f64 = (0..g.m()).map(|j| valuations.sellers[j] * g.col_sum(j)).sum();
    Ok(buyers - sellers)
}

/// Checks the at-most-one-trade conditions within [`FEASIBILITY_TOL`].
pub fn validate_matching(g: &TradeMatching) -> bool {
    let tol = FEASIBILITY_TOL;
    g.as_slice()
        .iter()
        .all(|&x| x.is_finite() && (-tol..=1.0 + tol).contains(&x))
        && (0..g.n()).all(|i| g.row_sum(i) <= 1.0 + tol)
        && (0..g.m()).all(|j| g.col_sum(j) <= 1.0 + tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(rows: &[Vec<f64>], p: &[f64], r: &[f64]) -> Outcome {
        Outcome::new(TradeMatching::from_rows(rows).unwrap(), p.to_vec(), r.to_vec()).unwrap()
    }

    #[test]
    fn buyer_utility_examples() {
        let o = outcome(&[vec![1.0]], &[0.5], &[0.5]);
        assert!((buyer_utility(0.9, &o, 0).unwrap() - 0.4).abs() < 1e-15);
        let o = outcome(&[vec![0.0]], &[0.0], &[0.0]);
        assert_eq!(buyer_utility(0.7, &o, 0).unwrap(), 0.0);
        let o = outcome(&[vec![0.5, 0.25], vec![0.0, 0.0]], &[0.3, 0.0], &[0.0, 0.0]);
        assert!((buyer_utility(0.6, &o, 0).unwrap() - 0.15).abs() < 1e-15);
        assert!(matches!(
            buyer_utility(0.6, &o, 2),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn seller_utility_examples() {
        let o = outcome(&[vec![1.0]], &[0.5], &[0.5]);
        assert!((seller_utility(0.2, &o, 0).unwrap() - 0.3).abs() < 1e-15);
        let o = outcome(&[vec![0.0]], &[0.0], &[0.0]);
        assert_eq!(seller_utility(0.2, &o, 0).unwrap(), 0.0);
        let o = outcome(&[vec![0.5], vec![0.5]], &[0.0, 0.0], &[0.6]);
        assert!((seller_utility(0.4, &o, 0).unwrap() - 0.2).abs() < 1e-15);
        assert!(seller_utility(0.4, &o, 1).is_err());
    }

    #[test]
    fn auctioneer_utility_examples() {
        assert_eq!(auctioneer_utility(&outcome(&[vec![1.0]], &[0.5], &[0.5])), 0.0);
        let deficit = auctioneer_utility(&outcome(&[vec![1.0], vec![0.0]], &[0.3, 0.0], &[0.9]));
        assert!((deficit + 0.6).abs() < 1e-15);
        assert_eq!(auctioneer_utility(&Outcome::empty(2, 2)), 0.0);
    }

    #[test]
    fn welfare_examples() {
        let v = Profile::new(vec![0.9], vec![0.2]);
        let g = TradeMatching::from_rows(&[vec![1.0]]).unwrap();
        assert!((welfare(&v, &g).unwrap() - 0.7).abs() < 1e-15);

        let v = Profile::new(vec![0.9, 0.5], vec![0.2, 0.6]);
        assert_eq!(welfare(&v, &TradeMatching::zeros(2, 2)).unwrap(), 0.0);
        let efficient = TradeMatching::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!((welfare(&v, &efficient).unwrap() - 0.7).abs() < 1e-15);

        assert!(matches!(
            welfare(&v, &TradeMatching::zeros(1, 2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn validate_matching_examples() {
        let ok = TradeMatching::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!(validate_matching(&ok));
        let row = TradeMatching::from_rows(&[vec![0.8, 0.4], vec![0.0, 0.0]]).unwrap();
        assert!(!validate_matching(&row));
        let entry = TradeMatching::from_rows(&[vec![1.2]]).unwrap();
        assert!(!validate_matching(&entry));
    }

    /// Every 0/1 matrix with at most one 1 per row and column.
    fn binary_matchings(n: usize, m: usize) -> Vec<TradeMatching> {
        (0u32..1 << (n * m))
            .map(|mask| {
                let g = (0..n * m).map(|k| f64::from((mask >> k) & 1)).collect();
                TradeMatching::from_vec(n, m, g).unwrap()
            })
            .filter(|g| {
                (0..n).all(|i| g.row_sum(i) <= 1.0) && (0..m).all(|j| g.col_sum(j) <= 1.0)
            })
            .collect()
    }

    #[test]
    fn binary_matchings_are_feasible() {
        for (n, m) in [(1, 1), (2, 2), (2, 3), (3, 3)] {
            for g in binary_matchings(n, m) {
                assert!(validate_matching(&g));
            }
        }
        // 2x2 has 7 matchings: empty, four singles and two perfect ones
        assert_eq!(binary_matchings(2, 2).len(), 7);
    }

    fn sub_stochastic(n: usize, m: usize) -> impl Strategy<Value = TradeMatching> {
        prop::collection::vec(0.0..1.0f64, n * m).prop_map(move |raw| {
            // scale so no row or column exceeds one
            let mut g = TradeMatching::from_vec(n, m, raw).unwrap();
            let scale = (0..n)
                .map(|i| g.row_sum(i))
                .chain((0..m).map(|j| g.col_sum(j)))
                .fold(1.0, f64::max);
            for i in 0..n {
                for j in 0..m {
                    g.set(i, j, g.get(i, j) / scale);
                }
            }
            g
        })
    }

    fn instance() -> impl Strategy<Value = (Profile, TradeMatching, TradeMatching, Vec<f64>, Vec<f64>)>
    {
        (1usize..4, 1usize..4).prop_flat_map(|(n, m)| {
            (
                (
                    prop::collection::vec(0.0..1.0f64, n),
                    prop::collection::vec(0.0..1.0f64, m),
                )
                    .prop_map(|(b, s)| Profile::new(b, s)),
                sub_stochastic(n, m),
                sub_stochastic(n, m),
                prop::collection::vec(0.0..2.0f64, n),
                prop::collection::vec(0.0..2.0f64, m),
            )
        })
    }

    proptest! {
        #[test]
        fn payments_cancel_in_total_surplus((v, g, _, p, r) in instance()) {
            let o = Outcome::new(g.clone(), p, r).unwrap();
            let total: f64 = (0..v.n()).map(|i| buyer_utility(v.buyers[i], &o, i).unwrap()).sum::<f64>()
                + (0..v.m()).map(|j| seller_utility(v.sellers[j], &o, j).unwrap()).sum::<f64>()
                + auctioneer_utility(&o);
            prop_assert!((total - welfare(&v, &g).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn welfare_is_linear_in_matching((v, g1, g2, _, _) in instance(), alpha in 0.0..=1.0f64) {
            let mixed = welfare(&v, &g1.mix(&g2, alpha).unwrap()).unwrap();
            let expected = alpha * welfare(&v, &g1).unwrap() + (1.0 - alpha) * welfare(&v, &g2).unwrap();
            prop_assert!((mixed - expected).abs() < 1e-12);
        }

        #[test]
        fn scaled_matchings_validate((_, g, _, _, _) in instance()) {
            prop_assert!(validate_matching(&g));
        }
    }
}
