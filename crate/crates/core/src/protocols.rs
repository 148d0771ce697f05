//! Deterministic baseline mechanisms: the efficient allocation, VCG with
//! Clarke pivots, and McAfee's trade-reduction double auction.
//!
//! All three return binary matchings in which the rank-`t` buyer (by
//! descending bid) trades with the rank-`t` seller (by ascending ask). Since
//! the commodity is homogeneous, any pairing of the same trading sets yields
//! the same welfare and prices; fixing this one keeps outputs reproducible.
//! Sorting is stable, so ties are broken by original index.

use crate::auction::{BidProfile, Outcome, Support, TradeMatching};
use crate::error::Result;

/// Indices of `values` ordered by descending value, ties by index.
pub(crate) fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Indices of `values` ordered by ascending value, ties by index.
pub(crate) fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

/// Number of gainful pairs `k* = max{k : b_(k) >= s_(k)}` given buyers in
/// descending and sellers in ascending order.
fn gainful_pairs(buyers: &[f64], sellers: &[f64], bo: &[usize], so: &[usize]) -> usize {
    bo.iter()
        .zip(so)
        .take_while(|&(&i, &j)| buyers[i] >= sellers[j])
        .count()
}

/// Maximum surplus achievable among the given buyers and sellers.
pub fn efficient_welfare(buyers: &[f64], sellers: &[f64]) -> f64 {
    let bo = descending_order(buyers);
    let so = ascending_order(sellers);
    let k = gainful_pairs(buyers, sellers, &bo, &so);
    bo[..k]
        .iter()
        .zip(&so[..k])
        .map(|(&i, &j)| buyers[i] - sellers[j])
        .sum()
}

/// Welfare-maximizing binary matching for the reported bids, with its
/// surplus.
pub fn efficient_matching(bids: &BidProfile) -> (TradeMatching, f64) {
    let (g, pairs) = efficient_pairs(bids);
    let w = pairs
        .iter()
        .map(|&(i, j)| bids.buyers[i] - bids.sellers[j])
        .sum();
    (g, w)
}

fn efficient_pairs(bids: &BidProfile) -> (TradeMatching, Vec<(usize, usize)>) {
    let bo = descending_order(&bids.buyers);
    let so = ascending_order(&bids.sellers);
    let k = gainful_pairs(&bids.buyers, &bids.sellers, &bo, &so);
    matching_from_pairs(bids.n(), bids.m(), bo[..k].iter().copied().zip(so[..k].iter().copied()))
}

fn matching_from_pairs(
    n: usize,
    m: usize,
    pairs: impl Iterator<Item = (usize, usize)>,
) -> (TradeMatching, Vec<(usize, usize)>) {
    let pairs: Vec<_> = pairs.collect();
    let mut g = TradeMatching::zeros(n, m);
    for &(i, j) in &pairs {
        g.set(i, j, 1.0);
    }
    (g, pairs)
}

fn without(values: &[f64], skip: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != skip)
        .map(|(_, &x)| x)
        .collect()
}

/// VCG: efficient allocation, each trader charged (or paid) its externality
/// computed by re-optimizing the market without it.
pub fn vcg(bids: &BidProfile) -> Outcome {
    let (g, pairs) = efficient_pairs(bids);
    let total: f64 = efficient_welfare(&bids.buyers, &bids.sellers);
    let mut payments = vec![0.0; bids.n()];
    let mut revenues = vec![0.0; bids.m()];
    for &(i, j) in &pairs {
        let without_buyer = efficient_welfare(&without(&bids.buyers, i), &bids.sellers);
        payments[i] = (without_buyer - (total - bids.buyers[i])).max(0.0);
        let without_seller = efficient_welfare(&bids.buyers, &without(&bids.sellers, j));
        revenues[j] = (total + bids.sellers[j] - without_seller).max(0.0);
    }
    Outcome {
        matching: g,
        payments,
        revenues,
    }
}

/// McAfee's double auction.
///
/// With `k` gainful pairs, the candidate price is the midpoint of the first
/// excluded bid and ask, `(b_(k+1) + s_(k+1)) / 2`, where a missing bid is
/// replaced by `support.lo` and a missing ask by `support.hi`. If the price
/// separates the `k`-th pair, all `k` pairs trade at it. Otherwise the
/// `k`-th pair is dropped and the remaining buyers pay `b_(k)` while sellers
/// receive `s_(k)`; the auctioneer keeps the spread.
pub fn mcafee(bids: &BidProfile, support: &Support) -> Result<Outcome> {
    bids.check_support(support)?;
    let (n, m) = (bids.n(), bids.m());
    let bo = descending_order(&bids.buyers);
    let so = ascending_order(&bids.sellers);
    let k = gainful_pairs(&bids.buyers, &bids.sellers, &bo, &so);
    if k == 0 {
        return Ok(Outcome::empty(n, m));
    }
    let next_bid = bo.get(k).map_or(support.lo, |&i| bids.buyers[i]);
    let next_ask = so.get(k).map_or(support.hi, |&j| bids.sellers[j]);
    let price = (next_bid + next_ask) / 2.0;
    let marginal_bid = bids.buyers[bo[k - 1]];
    let marginal_ask = bids.sellers[so[k - 1]];

    let (trades, buyer_price, seller_price) = if marginal_ask <= price && price <= marginal_bid {
        (k, price, price)
    } else {
        (k - 1, marginal_bid, marginal_ask)
    };
    let (g, pairs) = matching_from_pairs(
        n,
        m,
        bo[..trades].iter().copied().zip(so[..trades].iter().copied()),
    );
    let mut payments = vec![0.0; n];
    let mut revenues = vec![0.0; m];
    for (i, j) in pairs {
        payments[i] = buyer_price;
        revenues[j] = seller_price;
    }
    Ok(Outcome {
        matching: g,
        payments,
        revenues,
    })
}
