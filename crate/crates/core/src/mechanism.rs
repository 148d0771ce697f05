//! A common surface over the baseline protocols and learnt models.

use crate::auction::{BidProfile, Outcome, Support};
use crate::drnet::{DrNet, ForwardResult, ModelParams};
use crate::error::Result;
use crate::protocols;

/// Rows per forward pass when a model evaluates many profiles.
pub const EVAL_CHUNK: usize = 1024;

pub trait Mechanism: Sync {
    fn name(&self) -> &str;

    fn outcome(&self, bids: &BidProfile) -> Result<Outcome>;

    fn outcomes(&self, bids: &[BidProfile]) -> Result<Vec<Outcome>> {
        bids.iter().map(|b| self.outcome(b)).collect()
    }

    /// Randomized matchings need this for the entropy metric; protocols are
    /// deterministic.
    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Vcg;

impl Mechanism for Vcg {
    fn name(&self) -> &str {
        "vcg"
    }

    fn outcome(&self, bids: &BidProfile) -> Result<Outcome> {
        Ok(protocols::vcg(bids))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct McAfee {
    pub support: Support,
}

impl Mechanism for McAfee {
    fn name(&self) -> &str {
        "md"
    }

    fn outcome(&self, bids: &BidProfile) -> Result<Outcome> {
        protocols::mcafee(bids, &self.support)
    }
}

/// A trained network used as a mechanism.
#[derive(Debug, Clone)]
pub struct LearnedMechanism {
    pub net: DrNet,
    pub params: ModelParams,
}

impl LearnedMechanism {
    pub fn new(net: DrNet, params: ModelParams) -> Result<Self> {
        params.check_config(&net.config)?;
        Ok(LearnedMechanism { net, params })
    }

    pub fn forward_all(&self, bids: &[BidProfile]) -> Result<Vec<ForwardResult>> {
        let mut out = Vec::with_capacity(bids.len());
        for chunk in bids.chunks(EVAL_CHUNK) {
            out.extend(self.net.forward_batch(&self.params, chunk)?.0);
        }
        Ok(out)
    }
}

impl Mechanism for LearnedMechanism {
    fn name(&self) -> &str {
        "drnet"
    }

    fn outcome(&self, bids: &BidProfile) -> Result<Outcome> {
        Ok(self.net.forward(&self.params, bids)?.into_outcome())
    }

    fn outcomes(&self, bids: &[BidProfile]) -> Result<Vec<Outcome>> {
        Ok(self.forward_all(bids)?.into_iter().map(ForwardResult::into_outcome).collect())
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}
