use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ModelDistribution;
use crate::notation::TokenId;

#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub enum PolicyKind {
    Greedy,
    /// Sample from the `k` most likely tokens, renormalized.
    TopK(usize),
    /// Sample from the smallest set of most likely tokens with mass at least `p`.
    TopP(f64),
}

/// How a model's next token is chosen from its distribution.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
pub struct DecodingPolicy {
    pub kind: PolicyKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid decoding policy `{0}` (expected greedy, topk:K with K >= 1, or topp:P with 0 < P <= 1)")]
pub struct PolicyParseError(String);

impl DecodingPolicy {
    pub fn greedy() -> Self {
        DecodingPolicy { kind: PolicyKind::Greedy, seed: 0 }
    }

    pub fn top_k(k: usize, seed: u64) -> Result<Self, PolicyParseError> {
        if k == 0 {
            return Err(PolicyParseError(format!("topk:{k}")));
        }
        Ok(DecodingPolicy { kind: PolicyKind::TopK(k), seed })
    }

    pub fn top_p(p: f64, seed: u64) -> Result<Self, PolicyParseError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(PolicyParseError(format!("topp:{p}")));
        }
        Ok(DecodingPolicy { kind: PolicyKind::TopP(p), seed })
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self.kind, PolicyKind::Greedy)
    }

    /// The renormalized candidate set this policy samples from, most likely first.
    pub fn truncated_support(&self, dist: &ModelDistribution) -> Vec<(TokenId, f64)> {
        let ranked = dist.ranked();
        let keep = match self.kind {
            PolicyKind::Greedy => 1,
            PolicyKind::TopK(k) => k.min(ranked.len()),
            PolicyKind::TopP(p) => {
                let mut cum = 0.0;
                let mut n = 0;
                for t in ranked {
                    cum += dist.prob(t);
                    n += 1;
                    if cum >= p - 1e-12 {
                        break;
                    }
                }
                n
            }
        };
        let mut out: Vec<(TokenId, f64)> =
            ranked[..keep].iter().map(|&t| (t, dist.prob(t))).filter(|&(_, p)| p > 0.0).collect();
        if out.is_empty() {
            return vec![(ranked[0], 1.0)];
        }
        let total: f64 = out.iter().map(|(_, p)| p).sum();
        out.iter_mut().for_each(|(_, p)| *p /= total);
        out
    }
}

impl Default for DecodingPolicy {
    fn default() -> Self {
        DecodingPolicy::greedy()
    }
}

impl FromStr for DecodingPolicy {
    type Err = PolicyParseError;

    /// `greedy`, `topk:K` or `topp:P`; the seed defaults to zero.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PolicyParseError(s.to_string());
        match s.split_once(':') {
            None if s == "greedy" => Ok(DecodingPolicy::greedy()),
            Some(("topk", k)) => DecodingPolicy::top_k(k.parse().map_err(|_| bad())?, 0),
            Some(("topp", p)) => DecodingPolicy::top_p(p.parse().map_err(|_| bad())?, 0),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for DecodingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::Greedy => f.write_str("greedy"),
            PolicyKind::TopK(k) => write!(f, "topk:{k}"),
            PolicyKind::TopP(p) => write!(f, "topp:{p}"),
        }
    }
}

/// Draws one token. Greedy never touches `rng`.
pub fn select_token(dist: &ModelDistribution, policy: &DecodingPolicy, rng: &mut dyn RngCore) -> TokenId {
    if policy.is_greedy() {
        return dist.argmax();
    }
    let support = policy.truncated_support(dist);
    if support.len() == 1 {
        return support[0].0;
    }
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for &(t, p) in &support {
        cum += p;
        if u < cum {
            return t;
        }
    }
    support.last().expect("non-empty support").0
}
