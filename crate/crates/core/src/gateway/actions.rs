//! Action-level (whole move) probabilities computed from token queries.
//!
//! Every well-formed action is a path through at most three token slots:
//! from-square, destination, then either a promotion token or "anything
//! else" (which ends a 2-token move). Queries are grouped per slot and sent
//! through `next_token_dist_batch` in chunks.

use soundcheck_rules::{Move, Promotion, Square};

use super::{check_prefix, GatewayError, ModelDistribution, Result, SequenceModel};
use crate::notation::TokenId;
use crate::worldmodel::TokenSet;

/// Probability that the token after a destination square is not a
/// promotion piece, i.e. that the move stays two tokens long.
pub fn tail_factor(dist: &ModelDistribution) -> f64 {
    let promo: f64 = Promotion::ALL.iter().map(|&p| dist.prob(TokenId::promotion(p))).sum();
    (1.0 - promo).max(0.0)
}

/// How to enumerate actions.
#[derive(Clone, Copy, PartialEq, Debug)]
pub struct ActionQuery {
    /// Prefixes per `dist_batch` request.
    pub batch_size: usize,
    /// Actions below this probability are dropped (and their subtrees pruned).
    pub min_mass: f64,
    /// Zero every token factor outside the top-k of its slot.
    pub top_k: Option<usize>,
}

impl Default for ActionQuery {
    fn default() -> Self {
        ActionQuery { batch_size: 128, min_mass: 0.0, top_k: None }
    }
}

/// Probabilities of EOS and of every well-formed move with non-zero mass,
/// moves sorted by token order.
#[derive(Clone, PartialEq, Debug, Default)]
pub struct ActionDistribution {
    pub eos: f64,
    pub moves: Vec<(Move, f64)>,
}

impl ActionDistribution {
    pub fn prob(&self, m: Move) -> f64 {
        self.moves.iter().find(|(x, _)| *x == m).map_or(0.0, |&(_, p)| p)
    }

    pub fn total(&self) -> f64 {
        self.eos + self.moves.iter().map(|(_, p)| p).sum::<f64>()
    }
}

/// Token-order key used for deterministic ordering of moves.
pub(crate) fn token_rank(m: Move) -> (u8, u8, u8) {
    (
        TokenId::square(m.from).id(),
        TokenId::square(m.to).id(),
        m.promotion.map_or(0, |p| TokenId::promotion(p).id()),
    )
}

/// One slot's distribution with the optional top-k mask applied.
struct Slot<'a> {
    dist: &'a ModelDistribution,
    allowed: Option<TokenSet>,
}

impl<'a> Slot<'a> {
    fn new(dist: &'a ModelDistribution, top_k: Option<usize>) -> Self {
        let allowed = top_k.map(|k| dist.ranked().into_iter().take(k).collect());
        Slot { dist, allowed }
    }

    fn factor(&self, t: TokenId) -> f64 {
        match self.allowed {
            Some(set) if !set.contains(t) => 0.0,
            _ => self.dist.prob(t),
        }
    }

    /// Mass of the non-promotion tokens that may be drawn.
    fn tail(&self) -> f64 {
        match self.allowed {
            None => tail_factor(self.dist),
            Some(set) => set.iter().filter(|t| !t.is_promotion()).map(|t| self.dist.prob(t)).sum(),
        }
    }
}

pub(crate) fn batch_dists(model: &dyn SequenceModel, seqs: &[Vec<TokenId>], batch: usize) -> Result<Vec<ModelDistribution>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(batch.max(1)) {
        let got = model.next_token_dist_batch(chunk)?;
        if got.len() != chunk.len() {
            return Err(GatewayError::QueryFailure(format!(
                "batch of {} prefixes answered with {} distributions",
                chunk.len(),
                got.len()
            )));
        }
        out.extend(got);
    }
    Ok(out)
}

fn extended(prefix: &[TokenId], extra: &[TokenId]) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(prefix.len() + extra.len());
    v.extend_from_slice(prefix);
    v.extend_from_slice(extra);
    v
}

struct Head {
    from: Square,
    to: Square,
    mass: f64,
}

/// First two slots: every (from, to) pair whose partial product passes `keep`.
fn heads(
    model: &dyn SequenceModel,
    prefix: &[TokenId],
    first: &Slot,
    query: &ActionQuery,
    keep: impl Fn(f64) -> bool,
) -> Result<Vec<Head>> {
    let froms: Vec<(Square, f64)> = Square::all()
        .map(|sq| (sq, first.factor(TokenId::square(sq))))
        .filter(|&(_, p)| p > 0.0 && keep(p))
        .collect();
    let seqs: Vec<Vec<TokenId>> = froms.iter().map(|&(sq, _)| extended(prefix, &[TokenId::square(sq)])).collect();
    let dists = batch_dists(model, &seqs, query.batch_size)?;
    let mut out = Vec::new();
    for (&(from, pf), d) in froms.iter().zip(&dists) {
        let slot = Slot::new(d, query.top_k);
        for to in Square::all().filter(|&to| to != from) {
            let mass = pf * slot.factor(TokenId::square(to));
            if mass > 0.0 && keep(mass) {
                out.push(Head { from, to, mass });
            }
        }
    }
    Ok(out)
}

/// Every well-formed action with its action-level probability.
pub fn action_distribution(model: &dyn SequenceModel, prefix: &[TokenId], query: &ActionQuery) -> Result<ActionDistribution> {
    check_prefix(prefix)?;
    let d0 = model.next_token_dist(prefix)?;
    let first = Slot::new(&d0, query.top_k);
    let eos = first.factor(TokenId::EOS);
    let keep = |p: f64| p >= query.min_mass;
    let heads = heads(model, prefix, &first, query, keep)?;
    let seqs: Vec<Vec<TokenId>> =
        heads.iter().map(|h| extended(prefix, &[TokenId::square(h.from), TokenId::square(h.to)])).collect();
    let dists = batch_dists(model, &seqs, query.batch_size)?;
    let mut moves = Vec::new();
    for (h, d) in heads.iter().zip(&dists) {
        let third = Slot::new(d, query.top_k);
        let p = h.mass * third.tail();
        if p > 0.0 && keep(p) {
            moves.push((Move::new(h.from, h.to), p));
        }
        for promo in Promotion::ALL {
            let p = h.mass * third.factor(TokenId::promotion(promo));
            if p > 0.0 && keep(p) {
                moves.push((Move::with_promotion(h.from, h.to, promo), p));
            }
        }
    }
    moves.sort_by_key(|&(m, _)| token_rank(m));
    Ok(ActionDistribution { eos: if keep(eos) { eos } else { 0.0 }, moves })
}

/// The largest action-level probability among the actions selected by
/// `target` (EOS included when `eos_target`), or 0 when none has mass.
///
/// Subtrees whose partial product cannot beat the running maximum are not
/// queried; since factors are at most one the result is exact.
pub fn max_target_action(
    model: &dyn SequenceModel,
    prefix: &[TokenId],
    batch_size: usize,
    eos_target: bool,
    target: &dyn Fn(Move) -> bool,
) -> Result<f64> {
    check_prefix(prefix)?;
    let query = ActionQuery { batch_size, ..ActionQuery::default() };
    let d0 = model.next_token_dist(prefix)?;
    let first = Slot::new(&d0, None);
    let mut best = if eos_target { d0.prob(TokenId::EOS) } else { 0.0 };
    let floor = best;
    let mut heads = heads(model, prefix, &first, &query, |p| p > floor)?;
    heads.sort_by(|a, b| b.mass.total_cmp(&a.mass));
    let targets_of = |h: &Head| {
        target(Move::new(h.from, h.to))
            || Promotion::ALL.iter().any(|&p| target(Move::with_promotion(h.from, h.to, p)))
    };
    let mut pending: Vec<&Head> = Vec::with_capacity(batch_size);
    let mut iter = heads.iter().filter(|h| targets_of(h)).peekable();
    loop {
        pending.clear();
        while pending.len() < batch_size.max(1) {
            match iter.peek() {
                Some(h) if h.mass > best => pending.push(iter.next().expect("peeked")),
                _ => break,
            }
        }
        if pending.is_empty() {
            return Ok(best);
        }
        let seqs: Vec<Vec<TokenId>> =
            pending.iter().map(|h| extended(prefix, &[TokenId::square(h.from), TokenId::square(h.to)])).collect();
        let dists = batch_dists(model, &seqs, batch_size)?;
        for (h, d) in pending.iter().zip(&dists) {
            if target(Move::new(h.from, h.to)) {
                best = best.max(h.mass * tail_factor(d));
            }
            for promo in Promotion::ALL {
                if target(Move::with_promotion(h.from, h.to, promo)) {
                    best = best.max(h.mass * d.prob(TokenId::promotion(promo)));
                }
            }
        }
    }
}

/// Action-level probabilities of the given moves, sharing queries between
/// moves with common token prefixes. Equal to [`super::move_probability`]
/// for each move.
pub fn move_probabilities(
    model: &dyn SequenceModel,
    prefix: &[TokenId],
    moves: &[Move],
    batch_size: usize,
) -> Result<Vec<f64>> {
    check_prefix(prefix)?;
    let d0 = model.next_token_dist(prefix)?;
    let mut froms: Vec<Square> = moves.iter().map(|m| m.from).filter(|&f| d0.prob(TokenId::square(f)) > 0.0).collect();
    froms.sort();
    froms.dedup();
    let seqs: Vec<Vec<TokenId>> = froms.iter().map(|&f| extended(prefix, &[TokenId::square(f)])).collect();
    let d1 = batch_dists(model, &seqs, batch_size)?;
    let head = |m: &Move| -> f64 {
        match froms.binary_search(&m.from) {
            Err(_) => 0.0,
            Ok(i) => d0.prob(TokenId::square(m.from)) * d1[i].prob(TokenId::square(m.to)),
        }
    };
    let mut pairs: Vec<(Square, Square)> = moves.iter().filter(|m| head(m) > 0.0).map(|m| (m.from, m.to)).collect();
    pairs.sort();
    pairs.dedup();
    let seqs: Vec<Vec<TokenId>> =
        pairs.iter().map(|&(f, t)| extended(prefix, &[TokenId::square(f), TokenId::square(t)])).collect();
    let d2 = batch_dists(model, &seqs, batch_size)?;
    Ok(moves
        .iter()
        .map(|m| {
            let h = head(m);
            if h == 0.0 {
                return 0.0;
            }
            let third = &d2[pairs.binary_search(&(m.from, m.to)).expect("queried pair")];
            match m.promotion {
                Some(p) => h * third.prob(TokenId::promotion(p)),
                None => h * tail_factor(third),
            }
        })
        .collect())
}
