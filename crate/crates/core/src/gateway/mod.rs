//! The interface to a sequence model under test.
//!
//! Every model, in-process or remote, implements [`SequenceModel`]. On top
//! of the raw next-token query this module provides action-level move
//! probabilities, move decoding under a [`DecodingPolicy`], and board-state
//! probe access.

mod actions;
pub(crate) use actions::token_rank;
pub mod conformance;
mod decoding;
pub mod protocol;
pub mod reference;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use soundcheck_rules::{BoardState, Color, Move, Piece, PieceKind, Square};
use thiserror::Error;

use crate::notation::{encode_move, FaultKind, TokenId, TokenKind, VOCAB_SIZE};

pub use actions::{action_distribution, max_target_action, move_probabilities, tail_factor, ActionDistribution, ActionQuery};
pub use decoding::{select_token, DecodingPolicy, PolicyKind, PolicyParseError};

/// Tolerance on the total mass of an ingested distribution.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;
/// Probability floor used by the probe loss.
pub const PROBE_FLOOR: f64 = 1e-12;
pub const PROBE_CLASSES: usize = 13;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    /// The model could not answer; aborts the current episode only.
    #[error("query failed: {0}")]
    QueryFailure(String),
    #[error("model lacks the `{0}` capability")]
    CapabilityMissing(&'static str),
    #[error("prefix must start with BOS")]
    MissingBos,
    #[error("malformed distribution: {0}")]
    Malformed(String),
}

pub type Result<T, E = GatewayError> = std::result::Result<T, E>;

/// What a model can answer besides plain distributions.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub dist_batch: bool,
    pub probe: bool,
    pub grad_cos: bool,
}

impl Capabilities {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = vec!["dist"];
        if self.dist_batch {
            v.push("dist_batch");
        }
        if self.probe {
            v.push("probe");
        }
        if self.grad_cos {
            v.push("grad_cos");
        }
        v
    }
}

/// A next-token distribution over the 71-token vocabulary.
#[derive(Clone, PartialEq, Debug)]
pub struct ModelDistribution {
    probs: [f64; VOCAB_SIZE],
}

impl ModelDistribution {
    /// Validates and renormalizes raw probabilities. Entries must be finite
    /// and non-negative and the total within 1e-5 of one. Totals that are
    /// one up to summation rounding are kept as sent, so normalized
    /// distributions survive a wire round trip bit for bit.
    pub fn new(raw: &[f64]) -> Result<ModelDistribution> {
        if raw.len() != VOCAB_SIZE {
            return Err(GatewayError::Malformed(format!("expected {VOCAB_SIZE} entries, got {}", raw.len())));
        }
        if let Some(bad) = raw.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(GatewayError::Malformed(format!("invalid probability {bad}")));
        }
        let total: f64 = raw.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(GatewayError::Malformed(format!("probabilities sum to {total}")));
        }
        let scale = if (total - 1.0).abs() <= 1e-12 { 1.0 } else { total };
        let mut probs = [0.0; VOCAB_SIZE];
        for (p, &r) in probs.iter_mut().zip(raw) {
            *p = r / scale;
        }
        Ok(ModelDistribution { probs })
    }

    /// Builds from an exact array without renormalizing. Used by the
    /// reference models, whose distributions are normalized by construction.
    pub(crate) fn from_array(probs: [f64; VOCAB_SIZE]) -> ModelDistribution {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        ModelDistribution { probs }
    }

    pub fn uniform() -> ModelDistribution {
        ModelDistribution { probs: [1.0 / VOCAB_SIZE as f64; VOCAB_SIZE] }
    }

    pub fn one_hot(t: TokenId) -> ModelDistribution {
        let mut probs = [0.0; VOCAB_SIZE];
        probs[t.index()] = 1.0;
        ModelDistribution { probs }
    }

    #[inline]
    pub fn prob(&self, t: TokenId) -> f64 {
        self.probs[t.index()]
    }

    pub fn probs(&self) -> &[f64; VOCAB_SIZE] {
        &self.probs
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for i in 1..VOCAB_SIZE {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        TokenId::new(best as u8).expect("in vocabulary")
    }

    /// Tokens ranked by probability, ties by ascending id.
    pub fn ranked(&self) -> [TokenId; VOCAB_SIZE] {
        let mut ids: [TokenId; VOCAB_SIZE] = std::array::from_fn(|i| TokenId::new(i as u8).expect("in vocabulary"));
        ids.sort_by(|a, b| self.probs[b.index()].total_cmp(&self.probs[a.index()]).then(a.cmp(b)));
        ids
    }

    /// Mixture `w * a + (1 - w) * b`.
    pub fn mix(w: f64, a: &ModelDistribution, b: &ModelDistribution) -> ModelDistribution {
        let mut probs = [0.0; VOCAB_SIZE];
        for (i, p) in probs.iter_mut().enumerate() {
            *p = w * a.probs[i] + (1.0 - w) * b.probs[i];
        }
        ModelDistribution { probs }
    }
}

/// Probe class of a square's content: 0 = empty, 1..=6 white P N B R Q K,
/// 7..=12 black P N B R Q K.
pub fn probe_class(piece: Option<Piece>) -> usize {
    match piece {
        None => 0,
        Some(p) => 1 + 6 * p.color.index() + p.kind.index(),
    }
}

pub fn class_piece(class: usize) -> Option<Piece> {
    if class == 0 || class >= PROBE_CLASSES {
        return None;
    }
    let color = if class <= 6 { Color::White } else { Color::Black };
    Some(Piece::new(color, PieceKind::ALL[(class - 1) % 6]))
}

/// Per-square class distributions predicted by a board-state probe, in
/// square order a1..h8.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ProbeBoard {
    squares: Vec<[f64; PROBE_CLASSES]>,
}

impl ProbeBoard {
    pub fn new(rows: Vec<[f64; PROBE_CLASSES]>) -> Result<ProbeBoard> {
        if rows.len() != 64 {
            return Err(GatewayError::Malformed(format!("probe board has {} squares", rows.len())));
        }
        let mut squares = rows;
        for row in &mut squares {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(GatewayError::Malformed("invalid probe probability".into()));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(GatewayError::Malformed(format!("probe square sums to {total}")));
            }
            row.iter_mut().for_each(|p| *p /= total);
        }
        Ok(ProbeBoard { squares })
    }

    /// One-hot probe of a placement.
    pub fn exact(placement: &[Option<Piece>; 64]) -> ProbeBoard {
        let squares = placement
            .iter()
            .map(|&p| {
                let mut row = [0.0; PROBE_CLASSES];
                row[probe_class(p)] = 1.0;
                row
            })
            .collect();
        ProbeBoard { squares }
    }

    pub fn uniform() -> ProbeBoard {
        ProbeBoard { squares: vec![[1.0 / PROBE_CLASSES as f64; PROBE_CLASSES]; 64] }
    }

    pub fn square(&self, sq: Square) -> &[f64; PROBE_CLASSES] {
        &self.squares[sq.index()]
    }

    pub fn square_mut(&mut self, sq: Square) -> &mut [f64; PROBE_CLASSES] {
        &mut self.squares[sq.index()]
    }

    pub fn swap_squares(&mut self, a: Square, b: Square) {
        self.squares.swap(a.index(), b.index());
    }

    /// Most likely class per square (ties to the lower class).
    pub fn argmax_classes(&self) -> [usize; 64] {
        std::array::from_fn(|i| {
            let row = &self.squares[i];
            (1..PROBE_CLASSES).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
    }

    pub fn argmax_placement(&self) -> [Option<Piece>; 64] {
        self.argmax_classes().map(class_piece)
    }
}

impl TryFrom<Vec<Vec<f64>>> for ProbeBoard {
    type Error = GatewayError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let rows = rows
            .into_iter()
            .map(|r| {
                <[f64; PROBE_CLASSES]>::try_from(r.as_slice())
                    .map_err(|_| GatewayError::Malformed(format!("probe square has {} classes", r.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        ProbeBoard::new(rows)
    }
}

impl From<ProbeBoard> for Vec<Vec<f64>> {
    fn from(b: ProbeBoard) -> Self {
        b.squares.iter().map(|r| r.to_vec()).collect()
    }
}

/// A sequence model under test.
pub trait SequenceModel: Send + Sync {
    fn capabilities(&self) -> Capabilities;

    /// Distribution of the token following `tokens`.
    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution>;

    /// Distributions for several prefixes, in request order.
    fn next_token_dist_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<ModelDistribution>> {
        seqs.iter().map(|s| self.next_token_dist(s)).collect()
    }

    fn probe_board(&self, _tokens: &[TokenId]) -> Result<ProbeBoard> {
        Err(GatewayError::CapabilityMissing("probe"))
    }

    fn grad_cos(&self, _tokens: &[TokenId]) -> Result<f64> {
        Err(GatewayError::CapabilityMissing("grad_cos"))
    }
}

impl<M: SequenceModel + ?Sized> SequenceModel for &M {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
        (**self).next_token_dist(tokens)
    }
    fn next_token_dist_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<ModelDistribution>> {
        (**self).next_token_dist_batch(seqs)
    }
    fn probe_board(&self, tokens: &[TokenId]) -> Result<ProbeBoard> {
        (**self).probe_board(tokens)
    }
    fn grad_cos(&self, tokens: &[TokenId]) -> Result<f64> {
        (**self).grad_cos(tokens)
    }
}

impl<M: SequenceModel + ?Sized> SequenceModel for Box<M> {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
        (**self).next_token_dist(tokens)
    }
    fn next_token_dist_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<ModelDistribution>> {
        (**self).next_token_dist_batch(seqs)
    }
    fn probe_board(&self, tokens: &[TokenId]) -> Result<ProbeBoard> {
        (**self).probe_board(tokens)
    }
    fn grad_cos(&self, tokens: &[TokenId]) -> Result<f64> {
        (**self).grad_cos(tokens)
    }
}

/// Counts the distributions requested through it and optionally enforces a
/// budget, turning the excess into a query failure.
pub struct CountingModel<'a> {
    inner: &'a dyn SequenceModel,
    queries: AtomicU64,
    budget: Option<u64>,
}

impl<'a> CountingModel<'a> {
    pub fn new(inner: &'a dyn SequenceModel, budget: Option<u64>) -> Self {
        CountingModel { inner, queries: AtomicU64::new(0), budget }
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    fn charge(&self, n: u64) -> Result<()> {
        let used = self.queries.fetch_add(n, Ordering::Relaxed) + n;
        match self.budget {
            Some(b) if used > b => Err(GatewayError::QueryFailure(format!("query budget of {b} exhausted"))),
            _ => Ok(()),
        }
    }
}

impl SequenceModel for CountingModel<'_> {
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
        self.charge(1)?;
        self.inner.next_token_dist(tokens)
    }
    fn next_token_dist_batch(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<ModelDistribution>> {
        self.charge(seqs.len() as u64)?;
        self.inner.next_token_dist_batch(seqs)
    }
    fn probe_board(&self, tokens: &[TokenId]) -> Result<ProbeBoard> {
        self.charge(1)?;
        self.inner.probe_board(tokens)
    }
    fn grad_cos(&self, tokens: &[TokenId]) -> Result<f64> {
        self.charge(1)?;
        self.inner.grad_cos(tokens)
    }
}

fn check_prefix(tokens: &[TokenId]) -> Result<()> {
    if tokens.first() == Some(&TokenId::BOS) {
        Ok(())
    } else {
        Err(GatewayError::MissingBos)
    }
}

pub fn next_token_dist(model: &dyn SequenceModel, tokens: &[TokenId]) -> Result<ModelDistribution> {
    check_prefix(tokens)?;
    model.next_token_dist(tokens)
}

/// Action-level probability of `m` after `tokens`: the product of its token
/// conditionals. A move without promotion also carries the probability that
/// no promotion token follows its destination, so that the probabilities of
/// all decodable actions sum to at most one.
pub fn move_probability(model: &dyn SequenceModel, tokens: &[TokenId], m: Move) -> Result<f64> {
    check_prefix(tokens)?;
    let mut ctx = tokens.to_vec();
    let move_tokens = encode_move(m);
    let from = model.next_token_dist(&ctx)?.prob(move_tokens[0]);
    if from == 0.0 {
        return Ok(0.0);
    }
    ctx.push(move_tokens[0]);
    let to = model.next_token_dist(&ctx)?.prob(move_tokens[1]);
    let head = from * to;
    if head == 0.0 {
        return Ok(0.0);
    }
    ctx.push(move_tokens[1]);
    let third = model.next_token_dist(&ctx)?;
    Ok(match move_tokens.get(2) {
        Some(&p) => head * third.prob(p),
        None => head * tail_factor(&third),
    })
}

/// What a model produced at a move boundary.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ModelOutput {
    Move(Move),
    Eos,
    Fault(FaultKind),
}

/// A decoded model output with the raw tokens it consumed.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Decoded {
    pub output: ModelOutput,
    pub raw: Vec<TokenId>,
}

/// Decodes one move from the model under `policy`, token by token.
///
/// After the two squares the next token is drawn as well and kept as a
/// promotion piece only if it is one; otherwise the move is two tokens.
pub fn decode_move(
    model: &dyn SequenceModel,
    tokens: &[TokenId],
    policy: &DecodingPolicy,
    rng: &mut dyn RngCore,
) -> Result<Decoded> {
    check_prefix(tokens)?;
    let mut ctx = tokens.to_vec();
    let first = select_token(&model.next_token_dist(&ctx)?, policy, rng);
    let fault = |kind, raw: Vec<TokenId>| Ok(Decoded { output: ModelOutput::Fault(kind), raw });
    let from = match first.kind() {
        TokenKind::Eos => return Ok(Decoded { output: ModelOutput::Eos, raw: vec![first] }),
        TokenKind::Square(sq) => sq,
        TokenKind::Promotion(_) => return fault(FaultKind::PromotionAtMoveStart, vec![first]),
        TokenKind::Pad => return fault(FaultKind::InteriorPad, vec![first]),
        TokenKind::Bos => return fault(FaultKind::ControlAtMoveStart, vec![first]),
    };
    ctx.push(first);
    let second = select_token(&model.next_token_dist(&ctx)?, policy, rng);
    let Some(to) = second.as_square() else {
        return fault(FaultKind::ExpectedDestination, vec![first, second]);
    };
    if to == from {
        return fault(FaultKind::NullMove, vec![first, second]);
    }
    ctx.push(second);
    let third = select_token(&model.next_token_dist(&ctx)?, policy, rng);
    Ok(match third.as_promotion() {
        Some(p) => Decoded { output: ModelOutput::Move(Move::with_promotion(from, to, p)), raw: vec![first, second, third] },
        None => Decoded { output: ModelOutput::Move(Move::new(from, to)), raw: vec![first, second] },
    })
}

/// The model's probe reading after `tokens`, which should end on a
/// move-ending token.
pub fn probe_board(model: &dyn SequenceModel, tokens: &[TokenId]) -> Result<ProbeBoard> {
    if !model.capabilities().probe {
        return Err(GatewayError::CapabilityMissing("probe"));
    }
    check_prefix(tokens)?;
    model.probe_board(tokens)
}

/// Negative log-likelihood of the true board under the probe, summed over
/// the 64 squares, with each probability floored at 1e-12.
pub fn probe_loss(pb: &ProbeBoard, truth: &BoardState) -> f64 {
    Square::all()
        .map(|sq| {
            let p = pb.square(sq)[probe_class(truth.piece_at(sq))];
            -p.max(PROBE_FLOOR).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::reference::ReferenceModel;
    use crate::worldmodel::GameCursor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sq(s: &str) -> TokenId {
        TokenId::square(s.parse().unwrap())
    }

    #[test]
    fn distribution_ingest() {
        let mut raw = vec![0.0; VOCAB_SIZE];
        raw[5] = 0.5;
        raw[6] = 0.5 + 5e-6;
        let d = ModelDistribution::new(&raw).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        raw[6] = 0.6;
        assert!(ModelDistribution::new(&raw).is_err());
        raw[6] = f64::NAN;
        assert!(ModelDistribution::new(&raw).is_err());
        assert!(ModelDistribution::new(&[1.0]).is_err());
        let mut neg = vec![0.0; VOCAB_SIZE];
        neg[0] = 1.1;
        neg[1] = -0.1;
        assert!(ModelDistribution::new(&neg).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        assert_eq!(ModelDistribution::uniform().argmax(), TokenId::PAD);
        let ranked = ModelDistribution::uniform().ranked();
        assert!(ranked.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn perfect_model_move_probability() {
        let model = ReferenceModel::perfect();
        let bos = [TokenId::BOS];
        assert_eq!(move_probability(&model, &bos, "e2e4".parse().unwrap()).unwrap(), 0.1 * 0.5);
        assert_eq!(move_probability(&model, &bos, "e3e4".parse().unwrap()).unwrap(), 0.0);
        assert_eq!(move_probability(&model, &[], "e2e4".parse().unwrap()), Err(GatewayError::MissingBos));
    }

    #[test]
    fn perfect_model_distribution() {
        let model = ReferenceModel::perfect();
        let d = next_token_dist(&model, &[TokenId::BOS]).unwrap();
        assert_eq!(d.prob(sq("e2")), 0.1);
        assert_eq!(d.probs().iter().filter(|&&p| p > 0.0).count(), 10);
        let mate = GameCursor::from_moves(&["f2f3", "e7e5", "g2g4", "d8h4"].map(|m| m.parse().unwrap())).unwrap();
        let d = next_token_dist(&model, mate.tokens()).unwrap();
        assert_eq!(d.prob(TokenId::EOS), 1.0);
    }

    /// A scripted model returning fixed argmaxes per slot, for decoding tests.
    struct Script(Vec<TokenId>);

    impl SequenceModel for Script {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
            let slot = tokens.len() - 1;
            Ok(ModelDistribution::one_hot(self.0.get(slot).copied().unwrap_or(TokenId::EOS)))
        }
    }

    #[test]
    fn greedy_decoding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let greedy = DecodingPolicy::greedy();
        let d = decode_move(&Script(vec![sq("e2"), sq("e4"), sq("a1")]), &[TokenId::BOS], &greedy, &mut rng).unwrap();
        assert_eq!(d.output, ModelOutput::Move("e2e4".parse().unwrap()));
        assert_eq!(d.raw, vec![sq("e2"), sq("e4")]);
        let q = TokenId::promotion(soundcheck_rules::Promotion::Queen);
        let d = decode_move(&Script(vec![sq("e8"), q]), &[TokenId::BOS], &greedy, &mut rng).unwrap();
        assert_eq!(d.output, ModelOutput::Fault(FaultKind::ExpectedDestination));
        assert_eq!(d.raw, vec![sq("e8"), q]);
        let d = decode_move(&Script(vec![TokenId::EOS]), &[TokenId::BOS], &greedy, &mut rng).unwrap();
        assert_eq!(d.output, ModelOutput::Eos);
        let d = decode_move(&Script(vec![sq("a7"), sq("a8"), q]), &[TokenId::BOS], &greedy, &mut rng).unwrap();
        assert_eq!(d.output, ModelOutput::Move("a7a8q".parse().unwrap()));
    }

    #[test]
    fn probe_loss_values() {
        let truth = BoardState::initial();
        let exact = ProbeBoard::exact(truth.position().placement());
        assert_eq!(probe_loss(&exact, &truth), 0.0);
        let uniform = probe_loss(&ProbeBoard::uniform(), &truth);
        assert!((uniform - 64.0 * 13f64.ln()).abs() < 1e-9);
        assert!((uniform - 164.16).abs() < 0.01);
        let mut wrong = exact.clone();
        wrong.swap_squares(Square::A1, Square::A3);
        // a1 now predicts empty, a3 predicts a rook: two floored squares
        assert!((probe_loss(&wrong, &truth) - 2.0 * -(1e-12f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn probe_board_serde_shape() {
        let b = ProbeBoard::uniform();
        let json = serde_json::to_string(&b).unwrap();
        let back: ProbeBoard = serde_json::from_str(&json).unwrap();
        for sq in Square::all() {
            for (x, y) in back.square(sq).iter().zip(b.square(sq)) {
                assert!((x - y).abs() < 1e-15);
            }
        }
        assert!(serde_json::from_str::<ProbeBoard>("[[1.0]]").is_err());
    }

    #[test]
    fn probe_classes_round_trip() {
        for p in Piece::all() {
            assert_eq!(class_piece(probe_class(Some(p))), Some(p));
        }
        assert_eq!(probe_class(Some(Piece::new(Color::White, PieceKind::Pawn))), 1);
        assert_eq!(probe_class(Some(Piece::new(Color::Black, PieceKind::King))), 12);
        assert_eq!(class_piece(0), None);
    }

    #[test]
    fn counting_budget() {
        let model = ReferenceModel::perfect();
        let counting = CountingModel::new(&model, Some(2));
        assert!(counting.next_token_dist(&[TokenId::BOS]).is_ok());
        assert!(counting.next_token_dist(&[TokenId::BOS]).is_ok());
        assert!(matches!(counting.next_token_dist(&[TokenId::BOS]), Err(GatewayError::QueryFailure(_))));
        assert_eq!(counting.queries(), 3);
    }
}
