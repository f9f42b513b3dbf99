//! Adversaries: each picks White's next move as the argmax, over the legal
//! moves, of an objective that scores how likely the model is to fail next.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use soundcheck_rules::Move;
use thiserror::Error;

use crate::gateway::{
    self, action_distribution, decode_move, max_target_action, move_probabilities, probe_board, probe_loss, token_rank,
    ActionQuery, Decoded, DecodingPolicy, GatewayError, SequenceModel,
};
use crate::worldmodel::{GameCursor, MisalignedCursor};

pub const DEFAULT_BATCH_SIZE: usize = 128;
pub const DEFAULT_ADAPTIVE_K: usize = 4;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum AdversaryKind {
    /// Uniformly random legal move.
    Rm,
    /// Most probable legal move under the model.
    Smm,
    /// Maximizes the model's most probable illegal reply.
    Imo,
    /// Maximizes the board-state probe loss.
    Bso,
    /// Least probable legal move under the model.
    Ad,
    /// Maximizes the total top-k-reachable illegal reply mass.
    AdaptiveImo(usize),
    /// No adversary: the model plays both sides.
    SelfPlay,
}

impl AdversaryKind {
    /// The one-ply adversaries without the adaptive and self-play variants.
    pub const CORE: [AdversaryKind; 5] =
        [AdversaryKind::Rm, AdversaryKind::Smm, AdversaryKind::Imo, AdversaryKind::Bso, AdversaryKind::Ad];

    pub fn all() -> [AdversaryKind; 7] {
        [
            AdversaryKind::Rm,
            AdversaryKind::Smm,
            AdversaryKind::Imo,
            AdversaryKind::Bso,
            AdversaryKind::Ad,
            AdversaryKind::AdaptiveImo(DEFAULT_ADAPTIVE_K),
            AdversaryKind::SelfPlay,
        ]
    }

    pub fn needs_probe(self) -> bool {
        self == AdversaryKind::Bso
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown adversary `{0}` (expected rm, smm, imo, bso, ad, adaptive-imo[:K] or self-play)")]
pub struct AdversaryParseError(String);

impl FromStr for AdversaryKind {
    type Err = AdversaryParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AdversaryParseError(s.to_string());
        Ok(match s {
            "rm" => AdversaryKind::Rm,
            "smm" => AdversaryKind::Smm,
            "imo" => AdversaryKind::Imo,
            "bso" => AdversaryKind::Bso,
            "ad" => AdversaryKind::Ad,
            "self-play" => AdversaryKind::SelfPlay,
            "adaptive-imo" => AdversaryKind::AdaptiveImo(DEFAULT_ADAPTIVE_K),
            _ => match s.strip_prefix("adaptive-imo:") {
                Some(k) => match k.parse::<usize>() {
                    Ok(k) if k >= 1 => AdversaryKind::AdaptiveImo(k),
                    _ => return Err(bad()),
                },
                None => return Err(bad()),
            },
        })
    }
}

impl fmt::Display for AdversaryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdversaryKind::Rm => f.write_str("rm"),
            AdversaryKind::Smm => f.write_str("smm"),
            AdversaryKind::Imo => f.write_str("imo"),
            AdversaryKind::Bso => f.write_str("bso"),
            AdversaryKind::Ad => f.write_str("ad"),
            AdversaryKind::AdaptiveImo(k) => write!(f, "adaptive-imo:{k}"),
            AdversaryKind::SelfPlay => f.write_str("self-play"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdversaryError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no legal move to choose from")]
    NoLegalMoves,
    #[error(transparent)]
    Misaligned(#[from] MisalignedCursor),
    #[error("candidate {0} is not legal here")]
    IllegalCandidate(Move),
    #[error("self-play has no adversary move; the model plays White")]
    SelfPlay,
}

pub type Result<T, E = AdversaryError> = std::result::Result<T, E>;

/// A scored candidate. Ties are broken towards the smallest `tie_rank`,
/// the (from, to, promotion) token ids.
#[derive(Clone, Copy, PartialEq, Debug, Serialize)]
pub struct CandidateScore {
    pub mv: Move,
    pub score: f64,
    pub tie_rank: (u8, u8, u8),
}

impl CandidateScore {
    pub fn new(mv: Move, score: f64) -> Self {
        CandidateScore { mv, score, tie_rank: token_rank(mv) }
    }
}

/// Highest score, ties to the smallest tie rank.
pub fn best_candidate(scores: &[CandidateScore]) -> Option<CandidateScore> {
    scores.iter().copied().reduce(|best, c| {
        if c.score > best.score || (c.score == best.score && c.tie_rank < best.tie_rank) {
            c
        } else {
            best
        }
    })
}

fn successor(cursor: &GameCursor, candidate: Move) -> Result<GameCursor> {
    cursor.with_move(candidate).map_err(|_| AdversaryError::IllegalCandidate(candidate))
}

/// Largest action-level probability of an illegal reply to `candidate`.
/// EOS counts as an illegal reply unless the game is over.
pub fn f_imo(model: &dyn SequenceModel, cursor: &GameCursor, candidate: Move, batch_size: usize) -> Result<f64> {
    let next = successor(cursor, candidate)?;
    let w = next.continuations()?;
    let illegal = |m: Move| !w.moves.contains(&m);
    Ok(max_target_action(model, next.tokens(), batch_size, !w.eos_legal, &illegal)?)
}

/// Total probability of illegal replies reachable by top-k sampling, with
/// every token factor outside its slot's top k set to zero.
pub fn f_adaptive_imo(
    model: &dyn SequenceModel,
    cursor: &GameCursor,
    candidate: Move,
    k: usize,
    batch_size: usize,
) -> Result<f64> {
    let next = successor(cursor, candidate)?;
    let w = next.continuations()?;
    let query = ActionQuery { batch_size, min_mass: 0.0, top_k: Some(k) };
    let ad = action_distribution(model, next.tokens(), &query)?;
    let mut sum: f64 = ad.moves.iter().filter(|(m, _)| !w.moves.contains(m)).map(|(_, p)| p).sum();
    if !w.eos_legal {
        sum += ad.eos;
    }
    Ok(sum.min(1.0))
}

/// Probe loss after `candidate` against the true successor board.
pub fn f_bso(model: &dyn SequenceModel, cursor: &GameCursor, candidate: Move) -> Result<f64> {
    let next = successor(cursor, candidate)?;
    let pb = probe_board(model, next.tokens())?;
    Ok(probe_loss(&pb, next.board()))
}

pub fn f_smm(model: &dyn SequenceModel, cursor: &GameCursor, candidate: Move) -> Result<f64> {
    successor(cursor, candidate)?;
    Ok(gateway::move_probability(model, cursor.tokens(), candidate)?)
}

pub fn f_ad(model: &dyn SequenceModel, cursor: &GameCursor, candidate: Move) -> Result<f64> {
    Ok(-f_smm(model, cursor, candidate)?)
}

/// Scores of every legal move under `kind`, in token order.
pub fn score_candidates(
    kind: AdversaryKind,
    model: &dyn SequenceModel,
    cursor: &GameCursor,
    batch_size: usize,
) -> Result<Vec<CandidateScore>> {
    let mut moves = cursor.continuations()?.moves;
    if moves.is_empty() {
        return Err(AdversaryError::NoLegalMoves);
    }
    moves.sort_by_key(|&m| token_rank(m));
    let scores: Vec<f64> = match kind {
        AdversaryKind::Rm => vec![0.0; moves.len()],
        AdversaryKind::SelfPlay => return Err(AdversaryError::SelfPlay),
        AdversaryKind::Smm | AdversaryKind::Ad => {
            let p = move_probabilities(model, cursor.tokens(), &moves, batch_size)?;
            if kind == AdversaryKind::Ad {
                p.into_iter().map(|x| -x).collect()
            } else {
                p
            }
        }
        AdversaryKind::Imo => {
            moves.par_iter().map(|&m| f_imo(model, cursor, m, batch_size)).collect::<Result<_>>()?
        }
        AdversaryKind::AdaptiveImo(k) => {
            moves.par_iter().map(|&m| f_adaptive_imo(model, cursor, m, k, batch_size)).collect::<Result<_>>()?
        }
        AdversaryKind::Bso => {
            if !model.capabilities().probe {
                return Err(GatewayError::CapabilityMissing("probe").into());
            }
            moves.par_iter().map(|&m| f_bso(model, cursor, m)).collect::<Result<_>>()?
        }
    };
    Ok(moves.into_iter().zip(scores).map(|(m, s)| CandidateScore::new(m, s)).collect())
}

/// White's move under `kind`. `rng` is only drawn from by RM.
pub fn select_adversary_move(
    kind: AdversaryKind,
    model: &dyn SequenceModel,
    cursor: &GameCursor,
    rng: &mut dyn RngCore,
    batch_size: usize,
) -> Result<Move> {
    if kind == AdversaryKind::Rm {
        let moves = cursor.continuations()?.moves;
        return moves.choose(rng).copied().ok_or(AdversaryError::NoLegalMoves);
    }
    let scores = score_candidates(kind, model, cursor, batch_size)?;
    Ok(best_candidate(&scores).expect("non-empty candidates").mv)
}

/// The model's own move for the side to move.
pub fn self_play_step(
    model: &dyn SequenceModel,
    cursor: &GameCursor,
    policy: &DecodingPolicy,
    rng: &mut dyn RngCore,
) -> Result<Decoded> {
    Ok(decode_move(model, cursor.tokens(), policy, rng)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::reference::{ReferenceModel, ReferenceProbe, Trigger};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cursor(moves: &[&str]) -> GameCursor {
        GameCursor::from_moves(&moves.iter().map(|m| m.parse().unwrap()).collect::<Vec<_>>()).unwrap()
    }

    fn pick(kind: AdversaryKind, model: &dyn SequenceModel, c: &GameCursor) -> Move {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        select_adversary_move(kind, model, c, &mut rng, DEFAULT_BATCH_SIZE).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for k in AdversaryKind::all() {
            assert_eq!(k.to_string().parse::<AdversaryKind>().unwrap(), k);
        }
        assert_eq!("adaptive-imo".parse::<AdversaryKind>().unwrap(), AdversaryKind::AdaptiveImo(4));
        assert!("adaptive-imo:0".parse::<AdversaryKind>().is_err());
        assert!("minimax".parse::<AdversaryKind>().is_err());
    }

    #[test]
    fn smm_and_ad_on_the_perfect_model_at_the_start() {
        let model = ReferenceModel::perfect();
        let c = GameCursor::new();
        let scores = score_candidates(AdversaryKind::Smm, &model, &c, 128).unwrap();
        // Every from-square has exactly two destinations, so all 20 moves tie.
        assert!(scores.iter().all(|s| s.score == 0.05));
        assert_eq!(pick(AdversaryKind::Smm, &model, &c).to_string(), "b1a3");
        assert_eq!(pick(AdversaryKind::Ad, &model, &c).to_string(), "b1a3");
    }

    #[test]
    fn smm_prefers_pieces_with_few_destinations() {
        let model = ReferenceModel::perfect();
        let c = cursor(&["e2e4", "e7e5"]);
        let smm = pick(AdversaryKind::Smm, &model, &c);
        let ad = pick(AdversaryKind::Ad, &model, &c);
        let w = c.continuations().unwrap().moves;
        let dests = |m: Move| w.iter().filter(|x| x.from == m.from).count();
        let min = w.iter().map(|&m| dests(m)).min().unwrap();
        let max = w.iter().map(|&m| dests(m)).max().unwrap();
        assert_eq!(dests(smm), min);
        assert_eq!(dests(ad), max);
    }

    #[test]
    fn imo_scores_zero_against_the_perfect_model() {
        let model = ReferenceModel::perfect();
        let c = cursor(&["e2e4", "d7d5"]);
        let scores = score_candidates(AdversaryKind::Imo, &model, &c, 128).unwrap();
        assert!(scores.iter().all(|s| s.score == 0.0));
        let scores = score_candidates(AdversaryKind::AdaptiveImo(71), &model, &c, 128).unwrap();
        assert!(scores.iter().all(|s| s.score == 0.0));
    }

    #[test]
    fn imo_finds_the_capture_trap() {
        let model = ReferenceModel::seeded_flaw(Trigger::LastMoveCapture);
        let c = cursor(&["e2e4", "d7d5"]);
        let scores = score_candidates(AdversaryKind::Imo, &model, &c, 128).unwrap();
        let best = best_candidate(&scores).unwrap();
        assert_eq!(best.mv.to_string(), "e4d5");
        assert!((best.score - 0.9).abs() < 1e-12);
        let adaptive = pick(AdversaryKind::AdaptiveImo(4), &model, &c);
        assert_eq!(adaptive.to_string(), "e4d5");
    }

    #[test]
    fn bso_prefers_knight_moves_against_a_knight_blind_probe() {
        let model = ReferenceModel::perfect().with_probe(ReferenceProbe::CorruptAfterKnightMove);
        let c = GameCursor::new();
        let scores = score_candidates(AdversaryKind::Bso, &model, &c, 128).unwrap();
        assert!(scores.iter().all(|s| s.score >= 0.0));
        let best = best_candidate(&scores).unwrap();
        assert_eq!(best.mv.to_string(), "b1a3");
        assert!(best.score > 20.0);
        let perfect = ReferenceModel::perfect().with_probe(ReferenceProbe::Perfect);
        let scores = score_candidates(AdversaryKind::Bso, &perfect, &c, 128).unwrap();
        assert!(scores.iter().all(|s| s.score == 0.0));
        assert_eq!(best_candidate(&scores).unwrap().mv.to_string(), "b1a3");
        let err = score_candidates(AdversaryKind::Bso, &ReferenceModel::perfect(), &c, 128).unwrap_err();
        assert_eq!(err, AdversaryError::Gateway(GatewayError::CapabilityMissing("probe")));
    }

    #[test]
    fn rm_is_legal_and_seeded() {
        let model = ReferenceModel::perfect();
        let c = GameCursor::new();
        let w = c.continuations().unwrap().moves;
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = select_adversary_move(AdversaryKind::Rm, &model, &c, &mut a, 128).unwrap();
            assert!(w.contains(&m));
            assert_eq!(m, select_adversary_move(AdversaryKind::Rm, &model, &c, &mut b, 128).unwrap());
        }
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let scores: Vec<CandidateScore> = ["a2a3", "b2b3", "c2c3"]
            .iter()
            .zip([0.2, 0.5, 0.5])
            .map(|(m, s)| CandidateScore::new(m.parse().unwrap(), s))
            .collect();
        let scaled: Vec<CandidateScore> =
            scores.iter().map(|c| CandidateScore { score: c.score * 7.5, ..*c }).collect();
        assert_eq!(best_candidate(&scores).unwrap().mv, best_candidate(&scaled).unwrap().mv);
        assert_eq!(best_candidate(&scores).unwrap().mv.to_string(), "b2b3");
    }
}
