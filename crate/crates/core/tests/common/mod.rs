//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundcheck_core::gateway::{tail_factor, ModelOutput, SequenceModel};
use soundcheck_core::harness::{AttackOutcome, ErrorType};
use soundcheck_core::notation::{decode_move_stream, StreamItem, TokenId};
use soundcheck_core::rules::{BoardState, Move, Promotion, Square};
use soundcheck_core::worldmodel::{GameCursor, Phase};

pub fn mv(s: &str) -> Move {
    s.parse().unwrap()
}

pub fn cursor_after(moves: &[&str]) -> GameCursor {
    GameCursor::from_moves(&moves.iter().map(|m| mv(m)).collect::<Vec<_>>()).unwrap()
}

/// A random cursor: a random game of up to `max_plies` plies, stopped at a
/// move boundary or one or two tokens into a legal move.
pub fn random_cursor(rng: &mut ChaCha8Rng, max_plies: usize) -> GameCursor {
    let mut c = GameCursor::new();
    let plies = rng.gen_range(0..=max_plies);
    for _ in 0..plies {
        let moves = c.board().legal_moves();
        if c.board().terminal_kind().is_terminal() {
            break;
        }
        c.push_move(*moves.choose(rng).unwrap()).unwrap();
    }
    if c.board().terminal_kind().is_terminal() {
        return c;
    }
    let legal = c.board().legal_moves();
    let m = *legal.choose(rng).unwrap();
    let depth = rng.gen_range(0..=if m.promotion.is_some() { 2 } else { 1 });
    for t in [TokenId::square(m.from), TokenId::square(m.to)].into_iter().take(depth) {
        c.push(t).unwrap();
    }
    c
}

/// Legal next tokens computed straight from the rules' move list.
pub fn legal_tokens_oracle(c: &GameCursor) -> BTreeSet<u8> {
    let board = c.board();
    let legal = board.legal_moves();
    let terminal = board.terminal_kind().is_terminal();
    match c.phase() {
        Phase::Ended => BTreeSet::new(),
        Phase::ExpectFrom if terminal => BTreeSet::from([TokenId::EOS.id()]),
        Phase::ExpectFrom => legal.iter().map(|m| TokenId::square(m.from).id()).collect(),
        Phase::ExpectTo { from } => {
            legal.iter().filter(|m| m.from == from).map(|m| TokenId::square(m.to).id()).collect()
        }
        Phase::ExpectPromotion { from, to } => legal
            .iter()
            .filter(|m| m.from == from && m.to == to)
            .filter_map(|m| m.promotion)
            .map(|p| TokenId::promotion(p).id())
            .collect(),
    }
}

/// IMO score of one candidate by exhaustive enumeration: one query per
/// token path, no batching, no pruning.
pub fn naive_imo(model: &dyn SequenceModel, cursor: &GameCursor, candidate: Move) -> f64 {
    let next = cursor.with_move(candidate).unwrap();
    let legal = next.board().legal_moves();
    let terminal = next.board().terminal_kind().is_terminal();
    let prefix = next.tokens().to_vec();
    let d0 = model.next_token_dist(&prefix).unwrap();
    let mut best: f64 = if terminal { 0.0 } else { d0.prob(TokenId::EOS) };
    for from in Square::all() {
        let p0 = d0.prob(TokenId::square(from));
        if p0 == 0.0 {
            continue;
        }
        let mut p1_prefix = prefix.clone();
        p1_prefix.push(TokenId::square(from));
        let d1 = model.next_token_dist(&p1_prefix).unwrap();
        for to in Square::all().filter(|&t| t != from) {
            let p1 = p0 * d1.prob(TokenId::square(to));
            if p1 == 0.0 {
                continue;
            }
            let mut p2_prefix = p1_prefix.clone();
            p2_prefix.push(TokenId::square(to));
            let d2 = model.next_token_dist(&p2_prefix).unwrap();
            let plain = Move::new(from, to);
            if terminal || !legal.contains(&plain) {
                best = best.max(p1 * tail_factor(&d2));
            }
            for p in Promotion::ALL {
                let m = Move::with_promotion(from, to, p);
                if terminal || !legal.contains(&m) {
                    best = best.max(p1 * d2.prob(TokenId::promotion(p)));
                }
            }
        }
    }
    best
}

/// Parses a fixture output: `eos`, a UCI move, or raw tokens such as `e8 q`.
pub fn fixture_output(s: &str) -> ModelOutput {
    if s == "eos" {
        return ModelOutput::Eos;
    }
    if let Some(raw) = s.strip_prefix("tokens:") {
        let tokens: Vec<TokenId> = raw
            .split_whitespace()
            .map(|t| match t {
                "q" => TokenId::promotion(Promotion::Queen),
                "r" => TokenId::promotion(Promotion::Rook),
                "b" => TokenId::promotion(Promotion::Bishop),
                "n" => TokenId::promotion(Promotion::Knight),
                sq => TokenId::square(sq.parse().unwrap()),
            })
            .collect();
        return match decode_move_stream(&tokens).first() {
            Some(StreamItem::Fault(f)) => ModelOutput::Fault(f.kind),
            Some(StreamItem::Move { mv, .. }) => ModelOutput::Move(*mv),
            other => panic!("unexpected fixture stream {other:?}"),
        };
    }
    ModelOutput::Move(mv(s))
}

/// (FEN, output, expected type code or 0 for "not a violation").
pub const TAXONOMY_FIXTURES: &[(&str, &str, u8)] = &[
    (START, "e3e4", 1),
    (START, "e7e5", 2),
    (START, "a1a4", 3),
    (START, "tokens:e8 q", 6),
    (START, "eos", 7),
    (START, "e2e5", 5),
    (START, "b1b3", 4),
    (START, "g1e2", 5),
    (START, "tokens:e2 e2", 6),
    (START, "e2e4", 0),
    (AFTER_E4_E5, "f1f3", 4),
    (AFTER_E4_E5, "f1h3", 5),
    (AFTER_E4_E5, "e1e3", 4),
    (AFTER_E4_E5, "e4e3", 3),
    (AFTER_E4_E5, "d2d1", 4),
    (AFTER_E4, "d1d2", 2),
    (AFTER_E4, "e2e3", 1),
    (PINNED_KNIGHT, "e2c3", 3),
    (ROOK_CHECK, "a1a2", 3),
    (ROOK_CHECK, "e1f1", 5),
    (FOOLS_MATE, "eos", 0),
    (FOOLS_MATE, "e2e4", 3),
];

pub const START: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";
pub const AFTER_E4: &str = "rnbqkbnr/pppppppp/8/8/4P3/8/PPPP1PPP/RNBQKBNR b KQkq e3 0 1";
pub const AFTER_E4_E5: &str = "rnbqkbnr/pppp1ppp/8/4p3/4P3/8/PPPP1PPP/RNBQKBNR w KQkq e6 0 2";
pub const PINNED_KNIGHT: &str = "4k3/8/8/8/4r3/8/4N3/4K3 w - - 0 1";
pub const ROOK_CHECK: &str = "4k3/8/8/8/8/8/8/R3K2r w - - 0 1";
pub const FOOLS_MATE: &str = "rnb1kbnr/pppp1ppp/8/4p3/6Pq/5P2/PPPPP2P/RNBQKBNR w KQkq - 1 3";

pub fn code_to_type(code: u8) -> Option<ErrorType> {
    ErrorType::ALL.iter().copied().find(|e| e.code() == code)
}

pub fn board(fen: &str) -> BoardState {
    BoardState::from_fen(fen).unwrap()
}

/// Replays an outcome's trace and checks every adversary (White) move
/// after the warmup with the rules. Returns the number checked.
pub fn check_adversary_moves(o: &AttackOutcome) -> Result<usize, String> {
    let mut b = BoardState::initial();
    let mut checked = 0;
    for (i, &m) in o.trace.iter().enumerate() {
        if i >= o.warmup_plies && (i - o.warmup_plies).is_multiple_of(2) {
            if b.terminal_kind().is_terminal() || !b.is_legal(m) {
                return Err(format!("{} played illegal {m} at ply {i} of warmup {}", o.adversary, o.warmup_id));
            }
            checked += 1;
        } else if !b.is_legal(m) {
            return Err(format!("trace holds illegal model move {m} at ply {i}"));
        }
        b = b.apply_move(m).unwrap();
    }
    Ok(checked)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
