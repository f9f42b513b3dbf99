use proptest::prelude::*;
use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundcheck_rules::{BoardState, TerminalKind};

/// Plays uniform random legal moves until the game ends or `cap` plies,
/// checking every successor. Returns the number of plies played.
fn random_playout(seed: u64, cap: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = BoardState::initial();
    for ply in 0..cap {
        let moves = state.legal_moves();
        let kind = state.terminal_kind();
        match kind {
            TerminalKind::Checkmate => {
                assert!(moves.is_empty() && state.in_check());
                return ply;
            }
            TerminalKind::Stalemate => {
                assert!(moves.is_empty() && !state.in_check());
                return ply;
            }
            TerminalKind::NotTerminal => assert!(!moves.is_empty()),
            _ => return ply,
        }
        for &m in &moves {
            let next = state.apply_move(m).expect("generated move applies");
            next.position().validate().expect("successor keeps invariants");
            assert!(!next.position().king_attacked(state.side_to_move()), "{m} leaves king in check");
            assert_ne!(next.side_to_move(), state.side_to_move());
        }
        let m = *moves.choose(&mut rng).unwrap();
        state = state.apply_move(m).unwrap();
    }
    cap
}

#[test]
fn hundred_thousand_random_plies_keep_invariants() {
    let mut total = 0;
    let mut seed = 0;
    while total < 100_000 {
        total += random_playout(seed, 1000);
        seed += 1;
    }
}

#[test]
fn fen_round_trips_along_playouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut state = BoardState::initial();
    for _ in 0..300 {
        let moves = state.legal_moves();
        if moves.is_empty() {
            break;
        }
        let again = BoardState::from_fen(&state.to_fen()).unwrap();
        assert_eq!(again.position(), state.position());
        state = state.apply_move(*moves.choose(&mut rng).unwrap()).unwrap();
    }
}

proptest! {
    #[test]
    fn playouts_never_violate_rules(seed in any::<u64>()) {
        random_playout(seed, 400);
    }
}
