//! Position keys for repetition detection.

use crate::bitboard::Bits;
use crate::position::Position;
use crate::{Color, Piece};

const fn splitmix(state: u64) -> (u64, u64) {
    let s = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = s;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (s, z ^ (z >> 31))
}

struct Keys {
    pieces: [[u64; 64]; 12],
    black_to_move: u64,
    castling: [u64; 16],
    ep_file: [u64; 8],
}

const fn keys() -> Keys {
    let mut k = Keys { pieces: [[0; 64]; 12], black_to_move: 0, castling: [0; 16], ep_file: [0; 8] };
    let mut state = 0x5eed_c0de_u64;
    let mut p = 0;
    while p < 12 {
        let mut sq = 0;
        while sq < 64 {
            let (s, v) = splitmix(state);
            state = s;
            k.pieces[p][sq] = v;
            sq += 1;
        }
        p += 1;
    }
    let (s, v) = splitmix(state);
    state = s;
    k.black_to_move = v;
    let mut i = 0;
    while i < 16 {
        let (s, v) = splitmix(state);
        state = s;
        k.castling[i] = v;
        i += 1;
    }
    let mut f = 0;
    while f < 8 {
        let (s, v) = splitmix(state);
        state = s;
        k.ep_file[f] = v;
        f += 1;
    }
    k
}

static KEYS: Keys = keys();

fn piece_slot(p: Piece) -> usize {
    p.color.index() * 6 + p.kind.index()
}

/// Placement, side to move, castling rights, and the en-passant file only
/// when an en-passant capture is actually available.
pub fn position_key(pos: &Position) -> u64 {
    let mut key = 0;
    for sq in Bits(pos.occupied()) {
        let piece = pos.piece_at(sq).expect("occupied square");
        key ^= KEYS.pieces[piece_slot(piece)][sq.index()];
    }
    if pos.side_to_move() == Color::Black {
        key ^= KEYS.black_to_move;
    }
    key ^= KEYS.castling[pos.castling().bits() as usize];
    if pos.ep_capture_available() {
        if let Some(ep) = pos.en_passant() {
            key ^= KEYS.ep_file[ep.file() as usize];
        }
    }
    key
}
