//! Chess rules: positions, legal move generation, move application,
//! terminal-state detection and perft.

mod bitboard;
mod error;
pub mod fen;
mod position;
mod state;
mod types;
mod zobrist;

pub use error::{IllegalMove, IllegalReason, InvalidState, ParseError};
pub use position::{CastlingRights, MoveList, Position};
pub use state::{BoardState, FenError, TerminalKind};
pub use types::{Color, Move, Piece, PieceKind, Promotion, Square};

/// Leaf nodes of the legal move tree at exactly `depth`.
pub fn perft(state: &BoardState, depth: u32) -> u64 {
    state.perft(depth)
}

/// Iterates the squares set in a bitboard, lowest index first.
pub fn squares(bb: u64) -> impl Iterator<Item = Square> {
    bitboard::Bits(bb)
}
