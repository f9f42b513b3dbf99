use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("invalid square `{0}`")]
    Square(String),
    #[error("invalid UCI move `{0}`")]
    Move(String),
    #[error("invalid FEN: {0}")]
    Fen(String),
}

/// A position that breaks one of the board invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidState {
    #[error("{0:?} has {1} kings")]
    KingCount(crate::Color, u32),
    #[error("pawn on back rank at {0}")]
    PawnOnBackRank(crate::Square),
    #[error("en-passant square {0} is not on the expected rank")]
    EnPassantRank(crate::Square),
    #[error("side not to move is in check")]
    OpponentInCheck,
    #[error("castling right without king and rook on their home squares")]
    CastlingRights,
}

/// Why a move could not be applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IllegalReason {
    /// Nothing stands on the from-square.
    EmptySquare,
    /// The from-square holds a piece of the side not to move.
    WrongColor,
    /// The piece belongs to the mover but the move is not among its legal moves.
    NotLegal,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal move {mv}: {reason:?}")]
pub struct IllegalMove {
    pub mv: crate::Move,
    pub reason: IllegalReason,
}
