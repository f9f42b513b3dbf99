use crate::bitboard::Bits;
use crate::error::{IllegalMove, IllegalReason, InvalidState, ParseError};
use crate::position::{CastlingRights, MoveList, Position};
use crate::zobrist::position_key;
use crate::{fen, Color, Move, Piece, PieceKind, Square};

/// How a position ends the game, if it does.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalKind {
    Checkmate,
    Stalemate,
    InsufficientMaterial,
    ThreefoldRepetition,
    FiftyMoveRule,
    NotTerminal,
}

impl TerminalKind {
    pub fn is_terminal(self) -> bool {
        self != TerminalKind::NotTerminal
    }

    pub fn name(self) -> &'static str {
        match self {
            TerminalKind::Checkmate => "checkmate",
            TerminalKind::Stalemate => "stalemate",
            TerminalKind::InsufficientMaterial => "insufficient_material",
            TerminalKind::ThreefoldRepetition => "threefold_repetition",
            TerminalKind::FiftyMoveRule => "fifty_move_rule",
            TerminalKind::NotTerminal => "not_terminal",
        }
    }
}

/// A validated chess position plus the repetition history needed to decide
/// draws.
///
/// Every `BoardState` satisfies the board invariants: construction goes
/// through FEN validation or through legal moves from a valid state.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BoardState {
    pos: Position,
    /// Keys of earlier positions since the last irreversible move.
    history: Vec<u64>,
}

impl Default for BoardState {
    fn default() -> Self {
        BoardState::initial()
    }
}

impl BoardState {
    pub fn initial() -> BoardState {
        BoardState { pos: Position::initial(), history: Vec::new() }
    }

    pub fn from_fen(fen: &str) -> Result<BoardState, FenError> {
        let pos = fen::parse_position(fen)?;
        BoardState::from_position(pos).map_err(FenError::Invalid)
    }

    pub fn from_position(pos: Position) -> Result<BoardState, InvalidState> {
        pos.validate()?;
        Ok(BoardState { pos, history: Vec::new() })
    }

    pub fn to_fen(&self) -> String {
        fen::format_position(&self.pos)
    }

    pub fn position(&self) -> &Position {
        &self.pos
    }

    pub fn piece_at(&self, sq: Square) -> Option<Piece> {
        self.pos.piece_at(sq)
    }

    pub fn side_to_move(&self) -> Color {
        self.pos.side_to_move()
    }

    pub fn castling_rights(&self) -> CastlingRights {
        self.pos.castling()
    }

    pub fn en_passant(&self) -> Option<Square> {
        self.pos.en_passant()
    }

    pub fn halfmove_clock(&self) -> u32 {
        self.pos.halfmove_clock()
    }

    pub fn in_check(&self) -> bool {
        self.pos.in_check()
    }

    pub fn legal_moves(&self) -> MoveList {
        self.pos.legal_moves()
    }

    pub fn is_legal(&self, m: Move) -> bool {
        self.pos.legal_moves().contains(&m)
    }

    pub fn key(&self) -> u64 {
        position_key(&self.pos)
    }

    /// How many times the current position has occurred, counting now.
    pub fn repetition_count(&self) -> usize {
        let key = self.key();
        1 + self.history.iter().filter(|&&k| k == key).count()
    }

    /// Plays a legal move, returning the successor state.
    pub fn apply_move(&self, m: Move) -> Result<BoardState, IllegalMove> {
        match self.pos.piece_at(m.from) {
            None => return Err(IllegalMove { mv: m, reason: IllegalReason::EmptySquare }),
            Some(p) if p.color != self.side_to_move() => {
                return Err(IllegalMove { mv: m, reason: IllegalReason::WrongColor })
            }
            Some(_) => {}
        }
        if !self.is_legal(m) {
            return Err(IllegalMove { mv: m, reason: IllegalReason::NotLegal });
        }
        Ok(self.play_unchecked(m))
    }

    /// Plays `m` without checking legality. `m` must come from
    /// [`BoardState::legal_moves`] of this state.
    pub fn play_unchecked(&self, m: Move) -> BoardState {
        let next = self.pos.make(m);
        let history = if next.halfmove_clock() == 0 {
            Vec::new()
        } else {
            let mut h = Vec::with_capacity(self.history.len() + 1);
            h.extend_from_slice(&self.history);
            h.push(self.key());
            h
        };
        BoardState { pos: next, history }
    }

    pub fn has_insufficient_material(&self) -> bool {
        let p = &self.pos;
        let heavy = p.kind_bb(PieceKind::Pawn) | p.kind_bb(PieceKind::Rook) | p.kind_bb(PieceKind::Queen);
        if heavy != 0 {
            return false;
        }
        let knights = p.kind_bb(PieceKind::Knight);
        let bishops = p.kind_bb(PieceKind::Bishop);
        match (knights | bishops).count_ones() {
            0 | 1 => true,
            2 if knights == 0 => {
                // one bishop each, both on the same square colour
                let w = p.pieces(Color::White, PieceKind::Bishop);
                let b = p.pieces(Color::Black, PieceKind::Bishop);
                if w.count_ones() != 1 || b.count_ones() != 1 {
                    return false;
                }
                let light = |bb: u64| Bits(bb).next().expect("one bishop").is_light();
                light(w) == light(b)
            }
            _ => false,
        }
    }

    pub fn terminal_kind(&self) -> TerminalKind {
        if !self.pos.has_legal_move() {
            return if self.pos.in_check() { TerminalKind::Checkmate } else { TerminalKind::Stalemate };
        }
        if self.has_insufficient_material() {
            TerminalKind::InsufficientMaterial
        } else if self.history.len() >= 2 && self.repetition_count() >= 3 {
            TerminalKind::ThreefoldRepetition
        } else if self.pos.halfmove_clock() >= 100 {
            TerminalKind::FiftyMoveRule
        } else {
            TerminalKind::NotTerminal
        }
    }

    pub fn perft(&self, depth: u32) -> u64 {
        self.pos.perft(depth)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FenError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("invalid position: {0}")]
    Invalid(InvalidState),
}

#[cfg(test)]
mod tests {
    use super::*;

    fn play(state: &BoardState, moves: &str) -> BoardState {
        moves.split_whitespace().fold(state.clone(), |s, m| s.apply_move(m.parse().unwrap()).unwrap())
    }

    #[test]
    fn initial_has_twenty_moves() {
        let s = BoardState::initial();
        assert_eq!(s.legal_moves().len(), 20);
        assert_eq!(s.terminal_kind(), TerminalKind::NotTerminal);
    }

    #[test]
    fn fools_mate() {
        let s = play(&BoardState::initial(), "f2f3 e7e5 g2g4 d8h4");
        assert!(s.legal_moves().is_empty());
        assert!(s.in_check());
        assert_eq!(s.terminal_kind(), TerminalKind::Checkmate);
    }

    #[test]
    fn classic_stalemate() {
        let s = BoardState::from_fen("k7/2Q5/1K6/8/8/8/8/8 b - - 0 1").unwrap();
        assert!(s.legal_moves().is_empty());
        assert!(!s.in_check());
        assert_eq!(s.terminal_kind(), TerminalKind::Stalemate);
    }

    #[test]
    fn e2e4_sets_en_passant() {
        let s = play(&BoardState::initial(), "e2e4");
        assert_eq!(s.piece_at(Square::E4), Some(Piece::new(Color::White, PieceKind::Pawn)));
        assert_eq!(s.en_passant(), Some(Square::E3));
        assert_eq!(s.side_to_move(), Color::Black);
    }

    #[test]
    fn promotion_places_queen() {
        let s = BoardState::from_fen("4k3/P7/8/8/8/8/8/4K3 w - - 0 1").unwrap();
        let s = s.apply_move("a7a8q".parse().unwrap()).unwrap();
        assert_eq!(s.piece_at(Square::A8), Some(Piece::new(Color::White, PieceKind::Queen)));
        assert!(s.apply_move("a8a1".parse().unwrap()).is_err());
    }

    #[test]
    fn knight_shuffle_threefold() {
        let shuffle = "g1f3 g8f6 f3g1 f6g8";
        let once = play(&BoardState::initial(), shuffle);
        assert_eq!(once.repetition_count(), 2);
        assert_eq!(once.terminal_kind(), TerminalKind::NotTerminal);
        let twice = play(&once, shuffle);
        assert_eq!(twice.repetition_count(), 3);
        assert_eq!(twice.terminal_kind(), TerminalKind::ThreefoldRepetition);
    }

    #[test]
    fn en_passant_only_counts_when_capturable() {
        // after e2e4 no black pawn can capture on e3, so the key ignores the ep square
        let a = play(&BoardState::initial(), "e2e4");
        let b = BoardState::from_fen("rnbqkbnr/pppppppp/8/8/4P3/8/PPPP1PPP/RNBQKBNR b KQkq - 0 1").unwrap();
        assert_eq!(a.key(), b.key());
        let c = BoardState::from_fen("rnbqkbnr/ppp1pppp/8/8/3pP3/8/PPPP1PPP/RNBQKBNR b KQkq e3 0 1").unwrap();
        let d = BoardState::from_fen("rnbqkbnr/ppp1pppp/8/8/3pP3/8/PPPP1PPP/RNBQKBNR b KQkq - 0 1").unwrap();
        assert_ne!(c.key(), d.key());
    }

    #[test]
    fn insufficient_material_set() {
        let cases = [
            ("8/8/8/4k3/8/8/8/4K3 w - - 0 1", true),
            ("8/8/8/4k3/8/8/8/2B1K3 w - - 0 1", true),
            ("8/8/8/4k3/8/8/8/1N2K3 w - - 0 1", true),
            // c1 and f8 are both dark
            ("5b2/8/8/4k3/8/8/8/2B1K3 w - - 0 1", true),
            // c1 dark, c8 light
            ("2b5/8/8/4k3/8/8/8/2B1K3 w - - 0 1", false),
            ("8/8/8/4k3/8/8/8/1NN1K3 w - - 0 1", false),
            ("8/8/8/4k3/8/8/4P3/4K3 w - - 0 1", false),
        ];
        for (fen, expected) in cases {
            let s = BoardState::from_fen(fen).unwrap();
            assert_eq!(s.has_insufficient_material(), expected, "{fen}");
        }
        let kk = BoardState::from_fen("8/8/8/4k3/8/8/8/4K3 w - - 0 1").unwrap();
        assert!(!kk.legal_moves().is_empty());
        assert_eq!(kk.terminal_kind(), TerminalKind::InsufficientMaterial);
    }

    #[test]
    fn fifty_move_rule() {
        let s = BoardState::from_fen("8/8/8/4k3/8/8/8/R3K3 w - - 100 80").unwrap();
        assert_eq!(s.terminal_kind(), TerminalKind::FiftyMoveRule);
        let s = BoardState::from_fen("8/8/8/4k3/8/8/8/R3K3 w - - 99 80").unwrap();
        assert_eq!(s.terminal_kind(), TerminalKind::NotTerminal);
    }

    #[test]
    fn malformed_states_rejected() {
        for fen in [
            "8/8/8/8/8/8/8/4K3 w - - 0 1",
            "4k3/8/8/8/8/8/8/4KK2 w - - 0 1",
            "P3k3/8/8/8/8/8/8/4K3 w - - 0 1",
            "4k3/8/8/8/8/8/8/4K3 w - e4 0 1",
            "4k3/8/8/8/8/8/8/4K3 w K - 0 1",
            "4k3/4R3/8/8/8/8/8/4K3 w - - 0 1",
        ] {
            assert!(matches!(BoardState::from_fen(fen), Err(FenError::Invalid(_))), "{fen}");
        }
    }

    #[test]
    fn illegal_reasons() {
        let s = BoardState::initial();
        let reason = |m: &str| s.apply_move(m.parse().unwrap()).unwrap_err().reason;
        assert_eq!(reason("e3e4"), IllegalReason::EmptySquare);
        assert_eq!(reason("e7e5"), IllegalReason::WrongColor);
        assert_eq!(reason("a1a4"), IllegalReason::NotLegal);
    }
}
