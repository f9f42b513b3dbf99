use arrayvec::ArrayVec;

use crate::bitboard::{self, Bits, KING, KNIGHT, PAWN_ATTACKS, RANK_1, RANK_2, RANK_7, RANK_8};
use crate::error::InvalidState;
use crate::{Color, Move, Piece, PieceKind, Promotion, Square};

/// Move buffer sized for any legal position (the known maximum is 218).
pub type MoveList = ArrayVec<Move, 256>;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CastlingRights(u8);

impl CastlingRights {
    pub const WHITE_KING: u8 = 1;
    pub const WHITE_QUEEN: u8 = 2;
    pub const BLACK_KING: u8 = 4;
    pub const BLACK_QUEEN: u8 = 8;
    pub const ALL: CastlingRights = CastlingRights(15);
    pub const NONE: CastlingRights = CastlingRights(0);

    pub const fn from_bits(bits: u8) -> CastlingRights {
        CastlingRights(bits & 15)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn has(self, flag: u8) -> bool {
        self.0 & flag != 0
    }

    /// The four flags in FEN order: K, Q, k, q.
    pub const fn as_array(self) -> [bool; 4] {
        [self.has(1), self.has(2), self.has(4), self.has(8)]
    }

    const fn kingside(color: Color) -> u8 {
        match color {
            Color::White => Self::WHITE_KING,
            Color::Black => Self::BLACK_KING,
        }
    }

    const fn queenside(color: Color) -> u8 {
        match color {
            Color::White => Self::WHITE_QUEEN,
            Color::Black => Self::BLACK_QUEEN,
        }
    }
}

impl std::fmt::Debug for CastlingRights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CastlingRights({:04b})", self.0)
    }
}

/// Rights kept when a move touches a square (from or to).
const fn castle_mask() -> [u8; 64] {
    let mut m = [15u8; 64];
    m[0] = 15 & !CastlingRights::WHITE_QUEEN;
    m[7] = 15 & !CastlingRights::WHITE_KING;
    m[4] = 15 & !(CastlingRights::WHITE_KING | CastlingRights::WHITE_QUEEN);
    m[56] = 15 & !CastlingRights::BLACK_QUEEN;
    m[63] = 15 & !CastlingRights::BLACK_KING;
    m[60] = 15 & !(CastlingRights::BLACK_KING | CastlingRights::BLACK_QUEEN);
    m
}
static CASTLE_MASK: [u8; 64] = castle_mask();

/// A bare chess position without repetition history.
///
/// `Position` does not require the board invariants to hold: probe-decoded
/// boards may lack a king or carry pawns on the back rank, and move
/// generation on them degrades to pseudo-legal rules. Use
/// [`Position::validate`] (or go through `BoardState`) for checked positions.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Position {
    by_kind: [u64; 6],
    by_color: [u64; 2],
    mailbox: [Option<Piece>; 64],
    side: Color,
    castling: CastlingRights,
    ep: Option<Square>,
    halfmove: u32,
    fullmove: u32,
}

impl Position {
    pub fn empty(side: Color) -> Position {
        Position {
            by_kind: [0; 6],
            by_color: [0; 2],
            mailbox: [None; 64],
            side,
            castling: CastlingRights::NONE,
            ep: None,
            halfmove: 0,
            fullmove: 1,
        }
    }

    pub fn initial() -> Position {
        crate::fen::parse_position(crate::fen::INITIAL_FEN).expect("initial FEN")
    }

    /// Builds an unchecked position from a square-indexed placement.
    pub fn from_placement(
        placement: &[Option<Piece>; 64],
        side: Color,
        castling: CastlingRights,
        ep: Option<Square>,
    ) -> Position {
        let mut p = Position::empty(side);
        for sq in Square::all() {
            if let Some(piece) = placement[sq.index()] {
                p.put(sq, piece);
            }
        }
        p.castling = castling;
        p.ep = ep;
        p
    }

    pub(crate) fn set_clocks(&mut self, halfmove: u32, fullmove: u32) {
        self.halfmove = halfmove;
        self.fullmove = fullmove;
    }

    pub(crate) fn set_castling(&mut self, c: CastlingRights) {
        self.castling = c;
    }

    pub(crate) fn set_en_passant(&mut self, ep: Option<Square>) {
        self.ep = ep;
    }

    #[inline]
    pub(crate) fn put(&mut self, sq: Square, piece: Piece) {
        if self.mailbox[sq.index()].is_some() {
            self.remove(sq);
        }
        self.by_kind[piece.kind.index()] |= sq.bb();
        self.by_color[piece.color.index()] |= sq.bb();
        self.mailbox[sq.index()] = Some(piece);
    }

    #[inline]
    fn remove(&mut self, sq: Square) -> Option<Piece> {
        let piece = self.mailbox[sq.index()].take()?;
        self.by_kind[piece.kind.index()] &= !sq.bb();
        self.by_color[piece.color.index()] &= !sq.bb();
        Some(piece)
    }

    #[inline]
    pub fn piece_at(&self, sq: Square) -> Option<Piece> {
        self.mailbox[sq.index()]
    }

    pub fn placement(&self) -> &[Option<Piece>; 64] {
        &self.mailbox
    }

    #[inline]
    pub fn side_to_move(&self) -> Color {
        self.side
    }

    pub fn castling(&self) -> CastlingRights {
        self.castling
    }

    pub fn en_passant(&self) -> Option<Square> {
        self.ep
    }

    pub fn halfmove_clock(&self) -> u32 {
        self.halfmove
    }

    pub fn fullmove_number(&self) -> u32 {
        self.fullmove
    }

    #[inline]
    pub fn pieces(&self, color: Color, kind: PieceKind) -> u64 {
        self.by_kind[kind.index()] & self.by_color[color.index()]
    }

    #[inline]
    pub fn kind_bb(&self, kind: PieceKind) -> u64 {
        self.by_kind[kind.index()]
    }

    #[inline]
    pub fn color_bb(&self, color: Color) -> u64 {
        self.by_color[color.index()]
    }

    #[inline]
    pub fn occupied(&self) -> u64 {
        self.by_color[0] | self.by_color[1]
    }

    /// Whether `sq` is attacked by any piece of `by`.
    #[inline]
    pub fn is_attacked(&self, sq: Square, by: Color) -> bool {
        self.attackers_with_occ(sq, by, self.occupied()) != 0
    }

    #[inline]
    fn attackers_with_occ(&self, sq: Square, by: Color, occ: u64) -> u64 {
        let i = sq.index();
        let them = self.by_color[by.index()];
        let diag = self.by_kind[PieceKind::Bishop.index()] | self.by_kind[PieceKind::Queen.index()];
        let straight = self.by_kind[PieceKind::Rook.index()] | self.by_kind[PieceKind::Queen.index()];
        ((PAWN_ATTACKS[by.opposite().index()][i] & self.by_kind[PieceKind::Pawn.index()])
            | (KNIGHT[i] & self.by_kind[PieceKind::Knight.index()])
            | (KING[i] & self.by_kind[PieceKind::King.index()])
            | (bitboard::bishop_attacks(i, occ) & diag)
            | (bitboard::rook_attacks(i, occ) & straight))
            & them
    }

    /// Whether any king of `color` is attacked. A side without a king is never in check.
    #[inline]
    pub fn king_attacked(&self, color: Color) -> bool {
        Bits(self.pieces(color, PieceKind::King)).any(|k| self.is_attacked(k, color.opposite()))
    }

    #[inline]
    pub fn in_check(&self) -> bool {
        self.king_attacked(self.side)
    }

    /// Checks the board invariants.
    pub fn validate(&self) -> Result<(), InvalidState> {
        for color in [Color::White, Color::Black] {
            let n = self.pieces(color, PieceKind::King).count_ones();
            if n != 1 {
                return Err(InvalidState::KingCount(color, n));
            }
        }
        if let Some(sq) = Bits(self.kind_bb(PieceKind::Pawn) & (RANK_1 | RANK_8)).next() {
            return Err(InvalidState::PawnOnBackRank(sq));
        }
        if let Some(ep) = self.ep {
            let expected = match self.side {
                Color::White => 5,
                Color::Black => 2,
            };
            if ep.rank() != expected || self.piece_at(ep).is_some() {
                return Err(InvalidState::EnPassantRank(ep));
            }
        }
        let home = |color: Color, kind: PieceKind, sq: Square| self.piece_at(sq) == Some(Piece::new(color, kind));
        let c = self.castling;
        if (c.has(CastlingRights::WHITE_KING)
            && !(home(Color::White, PieceKind::King, Square::E1) && home(Color::White, PieceKind::Rook, Square::H1)))
            || (c.has(CastlingRights::WHITE_QUEEN)
                && !(home(Color::White, PieceKind::King, Square::E1)
                    && home(Color::White, PieceKind::Rook, Square::A1)))
            || (c.has(CastlingRights::BLACK_KING)
                && !(home(Color::Black, PieceKind::King, Square::E8)
                    && home(Color::Black, PieceKind::Rook, Square::H8)))
            || (c.has(CastlingRights::BLACK_QUEEN)
                && !(home(Color::Black, PieceKind::King, Square::E8)
                    && home(Color::Black, PieceKind::Rook, Square::A8)))
        {
            return Err(InvalidState::CastlingRights);
        }
        if self.king_attacked(self.side.opposite()) {
            return Err(InvalidState::OpponentInCheck);
        }
        Ok(())
    }

    /// Calls `emit` for every pseudo-legal move of the side to move.
    fn for_each_pseudo(&self, mut emit: impl FnMut(Move)) {
        let us = self.side;
        let them = us.opposite();
        let own = self.color_bb(us);
        let opp = self.color_bb(them);
        let occ = own | opp;

        let (push, start_rank, promo_rank): (i8, u64, u64) = match us {
            Color::White => (1, RANK_2, RANK_8),
            Color::Black => (-1, RANK_7, RANK_1),
        };
        let emit_pawn = |from: Square, to: Square, emit: &mut dyn FnMut(Move)| {
            if to.bb() & promo_rank != 0 {
                for p in Promotion::ALL {
                    emit(Move::with_promotion(from, to, p));
                }
            } else {
                emit(Move::new(from, to));
            }
        };
        let ep_bb = self.ep.map_or(0, Square::bb);
        for from in Bits(self.pieces(us, PieceKind::Pawn)) {
            if let Some(one) = from.offset(0, push) {
                if occ & one.bb() == 0 {
                    emit_pawn(from, one, &mut emit);
                    if from.bb() & start_rank != 0 {
                        if let Some(two) = one.offset(0, push) {
                            if occ & two.bb() == 0 {
                                emit(Move::new(from, two));
                            }
                        }
                    }
                }
            }
            for to in Bits(PAWN_ATTACKS[us.index()][from.index()] & (opp | ep_bb)) {
                emit_pawn(from, to, &mut emit);
            }
        }
        for from in Bits(self.pieces(us, PieceKind::Knight)) {
            for to in Bits(KNIGHT[from.index()] & !own) {
                emit(Move::new(from, to));
            }
        }
        let diag = self.pieces(us, PieceKind::Bishop) | self.pieces(us, PieceKind::Queen);
        for from in Bits(diag) {
            for to in Bits(bitboard::bishop_attacks(from.index(), occ) & !own) {
                emit(Move::new(from, to));
            }
        }
        let straight = self.pieces(us, PieceKind::Rook) | self.pieces(us, PieceKind::Queen);
        for from in Bits(straight) {
            for to in Bits(bitboard::rook_attacks(from.index(), occ) & !own) {
                emit(Move::new(from, to));
            }
        }
        for from in Bits(self.pieces(us, PieceKind::King)) {
            for to in Bits(KING[from.index()] & !own) {
                emit(Move::new(from, to));
            }
        }
        self.for_each_castle(occ, &mut emit);
    }

    fn for_each_castle(&self, occ: u64, emit: &mut impl FnMut(Move)) {
        let us = self.side;
        let them = us.opposite();
        let base = match us {
            Color::White => 0u8,
            Color::Black => 56,
        };
        let sq = |file: u8| Square::new(file, base / 8).expect("rank in range");
        let king = Piece::new(us, PieceKind::King);
        let rook = Piece::new(us, PieceKind::Rook);
        if self.piece_at(sq(4)) != Some(king) {
            return;
        }
        if self.castling.has(CastlingRights::kingside(us))
            && self.piece_at(sq(7)) == Some(rook)
            && occ & (sq(5).bb() | sq(6).bb()) == 0
            && ![4, 5, 6].iter().any(|&f| self.is_attacked(sq(f), them))
        {
            emit(Move::new(sq(4), sq(6)));
        }
        if self.castling.has(CastlingRights::queenside(us))
            && self.piece_at(sq(0)) == Some(rook)
            && occ & (sq(1).bb() | sq(2).bb() | sq(3).bb()) == 0
            && ![4, 3, 2].iter().any(|&f| self.is_attacked(sq(f), them))
        {
            emit(Move::new(sq(4), sq(2)));
        }
    }

    /// Legal moves of the side to move. On boards without a king of the
    /// side to move this is the pseudo-legal set.
    pub fn legal_moves(&self) -> MoveList {
        let mut out = MoveList::new();
        let us = self.side;
        self.for_each_pseudo(|m| {
            if !self.make(m).king_attacked(us) {
                out.push(m);
            }
        });
        out
    }

    /// Like [`Position::legal_moves`] but without a capacity bound, for
    /// arbitrary (possibly invariant-violating) boards.
    pub fn legal_moves_unbounded(&self) -> Vec<Move> {
        let mut out = Vec::new();
        let us = self.side;
        self.for_each_pseudo(|m| {
            if !self.make(m).king_attacked(us) {
                out.push(m);
            }
        });
        out
    }

    /// Every move the pieces could make ignoring king safety.
    pub fn pseudo_legal_moves(&self) -> Vec<Move> {
        let mut out = Vec::new();
        self.for_each_pseudo(|m| out.push(m));
        out
    }

    pub fn has_legal_move(&self) -> bool {
        let us = self.side;
        let mut found = false;
        self.for_each_pseudo(|m| {
            if !found && !self.make(m).king_attacked(us) {
                found = true;
            }
        });
        found
    }

    /// Whether an en-passant capture is actually available to the side to move.
    pub fn ep_capture_available(&self) -> bool {
        let Some(ep) = self.ep else { return false };
        let us = self.side;
        let capturers = PAWN_ATTACKS[us.opposite().index()][ep.index()] & self.pieces(us, PieceKind::Pawn);
        Bits(capturers).any(|from| !self.make(Move::new(from, ep)).king_attacked(us))
    }

    /// Applies `m` without legality checks. `m` must be at least
    /// pseudo-legal for the side to move.
    pub fn make(&self, m: Move) -> Position {
        let mut p = *self;
        let Some(piece) = p.remove(m.from) else {
            debug_assert!(false, "make: empty from-square {}", m.from);
            return p;
        };
        let mut captured = p.remove(m.to);
        if piece.kind == PieceKind::Pawn && Some(m.to) == self.ep && captured.is_none() && m.from.file() != m.to.file()
        {
            let victim = Square::new(m.to.file(), m.from.rank()).expect("on board");
            captured = p.remove(victim);
        }
        let placed = match m.promotion {
            Some(promo) if piece.kind == PieceKind::Pawn => Piece::new(piece.color, promo.kind()),
            _ => piece,
        };
        p.put(m.to, placed);
        if piece.kind == PieceKind::King && m.from.file().abs_diff(m.to.file()) == 2 {
            let rank = m.from.rank();
            let (rook_from, rook_to) = if m.to.file() > m.from.file() { (7, 5) } else { (0, 3) };
            let rf = Square::new(rook_from, rank).expect("on board");
            let rt = Square::new(rook_to, rank).expect("on board");
            if let Some(rook) = p.remove(rf) {
                p.put(rt, rook);
            }
        }
        p.castling = CastlingRights(p.castling.0 & CASTLE_MASK[m.from.index()] & CASTLE_MASK[m.to.index()]);
        p.ep = None;
        if piece.kind == PieceKind::Pawn && m.from.rank().abs_diff(m.to.rank()) == 2 {
            p.ep = Square::new(m.from.file(), (m.from.rank() + m.to.rank()) / 2);
        }
        if piece.kind == PieceKind::Pawn || captured.is_some() {
            p.halfmove = 0;
        } else {
            p.halfmove += 1;
        }
        if self.side == Color::Black {
            p.fullmove += 1;
        }
        p.side = self.side.opposite();
        p
    }

    /// Leaf count of the legal move tree at exactly `depth`.
    pub fn perft(&self, depth: u32) -> u64 {
        match depth {
            0 => 1,
            1 => self.legal_moves().len() as u64,
            _ => self.legal_moves().iter().map(|&m| self.make(m).perft(depth - 1)).sum(),
        }
    }
}

impl std::fmt::Debug for Position {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Position({})", crate::fen::format_position(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(fen: &str) -> Position {
        crate::fen::parse_position(fen).unwrap()
    }

    #[test]
    fn castling_moves_rook() {
        let p = pos("r3k2r/8/8/8/8/8/8/R3K2R w KQkq - 0 1");
        let moves = p.legal_moves();
        assert!(moves.contains(&Move::new(Square::E1, Square::G1)));
        assert!(moves.contains(&Move::new(Square::E1, Square::C1)));
        let after = p.make(Move::new(Square::E1, Square::G1));
        assert_eq!(after.piece_at(Square::F1), Some(Piece::new(Color::White, PieceKind::Rook)));
        assert_eq!(after.piece_at(Square::H1), None);
        assert_eq!(after.castling().bits(), CastlingRights::BLACK_KING | CastlingRights::BLACK_QUEEN);
    }

    #[test]
    fn no_castling_through_attack() {
        // black rook on f8 covers f1
        let p = pos("5r1k/8/8/8/8/8/8/R3K2R w KQ - 0 1");
        let moves = p.legal_moves();
        assert!(!moves.contains(&Move::new(Square::E1, Square::G1)));
        assert!(moves.contains(&Move::new(Square::E1, Square::C1)));
    }

    #[test]
    fn en_passant_capture_removes_pawn() {
        let p = pos("4k3/8/8/3pP3/8/8/8/4K3 w - d6 0 1");
        let m = Move::new(Square::E5, Square::D6);
        assert!(p.legal_moves().contains(&m));
        let after = p.make(m);
        assert_eq!(after.piece_at(Square::D5), None);
        assert_eq!(after.halfmove_clock(), 0);
        assert!(p.ep_capture_available());
    }

    #[test]
    fn pinned_en_passant_is_not_available() {
        // capturing e.p. would expose the white king on a5 to the rook on h5
        let p = pos("4k3/8/8/K2pP2r/8/8/8/8 w - d6 0 1");
        assert!(!p.ep_capture_available());
        assert!(!p.legal_moves().contains(&Move::new(Square::E5, Square::D6)));
    }

    #[test]
    fn kingless_board_gives_pseudo_moves() {
        let mut placement = [None; 64];
        placement[Square::A1.index()] = Some(Piece::new(Color::White, PieceKind::Rook));
        let p = Position::from_placement(&placement, Color::White, CastlingRights::NONE, None);
        assert!(p.validate().is_err());
        assert_eq!(p.legal_moves_unbounded().len(), 14);
    }

    #[test]
    fn back_rank_pawn_does_not_panic() {
        let mut placement = [None; 64];
        placement[Square::A8.index()] = Some(Piece::new(Color::White, PieceKind::Pawn));
        placement[Square::H1.index()] = Some(Piece::new(Color::Black, PieceKind::Pawn));
        let p = Position::from_placement(&placement, Color::White, CastlingRights::NONE, None);
        assert!(p.legal_moves_unbounded().is_empty());
        let p = Position::from_placement(&placement, Color::Black, CastlingRights::NONE, None);
        assert!(p.legal_moves_unbounded().is_empty());
    }
}
