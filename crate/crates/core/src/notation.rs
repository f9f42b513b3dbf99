//! The 71-symbol UCI token vocabulary and move/game encoding.
//!
//! Token table: 0 = PAD, 1 = BOS, 2 = EOS, 3..=66 are the squares with
//! `id = 3 + 8 * rank + file` (a1 = 3, h8 = 66), then 67..=70 are the
//! promotion pieces q, r, b, n.

use std::fmt;
use std::str::FromStr;

use arrayvec::ArrayVec;
use serde::{Deserialize, Serialize};
use soundcheck_rules::{Move, Promotion, Square};
use thiserror::Error;

pub const VOCAB_SIZE: usize = 71;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TokenId(u8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("token id {0} is outside the vocabulary")]
pub struct TokenOutOfRange(pub u8);

impl TryFrom<u8> for TokenId {
    type Error = TokenOutOfRange;

    fn try_from(id: u8) -> Result<Self, Self::Error> {
        TokenId::new(id).ok_or(TokenOutOfRange(id))
    }
}

impl From<TokenId> for u8 {
    fn from(t: TokenId) -> u8 {
        t.0
    }
}

/// What a token stands for.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Square(Square),
    Promotion(Promotion),
}

const SQUARE_BASE: u8 = 3;
const PROMO_BASE: u8 = 67;

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const BOS: TokenId = TokenId(1);
    pub const EOS: TokenId = TokenId(2);

    pub const fn new(id: u8) -> Option<TokenId> {
        if (id as usize) < VOCAB_SIZE {
            Some(TokenId(id))
        } else {
            None
        }
    }

    #[inline]
    pub const fn id(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub const fn square(sq: Square) -> TokenId {
        TokenId(SQUARE_BASE + sq.index() as u8)
    }

    #[inline]
    pub const fn promotion(p: Promotion) -> TokenId {
        TokenId(
            PROMO_BASE
                + match p {
                    Promotion::Queen => 0,
                    Promotion::Rook => 1,
                    Promotion::Bishop => 2,
                    Promotion::Knight => 3,
                },
        )
    }

    pub fn all() -> impl Iterator<Item = TokenId> {
        (0..VOCAB_SIZE as u8).map(TokenId)
    }

    pub fn kind(self) -> TokenKind {
        match self.0 {
            0 => TokenKind::Pad,
            1 => TokenKind::Bos,
            2 => TokenKind::Eos,
            id if id < PROMO_BASE => {
                TokenKind::Square(Square::from_index((id - SQUARE_BASE) as usize).expect("square range"))
            }
            id => TokenKind::Promotion(Promotion::ALL[(id - PROMO_BASE) as usize]),
        }
    }

    #[inline]
    pub fn as_square(self) -> Option<Square> {
        match self.kind() {
            TokenKind::Square(sq) => Some(sq),
            _ => None,
        }
    }

    #[inline]
    pub fn as_promotion(self) -> Option<Promotion> {
        match self.kind() {
            TokenKind::Promotion(p) => Some(p),
            _ => None,
        }
    }

    #[inline]
    pub fn is_promotion(self) -> bool {
        self.0 >= PROMO_BASE
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            TokenKind::Pad => f.write_str("PAD"),
            TokenKind::Bos => f.write_str("BOS"),
            TokenKind::Eos => f.write_str("EOS"),
            TokenKind::Square(sq) => write!(f, "{sq}"),
            TokenKind::Promotion(p) => write!(f, "{}", p.uci_char()),
        }
    }
}

impl fmt::Debug for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.0, self)
    }
}

pub type MoveTokens = ArrayVec<TokenId, 3>;

pub fn encode_move(m: Move) -> MoveTokens {
    let mut out = MoveTokens::new();
    out.push(TokenId::square(m.from));
    out.push(TokenId::square(m.to));
    if let Some(p) = m.promotion {
        out.push(TokenId::promotion(p));
    }
    out
}

/// BOS, the moves, and EOS when the game ended by rule.
pub fn encode_game(moves: &[Move], complete: bool) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(2 + moves.len() * 2);
    out.push(TokenId::BOS);
    for &m in moves {
        out.extend(encode_move(m));
    }
    if complete {
        out.push(TokenId::EOS);
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum ControlMark {
    Bos,
    Eos,
}

/// Why a token stream stopped parsing as UCI moves.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum FaultKind {
    /// A promotion token where a from-square was expected.
    PromotionAtMoveStart,
    /// A promotion or control token where the destination square was expected.
    ExpectedDestination,
    /// Destination equal to the from-square.
    NullMove,
    /// The stream ended after a from-square.
    DanglingSquare,
    /// PAD followed by further tokens.
    InteriorPad,
    /// BOS predicted where a move should start.
    ControlAtMoveStart,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct StructuralFault {
    pub index: usize,
    pub kind: FaultKind,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StreamItem {
    /// A parsed move starting at token index `start`.
    Move { mv: Move, start: usize },
    Control { mark: ControlMark, index: usize },
    Fault(StructuralFault),
}

/// Greedy parse of a token stream into moves and control marks.
///
/// A move is two square tokens plus an optional promotion token; the
/// promotion token is consumed iff it directly follows the destination.
/// Parsing stops at the first structural fault, which is the last item.
/// Trailing PAD tokens are ignored.
pub fn decode_move_stream(tokens: &[TokenId]) -> Vec<StreamItem> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let fault = |index, kind| StreamItem::Fault(StructuralFault { index, kind });
        match tokens[i].kind() {
            TokenKind::Bos => out.push(StreamItem::Control { mark: ControlMark::Bos, index: i }),
            TokenKind::Eos => out.push(StreamItem::Control { mark: ControlMark::Eos, index: i }),
            TokenKind::Pad => {
                if tokens[i..].iter().all(|&t| t == TokenId::PAD) {
                    break;
                }
                out.push(fault(i, FaultKind::InteriorPad));
                return out;
            }
            TokenKind::Promotion(_) => {
                out.push(fault(i, FaultKind::PromotionAtMoveStart));
                return out;
            }
            TokenKind::Square(from) => {
                let Some(&next) = tokens.get(i + 1) else {
                    out.push(fault(i + 1, FaultKind::DanglingSquare));
                    return out;
                };
                let Some(to) = next.as_square() else {
                    out.push(fault(i + 1, FaultKind::ExpectedDestination));
                    return out;
                };
                if to == from {
                    out.push(fault(i + 1, FaultKind::NullMove));
                    return out;
                }
                let start = i;
                i += 1;
                let promotion = tokens.get(i + 1).and_then(|t| t.as_promotion());
                if promotion.is_some() {
                    i += 1;
                }
                out.push(StreamItem::Move { mv: Move { from, to, promotion }, start });
            }
        }
        i += 1;
    }
    out
}

/// The role a token plays in its move.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TokenRole {
    MoveStart,
    /// The last token of a move: the destination of a 2-token move or the
    /// promotion piece of a 3-token move.
    MoveEnd,
    /// The destination square of a move that continues with a promotion token.
    PromotionTail,
    Control,
}

/// Roles for each token up to the first structural fault (exclusive).
pub fn boundary_map(tokens: &[TokenId]) -> Vec<TokenRole> {
    let mut roles = Vec::with_capacity(tokens.len());
    for item in decode_move_stream(tokens) {
        match item {
            StreamItem::Control { .. } => roles.push(TokenRole::Control),
            StreamItem::Move { mv, .. } => {
                roles.push(TokenRole::MoveStart);
                if mv.promotion.is_some() {
                    roles.push(TokenRole::PromotionTail);
                }
                roles.push(TokenRole::MoveEnd);
            }
            StreamItem::Fault(_) => break,
        }
    }
    roles
}

/// One game of a corpus file.
#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct CorpusGame {
    pub moves: Vec<Move>,
    /// The game ended by rule; controls EOS emission.
    pub complete: bool,
}

pub const COMPLETE_MARKER: &str = "#complete";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusLineError {
    #[error("bad move `{0}`")]
    BadMove(String),
    #[error("`{COMPLETE_MARKER}` must be the last field")]
    MisplacedMarker,
}

impl CorpusGame {
    pub fn tokens(&self) -> Vec<TokenId> {
        encode_game(&self.moves, self.complete)
    }
}

impl FromStr for CorpusGame {
    type Err = CorpusLineError;

    /// Space-separated UCI moves with an optional trailing `#complete`.
    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let complete = fields.last() == Some(&COMPLETE_MARKER);
        let body = if complete { &fields[..fields.len() - 1] } else { &fields[..] };
        let moves = body
            .iter()
            .map(|f| {
                if *f == COMPLETE_MARKER {
                    Err(CorpusLineError::MisplacedMarker)
                } else {
                    f.parse::<Move>().map_err(|_| CorpusLineError::BadMove(f.to_string()))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(CorpusGame { moves, complete })
    }
}

impl fmt::Display for CorpusGame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for m in &self.moves {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{m}")?;
            first = false;
        }
        if self.complete {
            if !first {
                f.write_str(" ")?;
            }
            f.write_str(COMPLETE_MARKER)?;
        }
        Ok(())
    }
}
