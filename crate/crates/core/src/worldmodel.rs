//! Token-level world model: sequence validity, legal continuations, legal
//! next-token sets and the uniform legal-token supervision targets.

use std::fmt;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use soundcheck_rules::{BoardState, Move, MoveList, Square, TerminalKind};
use thiserror::Error;

use crate::notation::{self, CorpusGame, TokenId, TokenKind, VOCAB_SIZE};

/// A set of token ids, stored as a 71-bit mask.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TokenSet(u128);

impl TokenSet {
    pub const EMPTY: TokenSet = TokenSet(0);

    #[inline]
    pub fn insert(&mut self, t: TokenId) {
        self.0 |= 1u128 << t.index();
    }

    #[inline]
    pub fn contains(self, t: TokenId) -> bool {
        self.0 & (1u128 << t.index()) != 0
    }

    #[inline]
    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    #[inline]
    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in ascending id order.
    pub fn iter(self) -> impl Iterator<Item = TokenId> {
        TokenId::all().filter(move |&t| self.contains(t))
    }
}

impl FromIterator<TokenId> for TokenSet {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        let mut s = TokenSet::EMPTY;
        for t in iter {
            s.insert(t);
        }
        s
    }
}

impl fmt::Debug for TokenSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|t| t.to_string())).finish()
    }
}

/// Where the cursor stands inside the move grammar.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    ExpectFrom,
    ExpectTo { from: Square },
    /// Both squares of a promotion are in; only a promotion piece may follow.
    ExpectPromotion { from: Square, to: Square },
    /// EOS has been consumed.
    Ended,
}

/// Why a token is not a valid continuation.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Error, Serialize, Deserialize)]
pub enum SequenceError {
    #[error("sequence does not start with BOS")]
    MissingBos,
    #[error("BOS inside the sequence")]
    UnexpectedBos,
    #[error("PAD inside the sequence")]
    Pad,
    #[error("promotion token where a from-square was expected")]
    PromotionOutOfPlace,
    #[error("from-square holds no piece with a legal move")]
    NotMovable,
    #[error("non-square token where a destination was expected")]
    ExpectedDestination,
    #[error("destination not reachable by a legal move")]
    UnreachableDestination,
    #[error("promotion token for an illegal promotion")]
    IllegalPromotion,
    #[error("promotion required but another token followed")]
    MissingPromotion,
    #[error("EOS while the game is not over")]
    EosNotTerminal,
    #[error("token after EOS")]
    AfterEos,
}

/// Legal actions at a move boundary.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LegalContinuations {
    pub moves: Vec<Move>,
    pub eos_legal: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Error)]
#[error("cursor is in the middle of a move")]
pub struct MisalignedCursor;

/// A validated token prefix together with the board it leads to.
///
/// Cursors are values: [`GameCursor::advanced`] returns a new cursor and
/// [`GameCursor::push`] leaves the cursor untouched on error.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct GameCursor {
    tokens: Vec<TokenId>,
    board: BoardState,
    moves: Vec<Move>,
    phase: Phase,
    last_capture: bool,
}

impl Default for GameCursor {
    fn default() -> Self {
        GameCursor::new()
    }
}

impl GameCursor {
    /// The cursor after BOS at the initial position.
    pub fn new() -> GameCursor {
        GameCursor {
            tokens: vec![TokenId::BOS],
            board: BoardState::initial(),
            moves: Vec::new(),
            phase: Phase::ExpectFrom,
            last_capture: false,
        }
    }

    /// A cursor for a game that starts from `board` instead of the initial
    /// position. Its token prefix is just BOS.
    pub fn from_position(board: BoardState) -> GameCursor {
        GameCursor { board, ..GameCursor::new() }
    }

    /// Replays a token sequence, which must start with BOS.
    pub fn from_tokens(tokens: &[TokenId]) -> Result<GameCursor, (usize, SequenceError)> {
        if tokens.first() != Some(&TokenId::BOS) {
            return Err((0, SequenceError::MissingBos));
        }
        let mut c = GameCursor::new();
        for (i, &t) in tokens.iter().enumerate().skip(1) {
            c.push(t).map_err(|e| (i, e))?;
        }
        Ok(c)
    }

    pub fn from_moves(moves: &[Move]) -> Result<GameCursor, (usize, SequenceError)> {
        let mut c = GameCursor::new();
        for (i, &m) in moves.iter().enumerate() {
            c.push_move(m).map_err(|e| (i, e))?;
        }
        Ok(c)
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn board(&self) -> &BoardState {
        &self.board
    }

    pub fn moves(&self) -> &[Move] {
        &self.moves
    }

    pub fn plies(&self) -> usize {
        self.moves.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn at_boundary(&self) -> bool {
        self.phase == Phase::ExpectFrom
    }

    /// Whether the most recent move captured a piece.
    pub fn last_move_was_capture(&self) -> bool {
        self.last_capture
    }

    pub fn terminal_kind(&self) -> TerminalKind {
        self.board.terminal_kind()
    }

    /// Moves playable now: none once the game is over by rule.
    fn playable_moves(&self) -> MoveList {
        if self.board.terminal_kind().is_terminal() {
            MoveList::new()
        } else {
            self.board.legal_moves()
        }
    }

    fn apply(&mut self, m: Move) {
        let captured = self.board.piece_at(m.to).is_some()
            || (Some(m.to) == self.board.en_passant()
                && self.board.piece_at(m.from).map(|p| p.kind) == Some(soundcheck_rules::PieceKind::Pawn));
        self.board = self.board.play_unchecked(m);
        self.moves.push(m);
        self.last_capture = captured;
        self.phase = Phase::ExpectFrom;
    }

    /// Consumes one token if it is a legal continuation.
    pub fn push(&mut self, t: TokenId) -> Result<(), SequenceError> {
        match self.phase {
            Phase::Ended => return Err(SequenceError::AfterEos),
            Phase::ExpectFrom => match t.kind() {
                TokenKind::Eos => {
                    if !self.board.terminal_kind().is_terminal() {
                        return Err(SequenceError::EosNotTerminal);
                    }
                    self.phase = Phase::Ended;
                }
                TokenKind::Bos => return Err(SequenceError::UnexpectedBos),
                TokenKind::Pad => return Err(SequenceError::Pad),
                TokenKind::Promotion(_) => return Err(SequenceError::PromotionOutOfPlace),
                TokenKind::Square(from) => {
                    if !self.playable_moves().iter().any(|m| m.from == from) {
                        return Err(SequenceError::NotMovable);
                    }
                    self.phase = Phase::ExpectTo { from };
                }
            },
            Phase::ExpectTo { from } => {
                let Some(to) = t.as_square() else {
                    return Err(match t.kind() {
                        TokenKind::Pad => SequenceError::Pad,
                        TokenKind::Bos => SequenceError::UnexpectedBos,
                        _ => SequenceError::ExpectedDestination,
                    });
                };
                let moves = self.board.legal_moves();
                let mut candidates = moves.iter().filter(|m| m.from == from && m.to == to);
                match candidates.next() {
                    None => return Err(SequenceError::UnreachableDestination),
                    Some(m) if m.promotion.is_some() => self.phase = Phase::ExpectPromotion { from, to },
                    Some(&m) => self.apply(m),
                }
            }
            Phase::ExpectPromotion { from, to } => {
                let Some(p) = t.as_promotion() else {
                    return Err(SequenceError::MissingPromotion);
                };
                let m = Move::with_promotion(from, to, p);
                if !self.board.is_legal(m) {
                    return Err(SequenceError::IllegalPromotion);
                }
                self.apply(m);
            }
        }
        self.tokens.push(t);
        Ok(())
    }

    pub fn advanced(&self, t: TokenId) -> Result<GameCursor, SequenceError> {
        let mut c = self.clone();
        c.push(t)?;
        Ok(c)
    }

    /// Plays a whole move from a move boundary.
    pub fn push_move(&mut self, m: Move) -> Result<(), SequenceError> {
        if self.phase != Phase::ExpectFrom {
            return Err(match self.phase {
                Phase::Ended => SequenceError::AfterEos,
                _ => SequenceError::ExpectedDestination,
            });
        }
        let playable = self.playable_moves();
        if !playable.contains(&m) {
            return Err(if !playable.iter().any(|p| p.from == m.from) {
                SequenceError::NotMovable
            } else if !playable.iter().any(|p| p.from == m.from && p.to == m.to) {
                SequenceError::UnreachableDestination
            } else if m.promotion.is_some() {
                SequenceError::IllegalPromotion
            } else {
                SequenceError::MissingPromotion
            });
        }
        self.tokens.extend(notation::encode_move(m));
        self.apply(m);
        Ok(())
    }

    pub fn with_move(&self, m: Move) -> Result<GameCursor, SequenceError> {
        let mut c = self.clone();
        c.push_move(m)?;
        Ok(c)
    }

    /// Appends EOS; the position must be terminal.
    pub fn push_eos(&mut self) -> Result<(), SequenceError> {
        self.push(TokenId::EOS)
    }

    /// The legal actions W(s) at a move boundary.
    pub fn continuations(&self) -> Result<LegalContinuations, MisalignedCursor> {
        if self.phase != Phase::ExpectFrom {
            return Err(MisalignedCursor);
        }
        let eos_legal = self.board.terminal_kind().is_terminal();
        Ok(LegalContinuations { moves: self.playable_moves().to_vec(), eos_legal })
    }

    /// Every token that keeps the sequence valid.
    pub fn legal_token_set(&self) -> TokenSet {
        let mut set = TokenSet::EMPTY;
        match self.phase {
            Phase::Ended => {}
            Phase::ExpectFrom => {
                if self.board.terminal_kind().is_terminal() {
                    set.insert(TokenId::EOS);
                } else {
                    for m in self.board.legal_moves() {
                        set.insert(TokenId::square(m.from));
                    }
                }
            }
            Phase::ExpectTo { from } => {
                for m in self.board.legal_moves().iter().filter(|m| m.from == from) {
                    set.insert(TokenId::square(m.to));
                }
            }
            Phase::ExpectPromotion { from, to } => {
                for m in self.board.legal_moves().iter().filter(|m| m.from == from && m.to == to) {
                    if let Some(p) = m.promotion {
                        set.insert(TokenId::promotion(p));
                    }
                }
            }
        }
        set
    }

    /// Uniform distribution over the legal next tokens.
    pub fn pd_targets(&self) -> TokenTargets {
        TokenTargets::uniform(self.legal_token_set())
    }
}

/// A next-token target distribution over the vocabulary.
#[derive(Clone, PartialEq, Debug)]
pub struct TokenTargets {
    pub probs: [f64; VOCAB_SIZE],
}

impl TokenTargets {
    pub fn uniform(support: TokenSet) -> TokenTargets {
        assert!(!support.is_empty(), "legal continuation set is never empty before EOS");
        let mass = 1.0 / support.len() as f64;
        let mut probs = [0.0; VOCAB_SIZE];
        for t in support.iter() {
            probs[t.index()] = mass;
        }
        TokenTargets { probs }
    }

    pub fn support(&self) -> TokenSet {
        TokenId::all().filter(|t| self.probs[t.index()] > 0.0).collect()
    }
}

/// Result of walking a sequence through the world model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Validation {
    pub valid: bool,
    pub fault_index: Option<usize>,
    pub fault: Option<SequenceError>,
}

/// Reports the first token that is not a valid continuation.
pub fn validate_sequence(tokens: &[TokenId]) -> Validation {
    match GameCursor::from_tokens(tokens) {
        Ok(_) => Validation { valid: true, fault_index: None, fault: None },
        Err((i, e)) => Validation { valid: false, fault_index: Some(i), fault: Some(e) },
    }
}

/// A corpus line that could not be used.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct LineIssue {
    /// Zero-based line index in the file.
    pub line: usize,
    pub message: String,
}

/// Parses and replays one corpus line.
pub fn replay_corpus_line(line: &str) -> Result<(CorpusGame, GameCursor), String> {
    let game: CorpusGame = line.parse().map_err(|e: notation::CorpusLineError| e.to_string())?;
    let mut cursor = GameCursor::from_moves(&game.moves).map_err(|(i, e)| format!("move {}: {e}", i + 1))?;
    if game.complete {
        cursor.push_eos().map_err(|e| e.to_string())?;
    }
    Ok((game, cursor))
}

/// Reads a corpus file into lines, keeping blank lines out but preserving
/// line indices.
pub fn read_corpus_lines(path: &Path) -> io::Result<Vec<(usize, String)>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i, l.to_string()))
        .collect())
}

#[derive(Clone, PartialEq, Eq, Debug, Default)]
pub struct ExportSummary {
    pub rows: usize,
    pub games: usize,
    pub skipped: Vec<LineIssue>,
}

/// One supervision record: uniform mass over `support` for the token that
/// follows position `token_idx` of game `line_idx`.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct PdRow {
    pub line_idx: usize,
    pub token_idx: usize,
    pub support: TokenSet,
}

impl fmt::Display for PdRow {
    /// `line_idx \t token_idx \t k \t id_1,...,id_k`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}\t", self.line_idx, self.token_idx, self.support.len())?;
        for (i, t) in self.support.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", t.id())?;
        }
        Ok(())
    }
}

/// Supervision rows for one game: one per context position, excluding the
/// final token.
pub fn pd_rows_for_game(line_idx: usize, game: &CorpusGame) -> Result<Vec<PdRow>, String> {
    let tokens = game.tokens();
    let mut cursor = GameCursor::new();
    let mut rows = Vec::with_capacity(tokens.len().saturating_sub(1));
    for (i, &next) in tokens.iter().enumerate().skip(1) {
        rows.push(PdRow { line_idx, token_idx: i - 1, support: cursor.legal_token_set() });
        cursor.push(next).map_err(|e| format!("token {i}: {e}"))?;
    }
    Ok(rows)
}

/// Builds supervision rows for every line; invalid lines are reported and skipped.
pub fn pd_rows(lines: &[(usize, String)]) -> (Vec<PdRow>, ExportSummary) {
    let results: Vec<Result<Vec<PdRow>, LineIssue>> = lines
        .par_iter()
        .map(|(line, text)| {
            let game: CorpusGame =
                text.parse().map_err(|e: notation::CorpusLineError| LineIssue { line: *line, message: e.to_string() })?;
            pd_rows_for_game(*line, &game).map_err(|message| LineIssue { line: *line, message })
        })
        .collect();
    let mut rows = Vec::new();
    let mut summary = ExportSummary::default();
    for r in results {
        match r {
            Ok(game_rows) => {
                summary.games += 1;
                rows.extend(game_rows);
            }
            Err(issue) => summary.skipped.push(issue),
        }
    }
    rows.sort_by_key(|r| (r.line_idx, r.token_idx));
    summary.rows = rows.len();
    (rows, summary)
}

/// Writes the sparse supervision file for a corpus.
pub fn export_pd_corpus(corpus: &Path, out: &Path) -> io::Result<ExportSummary> {
    let lines = read_corpus_lines(corpus)?;
    let (rows, summary) = pd_rows(&lines);
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    for row in &rows {
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(summary)
}
