//! The attack loop: warmup selection, alternating adversary and model
//! moves, success detection and error classification.

use std::collections::HashSet;
use std::fmt;
use std::io;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use soundcheck_rules::{BoardState, Color, Move, PieceKind, TerminalKind};
use thiserror::Error;

use crate::adversaries::{self, AdversaryError, AdversaryKind, DEFAULT_BATCH_SIZE};
use crate::gateway::{decode_move, CountingModel, DecodingPolicy, GatewayError, ModelOutput, ProbeBoard, SequenceModel};
use crate::notation::{encode_game, TokenId};
use crate::worldmodel::{read_corpus_lines, replay_corpus_line, GameCursor};

pub const DEFAULT_MAX_PLIES: usize = 600;
pub const DEFAULT_WARMUP_PLIES: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("only {found} distinct warmup prefixes available, {wanted} requested")]
    InsufficientPrefixes { wanted: usize, found: usize },
    #[error("warmup length must be an even number of plies so that White moves next, got {0}")]
    OddWarmup(usize),
    #[error("warmup {id} is not a valid prefix: {reason}")]
    InvalidWarmup { id: usize, reason: String },
    #[error("reading corpus: {0}")]
    Io(#[from] io::Error),
    #[error("the {0} adversary needs a model with the probe capability")]
    MissingProbe(AdversaryKind),
    #[error("adversary {kind} produced illegal move {mv} in warmup {id}")]
    AdversaryIllegal { kind: AdversaryKind, mv: Move, id: usize },
    #[error("invalid warmup spec `{0}` (expected corpus:FILE:N:PLIES or random:N:PLIES:SEED)")]
    Spec(String),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq, Eq, Debug)]
pub enum WarmupSource {
    /// The first `plies` moves of corpus games, in corpus order.
    CorpusPrefix { corpus: PathBuf, n: usize, plies: usize },
    /// Uniformly random legal moves.
    RandomValid { n: usize, plies: usize, seed: u64 },
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WarmupSpec {
    pub source: WarmupSource,
    pub unique: bool,
}

impl WarmupSpec {
    pub fn plies(&self) -> usize {
        match self.source {
            WarmupSource::CorpusPrefix { plies, .. } | WarmupSource::RandomValid { plies, .. } => plies,
        }
    }

    pub fn count(&self) -> usize {
        match self.source {
            WarmupSource::CorpusPrefix { n, .. } | WarmupSource::RandomValid { n, .. } => n,
        }
    }
}

impl FromStr for WarmupSpec {
    type Err = HarnessError;

    /// `corpus:FILE:N:PLIES` or `random:N:PLIES:SEED`. FILE may contain colons.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Spec(s.to_string());
        let source = if let Some(rest) = s.strip_prefix("corpus:") {
            let mut parts = rest.rsplitn(3, ':');
            let plies = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let n = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let corpus = parts.next().filter(|f| !f.is_empty()).ok_or_else(bad)?;
            WarmupSource::CorpusPrefix { corpus: corpus.into(), n, plies }
        } else if let Some(rest) = s.strip_prefix("random:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let [n, plies, seed] = parts.as_slice() else { return Err(bad()) };
            WarmupSource::RandomValid {
                n: n.parse().map_err(|_| bad())?,
                plies: plies.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
            }
        } else {
            return Err(bad());
        };
        Ok(WarmupSpec { source, unique: true })
    }
}

const RANDOM_ATTEMPTS_PER_PREFIX: usize = 50;

/// Warmup prefixes of exactly the requested length, ending with White to
/// move in a position that is not over.
pub fn sample_warmups(spec: &WarmupSpec) -> Result<Vec<Vec<TokenId>>> {
    let plies = spec.plies();
    if !plies.is_multiple_of(2) {
        return Err(HarnessError::OddWarmup(plies));
    }
    let wanted = spec.count();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(wanted);
    let mut keep = |moves: &[Move], out: &mut Vec<Vec<TokenId>>| {
        if !spec.unique || seen.insert(moves.to_vec()) {
            out.push(encode_game(moves, false));
        }
    };
    match &spec.source {
        WarmupSource::CorpusPrefix { corpus, .. } => {
            for (_, line) in read_corpus_lines(corpus)? {
                if out.len() == wanted {
                    break;
                }
                let Ok((game, _)) = replay_corpus_line(&line) else { continue };
                if game.moves.len() < plies {
                    continue;
                }
                let prefix = &game.moves[..plies];
                let c = GameCursor::from_moves(prefix).expect("prefix of a valid game");
                if !c.terminal_kind().is_terminal() {
                    keep(prefix, &mut out);
                }
            }
        }
        WarmupSource::RandomValid { seed, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut attempts = 0;
            while out.len() < wanted && attempts < wanted.saturating_mul(RANDOM_ATTEMPTS_PER_PREFIX).max(1) {
                attempts += 1;
                let mut c = GameCursor::new();
                while c.plies() < plies {
                    let w = c.continuations().expect("boundary");
                    let Some(&m) = w.moves.choose(&mut rng) else { break };
                    c.push_move(m).expect("legal move");
                }
                if c.plies() == plies && !c.terminal_kind().is_terminal() {
                    keep(c.moves(), &mut out);
                }
            }
        }
    }
    if out.len() < wanted {
        return Err(HarnessError::InsufficientPrefixes { wanted, found: out.len() });
    }
    Ok(out)
}

#[derive(Clone, PartialEq, Debug)]
pub struct EpisodeConfig {
    pub adversary: AdversaryKind,
    pub policy: DecodingPolicy,
    /// Plies played after the warmup before the episode is cut off.
    pub max_plies: usize,
    /// Master seed; episode streams derive from it.
    pub seed: u64,
    /// Maximum model queries per episode.
    pub query_budget: Option<u64>,
    pub batch_size: usize,
}

impl EpisodeConfig {
    pub fn new(adversary: AdversaryKind, policy: DecodingPolicy) -> Self {
        EpisodeConfig {
            adversary,
            policy,
            max_plies: DEFAULT_MAX_PLIES,
            seed: policy.seed,
            query_budget: None,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// The seven failure classes, numbered 1 to 7.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    NonexistentPiece,
    OpponentsPiece,
    ImmovablePiece,
    InvalidDirection,
    ErroneousMove,
    StructuralError,
    IncorrectEndPrediction,
}

impl ErrorType {
    pub const ALL: [ErrorType; 7] = [
        ErrorType::NonexistentPiece,
        ErrorType::OpponentsPiece,
        ErrorType::ImmovablePiece,
        ErrorType::InvalidDirection,
        ErrorType::ErroneousMove,
        ErrorType::StructuralError,
        ErrorType::IncorrectEndPrediction,
    ];

    pub fn code(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorType::NonexistentPiece => "nonexistent_piece",
            ErrorType::OpponentsPiece => "opponents_piece",
            ErrorType::ImmovablePiece => "immovable_piece",
            ErrorType::InvalidDirection => "invalid_direction",
            ErrorType::ErroneousMove => "erroneous_move",
            ErrorType::StructuralError => "structural_error",
            ErrorType::IncorrectEndPrediction => "incorrect_end_prediction",
        }
    }

    /// Whether the failure is an illegal move rather than a wrong EOS.
    pub fn is_illegal_move(self) -> bool {
        self != ErrorType::IncorrectEndPrediction
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("the output is a legal continuation, not an error")]
pub struct NotAViolation;

fn direction_possible(kind: PieceKind, color: Color, m: Move) -> bool {
    let df = m.to.file() as i32 - m.from.file() as i32;
    let dr = m.to.rank() as i32 - m.from.rank() as i32;
    let (af, ar) = (df.abs(), dr.abs());
    match kind {
        PieceKind::Rook => df == 0 || dr == 0,
        PieceKind::Bishop => af == ar,
        PieceKind::Queen => df == 0 || dr == 0 || af == ar,
        PieceKind::Knight => (af == 1 && ar == 2) || (af == 2 && ar == 1),
        PieceKind::King => {
            let home = match color {
                Color::White => 0,
                Color::Black => 7,
            };
            af.max(ar) == 1 || (dr == 0 && af == 2 && m.from.file() == 4 && m.from.rank() == home)
        }
        PieceKind::Pawn => {
            let fwd = match color {
                Color::White => 1,
                Color::Black => -1,
            };
            // Only backward or sideways motion is a wrong direction; overlong
            // forward steps are merely erroneous.
            dr * fwd > 0 && af <= 1
        }
    }
}

/// Classifies a rule violation at `state`, the position the model was asked
/// to move in.
///
/// Ladder: structural fault, then premature EOS, then from-square empty,
/// opponent's piece, own piece without legal moves, direction impossible
/// for the piece, and finally any other illegal move.
pub fn classify_error(state: &BoardState, output: &ModelOutput) -> Result<ErrorType, NotAViolation> {
    let terminal = state.terminal_kind().is_terminal();
    match *output {
        ModelOutput::Fault(_) => Ok(ErrorType::StructuralError),
        ModelOutput::Eos if terminal => Err(NotAViolation),
        ModelOutput::Eos => Ok(ErrorType::IncorrectEndPrediction),
        ModelOutput::Move(m) => {
            let legal = state.legal_moves();
            if !terminal && legal.contains(&m) {
                return Err(NotAViolation);
            }
            let Some(piece) = state.piece_at(m.from) else {
                return Ok(ErrorType::NonexistentPiece);
            };
            if piece.color != state.side_to_move() {
                return Ok(ErrorType::OpponentsPiece);
            }
            if !legal.iter().any(|l| l.from == m.from) {
                return Ok(ErrorType::ImmovablePiece);
            }
            if !direction_possible(piece.kind, piece.color, m) {
                return Ok(ErrorType::InvalidDirection);
            }
            Ok(ErrorType::ErroneousMove)
        }
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerminalReason {
    ModelError,
    GameOver { terminal: TerminalKind },
    PlyCap,
    QueryFailure { message: String },
}

/// The record of one attack episode.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub warmup_id: usize,
    pub repetition: usize,
    pub adversary: String,
    pub policy: String,
    pub warmup_plies: usize,
    pub success: bool,
    /// Ply number, counted from the start of the game, of the failing prediction.
    pub failure_ply: Option<usize>,
    pub error_type: Option<ErrorType>,
    pub offending_tokens: Option<Vec<TokenId>>,
    /// The offending move as UCI, when the output parsed as a move.
    pub offending_move: Option<Move>,
    /// Kind of the own piece the model tried to move (types 3 to 5).
    pub offending_piece: Option<PieceKind>,
    pub failure_fen: Option<String>,
    /// The model's probe reading at the failure position, if it has a probe.
    pub probe_snapshot: Option<ProbeBoard>,
    /// Every move played, warmup included.
    pub trace: Vec<Move>,
    /// Plies played after the warmup.
    pub episode_plies: usize,
    pub terminal_reason: TerminalReason,
    /// At game over: whether the model's top token was EOS.
    pub end_recognized: Option<bool>,
    pub adversary_moves: usize,
    pub queries: u64,
    pub wall_time: f64,
}

impl AttackOutcome {
    /// Ply offset of the failure from the end of the warmup.
    pub fn failure_offset(&self) -> Option<usize> {
        self.failure_ply.map(|p| p - self.warmup_plies)
    }

    /// Total game length in plies, warmup included.
    pub fn sequence_length(&self) -> usize {
        self.trace.len()
    }

    /// The outcome without wall-clock timing, for replay comparisons.
    pub fn untimed(&self) -> AttackOutcome {
        AttackOutcome { wall_time: 0.0, ..self.clone() }
    }
}

/// Per-episode RNG seed from (master seed, warmup id, repetition).
pub fn episode_seed(master: u64, warmup_id: usize, repetition: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let a = mix(master.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix(a ^ (warmup_id as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    mix(b ^ (repetition as u64).wrapping_mul(0xa076_1d64_78bd_642f))
}

struct Failure {
    output: ModelOutput,
    raw: Vec<TokenId>,
}

/// Plays one episode from `warmup`. The adversary moves for White and the
/// model for Black (both sides under self-play) until the model errs, the
/// game ends, the ply cap is hit, or a query fails.
pub fn run_episode(
    model: &dyn SequenceModel,
    warmup_id: usize,
    warmup: &[TokenId],
    cfg: &EpisodeConfig,
    repetition: usize,
) -> Result<AttackOutcome> {
    let started = Instant::now();
    let mut cursor = GameCursor::from_tokens(warmup)
        .map_err(|(i, e)| HarnessError::InvalidWarmup { id: warmup_id, reason: format!("token {i}: {e}") })?;
    if !cursor.at_boundary() || cursor.board().side_to_move() != Color::White {
        return Err(HarnessError::InvalidWarmup { id: warmup_id, reason: "White must be to move".into() });
    }
    let warmup_plies = cursor.plies();
    let counting = CountingModel::new(model, cfg.query_budget);
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, warmup_id, repetition));
    let mut adversary_moves = 0;
    let mut failure = None;
    let mut end_recognized = None;

    let reason = loop {
        let terminal = cursor.terminal_kind();
        if terminal.is_terminal() {
            end_recognized = counting.next_token_dist(cursor.tokens()).ok().map(|d| d.argmax() == TokenId::EOS);
            break TerminalReason::GameOver { terminal };
        }
        if cursor.plies() - warmup_plies >= cfg.max_plies {
            break TerminalReason::PlyCap;
        }
        let model_turn = cfg.adversary == AdversaryKind::SelfPlay || cursor.board().side_to_move() == Color::Black;
        if !model_turn {
            match adversaries::select_adversary_move(cfg.adversary, &counting, &cursor, &mut rng, cfg.batch_size) {
                Ok(m) => {
                    cursor.push_move(m).map_err(|_| HarnessError::AdversaryIllegal {
                        kind: cfg.adversary,
                        mv: m,
                        id: warmup_id,
                    })?;
                    adversary_moves += 1;
                }
                Err(AdversaryError::Gateway(GatewayError::CapabilityMissing(_))) => {
                    return Err(HarnessError::MissingProbe(cfg.adversary));
                }
                Err(e) => break TerminalReason::QueryFailure { message: e.to_string() },
            }
            continue;
        }
        let decoded = match decode_move(&counting, cursor.tokens(), &cfg.policy, &mut rng) {
            Ok(d) => d,
            Err(e) => break TerminalReason::QueryFailure { message: e.to_string() },
        };
        if let ModelOutput::Move(m) = decoded.output {
            if cursor.push_move(m).is_ok() {
                continue;
            }
        }
        failure = Some(Failure { output: decoded.output, raw: decoded.raw });
        break TerminalReason::ModelError;
    };

    let mut outcome = AttackOutcome {
        warmup_id,
        repetition,
        adversary: cfg.adversary.to_string(),
        policy: cfg.policy.to_string(),
        warmup_plies,
        success: failure.is_some(),
        failure_ply: None,
        error_type: None,
        offending_tokens: None,
        offending_move: None,
        offending_piece: None,
        failure_fen: None,
        probe_snapshot: None,
        trace: cursor.moves().to_vec(),
        episode_plies: cursor.plies() - warmup_plies,
        terminal_reason: reason,
        end_recognized,
        adversary_moves,
        queries: counting.queries(),
        wall_time: 0.0,
    };
    if let Some(f) = failure {
        let board = cursor.board();
        let error = classify_error(board, &f.output).expect("a failed prediction is a rule violation");
        outcome.failure_ply = Some(cursor.plies() + 1);
        outcome.error_type = Some(error);
        outcome.offending_tokens = Some(f.raw);
        if let ModelOutput::Move(m) = f.output {
            outcome.offending_move = Some(m);
            if matches!(error, ErrorType::ImmovablePiece | ErrorType::InvalidDirection | ErrorType::ErroneousMove) {
                outcome.offending_piece = board.piece_at(m.from).map(|p| p.kind);
            }
        }
        outcome.failure_fen = Some(board.to_fen());
        if model.capabilities().probe {
            outcome.probe_snapshot = model.probe_board(cursor.tokens()).ok();
        }
    }
    outcome.wall_time = started.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Runs every warmup `repetitions` times in parallel. Outcomes are ordered
/// by (repetition, warmup id) and depend only on the configuration.
pub fn run_campaign(
    model: &dyn SequenceModel,
    warmups: &[Vec<TokenId>],
    cfg: &EpisodeConfig,
    repetitions: usize,
) -> Result<Vec<AttackOutcome>> {
    if cfg.adversary.needs_probe() && !model.capabilities().probe {
        return Err(HarnessError::MissingProbe(cfg.adversary));
    }
    let jobs: Vec<(usize, usize)> =
        (0..repetitions.max(1)).flat_map(|r| (0..warmups.len()).map(move |w| (r, w))).collect();
    jobs.par_iter().map(|&(r, w)| run_episode(model, w, &warmups[w], cfg, r)).collect()
}
