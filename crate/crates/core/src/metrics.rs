//! Campaign aggregation and model diagnostics. Lengths are in plies.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use soundcheck_rules::{BoardState, CastlingRights, Color, Move, Piece, PieceKind, Position, Square};
use thiserror::Error;

use crate::gateway::{
    action_distribution, decode_move, move_probabilities, ActionQuery, DecodingPolicy, GatewayError, ModelOutput,
    ProbeBoard, SequenceModel,
};
use crate::harness::{episode_seed, AttackOutcome, ErrorType, TerminalReason};
use crate::notation::TokenId;
use crate::worldmodel::{replay_corpus_line, GameCursor, MisalignedCursor};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no outcomes to report on")]
    EmptyCampaign,
    #[error("the corpus holds no games")]
    EmptyCorpus,
    #[error("corpus line {line}: {message}")]
    BadLine { line: usize, message: String },
    #[error("corpus line {line}: the game does not end by rule")]
    NotTerminal { line: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Misaligned(#[from] MisalignedCursor),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Aggregate view of a campaign.
#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct CampaignReport {
    pub episodes: usize,
    pub successes: usize,
    pub asr: f64,
    /// (plies after warmup, cumulative ASR) at every ply where a success occurred.
    pub asr_by_ply: Vec<(usize, f64)>,
    /// Mean game length in plies, warmup included, over all episodes.
    pub mean_seq_len: f64,
    /// Successes per error type, in type order 1..=7.
    pub error_type_counts: [usize; 7],
    /// Fractions of all episodes that failed by an illegal move and by a wrong EOS.
    pub illegal_move_rate: f64,
    pub end_prediction_rate: f64,
    /// Piece kinds behind type 3 to 5 errors, in pawn..king order.
    pub piece_type_counts: [usize; 6],
    pub game_over: usize,
    pub ply_cap: usize,
    pub query_failures: usize,
    /// Among episodes reaching game over, the fraction where the model's top token was EOS.
    pub end_recognition: Option<f64>,
    pub mean_seconds: f64,
    pub mean_queries: f64,
}

/// Folds outcomes into a report. Every number is a function of the multiset
/// of outcomes, so the order of `outcomes` does not matter.
pub fn build_report(outcomes: &[AttackOutcome]) -> Result<CampaignReport> {
    let n = outcomes.len();
    if n == 0 {
        return Err(MetricsError::EmptyCampaign);
    }
    let nf = n as f64;
    let mut error_type_counts = [0; 7];
    let mut piece_type_counts = [0; 6];
    let mut offsets: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut game_over, mut ply_cap, mut query_failures) = (0, 0, 0);
    let (mut ended, mut recognized) = (0usize, 0usize);
    for o in outcomes {
        if let Some(e) = o.error_type {
            error_type_counts[e as usize] += 1;
        }
        if let Some(k) = o.offending_piece {
            piece_type_counts[k.index()] += 1;
        }
        if let Some(off) = o.failure_offset() {
            *offsets.entry(off).or_default() += 1;
        }
        match o.terminal_reason {
            TerminalReason::GameOver { .. } => {
                game_over += 1;
                if let Some(r) = o.end_recognized {
                    ended += 1;
                    recognized += r as usize;
                }
            }
            TerminalReason::PlyCap => ply_cap += 1,
            TerminalReason::QueryFailure { .. } => query_failures += 1,
            TerminalReason::ModelError => {}
        }
    }
    let successes = outcomes.iter().filter(|o| o.success).count();
    let mut cum = 0;
    let asr_by_ply = offsets
        .into_iter()
        .map(|(ply, k)| {
            cum += k;
            (ply, cum as f64 / nf)
        })
        .collect();
    let end = error_type_counts[ErrorType::IncorrectEndPrediction as usize];
    let total_len: usize = outcomes.iter().map(|o| o.sequence_length()).sum();
    let total_queries: u64 = outcomes.iter().map(|o| o.queries).sum();
    let mut seconds: Vec<f64> = outcomes.iter().map(|o| o.wall_time).collect();
    seconds.sort_by(f64::total_cmp);
    Ok(CampaignReport {
        episodes: n,
        successes,
        asr: successes as f64 / nf,
        asr_by_ply,
        mean_seq_len: total_len as f64 / nf,
        error_type_counts,
        illegal_move_rate: (successes - end) as f64 / nf,
        end_prediction_rate: end as f64 / nf,
        piece_type_counts,
        game_over,
        ply_cap,
        query_failures,
        end_recognition: (ended > 0).then(|| recognized as f64 / ended as f64),
        mean_seconds: seconds.iter().sum::<f64>() / nf,
        mean_queries: total_queries as f64 / nf,
    })
}

/// Whether a cumulative curve never decreases.
pub fn is_monotone(curve: &[(usize, f64)]) -> bool {
    curve.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1)
}

/// One element of an action set: a move or the end of the game.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum Action {
    Move(Move),
    Eos,
}

/// Intersection over union; two empty sets agree perfectly.
pub fn iou(a: &HashSet<Action>, b: &HashSet<Action>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

/// The position read off a probe: argmax placement with the true side to
/// move, castling rights where king and rook still stand at home, and the
/// true en-passant square when it stays consistent.
pub fn probe_position(pb: &ProbeBoard, truth: &BoardState) -> Position {
    let placement = pb.argmax_placement();
    let at = |sq: Square, color: Color, kind: PieceKind| placement[sq.index()] == Some(Piece::new(color, kind));
    let mut bits = 0;
    for (flag, color, king, rook) in [
        (CastlingRights::WHITE_KING, Color::White, Square::E1, Square::H1),
        (CastlingRights::WHITE_QUEEN, Color::White, Square::E1, Square::A1),
        (CastlingRights::BLACK_KING, Color::Black, Square::E8, Square::H8),
        (CastlingRights::BLACK_QUEEN, Color::Black, Square::E8, Square::A8),
    ] {
        if truth.castling_rights().has(flag) && at(king, color, PieceKind::King) && at(rook, color, PieceKind::Rook) {
            bits |= flag;
        }
    }
    let castling = CastlingRights::from_bits(bits);
    let side = truth.side_to_move();
    let with_ep = Position::from_placement(&placement, side, castling, truth.en_passant());
    if truth.en_passant().is_some() && with_ep.validate().is_err() {
        Position::from_placement(&placement, side, castling, None)
    } else {
        with_ep
    }
}

/// Legal actions on the probe's board; pseudo-legal moves when that board
/// breaks the position invariants (a missing king, say).
pub fn probe_actions(pb: &ProbeBoard, truth: &BoardState) -> HashSet<Action> {
    let pos = probe_position(pb, truth);
    match BoardState::from_position(pos) {
        Ok(state) if state.terminal_kind().is_terminal() => HashSet::from([Action::Eos]),
        Ok(state) => state.legal_moves().iter().map(|&m| Action::Move(m)).collect(),
        Err(_) => pos.pseudo_legal_moves().into_iter().map(Action::Move).collect(),
    }
}

#[derive(Clone, Copy, PartialEq, Debug, Serialize)]
pub struct IouAgreement {
    /// True world model vs the model's ε-thresholded actions.
    pub iou_wm: f64,
    /// True world model vs the probe board's legal actions.
    pub iou_wb: Option<f64>,
    /// Model actions vs probe board actions.
    pub iou_mb: Option<f64>,
}

pub fn true_actions(cursor: &GameCursor) -> Result<HashSet<Action>> {
    let w = cursor.continuations()?;
    let mut set: HashSet<Action> = w.moves.into_iter().map(Action::Move).collect();
    if w.eos_legal {
        set.insert(Action::Eos);
    }
    Ok(set)
}

/// Actions whose action-level probability is at least `epsilon`.
pub fn model_actions(model: &dyn SequenceModel, tokens: &[TokenId], epsilon: f64) -> Result<HashSet<Action>> {
    let query = ActionQuery { min_mass: epsilon, ..ActionQuery::default() };
    let ad = action_distribution(model, tokens, &query)?;
    let mut set: HashSet<Action> = ad.moves.into_iter().filter(|&(_, p)| p >= epsilon).map(|(m, _)| Action::Move(m)).collect();
    if ad.eos >= epsilon && ad.eos > 0.0 {
        set.insert(Action::Eos);
    }
    Ok(set)
}

pub fn iou_agreement(
    model: &dyn SequenceModel,
    probe: Option<&ProbeBoard>,
    cursor: &GameCursor,
    epsilon: f64,
) -> Result<IouAgreement> {
    let truth = true_actions(cursor)?;
    let m = model_actions(model, cursor.tokens(), epsilon)?;
    let b = probe.map(|pb| probe_actions(pb, cursor.board()));
    Ok(IouAgreement {
        iou_wm: iou(&truth, &m),
        iou_wb: b.as_ref().map(|b| iou(&truth, b)),
        iou_mb: b.as_ref().map(|b| iou(&m, b)),
    })
}

/// Square accuracy of the probe's argmax board, and accuracy restricted to
/// squares that are occupied or predicted occupied (1 when there are none).
pub fn probe_accuracy(pb: &ProbeBoard, truth: &BoardState) -> (f64, f64) {
    let predicted = pb.argmax_placement();
    let actual = truth.position().placement();
    let correct = (0..64).filter(|&i| predicted[i] == actual[i]).count();
    let subset: Vec<usize> = (0..64).filter(|&i| predicted[i].is_some() || actual[i].is_some()).collect();
    let piece = if subset.is_empty() {
        1.0
    } else {
        subset.iter().filter(|&&i| predicted[i] == actual[i]).count() as f64 / subset.len() as f64
    };
    (correct as f64 / 64.0, piece)
}

/// Among illegal-move successes with a probe snapshot, the fraction whose
/// offending move is legal on the probed board. `None` without any.
pub fn probe_agreement_ratio(outcomes: &[AttackOutcome]) -> Option<f64> {
    let mut considered = 0;
    let mut agreeing = 0;
    for o in outcomes {
        let (Some(m), Some(pb), Some(fen)) = (o.offending_move, &o.probe_snapshot, &o.failure_fen) else {
            continue;
        };
        if !o.error_type.is_some_and(ErrorType::is_illegal_move) {
            continue;
        }
        let Ok(truth) = BoardState::from_fen(fen) else { continue };
        considered += 1;
        if probe_actions(pb, &truth).contains(&Action::Move(m)) {
            agreeing += 1;
        }
    }
    (considered > 0).then(|| agreeing as f64 / considered as f64)
}

fn replay_lines(lines: &[(usize, String)]) -> Result<Vec<(usize, GameCursor)>> {
    if lines.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    lines
        .iter()
        .map(|(i, l)| {
            let (game, _) = replay_corpus_line(l).map_err(|message| MetricsError::BadLine { line: *i, message })?;
            let c = GameCursor::from_moves(&game.moves).expect("replayed above");
            Ok((*i, c))
        })
        .collect()
}

/// Fraction of games where the model's top token is EOS right after the
/// final move and at no earlier move boundary. Every game must end by rule.
pub fn game_end_recognition(model: &dyn SequenceModel, lines: &[(usize, String)]) -> Result<f64> {
    let games = replay_lines(lines)?;
    if let Some((line, _)) = games.iter().find(|(_, c)| !c.terminal_kind().is_terminal()) {
        return Err(MetricsError::NotTerminal { line: *line });
    }
    let hits: Vec<bool> = games
        .par_iter()
        .map(|(_, game)| {
            let mut c = GameCursor::new();
            for &m in game.moves() {
                if model.next_token_dist(c.tokens())?.argmax() == TokenId::EOS {
                    return Ok(false);
                }
                c.push_move(m).expect("replayed game");
            }
            Ok(model.next_token_dist(c.tokens())?.argmax() == TokenId::EOS)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

/// Which side's move boundaries the legal-move ratio covers.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum SideFilter {
    #[default]
    Both,
    White,
    Black,
}

impl SideFilter {
    fn admits(self, c: Color) -> bool {
        match self {
            SideFilter::Both => true,
            SideFilter::White => c == Color::White,
            SideFilter::Black => c == Color::Black,
        }
    }
}

/// For every non-terminal move boundary of every game (on the true prefix),
/// decode the model's move and count how often it is legal.
pub fn legal_move_ratio(
    model: &dyn SequenceModel,
    lines: &[(usize, String)],
    policy: &DecodingPolicy,
    side: SideFilter,
) -> Result<f64> {
    let games = replay_lines(lines)?;
    let counts: Vec<(usize, usize)> = games
        .par_iter()
        .map(|(line, game)| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(policy.seed, *line, 0));
            let mut c = GameCursor::new();
            let (mut legal, mut total) = (0, 0);
            for &m in game.moves() {
                if side.admits(c.board().side_to_move()) {
                    total += 1;
                    let d = decode_move(model, c.tokens(), policy, &mut rng)?;
                    if let ModelOutput::Move(x) = d.output {
                        legal += c.board().is_legal(x) as usize;
                    }
                }
                c.push_move(m).expect("replayed game");
            }
            Ok((legal, total))
        })
        .collect::<Result<_>>()?;
    let (legal, total) = counts.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if total == 0 { 0.0 } else { legal as f64 / total as f64 })
}

/// The legal-move ratio expected when sampling from the model's full
/// distribution: the mean over boundaries of the legal actions' mass.
pub fn expected_legal_move_ratio(model: &dyn SequenceModel, lines: &[(usize, String)], side: SideFilter) -> Result<f64> {
    let games = replay_lines(lines)?;
    let sums: Vec<(f64, usize)> = games
        .par_iter()
        .map(|(_, game)| {
            let mut c = GameCursor::new();
            let (mut mass, mut total) = (0.0, 0);
            for &m in game.moves() {
                if side.admits(c.board().side_to_move()) {
                    total += 1;
                    let legal = c.continuations()?.moves;
                    mass += move_probabilities(model, c.tokens(), &legal, 128)?.iter().sum::<f64>();
                }
                c.push_move(m).expect("replayed game");
            }
            Ok((mass, total))
        })
        .collect::<Result<_>>()?;
    let (mass, total) = sums.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(if total == 0 { 0.0 } else { mass / total as f64 })
}

/// One row of `summary.csv`.
#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct SummaryRow {
    pub adversary: String,
    pub policy: String,
    pub episodes: usize,
    pub asr: f64,
    pub illegal_move_rate: f64,
    pub end_prediction_rate: f64,
    pub mean_len_plies: f64,
    pub mean_seconds: f64,
    pub mean_queries: f64,
}

impl SummaryRow {
    pub fn new(adversary: &str, policy: &str, r: &CampaignReport) -> Self {
        SummaryRow {
            adversary: adversary.to_string(),
            policy: policy.to_string(),
            episodes: r.episodes,
            asr: r.asr,
            illegal_move_rate: r.illegal_move_rate,
            end_prediction_rate: r.end_prediction_rate,
            mean_len_plies: r.mean_seq_len,
            mean_seconds: r.mean_seconds,
            mean_queries: r.mean_queries,
        }
    }
}

fn write_csv<T: Serialize>(path: &Path, comment: &str, rows: &[T]) -> Result<()> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "# {comment}")?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(
        path,
        "adversary, policy, episodes, asr = successes/episodes, illegal_move_rate and end_prediction_rate \
         (sum to asr), mean_len_plies (game length in plies incl. warmup), mean_seconds and mean_queries per episode",
        rows,
    )
}

#[derive(Serialize)]
struct CurveRow {
    ply: usize,
    cumulative_asr: f64,
}

pub fn write_asr_curve_csv(path: &Path, report: &CampaignReport) -> Result<()> {
    let rows: Vec<CurveRow> =
        report.asr_by_ply.iter().map(|&(ply, cumulative_asr)| CurveRow { ply, cumulative_asr }).collect();
    write_csv(path, "ply = plies after the warmup, cumulative_asr = fraction of episodes failed by that ply", &rows)
}

#[derive(Serialize)]
struct TaxonomyRow {
    category: &'static str,
    code: usize,
    name: &'static str,
    count: usize,
    fraction: f64,
}

pub fn write_taxonomy_csv(path: &Path, report: &CampaignReport) -> Result<()> {
    let successes = report.successes.max(1) as f64;
    let mut rows: Vec<TaxonomyRow> = ErrorType::ALL
        .iter()
        .map(|&e| TaxonomyRow {
            category: "error_type",
            code: e.code() as usize,
            name: e.name(),
            count: report.error_type_counts[e as usize],
            fraction: report.error_type_counts[e as usize] as f64 / successes,
        })
        .collect();
    let piece_total = report.piece_type_counts.iter().sum::<usize>().max(1) as f64;
    rows.extend(PieceKind::ALL.iter().map(|&k| TaxonomyRow {
        category: "piece_type",
        code: k.index(),
        name: piece_name(k),
        count: report.piece_type_counts[k.index()],
        fraction: report.piece_type_counts[k.index()] as f64 / piece_total,
    }));
    write_csv(
        path,
        "category (error_type: codes 1-7, fraction of successes; piece_type: piece moved in type 3-5 errors, \
         fraction of those), code, name, count, fraction",
        &rows,
    )
}

fn piece_name(k: PieceKind) -> &'static str {
    match k {
        PieceKind::Pawn => "pawn",
        PieceKind::Knight => "knight",
        PieceKind::Bishop => "bishop",
        PieceKind::Rook => "rook",
        PieceKind::Queen => "queen",
        PieceKind::King => "king",
    }
}

/// One row of `iou.csv`.
#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct IouRow {
    pub game: usize,
    pub ply: usize,
    pub iou_wm: f64,
    pub iou_wb: Option<f64>,
    pub iou_mb: Option<f64>,
}

pub fn write_iou_csv(path: &Path, rows: &[IouRow]) -> Result<()> {
    write_csv(
        path,
        "game (corpus line), ply (position index), iou_wm (rules vs model), iou_wb (rules vs probe board), \
         iou_mb (model vs probe board); probe columns empty without a probe",
        rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::reference::{ReferenceModel, ReferenceProbe, UniformModel};
    use crate::gateway::{ModelDistribution, Capabilities};
    use crate::harness::TerminalReason;

    fn outcome(success: Option<(usize, ErrorType)>) -> AttackOutcome {
        AttackOutcome {
            warmup_id: 0,
            repetition: 0,
            adversary: "imo".into(),
            policy: "greedy".into(),
            warmup_plies: 10,
            success: success.is_some(),
            failure_ply: success.map(|(p, _)| p),
            error_type: success.map(|(_, e)| e),
            offending_tokens: None,
            offending_move: None,
            offending_piece: None,
            failure_fen: None,
            probe_snapshot: None,
            trace: vec![],
            episode_plies: 0,
            terminal_reason: if success.is_some() { TerminalReason::ModelError } else { TerminalReason::PlyCap },
            end_recognized: None,
            adversary_moves: 0,
            queries: 0,
            wall_time: 0.0,
        }
    }

    #[test]
    fn report_identities() {
        let mut v: Vec<AttackOutcome> = (0..3).map(|_| outcome(None)).collect();
        v.extend([12, 12, 14, 30, 31].map(|p| outcome(Some((p + 10, ErrorType::ErroneousMove)))));
        v.extend([20, 22].map(|p| outcome(Some((p + 10, ErrorType::IncorrectEndPrediction)))));
        let r = build_report(&v).unwrap();
        assert_eq!(r.asr, 0.7);
        assert_eq!(r.asr_by_ply[..2], [(12, 0.2), (14, 0.3)]);
        assert_eq!((r.illegal_move_rate, r.end_prediction_rate), (0.5, 0.2));
        assert!(is_monotone(&r.asr_by_ply));
        assert_eq!(r.asr_by_ply.last().unwrap().1, r.asr);
        v.reverse();
        assert_eq!(build_report(&v).unwrap(), r);
        assert!(matches!(build_report(&[]), Err(MetricsError::EmptyCampaign)));
    }

    #[test]
    fn iou_hand_cases() {
        let e2e4 = Action::Move("e2e4".parse().unwrap());
        let d2d4 = Action::Move("d2d4".parse().unwrap());
        let a: HashSet<Action> = [e2e4, d2d4].into();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &[e2e4].into()), 0.5);
        assert_eq!(iou(&[e2e4].into(), &[d2d4].into()), 0.0);
        assert_eq!(iou(&HashSet::new(), &HashSet::new()), 1.0);
    }

    #[test]
    fn perfect_model_agrees_with_the_rules() {
        let model = ReferenceModel::perfect();
        let c = GameCursor::from_moves(&["e2e4", "e7e5"].map(|m| m.parse().unwrap())).unwrap();
        let pb = ProbeBoard::exact(c.board().position().placement());
        let agreement = iou_agreement(&model, Some(&pb), &c, 0.01).unwrap();
        assert_eq!(agreement, IouAgreement { iou_wm: 1.0, iou_wb: Some(1.0), iou_mb: Some(1.0) });
        let all_empty = ProbeBoard::exact(&[None; 64]);
        let agreement = iou_agreement(&model, Some(&all_empty), &c, 0.01).unwrap();
        assert_eq!(agreement.iou_wb, Some(0.0));
    }

    #[test]
    fn probe_accuracy_cases() {
        let start = BoardState::initial();
        assert_eq!(probe_accuracy(&ProbeBoard::exact(start.position().placement()), &start), (1.0, 1.0));
        assert_eq!(probe_accuracy(&ProbeBoard::exact(&[None; 64]), &start), (0.5, 0.0));
        let mut moved = *start.position().placement();
        moved[Square::A3.index()] = moved[Square::A1.index()].take();
        let (acc, piece) = probe_accuracy(&ProbeBoard::exact(&moved), &start);
        assert_eq!(acc, 62.0 / 64.0);
        assert_eq!(piece, 31.0 / 33.0);
    }

    #[test]
    fn probe_agreement_counts_moves_legal_on_the_probe_board() {
        // A rook slide through a pawn the probe does not see.
        let truth = BoardState::from_fen("4k3/8/8/8/8/8/P7/R3K3 w - - 0 1").unwrap();
        let mut blind = *truth.position().placement();
        blind[Square::A2.index()] = None;
        let mut o = outcome(Some((11, ErrorType::ErroneousMove)));
        o.offending_move = Some("a1a5".parse().unwrap());
        o.failure_fen = Some(truth.to_fen());
        o.probe_snapshot = Some(ProbeBoard::exact(&blind));
        let mut perfect = o.clone();
        perfect.probe_snapshot = Some(ProbeBoard::exact(truth.position().placement()));
        assert_eq!(probe_agreement_ratio(&[o.clone()]), Some(1.0));
        assert_eq!(probe_agreement_ratio(&[perfect.clone()]), Some(0.0));
        assert_eq!(probe_agreement_ratio(&[o, perfect]), Some(0.5));
        assert_eq!(probe_agreement_ratio(&[outcome(None)]), None);
    }

    #[test]
    fn kingless_probe_boards_fall_back_to_pseudo_legal_moves() {
        let truth = BoardState::initial();
        let mut placement = *truth.position().placement();
        placement[Square::E1.index()] = None;
        let actions = probe_actions(&ProbeBoard::exact(&placement), &truth);
        assert!(actions.contains(&Action::Move("e2e4".parse().unwrap())));
        assert!(actions.contains(&Action::Move("d1e1".parse().unwrap())));
    }

    fn lines(v: &[&str]) -> Vec<(usize, String)> {
        v.iter().enumerate().map(|(i, s)| (i, s.to_string())).collect()
    }

    const FOOLS_MATE: &str = "f2f3 e7e5 g2g4 d8h4 #complete";

    #[test]
    fn end_recognition() {
        let games = lines(&[FOOLS_MATE]);
        assert_eq!(game_end_recognition(&ReferenceModel::perfect(), &games).unwrap(), 1.0);
        assert_eq!(game_end_recognition(&ReferenceModel::length_flaw(2), &games).unwrap(), 0.0);
        assert!(matches!(game_end_recognition(&ReferenceModel::perfect(), &[]), Err(MetricsError::EmptyCorpus)));
        let open = lines(&["e2e4 e7e5"]);
        assert!(matches!(
            game_end_recognition(&ReferenceModel::perfect(), &open),
            Err(MetricsError::NotTerminal { line: 0 })
        ));
    }

    #[test]
    fn legal_ratio_of_reference_models() {
        let games = lines(&[FOOLS_MATE, "e2e4 e7e5 g1f3 b8c6 f1b5"]);
        let greedy = DecodingPolicy::greedy();
        assert_eq!(legal_move_ratio(&ReferenceModel::perfect(), &games, &greedy, SideFilter::Both).unwrap(), 1.0);
        assert_eq!(legal_move_ratio(&UniformModel, &games, &greedy, SideFilter::Both).unwrap(), 0.0);
        let expected = expected_legal_move_ratio(&UniformModel, &games, SideFilter::Both).unwrap();
        // 20 two-token legal moves at every boundary of these openings.
        let two_token = (1.0 / 71.0) * (1.0 / 71.0) * (67.0 / 71.0);
        let mut brute = 0.0;
        let mut n = 0;
        for (_, l) in &games {
            let (game, _) = replay_corpus_line(l).unwrap();
            let mut c = GameCursor::new();
            for m in game.moves {
                brute += c.continuations().unwrap().moves.len() as f64 * two_token;
                n += 1;
                c.push_move(m).unwrap();
            }
        }
        assert!((expected - brute / n as f64).abs() < 1e-15);
        let black = legal_move_ratio(&ReferenceModel::perfect(), &games, &greedy, SideFilter::Black).unwrap();
        assert_eq!(black, 1.0);
    }

    struct Flat(ModelDistribution);

    impl SequenceModel for Flat {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn next_token_dist(&self, _: &[TokenId]) -> crate::gateway::Result<ModelDistribution> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn epsilon_thresholds_model_actions() {
        let c = GameCursor::new();
        let m = model_actions(&Flat(ModelDistribution::uniform()), c.tokens(), 0.01).unwrap();
        // EOS carries 1/71 on its own; every move is far below the threshold.
        assert_eq!(m, HashSet::from([Action::Eos]));
        let m = model_actions(&ReferenceModel::perfect().with_probe(ReferenceProbe::Perfect), c.tokens(), 0.05).unwrap();
        assert_eq!(m.len(), 20);
        let m = model_actions(&ReferenceModel::perfect(), c.tokens(), 0.051).unwrap();
        assert!(m.is_empty());
    }
}
