//! Random valid game corpora and corpus tooling.

use std::collections::BTreeMap;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use soundcheck_rules::{BoardState, Move};
use thiserror::Error;

use crate::harness::episode_seed;
use crate::notation::CorpusGame;
use crate::worldmodel::{read_corpus_lines, replay_corpus_line, LineIssue};

pub const DEFAULT_GEN_MAX_PLIES: usize = 150;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("a corpus needs at least one game")]
    ZeroGames,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct GenSpec {
    pub n: usize,
    /// Longer games are thrown away and replayed with a fresh seed.
    pub max_plies: usize,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(n: usize, seed: u64) -> GenSpec {
        GenSpec { n, max_plies: DEFAULT_GEN_MAX_PLIES, seed }
    }
}

/// One uniform-random game from the initial position, or `None` as soon as
/// it runs past `max_plies`.
fn random_game(rng: &mut ChaCha8Rng, max_plies: usize) -> Option<Vec<Move>> {
    let mut board = BoardState::initial();
    let mut moves = Vec::new();
    while !board.terminal_kind().is_terminal() {
        if moves.len() == max_plies {
            return None;
        }
        let legal = board.legal_moves();
        let m = legal[rng.gen_range(0..legal.len())];
        board = board.play_unchecked(m);
        moves.push(m);
    }
    Some(moves)
}

/// Game `index` of a corpus: attempt `a` uses its own derived seed, so each
/// game is independent of how many attempts its neighbours needed.
pub fn generate_game(spec: &GenSpec, index: usize) -> CorpusGame {
    (0..)
        .find_map(|attempt| {
            let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(spec.seed, index, attempt));
            random_game(&mut rng, spec.max_plies)
        })
        .map(|moves| CorpusGame { moves, complete: true })
        .expect("unbounded attempts")
}

pub fn generate_games(spec: &GenSpec) -> Result<Vec<CorpusGame>, DatagenError> {
    if spec.n == 0 {
        return Err(DatagenError::ZeroGames);
    }
    Ok((0..spec.n).into_par_iter().map(|i| generate_game(spec, i)).collect())
}

pub fn generate_random_corpus(spec: &GenSpec, out: &Path) -> Result<CorpusStats, DatagenError> {
    let games = generate_games(spec)?;
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    for g in &games {
        writeln!(w, "{g}")?;
    }
    w.flush()?;
    Ok(CorpusStats::from_games(games.iter()))
}

#[derive(Clone, PartialEq, Debug, Default, Serialize)]
pub struct CorpusStats {
    pub game_count: usize,
    pub token_count: usize,
    pub move_count: usize,
    pub mean_plies: f64,
    pub std_plies: f64,
    pub min_plies: usize,
    pub max_plies: usize,
    /// Game length in plies, bucketed by tens: key 0 counts lengths 0..=9.
    pub histogram: BTreeMap<usize, usize>,
    /// Games whose final position is not terminal.
    pub premature_end_count: usize,
    pub skipped: Vec<LineIssue>,
}

impl CorpusStats {
    fn from_games<'a>(games: impl Iterator<Item = &'a CorpusGame>) -> CorpusStats {
        let mut s = CorpusStats { min_plies: usize::MAX, ..CorpusStats::default() };
        let mut lengths = Vec::new();
        for g in games {
            let len = g.moves.len();
            s.game_count += 1;
            s.move_count += len;
            s.token_count += g.tokens().len();
            s.min_plies = s.min_plies.min(len);
            s.max_plies = s.max_plies.max(len);
            *s.histogram.entry(len / 10 * 10).or_default() += 1;
            lengths.push(len as f64);
        }
        if lengths.is_empty() {
            s.min_plies = 0;
            return s;
        }
        let n = lengths.len() as f64;
        s.mean_plies = lengths.iter().sum::<f64>() / n;
        s.std_plies = (lengths.iter().map(|l| (l - s.mean_plies).powi(2)).sum::<f64>() / n).sqrt();
        s
    }
}

/// Statistics over parsable lines; malformed or illegal lines are listed in
/// `skipped` and left out of every count.
pub fn corpus_stats_of_lines(lines: &[(usize, String)]) -> CorpusStats {
    let replayed: Vec<_> = lines.par_iter().map(|(i, l)| (*i, replay_corpus_line(l))).collect();
    let mut games = Vec::new();
    let mut skipped = Vec::new();
    let mut premature = 0;
    for (line, r) in replayed {
        match r {
            Ok((game, cursor)) => {
                premature += !cursor.board().terminal_kind().is_terminal() as usize;
                games.push(game);
            }
            Err(message) => skipped.push(LineIssue { line, message }),
        }
    }
    let mut s = CorpusStats::from_games(games.iter());
    s.premature_end_count = premature;
    s.skipped = skipped;
    s
}

pub fn corpus_stats(corpus: &Path) -> io::Result<CorpusStats> {
    Ok(corpus_stats_of_lines(&read_corpus_lines(corpus)?))
}

/// Copies games of at most `max_plies` plies, in order. Only the move count
/// is inspected, so lines are copied verbatim.
pub fn filter_corpus(input: &Path, out: &Path, max_plies: usize) -> io::Result<usize> {
    let mut w = BufWriter::new(std::fs::File::create(out)?);
    let mut kept = 0;
    for (_, line) in read_corpus_lines(input)? {
        let plies = line.split_whitespace().filter(|f| !f.starts_with('#')).count();
        if plies <= max_plies {
            writeln!(w, "{line}")?;
            kept += 1;
        }
    }
    w.flush()?;
    Ok(kept)
}
