use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use soundcheck_core::adversaries::{AdversaryKind, DEFAULT_BATCH_SIZE};
use soundcheck_core::datagen::{corpus_stats, filter_corpus, generate_random_corpus, GenSpec, DEFAULT_GEN_MAX_PLIES};
use soundcheck_core::gateway::conformance::run_conformance;
use soundcheck_core::gateway::protocol::{open_model, serve, serve_tcp, Endpoint};
use soundcheck_core::gateway::{probe_board, DecodingPolicy, SequenceModel};
use soundcheck_core::harness::{
    run_campaign, sample_warmups, AttackOutcome, EpisodeConfig, WarmupSpec, DEFAULT_MAX_PLIES,
};
use soundcheck_core::metrics::{
    build_report, expected_legal_move_ratio, game_end_recognition, iou_agreement, legal_move_ratio,
    probe_agreement_ratio, write_asr_curve_csv, write_iou_csv, write_summary_csv, write_taxonomy_csv, IouRow,
    SideFilter, SummaryRow,
};
use soundcheck_core::rules::BoardState;
use soundcheck_core::worldmodel::{export_pd_corpus, read_corpus_lines, replay_corpus_line, GameCursor};

#[derive(Parser)]
#[command(name = "soundcheck", version, about = "Adversarial soundness checks for chess sequence models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// tcp:HOST:PORT, exec:COMMAND or builtin:NAME
    #[arg(long)]
    model: Endpoint,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Concurrent connections to a remote model.
    #[arg(long, default_value_t = 4)]
    sessions: usize,
}

impl ModelArgs {
    fn open(&self) -> Result<Box<dyn SequenceModel>> {
        open_model(&self.model, Duration::from_secs(self.timeout), self.sessions.max(1))
            .with_context(|| format!("opening model {}", self.model))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run adversarial campaigns against a model.
    Attack {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated adversaries: rm, smm, imo, bso, ad, adaptive-imo[:K], self-play.
        #[arg(long, default_value = "imo", value_delimiter = ',')]
        adversary: Vec<AdversaryKind>,
        /// greedy, topk:K or topp:P
        #[arg(long, default_value = "greedy")]
        policy: DecodingPolicy,
        /// corpus:FILE:N:PLIES or random:N:PLIES:SEED
        #[arg(long)]
        warmups: WarmupSpec,
        #[arg(long, default_value_t = DEFAULT_MAX_PLIES)]
        max_plies: usize,
        #[arg(long, default_value_t = 1)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Maximum model queries per episode.
        #[arg(long)]
        query_budget: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
        batch_size: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the CSV reports from outcome files.
    Report {
        /// outcomes.jsonl files written by `attack`.
        #[arg(required = true)]
        outcomes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a corpus of uniform-random games that end by rule.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_GEN_MAX_PLIES)]
        max_plies: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print corpus statistics as JSON.
    Stats { corpus: PathBuf },
    /// Keep games of at most MAX_PLIES plies.
    Filter {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GEN_MAX_PLIES)]
        max_plies: usize,
    },
    /// Write the sparse legal-continuation supervision file for a corpus.
    ExportPd {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count leaf nodes of the legal move tree.
    Perft {
        #[arg(long, default_value = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1")]
        fen: String,
        #[arg(long, default_value_t = 4)]
        depth: u32,
        /// Print the count below each root move.
        #[arg(long)]
        divide: bool,
    },
    /// Serve a model over the wire protocol on stdio, or on TCP with --listen.
    Serve {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        listen: Option<String>,
    },
    /// Check that a model endpoint honours the protocol contract.
    Conformance {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Corpus-level model diagnostics.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(value_enum)]
        metric: Metric,
        corpus: PathBuf,
        #[arg(long, default_value = "greedy")]
        policy: DecodingPolicy,
        #[arg(long, value_enum, default_value_t = Side::Both)]
        side: Side,
        /// Action probability threshold for IoU.
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        /// Where `iou` writes its CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    EndRecognition,
    LegalRatio,
    ExpectedLegalRatio,
    Iou,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Both,
    White,
    Black,
}

impl From<Side> for SideFilter {
    fn from(s: Side) -> Self {
        match s {
            Side::Both => SideFilter::Both,
            Side::White => SideFilter::White,
            Side::Black => SideFilter::Black,
        }
    }
}

/// `println!` that reports a closed pipe as an error instead of panicking.
macro_rules! out {
    ($($t:tt)*) => {
        writeln!(io::stdout().lock(), $($t)*)?
    };
}

fn main() -> Result<()> {
    match run(Cli::parse().command) {
        Err(e) if e.downcast_ref::<io::Error>().is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) => Ok(()),
        r => r,
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Attack { model, adversary, policy, warmups, max_plies, reps, seed, query_budget, batch_size, out } => {
            let model = model.open()?;
            let warmups = sample_warmups(&warmups)?;
            fs::create_dir_all(&out)?;
            let mut by_adversary = Vec::new();
            for kind in adversary {
                let cfg = EpisodeConfig { adversary: kind, policy, max_plies, seed, query_budget, batch_size };
                let outcomes = run_campaign(model.as_ref(), &warmups, &cfg, reps.max(1))
                    .with_context(|| format!("campaign {kind}"))?;
                by_adversary.push(outcomes);
            }
            let mut w = BufWriter::new(fs::File::create(out.join("outcomes.jsonl"))?);
            for o in by_adversary.iter().flatten() {
                serde_json::to_writer(&mut w, o)?;
                writeln!(w)?;
            }
            w.flush()?;
            write_reports(&by_adversary, &out)
        }
        Command::Report { outcomes, out } => {
            let mut groups: BTreeMap<(String, String), Vec<AttackOutcome>> = BTreeMap::new();
            for path in &outcomes {
                let file = io::BufReader::new(fs::File::open(path).with_context(|| path.display().to_string())?);
                for (i, line) in file.lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let o: AttackOutcome = serde_json::from_str(&line)
                        .with_context(|| format!("{}:{}", path.display(), i + 1))?;
                    groups.entry((o.adversary.clone(), o.policy.clone())).or_default().push(o);
                }
            }
            if groups.is_empty() {
                bail!("no outcomes found");
            }
            fs::create_dir_all(&out)?;
            write_reports(&groups.into_values().collect::<Vec<_>>(), &out)
        }
        Command::Gen { n, max_plies, seed, out } => {
            let stats = generate_random_corpus(&GenSpec { n, max_plies, seed }, &out)?;
            eprintln!("wrote {} games ({} plies on average) to {}", stats.game_count, stats.mean_plies, out.display());
            Ok(())
        }
        Command::Stats { corpus } => {
            let stats = corpus_stats(&corpus).with_context(|| corpus.display().to_string())?;
            for s in &stats.skipped {
                eprintln!("line {}: {}", s.line + 1, s.message);
            }
            out!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(())
        }
        Command::Filter { input, out, max_plies } => {
            let kept = filter_corpus(&input, &out, max_plies)?;
            eprintln!("kept {kept} games");
            Ok(())
        }
        Command::ExportPd { corpus, out } => {
            let summary = export_pd_corpus(&corpus, &out)?;
            for s in &summary.skipped {
                eprintln!("line {}: {}", s.line + 1, s.message);
            }
            eprintln!("wrote {} rows for {} games", summary.rows, summary.games);
            Ok(())
        }
        Command::Perft { fen, depth, divide } => {
            let board = BoardState::from_fen(&fen)?;
            if divide {
                for m in board.legal_moves() {
                    let n = if depth == 0 { 1 } else { board.play_unchecked(m).perft(depth - 1) };
                    out!("{m}: {n}");
                }
            }
            out!("{}", board.perft(depth));
            Ok(())
        }
        Command::Serve { model, listen } => {
            let model: Arc<dyn SequenceModel> = Arc::from(model.open()?);
            match listen {
                Some(addr) => {
                    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
                    eprintln!("listening on {}", listener.local_addr()?);
                    serve_tcp(model, listener)?;
                }
                None => serve(model.as_ref(), io::stdin().lock(), io::stdout().lock())?,
            }
            Ok(())
        }
        Command::Conformance { model, seed } => {
            let report = run_conformance(model.open()?.as_ref(), seed);
            print!("{report}");
            if !report.passed() {
                bail!("model failed conformance");
            }
            Ok(())
        }
        Command::Eval { model, metric, corpus, policy, side, epsilon, out } => {
            let model = model.open()?;
            let lines = read_corpus_lines(&corpus).with_context(|| corpus.display().to_string())?;
            match metric {
                Metric::EndRecognition => out!("{}", game_end_recognition(model.as_ref(), &lines)?),
                Metric::LegalRatio => out!("{}", legal_move_ratio(model.as_ref(), &lines, &policy, side.into())?),
                Metric::ExpectedLegalRatio => {
                    out!("{}", expected_legal_move_ratio(model.as_ref(), &lines, side.into())?)
                }
                Metric::Iou => {
                    let rows = iou_rows(model.as_ref(), &lines, epsilon)?;
                    let mean = |f: fn(&IouRow) -> Option<f64>| {
                        let v: Vec<f64> = rows.iter().filter_map(f).collect();
                        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                    };
                    out!("iou_wm {:?}", mean(|r| Some(r.iou_wm)));
                    out!("iou_wb {:?}", mean(|r| r.iou_wb));
                    out!("iou_mb {:?}", mean(|r| r.iou_mb));
                    if let Some(out) = out {
                        write_iou_csv(&out, &rows)?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn iou_rows(model: &dyn SequenceModel, lines: &[(usize, String)], epsilon: f64) -> Result<Vec<IouRow>> {
    let has_probe = model.capabilities().probe;
    let mut rows = Vec::new();
    for (line, text) in lines {
        let (game, _) = replay_corpus_line(text).map_err(|e| anyhow::anyhow!("corpus line {}: {e}", line + 1))?;
        let mut c = GameCursor::new();
        for ply in 0..=game.moves.len() {
            let probe = if has_probe { Some(probe_board(model, c.tokens())?) } else { None };
            let a = iou_agreement(model, probe.as_ref(), &c, epsilon)?;
            rows.push(IouRow { game: *line, ply, iou_wm: a.iou_wm, iou_wb: a.iou_wb, iou_mb: a.iou_mb });
            if let Some(&m) = game.moves.get(ply) {
                c.push_move(m)?;
            }
        }
    }
    Ok(rows)
}

/// Writes summary.csv for all groups, plus the curve and taxonomy per group.
/// A single group gets the plain file names.
fn write_reports(groups: &[Vec<AttackOutcome>], out: &Path) -> Result<()> {
    let mut summary = Vec::new();
    for outcomes in groups {
        let Some(first) = outcomes.first() else { continue };
        let report = build_report(outcomes)?;
        let suffix = if groups.len() == 1 { String::new() } else { format!("_{}", first.adversary.replace(':', "-")) };
        write_asr_curve_csv(&out.join(format!("asr_curve{suffix}.csv")), &report)?;
        write_taxonomy_csv(&out.join(format!("taxonomy{suffix}.csv")), &report)?;
        let agreement = probe_agreement_ratio(outcomes).map_or("n/a".to_string(), |r| format!("{r:.3}"));
        out!(
            "{:<14} {:<10} episodes {:>5}  asr {:.3}  illegal {:.3}  end {:.3}  mean_len {:.1}  probe_agreement {agreement}",
            first.adversary,
            first.policy,
            report.episodes,
            report.asr,
            report.illegal_move_rate,
            report.end_prediction_rate,
            report.mean_seq_len,
        );
        summary.push(SummaryRow::new(&first.adversary, &first.policy, &report));
    }
    write_summary_csv(&out.join("summary.csv"), &summary)?;
    Ok(())
}
