//! Protocol conformance checks for a model, whether it is in-process or
//! remote: normalization, batch ordering, capability honesty and probe shape.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use soundcheck_rules::Square;

use super::{SequenceModel, NORMALIZATION_TOLERANCE, PROBE_CLASSES};
use crate::notation::TokenId;
use crate::worldmodel::GameCursor;

#[derive(Clone, PartialEq, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, PartialEq, Debug, Serialize, Default)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &'static str, outcome: Result<String, String>) {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(Check { name, passed, detail });
    }
}

impl fmt::Display for ConformanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Prefixes along a seeded random game, including mid-move ones.
pub fn sample_prefixes(seed: u64, plies: usize) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = GameCursor::new();
    let mut out = vec![c.tokens().to_vec()];
    for _ in 0..plies {
        let Ok(w) = c.continuations() else { break };
        let Some(&m) = w.moves.choose(&mut rng) else { break };
        c.push_move(m).expect("legal move");
        out.push(c.tokens().to_vec());
    }
    let mut mid = c.tokens().to_vec();
    if let Some(&m) = c.continuations().ok().and_then(|w| w.moves.first().copied()).as_ref() {
        mid.push(TokenId::square(m.from));
        out.push(mid);
    }
    out
}

/// Runs every check applicable to the model's declared capabilities.
pub fn run_conformance(model: &dyn SequenceModel, seed: u64) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let caps = model.capabilities();
    let prefixes = sample_prefixes(seed, 24);

    let singles: Vec<_> = prefixes.iter().map(|p| model.next_token_dist(p)).collect();
    report.record(
        "dist normalization",
        match singles.iter().position(|r| r.is_err()) {
            Some(i) => Err(format!("prefix {i}: {}", singles[i].as_ref().unwrap_err())),
            None => {
                let worst = singles
                    .iter()
                    .map(|d| (d.as_ref().unwrap().probs().iter().sum::<f64>() - 1.0).abs())
                    .fold(0.0, f64::max);
                Ok(format!("{} prefixes, max deviation {worst:.1e} after ingest", prefixes.len()))
            }
        },
    );

    let repeat = model.next_token_dist(&prefixes[0]);
    report.record(
        "dist stability",
        match (repeat, &singles[0]) {
            (Ok(a), Ok(b)) => {
                let diff = a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                if diff <= 1e-6 {
                    Ok(format!("repeat query differs by {diff:.1e}"))
                } else {
                    Err(format!("repeat query differs by {diff:.1e}"))
                }
            }
            _ => Err("query failed".into()),
        },
    );

    if caps.dist_batch && singles.iter().all(|r| r.is_ok()) {
        let mut order: Vec<usize> = (0..prefixes.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let seqs: Vec<Vec<TokenId>> = order.iter().map(|&i| prefixes[i].clone()).collect();
        report.record(
            "dist_batch order",
            match model.next_token_dist_batch(&seqs) {
                Err(e) => Err(e.to_string()),
                Ok(rows) if rows.len() != seqs.len() => Err(format!("{} rows for {} prefixes", rows.len(), seqs.len())),
                Ok(rows) => {
                    let worst = rows
                        .iter()
                        .zip(&order)
                        .map(|(row, &i)| {
                            let single = singles[i].as_ref().unwrap();
                            row.probs().iter().zip(single.probs()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
                        })
                        .fold(0.0, f64::max);
                    if worst <= 1e-6 {
                        Ok(format!("permuted batch of {} matches single queries", seqs.len()))
                    } else {
                        Err(format!("batch row deviates from single query by {worst:.1e}"))
                    }
                }
            },
        );
    }

    let boundary = prefixes.iter().rev().find(|p| GameCursor::from_tokens(p).is_ok_and(|c| c.at_boundary()));
    let boundary = boundary.cloned().unwrap_or_else(|| vec![TokenId::BOS]);
    if caps.probe {
        report.record(
            "probe shape",
            match model.probe_board(&boundary) {
                Err(e) => Err(e.to_string()),
                Ok(pb) => {
                    let worst = Square::all()
                        .map(|sq| (pb.square(sq).iter().sum::<f64>() - 1.0).abs())
                        .fold(0.0, f64::max);
                    if worst <= NORMALIZATION_TOLERANCE {
                        Ok(format!("64 x {PROBE_CLASSES} board, max deviation {worst:.1e}"))
                    } else {
                        Err(format!("square sums deviate by {worst:.1e}"))
                    }
                }
            },
        );
    }
    if caps.grad_cos {
        report.record(
            "grad_cos range",
            match model.grad_cos(&boundary) {
                Err(e) => Err(e.to_string()),
                Ok(x) if (0.0..=2.0).contains(&x) => Ok(format!("cos_dist = {x:.4}")),
                Ok(x) => Err(format!("cos_dist = {x} outside [0, 2]")),
            },
        );
    }
    report.record("capabilities", Ok(caps.names().join(",")));
    report
}
