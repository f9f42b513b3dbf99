//! In-process reference models with known behaviour, used as oracles.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soundcheck_rules::{Move, PieceKind, Square};

use super::{Capabilities, GatewayError, ModelDistribution, ProbeBoard, Result, SequenceModel, PROBE_CLASSES};
use crate::notation::{TokenId, VOCAB_SIZE};
use crate::worldmodel::{GameCursor, Phase};

/// When a [`Behavior::SeededFlaw`] model switches to its trap.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Trigger {
    /// The move just played captured a piece.
    LastMoveCapture,
    Always,
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum Behavior {
    /// Uniform over the legal next tokens; EOS with mass 1 at terminal positions.
    PerfectLegal,
    /// Perfect, except that at non-terminal move boundaries where the trigger
    /// holds, `mass` goes to the from-token of the illegal `trap` move, which
    /// the model then completes.
    SeededFlaw { trigger: Trigger, trap: Move, mass: f64 },
    /// Perfect, except that from `plies` played plies on, `eos_mass` goes to EOS.
    LengthFlaw { plies: usize, eos_mass: f64 },
}

/// Probe behaviour attached to a reference model.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ReferenceProbe {
    /// One-hot true board.
    Perfect,
    /// True board with the readings of two squares exchanged.
    SwapSquares(Square, Square),
    /// True board, except that after a knight move the knight's square reads empty.
    CorruptAfterKnightMove,
    Uniform,
}

const CACHE_LIMIT: usize = 1 << 14;
const CACHE_LOOKBACK: usize = 6;

/// Replayed cursors for recently seen move-boundary prefixes. Queries
/// during an attack share long prefixes, so most lookups replay only the
/// last move or two.
#[derive(Default)]
struct CursorCache {
    map: Mutex<HashMap<Vec<TokenId>, Arc<GameCursor>>>,
}

impl CursorCache {
    fn get(&self, tokens: &[TokenId]) -> Option<Arc<GameCursor>> {
        self.map.lock().expect("cache lock").get(tokens).cloned()
    }

    fn insert(&self, c: &GameCursor) {
        let mut map = self.map.lock().expect("cache lock");
        if map.len() >= CACHE_LIMIT {
            map.clear();
        }
        map.insert(c.tokens().to_vec(), Arc::new(c.clone()));
    }

    /// The cursor for `tokens`, or `None` when they are not a valid prefix.
    fn resolve(&self, tokens: &[TokenId]) -> Option<GameCursor> {
        if tokens.first() != Some(&TokenId::BOS) {
            return None;
        }
        for strip in 0..=CACHE_LOOKBACK.min(tokens.len() - 1) {
            let (base, rest) = tokens.split_at(tokens.len() - strip);
            if let Some(hit) = self.get(base) {
                if rest.is_empty() {
                    return Some((*hit).clone());
                }
                let mut c = (*hit).clone();
                for &t in rest {
                    c.push(t).ok()?;
                }
                if c.at_boundary() {
                    self.insert(&c);
                }
                return Some(c);
            }
        }
        let c = GameCursor::from_tokens(tokens).ok()?;
        if c.at_boundary() {
            self.insert(&c);
        }
        Some(c)
    }
}

/// A model whose every distribution is derived from the rules.
pub struct ReferenceModel {
    behavior: Behavior,
    probe: Option<ReferenceProbe>,
    cache: CursorCache,
}

/// Default trap: no piece can ever move from a1 to b4.
pub const DEFAULT_TRAP: Move = Move::new(Square::A1, Square::B4);
pub const DEFAULT_FLAW_MASS: f64 = 0.9;

impl ReferenceModel {
    pub fn new(behavior: Behavior) -> Self {
        ReferenceModel { behavior, probe: None, cache: CursorCache::default() }
    }

    pub fn perfect() -> Self {
        Self::new(Behavior::PerfectLegal)
    }

    pub fn seeded_flaw(trigger: Trigger) -> Self {
        Self::new(Behavior::SeededFlaw { trigger, trap: DEFAULT_TRAP, mass: DEFAULT_FLAW_MASS })
    }

    pub fn length_flaw(plies: usize) -> Self {
        Self::new(Behavior::LengthFlaw { plies, eos_mass: DEFAULT_FLAW_MASS })
    }

    pub fn with_probe(mut self, probe: ReferenceProbe) -> Self {
        self.probe = Some(probe);
        self
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    fn triggered(&self, c: &GameCursor) -> bool {
        if !c.at_boundary() || c.terminal_kind().is_terminal() {
            return false;
        }
        match self.behavior {
            Behavior::PerfectLegal => false,
            Behavior::SeededFlaw { trigger: Trigger::Always, .. } => true,
            Behavior::SeededFlaw { trigger: Trigger::LastMoveCapture, .. } => c.last_move_was_capture(),
            Behavior::LengthFlaw { plies, .. } => c.plies() >= plies,
        }
    }

    fn dist_for(&self, tokens: &[TokenId]) -> ModelDistribution {
        let Some(c) = self.cache.resolve(tokens) else {
            return self.off_track(tokens);
        };
        if c.phase() == Phase::Ended {
            return ModelDistribution::one_hot(TokenId::PAD);
        }
        let perfect = ModelDistribution::from_array(c.pd_targets().probs);
        if !self.triggered(&c) {
            return perfect;
        }
        match self.behavior {
            Behavior::SeededFlaw { trap, mass, .. } => {
                ModelDistribution::mix(mass, &ModelDistribution::one_hot(TokenId::square(trap.from)), &perfect)
            }
            Behavior::LengthFlaw { eos_mass, .. } => {
                ModelDistribution::mix(eos_mass, &ModelDistribution::one_hot(TokenId::EOS), &perfect)
            }
            Behavior::PerfectLegal => perfect,
        }
    }

    /// Distribution after an invalid prefix: the trap is completed, anything
    /// else ends the sequence.
    fn off_track(&self, tokens: &[TokenId]) -> ModelDistribution {
        if let Behavior::SeededFlaw { trap, .. } = self.behavior {
            if let Some((&last, base)) = tokens.split_last() {
                if last == TokenId::square(trap.from) && self.cache.resolve(base).is_some_and(|c| self.triggered(&c)) {
                    return ModelDistribution::one_hot(TokenId::square(trap.to));
                }
            }
        }
        ModelDistribution::one_hot(TokenId::EOS)
    }
}

impl SequenceModel for ReferenceModel {
    fn capabilities(&self) -> Capabilities {
        Capabilities { dist_batch: true, probe: self.probe.is_some(), grad_cos: false }
    }

    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
        if tokens.first() != Some(&TokenId::BOS) {
            return Err(GatewayError::MissingBos);
        }
        Ok(self.dist_for(tokens))
    }

    fn probe_board(&self, tokens: &[TokenId]) -> Result<ProbeBoard> {
        let Some(kind) = self.probe else {
            return Err(GatewayError::CapabilityMissing("probe"));
        };
        let Some(c) = self.cache.resolve(tokens) else {
            return Ok(ProbeBoard::uniform());
        };
        let board = c.board();
        let mut pb = ProbeBoard::exact(board.position().placement());
        match kind {
            ReferenceProbe::Perfect => {}
            ReferenceProbe::SwapSquares(a, b) => pb.swap_squares(a, b),
            ReferenceProbe::CorruptAfterKnightMove => {
                if let Some(m) = c.moves().last() {
                    let knight = board.piece_at(m.to).is_some_and(|p| p.kind == PieceKind::Knight);
                    if knight && m.promotion.is_none() {
                        let mut empty = [0.0; PROBE_CLASSES];
                        empty[0] = 1.0;
                        *pb.square_mut(m.to) = empty;
                    }
                }
            }
            ReferenceProbe::Uniform => pb = ProbeBoard::uniform(),
        }
        Ok(pb)
    }
}

/// Uniform over the whole vocabulary regardless of context.
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformModel;

impl SequenceModel for UniformModel {
    fn capabilities(&self) -> Capabilities {
        Capabilities { dist_batch: true, ..Capabilities::default() }
    }

    fn next_token_dist(&self, _tokens: &[TokenId]) -> Result<ModelDistribution> {
        Ok(ModelDistribution::uniform())
    }
}

/// A perfect model mixed with deterministic pseudo-random noise: each
/// prefix hashes to a sparse random distribution that receives `noise`
/// of the mass. Invalid prefixes get the noise distribution alone.
pub struct NoisyModel {
    noise: f64,
    seed: u64,
    perfect: ReferenceModel,
}

const NOISE_SUPPORT: usize = 6;

impl NoisyModel {
    pub fn new(noise: f64, seed: u64) -> Self {
        assert!((0.0..=1.0).contains(&noise), "noise weight must be in [0, 1]");
        NoisyModel { noise, seed, perfect: ReferenceModel::perfect() }
    }

    fn noise_dist(&self, tokens: &[TokenId]) -> ModelDistribution {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for t in tokens {
            h = (h ^ t.id() as u64).wrapping_mul(0x1000_0000_01b3).rotate_left(29);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let mut probs = [0.0; VOCAB_SIZE];
        for _ in 0..NOISE_SUPPORT {
            probs[rng.gen_range(0..VOCAB_SIZE)] += rng.gen_range(0.05..1.0);
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        ModelDistribution::from_array(probs)
    }
}

impl SequenceModel for NoisyModel {
    fn capabilities(&self) -> Capabilities {
        Capabilities { dist_batch: true, ..Capabilities::default() }
    }

    fn next_token_dist(&self, tokens: &[TokenId]) -> Result<ModelDistribution> {
        if tokens.first() != Some(&TokenId::BOS) {
            return Err(GatewayError::MissingBos);
        }
        let noise = self.noise_dist(tokens);
        Ok(match self.perfect.cache.resolve(tokens) {
            Some(_) => ModelDistribution::mix(self.noise, &noise, &self.perfect.dist_for(tokens)),
            None => noise,
        })
    }
}

/// Models available by name, as used by `builtin:<name>` endpoints:
/// `perfect`, `perfect-probe`, `noisy-probe`, `knight-blind-probe`,
/// `seeded-flaw`, `seeded-flaw-always`, `length-flaw:<plies>`, `uniform`
/// and `noisy:<weight>:<seed>`.
pub fn builtin(name: &str) -> Option<Box<dyn SequenceModel>> {
    let (head, arg) = match name.split_once(':') {
        Some((h, a)) => (h, Some(a)),
        None => (name, None),
    };
    let model: Box<dyn SequenceModel> = match (head, arg) {
        ("perfect", None) => Box::new(ReferenceModel::perfect()),
        ("perfect-probe", None) => Box::new(ReferenceModel::perfect().with_probe(ReferenceProbe::Perfect)),
        ("noisy-probe", None) => {
            Box::new(ReferenceModel::perfect().with_probe(ReferenceProbe::SwapSquares(Square::E2, Square::E4)))
        }
        ("knight-blind-probe", None) => {
            Box::new(ReferenceModel::perfect().with_probe(ReferenceProbe::CorruptAfterKnightMove))
        }
        ("seeded-flaw", None) => Box::new(ReferenceModel::seeded_flaw(Trigger::LastMoveCapture)),
        ("seeded-flaw-always", None) => Box::new(ReferenceModel::seeded_flaw(Trigger::Always)),
        ("length-flaw", Some(l)) => Box::new(ReferenceModel::length_flaw(l.parse().ok()?)),
        ("uniform", None) => Box::new(UniformModel),
        ("noisy", Some(rest)) => {
            let (w, seed) = rest.split_once(':')?;
            let w: f64 = w.parse().ok()?;
            if !(0.0..=1.0).contains(&w) {
                return None;
            }
            Box::new(NoisyModel::new(w, seed.parse().ok()?))
        }
        _ => return None,
    };
    Some(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{decode_move, move_probability, probe_board, DecodingPolicy, ModelOutput};
    use rand::SeedableRng;

    fn cursor(moves: &[&str]) -> GameCursor {
        GameCursor::from_moves(&moves.iter().map(|m| m.parse().unwrap()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_decodes_legal_moves_through_a_game() {
        let model = ReferenceModel::perfect();
        let mut c = GameCursor::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = DecodingPolicy::top_k(71, 1).unwrap();
        for _ in 0..200 {
            let d = decode_move(&model, c.tokens(), &policy, &mut rng).unwrap();
            match d.output {
                ModelOutput::Move(m) => c.push_move(m).unwrap(),
                ModelOutput::Eos => {
                    assert!(c.terminal_kind().is_terminal());
                    break;
                }
                ModelOutput::Fault(f) => panic!("fault {f:?}"),
            }
        }
    }

    #[test]
    fn seeded_flaw_fires_only_after_captures() {
        let model = ReferenceModel::seeded_flaw(Trigger::LastMoveCapture);
        let quiet = cursor(&["e2e4", "d7d5"]);
        let d = model.next_token_dist(quiet.tokens()).unwrap();
        assert_eq!(d, ReferenceModel::perfect().next_token_dist(quiet.tokens()).unwrap());
        let capture = cursor(&["e2e4", "d7d5", "e4d5"]);
        let d = model.next_token_dist(capture.tokens()).unwrap();
        assert!((d.prob(TokenId::square(Square::A1)) - 0.9).abs() < 1e-12);
        assert!((move_probability(&model, capture.tokens(), DEFAULT_TRAP).unwrap() - 0.9).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = decode_move(&model, capture.tokens(), &DecodingPolicy::greedy(), &mut rng).unwrap();
        assert_eq!(out.output, ModelOutput::Move(DEFAULT_TRAP));
    }

    #[test]
    fn length_flaw_switches_to_eos() {
        let model = ReferenceModel::length_flaw(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = cursor(&["e2e4"]);
        let out = decode_move(&model, one.tokens(), &DecodingPolicy::greedy(), &mut rng).unwrap();
        assert!(matches!(out.output, ModelOutput::Move(_)));
        let two = cursor(&["e2e4", "e7e5"]);
        let out = decode_move(&model, two.tokens(), &DecodingPolicy::greedy(), &mut rng).unwrap();
        assert_eq!(out.output, ModelOutput::Eos);
    }

    #[test]
    fn probes() {
        let c = cursor(&["g1f3"]);
        let exact = ReferenceModel::perfect().with_probe(ReferenceProbe::Perfect);
        let pb = probe_board(&exact, c.tokens()).unwrap();
        assert_eq!(&pb.argmax_placement(), c.board().position().placement());

        let swap = ReferenceModel::perfect().with_probe(ReferenceProbe::SwapSquares(Square::E2, Square::E4));
        let pb = probe_board(&swap, c.tokens()).unwrap();
        let diff = pb.argmax_placement().iter().zip(c.board().position().placement()).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 2);

        let blind = ReferenceModel::perfect().with_probe(ReferenceProbe::CorruptAfterKnightMove);
        let pb = probe_board(&blind, c.tokens()).unwrap();
        assert_eq!(pb.argmax_placement()[Square::F3.index()], None);
        let pawn = cursor(&["e2e4"]);
        let pb = probe_board(&blind, pawn.tokens()).unwrap();
        assert_eq!(&pb.argmax_placement(), pawn.board().position().placement());

        assert_eq!(probe_board(&ReferenceModel::perfect(), c.tokens()), Err(GatewayError::CapabilityMissing("probe")));
    }

    #[test]
    fn noisy_model_is_deterministic_and_normalized() {
        let m = NoisyModel::new(0.25, 5);
        let c = cursor(&["d2d4"]);
        let a = m.next_token_dist(c.tokens()).unwrap();
        let b = m.next_token_dist(c.tokens()).unwrap();
        assert_eq!(a, b);
        assert!((a.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let legal = c.legal_token_set();
        let inside: f64 = legal.iter().map(|t| a.prob(t)).sum();
        assert!((0.75 - 1e-12..1.0).contains(&inside));
    }

    #[test]
    fn builtin_names() {
        for name in ["perfect", "perfect-probe", "seeded-flaw", "length-flaw:30", "uniform", "noisy:0.2:3"] {
            assert!(builtin(name).is_some(), "{name}");
        }
        for name in ["perfect:1", "length-flaw", "noisy:2:1", "nope"] {
            assert!(builtin(name).is_none(), "{name}");
        }
    }
}
