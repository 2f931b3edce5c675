//! Repeated reporting game.
//!
//! Each round a random subset of the population reports on an external
//! subject of known quality. Honest reporters add small observation noise;
//! deviators report a coordinated, biased value and pocket a private
//! collusion gain. Report rounds, payoffs and strikes run through the same
//! functions the live system uses.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{apply_payoffs, collect_reports, NullSink, ReputationEngine, ReputationError, ReputationParams, TokenBook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Honest,
    Deviate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub population: usize,
    pub reporters_per_round: usize,
    pub rounds: usize,
    pub initial_stake: u64,
    pub honest_noise: f64,
    pub deviation_bias: f64,
    /// Immediate private benefit of a dishonest report.
    pub collusion_gain: f64,
    /// Per-round probability that an agent revisits its strategy.
    pub revision_rate: f64,
    /// Counterfactual rounds a revising agent plays out per strategy.
    pub revision_samples: usize,
    pub initial_honest_share: f64,
}

impl Default for GameConfig {
    fn default() -> Self {
        GameConfig {
            population: 20,
            reporters_per_round: 7,
            rounds: 1000,
            initial_stake: 100,
            honest_noise: 0.03,
            deviation_bias: 0.4,
            collusion_gain: 1.0,
            revision_rate: 0.05,
            revision_samples: 64,
            initial_honest_share: 0.6,
        }
    }
}

/// In-memory stakes and strikes.
#[derive(Debug, Clone, Default)]
pub struct SimpleBook {
    pub stakes: BTreeMap<String, u64>,
    pub strikes: BTreeMap<String, u32>,
}

impl TokenBook for SimpleBook {
    fn credit(&mut self, agent: &str, tokens: u64, _reason: &str) -> Result<u64, ReputationError> {
        *self.stakes.entry(agent.to_string()).or_default() += tokens;
        Ok(tokens)
    }

    fn debit(&mut self, agent: &str, tokens: u64, _reason: &str) -> Result<u64, ReputationError> {
        let stake = self.stakes.entry(agent.to_string()).or_default();
        let taken = tokens.min(*stake);
        *stake -= taken;
        Ok(taken)
    }

    fn add_strike(&mut self, agent: &str) -> Result<u32, ReputationError> {
        let s = self.strikes.entry(agent.to_string()).or_default();
        *s += 1;
        Ok(*s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundResult {
    pub payoffs: BTreeMap<usize, f64>,
    pub honest_reporters: usize,
}

/// Mutable state of one game instance.
pub struct ReportingGame {
    cfg: GameConfig,
    params: ReputationParams,
    rng: ChaCha8Rng,
    names: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub totals: Vec<f64>,
    book: SimpleBook,
    engine: ReputationEngine,
    round: usize,
}

impl ReportingGame {
    pub fn new(cfg: GameConfig, params: ReputationParams, strategies: Vec<Strategy>, seed: u64) -> Self {
        let names: Vec<String> = (0..strategies.len()).map(|i| format!("reporter-{i:03}")).collect();
        let mut book = SimpleBook::default();
        for n in &names {
            book.stakes.insert(n.clone(), cfg.initial_stake);
        }
        ReportingGame {
            totals: vec![0.0; strategies.len()],
            engine: ReputationEngine::new(params.clone()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg,
            params,
            names,
            strategies,
            book,
            round: 0,
        }
    }

    pub fn is_excluded(&self, i: usize) -> bool {
        self.book.strikes.get(&self.names[i]).copied().unwrap_or(0) >= self.params.exclusion_strikes
    }

    pub fn stake(&self, i: usize) -> u64 {
        self.book.stakes[&self.names[i]]
    }

    /// Subject quality of the round and each play's report.
    fn draw_reports(&mut self, plays: &[(usize, Strategy)]) -> (f64, BTreeMap<String, f64>) {
        let quality: f64 = self.rng.random_range(0.2..0.8);
        let noise = Normal::new(0.0, self.cfg.honest_noise).expect("valid sigma");
        let mut reports = BTreeMap::new();
        for &(i, s) in plays {
            let value = match s {
                Strategy::Honest => quality + noise.sample(&mut self.rng),
                Strategy::Deviate => quality + self.cfg.deviation_bias,
            };
            reports.insert(self.names[i].clone(), value.clamp(0.0, 1.0));
        }
        (quality, reports)
    }

    /// Token payoff of `i` in a settled round, collusion gain included.
    fn payoff_of(&self, i: usize, strategy: Strategy, pay: &super::RoundPayoffs) -> f64 {
        let name = &self.names[i];
        let tokens = pay.rewards.get(name).copied().unwrap_or(0) as f64 - pay.penalties.get(name).copied().unwrap_or(0) as f64;
        match strategy {
            Strategy::Honest => tokens,
            Strategy::Deviate => tokens + self.cfg.collusion_gain,
        }
    }

    /// Expected per-report payoff of `i` playing honest and deviate against
    /// the current strategies of everyone else, estimated over
    /// `revision_samples` counterfactual rounds with common random numbers.
    /// Nothing is settled.
    pub fn expected_payoffs(&mut self, i: usize) -> Result<(f64, f64), ReputationError> {
        let others: Vec<usize> = (0..self.names.len()).filter(|&j| j != i && !self.is_excluded(j)).collect();
        let m = (self.cfg.reporters_per_round.min(others.len() + 1)).saturating_sub(1);
        let n = self.cfg.revision_samples.max(1);
        let (mut honest, mut deviate) = (0.0, 0.0);
        for k in 0..n {
            let mut plays: Vec<(usize, Strategy)> = sample(&mut self.rng, others.len(), m)
                .into_iter()
                .map(|j| (others[j], self.strategies[others[j]]))
                .collect();
            plays.push((i, Strategy::Honest));
            let (quality, honest_reports) = self.draw_reports(&plays);
            // the same round with only i's report changed
            let mut deviate_reports = honest_reports.clone();
            deviate_reports.insert(self.names[i].clone(), (quality + self.cfg.deviation_bias).clamp(0.0, 1.0));
            for (st, reports, acc) in [
                (Strategy::Honest, honest_reports, &mut honest),
                (Strategy::Deviate, deviate_reports, &mut deviate),
            ] {
                let round = collect_reports(
                    format!("counterfactual-{k}"),
                    "subject",
                    reports,
                    self.params.report_tolerance,
                    self.params.quorum,
                    self.params.consensus,
                )?;
                *acc += self.payoff_of(i, st, &apply_payoffs(&round, &self.params));
            }
        }
        Ok((honest / n as f64, deviate / n as f64))
    }

    pub fn play_round(&mut self) -> Result<RoundResult, ReputationError> {
        let active: Vec<usize> = (0..self.names.len()).filter(|&i| !self.is_excluded(i)).collect();
        let m = self.cfg.reporters_per_round.min(active.len());
        let mut chosen: Vec<usize> = sample(&mut self.rng, active.len(), m)
            .into_iter()
            .map(|k| active[k])
            .collect();
        chosen.sort_unstable();
        let plays: Vec<(usize, Strategy)> = chosen.iter().map(|&i| (i, self.strategies[i])).collect();
        let (_, reports) = self.draw_reports(&plays);
        let mut result = RoundResult {
            payoffs: BTreeMap::new(),
            honest_reporters: chosen.iter().filter(|&&i| self.strategies[i] == Strategy::Honest).count(),
        };
        self.round += 1;
        if reports.is_empty() {
            return Ok(result);
        }
        let round = collect_reports(
            format!("round-{}", self.round),
            "subject",
            reports,
            self.params.report_tolerance,
            self.params.quorum,
            self.params.consensus,
        )?;
        let pay = apply_payoffs(&round, &self.params);
        let settled = self.engine.settle(&round, &pay, 0, &mut self.book, &mut NullSink)?;
        for &i in &chosen {
            let mut p = settled.token_deltas.get(&self.names[i]).copied().unwrap_or(0) as f64;
            if self.strategies[i] == Strategy::Deviate {
                p += self.cfg.collusion_gain;
            }
            self.totals[i] += p;
            result.payoffs.insert(i, p);
        }
        Ok(result)
    }
}

/// Mean per-round payoff of each strategy under fixed strategies.
#[derive(Debug, Clone, Serialize)]
pub struct DominanceOutcome {
    pub honest_mean: f64,
    pub deviate_mean: f64,
    pub min_honest_reporters: usize,
}

pub fn play_fixed(
    cfg: &GameConfig,
    params: &ReputationParams,
    strategies: Vec<Strategy>,
    seed: u64,
) -> Result<DominanceOutcome, ReputationError> {
    let mut game = ReportingGame::new(cfg.clone(), params.clone(), strategies, seed);
    let mut min_honest = usize::MAX;
    for _ in 0..cfg.rounds {
        min_honest = min_honest.min(game.play_round()?.honest_reporters);
    }
    let mean_of = |s: Strategy| {
        let v: Vec<f64> = game
            .strategies
            .iter()
            .zip(&game.totals)
            .filter(|(st, _)| **st == s)
            .map(|(_, t)| t / cfg.rounds as f64)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(DominanceOutcome {
        honest_mean: mean_of(Strategy::Honest),
        deviate_mean: mean_of(Strategy::Deviate),
        min_honest_reporters: min_honest,
    })
}

/// Best-response dynamics: after every round each agent still allowed to
/// report, with probability `revision_rate`, adopts the strategy with the
/// higher expected payoff against the current population (ties keep the
/// current one). Returns, per round, the honest share among agents not
/// excluded, and among the whole population.
pub fn play_best_response(
    cfg: &GameConfig,
    params: &ReputationParams,
    seed: u64,
) -> Result<Vec<(f64, f64)>, ReputationError> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let n_honest = (cfg.initial_honest_share * cfg.population as f64).round() as usize;
    let mut strategies = vec![Strategy::Deviate; cfg.population];
    for k in sample(&mut init_rng, cfg.population, n_honest.min(cfg.population)) {
        strategies[k] = Strategy::Honest;
    }
    let mut game = ReportingGame::new(cfg.clone(), params.clone(), strategies, seed);
    let mut shares = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        game.play_round()?;
        for i in 0..cfg.population {
            if game.is_excluded(i) || !game.rng.random_bool(cfg.revision_rate) {
                continue;
            }
            let (h, d) = game.expected_payoffs(i)?;
            if h > d {
                game.strategies[i] = Strategy::Honest;
            } else if d > h {
                game.strategies[i] = Strategy::Deviate;
            }
        }
        let honest = |i: &usize| game.strategies[*i] == Strategy::Honest;
        let active: Vec<usize> = (0..cfg.population).filter(|&i| !game.is_excluded(i)).collect();
        let among_active = active.iter().filter(|i| honest(i)).count() as f64 / active.len().max(1) as f64;
        let overall = (0..cfg.population).filter(honest).count() as f64 / cfg.population as f64;
        shares.push((among_active, overall));
    }
    Ok(shares)
}
