//! Dynamic trust scoring.
//!
//! Task outcomes are reduced to a score in `[0, 1]` by a context-weighted
//! sum of four features. Scores feed a Beta posterior as fractional
//! successes, with both pseudo-counts decayed before each update so recent
//! outcomes dominate. Peer feedback is collected in report rounds; reporters
//! far from the consensus are flagged and penalized, the rest rewarded.

pub mod game;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{Hash32, LedgerError, Payload, RecordKind};
use crate::AgentId;

#[derive(Debug, Error)]
pub enum ReputationError {
    #[error("context weights sum to {0}, expected 1")]
    WeightsNotNormalized(f64),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("decay {0} outside (0, 1]")]
    DecayOutOfRange(f64),
    #[error("report round needs at least one report")]
    NoReports,
    #[error("report {value} from {reporter} outside [0, 1]")]
    ReportOutOfRange { reporter: AgentId, value: f64 },
    #[error("feature {name} = {value} outside [0, 1]")]
    FeatureOutOfRange { name: &'static str, value: f64 },
    #[error("no token account for {0}")]
    UnknownAccount(AgentId),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Observable per-task behavior of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskFeatures {
    pub completion: f64,
    pub timeliness: f64,
    pub resource_contribution: f64,
    pub peer_feedback: f64,
}

impl TaskFeatures {
    /// `clamp(1 − delay/deadline, 0, 1)`; a zero deadline means any delay is late.
    pub fn timeliness_from(delay: f64, deadline: f64) -> f64 {
        if deadline <= 0.0 {
            return if delay <= 0.0 { 1.0 } else { 0.0 };
        }
        (1.0 - delay / deadline).clamp(0.0, 1.0)
    }

    fn as_array(&self) -> [f64; 4] {
        [
            self.completion,
            self.timeliness,
            self.resource_contribution,
            self.peer_feedback,
        ]
    }

    pub fn validate(&self) -> Result<(), ReputationError> {
        const NAMES: [&str; 4] = ["completion", "timeliness", "resource_contribution", "peer_feedback"];
        for (name, value) in NAMES.into_iter().zip(self.as_array()) {
            if !(0.0..=1.0).contains(&value) {
                return Err(ReputationError::FeatureOutOfRange { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextWeights {
    pub context_id: String,
    pub weights: [f64; 4],
}

impl ContextWeights {
    pub fn uniform(context_id: impl Into<String>) -> Self {
        ContextWeights {
            context_id: context_id.into(),
            weights: [0.25; 4],
        }
    }

    pub fn validate(&self) -> Result<(), ReputationError> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite())
            || (sum - 1.0).abs() > WEIGHT_TOLERANCE
        {
            return Err(ReputationError::WeightsNotNormalized(sum));
        }
        Ok(())
    }
}

pub fn score_task(features: &TaskFeatures, weights: &ContextWeights) -> Result<f64, ReputationError> {
    weights.validate()?;
    features.validate()?;
    let s: f64 = features
        .as_array()
        .iter()
        .zip(weights.weights)
        .map(|(f, w)| f * w)
        .sum();
    Ok(s.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReputationProfile {
    pub agent_id: AgentId,
    pub alpha: f64,
    pub beta: f64,
    pub last_update_epoch: u64,
}

impl ReputationProfile {
    pub fn new(agent_id: impl Into<AgentId>, alpha: f64, beta: f64) -> Self {
        ReputationProfile {
            agent_id: agent_id.into(),
            alpha,
            beta,
            last_update_epoch: 0,
        }
    }

    pub fn evidence_mass(&self) -> f64 {
        self.alpha + self.beta
    }
}

/// Posterior mean `alpha / (alpha + beta)`.
pub fn reputation(profile: &ReputationProfile) -> f64 {
    profile.alpha / (profile.alpha + profile.beta)
}

/// Decay both pseudo-counts, then add `score` successes and `1 − score`
/// failures.
pub fn update_posterior(
    profile: &ReputationProfile,
    score: f64,
    decay: f64,
) -> Result<ReputationProfile, ReputationError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(ReputationError::ScoreOutOfRange(score));
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(ReputationError::DecayOutOfRange(decay));
    }
    Ok(ReputationProfile {
        agent_id: profile.agent_id.clone(),
        alpha: decay * profile.alpha + score,
        beta: decay * profile.beta + (1.0 - score),
        last_update_epoch: profile.last_update_epoch,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusStatistic {
    #[default]
    Median,
    Mean,
}

/// Constants of the reputation engine and the reporting game.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReputationParams {
    pub decay: f64,
    pub prior_alpha: f64,
    pub prior_beta: f64,
    /// Per-context weight overrides; contexts not listed use uniform weights.
    pub contexts: BTreeMap<String, [f64; 4]>,
    pub report_tolerance: f64,
    pub quorum: usize,
    pub consensus: ConsensusStatistic,
    pub honest_reward: u64,
    pub dishonest_penalty: u64,
    pub exclusion_strikes: u32,
}

impl Default for ReputationParams {
    fn default() -> Self {
        ReputationParams {
            decay: 0.95,
            prior_alpha: 1.0,
            prior_beta: 1.0,
            contexts: BTreeMap::new(),
            report_tolerance: 0.15,
            quorum: 3,
            consensus: ConsensusStatistic::Median,
            honest_reward: 1,
            dishonest_penalty: 5,
            exclusion_strikes: 3,
        }
    }
}

impl ReputationParams {
    pub fn weights_for(&self, context: &str) -> ContextWeights {
        match self.contexts.get(context) {
            Some(w) => ContextWeights {
                context_id: context.to_string(),
                weights: *w,
            },
            None => ContextWeights::uniform(context),
        }
    }

    pub fn validate(&self) -> Result<(), ReputationError> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(ReputationError::DecayOutOfRange(self.decay));
        }
        for (ctx, w) in &self.contexts {
            ContextWeights {
                context_id: ctx.clone(),
                weights: *w,
            }
            .validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRound {
    pub task_id: String,
    pub subject_agent: AgentId,
    pub reports: BTreeMap<AgentId, f64>,
    pub flags: BTreeSet<AgentId>,
    pub consensus: f64,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Consensus plus outlier flags. Flags are raised only at or above `quorum`
/// reports.
pub fn collect_reports(
    task_id: impl Into<String>,
    subject: impl Into<AgentId>,
    reports: BTreeMap<AgentId, f64>,
    tolerance: f64,
    quorum: usize,
    statistic: ConsensusStatistic,
) -> Result<ReportRound, ReputationError> {
    if reports.is_empty() {
        return Err(ReputationError::NoReports);
    }
    if let Some((reporter, value)) = reports.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(ReputationError::ReportOutOfRange {
            reporter: reporter.clone(),
            value: *value,
        });
    }
    let mut values: Vec<f64> = reports.values().copied().collect();
    let consensus = match statistic {
        ConsensusStatistic::Median => median(&mut values),
        ConsensusStatistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
    };
    let flags = if reports.len() >= quorum {
        reports
            .iter()
            .filter(|(_, v)| (*v - consensus).abs() > tolerance)
            .map(|(r, _)| r.clone())
            .collect()
    } else {
        BTreeSet::new()
    };
    Ok(ReportRound {
        task_id: task_id.into(),
        subject_agent: subject.into(),
        reports,
        flags,
        consensus,
    })
}

/// Requested consequences of one report round, before stake floors apply.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoundPayoffs {
    pub rewards: BTreeMap<AgentId, u64>,
    pub penalties: BTreeMap<AgentId, u64>,
    pub strikes: BTreeSet<AgentId>,
    /// Posterior updates in application order: reporters, then the subject.
    pub posterior_scores: Vec<(AgentId, f64)>,
}

pub fn apply_payoffs(round: &ReportRound, params: &ReputationParams) -> RoundPayoffs {
    let mut out = RoundPayoffs::default();
    for reporter in round.reports.keys() {
        if round.flags.contains(reporter) {
            out.penalties.insert(reporter.clone(), params.dishonest_penalty);
            out.strikes.insert(reporter.clone());
            out.posterior_scores.push((reporter.clone(), 0.0));
        } else {
            out.rewards.insert(reporter.clone(), params.honest_reward);
            out.posterior_scores.push((reporter.clone(), 1.0));
        }
    }
    out.posterior_scores
        .push((round.subject_agent.clone(), round.consensus));
    out
}

/// Where token-side consequences land. The arbitration contract implements
/// this against staked accounts; `game` uses a plain in-memory book.
pub trait TokenBook {
    /// Mint a reward.
    fn credit(&mut self, agent: &str, tokens: u64, reason: &str) -> Result<u64, ReputationError>;
    /// Deduct up to `tokens`, flooring at zero; returns the amount taken.
    fn debit(&mut self, agent: &str, tokens: u64, reason: &str) -> Result<u64, ReputationError>;
    /// Record a strike; returns the new count.
    fn add_strike(&mut self, agent: &str) -> Result<u32, ReputationError>;
}

/// Anchors intermediate evidence on the ledger.
pub trait EventSink {
    fn emit(&mut self, kind: RecordKind, payload: Payload) -> Result<Option<Hash32>, LedgerError>;
}

struct Split<'a, B, S> {
    book: &'a mut B,
    sink: &'a mut S,
}

impl<B: TokenBook, S> TokenBook for Split<'_, B, S> {
    fn credit(&mut self, agent: &str, tokens: u64, reason: &str) -> Result<u64, ReputationError> {
        self.book.credit(agent, tokens, reason)
    }
    fn debit(&mut self, agent: &str, tokens: u64, reason: &str) -> Result<u64, ReputationError> {
        self.book.debit(agent, tokens, reason)
    }
    fn add_strike(&mut self, agent: &str) -> Result<u32, ReputationError> {
        self.book.add_strike(agent)
    }
}

impl<B, S: EventSink> EventSink for Split<'_, B, S> {
    fn emit(&mut self, kind: RecordKind, payload: Payload) -> Result<Option<Hash32>, LedgerError> {
        self.sink.emit(kind, payload)
    }
}

/// Discards events.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _kind: RecordKind, _payload: Payload) -> Result<Option<Hash32>, LedgerError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Settlement {
    /// Net token change actually applied per agent.
    pub token_deltas: BTreeMap<AgentId, i64>,
    /// Agents that reached the exclusion strike count in this round.
    pub newly_excluded: BTreeSet<AgentId>,
    pub update_records: Vec<Hash32>,
}

/// Holds one posterior per agent.
#[derive(Debug, Clone)]
pub struct ReputationEngine {
    params: ReputationParams,
    profiles: BTreeMap<AgentId, ReputationProfile>,
}

impl ReputationEngine {
    pub fn new(params: ReputationParams) -> Self {
        ReputationEngine {
            params,
            profiles: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> &ReputationParams {
        &self.params
    }

    pub fn ensure(&mut self, agent: &str) -> &ReputationProfile {
        let (a, b) = (self.params.prior_alpha, self.params.prior_beta);
        self.profiles
            .entry(agent.to_string())
            .or_insert_with(|| ReputationProfile::new(agent, a, b))
    }

    pub fn profile(&self, agent: &str) -> Option<&ReputationProfile> {
        self.profiles.get(agent)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &ReputationProfile> {
        self.profiles.values()
    }

    /// Reputation of `agent`, or the prior mean if unseen.
    pub fn score_of(&self, agent: &str) -> f64 {
        self.profiles.get(agent).map_or_else(
            || self.params.prior_alpha / (self.params.prior_alpha + self.params.prior_beta),
            reputation,
        )
    }

    /// Apply one posterior update and anchor it through `sink`.
    pub fn update(
        &mut self,
        agent: &str,
        score: f64,
        epoch: u64,
        source: &str,
        sink: &mut impl EventSink,
    ) -> Result<Option<Hash32>, ReputationError> {
        let decay = self.params.decay;
        self.ensure(agent);
        let profile = self.profiles.get_mut(agent).expect("ensured");
        let mut next = update_posterior(profile, score, decay)?;
        next.last_update_epoch = epoch;
        *profile = next;
        let payload = Payload::new()
            .with("event", "posterior_update")
            .with("agent", agent)
            .with("source", source)
            .with("score", score)
            .with("alpha", profile.alpha)
            .with("beta", profile.beta);
        Ok(sink.emit(RecordKind::Report, payload)?)
    }

    /// Apply a round's payoffs to tokens, strikes and posteriors.
    pub fn settle(
        &mut self,
        round: &ReportRound,
        payoffs: &RoundPayoffs,
        epoch: u64,
        book: &mut impl TokenBook,
        sink: &mut impl EventSink,
    ) -> Result<Settlement, ReputationError> {
        self.settle_on(round, payoffs, epoch, &mut Split { book, sink })
    }

    /// [`ReputationEngine::settle`] against one object that is both book and
    /// sink, such as the arbitration contract.
    pub fn settle_on<C: TokenBook + EventSink>(
        &mut self,
        round: &ReportRound,
        payoffs: &RoundPayoffs,
        epoch: u64,
        ctx: &mut C,
    ) -> Result<Settlement, ReputationError> {
        let mut out = Settlement::default();
        for (agent, tokens) in &payoffs.rewards {
            let got = ctx.credit(agent, *tokens, "honest_report")?;
            *out.token_deltas.entry(agent.clone()).or_default() += got as i64;
        }
        for (agent, tokens) in &payoffs.penalties {
            let taken = ctx.debit(agent, *tokens, "dishonest_report")?;
            *out.token_deltas.entry(agent.clone()).or_default() -= taken as i64;
        }
        for agent in &payoffs.strikes {
            if ctx.add_strike(agent)? == self.params.exclusion_strikes {
                out.newly_excluded.insert(agent.clone());
            }
        }
        let round_record = ctx.emit(
            RecordKind::Report,
            Payload::new()
                .with("event", "report_round")
                .with("task_id", &round.task_id)
                .with("subject", &round.subject_agent)
                .with("consensus", round.consensus)
                .with("reporters", join(round.reports.keys()))
                .with("flags", join(round.flags.iter())),
        )?;
        out.update_records.extend(round_record);
        for (agent, score) in &payoffs.posterior_scores {
            let source = if *agent == round.subject_agent { "consensus" } else { "reporting" };
            if let Some(id) = self.update(agent, *score, epoch, source, ctx)? {
                out.update_records.push(id);
            }
        }
        Ok(out)
    }
}

pub(crate) fn join<'a>(items: impl Iterator<Item = &'a String>) -> String {
    items.map(String::as_str).collect::<Vec<_>>().join(",")
}
