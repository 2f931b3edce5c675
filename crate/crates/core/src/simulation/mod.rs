//! Seeded scenario harness driving the full regulation loop.
//!
//! Each epoch generates binary-answer tasks, lets every agent's policy act,
//! forms coalitions, runs report rounds through the reputation engine with
//! the arbitration contract as token book and event sink, closes the epoch
//! (seal plus slashing), files disputes for rule violations seen in sealed
//! records, and, once the honest warm-up is over, scores every agent with the
//! diffusion forecaster. All randomness flows from `ScenarioConfig::seed`.

pub mod aggregate;
pub mod experiments;
pub mod policy;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use ed25519_dalek::SigningKey;
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbitration::{ArbitrationContract, ArbitrationError, ArbitrationParams, Privilege, TokenAudit, CONTRACT_ID};
use crate::forecasting::detect::{default_t_star, MIN_CALIBRATION};
use crate::forecasting::{
    anomaly_scores, build_schedule, calibration_scores, featurize, forecast_alerts, train_denoiser, Calibration, Cutpoints,
    DetectionMetrics, Denoiser, FeatureConfig, ForecastError, NoiseSchedule, ScheduleKind, TrainConfig, N_FEATURES,
};
use crate::keys::derive_signing_key;
use crate::ledger::{BehaviorRecord, Hash32, Ledger, LedgerError, Payload, RecordFilter, RecordKind};
use crate::reputation::{
    apply_payoffs, collect_reports, score_task, EventSink, ReputationEngine, ReputationError, ReputationParams,
    TaskFeatures,
};
use crate::AgentId;

pub use aggregate::{aggregate_answers, evaluate_detection, partition, AggregationContext, AggregationMode};
pub use policy::{policy_step, report_value, Actions, AgentPolicy, PolicyKind, PolicyParams, StepState, Task};
pub use report::{write_report, LEDGER_DIR};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no answers to aggregate")]
    NoAnswers,
    #[error("alert for {0} in epoch {1} has no ground-truth label")]
    LabelMismatch(AgentId, u64),
    #[error(transparent)]
    Arbitration(#[from] ArbitrationError),
    #[error(transparent)]
    Reputation(#[from] ReputationError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastingConfig {
    pub enabled: bool,
    pub window: usize,
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Defaults to `max(steps / 20, 1)`.
    pub t_star: Option<usize>,
    pub repetitions: usize,
    pub percentile: f64,
    pub cutpoints: Cutpoints,
    /// Tighten the cutpoints by the number of agents scored per epoch so the
    /// per-epoch false alarm budget holds across the whole population.
    pub family_wise: bool,
    /// Scoring passes over each warm-up trajectory when calibrating.
    pub calibration_draws: usize,
    pub features: FeatureConfig,
    pub train: TrainConfig,
}

impl Default for ForecastingConfig {
    fn default() -> Self {
        ForecastingConfig {
            enabled: true,
            window: 4,
            schedule: ScheduleKind::Linear,
            steps: 100,
            beta_min: 1e-4,
            beta_max: 0.02,
            t_star: None,
            repetitions: 4,
            percentile: 95.0,
            cutpoints: Cutpoints::default(),
            family_wise: true,
            calibration_draws: 8,
            features: FeatureConfig::default(),
            train: TrainConfig {
                learning_rate: 3e-2,
                epochs: 300,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_agents: usize,
    pub n_epochs: u64,
    pub tasks_per_epoch: usize,
    pub coalition_size: usize,
    pub reporters_per_subject: usize,
    pub initial_stake: u64,
    pub task_types: Vec<String>,
    pub capabilities_per_agent: usize,
    pub deadline_ticks: u64,
    pub report_noise: f64,
    /// Fraction of epochs, rounded up, in which every agent behaves honestly
    /// and the forecaster collects its training data.
    pub warmup_fraction: f64,
    pub n_clusters: usize,
    pub policy_mix: BTreeMap<PolicyKind, usize>,
    pub policies: BTreeMap<PolicyKind, PolicyParams>,
    pub arbitration: ArbitrationParams,
    pub reputation: ReputationParams,
    pub forecasting: ForecastingConfig,
    pub aggregation_mode: AggregationMode,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mut policy_mix: BTreeMap<PolicyKind, usize> = PolicyKind::ALL.iter().map(|k| (*k, 0)).collect();
        policy_mix.insert(PolicyKind::Honest, 8);
        ScenarioConfig {
            seed: 0,
            n_agents: 8,
            n_epochs: 20,
            tasks_per_epoch: 4,
            coalition_size: 3,
            reporters_per_subject: 4,
            initial_stake: 100,
            task_types: ["inspection", "routing", "assembly"].map(String::from).to_vec(),
            capabilities_per_agent: 2,
            deadline_ticks: 10,
            report_noise: 0.03,
            warmup_fraction: 0.3,
            n_clusters: 2,
            policy_mix,
            policies: PolicyKind::ALL.iter().map(|k| (*k, PolicyParams::default_for(*k))).collect(),
            arbitration: ArbitrationParams::default(),
            reputation: ReputationParams::default(),
            forecasting: ForecastingConfig::default(),
            aggregation_mode: AggregationMode::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> SimulationError {
    SimulationError::InvalidConfig(msg.into())
}

impl ScenarioConfig {
    /// Mix with `n` agents of each listed kind and none of the others.
    pub fn with_mix(mut self, mix: &[(PolicyKind, usize)]) -> Self {
        for v in self.policy_mix.values_mut() {
            *v = 0;
        }
        for (k, n) in mix {
            self.policy_mix.insert(*k, *n);
        }
        self.n_agents = mix.iter().map(|(_, n)| n).sum();
        self
    }

    pub fn policy_params(&self, kind: PolicyKind) -> PolicyParams {
        self.policies.get(&kind).copied().unwrap_or_else(|| PolicyParams::default_for(kind))
    }

    /// First epoch in which adversarial policies act as themselves.
    pub fn onset_epoch(&self) -> u64 {
        (self.warmup_fraction * self.n_epochs as f64).ceil() as u64
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        if self.n_agents == 0 {
            return Err(invalid("n_agents must be at least 1"));
        }
        let total: usize = self.policy_mix.values().sum();
        if total != self.n_agents {
            return Err(invalid(format!("policy_mix sums to {total}, n_agents is {}", self.n_agents)));
        }
        if self.n_epochs == 0 || self.tasks_per_epoch == 0 || self.coalition_size == 0 {
            return Err(invalid("n_epochs, tasks_per_epoch and coalition_size must be positive"));
        }
        if self.task_types.is_empty() || !(1..=self.task_types.len()).contains(&self.capabilities_per_agent) {
            return Err(invalid("capabilities_per_agent must be within 1..=task_types"));
        }
        if self.task_types.iter().collect::<BTreeSet<_>>().len() != self.task_types.len() {
            return Err(invalid("task_types must be distinct"));
        }
        if self.deadline_ticks == 0 || self.n_clusters == 0 {
            return Err(invalid("deadline_ticks and n_clusters must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction must be in [0, 1)"));
        }
        if !(self.report_noise >= 0.0 && self.report_noise.is_finite()) {
            return Err(invalid("report_noise must be finite and non-negative"));
        }
        for kind in PolicyKind::ALL {
            self.policy_params(kind)
                .validate()
                .map_err(|e| invalid(format!("{}: {e}", kind.as_str())))?;
        }
        if !(0.0..=1.0).contains(&self.arbitration.slash_rate) {
            return Err(invalid("arbitration.slash_rate must be in [0, 1]"));
        }
        if self.initial_stake < self.arbitration.min_stake {
            return Err(invalid("initial_stake below arbitration.min_stake"));
        }
        self.reputation.validate().map_err(|e| invalid(format!("reputation: {e}")))?;
        let f = &self.forecasting;
        if f.window == 0 || f.repetitions == 0 || f.calibration_draws == 0 {
            return Err(invalid("forecasting window, repetitions and calibration_draws must be positive"));
        }
        if !(f.percentile > 0.0 && f.percentile <= 100.0) {
            return Err(invalid("forecasting.percentile must be in (0, 100]"));
        }
        build_schedule(f.schedule, f.steps, f.beta_min, f.beta_max).map_err(|e| invalid(format!("forecasting: {e}")))?;
        if f.t_star.is_some_and(|t| t == 0 || t > f.steps) {
            return Err(invalid("forecasting.t_star must be within 1..=steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentInfo {
    pub agent_id: AgentId,
    pub policy: PolicyKind,
    pub partner: Option<AgentId>,
    pub capabilities: BTreeSet<String>,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReputationRow {
    pub epoch: u64,
    pub agent_id: AgentId,
    pub policy: &'static str,
    pub alpha: f64,
    pub beta: f64,
    pub reputation: f64,
    pub stake: u64,
    pub privileges: &'static str,
    pub strikes: u32,
    pub report_strikes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRow {
    pub epoch: u64,
    pub event: &'static str,
    pub agent_id: AgentId,
    pub amount: u64,
    pub detail: String,
    pub record_id: String,
    pub proof_valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectionRow {
    pub epoch: u64,
    pub agent_id: AgentId,
    pub policy: &'static str,
    pub label: bool,
    pub score: f64,
    pub deviation_probability: f64,
    pub alerted: bool,
    pub action: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationRow {
    pub epoch: u64,
    pub task_id: String,
    pub truth: bool,
    pub n_answers: usize,
    pub non_cooperative: bool,
    pub k_cluster: bool,
    pub reputation_weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastSummary {
    pub trained: bool,
    pub n_train: usize,
    pub final_loss: Option<f64>,
    pub threshold: Option<f64>,
    pub n_calibration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub deposited: u64,
    pub minted: u64,
    pub sink: u64,
    pub total_stake: u64,
    pub conserved: bool,
    pub matches_ledger: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub blocks: usize,
    pub records: usize,
    pub tip: Option<String>,
    pub chain_violations: usize,
    pub unproven_events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub n_agents: usize,
    pub n_epochs: u64,
    pub onset_epoch: u64,
    pub slashes: usize,
    pub disputes: usize,
    pub upheld_disputes: usize,
    pub alerts: usize,
    pub detection: DetectionMetrics,
    pub accuracy: BTreeMap<&'static str, f64>,
    pub aggregation_mode: AggregationMode,
    pub decision_accuracy: f64,
    pub tokens: AuditSummary,
    pub ledger: LedgerSummary,
    pub forecasting: ForecastSummary,
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub config: ScenarioConfig,
    pub agents: Vec<AgentInfo>,
    pub reputations: Vec<ReputationRow>,
    pub events: Vec<EventRow>,
    pub detection: Vec<DetectionRow>,
    pub aggregation: Vec<AggregationRow>,
    pub token_audit: TokenAudit,
    pub summary: Summary,
    pub ledger: Ledger,
}

impl SimulationReport {
    pub fn policy_of(&self, agent: &str) -> Option<PolicyKind> {
        self.agents.iter().find(|a| a.agent_id == agent).map(|a| a.policy)
    }

    pub fn events_of(&self, event: &str) -> impl Iterator<Item = &EventRow> {
        let event = event.to_string();
        self.events.iter().filter(move |e| e.event == event)
    }
}

/// Independent random stream `n` of the scenario seed.
pub(crate) fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(n);
    r
}

struct Agent {
    info: AgentInfo,
    policy: AgentPolicy,
    key: SigningKey,
}

fn setup_agents(cfg: &ScenarioConfig) -> Vec<Agent> {
    let mut rng = stream(cfg.seed, 0);
    let mut kinds: Vec<PolicyKind> = PolicyKind::ALL
        .iter()
        .flat_map(|k| std::iter::repeat_n(*k, cfg.policy_mix.get(k).copied().unwrap_or(0)))
        .collect();
    kinds.shuffle(&mut rng);
    let ids: Vec<AgentId> = (0..cfg.n_agents).map(|i| format!("agent-{i:02}")).collect();
    let clusters = partition(&ids, cfg.n_clusters, &mut rng);

    let mut colluders: Vec<&AgentId> = ids.iter().zip(&kinds).filter(|(_, k)| **k == PolicyKind::Colluder).map(|(a, _)| a).collect();
    colluders.shuffle(&mut rng);
    let mut partners = BTreeMap::new();
    for pair in colluders.chunks_exact(2) {
        partners.insert(pair[0].clone(), pair[1].clone());
        partners.insert(pair[1].clone(), pair[0].clone());
    }

    ids.iter()
        .zip(kinds)
        .map(|(id, kind)| {
            let capabilities = cfg
                .task_types
                .choose_multiple(&mut rng, cfg.capabilities_per_agent)
                .cloned()
                .collect();
            Agent {
                info: AgentInfo {
                    agent_id: id.clone(),
                    policy: kind,
                    partner: partners.get(id).cloned(),
                    capabilities,
                    cluster: clusters.iter().position(|c| c.contains(id)).expect("partition covers all"),
                },
                policy: AgentPolicy {
                    kind,
                    params: cfg.policy_params(kind),
                },
                key: derive_signing_key(cfg.seed, id),
            }
        })
        .collect()
}

/// Record still to be judged by a teammate once sealed.
struct Violation {
    respondent: AgentId,
    record_id: Hash32,
    teammates: Vec<AgentId>,
}

struct Forecaster {
    schedule: NoiseSchedule,
    t_star: usize,
    /// Warm-up trajectories with the epoch they end in.
    train: Vec<(u64, Array2<f64>)>,
    model: Option<(Denoiser, Calibration)>,
    attempted: bool,
    summary: ForecastSummary,
}

impl Forecaster {
    fn new(cfg: &ForecastingConfig) -> Result<Self, ForecastError> {
        let schedule = build_schedule(cfg.schedule, cfg.steps, cfg.beta_min, cfg.beta_max)?;
        Ok(Forecaster {
            t_star: cfg.t_star.unwrap_or_else(|| default_t_star(cfg.steps)),
            schedule,
            train: Vec::new(),
            model: None,
            attempted: false,
            summary: ForecastSummary {
                trained: false,
                n_train: 0,
                final_loss: None,
                threshold: None,
                n_calibration: 0,
            },
        })
    }

    /// Train on the earlier half of the warm-up epochs and calibrate on
    /// repeated scoring passes over the later half, so the threshold reflects
    /// how the model generalizes forward in time. Too little data leaves the
    /// forecaster off.
    fn fit(&mut self, cfg: &ForecastingConfig, seed: u64) -> Result<(), ForecastError> {
        self.attempted = true;
        let (first, last) = match (self.train.first(), self.train.last()) {
            (Some(a), Some(b)) => (a.0, b.0),
            _ => (0, 0),
        };
        let split = first + (last - first + 1).div_ceil(2);
        let (fit_set, held): (Vec<_>, Vec<_>) = self.train.iter().map(|(e, x)| (*e, x)).partition(|(e, _)| *e < split);
        self.summary.n_train = fit_set.len();
        if fit_set.is_empty() || held.len() * cfg.calibration_draws < MIN_CALIBRATION {
            log::warn!("forecaster disabled: {} warm-up trajectories", self.train.len());
            return Ok(());
        }
        let data: Vec<_> = fit_set
            .iter()
            .map(|(i, x)| crate::forecasting::BehaviorTrajectory::new(format!("warmup-{i:05}"), 0, (*x).clone()))
            .collect::<Result<_, _>>()?;
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        let out = train_denoiser(&data, &self.schedule, &tc)?;
        let refs: Vec<&Array2<f64>> = held.iter().map(|(_, x)| *x).collect();
        let cal = calibration_scores(&out.model, &refs, &self.schedule, self.t_star, cfg.repetitions, seed, cfg.calibration_draws)?;
        let calibration = Calibration::fit(&cal, cfg.percentile)?;
        self.summary.trained = true;
        self.summary.final_loss = out.losses.last().copied();
        self.summary.threshold = Some(calibration.threshold);
        self.summary.n_calibration = cal.len();
        self.model = Some((out.model, calibration));
        Ok(())
    }
}

fn family_cutpoints(c: &Cutpoints, m: usize, enabled: bool) -> Cutpoints {
    if !enabled || m <= 1 {
        return *c;
    }
    let adj = |p: f64| 1.0 - (1.0 - p) / m as f64;
    Cutpoints {
        raise: adj(c.raise),
        restrict: adj(c.restrict),
        escalate: adj(c.escalate),
    }
}

struct Run<'a> {
    cfg: &'a ScenarioConfig,
    agents: Vec<Agent>,
    contract: ArbitrationContract,
    engine: ReputationEngine,
    act_rng: ChaCha8Rng,
    task_rng: ChaCha8Rng,
    team_rng: ChaCha8Rng,
    agg: AggregationContext<ChaCha8Rng>,
    events: Vec<(EventRow, Hash32)>,
    reputations: Vec<ReputationRow>,
    detection: Vec<DetectionRow>,
    aggregation: Vec<AggregationRow>,
    labels: BTreeMap<(AgentId, u64), bool>,
    alerted: BTreeSet<(AgentId, u64)>,
}

fn bit(b: bool) -> u8 {
    b as u8
}

impl Run<'_> {
    fn index(&self, id: &str) -> usize {
        self.agents.iter().position(|a| a.info.agent_id == id).expect("known agent")
    }

    fn event(&mut self, epoch: u64, event: &'static str, agent: &str, amount: u64, detail: String, record: Hash32) {
        let row = EventRow {
            epoch,
            event,
            agent_id: agent.to_string(),
            amount,
            detail,
            record_id: record.to_hex(),
            proof_valid: false,
        };
        self.events.push((row, record));
    }

    fn excluded(&self, id: &str) -> bool {
        self.contract
            .account(id)
            .is_some_and(|a| a.report_strikes >= self.cfg.reputation.exclusion_strikes)
    }

    fn sign_and_submit(&mut self, i: usize, epoch: u64, kind: RecordKind, payload: &Payload) -> Result<Hash32, SimulationError> {
        let ts = self.contract.next_tick();
        let a = &self.agents[i];
        let rec = BehaviorRecord::signed(&a.key, a.info.agent_id.clone(), epoch, kind, payload, ts);
        let id = a.info.agent_id.clone();
        Ok(self.contract.submit_behavior(&id, epoch, rec)?.record_id)
    }

    fn run_task(&mut self, epoch: u64, k: usize, adversarial: bool, violations: &mut Vec<Violation>) -> Result<(), SimulationError> {
        let cfg = self.cfg;
        let start_tick = self.contract.next_tick();
        let task = Task {
            task_id: format!("e{epoch:04}-t{k:02}"),
            task_type: cfg.task_types.choose(&mut self.task_rng).expect("non-empty").clone(),
            truth: self.task_rng.random_bool(0.5),
            start_tick,
            deadline_tick: start_tick + cfg.deadline_ticks,
        };
        let reputations: BTreeMap<AgentId, f64> = self
            .agents
            .iter()
            .map(|a| (a.info.agent_id.clone(), self.engine.score_of(&a.info.agent_id)))
            .collect();

        // every non-suspended agent answers
        let mut acts: BTreeMap<usize, (AgentPolicy, Actions)> = BTreeMap::new();
        for (i, a) in self.agents.iter().enumerate() {
            if self.contract.privileges(&a.info.agent_id) == Some(Privilege::Suspended) {
                continue;
            }
            let eff = a.policy.effective(adversarial);
            let state = StepState {
                partner: a.info.partner.clone(),
                reports_due: Vec::new(),
                report_noise: cfg.report_noise,
            };
            acts.insert(i, (eff, policy_step(&eff, &task, &state, &mut self.act_rng)));
        }
        for (i, (_, act)) in acts.clone() {
            if act.submit {
                let p = Payload::new().with("task_id", &task.task_id).with("answer", bit(act.answer));
                self.sign_and_submit(i, epoch, RecordKind::DecisionInput, &p)?;
            }
        }

        // coalition of capable, active agents; colluders pull their partner in
        let eligible: Vec<usize> = acts
            .iter()
            .filter(|(i, (eff, _))| {
                let a = &self.agents[**i];
                self.contract.privileges(&a.info.agent_id) == Some(Privilege::Active)
                    && !self.excluded(&a.info.agent_id)
                    && (a.info.capabilities.contains(&task.task_type) || eff.params.capability_overclaim)
            })
            .map(|(i, _)| *i)
            .collect();
        let mut members: BTreeSet<usize> = eligible
            .choose_multiple(&mut self.team_rng, cfg.coalition_size)
            .copied()
            .collect();
        for m in members.clone() {
            let (eff, _) = &acts[&m];
            if eff.kind == PolicyKind::Colluder {
                if let Some(p) = &self.agents[m].info.partner {
                    let j = self.index(p);
                    if eligible.contains(&j) {
                        members.insert(j);
                    }
                }
            }
        }

        if !members.is_empty() {
            let names: Vec<AgentId> = members.iter().map(|i| self.agents[*i].info.agent_id.clone()).collect();
            self.contract
                .emit(
                    RecordKind::CoalitionEvent,
                    Payload::new()
                        .with("task_id", &task.task_id)
                        .with("task_type", &task.task_type)
                        .with("members", names.join(",")),
                )?;
            let mut quality = BTreeMap::new();
            for &m in &members {
                let act = acts[&m].1.clone();
                let completion_tick = task.start_tick + act.delay;
                if act.submit {
                    let p = Payload::new()
                        .with("task_id", &task.task_id)
                        .with("task_type", &task.task_type)
                        .with("role", "member");
                    let assignment = self.sign_and_submit(m, epoch, RecordKind::TaskAssignment, &p)?;
                    let p = Payload::new()
                        .with("task_id", &task.task_id)
                        .with("task_type", &task.task_type)
                        .with("answer", bit(act.answer))
                        .with("completed", bit(act.completed))
                        .with("start_tick", task.start_tick)
                        .with("completion_tick", completion_tick)
                        .with("deadline_tick", task.deadline_tick);
                    let outcome = self.sign_and_submit(m, epoch, RecordKind::CooperationOutcome, &p)?;
                    let me = &self.agents[m].info;
                    let teammates: Vec<AgentId> = names.iter().filter(|n| **n != me.agent_id).cloned().collect();
                    if !me.capabilities.contains(&task.task_type) {
                        violations.push(Violation {
                            respondent: me.agent_id.clone(),
                            record_id: assignment,
                            teammates: teammates.clone(),
                        });
                    }
                    if completion_tick > task.deadline_tick {
                        violations.push(Violation {
                            respondent: me.agent_id.clone(),
                            record_id: outcome,
                            teammates,
                        });
                    }
                }
                let others: Vec<&usize> = members.iter().filter(|o| **o != m).collect();
                let agree = if others.is_empty() {
                    1.0
                } else {
                    others.iter().filter(|o| acts[**o].1.answer == act.answer).count() as f64 / others.len() as f64
                };
                let features = TaskFeatures {
                    completion: bit(act.completed) as f64,
                    timeliness: TaskFeatures::timeliness_from(act.delay as f64, task.allowed_ticks() as f64),
                    resource_contribution: bit(act.answer == task.truth) as f64,
                    peer_feedback: agree,
                };
                quality.insert(m, score_task(&features, &cfg.reputation.weights_for(&task.task_type))?);
            }

            for &m in &members {
                let subject = self.agents[m].info.agent_id.clone();
                let pool: Vec<usize> = acts
                    .iter()
                    .filter(|(r, (_, act))| {
                        **r != m
                            && act.submit
                            && self.contract.privileges(&self.agents[**r].info.agent_id) == Some(Privilege::Active)
                            && !self.excluded(&self.agents[**r].info.agent_id)
                    })
                    .map(|(r, _)| *r)
                    .collect();
                let mut reporters: BTreeSet<usize> = pool
                    .choose_multiple(&mut self.team_rng, cfg.reporters_per_subject)
                    .copied()
                    .collect();
                if let Some(p) = &self.agents[m].info.partner {
                    let j = self.index(p);
                    if pool.contains(&j) && acts[&j].0.kind == PolicyKind::Colluder {
                        reporters.insert(j);
                    }
                }
                if reporters.is_empty() {
                    continue;
                }
                let mut reports = BTreeMap::new();
                for r in reporters {
                    let eff = acts[&r].0;
                    let state = StepState {
                        partner: self.agents[r].info.partner.clone(),
                        reports_due: Vec::new(),
                        report_noise: cfg.report_noise,
                    };
                    let value = report_value(&eff, &subject, quality[&m], &state, &mut self.act_rng);
                    let p = Payload::new()
                        .with("task_id", &task.task_id)
                        .with("subject", &subject)
                        .with("value", value);
                    self.sign_and_submit(r, epoch, RecordKind::Report, &p)?;
                    reports.insert(self.agents[r].info.agent_id.clone(), value);
                }
                let rp = &cfg.reputation;
                let round = collect_reports(&task.task_id, &subject, reports, rp.report_tolerance, rp.quorum, rp.consensus)?;
                let payoffs = apply_payoffs(&round, rp);
                let settled = self.engine.settle_on(&round, &payoffs, epoch, &mut self.contract)?;
                let anchor = settled.update_records.first().copied().unwrap_or(Hash32::ZERO);
                for agent in &settled.newly_excluded {
                    self.event(epoch, "exclusion", agent, 0, format!("task {}", task.task_id), anchor);
                }
            }
        }

        let answers: BTreeMap<AgentId, bool> = acts
            .iter()
            .map(|(i, (_, act))| (self.agents[*i].info.agent_id.clone(), act.answer))
            .collect();
        if !answers.is_empty() {
            let mut d = [false; 3];
            for (slot, mode) in d.iter_mut().zip(AggregationMode::ALL) {
                *slot = aggregate_answers(&answers, &reputations, mode, &mut self.agg)?;
            }
            self.aggregation.push(AggregationRow {
                epoch,
                task_id: task.task_id.clone(),
                truth: task.truth,
                n_answers: answers.len(),
                non_cooperative: d[0],
                k_cluster: d[1],
                reputation_weighted: d[2],
            });
        }
        Ok(())
    }

    fn adjudicate(&mut self, epoch: u64, dispute_id: u64) -> Result<(), SimulationError> {
        self.contract.evaluate_evidence(dispute_id)?;
        let res = self.contract.resolve_dispute(dispute_id)?;
        let d = self.contract.dispute(dispute_id).expect("just resolved");
        let detail = format!(
            "dispute {} {} by {} upheld={} suspension={}",
            dispute_id,
            d.claim_kind.as_str(),
            d.claimant,
            res.upheld(),
            res.suspension_epochs
        );
        let respondent = d.respondent.clone();
        self.event(epoch, "resolution", &respondent, res.penalty_tokens, detail, res.record_id);
        Ok(())
    }

    fn file_disputes(&mut self, epoch: u64, violations: Vec<Violation>) -> Result<(), SimulationError> {
        let mut by_respondent: BTreeMap<AgentId, (AgentId, Vec<Hash32>)> = BTreeMap::new();
        for v in violations {
            let claimant = v
                .teammates
                .iter()
                .find(|t| self.contract.privileges(t) != Some(Privilege::Suspended))
                .cloned()
                .unwrap_or_else(|| CONTRACT_ID.to_string());
            by_respondent
                .entry(v.respondent)
                .or_insert_with(|| (claimant, Vec::new()))
                .1
                .push(v.record_id);
        }
        for (respondent, (claimant, evidence)) in by_respondent {
            let kind = self
                .contract
                .suggest_claim(&respondent, &evidence)?
                .unwrap_or(crate::arbitration::ClaimKind::Contradiction);
            let id = self.contract.open_dispute(&claimant, &respondent, kind, evidence)?.dispute_id;
            self.adjudicate(epoch, id)?;
        }
        Ok(())
    }

    fn forecast(&mut self, epoch: u64, active: &[usize], fc: &mut Forecaster) -> Result<(), SimulationError> {
        let f = &self.cfg.forecasting;
        if epoch + 1 < f.window as u64 {
            return Ok(());
        }
        let mut trajectories = Vec::with_capacity(active.len());
        for &i in active {
            let id = &self.agents[i].info.agent_id;
            let x = match featurize(id, self.contract.ledger(), f.window, epoch, &f.features) {
                Ok(t) => t.x,
                // an agent that left no trace at all in the window
                Err(ForecastError::EmptyWindow { .. }) => Array2::zeros((f.window, N_FEATURES)),
                Err(e) => return Err(e.into()),
            };
            trajectories.push((i, x));
        }
        let onset = self.cfg.onset_epoch();
        if epoch < onset {
            fc.train.extend(trajectories.into_iter().map(|(_, x)| (epoch, x)));
            return Ok(());
        }
        if !fc.attempted {
            fc.fit(f, self.cfg.seed)?;
        }
        let Some((model, cal)) = &fc.model else {
            return Ok(());
        };
        let refs: Vec<&Array2<f64>> = trajectories.iter().map(|(_, x)| x).collect();
        let score_seed = self.cfg.seed ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
        let scores = anomaly_scores(model, &refs, &fc.schedule, fc.t_star, f.repetitions, score_seed)?;
        let named: Vec<(AgentId, f64)> = trajectories
            .iter()
            .zip(&scores)
            .map(|((i, _), s)| (self.agents[*i].info.agent_id.clone(), *s))
            .collect();
        let evidence: BTreeMap<AgentId, Vec<Hash32>> = named
            .iter()
            .map(|(id, _)| {
                let filter = RecordFilter::default().agent(id.clone()).epochs(epoch..=epoch);
                let ids = self.contract.ledger().query(&filter).iter().map(|r| r.record_id).collect();
                (id.clone(), ids)
            })
            .collect();
        let cut = family_cutpoints(&f.cutpoints, named.len(), f.family_wise);
        let cal = cal.clone();
        let alerts = forecast_alerts(&named, Some(&cal), &cut, &mut self.contract, &evidence)?;
        let by_agent: BTreeMap<&AgentId, _> = alerts.iter().map(|a| (&a.agent_id, a)).collect();
        for ((i, _), score) in trajectories.iter().zip(&scores) {
            let a = &self.agents[*i];
            let id = a.info.agent_id.clone();
            let label = a.info.policy.is_adversarial();
            let alert = by_agent.get(&id);
            self.labels.insert((id.clone(), epoch), label);
            if alert.is_some() {
                self.alerted.insert((id.clone(), epoch));
            }
            self.detection.push(DetectionRow {
                epoch,
                agent_id: id,
                policy: a.info.policy.as_str(),
                label,
                score: *score,
                deviation_probability: cal.deviation_probability(*score),
                alerted: alert.is_some(),
                action: alert.map_or("", |a| a.action.as_str()),
            });
        }
        for a in &alerts {
            self.event(epoch, "alert", &a.agent_id, 0, a.action.as_str().to_string(), a.record_id);
        }
        for a in alerts {
            if let Some(id) = a.dispute_id {
                self.adjudicate(epoch, id)?;
            }
        }
        Ok(())
    }

    fn snapshot(&mut self, epoch: u64) {
        for a in &self.agents {
            let id = &a.info.agent_id;
            let acct = self.contract.account(id).expect("registered");
            let (alpha, beta) = self
                .engine
                .profile(id)
                .map_or((self.cfg.reputation.prior_alpha, self.cfg.reputation.prior_beta), |p| (p.alpha, p.beta));
            self.reputations.push(ReputationRow {
                epoch,
                agent_id: id.clone(),
                policy: a.info.policy.as_str(),
                alpha,
                beta,
                reputation: alpha / (alpha + beta),
                stake: acct.stake,
                privileges: match acct.privileges {
                    Privilege::Active => "active",
                    Privilege::Restricted => "restricted",
                    Privilege::Suspended => "suspended",
                },
                strikes: acct.strikes,
                report_strikes: acct.report_strikes,
            });
        }
    }
}

pub fn run_scenario(config: &ScenarioConfig) -> Result<SimulationReport, SimulationError> {
    config.validate()?;
    let cfg = config;
    let agents = setup_agents(cfg);
    let mut contract = ArbitrationContract::new(cfg.arbitration.clone(), cfg.seed);
    let mut engine = ReputationEngine::new(cfg.reputation.clone());
    for a in &agents {
        contract.register_agent(&a.info.agent_id, a.key.verifying_key(), cfg.initial_stake, a.info.capabilities.clone())?;
        engine.ensure(&a.info.agent_id);
    }
    let clusters: Vec<BTreeSet<AgentId>> = (0..cfg.n_clusters)
        .map(|c| agents.iter().filter(|a| a.info.cluster == c).map(|a| a.info.agent_id.clone()).collect())
        .collect();
    let mut run = Run {
        cfg,
        agents,
        contract,
        engine,
        act_rng: stream(cfg.seed, 1),
        task_rng: stream(cfg.seed, 2),
        team_rng: stream(cfg.seed, 3),
        agg: AggregationContext {
            clusters,
            rng: stream(cfg.seed, 4),
        },
        events: Vec::new(),
        reputations: Vec::new(),
        detection: Vec::new(),
        aggregation: Vec::new(),
        labels: BTreeMap::new(),
        alerted: BTreeSet::new(),
    };
    let mut forecaster = Forecaster::new(&cfg.forecasting)?;
    let onset = cfg.onset_epoch();

    for epoch in 0..cfg.n_epochs {
        let adversarial = epoch >= onset;
        let active: Vec<usize> = (0..run.agents.len())
            .filter(|i| run.contract.privileges(&run.agents[*i].info.agent_id) != Some(Privilege::Suspended))
            .collect();
        let mut violations = Vec::new();
        for k in 0..cfg.tasks_per_epoch {
            run.run_task(epoch, k, adversarial, &mut violations)?;
        }
        let closed = run.contract.close_epoch(epoch)?;
        for (agent, amount) in &closed.slashes {
            run.event(epoch, "slash", agent, *amount, "missing_submission".into(), closed.record_id);
        }
        for agent in &closed.revocations {
            let through = run.contract.account(agent).and_then(|a| a.restricted_through).unwrap_or(epoch);
            run.event(epoch, "revocation", agent, 0, format!("restricted through epoch {through}"), closed.record_id);
        }
        run.file_disputes(epoch, violations)?;
        if cfg.forecasting.enabled {
            run.forecast(epoch, &active, &mut forecaster)?;
        }
        run.snapshot(epoch);
    }
    if !run.contract.ledger().pending().is_empty() {
        let e = run.contract.current_epoch();
        run.contract.ledger_mut().seal_block(e)?;
    }
    finish(run, forecaster.summary)
}

fn finish(run: Run<'_>, forecasting: ForecastSummary) -> Result<SimulationReport, SimulationError> {
    let cfg = run.cfg;
    let ledger = run.contract.ledger();
    let events: Vec<EventRow> = run
        .events
        .iter()
        .map(|(row, id)| EventRow {
            proof_valid: ledger.verify_inclusion(id),
            ..row.clone()
        })
        .collect();
    let detection = evaluate_detection(&run.alerted, &run.labels)?;
    let n_tasks = run.aggregation.len().max(1) as f64;
    let acc = |pick: fn(&AggregationRow) -> bool| run.aggregation.iter().filter(|r| pick(r) == r.truth).count() as f64 / n_tasks;
    let accuracy: BTreeMap<&'static str, f64> = [
        (AggregationMode::NonCooperative.as_str(), acc(|r| r.non_cooperative)),
        (AggregationMode::KCluster.as_str(), acc(|r| r.k_cluster)),
        (AggregationMode::ReputationWeighted.as_str(), acc(|r| r.reputation_weighted)),
    ]
    .into();
    let audit = run.contract.token_audit();
    let summary = Summary {
        seed: cfg.seed,
        n_agents: cfg.n_agents,
        n_epochs: cfg.n_epochs,
        onset_epoch: cfg.onset_epoch(),
        slashes: events.iter().filter(|e| e.event == "slash").count(),
        disputes: run.contract.disputes().count(),
        upheld_disputes: run.contract.disputes().filter(|d| d.verdicts.iter().any(|v| v.violated)).count(),
        alerts: events.iter().filter(|e| e.event == "alert").count(),
        detection,
        decision_accuracy: accuracy[cfg.aggregation_mode.as_str()],
        accuracy,
        aggregation_mode: cfg.aggregation_mode,
        tokens: AuditSummary {
            deposited: audit.deposited,
            minted: audit.minted,
            sink: audit.sink,
            total_stake: audit.total_stake(),
            conserved: audit.conserved(),
            matches_ledger: run.contract.audit_matches_ledger()?,
        },
        ledger: LedgerSummary {
            blocks: ledger.blocks().len(),
            records: ledger.len(),
            tip: ledger.tip().map(|b| b.header_hash.to_hex()),
            chain_violations: ledger.verify_chain().len(),
            unproven_events: events.iter().filter(|e| !e.proof_valid).count(),
        },
        forecasting,
    };
    Ok(SimulationReport {
        config: cfg.clone(),
        agents: run.agents.iter().map(|a| a.info.clone()).collect(),
        reputations: run.reputations,
        events,
        detection: run.detection,
        aggregation: run.aggregation,
        token_audit: audit,
        summary,
        ledger: run.contract.into_ledger(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(cfg: ScenarioConfig) -> ScenarioConfig {
        ScenarioConfig {
            forecasting: ForecastingConfig {
                enabled: false,
                ..ForecastingConfig::default()
            },
            ..cfg
        }
    }

    #[test]
    fn mix_must_match_population() {
        let mut cfg = ScenarioConfig::default();
        cfg.policy_mix.insert(PolicyKind::Saboteur, 1);
        assert!(matches!(run_scenario(&cfg), Err(SimulationError::InvalidConfig(_))));
        let mut cfg = ScenarioConfig::default();
        cfg.policies.get_mut(&PolicyKind::Honest).unwrap().answer_accuracy = 1.5;
        assert!(matches!(cfg.validate(), Err(SimulationError::InvalidConfig(_))));
    }

    #[test]
    fn honest_population_is_never_slashed() {
        let r = run_scenario(&quiet(ScenarioConfig::default())).unwrap();
        assert_eq!(r.summary.slashes, 0);
        assert_eq!(r.reputations.len(), 8 * 20);
        assert!(r.summary.tokens.conserved && r.summary.tokens.matches_ledger);
        assert_eq!(r.summary.ledger.chain_violations, 0);
    }

    #[test]
    fn free_riders_are_slashed_every_epoch() {
        let cfg = ScenarioConfig {
            warmup_fraction: 0.0,
            ..quiet(ScenarioConfig::default()).with_mix(&[(PolicyKind::Honest, 6), (PolicyKind::FreeRider, 2)])
        };
        let r = run_scenario(&cfg).unwrap();
        let riders: BTreeSet<_> = r.agents.iter().filter(|a| a.policy == PolicyKind::FreeRider).map(|a| a.agent_id.clone()).collect();
        for e in 0..cfg.n_epochs {
            let slashed: BTreeSet<_> = r.events_of("slash").filter(|x| x.epoch == e).map(|x| x.agent_id.clone()).collect();
            assert_eq!(slashed, riders, "epoch {e}");
        }
        for row in r.reputations.iter().filter(|x| riders.contains(&x.agent_id)) {
            assert_eq!(row.privileges, "restricted");
        }
    }

    #[test]
    fn violators_are_taken_to_arbitration() {
        let cfg = quiet(ScenarioConfig::default()).with_mix(&[
            (PolicyKind::Honest, 5),
            (PolicyKind::Saboteur, 2),
            (PolicyKind::Exaggerator, 1),
        ]);
        let r = run_scenario(&cfg).unwrap();
        let respondents: BTreeSet<PolicyKind> = r.events_of("resolution").filter_map(|e| r.policy_of(&e.agent_id)).collect();
        assert!(respondents.contains(&PolicyKind::Saboteur));
        assert!(!respondents.contains(&PolicyKind::Honest));
        assert!(r.events.iter().all(|e| e.proof_valid));
        assert!(r.summary.upheld_disputes > 0);
    }
}
