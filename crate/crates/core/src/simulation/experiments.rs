//! Population-level experiments built on the harness.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{policy_step, run_scenario, stream, AgentPolicy, ForecastingConfig, PolicyKind, ScenarioConfig, SimulationError, StepState, Task};
use crate::reputation::{score_task, ContextWeights, NullSink, ReputationEngine, ReputationParams, TaskFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeparationResult {
    pub honest_mean: f64,
    pub saboteur_mean: f64,
    pub gap: f64,
    pub max_evidence_mass: f64,
}

/// Per-task score of one agent acting alone: completion, timeliness,
/// correctness, and agreement with the (correct) consensus answer.
pub fn solo_task_score(policy: &AgentPolicy, task: &Task, rng: &mut impl rand::Rng) -> f64 {
    let act = policy_step(policy, task, &StepState::default(), rng);
    let correct = (act.answer == task.truth) as u8 as f64;
    let f = TaskFeatures {
        completion: act.completed as u8 as f64,
        timeliness: TaskFeatures::timeliness_from(act.delay as f64, task.allowed_ticks() as f64),
        resource_contribution: correct,
        peer_feedback: correct,
    };
    score_task(&f, &ContextWeights::uniform(&task.task_type)).expect("features in range")
}

/// `n_per_side` honest and `n_per_side` saboteur agents each perform
/// `n_tasks` tasks; every task score updates the agent's posterior.
pub fn reputation_separation(
    params: &ReputationParams,
    honest_accuracy: f64,
    saboteur_accuracy: f64,
    n_per_side: usize,
    n_tasks: usize,
    seed: u64,
) -> Result<SeparationResult, SimulationError> {
    let mut rng = stream(seed, 7);
    let mut engine = ReputationEngine::new(params.clone());
    let mut honest = AgentPolicy::new(PolicyKind::Honest);
    honest.params.answer_accuracy = honest_accuracy;
    let mut saboteur = AgentPolicy::new(PolicyKind::Saboteur);
    saboteur.params.answer_accuracy = saboteur_accuracy;
    let agents: Vec<(String, AgentPolicy)> = (0..n_per_side)
        .map(|i| (format!("honest-{i:02}"), honest))
        .chain((0..n_per_side).map(|i| (format!("saboteur-{i:02}"), saboteur)))
        .collect();
    let mut max_mass: f64 = 0.0;
    for t in 0..n_tasks {
        let task = Task {
            task_id: format!("t{t:04}"),
            task_type: "generic".into(),
            truth: rand::Rng::random_bool(&mut rng, 0.5),
            start_tick: 0,
            deadline_tick: 10,
        };
        for (id, pol) in &agents {
            let s = solo_task_score(pol, &task, &mut rng);
            engine.update(id, s, t as u64, "task", &mut NullSink)?;
            max_mass = max_mass.max(engine.profile(id).expect("updated").evidence_mass());
        }
    }
    let mean = |prefix: &str| {
        let v: Vec<f64> = agents
            .iter()
            .filter(|(id, _)| id.starts_with(prefix))
            .map(|(id, _)| engine.score_of(id))
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    let (h, s) = (mean("honest"), mean("saboteur"));
    Ok(SeparationResult {
        honest_mean: h,
        saboteur_mean: s,
        gap: h - s,
        max_evidence_mass: max_mass,
    })
}

/// Scenario used for the aggregation comparison: `n_tasks` tasks over
/// epochs of four, forecasting off, adversaries active from the start.
pub fn aggregation_config(mix: &[(PolicyKind, usize)], n_tasks: usize, seed: u64) -> ScenarioConfig {
    let tasks_per_epoch = 4;
    ScenarioConfig {
        seed,
        n_epochs: n_tasks.div_ceil(tasks_per_epoch) as u64,
        tasks_per_epoch,
        warmup_fraction: 0.0,
        forecasting: ForecastingConfig {
            enabled: false,
            ..ForecastingConfig::default()
        },
        ..ScenarioConfig::default().with_mix(mix)
    }
}

/// Accuracy per aggregation mode for each seed.
pub fn aggregation_accuracy(
    mix: &[(PolicyKind, usize)],
    n_tasks: usize,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<BTreeMap<&'static str, f64>>, SimulationError> {
    seeds
        .into_iter()
        .map(|s| run_scenario(&aggregation_config(mix, n_tasks, s)).map(|r| r.summary.accuracy))
        .collect()
}
