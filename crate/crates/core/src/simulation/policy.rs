//! Agent behavior policies.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Honest,
    FreeRider,
    Colluder,
    Exaggerator,
    Saboteur,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Honest,
        PolicyKind::FreeRider,
        PolicyKind::Colluder,
        PolicyKind::Exaggerator,
        PolicyKind::Saboteur,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Honest => "honest",
            PolicyKind::FreeRider => "free_rider",
            PolicyKind::Colluder => "colluder",
            PolicyKind::Exaggerator => "exaggerator",
            PolicyKind::Saboteur => "saboteur",
        }
    }

    pub fn is_adversarial(self) -> bool {
        self != PolicyKind::Honest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyParams {
    pub answer_accuracy: f64,
    pub submission_probability: f64,
    /// Added to reports about the colluding partner.
    pub report_bias: f64,
    /// Join tasks of types outside the declared capabilities.
    pub capability_overclaim: bool,
}

impl PolicyParams {
    pub fn default_for(kind: PolicyKind) -> Self {
        let base = PolicyParams {
            answer_accuracy: 0.9,
            submission_probability: 1.0,
            report_bias: 0.0,
            capability_overclaim: false,
        };
        match kind {
            PolicyKind::Honest => base,
            PolicyKind::FreeRider => PolicyParams {
                submission_probability: 0.0,
                ..base
            },
            PolicyKind::Colluder => PolicyParams {
                answer_accuracy: 0.3,
                report_bias: 0.5,
                ..base
            },
            PolicyKind::Exaggerator => PolicyParams {
                answer_accuracy: 0.5,
                capability_overclaim: true,
                ..base
            },
            PolicyKind::Saboteur => PolicyParams {
                answer_accuracy: 0.3,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("answer_accuracy", self.answer_accuracy),
            ("submission_probability", self.submission_probability),
            ("report_bias", self.report_bias),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPolicy {
    pub kind: PolicyKind,
    pub params: PolicyParams,
}

impl AgentPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        AgentPolicy {
            kind,
            params: PolicyParams::default_for(kind),
        }
    }

    /// Behavior actually played: adversaries act honestly until their onset.
    pub fn effective(&self, adversarial_phase: bool) -> AgentPolicy {
        if adversarial_phase || !self.kind.is_adversarial() {
            *self
        } else {
            AgentPolicy::new(PolicyKind::Honest)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub task_id: String,
    pub task_type: String,
    pub truth: bool,
    pub start_tick: u64,
    pub deadline_tick: u64,
}

impl Task {
    pub fn allowed_ticks(&self) -> u64 {
        self.deadline_tick - self.start_tick
    }
}

/// What an agent knows when acting on a task.
#[derive(Debug, Clone, Default)]
pub struct StepState {
    pub partner: Option<AgentId>,
    /// Subjects to report on with their observed quality.
    pub reports_due: Vec<(AgentId, f64)>,
    pub report_noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actions {
    pub answer: bool,
    pub submit: bool,
    /// Ticks from task start to completion.
    pub delay: u64,
    pub completed: bool,
    pub reports: Vec<(AgentId, f64)>,
}

/// Value `policy` reports for a subject of observed `quality`.
pub fn report_value(policy: &AgentPolicy, subject: &str, quality: f64, state: &StepState, rng: &mut impl Rng) -> f64 {
    let noise: f64 = state.report_noise * rng.sample::<f64, _>(StandardNormal);
    let bias = match (&policy.kind, &state.partner) {
        (PolicyKind::Colluder, Some(p)) if p == subject => policy.params.report_bias,
        _ => 0.0,
    };
    (quality + noise + bias).clamp(0.0, 1.0)
}

pub fn policy_step(policy: &AgentPolicy, task: &Task, state: &StepState, rng: &mut impl Rng) -> Actions {
    let p = &policy.params;
    let correct = rng.random_bool(p.answer_accuracy);
    let submit = rng.random_bool(p.submission_probability);
    let allowed = task.allowed_ticks().max(1);
    let (delay, completed) = match policy.kind {
        PolicyKind::Saboteur => (allowed + rng.random_range(1..=allowed), false),
        _ => (rng.random_range(1..=allowed.div_ceil(2)), true),
    };
    let reports = state
        .reports_due
        .iter()
        .map(|(s, q)| (s.clone(), report_value(policy, s, *q, state, rng)))
        .collect();
    Actions {
        answer: if correct { task.truth } else { !task.truth },
        submit,
        delay,
        completed,
        reports,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> Task {
        Task {
            task_id: "t".into(),
            task_type: "inspection".into(),
            truth: true,
            start_tick: 10,
            deadline_tick: 20,
        }
    }

    #[test]
    fn perfect_honest_agent_is_always_right() {
        let mut pol = AgentPolicy::new(PolicyKind::Honest);
        pol.params.answer_accuracy = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let a = policy_step(&pol, &task(), &StepState::default(), &mut rng);
            assert!(a.answer && a.submit && a.completed);
            assert!(a.delay <= task().allowed_ticks());
        }
    }

    #[test]
    fn colluder_inflates_only_its_partner() {
        let pol = AgentPolicy::new(PolicyKind::Colluder);
        let state = StepState {
            partner: Some("b".into()),
            reports_due: vec![("b".into(), 0.3), ("c".into(), 0.3)],
            report_noise: 0.0,
        };
        let a = policy_step(&pol, &task(), &state, &mut ChaCha8Rng::seed_from_u64(1));
        assert!((a.reports[0].1 - 0.8).abs() < 1e-12);
        assert!((a.reports[1].1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn saboteur_misses_the_deadline() {
        let pol = AgentPolicy::new(PolicyKind::Saboteur);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let a = policy_step(&pol, &task(), &StepState::default(), &mut rng);
            assert!(task().start_tick + a.delay > task().deadline_tick);
        }
    }

    #[test]
    fn warm_up_masks_adversaries() {
        let pol = AgentPolicy::new(PolicyKind::FreeRider);
        assert_eq!(pol.effective(false).kind, PolicyKind::Honest);
        assert_eq!(pol.effective(true), pol);
    }
}
