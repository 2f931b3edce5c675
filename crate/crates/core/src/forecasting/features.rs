//! Ledger records to `(W, 6)` behavior trajectories.
//!
//! Only sealed records are read, so a trajectory can be recomputed by anyone
//! holding the exported chain. Payload conventions:
//!
//! * agent `cooperation_outcome`: `completed` (0/1), `start_tick`,
//!   `completion_tick`, `deadline_tick`
//! * agent `report`: `task_id`, `subject`, `value`
//! * contract `transfer` events: `from`, `to`, `tokens`
//! * contract `report_round` events: `task_id`, `subject`, `consensus`
//! * contract `coalition_event`: `members` (comma separated)

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{BehaviorTrajectory, ForecastError, N_FEATURES};
use crate::arbitration::CONTRACT_ID;
use crate::ledger::{BehaviorRecord, Ledger, Payload, RecordFilter, RecordKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Weight on the previous value in the completion and latency EMAs.
    pub ema_factor: f64,
    /// Records per epoch that saturate the interaction channel.
    pub interaction_cap: f64,
    /// Net token change per epoch mapped to the channel's edge.
    pub stake_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            ema_factor: 0.8,
            interaction_cap: 16.0,
            stake_scale: 20.0,
        }
    }
}

/// Latency as a fraction of twice the allowed time: on the deadline is 0.5.
pub fn normalized_latency(start: u64, completion: u64, deadline: u64) -> f64 {
    let allowed = deadline.saturating_sub(start).max(1) as f64;
    (completion.saturating_sub(start) as f64 / (2.0 * allowed)).clamp(0.0, 1.0)
}

#[derive(Default)]
struct EpochObs {
    agent_records: usize,
    completions: Vec<f64>,
    latencies: Vec<f64>,
    net_tokens: i64,
    reports: Vec<(String, String, f64)>,
    consensus: HashMap<(String, String), f64>,
    coalitions: Vec<Vec<String>>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn payloads<'a>(records: Vec<&'a BehaviorRecord>) -> impl Iterator<Item = (&'a BehaviorRecord, Payload)> {
    records.into_iter().filter_map(|r| r.decoded_payload().ok().map(|p| (r, p)))
}

/// Trajectory of `agent` over the `window` epochs ending at `epoch`. Epochs
/// before 0 and epochs without any record of the agent are zero rows.
pub fn featurize(
    agent: &str,
    ledger: &Ledger,
    window: usize,
    epoch: u64,
    cfg: &FeatureConfig,
) -> Result<BehaviorTrajectory, ForecastError> {
    if window == 0 {
        return Err(ForecastError::ZeroWindow);
    }
    if !ledger.has_signer(agent) || agent == CONTRACT_ID {
        return Err(ForecastError::UnknownAgent(agent.to_string()));
    }
    let first = epoch as i64 + 1 - window as i64;
    let from = first.max(0) as u64;
    let mut obs: BTreeMap<u64, EpochObs> = (from..=epoch).map(|e| (e, EpochObs::default())).collect();

    let own = ledger.query(&RecordFilter::default().agent(agent).epochs(from..=epoch));
    if own.is_empty() {
        return Err(ForecastError::EmptyWindow {
            agent: agent.to_string(),
            from,
            to: epoch,
        });
    }
    for (r, p) in payloads(own) {
        let o = obs.get_mut(&r.epoch).expect("epoch in window");
        o.agent_records += 1;
        match r.kind {
            RecordKind::CooperationOutcome => {
                if let Some(c) = p.get_parsed::<f64>("completed") {
                    o.completions.push(c.clamp(0.0, 1.0));
                }
                if let (Some(s), Some(c), Some(d)) = (
                    p.get_parsed::<u64>("start_tick"),
                    p.get_parsed::<u64>("completion_tick"),
                    p.get_parsed::<u64>("deadline_tick"),
                ) {
                    o.latencies.push(normalized_latency(s, c, d));
                }
            }
            RecordKind::Report => {
                if let (Some(t), Some(s), Some(v)) = (p.get("task_id"), p.get("subject"), p.get_parsed::<f64>("value")) {
                    o.reports.push((t.to_string(), s.to_string(), v));
                }
            }
            _ => {}
        }
    }
    let contract = ledger.query(&RecordFilter::default().agent(CONTRACT_ID).epochs(from..=epoch));
    for (r, p) in payloads(contract) {
        let o = obs.get_mut(&r.epoch).expect("epoch in window");
        if r.kind == RecordKind::CoalitionEvent {
            if let Some(m) = p.get("members") {
                let members: Vec<String> = m.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
                if members.iter().any(|x| x == agent) {
                    o.coalitions.push(members);
                }
            }
            continue;
        }
        match p.get("event") {
            Some("transfer") => {
                let tokens = p.get_parsed::<i64>("tokens").unwrap_or(0);
                if p.get("to") == Some(agent) {
                    o.net_tokens += tokens;
                }
                if p.get("from") == Some(agent) {
                    o.net_tokens -= tokens;
                }
            }
            Some("report_round") => {
                if let (Some(t), Some(s), Some(c)) = (p.get("task_id"), p.get("subject"), p.get_parsed::<f64>("consensus")) {
                    o.consensus.insert((t.to_string(), s.to_string()), c);
                }
            }
            _ => {}
        }
    }

    let mut partner_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for o in obs.values() {
        for c in &o.coalitions {
            for m in c.iter().filter(|m| *m != agent) {
                *partner_counts.entry(m).or_default() += 1;
            }
        }
    }
    // ascending iteration keeping the first maximum: ties go to the lowest id
    let modal = partner_counts
        .iter()
        .fold(None::<(&str, usize)>, |best, (m, n)| match best {
            Some((_, bn)) if bn >= *n => best,
            _ => Some((m, *n)),
        })
        .map(|(m, _)| m.to_string());

    let mut x = Array2::zeros((window, N_FEATURES));
    let offset = (from as i64 - first) as usize;
    let (mut ema_c, mut ema_l): (Option<f64>, Option<f64>) = (None, None);
    let f = cfg.ema_factor;
    let ema = |state: &mut Option<f64>, v: Option<f64>| {
        if let Some(v) = v {
            *state = Some(state.map_or(v, |s| f * s + (1.0 - f) * v));
        }
    };
    for (row, o) in obs.values().enumerate() {
        ema(&mut ema_c, mean(&o.completions));
        ema(&mut ema_l, mean(&o.latencies));
        if o.agent_records == 0 {
            continue;
        }
        let devs: Vec<f64> = o
            .reports
            .iter()
            .filter_map(|(t, s, v)| o.consensus.get(&(t.clone(), s.clone())).map(|c| (v - c).abs()))
            .collect();
        let co = match (&modal, o.coalitions.len()) {
            (Some(m), n) if n > 0 => o.coalitions.iter().filter(|c| c.contains(m)).count() as f64 / n as f64,
            _ => 0.0,
        };
        let values = [
            ema_c.unwrap_or(0.0),
            ema_l.unwrap_or(0.0),
            (o.agent_records as f64 / cfg.interaction_cap).min(1.0),
            (0.5 + o.net_tokens as f64 / (2.0 * cfg.stake_scale)).clamp(0.0, 1.0),
            mean(&devs).unwrap_or(0.0).clamp(0.0, 1.0),
            co,
        ];
        for (c, v) in values.into_iter().enumerate() {
            x[[offset + row, c]] = v;
        }
    }
    BehaviorTrajectory::new(agent, from, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbitration::{ArbitrationContract, ArbitrationParams};
    use crate::keys::derive_signing_key;
    use crate::reputation::{EventSink, TokenBook};
    use std::collections::BTreeSet;

    struct World {
        c: ArbitrationContract,
    }

    impl World {
        fn new(agents: &[&str]) -> Self {
            let mut c = ArbitrationContract::new(ArbitrationParams::default(), 1);
            for a in agents {
                c.register_agent(a, derive_signing_key(1, a).verifying_key(), 100, BTreeSet::new())
                    .unwrap();
            }
            World { c }
        }

        fn put(&mut self, agent: &str, kind: RecordKind, p: Payload) {
            let ts = self.c.next_tick();
            let e = self.c.current_epoch();
            let r = BehaviorRecord::signed(&derive_signing_key(1, agent), agent, e, kind, &p, ts);
            self.c.submit_behavior(agent, e, r).unwrap();
        }

        fn outcome(&mut self, agent: &str, completed: u8, start: u64, done: u64, deadline: u64) {
            let p = Payload::new()
                .with("completed", completed)
                .with("start_tick", start)
                .with("completion_tick", done)
                .with("deadline_tick", deadline);
            self.put(agent, RecordKind::CooperationOutcome, p);
        }

        fn coalition(&mut self, members: &str) {
            self.c
                .emit(RecordKind::CoalitionEvent, Payload::new().with("members", members))
                .unwrap();
        }

        fn close(&mut self) {
            let e = self.c.current_epoch();
            self.c.close_epoch(e).unwrap();
        }
    }

    #[test]
    fn saturated_agent_has_full_completion() {
        let mut w = World::new(&["a", "b"]);
        for _ in 0..4 {
            w.outcome("a", 1, 10, 10, 20);
            w.put("b", RecordKind::ActionLog, Payload::new());
            w.coalition("a,b");
            w.close();
        }
        let t = featurize("a", w.c.ledger(), 4, 3, &FeatureConfig::default()).unwrap();
        assert!(t.x.column(0).iter().all(|v| *v == 1.0));
        assert!(t.x.column(1).iter().all(|v| *v == 0.0));
        assert!(t.x.column(5).iter().all(|v| *v == 1.0));
    }

    #[test]
    fn empty_window_and_unknown_agent() {
        let mut w = World::new(&["a", "b"]);
        w.put("b", RecordKind::ActionLog, Payload::new());
        w.close();
        let cfg = FeatureConfig::default();
        assert!(matches!(featurize("a", w.c.ledger(), 2, 0, &cfg), Err(ForecastError::EmptyWindow { .. })));
        assert!(matches!(featurize("zed", w.c.ledger(), 2, 0, &cfg), Err(ForecastError::UnknownAgent(_))));
    }

    #[test]
    fn three_epoch_fixture_matches_hand_computation() {
        let mut w = World::new(&["a", "b", "c"]);
        // epoch 0: two outcomes (one late), one report, a reward, coalition with b
        w.outcome("a", 1, 0, 5, 10);
        w.outcome("a", 0, 0, 30, 10);
        w.put("a", RecordKind::Report, Payload::new().with("task_id", "t0").with("subject", "b").with("value", 0.7));
        w.c.emit(
            RecordKind::Report,
            Payload::new().with("event", "report_round").with("task_id", "t0").with("subject", "b").with("consensus", 0.5),
        )
        .unwrap();
        w.c.credit("a", 4, "honest_report").unwrap();
        w.coalition("a,b");
        w.put("b", RecordKind::ActionLog, Payload::new());
        w.put("c", RecordKind::ActionLog, Payload::new());
        w.close();
        // epoch 1: nothing from a
        w.put("b", RecordKind::ActionLog, Payload::new());
        w.put("c", RecordKind::ActionLog, Payload::new());
        w.close();
        // epoch 2: one on-time outcome, two coalitions (b and c), penalty
        w.outcome("a", 1, 100, 110, 120);
        w.coalition("a,b");
        w.coalition("a,c");
        w.c.debit("a", 10, "dishonest_report").unwrap();
        w.put("b", RecordKind::ActionLog, Payload::new());
        w.put("c", RecordKind::ActionLog, Payload::new());
        w.close();

        let t = featurize("a", w.c.ledger(), 3, 2, &FeatureConfig::default()).unwrap();
        // epoch 0: completion mean 0.5; latency mean of 5/20 and 30/20->1
        let c0 = 0.5;
        let l0 = (0.25 + 1.0) / 2.0;
        // epoch 2: EMA with 0.8 on previous
        let c2 = 0.8 * c0 + 0.2 * 1.0;
        let l2 = 0.8 * l0 + 0.2 * (10.0 / 40.0);
        let want = [
            [c0, l0, 3.0 / 16.0, 0.5 + 4.0 / 40.0, 0.2, 1.0],
            [0.0; 6],
            // modal partner over the window is b (2 vs 1)
            [c2, l2, 1.0 / 16.0, 0.5 - 10.0 / 40.0, 0.0, 0.5],
        ];
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((t.x[[r, c]] - v).abs() < 1e-12, "row {r} col {c}: {} vs {v}", t.x[[r, c]]);
            }
        }
        assert_eq!(t.window_start_epoch, 0);
    }
}
