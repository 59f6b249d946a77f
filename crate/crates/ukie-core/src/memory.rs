//! Per-user semantic memory (label -> invariant prototype) and the
//! threshold-gated sparse broadcast protocol that keeps distributed copies
//! aligned while counting communication cost.
//!
//! A user checks every `tau` steps whether its memory moved by more than
//! `kappa` (Euclidean norm over the concatenation of all class prototypes)
//! since its last broadcast; if so it sends the change to every other user.
//! The delta baseline is `last_broadcast` by default; the rolling t-tau
//! baseline is available behind [`DeltaBaseline::Rolling`]. Receivers either
//! add the delta as the update rule is written, or overwrite with the
//! sender's value ([`MergeMode::Replace`], the default in multi-user runs,
//! since simultaneous additive broadcasts of absolute drift double-count).

use crate::error::{Result, UkieError};
use crate::losses::{PrototypeSet, PrototypeSource};
use crate::rng::{fill_gaussian, stream};
use ndarray::Array3;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaBaseline {
    LastBroadcast,
    Rolling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Additive,
    Replace,
}

#[derive(Debug, Clone)]
pub struct MemoryEntry {
    pub prototype: Array3<f64>,
    pub last_broadcast_value: Array3<f64>,
    pub rolling_value: Array3<f64>,
    pub updated_at: u64,
}

/// One user's prototype store plus its protocol parameters.
#[derive(Debug, Clone)]
pub struct SemanticMemory {
    pub user_id: usize,
    pub kappa: f64,
    pub tau: u64,
    entries: BTreeMap<usize, MemoryEntry>,
}

impl SemanticMemory {
    pub fn new(user_id: usize, kappa: f64, tau: u64) -> Result<Self> {
        if kappa < 0.0 || kappa.is_nan() {
            return Err(UkieError::Config(format!("kappa must be >= 0 (got {kappa})")));
        }
        if tau == 0 {
            return Err(UkieError::Config("tau must be >= 1".into()));
        }
        Ok(SemanticMemory { user_id, kappa, tau, entries: BTreeMap::new() })
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, class: usize) -> Option<&MemoryEntry> {
        self.entries.get(&class)
    }

    /// EMA merge of a fresh prototype for one class. A class seen for the
    /// first time is stored as-is; its broadcast baselines start at zero so
    /// the next protocol check sees the full value as drift.
    pub fn update_local(&mut self, class: usize, new_prototype: &Array3<f64>, t: u64, ema_beta: f64) {
        match self.entries.get_mut(&class) {
            Some(e) => {
                e.prototype
                    .zip_mut_with(new_prototype, |old, new| *old = (1.0 - ema_beta) * *old + ema_beta * new);
                e.updated_at = t;
            }
            None => {
                let zeros = Array3::zeros(new_prototype.dim());
                self.entries.insert(
                    class,
                    MemoryEntry {
                        prototype: new_prototype.clone(),
                        last_broadcast_value: zeros.clone(),
                        rolling_value: zeros,
                        updated_at: t,
                    },
                );
            }
        }
    }

    /// Read-only prototype lookup; a class never stored is a cold start.
    pub fn lookup(&self, class: usize) -> Result<&Array3<f64>> {
        self.entries
            .get(&class)
            .map(|e| &e.prototype)
            .ok_or(UkieError::ColdStart(class))
    }

    pub fn to_prototype_set(&self) -> PrototypeSet {
        PrototypeSet {
            prototypes: self.entries.iter().map(|(&c, e)| (c, e.prototype.clone())).collect(),
            source: PrototypeSource::Memory,
        }
    }

    /// Euclidean norm over the concatenation of all per-class deltas against
    /// the selected baseline.
    fn delta_against(&self, baseline: DeltaBaseline) -> (f64, BTreeMap<usize, Array3<f64>>) {
        let mut sq = 0.0;
        let mut deltas = BTreeMap::new();
        for (&c, e) in &self.entries {
            let base = match baseline {
                DeltaBaseline::LastBroadcast => &e.last_broadcast_value,
                DeltaBaseline::Rolling => &e.rolling_value,
            };
            let d = &e.prototype - base;
            sq += d.iter().map(|v| v * v).sum::<f64>();
            deltas.insert(c, d);
        }
        (sq.sqrt(), deltas)
    }

    /// Protocol check, intended for steps t = 0 mod tau. Returns the decision
    /// and, when broadcasting, the message to send. Updates the baselines.
    pub fn should_broadcast(&mut self, t: u64, baseline: DeltaBaseline) -> BroadcastDecision {
        let (norm, deltas) = self.delta_against(baseline);
        let broadcast = norm > self.kappa;
        if broadcast {
            for e in self.entries.values_mut() {
                e.last_broadcast_value = e.prototype.clone();
            }
        }
        // the rolling t-tau reference always advances to the current value
        for e in self.entries.values_mut() {
            e.rolling_value = e.prototype.clone();
        }
        let msg = broadcast.then(|| BroadcastMsg {
            from_user: self.user_id,
            step: t,
            deltas,
            values: self.entries.iter().map(|(&c, e)| (c, e.prototype.clone())).collect(),
        });
        BroadcastDecision { delta_norm: norm, message: msg }
    }

    /// Applies a peer's broadcast. Merged content is absorbed into this
    /// user's broadcast baselines as well: peers already hold what they sent,
    /// so only local drift accumulated on top of it should count toward the
    /// next threshold check (otherwise simultaneous broadcasts echo each
    /// other's drift back and forth and the copies drift apart).
    pub fn apply_remote(&mut self, msg: &BroadcastMsg, mode: MergeMode, t: u64) {
        match mode {
            MergeMode::Additive => {
                for (&c, d) in &msg.deltas {
                    match self.entries.get_mut(&c) {
                        Some(e) => {
                            e.prototype += d;
                            e.last_broadcast_value += d;
                            e.rolling_value += d;
                            e.updated_at = t;
                        }
                        None => {
                            self.entries.insert(
                                c,
                                MemoryEntry {
                                    prototype: d.clone(),
                                    last_broadcast_value: d.clone(),
                                    rolling_value: d.clone(),
                                    updated_at: t,
                                },
                            );
                        }
                    }
                }
            }
            MergeMode::Replace => {
                for (&c, v) in &msg.values {
                    let entry = MemoryEntry {
                        prototype: v.clone(),
                        last_broadcast_value: v.clone(),
                        rolling_value: v.clone(),
                        updated_at: t,
                    };
                    self.entries.insert(c, entry);
                }
            }
        }
    }

    /// Total scalars one full-memory broadcast carries.
    pub fn broadcast_scalars(&self) -> u64 {
        self.entries.values().map(|e| e.prototype.len() as u64).sum()
    }

    /// Bitwise fingerprint over the prototype contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (c, e) in &self.entries {
            h ^= *c as u64;
            h = h.wrapping_mul(0x100000001b3);
            for v in e.prototype.iter() {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
pub struct BroadcastMsg {
    pub from_user: usize,
    pub step: u64,
    pub deltas: BTreeMap<usize, Array3<f64>>,
    pub values: BTreeMap<usize, Array3<f64>>,
}

#[derive(Debug)]
pub struct BroadcastDecision {
    pub delta_norm: f64,
    /// Present when the threshold was exceeded.
    pub message: Option<BroadcastMsg>,
}

/// Per-user communication counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommLedger {
    pub broadcasts_sent: Vec<u64>,
    pub broadcasts_suppressed: Vec<u64>,
    pub scalars_transmitted: Vec<u64>,
}

impl CommLedger {
    pub fn new(users: usize) -> Self {
        CommLedger {
            broadcasts_sent: vec![0; users],
            broadcasts_suppressed: vec![0; users],
            scalars_transmitted: vec![0; users],
        }
    }

    pub fn total_scalars(&self) -> u64 {
        self.scalars_transmitted.iter().sum()
    }

    pub fn total_broadcasts(&self) -> u64 {
        self.broadcasts_sent.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    LocalUpdate,
    Broadcast,
    Suppress,
    Merge,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::LocalUpdate => "local_update",
            EventKind::Broadcast => "broadcast",
            EventKind::Suppress => "suppress",
            EventKind::Merge => "merge",
        }
    }
}

/// One protocol event for the simulation log.
#[derive(Debug, Clone)]
pub struct EventRow {
    pub step: u64,
    pub user: usize,
    pub event: EventKind,
    pub delta_norm: f64,
    pub cumulative_scalars: u64,
}

/// Linear prototype drift: each user moves its whole memory along a fixed
/// unit direction at `rate * (1 + user * stagger)` per step, so the norm of
/// accumulated drift after s steps is exactly s * user_rate.
#[derive(Debug, Clone)]
pub struct LinearDrift {
    pub rate: f64,
    pub stagger: f64,
    pub seed: u64,
}

impl LinearDrift {
    fn direction(&self, user: usize, classes: &[usize], dim: (usize, usize, usize)) -> BTreeMap<usize, Array3<f64>> {
        let mut rng = stream(self.seed, "drift-direction", user as u64);
        let per = dim.0 * dim.1 * dim.2;
        let total = per * classes.len();
        let mut flat = vec![0.0; total];
        fill_gaussian(&mut rng, &mut flat);
        let norm: f64 = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in flat.iter_mut() {
            *v /= norm;
        }
        classes
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let chunk = &flat[k * per..(k + 1) * per];
                (c, Array3::from_shape_vec(dim, chunk.to_vec()).unwrap())
            })
            .collect()
    }

    pub fn user_rate(&self, user: usize) -> f64 {
        self.rate * (1.0 + user as f64 * self.stagger)
    }

    /// Exposed for oracle re-derivations in integration tests.
    pub fn direction_for_test(
        &self,
        user: usize,
        classes: &[usize],
        dim: (usize, usize, usize),
    ) -> BTreeMap<usize, Array3<f64>> {
        self.direction(user, classes, dim)
    }
}

/// Protocol simulation settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProtocolConfig {
    pub users: usize,
    pub classes: usize,
    pub kappa: f64,
    pub tau: u64,
    pub horizon: u64,
    pub drift_rate: f64,
    pub drift_stagger: f64,
    pub merge_mode: MergeMode,
    pub delta_baseline: DeltaBaseline,
    /// Prototype tensor shape used by the synthetic drift simulation.
    pub proto_shape: (usize, usize, usize),
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            users: 3,
            classes: 4,
            kappa: 0.5,
            tau: 10,
            horizon: 200,
            drift_rate: 0.01,
            drift_stagger: 0.5,
            merge_mode: MergeMode::Replace,
            delta_baseline: DeltaBaseline::LastBroadcast,
            proto_shape: (2, 2, 2),
        }
    }
}

#[derive(Debug)]
pub struct NetworkSimResult {
    pub memories: Vec<SemanticMemory>,
    pub ledger: CommLedger,
    pub events: Vec<EventRow>,
    /// Max pairwise memory distance per step (index 0 = after step 1).
    pub divergence: Vec<f64>,
}

fn memory_distance(a: &SemanticMemory, b: &SemanticMemory) -> f64 {
    let mut sq = 0.0;
    for (c, ea) in &a.entries {
        if let Some(eb) = b.entries.get(c) {
            sq += (&ea.prototype - &eb.prototype).iter().map(|v| v * v).sum::<f64>();
        } else {
            sq += ea.prototype.iter().map(|v| v * v).sum::<f64>();
        }
    }
    for (c, eb) in &b.entries {
        if !a.entries.contains_key(c) {
            sq += eb.prototype.iter().map(|v| v * v).sum::<f64>();
        }
    }
    sq.sqrt()
}

fn max_pairwise_distance(mems: &[SemanticMemory]) -> f64 {
    let mut mx = 0.0f64;
    for i in 0..mems.len() {
        for j in i + 1..mems.len() {
            mx = mx.max(memory_distance(&mems[i], &mems[j]));
        }
    }
    mx
}

/// Deterministic multi-user event loop: every user drifts each step; at
/// steps t = 0 mod tau all users run the protocol check on their pre-merge
/// state, then messages are delivered in sender order.
pub fn run_network_sim(cfg: &ProtocolConfig, seed: u64) -> Result<NetworkSimResult> {
    if cfg.users == 0 {
        return Err(UkieError::Config("network sim needs at least one user".into()));
    }
    let classes: Vec<usize> = (0..cfg.classes).collect();
    // identical initialization across users
    let mut init = BTreeMap::new();
    for &c in &classes {
        let mut rng = stream(seed, "proto-init", c as u64);
        let mut p = Array3::<f64>::zeros(cfg.proto_shape);
        fill_gaussian(&mut rng, p.as_slice_mut().unwrap());
        init.insert(c, p);
    }
    let mut memories: Vec<SemanticMemory> = (0..cfg.users)
        .map(|u| {
            let mut m = SemanticMemory::new(u, cfg.kappa, cfg.tau)?;
            for (&c, p) in &init {
                m.update_local(c, p, 0, 1.0);
                // synchronized start: baselines coincide with the prototype
                let e = m.entries.get_mut(&c).unwrap();
                e.last_broadcast_value = p.clone();
                e.rolling_value = p.clone();
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;

    let drift = LinearDrift { rate: cfg.drift_rate, stagger: cfg.drift_stagger, seed };
    let directions: Vec<BTreeMap<usize, Array3<f64>>> =
        (0..cfg.users).map(|u| drift.direction(u, &classes, cfg.proto_shape)).collect();

    let mut ledger = CommLedger::new(cfg.users);
    let mut events = Vec::new();
    let mut divergence = Vec::with_capacity(cfg.horizon as usize);

    for t in 1..=cfg.horizon {
        for (u, mem) in memories.iter_mut().enumerate() {
            let rate = drift.user_rate(u);
            for (&c, dir) in &directions[u] {
                let e = mem.entries.get_mut(&c).unwrap();
                e.prototype.zip_mut_with(dir, |p, d| *p += rate * d);
                e.updated_at = t;
            }
            events.push(EventRow {
                step: t,
                user: u,
                event: EventKind::LocalUpdate,
                delta_norm: rate,
                cumulative_scalars: ledger.scalars_transmitted[u],
            });
        }

        // a lone user has no peers to synchronize with
        if cfg.users > 1 && t % cfg.tau == 0 {
            let mut outbox = Vec::new();
            for mem in memories.iter_mut() {
                let decision = mem.should_broadcast(t, cfg.delta_baseline);
                let user = mem.user_id;
                match decision.message {
                    Some(msg) => {
                        ledger.broadcasts_sent[user] += 1;
                        ledger.scalars_transmitted[user] += mem.broadcast_scalars();
                        events.push(EventRow {
                            step: t,
                            user,
                            event: EventKind::Broadcast,
                            delta_norm: decision.delta_norm,
                            cumulative_scalars: ledger.scalars_transmitted[user],
                        });
                        outbox.push(msg);
                    }
                    None => {
                        ledger.broadcasts_suppressed[user] += 1;
                        events.push(EventRow {
                            step: t,
                            user,
                            event: EventKind::Suppress,
                            delta_norm: decision.delta_norm,
                            cumulative_scalars: ledger.scalars_transmitted[user],
                        });
                    }
                }
            }
            for msg in &outbox {
                for mem in memories.iter_mut() {
                    if mem.user_id != msg.from_user {
                        mem.apply_remote(msg, cfg.merge_mode, t);
                        events.push(EventRow {
                            step: t,
                            user: mem.user_id,
                            event: EventKind::Merge,
                            delta_norm: 0.0,
                            cumulative_scalars: ledger.scalars_transmitted[mem.user_id],
                        });
                    }
                }
            }
        }
        divergence.push(max_pairwise_distance(&memories));
    }

    Ok(NetworkSimResult { memories, ledger, events, divergence })
}
