//! Simulated run of the distributed functional mechanism.
//!
//! A server, `K` parties and a triple dealer exchange typed messages. The
//! server dissects the objective and hands out assignments, parties compute
//! and perturb their coefficients (cross-party ones through a secure dot
//! product relayed by the server), and the server solves the assembled noisy
//! objective.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::dp::{laplace_sample, Epsilon, NoiseKeying, NoiseStream, PrivacyBudget};
use crate::error::{input, Error, Result};
use crate::mpc::{
    decode_product_sum, encode_vec, plain_dot, share, Backend, Dealer, DotHolder, FieldElement,
    TripleLedger, TripleShare, FRACTION_BITS,
};
use crate::objective::{
    coefficient_bound, constant_term, dissect, is_perturbed, label_factor, linear_scale,
    party_sensitivity, quadratic_scale, sub_sensitivity_g, sub_sensitivity_h, Allocation, Coeff,
    CoeffOwner, CoefficientAllocation, PartyId, PolyObjective, TaskKind, VerticalPartition,
    LABEL_OWNER,
};
use crate::solver::{default_ridge_floor, minimize, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActorId {
    Server,
    Party(PartyId),
    Dealer,
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActorId::Server => f.write_str("server"),
            ActorId::Party(p) => write!(f, "{p}"),
            ActorId::Dealer => f.write_str("dealer"),
        }
    }
}

/// Step of a secret-shared dot product.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShareStage {
    /// Dealer to party: this holder's halves of the Beaver triples.
    Triples,
    /// Party to party: the peer's share of the sender's input vector.
    Input,
    /// Party to server: masked differences `x - a` then `y - b`.
    Opening,
    /// Server to party: the opened differences.
    Opened,
    /// Party to party: the sender's share of the product.
    Output,
}

/// Dealer work order for one cross coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleRequest {
    pub index: usize,
    pub left: PartyId,
    pub right: PartyId,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    /// Server to party: every allocation entry that involves the receiver,
    /// with the Laplace scale of each (`None` when unperturbed).
    Allocate {
        entries: Vec<Allocation>,
        scales: Vec<Option<f64>>,
        delta_f: f64,
        epsilon: Epsilon,
    },
    /// Server to dealer.
    Provision { requests: Vec<TripleRequest> },
    SingleCoeff { party: PartyId, index: usize, value: f64 },
    /// Server to both parties of a cross coefficient. `left` supplies the
    /// first vector of the dot product.
    CrossInit {
        index: usize,
        left: PartyId,
        right: PartyId,
        noise_adder: PartyId,
    },
    ShareMsg {
        index: usize,
        stage: ShareStage,
        elements: Vec<FieldElement>,
        triples: Vec<TripleShare>,
    },
    /// Plaintext-debug backend only: a raw vector or an unperturbed product
    /// routed through the server. Always audit-tagged.
    DebugPlain { index: usize, values: Vec<f64> },
    CrossCoeff {
        pair: (PartyId, PartyId),
        index: usize,
        value: f64,
    },
    ModelOut { weights: Vec<f64> },
}

impl Message {
    pub fn tag(&self) -> &'static str {
        match self {
            Message::Allocate { .. } => "allocate",
            Message::Provision { .. } => "provision",
            Message::SingleCoeff { .. } => "single-coeff",
            Message::CrossInit { .. } => "cross-init",
            Message::ShareMsg { .. } => "share",
            Message::DebugPlain { .. } => "debug-plain",
            Message::CrossCoeff { .. } => "cross-coeff",
            Message::ModelOut { .. } => "model-out",
        }
    }

    /// Messages whose payload is plaintext by design of the debug backend.
    pub fn is_audit_tagged(&self) -> bool {
        matches!(self, Message::DebugPlain { .. })
    }

    fn order(&self) -> (u8, usize, u8) {
        match self {
            Message::Allocate { .. } => (0, 0, 0),
            Message::Provision { .. } => (1, 0, 0),
            Message::CrossInit { index, .. } => (2, *index, 0),
            Message::SingleCoeff { index, .. } => (3, *index, 0),
            Message::ShareMsg { index, stage, .. } => (4, *index, *stage as u8),
            Message::DebugPlain { index, values } => (4, *index, u8::from(values.len() == 1)),
            Message::CrossCoeff { index, .. } => (5, *index, 0),
            Message::ModelOut { .. } => (6, 0, 0),
        }
    }

    /// Feeds a stable binary encoding of the payload into `h`.
    fn digest_into(&self, h: &mut Sha256) {
        h.update(self.tag().as_bytes());
        let put_f = |h: &mut Sha256, v: f64| h.update(v.to_bits().to_le_bytes());
        let put_u = |h: &mut Sha256, v: u64| h.update(v.to_le_bytes());
        match self {
            Message::Allocate {
                entries,
                scales,
                delta_f,
                epsilon,
            } => {
                put_f(h, *delta_f);
                put_f(h, epsilon.value().unwrap_or(f64::INFINITY));
                for (e, s) in entries.iter().zip(scales) {
                    h.update(format!("{}/{:?}/{}", e.coeff, e.owner, e.noise_adder.0).as_bytes());
                    put_f(h, s.unwrap_or(0.0));
                }
            }
            Message::Provision { requests } => {
                for r in requests {
                    for v in [r.index, r.left.0, r.right.0, r.len] {
                        put_u(h, v as u64);
                    }
                }
            }
            Message::SingleCoeff { party, index, value } => {
                put_u(h, party.0 as u64);
                put_u(h, *index as u64);
                put_f(h, *value);
            }
            Message::CrossInit {
                index,
                left,
                right,
                noise_adder,
            } => {
                for v in [*index, left.0, right.0, noise_adder.0] {
                    put_u(h, v as u64);
                }
            }
            Message::ShareMsg {
                index,
                stage,
                elements,
                triples,
            } => {
                put_u(h, *index as u64);
                put_u(h, *stage as u64);
                for e in elements {
                    put_u(h, e.value());
                }
                for t in triples {
                    for v in [t.id, t.a.value(), t.b.value(), t.c.value()] {
                        put_u(h, v);
                    }
                }
            }
            Message::DebugPlain { index, values } => {
                put_u(h, *index as u64);
                for v in values {
                    put_f(h, *v);
                }
            }
            Message::CrossCoeff { pair, index, value } => {
                for v in [pair.0 .0, pair.1 .0, *index] {
                    put_u(h, v as u64);
                }
                put_f(h, *value);
            }
            Message::ModelOut { weights } => {
                for v in weights {
                    put_f(h, *v);
                }
            }
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.digest_into(&mut h);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// What the transcript keeps of each message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TranscriptDetail {
    /// Full payloads; required for the server-view audit.
    #[default]
    Full,
    /// Sender, receiver, tag and payload digest only.
    Digest,
    /// No message entries; actor events are still kept.
    EventsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub seq: u64,
    pub sender: ActorId,
    pub receiver: ActorId,
    pub tag: String,
    pub digest: String,
    /// Sort key used to canonicalize interleavings.
    pub key: (u8, usize, u8),
    pub message: Option<Message>,
}

/// Actor-internal events that never travel as messages but are needed to
/// check protocol economy.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub enum ProtocolEvent {
    NoiseAdded { party: PartyId, index: usize, scale: f64 },
    DotComputed { index: usize, left: PartyId, right: PartyId, len: usize },
    TriplesIssued { index: usize, count: usize },
    TriplesConsumed { party: PartyId, index: usize, count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptMeta {
    pub task: TaskKind,
    pub d: usize,
    pub n: usize,
    pub parties: usize,
    pub backend: Backend,
    pub noise_off: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolTranscript {
    pub meta: TranscriptMeta,
    pub entries: Vec<TranscriptEntry>,
    pub events: Vec<ProtocolEvent>,
    pub warnings: Vec<String>,
}

impl ProtocolTranscript {
    /// Orders entries by (message kind, coefficient, stage, sender, receiver)
    /// and renumbers them, so runs under different interleavings compare
    /// equal.
    pub fn canonicalized(&self) -> ProtocolTranscript {
        let mut out = self.clone();
        out.entries.sort_by(|a, b| {
            let ka = (a.key, a.sender, a.receiver, &a.digest);
            let kb = (b.key, b.sender, b.receiver, &b.digest);
            ka.cmp(&kb)
        });
        for (i, e) in out.entries.iter_mut().enumerate() {
            e.seq = i as u64;
        }
        out.events.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        out.warnings.sort();
        out
    }

    /// One JSON object per line: `seq`, `sender`, `receiver`, `tag`, `digest`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            let line = serde_json::json!({
                "seq": e.seq,
                "sender": e.sender.to_string(),
                "receiver": e.receiver.to_string(),
                "tag": e.tag,
                "digest": e.digest,
            });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn server_received(&self) -> impl Iterator<Item = &TranscriptEntry> {
        self.entries.iter().filter(|e| e.receiver == ActorId::Server)
    }

    /// Noise additions per canonical coefficient index.
    pub fn noise_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for e in &self.events {
            if let ProtocolEvent::NoiseAdded { index, .. } = e {
                *m.entry(*index).or_insert(0) += 1;
            }
        }
        m
    }

    /// Number of dot products executed between parties.
    pub fn secure_dot_count(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, ProtocolEvent::DotComputed { .. }))
            .count()
    }

    pub fn triples_issued(&self) -> usize {
        self.events
            .iter()
            .map(|e| match e {
                ProtocolEvent::TriplesIssued { count, .. } => *count,
                _ => 0,
            })
            .sum()
    }

    /// Triples consumed, counted once per holder.
    pub fn triples_consumed(&self) -> BTreeMap<PartyId, usize> {
        let mut m = BTreeMap::new();
        for e in &self.events {
            if let ProtocolEvent::TriplesConsumed { party, count, .. } = e {
                *m.entry(*party).or_insert(0) += count;
            }
        }
        m
    }
}

/// Outcome of the economy check on a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomyReport {
    pub perturbed_coefficients: usize,
    pub noise_additions: usize,
    /// Perturbed coefficients with other than exactly one noise addition.
    pub noise_anomalies: Vec<Coeff>,
    pub secure_dots: usize,
    pub cross_coefficients: usize,
    pub dot_bound: usize,
    /// Issued triples equal consumed triples for both holders, and each dot
    /// product of length `n` consumed exactly `n`.
    pub ledger_balanced: bool,
}

impl EconomyReport {
    pub fn ok(&self) -> bool {
        self.noise_anomalies.is_empty()
            && self.secure_dots == self.cross_coefficients
            && self.secure_dots <= self.dot_bound
            && self.ledger_balanced
    }
}

pub fn check_economy(t: &ProtocolTranscript, partition: &VerticalPartition) -> EconomyReport {
    let d = t.meta.d;
    let alloc = dissect(t.meta.task, partition);
    let counts = t.noise_counts();
    let expected = |c: Coeff| usize::from(!t.meta.noise_off && is_perturbed(t.meta.task, c));
    let noise_anomalies: Vec<Coeff> = Coeff::all(d)
        .filter(|&c| counts.get(&c.canonical_index(d)).copied().unwrap_or(0) != expected(c))
        .collect();
    let cross = alloc.cross_party().count();
    let ledger_balanced = match t.meta.backend {
        Backend::PlaintextDebug => t.triples_issued() == 0 && t.triples_consumed().is_empty(),
        Backend::SecretSharing => {
            let issued = t.triples_issued();
            let consumed = t.triples_consumed();
            let per_dot = t.events.iter().all(|e| match e {
                ProtocolEvent::TriplesIssued { count, .. } => *count == t.meta.n,
                ProtocolEvent::TriplesConsumed { count, .. } => *count == t.meta.n,
                _ => true,
            });
            per_dot
                && issued == cross * t.meta.n
                && alloc
                    .pairs()
                    .iter()
                    .flat_map(|&(k, l)| [k, l])
                    .all(|p| consumed.get(&p).is_some())
                && consumed.values().sum::<usize>() == 2 * issued
        }
    };
    EconomyReport {
        perturbed_coefficients: Coeff::all(d).filter(|&c| expected(c) == 1).count(),
        noise_additions: counts.values().sum(),
        noise_anomalies,
        secure_dots: t.secure_dot_count(),
        cross_coefficients: cross,
        dot_bound: d * d + d,
        ledger_balanced,
    }
}

/// How the privacy budget is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BudgetSpec {
    /// Global level chosen by the server; noise `Lap(delta_f / epsilon)`.
    TopDown(Epsilon),
    /// Parties choose budgets for their single-party coefficients and pairs
    /// for their cross coefficients.
    BottomUp {
        single: BTreeMap<PartyId, f64>,
        cross: BTreeMap<(PartyId, PartyId), f64>,
    },
}

impl BudgetSpec {
    /// Same sub-budget for every party and every interacting pair.
    pub fn bottom_up_uniform(partition: &VerticalPartition, single: f64, cross: f64) -> Self {
        let parties: Vec<PartyId> = partition.party_ids().collect();
        let mut pairs = BTreeMap::new();
        for (i, &k) in parties.iter().enumerate() {
            for &l in &parties[i + 1..] {
                pairs.insert((k, l), cross);
            }
        }
        BudgetSpec::BottomUp {
            single: parties.into_iter().map(|p| (p, single)).collect(),
            cross: pairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    /// Single-threaded FIFO delivery.
    #[default]
    Deterministic,
    /// One thread per actor.
    Threaded,
}

/// Deliberate protocol deviation for audit tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fault {
    /// The noise adder of this coefficient forwards it unperturbed.
    SkipNoise(Coeff),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub budget: BudgetSpec,
    pub seed: u64,
    pub backend: Backend,
    pub keying: NoiseKeying,
    /// Eigenvalue floor of the solver; `None` uses the default for `n`.
    pub ridge: Option<f64>,
    pub scheduler: Scheduler,
    pub detail: TranscriptDetail,
    pub fault: Option<Fault>,
    /// Wall-clock limit of a threaded run.
    pub timeout: Duration,
}

impl ProtocolConfig {
    pub fn new(epsilon: Epsilon, seed: u64, backend: Backend) -> Self {
        ProtocolConfig {
            budget: BudgetSpec::TopDown(epsilon),
            seed,
            backend,
            keying: NoiseKeying::Coefficient,
            ridge: None,
            scheduler: Scheduler::Deterministic,
            detail: TranscriptDetail::Full,
            fault: None,
            timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolOutput {
    pub model: Model,
    /// The noisy objective the server solved.
    pub objective: PolyObjective,
    pub budget: PrivacyBudget,
    pub transcript: ProtocolTranscript,
}

/// Privacy accounting of a budget specification without running the protocol.
pub fn plan_budget(task: TaskKind, partition: &VerticalPartition, spec: &BudgetSpec) -> Result<PrivacyBudget> {
    let alloc = dissect(task, partition);
    noise_plan(task, partition, &alloc, spec).map(|(_, b, _)| b)
}

/// Per-coefficient Laplace scales and the matching accounting.
fn noise_plan(
    task: TaskKind,
    partition: &VerticalPartition,
    alloc: &CoefficientAllocation,
    spec: &BudgetSpec,
) -> Result<(Vec<Option<f64>>, PrivacyBudget, Epsilon)> {
    let d = partition.dim();
    let delta_f = crate::objective::global_sensitivity(task, d);
    let dk = |p: PartyId| partition.features_of(p).len();
    match spec {
        BudgetSpec::TopDown(eps) => {
            let sens = partition
                .party_ids()
                .map(|p| Ok((p, party_sensitivity(task, d, dk(p), p == LABEL_OWNER)?)))
                .collect::<Result<Vec<_>>>()?;
            let budget = PrivacyBudget::top_down(eps.value().unwrap_or(f64::INFINITY), delta_f, &sens)?;
            let scale = eps.scale(delta_f);
            let scales = alloc
                .entries()
                .iter()
                .map(|e| scale.filter(|_| is_perturbed(task, e.coeff)))
                .collect();
            Ok((scales, budget, *eps))
        }
        BudgetSpec::BottomUp { single, cross } => {
            let mut g = BTreeMap::new();
            for p in partition.party_ids() {
                let eps = *single
                    .get(&p)
                    .ok_or_else(|| Error::Input(format!("no single-party budget for {p}")))?;
                g.insert(p, (eps, sub_sensitivity_g(task, d, dk(p), p == LABEL_OWNER)?));
            }
            let mut h = BTreeMap::new();
            for (k, l) in alloc.pairs() {
                let eps = *cross
                    .get(&(k, l))
                    .ok_or_else(|| Error::Input(format!("no cross budget for pair ({k}, {l})")))?;
                // The label owner's count goes first when it is in the pair.
                let sens = sub_sensitivity_h(task, d, dk(k), dk(l), k == LABEL_OWNER)?;
                h.insert((k, l), (eps, sens));
            }
            for &(eps, _) in g.values().chain(h.values()) {
                if !(eps > 0.0 && eps.is_finite()) {
                    return input(format!("sub-budget {eps} must be positive and finite"));
                }
            }
            let scales = alloc
                .entries()
                .iter()
                .map(|e| {
                    if !is_perturbed(task, e.coeff) {
                        return None;
                    }
                    let (eps, sens) = match e.owner {
                        CoeffOwner::SingleParty(p) => g[&p],
                        CoeffOwner::CrossParty(..) => h[&e.owner.pair().expect("cross entry")],
                    };
                    Some(sens / eps)
                })
                .collect();
            let budget = PrivacyBudget::bottom_up(delta_f, g, h)?;
            let eps = Epsilon::finite(budget.epsilon)?;
            Ok((scales, budget, eps))
        }
    }
}

// ---------------------------------------------------------------------------
// Actors
// ---------------------------------------------------------------------------

type Outbox = Vec<(ActorId, Message)>;

#[derive(Default)]
struct Step {
    out: Outbox,
    events: Vec<ProtocolEvent>,
    warnings: Vec<String>,
}

struct Server {
    task: TaskKind,
    n: usize,
    parties: Vec<PartyId>,
    alloc: CoefficientAllocation,
    scales: Vec<Option<f64>>,
    delta_f: f64,
    epsilon: Epsilon,
    backend: Backend,
    ridge: f64,
    received: Vec<Option<f64>>,
    outstanding: usize,
    openings: HashMap<usize, [Option<(Vec<FieldElement>, Vec<FieldElement>)>; 2]>,
    model: Option<Vec<f64>>,
    objective: Option<PolyObjective>,
    /// Cross coefficients not yet started: index, left, right, noise adder.
    queue: VecDeque<(usize, PartyId, PartyId, PartyId)>,
    in_flight: usize,
}

/// Dot products the server keeps running at once; bounds the triples and
/// shares held in memory.
const DOT_WINDOW: usize = 4;

impl Server {
    fn start(&mut self) -> Step {
        let mut step = Step::default();
        for &p in &self.parties {
            let (entries, scales) = self
                .alloc
                .entries()
                .iter()
                .zip(&self.scales)
                .filter(|(e, _)| e.owner.involves(p))
                .map(|(e, s)| (*e, *s))
                .unzip();
            step.out.push((
                ActorId::Party(p),
                Message::Allocate {
                    entries,
                    scales,
                    delta_f: self.delta_f,
                    epsilon: self.epsilon,
                },
            ));
        }
        let d = self.alloc.dim();
        self.queue = self
            .alloc
            .cross_party()
            .map(|e| {
                let CoeffOwner::CrossParty(l, r) = e.owner else { unreachable!() };
                (e.coeff.canonical_index(d), l, r, e.noise_adder)
            })
            .collect();
        while self.in_flight < DOT_WINDOW && self.launch_next(&mut step) {}
        step
    }

    /// Starts the next queued cross coefficient, if any.
    fn launch_next(&mut self, step: &mut Step) -> bool {
        let Some((index, left, right, noise_adder)) = self.queue.pop_front() else {
            return false;
        };
        if self.backend == Backend::SecretSharing {
            let requests = vec![TripleRequest {
                index,
                left,
                right,
                len: self.n,
            }];
            step.out.push((ActorId::Dealer, Message::Provision { requests }));
        }
        for p in [left, right] {
            step.out.push((
                ActorId::Party(p),
                Message::CrossInit {
                    index,
                    left,
                    right,
                    noise_adder,
                },
            ));
        }
        self.in_flight += 1;
        true
    }

    fn entry(&self, index: usize) -> Result<&Allocation> {
        self.alloc
            .entries()
            .get(index)
            .ok_or_else(|| Error::Protocol(format!("coefficient index {index} out of range")))
    }

    fn pair_of(&self, index: usize, from: PartyId) -> Result<(PartyId, PartyId)> {
        match self.entry(index)?.owner {
            CoeffOwner::CrossParty(l, r) if from == l || from == r => Ok((l, r)),
            _ => Err(Error::Protocol(format!(
                "{from} sent dot-product traffic for coefficient {index} it does not share"
            ))),
        }
    }

    fn handle(&mut self, from: ActorId, msg: Message) -> Result<Step> {
        let mut step = Step::default();
        let ActorId::Party(from) = from else {
            return Err(Error::Protocol(format!("server got {} from {from}", msg.tag())));
        };
        match msg {
            Message::SingleCoeff { party, index, value } => {
                let e = *self.entry(index)?;
                if party != from || e.owner != CoeffOwner::SingleParty(from) {
                    return Err(Error::Protocol(format!(
                        "{from} submitted {} which it does not own",
                        e.coeff
                    )));
                }
                self.accept(index, value, &mut step)?;
            }
            Message::CrossCoeff { pair, index, value } => {
                let e = *self.entry(index)?;
                if e.owner.pair() != Some((pair.0.min(pair.1), pair.0.max(pair.1)))
                    || e.noise_adder != from
                {
                    return Err(Error::Protocol(format!(
                        "{from} submitted cross coefficient {} out of turn",
                        e.coeff
                    )));
                }
                self.accept(index, value, &mut step)?;
                self.in_flight -= 1;
                self.launch_next(&mut step);
            }
            Message::ShareMsg {
                index,
                stage: ShareStage::Opening,
                elements,
                ..
            } => {
                let (l, r) = self.pair_of(index, from)?;
                let role = usize::from(from == r);
                let half = elements.len() / 2;
                if elements.len() != 2 * self.n {
                    return Err(Error::Protocol(format!("opening of length {}", elements.len())));
                }
                let slot = self.openings.entry(index).or_default();
                if slot[role].is_some() {
                    return Err(Error::Protocol(format!("duplicate opening for {index}")));
                }
                slot[role] = Some((elements[..half].to_vec(), elements[half..].to_vec()));
                if let [Some((d0, e0)), Some((d1, e1))] = slot {
                    let opened: Vec<FieldElement> = d0
                        .iter()
                        .zip(d1.iter())
                        .map(|(a, b)| *a + *b)
                        .chain(e0.iter().zip(e1.iter()).map(|(a, b)| *a + *b))
                        .collect();
                    self.openings.remove(&index);
                    for p in [l, r] {
                        step.out.push((
                            ActorId::Party(p),
                            Message::ShareMsg {
                                index,
                                stage: ShareStage::Opened,
                                elements: opened.clone(),
                                triples: Vec::new(),
                            },
                        ));
                    }
                }
            }
            Message::DebugPlain { index, values } => {
                if self.backend != Backend::PlaintextDebug {
                    return Err(Error::Protocol("plaintext traffic on a secret-sharing run".into()));
                }
                let (l, r) = self.pair_of(index, from)?;
                let to = if from == l { r } else { l };
                step.out.push((ActorId::Party(to), Message::DebugPlain { index, values }));
            }
            other => {
                return Err(Error::Protocol(format!(
                    "server cannot handle {} from {from}",
                    other.tag()
                )))
            }
        }
        Ok(step)
    }

    fn accept(&mut self, index: usize, value: f64, step: &mut Step) -> Result<()> {
        let e = *self.entry(index)?;
        if self.received[index].is_some() {
            return Err(Error::Protocol(format!("{} submitted twice", e.coeff)));
        }
        if !value.is_finite() {
            return Err(Error::Protocol(format!("{} is not finite", e.coeff)));
        }
        let limit = self.plausible_limit(e.coeff, self.scales[index]);
        if value.abs() > limit {
            let w = format!(
                "{} = {value} exceeds the plausible range {limit} for n = {}",
                e.coeff, self.n
            );
            warn!("{w}");
            step.warnings.push(w);
        }
        self.received[index] = Some(value);
        self.outstanding -= 1;
        if self.outstanding == 0 {
            let values: Vec<f64> = self.received.iter().map(|v| v.expect("complete")).collect();
            let obj = PolyObjective::from_canonical(self.alloc.dim(), &values)?;
            let w = minimize(&obj, self.ridge)?;
            for &p in &self.parties {
                step.out.push((ActorId::Party(p), Message::ModelOut { weights: w.clone() }));
            }
            self.model = Some(w);
            self.objective = Some(obj);
        }
        Ok(())
    }

    fn plausible_limit(&self, c: Coeff, scale: Option<f64>) -> f64 {
        let n = self.n as f64;
        let base = if self.task == TaskKind::Logistic && c == Coeff::Constant {
            n * crate::objective::LOGISTIC_T0
        } else {
            n * coefficient_bound(self.task, c)
        };
        // Fixed-point rounding slack plus a generous noise allowance.
        let rounding = n * 2f64.powi(-(FRACTION_BITS as i32) + 2);
        base * (1.0 + 1e-12) + rounding + 50.0 * scale.unwrap_or(0.0)
    }
}

struct DealerActor {
    inner: Dealer,
}

impl DealerActor {
    fn handle(&mut self, from: ActorId, msg: Message) -> Result<Step> {
        let Message::Provision { requests } = msg else {
            return Err(Error::Protocol(format!("dealer got {} from {from}", msg.tag())));
        };
        if from != ActorId::Server {
            return Err(Error::Protocol("only the server may provision triples".into()));
        }
        let mut step = Step::default();
        for r in requests {
            let triples = self.inner.triples(r.len);
            step.events.push(ProtocolEvent::TriplesIssued {
                index: r.index,
                count: r.len,
            });
            for (p, half) in [
                (r.left, triples.iter().map(|t| t.holder0).collect::<Vec<_>>()),
                (r.right, triples.iter().map(|t| t.holder1).collect()),
            ] {
                step.out.push((
                    ActorId::Party(p),
                    Message::ShareMsg {
                        index: r.index,
                        stage: ShareStage::Triples,
                        elements: Vec::new(),
                        triples: half,
                    },
                ));
            }
        }
        Ok(step)
    }
}

/// Local data of one party: its own columns and, for party 1, the label.
#[derive(Debug, Clone)]
pub struct PartyData {
    pub id: PartyId,
    /// Global feature index to column.
    pub columns: BTreeMap<usize, Vec<f64>>,
    pub labels: Option<Vec<f64>>,
}

impl PartyData {
    /// Slices out what `party` holds; nothing else is reachable from it.
    pub fn extract(ds: &Dataset, partition: &VerticalPartition, party: PartyId) -> Self {
        PartyData {
            id: party,
            columns: partition
                .features_of(party)
                .iter()
                .map(|&a| (a, ds.column(a)))
                .collect(),
            labels: (party == partition.label_owner()).then(|| ds.labels()),
        }
    }
}

#[derive(Default)]
struct CrossState {
    init: Option<(PartyId, PartyId, PartyId)>,
    triples: Option<Vec<TripleShare>>,
    kept: Option<Vec<FieldElement>>,
    peer_input: Option<Vec<FieldElement>>,
    holder: Option<DotHolder>,
    opened: Option<Vec<FieldElement>>,
    own_out: Option<FieldElement>,
    peer_out: Option<FieldElement>,
    debug_in: Option<Vec<f64>>,
    product: Option<f64>,
    sent_input: bool,
    sent_debug: bool,
    finished: bool,
}

struct Party {
    data: PartyData,
    task: TaskKind,
    d: usize,
    n: usize,
    seed: u64,
    backend: Backend,
    keying: NoiseKeying,
    fault: Option<Fault>,
    ledger: TripleLedger,
    allocated: bool,
    noise: HashMap<usize, (f64, f64)>,
    cross: BTreeMap<usize, CrossState>,
    model: Option<Vec<f64>>,
}

impl Party {
    fn me(&self) -> PartyId {
        self.data.id
    }

    fn label_factors(&self) -> Result<Vec<f64>> {
        let y = self
            .data
            .labels
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("{} does not hold the label", self.me())))?;
        Ok(y.iter().map(|&v| label_factor(self.task, v)).collect())
    }

    fn column(&self, a: usize) -> Result<&[f64]> {
        self.data
            .columns
            .get(&a)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Protocol(format!("{} does not hold feature {}", self.me(), a + 1)))
    }

    /// The vector this party contributes to a cross coefficient.
    fn cross_vector(&self, index: usize, left: bool) -> Result<Vec<f64>> {
        match Coeff::from_canonical_index(index, self.d) {
            Some(Coeff::Linear(_)) if left => self.label_factors(),
            Some(Coeff::Linear(a)) => Ok(self.column(a)?.to_vec()),
            Some(Coeff::Quadratic(a, b)) => Ok(self.column(if left { a } else { b })?.to_vec()),
            _ => Err(Error::Protocol(format!("coefficient {index} is not cross-party"))),
        }
    }

    fn public_scale(&self, index: usize) -> f64 {
        match Coeff::from_canonical_index(index, self.d) {
            Some(Coeff::Linear(_)) => linear_scale(self.task),
            _ => quadratic_scale(self.task),
        }
    }

    fn single_value(&self, c: Coeff) -> Result<f64> {
        Ok(match c {
            Coeff::Constant => {
                let y = self.data.labels.as_ref().ok_or_else(|| {
                    Error::Protocol(format!("{} cannot compute the constant term", self.me()))
                })?;
                let mut acc = 0.0;
                for &v in y {
                    acc += constant_term(self.task, v);
                }
                acc
            }
            Coeff::Linear(a) => linear_scale(self.task) * plain_dot(&self.label_factors()?, self.column(a)?),
            Coeff::Quadratic(a, b) => quadratic_scale(self.task) * plain_dot(self.column(a)?, self.column(b)?),
        })
    }

    fn apply_noise(&self, index: usize, value: f64, step: &mut Step) -> f64 {
        let c = Coeff::from_canonical_index(index, self.d).expect("valid index");
        match self.noise.get(&index) {
            Some(_) if self.fault == Some(Fault::SkipNoise(c)) => value,
            Some(&(noise, scale)) => {
                step.events.push(ProtocolEvent::NoiseAdded {
                    party: self.me(),
                    index,
                    scale,
                });
                value + noise
            }
            None => value,
        }
    }

    fn handle(&mut self, from: ActorId, msg: Message) -> Result<Step> {
        let mut step = Step::default();
        match msg {
            Message::Allocate {
                entries, scales, ..
            } => {
                if self.allocated || from != ActorId::Server {
                    return Err(Error::Protocol(format!("unexpected allocation at {}", self.me())));
                }
                self.allocated = true;
                self.draw_noise(&entries, &scales)?;
                for e in &entries {
                    if e.owner == CoeffOwner::SingleParty(self.me()) {
                        let index = e.coeff.canonical_index(self.d);
                        let v = self.single_value(e.coeff)?;
                        let value = self.apply_noise(index, v, &mut step);
                        step.out.push((
                            ActorId::Server,
                            Message::SingleCoeff {
                                party: self.me(),
                                index,
                                value,
                            },
                        ));
                    }
                }
                let pending: Vec<usize> = self.cross.keys().copied().collect();
                for index in pending {
                    self.progress(index, &mut step)?;
                }
            }
            Message::CrossInit {
                index,
                left,
                right,
                noise_adder,
            } => {
                if from != ActorId::Server || (left != self.me() && right != self.me()) {
                    return Err(Error::Protocol(format!("bad cross init at {}", self.me())));
                }
                let st = self.cross.entry(index).or_default();
                if st.init.is_some() {
                    return Err(Error::Protocol(format!("duplicate cross init {index}")));
                }
                st.init = Some((left, right, noise_adder));
                self.progress(index, &mut step)?;
            }
            Message::ShareMsg {
                index,
                stage,
                elements,
                triples,
            } => {
                let st = self.cross.entry(index).or_default();
                let slot_taken = match stage {
                    ShareStage::Triples if from == ActorId::Dealer => st.triples.replace(triples).is_some(),
                    ShareStage::Input if matches!(from, ActorId::Party(_)) => {
                        st.peer_input.replace(elements).is_some()
                    }
                    ShareStage::Opened if from == ActorId::Server => st.opened.replace(elements).is_some(),
                    ShareStage::Output if matches!(from, ActorId::Party(_)) && elements.len() == 1 => {
                        st.peer_out.replace(elements[0]).is_some()
                    }
                    _ => {
                        return Err(Error::Protocol(format!(
                            "{} got share stage {stage:?} from {from}",
                            self.me()
                        )))
                    }
                };
                if slot_taken {
                    return Err(Error::Protocol(format!("duplicate {stage:?} share for {index}")));
                }
                self.progress(index, &mut step)?;
            }
            Message::DebugPlain { index, values } => {
                let st = self.cross.entry(index).or_default();
                if from != ActorId::Server || st.debug_in.replace(values).is_some() {
                    return Err(Error::Protocol(format!("unexpected debug payload for {index}")));
                }
                self.progress(index, &mut step)?;
            }
            Message::ModelOut { weights } => {
                self.model = Some(weights);
            }
            other => {
                return Err(Error::Protocol(format!(
                    "{} cannot handle {} from {from}",
                    self.me(),
                    other.tag()
                )))
            }
        }
        Ok(step)
    }

    fn draw_noise(&mut self, entries: &[Allocation], scales: &[Option<f64>]) -> Result<()> {
        let (me, d) = (self.me(), self.d);
        let mine: Vec<(usize, f64)> = entries
            .iter()
            .zip(scales)
            .filter(|(e, _)| e.noise_adder == me)
            .filter_map(|(e, s)| s.map(|s| (e.coeff.canonical_index(d), s)))
            .collect();
        let mut party_stream = NoiseStream::for_party(self.seed, self.me());
        for (index, scale) in mine {
            let noise = match self.keying {
                NoiseKeying::Coefficient => {
                    laplace_sample(scale, &mut NoiseStream::for_coefficient(self.seed, index))?
                }
                NoiseKeying::Party => laplace_sample(scale, &mut party_stream)?,
            };
            self.noise.insert(index, (noise, scale));
        }
        Ok(())
    }

    fn share_rng(&self, index: usize) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ 0x7368_6172_6573_2e2e);
        rng.set_stream(((index as u64) << 16) | self.me().0 as u64);
        rng
    }

    /// Advances the dot product of `index` as far as the buffered messages
    /// allow.
    fn progress(&mut self, index: usize, step: &mut Step) -> Result<()> {
        let me = self.me();
        let Some((left, right, noise_adder)) = self.cross.get(&index).and_then(|s| s.init) else {
            return Ok(());
        };
        let is_left = me == left;
        let peer = if is_left { right } else { left };

        if self.cross[&index].product.is_none() {
            match self.backend {
                Backend::SecretSharing => self.progress_shared(index, is_left, peer, left, right, step)?,
                Backend::PlaintextDebug => self.progress_debug(index, is_left, peer, left, right, step)?,
            }
        }

        let st = &self.cross[&index];
        if let (Some(product), false, true) = (st.product, st.finished, self.allocated) {
            if noise_adder == me {
                let value = self.public_scale(index) * product;
                let value = self.apply_noise(index, value, step);
                step.out.push((
                    ActorId::Server,
                    Message::CrossCoeff {
                        pair: (left, right),
                        index,
                        value,
                    },
                ));
            }
            self.cross.get_mut(&index).expect("state").finished = true;
        }
        Ok(())
    }

    fn progress_shared(
        &mut self,
        index: usize,
        is_left: bool,
        peer: PartyId,
        left: PartyId,
        right: PartyId,
        step: &mut Step,
    ) -> Result<()> {
        let me = self.me();
        let has_triples = self.cross[&index].triples.is_some();
        if has_triples && !self.cross[&index].sent_input {
            let v = encode_vec(&self.cross_vector(index, is_left)?)?;
            if v.len() != self.n {
                return Err(Error::Protocol("vector length differs from n".into()));
            }
            let (keep, send) = share(&v, &mut self.share_rng(index));
            let st = self.cross.get_mut(&index).expect("state");
            st.kept = Some(keep);
            st.sent_input = true;
            step.out.push((
                ActorId::Party(peer),
                Message::ShareMsg {
                    index,
                    stage: ShareStage::Input,
                    elements: send,
                    triples: Vec::new(),
                },
            ));
        }

        let st = self.cross.get_mut(&index).expect("state");
        if st.holder.is_none() && st.kept.is_some() && st.peer_input.is_some() {
            let triples = st.triples.take().expect("triples arrived");
            self.ledger.consume_all(triples.iter().map(|t| t.id))?;
            step.events.push(ProtocolEvent::TriplesConsumed {
                party: me,
                index,
                count: triples.len(),
            });
            let kept = st.kept.take().expect("kept");
            let other = st.peer_input.take().expect("peer");
            // Holder 0 is the left party: own x share and the peer's y share.
            let (role, x, y) = if is_left { (0, kept, other) } else { (1, other, kept) };
            let holder = DotHolder::new(role, x, y, triples)?;
            let (d, e) = holder.opening();
            st.holder = Some(holder);
            let mut elements = d;
            elements.extend(e);
            step.out.push((
                ActorId::Server,
                Message::ShareMsg {
                    index,
                    stage: ShareStage::Opening,
                    elements,
                    triples: Vec::new(),
                },
            ));
        }

        if st.own_out.is_none() {
            if let (Some(holder), Some(opened)) = (&st.holder, &st.opened) {
                if opened.len() != 2 * holder.len() {
                    return Err(Error::Protocol("opened vector has the wrong length".into()));
                }
                let (d, e) = opened.split_at(holder.len());
                let z = holder.finish(d, e)?;
                st.own_out = Some(z);
                st.opened = None;
                step.out.push((
                    ActorId::Party(peer),
                    Message::ShareMsg {
                        index,
                        stage: ShareStage::Output,
                        elements: vec![z],
                        triples: Vec::new(),
                    },
                ));
            }
        }

        if let (Some(a), Some(b)) = (st.own_out, st.peer_out) {
            st.product = Some(decode_product_sum(a + b, self.n)?);
            st.holder = None;
            if is_left {
                step.events.push(ProtocolEvent::DotComputed {
                    index,
                    left,
                    right,
                    len: self.n,
                });
            }
        }
        Ok(())
    }

    fn progress_debug(
        &mut self,
        index: usize,
        is_left: bool,
        _peer: PartyId,
        left: PartyId,
        right: PartyId,
        step: &mut Step,
    ) -> Result<()> {
        if !is_left {
            if !self.cross[&index].sent_debug {
                let v = self.cross_vector(index, false)?;
                let st = self.cross.get_mut(&index).expect("state");
                st.sent_debug = true;
                step.out.push((ActorId::Server, Message::DebugPlain { index, values: v }));
            }
            let st = self.cross.get_mut(&index).expect("state");
            if let Some(values) = st.debug_in.take() {
                if values.len() != 1 {
                    return Err(Error::Protocol("debug product must be a scalar".into()));
                }
                st.product = Some(values[0]);
            }
            return Ok(());
        }
        let Some(other) = self.cross.get_mut(&index).expect("state").debug_in.take() else {
            return Ok(());
        };
        let own = self.cross_vector(index, true)?;
        if own.len() != other.len() {
            return Err(Error::Protocol("debug vectors differ in length".into()));
        }
        for &v in own.iter().chain(&other) {
            if !(v.abs() <= 1.0) {
                return input(format!("dot product input {v} outside [-1, 1]"));
            }
        }
        let product = plain_dot(&own, &other);
        step.events.push(ProtocolEvent::DotComputed {
            index,
            left,
            right,
            len: own.len(),
        });
        step.out.push((
            ActorId::Server,
            Message::DebugPlain {
                index,
                values: vec![product],
            },
        ));
        self.cross.get_mut(&index).expect("state").product = Some(product);
        Ok(())
    }
}

enum AnyActor {
    Server(Box<Server>),
    Party(Box<Party>),
    Dealer(DealerActor),
}

impl AnyActor {
    fn handle(&mut self, from: ActorId, msg: Message) -> Result<Step> {
        match self {
            AnyActor::Server(s) => s.handle(from, msg),
            AnyActor::Party(p) => p.handle(from, msg),
            AnyActor::Dealer(d) => d.handle(from, msg),
        }
    }

    /// Whether the actor has nothing more to do.
    fn done(&self) -> bool {
        match self {
            AnyActor::Server(s) => s.model.is_some(),
            AnyActor::Party(p) => p.model.is_some(),
            AnyActor::Dealer(_) => true,
        }
    }
}

fn make_entry(seq: u64, sender: ActorId, receiver: ActorId, msg: &Message, detail: TranscriptDetail) -> TranscriptEntry {
    TranscriptEntry {
        seq,
        sender,
        receiver,
        tag: msg.tag().to_string(),
        digest: msg.digest(),
        key: msg.order(),
        message: (detail == TranscriptDetail::Full).then(|| msg.clone()),
    }
}

/// Runs the distributed protocol on a vertically partitioned dataset.
pub fn run_protocol(
    ds: &Dataset,
    partition: &VerticalPartition,
    cfg: &ProtocolConfig,
) -> Result<ProtocolOutput> {
    let task = ds.task();
    let (d, n) = (ds.dim(), ds.len());
    if partition.dim() != d {
        return input(format!("partition covers {} features, dataset has {d}", partition.dim()));
    }
    if n == 0 {
        return input("cannot train on an empty dataset");
    }
    let ridge = cfg.ridge.unwrap_or_else(|| default_ridge_floor(n));
    let alloc = dissect(task, partition);
    let (scales, budget, epsilon) = noise_plan(task, partition, &alloc, &cfg.budget)?;
    let noise_off = scales.iter().all(Option::is_none);
    let meta = TranscriptMeta {
        task,
        d,
        n,
        parties: partition.parties(),
        backend: cfg.backend,
        noise_off,
        seed: cfg.seed,
    };

    let parties: Vec<PartyId> = partition.party_ids().collect();
    let mut server = Server {
        task,
        n,
        parties: parties.clone(),
        outstanding: alloc.len(),
        received: vec![None; alloc.len()],
        alloc,
        scales,
        delta_f: budget.delta_f,
        epsilon,
        backend: cfg.backend,
        ridge,
        openings: HashMap::new(),
        model: None,
        objective: None,
        queue: VecDeque::new(),
        in_flight: 0,
    };
    let start = server.start();
    let mut actors: BTreeMap<ActorId, AnyActor> = BTreeMap::new();
    for &p in &parties {
        actors.insert(
            ActorId::Party(p),
            AnyActor::Party(Box::new(Party {
                data: PartyData::extract(ds, partition, p),
                task,
                d,
                n,
                seed: cfg.seed,
                backend: cfg.backend,
                keying: cfg.keying,
                fault: cfg.fault,
                ledger: TripleLedger::new(),
                allocated: false,
                noise: HashMap::new(),
                cross: BTreeMap::new(),
                model: None,
            })),
        );
    }
    actors.insert(
        ActorId::Dealer,
        AnyActor::Dealer(DealerActor {
            inner: Dealer::new(cfg.seed ^ 0x6465_616c_6572_2e2e),
        }),
    );
    actors.insert(ActorId::Server, AnyActor::Server(Box::new(server)));

    let (actors, transcript) = match cfg.scheduler {
        Scheduler::Deterministic => run_fifo(actors, start, cfg.detail, meta)?,
        Scheduler::Threaded => {
            let (a, t) = run_threaded(actors, start, cfg.detail, meta, cfg.timeout)?;
            (a, t.canonicalized())
        }
    };
    let Some(AnyActor::Server(server)) = actors.get(&ActorId::Server) else {
        unreachable!("server registered")
    };
    let (Some(w), Some(objective)) = (server.model.clone(), server.objective.clone()) else {
        return Err(Error::Protocol("protocol stalled before the model was solved".into()));
    };
    for p in &parties {
        match actors.get(&ActorId::Party(*p)) {
            Some(AnyActor::Party(state)) if state.model.as_ref() == Some(&w) => {}
            _ => return Err(Error::Protocol(format!("{p} did not receive the model"))),
        }
    }
    Ok(ProtocolOutput {
        model: Model::new(w, task)?,
        objective,
        budget,
        transcript,
    })
}

const MAX_STEPS: usize = 100_000_000;

fn run_fifo(
    mut actors: BTreeMap<ActorId, AnyActor>,
    start: Step,
    detail: TranscriptDetail,
    meta: TranscriptMeta,
) -> Result<(BTreeMap<ActorId, AnyActor>, ProtocolTranscript)> {
    let mut transcript = ProtocolTranscript {
        meta,
        entries: Vec::new(),
        events: start.events,
        warnings: start.warnings,
    };
    let mut seq = 0u64;
    let mut queue: VecDeque<(u64, ActorId, ActorId, Message)> = VecDeque::new();
    let mut enqueue = |queue: &mut VecDeque<_>, from: ActorId, out: Outbox| {
        for (to, msg) in out {
            queue.push_back((seq, from, to, msg));
            seq += 1;
        }
    };
    enqueue(&mut queue, ActorId::Server, start.out);
    let mut steps = 0usize;
    while let Some((s, from, to, msg)) = queue.pop_front() {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(Error::Protocol("step limit exceeded".into()));
        }
        if detail != TranscriptDetail::EventsOnly {
            transcript.entries.push(make_entry(s, from, to, &msg, detail));
        }
        let actor = actors
            .get_mut(&to)
            .ok_or_else(|| Error::Protocol(format!("no actor {to}")))?;
        let step = actor.handle(from, msg)?;
        transcript.events.extend(step.events);
        transcript.warnings.extend(step.warnings);
        enqueue(&mut queue, to, step.out);
    }
    Ok((actors, transcript))
}

struct Router {
    senders: BTreeMap<ActorId, Sender<(ActorId, Message)>>,
    seq: AtomicU64,
    log: Mutex<ProtocolTranscript>,
    detail: TranscriptDetail,
    failed: AtomicBool,
}

impl Router {
    fn send(&self, from: ActorId, step: Step) -> Result<()> {
        {
            let mut log = self.log.lock().expect("transcript lock");
            log.events.extend(step.events);
            log.warnings.extend(step.warnings);
        }
        for (to, msg) in step.out {
            let seq = self.seq.fetch_add(1, Ordering::SeqCst);
            if self.detail != TranscriptDetail::EventsOnly {
                let entry = make_entry(seq, from, to, &msg, self.detail);
                self.log.lock().expect("transcript lock").entries.push(entry);
            }
            self.senders
                .get(&to)
                .ok_or_else(|| Error::Protocol(format!("no actor {to}")))?
                .send((from, msg))
                .map_err(|_| Error::Protocol(format!("{to} hung up")))?;
        }
        Ok(())
    }
}

fn run_threaded(
    actors: BTreeMap<ActorId, AnyActor>,
    start: Step,
    detail: TranscriptDetail,
    meta: TranscriptMeta,
    timeout: Duration,
) -> Result<(BTreeMap<ActorId, AnyActor>, ProtocolTranscript)> {
    let mut receivers: BTreeMap<ActorId, Receiver<(ActorId, Message)>> = BTreeMap::new();
    let mut senders = BTreeMap::new();
    for &id in actors.keys() {
        let (tx, rx) = mpsc::channel();
        senders.insert(id, tx);
        receivers.insert(id, rx);
    }
    let router = Arc::new(Router {
        senders,
        seq: AtomicU64::new(0),
        log: Mutex::new(ProtocolTranscript {
            meta,
            entries: Vec::new(),
            events: Vec::new(),
            warnings: Vec::new(),
        }),
        detail,
        failed: AtomicBool::new(false),
    });
    let deadline = Instant::now() + timeout;
    let handles: Vec<_> = actors
        .into_iter()
        .map(|(id, mut actor)| {
            let handle_id = id;
            let rx = receivers.remove(&id).expect("receiver");
            let router = Arc::clone(&router);
            let handle = std::thread::spawn(move || -> (ActorId, AnyActor, Result<()>) {
                let res = (|| {
                    // The dealer has no completion signal of its own; it
                    // serves until the run ends.
                    while !(actor.done() && id != ActorId::Dealer) {
                        if router.failed.load(Ordering::SeqCst) {
                            return Ok(());
                        }
                        if Instant::now() > deadline {
                            return Err(Error::Protocol(format!("{id} timed out")));
                        }
                        match rx.recv_timeout(Duration::from_millis(5)) {
                            Ok((from, msg)) => {
                                let step = actor.handle(from, msg)?;
                                router.send(id, step)?;
                            }
                            Err(RecvTimeoutError::Timeout) => {}
                            Err(RecvTimeoutError::Disconnected) => {
                                return Err(Error::Protocol(format!("{id} lost its inbox")))
                            }
                        }
                        if id == ActorId::Dealer && router.failed.load(Ordering::SeqCst) {
                            return Ok(());
                        }
                    }
                    Ok(())
                })();
                if res.is_err() {
                    router.failed.store(true, Ordering::SeqCst);
                }
                (id, actor, res)
            });
            (handle_id, handle)
        })
        .collect();
    router.send(ActorId::Server, start)?;

    // Everyone except the dealer finishes on their own; stop the dealer once
    // they have.
    let mut finished = BTreeMap::new();
    let mut first_err = None;
    let (dealer_handle, others): (Vec<_>, Vec<_>) =
        handles.into_iter().partition(|(id, _)| *id == ActorId::Dealer);
    for (_, h) in others {
        let (id, actor, res) = h.join().map_err(|_| Error::Protocol("actor thread panicked".into()))?;
        if let Err(e) = res {
            first_err.get_or_insert(e);
        }
        finished.insert(id, actor);
    }
    router.failed.store(true, Ordering::SeqCst);
    for (_, h) in dealer_handle {
        let (id, actor, res) = h.join().map_err(|_| Error::Protocol("actor thread panicked".into()))?;
        if let Err(e) = res {
            first_err.get_or_insert(e);
        }
        finished.insert(id, actor);
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let router = Arc::try_unwrap(router).map_err(|_| Error::Protocol("router still shared".into()))?;
    let transcript = router.log.into_inner().expect("transcript lock");
    Ok((finished, transcript))
}

/// Centralized functional mechanism with the same coefficient-keyed noise a
/// distributed run uses.
pub fn run_centralized(ds: &Dataset, epsilon: Epsilon, seed: u64, ridge: Option<f64>) -> Result<Model> {
    let task = ds.task();
    let obj = crate::objective::aggregate(ds.records(), task)?;
    let delta_f = crate::objective::global_sensitivity(task, ds.dim());
    let noisy = crate::dp::perturb_objective_keyed(&obj, task, delta_f, epsilon, seed)?;
    let w = minimize(&noisy, ridge.unwrap_or_else(|| default_ridge_floor(ds.len())))?;
    Model::new(w, task)
}
