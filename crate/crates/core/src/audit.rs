//! Empirical privacy checks: what the server saw, and how far neighboring
//! datasets move the coefficient vector.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{vsplit, Dataset, SplitScheme};
use crate::error::{input, Error, Result};
use crate::mpc::{encode, FieldElement, PRODUCT_SCALE};
use crate::objective::{
    aggregate, aggregate_unchecked, global_sensitivity, label_factor, linear_scale,
    party_sensitivity, quadratic_scale, Coeff, PartyId, PolyObjective, Record, TaskKind,
    VerticalPartition, LABEL_OWNER,
};
use crate::protocol::{ActorId, Message, ProtocolTranscript};

/// Relative distance under which a server-received real is treated as a
/// copy of a raw value.
pub const RAW_MATCH_TOLERANCE: f64 = 1e-12;
/// Relative distance under which a received coefficient is treated as
/// unperturbed.
pub const COEFF_MATCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FindingKind {
    RawValue { value: f64 },
    EncodedRawValue { element: u64 },
    UnperturbedCoefficient { coeff: Coeff, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFinding {
    pub seq: u64,
    pub sender: ActorId,
    pub tag: String,
    /// Found inside a message the debug backend marks as plaintext.
    pub audit_tagged: bool,
    pub kind: FindingKind,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerViewReport {
    pub messages_inspected: usize,
    pub values_inspected: usize,
    pub findings: Vec<AuditFinding>,
}

impl ServerViewReport {
    /// Findings outside audit-tagged messages.
    pub fn leaks(&self) -> impl Iterator<Item = &AuditFinding> {
        self.findings.iter().filter(|f| !f.audit_tagged)
    }

    pub fn compliant(&self) -> bool {
        self.leaks().next().is_none()
    }

    /// Coefficients reported as unperturbed anywhere in the transcript.
    pub fn unperturbed_coefficients(&self) -> Vec<Coeff> {
        let mut v: Vec<Coeff> = self
            .findings
            .iter()
            .filter_map(|f| match f.kind {
                FindingKind::UnperturbedCoefficient { coeff, .. } => Some(coeff),
                _ => None,
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }
}

struct RawIndex {
    sorted: Vec<f64>,
    encoded: HashSet<u64>,
}

impl RawIndex {
    // Zero is excluded: it is the value of every sparse entry and of many
    // legitimate aggregates, so matching it carries no information.
    fn new(ds: &Dataset) -> Self {
        let mut sorted: Vec<f64> = ds
            .records()
            .iter()
            .flat_map(|r| r.features.iter().copied().chain(std::iter::once(r.label)))
            .filter(|v| *v != 0.0)
            .collect();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        let encoded = sorted
            .iter()
            .filter_map(|&v| encode(v).ok())
            .map(FieldElement::value)
            .collect();
        RawIndex { sorted, encoded }
    }

    fn matches(&self, v: f64) -> bool {
        if v == 0.0 || !v.is_finite() {
            return false;
        }
        let i = self.sorted.partition_point(|&r| r < v);
        [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter_map(|j| self.sorted.get(j))
            .any(|&r| (v - r).abs() <= RAW_MATCH_TOLERANCE * r.abs())
    }
}

/// Reference values of each coefficient before noise: the exact aggregate,
/// the fixed-point dot product a secret-shared run computes, and for cross
/// products the unscaled dot product.
struct CoeffTruth<'a> {
    ds: &'a Dataset,
    exact: PolyObjective,
    cache: HashMap<usize, Vec<f64>>,
}

impl<'a> CoeffTruth<'a> {
    fn new(ds: &'a Dataset) -> Result<Self> {
        Ok(CoeffTruth {
            ds,
            exact: aggregate(ds.records(), ds.task())?,
            cache: HashMap::new(),
        })
    }

    fn fixed_dot(a: &[f64], b: &[f64]) -> f64 {
        let q = |v: f64| (v * crate::mpc::SCALE).round() as i128;
        let s: i128 = a.iter().zip(b).map(|(&x, &y)| q(x) * q(y)).sum();
        s as f64 / PRODUCT_SCALE
    }

    fn references(&mut self, c: Coeff) -> &[f64] {
        let d = self.ds.dim();
        let task = self.ds.task();
        let exact = self.exact.get(c);
        let ds = self.ds;
        self.cache.entry(c.canonical_index(d)).or_insert_with(|| {
            let (scale, dot) = match c {
                Coeff::Constant => return vec![exact],
                Coeff::Linear(a) => {
                    let lf: Vec<f64> = ds.labels().iter().map(|&y| label_factor(task, y)).collect();
                    (linear_scale(task), Self::fixed_dot(&lf, &ds.column(a)))
                }
                Coeff::Quadratic(a, b) => (quadratic_scale(task), Self::fixed_dot(&ds.column(a), &ds.column(b))),
            };
            vec![exact, exact / scale, scale * dot, dot]
        })
    }
}

fn near(v: f64, r: f64) -> bool {
    (v - r).abs() <= COEFF_MATCH_TOLERANCE * r.abs().max(1.0)
}

/// Flags server-received payloads that copy raw data or carry coefficients
/// without noise. The transcript must hold full payloads.
pub fn audit_server_view(t: &ProtocolTranscript, ds: &Dataset) -> Result<ServerViewReport> {
    if t.meta.d != ds.dim() || t.meta.n != ds.len() || t.meta.task != ds.task() {
        return input("transcript does not belong to this dataset");
    }
    let raw = RawIndex::new(ds);
    let mut truth = CoeffTruth::new(ds)?;
    let d = ds.dim();
    let mut report = ServerViewReport::default();

    for e in t.server_received() {
        let msg = e.message.as_ref().ok_or_else(|| {
            Error::Input("transcript was recorded without payloads; rerun with full detail".into())
        })?;
        report.messages_inspected += 1;
        let tagged = msg.is_audit_tagged();
        let mut flag = |kind| {
            report.findings.push(AuditFinding {
                seq: e.seq,
                sender: e.sender,
                tag: e.tag.clone(),
                audit_tagged: tagged,
                kind,
            })
        };
        let mut reals: Vec<f64> = Vec::new();
        let mut coeff_value: Option<(usize, f64)> = None;
        match msg {
            Message::SingleCoeff { index, value, .. } | Message::CrossCoeff { index, value, .. } => {
                reals.push(*value);
                coeff_value = Some((*index, *value));
            }
            Message::DebugPlain { index, values } => {
                reals.extend(values);
                if values.len() == 1 {
                    coeff_value = Some((*index, values[0]));
                }
            }
            Message::ShareMsg { elements, .. } => {
                report.values_inspected += elements.len();
                for el in elements {
                    if raw.encoded.contains(&el.value()) {
                        flag(FindingKind::EncodedRawValue { element: el.value() });
                    }
                }
            }
            _ => {}
        }
        report.values_inspected += reals.len();
        for &v in &reals {
            if raw.matches(v) {
                flag(FindingKind::RawValue { value: v });
            }
        }
        if let Some((index, value)) = coeff_value {
            let c = Coeff::from_canonical_index(index, d)
                .ok_or_else(|| Error::Input(format!("coefficient index {index} out of range")))?;
            let exempt = t.meta.noise_off || (ds.task() == TaskKind::Logistic && c == Coeff::Constant);
            if !exempt && truth.references(c).iter().any(|&r| near(value, r)) {
                flag(FindingKind::UnperturbedCoefficient { coeff: c, value });
            }
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Sensitivity audit
// ---------------------------------------------------------------------------

/// Absolute slack on distance-versus-bound comparisons, for rounding in the
/// aggregate difference.
pub const SENSITIVITY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityAuditConfig {
    pub task: TaskKind,
    pub d: usize,
    pub pairs: usize,
    /// Records per dataset.
    pub n: usize,
    /// Parties for the per-party check (even split).
    pub parties: usize,
    pub seed: u64,
    /// Replace the changed record of this pair with one whose first feature
    /// is 2, outside the input domain.
    pub inject_out_of_range: Option<usize>,
}

impl SensitivityAuditConfig {
    pub fn new(task: TaskKind, d: usize, pairs: usize, seed: u64) -> Self {
        SensitivityAuditConfig {
            task,
            d,
            pairs,
            n: 10,
            parties: d.min(2),
            seed,
            inject_out_of_range: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Global,
    Party(PartyId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribution {
    /// An in-domain pair exceeded the closed-form bound.
    Bound,
    /// The pair contains a record outside the input domain, which ingestion
    /// must reject; the bound does not apply to it.
    Ingestion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub pair: usize,
    pub scope: Scope,
    pub distance: f64,
    pub bound: f64,
    pub attribution: Attribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub config: SensitivityAuditConfig,
    pub checks: usize,
    pub violations: Vec<Violation>,
    pub global_bound: f64,
    pub party_bounds: BTreeMap<PartyId, f64>,
    /// Largest observed distance over bound, per scope.
    pub max_global_ratio: f64,
    pub max_party_ratio: BTreeMap<PartyId, f64>,
}

impl SensitivityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// L1 distance between two coefficient vectors.
pub fn coefficient_distance(a: &PolyObjective, b: &PolyObjective) -> f64 {
    a.to_vec().iter().zip(b.to_vec()).map(|(x, y)| (x - y).abs()).sum()
}

fn random_label(task: TaskKind, rng: &mut ChaCha20Rng) -> f64 {
    match task {
        TaskKind::Linear => rng.gen_range(-1.0..=1.0),
        TaskKind::Logistic => f64::from(u8::from(rng.gen_bool(0.5))),
    }
}

fn random_record(task: TaskKind, d: usize, rng: &mut ChaCha20Rng) -> Record {
    let x = (0..d).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Record::new_unchecked(x, random_label(task, rng))
}

/// `neighbor` differs from `base` only in `party`'s features (and the label
/// when the party owns it).
fn party_neighbor(
    base: &Record,
    task: TaskKind,
    partition: &VerticalPartition,
    party: PartyId,
    rng: &mut ChaCha20Rng,
) -> Record {
    let mut r = base.clone();
    for &a in partition.features_of(party) {
        r.features[a] = rng.gen_range(-1.0..=1.0);
    }
    if party == LABEL_OWNER {
        r.label = random_label(task, rng);
    }
    r
}

/// Draws random neighboring dataset pairs and compares coefficient
/// distances with the global and per-party sensitivities.
pub fn sensitivity_audit(cfg: &SensitivityAuditConfig) -> Result<SensitivityReport> {
    if cfg.d == 0 || cfg.n == 0 || cfg.pairs == 0 {
        return input("sensitivity audit needs d, n and pairs >= 1");
    }
    let task = cfg.task;
    let partition = vsplit(cfg.d, cfg.parties, &SplitScheme::Even)?;
    let global_bound = global_sensitivity(task, cfg.d);
    let party_bounds: BTreeMap<PartyId, f64> = partition
        .party_ids()
        .map(|p| {
            Ok((
                p,
                party_sensitivity(task, cfg.d, partition.features_of(p).len(), p == LABEL_OWNER)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut report = SensitivityReport {
        config: cfg.clone(),
        checks: 0,
        violations: Vec::new(),
        global_bound,
        max_global_ratio: 0.0,
        max_party_ratio: party_bounds.keys().map(|&p| (p, 0.0)).collect(),
        party_bounds,
    };

    for pair in 0..cfg.pairs {
        let mut records: Vec<Record> = (0..cfg.n).map(|_| random_record(task, cfg.d, &mut rng)).collect();
        let i = rng.gen_range(0..cfg.n);
        let base = aggregate_unchecked(&records, task);

        let mut replacement = random_record(task, cfg.d, &mut rng);
        if cfg.inject_out_of_range == Some(pair) {
            replacement.features[0] = 2.0;
        }
        let mut neighbors = vec![(replacement, Scope::Global, global_bound)];
        for p in partition.party_ids() {
            let neighbor = party_neighbor(&records[i], task, &partition, p, &mut rng);
            neighbors.push((neighbor, Scope::Party(p), report.party_bounds[&p]));
        }

        let mut check = |neighbor: Record, scope: Scope, bound: f64, report: &mut SensitivityReport| {
            let saved = std::mem::replace(&mut records[i], neighbor);
            let in_domain = records[i].validate(task).is_ok();
            let other = aggregate_unchecked(&records, task);
            records[i] = saved;
            let distance = coefficient_distance(&base, &other);
            report.checks += 1;
            let ratio = distance / bound;
            match scope {
                Scope::Global => report.max_global_ratio = report.max_global_ratio.max(ratio),
                Scope::Party(p) => {
                    let m = report.max_party_ratio.entry(p).or_insert(0.0);
                    *m = m.max(ratio);
                }
            }
            if !in_domain {
                report.violations.push(Violation {
                    pair,
                    scope,
                    distance,
                    bound,
                    attribution: Attribution::Ingestion,
                });
            } else if distance > bound + SENSITIVITY_SLACK {
                report.violations.push(Violation {
                    pair,
                    scope,
                    distance,
                    bound,
                    attribution: Attribution::Bound,
                });
            }
        };

        for (neighbor, scope, bound) in neighbors {
            check(neighbor, scope, bound, &mut report);
        }
    }
    Ok(report)
}
