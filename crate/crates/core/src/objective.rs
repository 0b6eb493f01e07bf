//! Polynomial form of the regression objectives.
//!
//! Both tasks are quadratic in the weights, so an objective is fully described
//! by a constant, a length-`d` linear vector and a `d x d` quadratic matrix
//! indexed by *ordered* feature pairs. The module also owns the sensitivity
//! closed forms and the dissection of coefficients across a vertical
//! partition of the features.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

/// Taylor constants of `ln(1 + e^z)` at zero: value, first and second
/// derivative divided by the factorial of their order.
pub const LOGISTIC_T0: f64 = std::f64::consts::LN_2;
pub const LOGISTIC_T1: f64 = 0.5;
pub const LOGISTIC_T2: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Linear,
    Logistic,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Linear => f.write_str("linear"),
            TaskKind::Logistic => f.write_str("logistic"),
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(TaskKind::Linear),
            "logistic" => Ok(TaskKind::Logistic),
            other => input(format!("unknown task '{other}'")),
        }
    }
}

/// One training record. Features live in `[-1, 1]`; the label is in `[-1, 1]`
/// for linear regression and in `{0, 1}` for logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub features: Vec<f64>,
    pub label: f64,
}

impl Record {
    pub fn new(features: Vec<f64>, label: f64, task: TaskKind) -> Result<Self> {
        let record = Record { features, label };
        record.validate(task)?;
        Ok(record)
    }

    /// Builds a record without checking the input domain. Only fault-injection
    /// harnesses should need this.
    pub fn new_unchecked(features: Vec<f64>, label: f64) -> Self {
        Record { features, label }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self, task: TaskKind) -> Result<()> {
        if let Some((a, x)) = self
            .features
            .iter()
            .enumerate()
            .find(|(_, x)| !(x.abs() <= 1.0))
        {
            return input(format!("feature {a} = {x} outside [-1, 1]"));
        }
        let ok = match task {
            TaskKind::Linear => self.label.abs() <= 1.0,
            TaskKind::Logistic => self.label == 0.0 || self.label == 1.0,
        };
        if !ok {
            return input(format!("label {} invalid for {task} task", self.label));
        }
        Ok(())
    }
}

/// Address of a single polynomial coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coeff {
    Constant,
    Linear(usize),
    Quadratic(usize, usize),
}

impl Coeff {
    /// Position in the canonical order: constant, linear terms by feature,
    /// then the quadratic matrix row-major.
    pub fn canonical_index(self, d: usize) -> usize {
        match self {
            Coeff::Constant => 0,
            Coeff::Linear(a) => 1 + a,
            Coeff::Quadratic(a, b) => 1 + d + a * d + b,
        }
    }

    pub fn from_canonical_index(index: usize, d: usize) -> Option<Self> {
        match index {
            0 => Some(Coeff::Constant),
            i if i <= d => Some(Coeff::Linear(i - 1)),
            i if i < coefficient_count(d) => {
                let r = i - 1 - d;
                Some(Coeff::Quadratic(r / d, r % d))
            }
            _ => None,
        }
    }

    pub fn degree(self) -> usize {
        match self {
            Coeff::Constant => 0,
            Coeff::Linear(_) => 1,
            Coeff::Quadratic(..) => 2,
        }
    }

    /// Every coefficient of a `d`-feature objective in canonical order.
    pub fn all(d: usize) -> impl Iterator<Item = Coeff> {
        std::iter::once(Coeff::Constant)
            .chain((0..d).map(Coeff::Linear))
            .chain((0..d * d).map(move |i| Coeff::Quadratic(i / d, i % d)))
    }
}

impl fmt::Display for Coeff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // 1-based feature numbers in user-facing output.
        match self {
            Coeff::Constant => f.write_str("c0"),
            Coeff::Linear(a) => write!(f, "c1[{}]", a + 1),
            Coeff::Quadratic(a, b) => write!(f, "c2[{},{}]", a + 1, b + 1),
        }
    }
}

pub fn coefficient_count(d: usize) -> usize {
    1 + d + d * d
}

/// Coefficients of a degree-2 polynomial in `d` weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyObjective {
    d: usize,
    pub lambda0: f64,
    pub lambda1: Vec<f64>,
    /// Row-major `d x d`, entry `(a, b)` multiplies `w_a * w_b`.
    pub lambda2: Vec<f64>,
}

impl PolyObjective {
    pub fn zeros(d: usize) -> Self {
        PolyObjective {
            d,
            lambda0: 0.0,
            lambda1: vec![0.0; d],
            lambda2: vec![0.0; d * d],
        }
    }

    pub fn from_parts(lambda0: f64, lambda1: Vec<f64>, lambda2: Vec<f64>) -> Result<Self> {
        let d = lambda1.len();
        if lambda2.len() != d * d {
            return input(format!(
                "quadratic block has {} entries, expected {}",
                lambda2.len(),
                d * d
            ));
        }
        Ok(PolyObjective {
            d,
            lambda0,
            lambda1,
            lambda2,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        coefficient_count(self.d)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn quad(&self, a: usize, b: usize) -> f64 {
        self.lambda2[a * self.d + b]
    }

    pub fn get(&self, c: Coeff) -> f64 {
        match c {
            Coeff::Constant => self.lambda0,
            Coeff::Linear(a) => self.lambda1[a],
            Coeff::Quadratic(a, b) => self.lambda2[a * self.d + b],
        }
    }

    pub fn get_mut(&mut self, c: Coeff) -> &mut f64 {
        match c {
            Coeff::Constant => &mut self.lambda0,
            Coeff::Linear(a) => &mut self.lambda1[a],
            Coeff::Quadratic(a, b) => &mut self.lambda2[a * self.d + b],
        }
    }

    /// Coefficients flattened in canonical order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.lambda0);
        v.extend_from_slice(&self.lambda1);
        v.extend_from_slice(&self.lambda2);
        v
    }

    pub fn from_canonical(d: usize, values: &[f64]) -> Result<Self> {
        if values.len() != coefficient_count(d) {
            return input(format!(
                "{} values for a {d}-feature objective",
                values.len()
            ));
        }
        Ok(PolyObjective {
            d,
            lambda0: values[0],
            lambda1: values[1..=d].to_vec(),
            lambda2: values[1 + d..].to_vec(),
        })
    }

    /// Evaluates the polynomial at `w`.
    pub fn evaluate(&self, w: &[f64]) -> f64 {
        let d = self.d;
        let mut v = self.lambda0;
        for a in 0..d {
            v += self.lambda1[a] * w[a];
            for b in 0..d {
                v += self.lambda2[a * d + b] * w[a] * w[b];
            }
        }
        v
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let d = self.d;
        (0..d).all(|a| (0..a).all(|b| (self.quad(a, b) - self.quad(b, a)).abs() <= tol))
    }

    pub fn add_assign(&mut self, other: &PolyObjective) {
        self.lambda0 += other.lambda0;
        for (x, y) in self.lambda1.iter_mut().zip(&other.lambda1) {
            *x += y;
        }
        for (x, y) in self.lambda2.iter_mut().zip(&other.lambda2) {
            *x += y;
        }
    }
}

fn check_dim(record: &Record, d: usize) -> Result<()> {
    if record.dim() != d {
        return input(format!("record has {} features, expected {d}", record.dim()));
    }
    Ok(())
}

/// Squared-error coefficients of one record.
pub fn linear_record_coeffs(record: &Record, d: usize) -> Result<PolyObjective> {
    check_dim(record, d)?;
    record.validate(TaskKind::Linear)?;
    let mut obj = PolyObjective::zeros(d);
    accumulate_record(&mut obj, record, TaskKind::Linear);
    Ok(obj)
}

/// Second-order Taylor coefficients of the logistic loss for one record.
pub fn logistic_record_coeffs(record: &Record, d: usize) -> Result<PolyObjective> {
    check_dim(record, d)?;
    record.validate(TaskKind::Logistic)?;
    let mut obj = PolyObjective::zeros(d);
    accumulate_record(&mut obj, record, TaskKind::Logistic);
    Ok(obj)
}

pub fn record_coeffs(record: &Record, task: TaskKind) -> Result<PolyObjective> {
    match task {
        TaskKind::Linear => linear_record_coeffs(record, record.dim()),
        TaskKind::Logistic => logistic_record_coeffs(record, record.dim()),
    }
}

/// Label-dependent factor of the degree-1 coefficients. The linear `-2` is
/// applied outside the product so the factor stays in `[-1, 1]`.
#[inline]
pub(crate) fn label_factor(task: TaskKind, y: f64) -> f64 {
    match task {
        TaskKind::Linear => y,
        TaskKind::Logistic => LOGISTIC_T1 - y,
    }
}

/// Public multiplier applied to `sum(label_factor * x_a)`.
#[inline]
pub(crate) fn linear_scale(task: TaskKind) -> f64 {
    match task {
        TaskKind::Linear => -2.0,
        TaskKind::Logistic => 1.0,
    }
}

/// Public multiplier applied to `sum(x_a * x_b)`.
#[inline]
pub(crate) fn quadratic_scale(task: TaskKind) -> f64 {
    match task {
        TaskKind::Linear => 1.0,
        TaskKind::Logistic => LOGISTIC_T2,
    }
}

#[inline]
pub(crate) fn constant_term(task: TaskKind, y: f64) -> f64 {
    match task {
        TaskKind::Linear => y * y,
        TaskKind::Logistic => LOGISTIC_T0,
    }
}

// Scaling by the powers of two above is exact, so summing scaled per-record
// terms equals scaling the plain dot products bit for bit. Party-local
// computation in the protocol relies on that.
fn accumulate_record(obj: &mut PolyObjective, record: &Record, task: TaskKind) {
    let d = obj.d;
    let x = &record.features;
    let lf = label_factor(task, record.label);
    let ls = linear_scale(task);
    let qs = quadratic_scale(task);
    obj.lambda0 += constant_term(task, record.label);
    for a in 0..d {
        obj.lambda1[a] += ls * (lf * x[a]);
        let row = &mut obj.lambda2[a * d..(a + 1) * d];
        for (b, slot) in row.iter_mut().enumerate() {
            *slot += qs * (x[a] * x[b]);
        }
    }
}

/// Coefficient-wise sum of the per-record objectives.
pub fn aggregate(records: &[Record], task: TaskKind) -> Result<PolyObjective> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("cannot aggregate an empty dataset".into()))?;
    let d = first.dim();
    let mut obj = PolyObjective::zeros(d);
    for (i, r) in records.iter().enumerate() {
        if r.dim() != d {
            return input(format!("record {i} has {} features, expected {d}", r.dim()));
        }
        r.validate(task)?;
        accumulate_record(&mut obj, r, task);
    }
    Ok(obj)
}

/// Aggregation without domain checks, for sensitivity fault injection.
pub(crate) fn aggregate_unchecked(records: &[Record], task: TaskKind) -> PolyObjective {
    let d = records.first().map_or(0, Record::dim);
    let mut obj = PolyObjective::zeros(d);
    for r in records {
        accumulate_record(&mut obj, r, task);
    }
    obj
}

// ---------------------------------------------------------------------------
// Sensitivity
// ---------------------------------------------------------------------------

/// Largest `|coefficient|` a single in-domain record can contribute.
/// The logistic constant is the same for every record and is not perturbed,
/// so it contributes nothing.
pub fn coefficient_bound(task: TaskKind, c: Coeff) -> f64 {
    match (task, c) {
        (TaskKind::Linear, Coeff::Constant) => 1.0,
        (TaskKind::Linear, Coeff::Linear(_)) => 2.0,
        (TaskKind::Linear, Coeff::Quadratic(..)) => 1.0,
        (TaskKind::Logistic, Coeff::Constant) => 0.0,
        (TaskKind::Logistic, Coeff::Linear(_)) => LOGISTIC_T1,
        (TaskKind::Logistic, Coeff::Quadratic(..)) => LOGISTIC_T2,
    }
}

/// Whether the coefficient receives Laplace noise under `task`.
pub fn is_perturbed(task: TaskKind, c: Coeff) -> bool {
    coefficient_bound(task, c) > 0.0
}

/// `2 * sum of per-coefficient bounds` over a coefficient set. Every bound is
/// attained by the same all-ones record, so this is the exact L1 sensitivity
/// of the set.
pub fn set_sensitivity(task: TaskKind, coeffs: impl IntoIterator<Item = Coeff>) -> f64 {
    2.0 * coeffs
        .into_iter()
        .map(|c| coefficient_bound(task, c))
        .sum::<f64>()
}

/// Global L1 sensitivity of the full coefficient vector.
pub fn global_sensitivity(task: TaskKind, d: usize) -> f64 {
    let d = d as f64;
    match task {
        TaskKind::Linear => 2.0 * (1.0 + 2.0 * d + d * d),
        TaskKind::Logistic => d * d / 4.0 + d,
    }
}

/// Sensitivity of the objective with respect to one party's sub-dataset.
pub fn party_sensitivity(task: TaskKind, d: usize, dk: usize, is_label_owner: bool) -> Result<f64> {
    if dk == 0 || dk > d {
        return input(format!("party size {dk} outside [1, {d}]"));
    }
    let (d, dk) = (d as f64, dk as f64);
    Ok(match (task, is_label_owner) {
        (TaskKind::Linear, true) => 2.0 * (1.0 + 2.0 * d + dk * d),
        (TaskKind::Linear, false) => 2.0 * (2.0 * dk + dk * d),
        (TaskKind::Logistic, true) => d + dk * (2.0 * d - dk) / 4.0,
        (TaskKind::Logistic, false) => dk + dk * (2.0 * d - dk) / 4.0,
    })
}

/// Sensitivity of one party's single-party coefficients.
pub fn sub_sensitivity_g(task: TaskKind, d: usize, dk: usize, is_label_owner: bool) -> Result<f64> {
    if dk == 0 || dk > d {
        return input(format!("party size {dk} outside [1, {d}]"));
    }
    let dk = dk as f64;
    Ok(match (task, is_label_owner) {
        (TaskKind::Linear, true) => 2.0 * (1.0 + 2.0 * dk + dk * dk),
        (TaskKind::Linear, false) => 2.0 * dk * dk,
        (TaskKind::Logistic, true) => dk + dk * dk / 4.0,
        (TaskKind::Logistic, false) => dk * dk / 4.0,
    })
}

/// Sensitivity of the cross-party coefficients shared by parties `k` and `l`.
/// When `involves_label` is set, `dk` is the label owner's feature count and
/// the pair also carries the degree-1 terms of the other party's features.
pub fn sub_sensitivity_h(
    task: TaskKind,
    d: usize,
    dk: usize,
    dl: usize,
    involves_label: bool,
) -> Result<f64> {
    if dk == 0 || dl == 0 || dk + dl > d {
        return input(format!("pair sizes ({dk}, {dl}) invalid for d = {d}"));
    }
    let (dk, dl) = (dk as f64, dl as f64);
    let label_terms = if involves_label { dl } else { 0.0 };
    Ok(match task {
        TaskKind::Linear => 2.0 * (2.0 * dk * dl + 2.0 * label_terms),
        TaskKind::Logistic => 2.0 * (2.0 * dk * dl * LOGISTIC_T2 + label_terms * LOGISTIC_T1),
    })
}

// ---------------------------------------------------------------------------
// Partition and dissection
// ---------------------------------------------------------------------------

/// 1-based party identifier. Party 1 always holds the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PartyId(pub usize);

pub const LABEL_OWNER: PartyId = PartyId(1);

impl PartyId {
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Disjoint feature sets, one per party, covering every feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalPartition {
    party_features: Vec<Vec<usize>>,
    owner: Vec<PartyId>,
}

impl VerticalPartition {
    /// `party_features[k]` lists the 0-based feature indices of party `k + 1`.
    pub fn new(d: usize, party_features: Vec<Vec<usize>>) -> Result<Self> {
        if party_features.is_empty() {
            return input("a partition needs at least one party");
        }
        let mut owner = vec![None; d];
        for (k, feats) in party_features.iter().enumerate() {
            if feats.is_empty() {
                return input(format!("party {} owns no features", k + 1));
            }
            for &a in feats {
                if a >= d {
                    return input(format!("feature index {a} out of range for d = {d}"));
                }
                if let Some(PartyId(prev)) = owner[a] {
                    return input(format!(
                        "feature {a} assigned to both party {prev} and party {}",
                        k + 1
                    ));
                }
                owner[a] = Some(PartyId(k + 1));
            }
        }
        let owner = owner
            .into_iter()
            .enumerate()
            .map(|(a, o)| o.ok_or_else(|| Error::Input(format!("feature {a} has no owner"))))
            .collect::<Result<Vec<_>>>()?;
        let party_features = party_features
            .into_iter()
            .map(|mut f| {
                f.sort_unstable();
                f
            })
            .collect();
        Ok(VerticalPartition {
            party_features,
            owner,
        })
    }

    pub fn single(d: usize) -> Result<Self> {
        Self::new(d, vec![(0..d).collect()])
    }

    pub fn parties(&self) -> usize {
        self.party_features.len()
    }

    pub fn dim(&self) -> usize {
        self.owner.len()
    }

    pub fn party_ids(&self) -> impl Iterator<Item = PartyId> {
        (1..=self.parties()).map(PartyId)
    }

    pub fn features_of(&self, party: PartyId) -> &[usize] {
        &self.party_features[party.index()]
    }

    pub fn owner_of(&self, feature: usize) -> PartyId {
        self.owner[feature]
    }

    pub fn label_owner(&self) -> PartyId {
        LABEL_OWNER
    }
}

/// How a coefficient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoeffOwner {
    /// Computable from one party's columns (plus the label for party 1).
    SingleParty(PartyId),
    /// Needs a secure dot product between two parties' vectors. The first
    /// party supplies the left vector.
    CrossParty(PartyId, PartyId),
}

impl CoeffOwner {
    pub fn involves(&self, p: PartyId) -> bool {
        match *self {
            CoeffOwner::SingleParty(k) => k == p,
            CoeffOwner::CrossParty(k, l) => k == p || l == p,
        }
    }

    pub fn is_cross(&self) -> bool {
        matches!(self, CoeffOwner::CrossParty(..))
    }

    /// Unordered pair key for cross coefficients, smaller id first.
    pub fn pair(&self) -> Option<(PartyId, PartyId)> {
        match *self {
            CoeffOwner::CrossParty(k, l) => Some((k.min(l), k.max(l))),
            CoeffOwner::SingleParty(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub coeff: Coeff,
    pub owner: CoeffOwner,
    pub noise_adder: PartyId,
}

/// The server's dissection of all `1 + d + d^2` coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientAllocation {
    task: TaskKind,
    d: usize,
    entries: Vec<Allocation>,
}

impl CoefficientAllocation {
    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Entries in canonical coefficient order.
    pub fn entries(&self) -> &[Allocation] {
        &self.entries
    }

    pub fn get(&self, c: Coeff) -> &Allocation {
        &self.entries[c.canonical_index(self.d)]
    }

    pub fn single_party(&self, p: PartyId) -> impl Iterator<Item = &Allocation> {
        self.entries
            .iter()
            .filter(move |e| e.owner == CoeffOwner::SingleParty(p))
    }

    pub fn cross_party(&self) -> impl Iterator<Item = &Allocation> {
        self.entries.iter().filter(|e| e.owner.is_cross())
    }

    pub fn touching(&self, p: PartyId) -> impl Iterator<Item = &Allocation> {
        self.entries.iter().filter(move |e| e.owner.involves(p))
    }

    /// Cross coefficients of the unordered pair `{k, l}`.
    pub fn pair_entries(&self, k: PartyId, l: PartyId) -> impl Iterator<Item = &Allocation> {
        let key = (k.min(l), k.max(l));
        self.entries
            .iter()
            .filter(move |e| e.owner.pair() == Some(key))
    }

    /// Unordered party pairs that share at least one cross coefficient.
    pub fn pairs(&self) -> Vec<(PartyId, PartyId)> {
        self.entries
            .iter()
            .filter_map(|e| e.owner.pair())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Assigns every coefficient to the party (or party pair) that can compute it.
pub fn dissect(task: TaskKind, partition: &VerticalPartition) -> CoefficientAllocation {
    let d = partition.dim();
    let entries = Coeff::all(d)
        .map(|coeff| {
            let (owner, noise_adder) = match coeff {
                Coeff::Constant => (CoeffOwner::SingleParty(LABEL_OWNER), LABEL_OWNER),
                Coeff::Linear(a) => {
                    let k = partition.owner_of(a);
                    if k == LABEL_OWNER {
                        (CoeffOwner::SingleParty(k), k)
                    } else {
                        // The feature holder adds the noise; it learns the
                        // product alongside the label owner anyway.
                        (CoeffOwner::CrossParty(LABEL_OWNER, k), k)
                    }
                }
                Coeff::Quadratic(a, b) => {
                    let (k, l) = (partition.owner_of(a), partition.owner_of(b));
                    if k == l {
                        (CoeffOwner::SingleParty(k), k)
                    } else {
                        (CoeffOwner::CrossParty(k, l), k.min(l))
                    }
                }
            };
            Allocation {
                coeff,
                owner,
                noise_adder,
            }
        })
        .collect();
    CoefficientAllocation { task, d, entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(x: &[f64], y: f64) -> Record {
        Record::new_unchecked(x.to_vec(), y)
    }

    #[test]
    fn linear_single_feature() {
        let o = linear_record_coeffs(&rec(&[1.0], 1.0), 1).unwrap();
        assert_eq!(o.lambda0, 1.0);
        assert_eq!(o.lambda1, vec![-2.0]);
        assert_eq!(o.lambda2, vec![1.0]);
    }

    #[test]
    fn linear_zero_record() {
        let o = linear_record_coeffs(&rec(&[0.0, 0.0], 0.0), 2).unwrap();
        assert!(o.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_hand_evaluated() {
        let o = linear_record_coeffs(&rec(&[0.5, -1.0], 0.5), 2).unwrap();
        assert_eq!(o.lambda0, 0.25);
        assert_eq!(o.lambda1, vec![-0.5, 1.0]);
        assert_eq!(o.lambda2, vec![0.25, -0.5, -0.5, 1.0]);
    }

    #[test]
    fn linear_dimension_mismatch() {
        assert!(matches!(
            linear_record_coeffs(&rec(&[0.1, 0.2], 0.0), 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn logistic_taylor_constants_match_softplus() {
        // softplus(z) = ln(1 + e^z); f'(z) = sigmoid(z); f''(z) = s(1 - s).
        let s = 1.0 / (1.0 + (0.0f64).exp());
        assert_abs_diff_eq!(LOGISTIC_T0, (1.0 + 0.0f64.exp()).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(LOGISTIC_T1, s, epsilon = 1e-15);
        assert_abs_diff_eq!(LOGISTIC_T2, s * (1.0 - s) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn logistic_examples() {
        let o = logistic_record_coeffs(&rec(&[1.0], 1.0), 1).unwrap();
        assert_eq!(o.lambda1, vec![-0.5]);
        assert_eq!(o.lambda2, vec![0.125]);

        let o = logistic_record_coeffs(&rec(&[0.0, 0.0], 0.0), 2).unwrap();
        assert_eq!(o.lambda0, std::f64::consts::LN_2);
        assert_eq!(o.lambda1, vec![0.0, 0.0]);
        assert!(o.lambda2.iter().all(|&v| v == 0.0));

        let o = logistic_record_coeffs(&rec(&[1.0, -1.0], 0.0), 2).unwrap();
        assert_eq!(o.lambda1, vec![0.5, -0.5]);
        assert_eq!(o.lambda2, vec![0.125, -0.125, -0.125, 0.125]);
    }

    #[test]
    fn logistic_rejects_fractional_label() {
        assert!(logistic_record_coeffs(&rec(&[0.1], 0.5), 1).is_err());
    }

    #[test]
    fn aggregate_linearity() {
        let r = rec(&[0.3, -0.7], 0.2);
        let one = aggregate(std::slice::from_ref(&r), TaskKind::Linear).unwrap();
        assert_eq!(one, linear_record_coeffs(&r, 2).unwrap());
        let two = aggregate(&[r.clone(), r.clone()], TaskKind::Linear).unwrap();
        for (a, b) in two.to_vec().iter().zip(one.to_vec()) {
            assert_eq!(*a, 2.0 * b);
        }
        assert!(aggregate(&[], TaskKind::Linear).is_err());
    }

    #[test]
    fn aggregate_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for task in [TaskKind::Linear, TaskKind::Logistic] {
            let recs: Vec<Record> = (0..10)
                .map(|_| {
                    let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                    let y = match task {
                        TaskKind::Linear => rng.gen_range(-1.0..=1.0),
                        TaskKind::Logistic => f64::from(rng.gen_range(0..2u8)),
                    };
                    rec(&x, y)
                })
                .collect();
            let mut oracle = PolyObjective::zeros(3);
            for r in &recs {
                oracle.add_assign(&record_coeffs(r, task).unwrap());
            }
            let agg = aggregate(&recs, task).unwrap();
            for (a, b) in agg.to_vec().iter().zip(oracle.to_vec()) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
            assert!(agg.is_symmetric(1e-12));
        }
    }

    #[test]
    fn canonical_index_round_trip() {
        let d = 4;
        for (i, c) in Coeff::all(d).enumerate() {
            assert_eq!(c.canonical_index(d), i);
            assert_eq!(Coeff::from_canonical_index(i, d), Some(c));
        }
        assert_eq!(Coeff::all(d).count(), coefficient_count(d));
        assert_eq!(Coeff::from_canonical_index(coefficient_count(d), d), None);
    }

    #[test]
    fn global_sensitivity_values() {
        assert_eq!(global_sensitivity(TaskKind::Linear, 2), 18.0);
        assert_eq!(global_sensitivity(TaskKind::Logistic, 2), 3.0);
        assert_eq!(global_sensitivity(TaskKind::Linear, 1), 8.0);
    }

    #[test]
    fn global_sensitivity_equals_set_sum() {
        for d in 1..8 {
            for task in [TaskKind::Linear, TaskKind::Logistic] {
                assert_eq!(
                    set_sensitivity(task, Coeff::all(d)),
                    global_sensitivity(task, d)
                );
            }
        }
    }

    #[test]
    fn party_sensitivity_values() {
        assert_eq!(party_sensitivity(TaskKind::Linear, 4, 2, true).unwrap(), 34.0);
        assert_eq!(party_sensitivity(TaskKind::Linear, 4, 2, false).unwrap(), 24.0);
        assert_eq!(party_sensitivity(TaskKind::Logistic, 4, 4, true).unwrap(), 8.0);
        assert_eq!(party_sensitivity(TaskKind::Logistic, 4, 2, true).unwrap(), 7.0);
        assert!(party_sensitivity(TaskKind::Linear, 3, 4, true).is_err());
    }

    #[test]
    fn linear_owner_matches_expanded_form() {
        for d in 1..30usize {
            for d1 in 1..=d {
                let (df, d1f) = (d as f64, d1 as f64);
                let expanded = 2.0
                    * (1.0 + 2.0 * d1f + 2.0 * (df - d1f) + d1f * d1f + d1f * (df - d1f));
                assert_eq!(
                    party_sensitivity(TaskKind::Linear, d, d1, true).unwrap(),
                    expanded
                );
            }
        }
    }

    #[test]
    fn logistic_party_forms_equal_touching_sets() {
        // The logistic closed forms count both orderings of every cross
        // quadratic term a party participates in.
        for d in 2..8 {
            for d1 in 1..d {
                let p = VerticalPartition::new(d, vec![(0..d1).collect(), (d1..d).collect()])
                    .unwrap();
                let alloc = dissect(TaskKind::Logistic, &p);
                for (party, dk, owner) in [(PartyId(1), d1, true), (PartyId(2), d - d1, false)] {
                    let touching = set_sensitivity(
                        TaskKind::Logistic,
                        alloc.touching(party).map(|e| e.coeff),
                    );
                    assert_eq!(
                        touching,
                        party_sensitivity(TaskKind::Logistic, d, dk, owner).unwrap()
                    );
                }
            }
        }
    }

    #[test]
    fn linear_party_forms_count_one_cross_direction() {
        // The linear closed forms count d^k (d - d^k) cross quadratic terms,
        // one ordering per pair; the full touching set has twice as many.
        for d in 2..8 {
            for d1 in 1..d {
                let p = VerticalPartition::new(d, vec![(0..d1).collect(), (d1..d).collect()])
                    .unwrap();
                let alloc = dissect(TaskKind::Linear, &p);
                for (party, dk, owner) in [(PartyId(1), d1, true), (PartyId(2), d - d1, false)] {
                    let touching =
                        set_sensitivity(TaskKind::Linear, alloc.touching(party).map(|e| e.coeff));
                    let closed = party_sensitivity(TaskKind::Linear, d, dk, owner).unwrap();
                    assert_eq!(touching - closed, 2.0 * (dk * (d - dk)) as f64);
                }
            }
        }
    }

    #[test]
    fn sub_sensitivity_examples() {
        assert_eq!(sub_sensitivity_g(TaskKind::Linear, 2, 2, true).unwrap(), 18.0);
        assert_eq!(sub_sensitivity_g(TaskKind::Linear, 4, 2, false).unwrap(), 8.0);
        for d in 1..10 {
            for task in [TaskKind::Linear, TaskKind::Logistic] {
                assert_eq!(
                    sub_sensitivity_g(task, d, d, true).unwrap(),
                    global_sensitivity(task, d)
                );
            }
        }
    }

    #[test]
    fn sub_sensitivities_match_allocation_sets() {
        for task in [TaskKind::Linear, TaskKind::Logistic] {
            let d = 7;
            let p = VerticalPartition::new(d, vec![vec![0, 1], vec![2, 3, 4], vec![5, 6]]).unwrap();
            let alloc = dissect(task, &p);
            for k in p.party_ids() {
                let dk = p.features_of(k).len();
                let g = set_sensitivity(task, alloc.single_party(k).map(|e| e.coeff));
                assert_eq!(g, sub_sensitivity_g(task, d, dk, k == LABEL_OWNER).unwrap());
            }
            for (k, l) in alloc.pairs() {
                let h = set_sensitivity(task, alloc.pair_entries(k, l).map(|e| e.coeff));
                let (dk, dl) = (p.features_of(k).len(), p.features_of(l).len());
                assert_eq!(h, sub_sensitivity_h(task, d, dk, dl, k == LABEL_OWNER).unwrap());
            }
            // Single and cross sets partition the whole vector.
            let total: f64 = p
                .party_ids()
                .map(|k| set_sensitivity(task, alloc.single_party(k).map(|e| e.coeff)))
                .chain(
                    alloc
                        .pairs()
                        .into_iter()
                        .map(|(k, l)| set_sensitivity(task, alloc.pair_entries(k, l).map(|e| e.coeff))),
                )
                .sum();
            assert_eq!(total, global_sensitivity(task, d));
        }
    }

    #[test]
    fn dissect_single_party() {
        let p = VerticalPartition::single(3).unwrap();
        let alloc = dissect(TaskKind::Linear, &p);
        assert_eq!(alloc.len(), coefficient_count(3));
        assert!(alloc
            .entries()
            .iter()
            .all(|e| e.owner == CoeffOwner::SingleParty(PartyId(1))));
    }

    #[test]
    fn dissect_two_parties() {
        let p = VerticalPartition::new(2, vec![vec![0], vec![1]]).unwrap();
        for task in [TaskKind::Linear, TaskKind::Logistic] {
            let alloc = dissect(task, &p);
            let (p1, p2) = (PartyId(1), PartyId(2));
            let single1 = CoeffOwner::SingleParty(p1);
            let cross = CoeffOwner::CrossParty(p1, p2);
            assert_eq!(alloc.get(Coeff::Constant).owner, single1);
            assert_eq!(alloc.get(Coeff::Linear(0)).owner, single1);
            assert_eq!(alloc.get(Coeff::Quadratic(0, 0)).owner, single1);
            assert_eq!(alloc.get(Coeff::Quadratic(1, 1)).owner, CoeffOwner::SingleParty(p2));
            assert_eq!(alloc.get(Coeff::Linear(1)).owner, cross);
            assert_eq!(alloc.get(Coeff::Linear(1)).noise_adder, p2);
            assert_eq!(alloc.get(Coeff::Quadratic(0, 1)).owner, cross);
            assert_eq!(
                alloc.get(Coeff::Quadratic(1, 0)).owner,
                CoeffOwner::CrossParty(p2, p1)
            );
            assert_eq!(alloc.get(Coeff::Quadratic(1, 0)).noise_adder, p1);
        }
    }

    #[test]
    fn partition_validation() {
        assert!(VerticalPartition::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(VerticalPartition::new(3, vec![vec![0], vec![2]]).is_err());
        assert!(VerticalPartition::new(3, vec![vec![0, 1, 2], vec![]]).is_err());
        assert!(VerticalPartition::new(3, vec![]).is_err());
        let p = VerticalPartition::new(3, vec![vec![2, 0], vec![1]]).unwrap();
        assert_eq!(p.features_of(PartyId(1)), &[0, 2]);
        assert_eq!(p.owner_of(1), PartyId(2));
    }
}
