//! Laplace noise, coefficient perturbation and privacy accounting.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::objective::{is_perturbed, Coeff, PartyId, PolyObjective, TaskKind};

/// A privacy level, or the explicit "no noise" setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Epsilon {
    Finite(f64),
    NoiseOff,
}

impl Epsilon {
    pub fn finite(eps: f64) -> Result<Self> {
        if eps.is_finite() && eps > 0.0 {
            Ok(Epsilon::Finite(eps))
        } else {
            input(format!("epsilon must be positive and finite, got {eps}"))
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Epsilon::Finite(e) => Some(e),
            Epsilon::NoiseOff => None,
        }
    }

    pub fn is_noise_off(self) -> bool {
        matches!(self, Epsilon::NoiseOff)
    }

    /// Laplace scale for sensitivity `delta_f`, `None` when noise is off.
    pub fn scale(self, delta_f: f64) -> Option<f64> {
        self.value().map(|e| delta_f / e)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(e) => write!(f, "{e}"),
            Epsilon::NoiseOff => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Epsilon {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Epsilon::NoiseOff);
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::Input(format!("cannot parse epsilon '{s}'")))?;
        Epsilon::finite(v)
    }
}

/// Which substream a draw comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamId {
    /// One stream per coefficient: the draw for a coefficient does not depend
    /// on which party adds it.
    Coefficient(u64),
    /// One stream per party, consumed in that party's canonical order.
    Party(u64),
    /// Free-form streams for baselines and data generation.
    Aux(u64),
}

impl StreamId {
    fn chacha_stream(self) -> u64 {
        // Two tag bits keep the families disjoint.
        match self {
            StreamId::Coefficient(i) => i & (u64::MAX >> 2),
            StreamId::Party(i) => (1 << 62) | (i & (u64::MAX >> 2)),
            StreamId::Aux(i) => (2 << 62) | (i & (u64::MAX >> 2)),
        }
    }
}

/// Deterministic source of uniform draws for the Laplace sampler.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha20Rng,
    master: u64,
    id: StreamId,
    draws: u64,
}

impl NoiseStream {
    pub fn new(master: u64, id: StreamId) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master);
        rng.set_stream(id.chacha_stream());
        NoiseStream {
            rng,
            master,
            id,
            draws: 0,
        }
    }

    pub fn for_coefficient(master: u64, canonical_index: usize) -> Self {
        Self::new(master, StreamId::Coefficient(canonical_index as u64))
    }

    pub fn for_party(master: u64, party: PartyId) -> Self {
        Self::new(master, StreamId::Party(party.0 as u64))
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    /// Number of uniforms consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    /// Uniform in the open interval (0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        self.draws += 1;
        // 53 random bits centred in their bucket: never 0, never 1.
        ((self.rng.gen::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }
}

/// Inverse CDF of `Laplace(0, scale)` at `u` in (0, 1).
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    let t = u - 0.5;
    -scale * t.signum() * (1.0 - 2.0 * t.abs()).ln()
}

/// One draw from `Laplace(0, scale)`.
pub fn laplace_sample(scale: f64, stream: &mut NoiseStream) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return input(format!("Laplace scale must be positive, got {scale}"));
    }
    let u = stream.next_uniform();
    let x = laplace_inverse_cdf(u, scale);
    // The sign of a zero draw does not matter; keep it positive.
    Ok(if x == 0.0 { 0.0 } else { x })
}

/// Adds independent `Laplace(delta_f / epsilon)` noise to every coefficient,
/// drawing in slice order.
pub fn perturb(
    coeffs: &[f64],
    delta_f: f64,
    epsilon: Epsilon,
    stream: &mut NoiseStream,
) -> Result<Vec<f64>> {
    let Some(scale) = epsilon.scale(delta_f) else {
        return Ok(coeffs.to_vec());
    };
    coeffs
        .iter()
        .map(|&c| Ok(c + laplace_sample(scale, stream)?))
        .collect()
}

/// How noise draws map onto coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKeying {
    /// Every coefficient has its own stream derived from the master seed.
    Coefficient,
    /// Every party has a stream, drawn in canonical order of its coefficients.
    Party,
}

/// Centralized functional mechanism: perturbs every noise-bearing coefficient
/// with the per-coefficient streams. Produces the same noise as a distributed
/// run using [`NoiseKeying::Coefficient`].
pub fn perturb_objective_keyed(
    obj: &PolyObjective,
    task: TaskKind,
    delta_f: f64,
    epsilon: Epsilon,
    master_seed: u64,
) -> Result<PolyObjective> {
    let d = obj.dim();
    let mut out = obj.clone();
    let Some(scale) = epsilon.scale(delta_f) else {
        return Ok(out);
    };
    for c in Coeff::all(d) {
        if !is_perturbed(task, c) {
            continue;
        }
        let mut s = NoiseStream::for_coefficient(master_seed, c.canonical_index(d));
        *out.get_mut(c) += laplace_sample(scale, &mut s)?;
    }
    Ok(out)
}

/// Local privacy level implied for a party: `epsilon * delta_f_k / delta_f`.
pub fn party_epsilon(epsilon: f64, delta_f: f64, delta_f_k: f64) -> Result<f64> {
    if !(delta_f > 0.0 && delta_f_k > 0.0) {
        return input("sensitivities must be positive");
    }
    if delta_f_k > delta_f {
        return Err(Error::Invariant(format!(
            "party sensitivity {delta_f_k} exceeds global sensitivity {delta_f}"
        )));
    }
    Ok(epsilon * delta_f_k / delta_f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    TopDown,
    BottomUp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyBudget {
    pub party: PartyId,
    pub delta_f_k: f64,
    pub epsilon_k: f64,
}

/// Privacy accounting of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub mode: BudgetMode,
    pub epsilon: f64,
    pub delta_f: f64,
    pub per_party: Vec<PartyBudget>,
    /// Bottom-up budget for each party's single-party coefficients.
    pub single: BTreeMap<PartyId, f64>,
    /// Bottom-up budget for each unordered party pair's cross coefficients.
    pub cross: BTreeMap<(PartyId, PartyId), f64>,
}

impl PrivacyBudget {
    /// Server picks the global level; each party's level follows from its
    /// share of the sensitivity.
    pub fn top_down(epsilon: f64, delta_f: f64, party_sensitivities: &[(PartyId, f64)]) -> Result<Self> {
        if !(epsilon > 0.0) {
            return input("epsilon must be positive");
        }
        let per_party = party_sensitivities
            .iter()
            .map(|&(party, dfk)| {
                Ok(PartyBudget {
                    party,
                    delta_f_k: dfk,
                    epsilon_k: party_epsilon(epsilon, delta_f, dfk)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrivacyBudget {
            mode: BudgetMode::TopDown,
            epsilon,
            delta_f,
            per_party,
            single: BTreeMap::new(),
            cross: BTreeMap::new(),
        })
    }

    /// Parties pick sub-budgets; the server composes the global level.
    pub fn bottom_up(
        delta_f: f64,
        single: BTreeMap<PartyId, (f64, f64)>,
        cross: BTreeMap<(PartyId, PartyId), (f64, f64)>,
    ) -> Result<Self> {
        let g: Vec<(f64, f64)> = single.values().copied().collect();
        let h: Vec<(f64, f64)> = cross.values().copied().collect();
        let epsilon = bottomup_epsilon(delta_f, &g, &h)?;
        let mut per: BTreeMap<PartyId, f64> = single.iter().map(|(&p, &(e, _))| (p, e)).collect();
        for (&(k, l), &(e, _)) in &cross {
            *per.entry(k).or_default() += e;
            *per.entry(l).or_default() += e;
        }
        Ok(PrivacyBudget {
            mode: BudgetMode::BottomUp,
            epsilon,
            delta_f,
            per_party: per
                .into_iter()
                .map(|(party, epsilon_k)| PartyBudget {
                    party,
                    delta_f_k: f64::NAN,
                    epsilon_k,
                })
                .collect(),
            single: single.into_iter().map(|(p, (e, _))| (p, e)).collect(),
            cross: cross.into_iter().map(|(p, (e, _))| (p, e)).collect(),
        })
    }

    pub fn party(&self, p: PartyId) -> Option<&PartyBudget> {
        self.per_party.iter().find(|b| b.party == p)
    }
}

/// Composed global level of a bottom-up run. `single` holds `(epsilon^k,
/// delta_g^k)` per party and `cross` holds `(epsilon^kl, delta_h^kl)` per pair.
pub fn bottomup_epsilon(delta_f: f64, single: &[(f64, f64)], cross: &[(f64, f64)]) -> Result<f64> {
    if !(delta_f > 0.0) {
        return input("global sensitivity must be positive");
    }
    single
        .iter()
        .chain(cross)
        .map(|&(eps, sens)| {
            if eps < 0.0 || !eps.is_finite() {
                return input(format!("sub-budget {eps} must be non-negative"));
            }
            if sens <= 0.0 {
                if eps > 0.0 {
                    return input("zero sub-sensitivity with a nonzero sub-budget");
                }
                return Ok(0.0);
            }
            Ok(delta_f / sens * eps)
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::global_sensitivity;

    #[test]
    fn median_uniform_maps_to_zero() {
        assert_eq!(laplace_inverse_cdf(0.5, 3.0), 0.0);
        assert!(laplace_inverse_cdf(0.75, 1.0) > 0.0);
        assert!(laplace_inverse_cdf(0.25, 1.0) < 0.0);
        // CDF at ln 2 is 0.75 for unit scale.
        assert!((laplace_inverse_cdf(0.75, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_scale() {
        let mut s = NoiseStream::new(1, StreamId::Aux(0));
        assert!(laplace_sample(0.0, &mut s).is_err());
        assert!(laplace_sample(-1.0, &mut s).is_err());
        assert_eq!(s.draws(), 0);
    }

    #[test]
    fn seeded_streams_repeat() {
        let mut a = NoiseStream::new(42, StreamId::Party(3));
        let mut b = NoiseStream::new(42, StreamId::Party(3));
        for _ in 0..100 {
            assert_eq!(
                laplace_sample(2.0, &mut a).unwrap().to_bits(),
                laplace_sample(2.0, &mut b).unwrap().to_bits()
            );
        }
        let mut c = NoiseStream::new(42, StreamId::Coefficient(3));
        assert_ne!(
            laplace_sample(2.0, &mut a).unwrap(),
            laplace_sample(2.0, &mut c).unwrap()
        );
    }

    #[test]
    fn perturb_noise_off_is_identity() {
        let mut s = NoiseStream::new(0, StreamId::Aux(0));
        let v = [1.0, -2.0, 3.5];
        assert_eq!(perturb(&v, 10.0, Epsilon::NoiseOff, &mut s).unwrap(), v);
        assert_eq!(s.draws(), 0);
    }

    #[test]
    fn perturb_single_coefficient_composes() {
        let mut a = NoiseStream::new(9, StreamId::Aux(1));
        let mut b = a.clone();
        let out = perturb(&[4.0], 2.0, Epsilon::Finite(0.5), &mut a).unwrap();
        assert_eq!(out[0], 4.0 + laplace_sample(4.0, &mut b).unwrap());
    }

    #[test]
    fn perturb_full_linear_objective_draw_count() {
        let obj = PolyObjective::zeros(2);
        let mut s = NoiseStream::new(5, StreamId::Aux(0));
        let out = perturb(
            &obj.to_vec(),
            global_sensitivity(TaskKind::Linear, 2),
            Epsilon::Finite(1.0),
            &mut s,
        )
        .unwrap();
        assert_eq!(out.len(), 7);
        assert_eq!(s.draws(), 7);
    }

    #[test]
    fn party_epsilon_examples() {
        assert_eq!(party_epsilon(2.0, 10.0, 10.0).unwrap(), 2.0);
        assert!((party_epsilon(1.0, 50.0, 34.0).unwrap() - 0.68).abs() < 1e-15);
        assert!((party_epsilon(1.0, 50.0, 24.0).unwrap() - 0.48).abs() < 1e-15);
        assert!(matches!(
            party_epsilon(1.0, 10.0, 11.0),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn bottomup_examples() {
        // K = 1: delta_g equals delta_f.
        assert_eq!(bottomup_epsilon(18.0, &[(0.7, 18.0)], &[]).unwrap(), 0.7);
        // Linear, d = 2, one feature each: delta_g = 8 and 2, delta_h = 8.
        let e = bottomup_epsilon(18.0, &[(0.4, 8.0), (0.2, 2.0)], &[(0.3, 8.0)]).unwrap();
        let hand = 18.0 / 8.0 * 0.4 + 18.0 / 2.0 * 0.2 + 18.0 / 8.0 * 0.3;
        assert!((e - hand).abs() < 1e-12);
        let doubled = bottomup_epsilon(18.0, &[(0.8, 8.0), (0.4, 2.0)], &[(0.6, 8.0)]).unwrap();
        assert!((doubled - 2.0 * e).abs() < 1e-12);
        assert!(bottomup_epsilon(18.0, &[(0.1, 0.0)], &[]).is_err());
    }

    #[test]
    fn epsilon_parsing() {
        assert_eq!("inf".parse::<Epsilon>().unwrap(), Epsilon::NoiseOff);
        assert_eq!("0.5".parse::<Epsilon>().unwrap(), Epsilon::Finite(0.5));
        assert!("0".parse::<Epsilon>().is_err());
        assert!("-1".parse::<Epsilon>().is_err());
        assert!("abc".parse::<Epsilon>().is_err());
    }

    #[test]
    fn top_down_budget_per_party() {
        let b = PrivacyBudget::top_down(1.0, 50.0, &[(PartyId(1), 34.0), (PartyId(2), 24.0)]).unwrap();
        assert!((b.party(PartyId(1)).unwrap().epsilon_k - 0.68).abs() < 1e-15);
        assert!(b.per_party.iter().all(|p| p.epsilon_k <= b.epsilon));
    }

    #[test]
    fn bottom_up_budget_sums_per_party() {
        let single = BTreeMap::from([(PartyId(1), (0.4, 8.0)), (PartyId(2), (0.2, 2.0))]);
        let cross = BTreeMap::from([((PartyId(1), PartyId(2)), (0.3, 8.0))]);
        let b = PrivacyBudget::bottom_up(18.0, single, cross).unwrap();
        assert!((b.party(PartyId(1)).unwrap().epsilon_k - 0.7).abs() < 1e-15);
        assert!((b.party(PartyId(2)).unwrap().epsilon_k - 0.5).abs() < 1e-15);
    }
}
