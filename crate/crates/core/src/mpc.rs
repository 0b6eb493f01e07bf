//! Two-party secure dot product over additive secret shares.
//!
//! Values are fixed-point encoded with 20 fractional bits into the prime field
//! `p = 2^64 - 59`. Each multiplication consumes one Beaver triple issued by a
//! trusted dealer; the only values a relay (the server) ever sees are the
//! masked differences `x - a` and `y - b`, which are uniform in the field.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::{ChaCha12Rng, ChaCha20Rng};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};

/// Field modulus, the largest prime below `2^64`.
pub const MODULUS: u64 = 0xFFFF_FFFF_FFFF_FFC5;
pub const FRACTION_BITS: u32 = 20;
pub const SCALE: f64 = (1u64 << FRACTION_BITS) as f64;
/// Scale of a product of two encoded values.
pub const PRODUCT_SCALE: f64 = SCALE * SCALE;

/// Largest vector length whose worst-case dot product (`n * 2^40`) stays
/// below `p / 2`.
pub const MAX_SAFE_LEN: usize = ((MODULUS / 2) >> (2 * FRACTION_BITS)) as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FieldElement(u64);

impl FieldElement {
    pub const ZERO: FieldElement = FieldElement(0);
    pub const ONE: FieldElement = FieldElement(1);

    pub fn new(v: u64) -> Self {
        FieldElement(v % MODULUS)
    }

    pub fn from_i64(v: i64) -> Self {
        if v >= 0 {
            FieldElement::new(v as u64)
        } else {
            -FieldElement::new(v.unsigned_abs())
        }
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Signed representative in `(-p/2, p/2]`.
    pub fn centered(self) -> i128 {
        if self.0 > MODULUS / 2 {
            self.0 as i128 - MODULUS as i128
        } else {
            self.0 as i128
        }
    }

    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        loop {
            let v = rng.next_u64();
            if v < MODULUS {
                return FieldElement(v);
            }
        }
    }
}

impl fmt::Display for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add for FieldElement {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let (s, carry) = self.0.overflowing_add(rhs.0);
        // With a carry the true sum is s + 2^64 = s + 59 (mod p).
        let s = if carry { s + (u64::MAX - MODULUS + 1) } else { s };
        FieldElement(if s >= MODULUS { s - MODULUS } else { s })
    }
}

impl Neg for FieldElement {
    type Output = Self;
    fn neg(self) -> Self {
        if self.0 == 0 {
            self
        } else {
            FieldElement(MODULUS - self.0)
        }
    }
}

impl Sub for FieldElement {
    type Output = Self;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl Mul for FieldElement {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        // 2^64 = 59 (mod p): fold the high word twice, then subtract.
        let fold = |t: u128| (t >> 64) * 59 + (t as u64 as u128);
        let mut t = fold(fold(self.0 as u128 * rhs.0 as u128));
        while t >= MODULUS as u128 {
            t -= MODULUS as u128;
        }
        FieldElement(t as u64)
    }
}

impl std::iter::Sum for FieldElement {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(FieldElement::ZERO, Add::add)
    }
}

/// Fixed-point encoding of a value in `[-1, 1]`.
pub fn encode(x: f64) -> Result<FieldElement> {
    if !(x.abs() <= 1.0) {
        return input(format!("fixed-point input {x} outside [-1, 1]"));
    }
    Ok(FieldElement::from_i64((x * SCALE).round() as i64))
}

pub fn encode_vec(v: &[f64]) -> Result<Vec<FieldElement>> {
    v.iter().map(|&x| encode(x)).collect()
}

/// Decodes a single encoded value.
pub fn decode(fe: FieldElement) -> f64 {
    fe.centered() as f64 / SCALE
}

/// Decodes a sum of `terms` encoded products, rejecting magnitudes that the
/// inputs could not have produced (a wrapped or corrupted result).
pub fn decode_product_sum(fe: FieldElement, terms: usize) -> Result<f64> {
    let v = fe.centered();
    if v.unsigned_abs() > (terms as u128) << (2 * FRACTION_BITS) {
        return Err(Error::DecodeOverflow);
    }
    Ok(v as f64 / PRODUCT_SCALE)
}

/// One holder's additive shares of a vector.
pub type ShareVector = Vec<FieldElement>;

/// Splits `v` into two additive share vectors; the first is uniform.
pub fn share<R: RngCore + ?Sized>(v: &[FieldElement], rng: &mut R) -> (ShareVector, ShareVector) {
    let s1: ShareVector = v.iter().map(|_| FieldElement::random(rng)).collect();
    let s2 = v.iter().zip(&s1).map(|(&x, &r)| x - r).collect();
    (s1, s2)
}

pub fn reconstruct(s1: &[FieldElement], s2: &[FieldElement]) -> Result<Vec<FieldElement>> {
    if s1.len() != s2.len() {
        return input(format!("share lengths differ: {} vs {}", s1.len(), s2.len()));
    }
    Ok(s1.iter().zip(s2).map(|(&a, &b)| a + b).collect())
}

/// One holder's share of a multiplication triple `c = a * b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleShare {
    pub id: u64,
    pub a: FieldElement,
    pub b: FieldElement,
    pub c: FieldElement,
}

/// A triple split between the two holders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeaverTriple {
    pub holder0: TripleShare,
    pub holder1: TripleShare,
}

impl BeaverTriple {
    pub fn id(&self) -> u64 {
        self.holder0.id
    }
}

/// Trusted setup that issues triples. Each triple has a unique id.
#[derive(Debug)]
pub struct Dealer {
    rng: ChaCha12Rng,
    next_id: u64,
}

impl Dealer {
    pub fn new(seed: u64) -> Self {
        Dealer {
            rng: ChaCha12Rng::seed_from_u64(seed),
            next_id: 0,
        }
    }

    pub fn issued(&self) -> u64 {
        self.next_id
    }

    pub fn triple(&mut self) -> BeaverTriple {
        let r = &mut self.rng;
        let a = FieldElement::random(r);
        let b = FieldElement::random(r);
        let c = a * b;
        let (a0, b0, c0) = (
            FieldElement::random(r),
            FieldElement::random(r),
            FieldElement::random(r),
        );
        let id = self.next_id;
        self.next_id += 1;
        BeaverTriple {
            holder0: TripleShare { id, a: a0, b: b0, c: c0 },
            holder1: TripleShare {
                id,
                a: a - a0,
                b: b - b0,
                c: c - c0,
            },
        }
    }

    pub fn triples(&mut self, n: usize) -> Vec<BeaverTriple> {
        (0..n).map(|_| self.triple()).collect()
    }
}

/// Tracks triple consumption so that no triple is used twice.
#[derive(Debug, Default)]
pub struct TripleLedger {
    /// Consumed ids as disjoint half-open ranges keyed by start.
    ranges: BTreeMap<u64, u64>,
    count: usize,
}

impl TripleLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn consume(&mut self, id: u64) -> Result<()> {
        self.consume_range(id, id.saturating_add(1))
    }

    /// Consumes every id in `ids`; contiguous runs are recorded as ranges.
    pub fn consume_all<I: IntoIterator<Item = u64>>(&mut self, ids: I) -> Result<()> {
        let mut run: Option<(u64, u64)> = None;
        for id in ids {
            run = match run {
                Some((s, e)) if e == id && id != u64::MAX => Some((s, e + 1)),
                Some((s, e)) => {
                    self.consume_range(s, e)?;
                    Some((id, id.saturating_add(1)))
                }
                None => Some((id, id.saturating_add(1))),
            };
        }
        match run {
            Some((s, e)) => self.consume_range(s, e),
            None => Ok(()),
        }
    }

    fn consume_range(&mut self, start: u64, end: u64) -> Result<()> {
        let prev = self.ranges.range(..=start).next_back().map(|(&s, &e)| (s, e));
        let clash = prev.filter(|&(_, e)| start < e).map(|_| start).or_else(|| {
            self.ranges.range(start..end).next().map(|(&s, _)| s)
        });
        if let Some(id) = clash {
            return Err(Error::Protocol(format!("Beaver triple {id} reused")));
        }
        let end_merged = self.ranges.remove(&end).unwrap_or(end);
        match prev {
            Some((s, e)) if e == start => self.ranges.insert(s, end_merged),
            _ => self.ranges.insert(start, end_merged),
        };
        self.count += (end - start) as usize;
        Ok(())
    }

    pub fn consumed(&self) -> usize {
        self.count
    }
}

/// Masked differences a holder publishes for one multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Opening {
    pub d: FieldElement,
    pub e: FieldElement,
}

pub fn open_share(x: FieldElement, y: FieldElement, t: &TripleShare) -> Opening {
    Opening {
        d: x - t.a,
        e: y - t.b,
    }
}

/// Holder `role`'s share of `x * y` once `d = x - a` and `e = y - b` are public.
pub fn close_share(role: usize, d: FieldElement, e: FieldElement, t: &TripleShare) -> FieldElement {
    let z = t.c + d * t.b + e * t.a;
    if role == 0 {
        z + d * e
    } else {
        z
    }
}

/// Multiplies two shared values. Returns the output shares and the opened
/// masked differences, which are the only values exchanged.
pub fn beaver_mul(
    x: (FieldElement, FieldElement),
    y: (FieldElement, FieldElement),
    triple: &BeaverTriple,
    ledger: &mut TripleLedger,
) -> Result<((FieldElement, FieldElement), Opening)> {
    ledger.consume(triple.id())?;
    let o0 = open_share(x.0, y.0, &triple.holder0);
    let o1 = open_share(x.1, y.1, &triple.holder1);
    let opened = Opening {
        d: o0.d + o1.d,
        e: o0.e + o1.e,
    };
    let z0 = close_share(0, opened.d, opened.e, &triple.holder0);
    let z1 = close_share(1, opened.d, opened.e, &triple.holder1);
    Ok(((z0, z1), opened))
}

/// One holder's state in a vector dot product.
#[derive(Debug, Clone)]
pub struct DotHolder {
    role: usize,
    x: ShareVector,
    y: ShareVector,
    triples: Vec<TripleShare>,
}

impl DotHolder {
    pub fn new(role: usize, x: ShareVector, y: ShareVector, triples: Vec<TripleShare>) -> Result<Self> {
        if role > 1 {
            return input("holder role must be 0 or 1");
        }
        if x.len() != y.len() || x.len() != triples.len() {
            return input(format!(
                "dot holder sizes disagree: {} / {} / {} triples",
                x.len(),
                y.len(),
                triples.len()
            ));
        }
        Ok(DotHolder { role, x, y, triples })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn triple_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.triples.iter().map(|t| t.id)
    }

    /// This holder's masked differences, `d` block then `e` block.
    pub fn opening(&self) -> (Vec<FieldElement>, Vec<FieldElement>) {
        self.x
            .iter()
            .zip(&self.y)
            .zip(&self.triples)
            .map(|((&x, &y), t)| {
                let o = open_share(x, y, t);
                (o.d, o.e)
            })
            .unzip()
    }

    /// Share of the dot product given the opened `d` and `e` vectors.
    pub fn finish(&self, d: &[FieldElement], e: &[FieldElement]) -> Result<FieldElement> {
        if d.len() != self.len() || e.len() != self.len() {
            return input("opened vectors have the wrong length");
        }
        Ok(self
            .triples
            .iter()
            .zip(d.iter().zip(e))
            .map(|(t, (&d, &e))| close_share(self.role, d, e, t))
            .sum())
    }
}

/// Backend computing cross-party dot products.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// Additive secret sharing with Beaver triples.
    SecretSharing,
    /// Computes in the clear; messages carry an audit tag.
    PlaintextDebug,
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::SecretSharing => f.write_str("secret-sharing"),
            Backend::PlaintextDebug => f.write_str("plaintext-debug"),
        }
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "secret-sharing" | "ss" => Ok(Backend::SecretSharing),
            "plaintext-debug" | "plaintext" => Ok(Backend::PlaintextDebug),
            other => input(format!("unknown backend '{other}'")),
        }
    }
}

/// Randomness and triple bookkeeping shared by a sequence of dot products.
#[derive(Debug)]
pub struct DotContext {
    rng: ChaCha20Rng,
    pub dealer: Dealer,
    pub ledger: TripleLedger,
}

impl DotContext {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let dealer = Dealer::new(rng.gen());
        DotContext {
            rng,
            dealer,
            ledger: TripleLedger::new(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha20Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DotOutcome {
    pub value: f64,
    /// Field elements a relay would observe (the opened differences).
    pub server_view: Vec<FieldElement>,
    /// Plaintext value routed to the server by the debug backend.
    pub debug_value: Option<f64>,
    pub triples_consumed: usize,
}

pub fn check_len(n: usize) -> Result<()> {
    if n > MAX_SAFE_LEN {
        return Err(Error::Overflow {
            len: n,
            max_safe_len: MAX_SAFE_LEN,
        });
    }
    Ok(())
}

/// Secret-shared dot product of two field vectors. Returns the product as a
/// field element together with the relay's view.
pub fn secure_dot_field(
    x: &[FieldElement],
    y: &[FieldElement],
    ctx: &mut DotContext,
) -> Result<(FieldElement, Vec<FieldElement>)> {
    if x.len() != y.len() {
        return input(format!("vector lengths differ: {} vs {}", x.len(), y.len()));
    }
    check_len(x.len())?;
    let n = x.len();
    let triples = ctx.dealer.triples(n);
    for t in &triples {
        ctx.ledger.consume(t.id())?;
    }
    // Left owner keeps x0 and sends x1; right owner keeps y1 and sends y0.
    let (x0, x1) = share(x, &mut ctx.rng);
    let (y1, y0) = share(y, &mut ctx.rng);
    let h0 = DotHolder::new(0, x0, y0, triples.iter().map(|t| t.holder0).collect())?;
    let h1 = DotHolder::new(1, x1, y1, triples.iter().map(|t| t.holder1).collect())?;
    let (d0, e0) = h0.opening();
    let (d1, e1) = h1.opening();
    let d = reconstruct(&d0, &d1)?;
    let e = reconstruct(&e0, &e1)?;
    let z = h0.finish(&d, &e)? + h1.finish(&d, &e)?;
    let mut view = d;
    view.extend(e);
    Ok((z, view))
}

/// Dot product of two real vectors with entries in `[-1, 1]`.
pub fn secure_dot(vk: &[f64], vl: &[f64], backend: Backend, ctx: &mut DotContext) -> Result<DotOutcome> {
    if vk.len() != vl.len() {
        return input(format!("vector lengths differ: {} vs {}", vk.len(), vl.len()));
    }
    check_len(vk.len())?;
    match backend {
        Backend::PlaintextDebug => {
            for &v in vk.iter().chain(vl) {
                if !(v.abs() <= 1.0) {
                    return input(format!("dot product input {v} outside [-1, 1]"));
                }
            }
            let value = plain_dot(vk, vl);
            Ok(DotOutcome {
                value,
                server_view: Vec::new(),
                debug_value: Some(value),
                triples_consumed: 0,
            })
        }
        Backend::SecretSharing => {
            let x = encode_vec(vk)?;
            let y = encode_vec(vl)?;
            let (z, view) = secure_dot_field(&x, &y, ctx)?;
            Ok(DotOutcome {
                value: decode_product_sum(z, vk.len())?,
                server_view: view,
                debug_value: None,
                triples_consumed: vk.len(),
            })
        }
    }
}

/// Plain dot product in index order.
pub fn plain_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
