//! Nodal, pool and activation operators of an operational neuron.
//!
//! Every operator carries its analytic derivatives. The library is a closed
//! set: seven nodal operators, two pool operators and two activations, which
//! combine into 28 operator sets indexed as `pool * 14 + act * 7 + nodal`.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{OnnError, Result};

/// Number of operator sets in the full library.
pub const LIBRARY_SIZE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Nodal {
    Linear = 0,
    Cubic = 1,
    Sine = 2,
    Exp = 3,
    Sinh = 4,
    Sinc = 5,
    Chirp = 6,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pool {
    Sum = 0,
    Median = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Activation {
    Tanh = 0,
    LinCut = 1,
}

impl Nodal {
    pub const ALL: [Nodal; 7] = [
        Nodal::Linear,
        Nodal::Cubic,
        Nodal::Sine,
        Nodal::Exp,
        Nodal::Sinh,
        Nodal::Sinc,
        Nodal::Chirp,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(OnnError::OutOfRange { index: id, len: 7 })
    }

    pub fn name(self) -> &'static str {
        match self {
            Nodal::Linear => "linear",
            Nodal::Cubic => "cubic",
            Nodal::Sine => "sine",
            Nodal::Exp => "exp",
            Nodal::Sinh => "sinh",
            Nodal::Sinc => "sinc",
            Nodal::Chirp => "chirp",
        }
    }

    /// Nodal term `Ψ(w, y)`.
    #[inline]
    pub fn eval(self, w: f64, y: f64, c: &OperatorConstants) -> f64 {
        match self {
            Nodal::Linear => w * y,
            Nodal::Cubic => c.k_nodal * w * y * y * y,
            Nodal::Sine => (c.k_nodal * w * y).sin(),
            Nodal::Exp => c.clip(w * y).exp_m1(),
            Nodal::Sinh => c.clip(c.k_nodal * w * y).sinh(),
            Nodal::Sinc => (c.k_nodal * w * y).sin() / c.guard_denominator(y),
            Nodal::Chirp => (c.k_chirp * w * y * y).sin(),
        }
    }

    /// `∂Ψ/∂w`.
    #[inline]
    pub fn grad_w(self, w: f64, y: f64, c: &OperatorConstants) -> f64 {
        self.grads(w, y, c).0
    }

    /// `∂Ψ/∂y`.
    #[inline]
    pub fn grad_y(self, w: f64, y: f64, c: &OperatorConstants) -> f64 {
        self.grads(w, y, c).1
    }

    /// Both partials `(∂Ψ/∂w, ∂Ψ/∂y)`, sharing the transcendental evaluation.
    ///
    /// Guards match [`Nodal::eval`]: beyond `arg_clip` the clipped argument is
    /// flat, and inside the sinc guard band the denominator is a constant.
    #[inline]
    pub fn grads(self, w: f64, y: f64, c: &OperatorConstants) -> (f64, f64) {
        let k = c.k_nodal;
        match self {
            Nodal::Linear => (y, w),
            Nodal::Cubic => {
                let y2 = y * y;
                (k * y2 * y, 3.0 * k * w * y2)
            }
            Nodal::Sine => {
                let cos = (k * w * y).cos();
                (k * y * cos, k * w * cos)
            }
            Nodal::Exp => {
                let a = w * y;
                if a.abs() > c.arg_clip {
                    return (0.0, 0.0);
                }
                let e = a.exp();
                (y * e, w * e)
            }
            Nodal::Sinh => {
                let a = k * w * y;
                if a.abs() > c.arg_clip {
                    return (0.0, 0.0);
                }
                let ch = a.cosh();
                (k * y * ch, k * w * ch)
            }
            Nodal::Sinc => {
                let a = k * w * y;
                let (sin, cos) = a.sin_cos();
                let d = c.guard_denominator(y);
                let dw = k * y * cos / d;
                let dy = if y.abs() >= c.sinc_guard {
                    k * w * cos / d - sin / (d * d)
                } else {
                    k * w * cos / d
                };
                (dw, dy)
            }
            Nodal::Chirp => {
                let y2 = y * y;
                let cos = (c.k_chirp * w * y2).cos();
                (c.k_chirp * y2 * cos, 2.0 * c.k_chirp * w * y * cos)
            }
        }
    }
}

impl Pool {
    pub const ALL: [Pool; 2] = [Pool::Sum, Pool::Median];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(OnnError::OutOfRange { index: id, len: 2 })
    }

    pub fn name(self) -> &'static str {
        match self {
            Pool::Sum => "sum",
            Pool::Median => "median",
        }
    }

    /// Pools `terms`. For the median the index of the selected term is
    /// returned as well.
    pub fn eval(self, terms: &[f64]) -> Result<(f64, Option<usize>)> {
        if terms.is_empty() {
            return Err(OnnError::EmptyPool);
        }
        Ok(match self {
            Pool::Sum => (terms.iter().sum(), None),
            Pool::Median => {
                let j = median_index(terms);
                (terms[j], Some(j))
            }
        })
    }

    /// `∂P/∂Ψ_j`.
    pub fn grad(self, terms: &[f64], j: usize) -> Result<f64> {
        if j >= terms.len() {
            return Err(OnnError::OutOfRange {
                index: j,
                len: terms.len(),
            });
        }
        Ok(match self {
            Pool::Sum => 1.0,
            Pool::Median => {
                if median_index(terms) == j {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }
}

/// Index of the median term: lower middle of the sorted order, equal values
/// ordered by original position. `terms` must be non-empty.
#[inline]
pub fn median_index(terms: &[f64]) -> usize {
    debug_assert!(!terms.is_empty());
    let n = terms.len();
    if n <= 32 {
        let mut idx = [0u8; 32];
        for (i, slot) in idx.iter_mut().enumerate().take(n) {
            *slot = i as u8;
        }
        // insertion sort keyed on (value, index); stable so ties keep index order
        for i in 1..n {
            let cur = idx[i];
            let v = terms[cur as usize];
            let mut j = i;
            while j > 0 && terms[idx[j - 1] as usize] > v {
                idx[j] = idx[j - 1];
                j -= 1;
            }
            idx[j] = cur;
        }
        idx[(n - 1) / 2] as usize
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| terms[a].total_cmp(&terms[b]).then(a.cmp(&b)));
        idx[(n - 1) / 2]
    }
}

impl Activation {
    pub const ALL: [Activation; 2] = [Activation::Tanh, Activation::LinCut];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or(OnnError::OutOfRange { index: id, len: 2 })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::LinCut => "lin-cut",
        }
    }

    #[inline]
    pub fn eval(self, x: f64, c: &OperatorConstants) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::LinCut => {
                if x > c.cut {
                    1.0
                } else if x < -c.cut {
                    -1.0
                } else {
                    x / c.cut
                }
            }
        }
    }

    #[inline]
    pub fn grad(self, x: f64, c: &OperatorConstants) -> f64 {
        match self {
            Activation::Tanh => {
                let f = x.tanh();
                1.0 - f * f
            }
            Activation::LinCut => {
                if x.abs() <= c.cut {
                    1.0 / c.cut
                } else {
                    0.0
                }
            }
        }
    }
}

/// Numeric constants of the operator library. Frozen per model and stored in
/// every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConstants {
    /// `K` of the cubic, sine, sinh and sinc nodal operators.
    pub k_nodal: f64,
    /// `K_C` of the chirp nodal operator.
    pub k_chirp: f64,
    /// Saturation point of lin-cut.
    pub cut: f64,
    /// Minimum magnitude of the sinc denominator.
    pub sinc_guard: f64,
    /// Bound on the exp/sinh argument.
    pub arg_clip: f64,
}

impl Default for OperatorConstants {
    fn default() -> Self {
        Self {
            k_nodal: PI,
            k_chirp: PI,
            cut: 10.0,
            sinc_guard: 1e-4,
            arg_clip: 20.0,
        }
    }
}

impl OperatorConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_nodal", self.k_nodal),
            ("k_chirp", self.k_chirp),
            ("cut", self.cut),
            ("sinc_guard", self.sinc_guard),
            ("arg_clip", self.arg_clip),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(OnnError::Invalid(format!("{name} must be finite and > 0")));
            }
        }
        Ok(())
    }

    #[inline]
    fn clip(&self, a: f64) -> f64 {
        a.clamp(-self.arg_clip, self.arg_clip)
    }

    /// `sign(y) * max(|y|, sinc_guard)`, with `sign(0) = +1`.
    #[inline]
    fn guard_denominator(&self, y: f64) -> f64 {
        if y >= 0.0 {
            y.max(self.sinc_guard)
        } else {
            y.min(-self.sinc_guard)
        }
    }
}

/// A `(pool, activation, nodal)` triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct OperatorSet {
    pub pool: Pool,
    pub act: Activation,
    pub nodal: Nodal,
}

impl OperatorSet {
    /// The native CNN set: summation, tanh, multiplication.
    pub const CNN: OperatorSet = OperatorSet {
        pool: Pool::Sum,
        act: Activation::Tanh,
        nodal: Nodal::Linear,
    };

    pub fn new(pool: Pool, act: Activation, nodal: Nodal) -> Self {
        Self { pool, act, nodal }
    }

    pub fn from_ids(pool: usize, act: usize, nodal: usize) -> Result<Self> {
        Ok(Self {
            pool: Pool::from_id(pool)?,
            act: Activation::from_id(act)?,
            nodal: Nodal::from_id(nodal)?,
        })
    }

    pub fn index(self) -> usize {
        set_index(self.pool, self.act, self.nodal)
    }

    pub fn from_index(index: usize) -> Result<Self> {
        if index >= LIBRARY_SIZE {
            return Err(OnnError::BadSetIndex(index));
        }
        Self::from_ids(index / 14, (index % 14) / 7, index % 7)
    }
}

pub fn set_index(pool: Pool, act: Activation, nodal: Nodal) -> usize {
    pool.id() * 14 + act.id() * 7 + nodal.id()
}

impl From<OperatorSet> for usize {
    fn from(s: OperatorSet) -> usize {
        s.index()
    }
}

impl TryFrom<usize> for OperatorSet {
    type Error = OnnError;
    fn try_from(index: usize) -> Result<Self> {
        OperatorSet::from_index(index)
    }
}

impl fmt::Display for OperatorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "θ{} ({}, {}, {})",
            self.index(),
            self.pool.name(),
            self.act.name(),
            self.nodal.name()
        )
    }
}

/// A restricted operator library: the full cross product of the chosen
/// pools, activations and nodal operators.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SubLibraryIds", into = "SubLibraryIds")]
pub struct OperatorSubLibrary {
    sets: Vec<OperatorSet>,
    pools: Vec<Pool>,
    acts: Vec<Activation>,
    nodals: Vec<Nodal>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubLibraryIds {
    pub pools: Vec<usize>,
    pub acts: Vec<usize>,
    pub nodals: Vec<usize>,
}

impl OperatorSubLibrary {
    pub fn new(pools: &[usize], acts: &[usize], nodals: &[usize]) -> Result<Self> {
        fn ids<T: Copy + Ord>(
            raw: &[usize],
            what: &'static str,
            conv: fn(usize) -> Result<T>,
        ) -> Result<Vec<T>> {
            if raw.is_empty() {
                return Err(OnnError::EmptyIdList(what));
            }
            let mut out = raw.iter().map(|&i| conv(i)).collect::<Result<Vec<_>>>()?;
            out.sort();
            out.dedup();
            Ok(out)
        }
        let pools = ids(pools, "pools", Pool::from_id)?;
        let acts = ids(acts, "acts", Activation::from_id)?;
        let nodals = ids(nodals, "nodals", Nodal::from_id)?;

        let mut sets = Vec::with_capacity(pools.len() * acts.len() * nodals.len());
        for &p in &pools {
            for &a in &acts {
                for &n in &nodals {
                    sets.push(OperatorSet::new(p, a, n));
                }
            }
        }
        sets.sort_by_key(|s| s.index());
        Ok(Self {
            sets,
            pools,
            acts,
            nodals,
        })
    }

    /// All 28 sets.
    pub fn full() -> Self {
        Self::new(&[0, 1], &[0, 1], &[0, 1, 2, 3, 4, 5, 6]).expect("static ids")
    }

    /// Sum and median pools with tanh only (sets 0..6 and 14..20).
    pub fn denoising() -> Self {
        Self::new(&[0, 1], &[0], &[0, 1, 2, 3, 4, 5, 6]).expect("static ids")
    }

    /// Sum pool with tanh and lin-cut (sets 0..13).
    pub fn regression() -> Self {
        Self::new(&[0], &[0, 1], &[0, 1, 2, 3, 4, 5, 6]).expect("static ids")
    }

    pub fn sets(&self) -> &[OperatorSet] {
        &self.sets
    }

    pub fn indices(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.index()).collect()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn contains(&self, set: OperatorSet) -> bool {
        self.sets.binary_search_by_key(&set.index(), |s| s.index()).is_ok()
    }

    pub fn pools(&self) -> &[Pool] {
        &self.pools
    }

    pub fn acts(&self) -> &[Activation] {
        &self.acts
    }

    pub fn nodals(&self) -> &[Nodal] {
        &self.nodals
    }

    pub fn ids(&self) -> SubLibraryIds {
        SubLibraryIds {
            pools: self.pools.iter().map(|p| p.id()).collect(),
            acts: self.acts.iter().map(|a| a.id()).collect(),
            nodals: self.nodals.iter().map(|n| n.id()).collect(),
        }
    }
}

impl TryFrom<SubLibraryIds> for OperatorSubLibrary {
    type Error = OnnError;
    fn try_from(ids: SubLibraryIds) -> Result<Self> {
        Self::new(&ids.pools, &ids.acts, &ids.nodals)
    }
}

impl From<OperatorSubLibrary> for SubLibraryIds {
    fn from(lib: OperatorSubLibrary) -> Self {
        lib.ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn consts(k: f64) -> OperatorConstants {
        OperatorConstants {
            k_nodal: k,
            k_chirp: k,
            ..Default::default()
        }
    }

    #[test]
    fn nodal_examples() {
        let c = OperatorConstants::default();
        assert_eq!(Nodal::Linear.eval(2.0, 3.0, &c), 6.0);
        assert_eq!(Nodal::Sine.eval(0.0, 0.7, &c), 0.0);
        assert_eq!(Nodal::Exp.eval(0.0, 0.5, &c), 0.0);
        assert_eq!(Nodal::Cubic.eval(0.5, -1.0, &consts(1.0)), -0.5);

        assert_eq!(Nodal::Linear.grad_w(2.0, 3.0, &c), 3.0);
        assert_eq!(Nodal::Linear.grad_y(2.0, 3.0, &c), 2.0);
        let k = 1.7;
        assert_eq!(Nodal::Sine.grad_w(0.0, 0.7, &consts(k)), k * 0.7);
        assert_eq!(Nodal::Cubic.grad_y(1.0, 0.0, &c), 0.0);
    }

    #[test]
    fn zero_input_is_zero_term() {
        // zero padding relies on Ψ(w, 0) == 0 and ∂Ψ/∂w (w, 0) == 0
        let c = OperatorConstants::default();
        for n in Nodal::ALL {
            for w in [-0.9, 0.0, 0.3, 5.0] {
                assert_eq!(n.eval(w, 0.0, &c), 0.0, "{n:?}");
                assert_eq!(n.grad_w(w, 0.0, &c), 0.0, "{n:?}");
            }
        }
    }

    #[test]
    fn exp_and_sinh_are_clipped() {
        let c = OperatorConstants::default();
        assert_eq!(Nodal::Exp.eval(100.0, 1.0, &c), 20f64.exp_m1());
        assert!(Nodal::Sinh.eval(100.0, 100.0, &c).is_finite());
        assert_eq!(Nodal::Exp.grads(100.0, 1.0, &c), (0.0, 0.0));
        assert_eq!(Nodal::Sinh.grads(-100.0, 1.0, &c), (0.0, 0.0));
    }

    #[test]
    fn sinc_guard_keeps_values_finite() {
        let c = OperatorConstants::default();
        for y in [0.0, 1e-9, -1e-9, 1e-5] {
            let v = Nodal::Sinc.eval(0.4, y, &c);
            let (dw, dy) = Nodal::Sinc.grads(0.4, y, &c);
            assert!(v.is_finite() && dw.is_finite() && dy.is_finite());
        }
    }

    #[test]
    fn pool_examples() {
        assert_eq!(Pool::Sum.eval(&[1.0, 2.0, 3.0]).unwrap(), (6.0, None));
        assert_eq!(Pool::Median.eval(&[5.0, 1.0, 9.0]).unwrap(), (5.0, Some(0)));
        assert_eq!(
            Pool::Median.eval(&[4.0, 2.0, 8.0, 6.0]).unwrap(),
            (4.0, Some(0))
        );
        assert!(matches!(Pool::Sum.eval(&[]), Err(OnnError::EmptyPool)));

        assert_eq!(Pool::Sum.grad(&[3.0, 1.0], 1).unwrap(), 1.0);
        assert_eq!(Pool::Median.grad(&[5.0, 1.0, 9.0], 0).unwrap(), 1.0);
        assert_eq!(Pool::Median.grad(&[5.0, 1.0, 9.0], 2).unwrap(), 0.0);
        assert!(Pool::Median.grad(&[5.0, 1.0, 9.0], 3).is_err());
    }

    #[test]
    fn median_ties_take_smallest_index() {
        assert_eq!(median_index(&[2.0, 2.0, 2.0]), 1);
        assert_eq!(median_index(&[7.0; 9]), 4);
        assert_eq!(median_index(&[1.0, 3.0, 3.0, 0.0, 3.0]), 1);
        let long: Vec<f64> = (0..40).rev().map(f64::from).collect();
        assert_eq!(long[median_index(&long)], 19.0);
    }

    #[test]
    fn activation_examples() {
        let c = OperatorConstants::default();
        assert_eq!(Activation::Tanh.eval(0.0, &c), 0.0);
        assert_eq!(Activation::Tanh.grad(0.0, &c), 1.0);
        assert_eq!(Activation::LinCut.eval(5.0, &c), 0.5);
        assert_eq!(Activation::LinCut.grad(5.0, &c), 0.1);
        assert_eq!(Activation::LinCut.eval(15.0, &c), 1.0);
        assert_eq!(Activation::LinCut.grad(15.0, &c), 0.0);
        assert_eq!(Activation::LinCut.eval(-15.0, &c), -1.0);
    }

    #[test]
    fn set_indexing() {
        assert_eq!(OperatorSet::from_ids(0, 0, 0).unwrap().index(), 0);
        assert_eq!(OperatorSet::from_ids(1, 1, 5).unwrap().index(), 26);
        assert_eq!(OperatorSet::from_ids(0, 1, 1).unwrap().index(), 8);
        assert_eq!(OperatorSet::from_index(0).unwrap(), OperatorSet::CNN);
        assert!(OperatorSet::from_index(28).is_err());
        assert!(OperatorSet::from_ids(2, 0, 0).is_err());
    }

    #[test]
    fn sublibraries() {
        let reg = OperatorSubLibrary::new(&[0], &[0, 1], &[0, 1, 2, 3, 4, 5, 6]).unwrap();
        assert_eq!(reg.indices(), (0..14).collect::<Vec<_>>());
        let den = OperatorSubLibrary::new(&[0, 1], &[0], &[0, 1, 2, 3, 4, 5, 6]).unwrap();
        let expected: Vec<usize> = (0..7).chain(14..21).collect();
        assert_eq!(den.indices(), expected);
        assert_eq!(OperatorSubLibrary::full().len(), 28);
        assert!(OperatorSubLibrary::new(&[], &[0], &[0]).is_err());
        assert!(den.contains(OperatorSet::from_index(20).unwrap()));
        assert!(!den.contains(OperatorSet::from_index(7).unwrap()));
    }

    #[test]
    fn set_serializes_as_index() {
        let s = OperatorSet::from_index(26).unwrap();
        assert_eq!(serde_json::to_string(&s).unwrap(), "26");
        let back: OperatorSet = serde_json::from_str("26").unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<OperatorSet>("31").is_err());
    }
}
