//! Finite descriptors for primal and dual strata, their partial order, and
//! the sandwich predicate `M_low <= M <= J*(M_dual_high)`.
//!
//! A stratum is identified by its invariant: the support set (l1) or the rank
//! (nuclear norm). On the primal side the order is set inclusion / integer
//! order; on the dual side it is reversed, since a larger active set is a
//! smaller dual stratum.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::regularizer::Regularizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Primal,
    Dual,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum StratumValue {
    /// Zero-based indices: the support (primal) or the active set (dual).
    Support(BTreeSet<usize>),
    /// Rank (primal) or number of unit singular values (dual).
    Rank(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Stratum {
    pub value: StratumValue,
    pub side: Side,
}

impl Stratum {
    pub fn support<I: IntoIterator<Item = usize>>(side: Side, indices: I) -> Self {
        Stratum {
            value: StratumValue::Support(indices.into_iter().collect()),
            side,
        }
    }

    pub fn rank(side: Side, r: usize) -> Self {
        Stratum {
            value: StratumValue::Rank(r),
            side,
        }
    }

    pub fn is_primal(&self) -> bool {
        self.side == Side::Primal
    }

    pub fn kind_name(&self) -> &'static str {
        match self.value {
            StratumValue::Support(_) => "support",
            StratumValue::Rank(_) => "rank",
        }
    }

    /// Size of the invariant regardless of side.
    pub fn size(&self) -> usize {
        match &self.value {
            StratumValue::Support(s) => s.len(),
            StratumValue::Rank(r) => *r,
        }
    }

    pub fn with_side(&self, side: Side) -> Stratum {
        Stratum {
            value: self.value.clone(),
            side,
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("stratum serialization is infallible")
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::Primal => "primal",
            Side::Dual => "dual",
        };
        match &self.value {
            StratumValue::Support(s) => {
                let items: Vec<String> = s.iter().map(|i| i.to_string()).collect();
                write!(f, "{side} support {{{}}}", items.join(","))
            }
            StratumValue::Rank(r) => write!(f, "{side} rank {r}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ReprValue {
    Indices(Vec<usize>),
    Count(usize),
}

#[derive(Serialize, Deserialize)]
struct Repr {
    kind: String,
    side: Side,
    value: ReprValue,
}

impl Serialize for Stratum {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let value = match &self.value {
            StratumValue::Support(s) => ReprValue::Indices(s.iter().copied().collect()),
            StratumValue::Rank(r) => ReprValue::Count(*r),
        };
        Repr {
            kind: self.kind_name().to_string(),
            side: self.side,
            value,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Stratum {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = Repr::deserialize(deserializer)?;
        let value = match (repr.kind.as_str(), repr.value) {
            ("support", ReprValue::Indices(v)) => StratumValue::Support(v.into_iter().collect()),
            ("rank", ReprValue::Count(r)) => StratumValue::Rank(r),
            (k, _) => return Err(D::Error::custom(format!("bad stratum kind/value pair: {k}"))),
        };
        Ok(Stratum {
            value,
            side: repr.side,
        })
    }
}

/// The partial order `M1 <= M2` (closure inclusion). Both descriptors must
/// share kind and side.
pub fn leq(m1: &Stratum, m2: &Stratum) -> Result<bool> {
    if m1.side != m2.side {
        return Err(Error::StratumMismatch(format!(
            "cannot compare {m1} with {m2}: sides differ"
        )));
    }
    let forward = match (&m1.value, &m2.value) {
        (StratumValue::Support(a), StratumValue::Support(b)) => match m1.side {
            Side::Primal => a.is_subset(b),
            Side::Dual => b.is_subset(a),
        },
        (StratumValue::Rank(a), StratumValue::Rank(b)) => match m1.side {
            Side::Primal => a <= b,
            Side::Dual => b <= a,
        },
        _ => {
            return Err(Error::StratumMismatch(format!(
                "cannot compare {m1} with {m2}: kinds differ"
            )))
        }
    };
    Ok(forward)
}

/// `R0(M)`: support cardinality or rank of a primal stratum.
pub fn complexity(m: &Stratum) -> Result<usize> {
    if !m.is_primal() {
        return Err(Error::StratumMismatch(
            "complexity is defined on primal strata; map dual strata back first".into(),
        ));
    }
    Ok(m.size())
}

/// `M_low <= M <= J_{R*}(M_dual_high)`.
pub fn sandwich_check(
    low: &Stratum,
    m: &Stratum,
    dual_high: &Stratum,
    reg: &Regularizer,
) -> Result<bool> {
    if !low.is_primal() || !m.is_primal() {
        return Err(Error::StratumMismatch(
            "sandwich bounds expect primal lower and middle strata".into(),
        ));
    }
    if dual_high.is_primal() {
        return Err(Error::StratumMismatch(
            "sandwich upper bound must be a dual stratum".into(),
        ));
    }
    let high = reg.mirror_map_inverse(dual_high)?;
    Ok(leq(low, m)? && leq(m, &high)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_subsets(p: usize) -> Vec<BTreeSet<usize>> {
        (0u32..(1 << p))
            .map(|mask| (0..p).filter(|i| mask & (1 << i) != 0).collect())
            .collect()
    }

    #[test]
    fn primal_and_dual_order_examples() {
        let a = Stratum::support(Side::Primal, [0]);
        let b = Stratum::support(Side::Primal, [0, 1]);
        assert!(leq(&a, &b).unwrap());

        let da = a.with_side(Side::Dual);
        let db = b.with_side(Side::Dual);
        assert!(!leq(&da, &db).unwrap());
        assert!(leq(&db, &da).unwrap());

        let r = Stratum::rank(Side::Primal, 4);
        assert!(leq(&r, &r).unwrap());
    }

    #[test]
    fn leq_rejects_mixed_descriptors() {
        let a = Stratum::support(Side::Primal, [0]);
        assert!(leq(&a, &a.with_side(Side::Dual)).is_err());
        assert!(leq(&a, &Stratum::rank(Side::Primal, 1)).is_err());
    }

    #[test]
    fn leq_is_a_partial_order_on_all_subsets() {
        let p = 6;
        for side in [Side::Primal, Side::Dual] {
            let strata: Vec<Stratum> = all_subsets(p)
                .into_iter()
                .map(|s| Stratum::support(side, s))
                .collect();
            for a in &strata {
                assert!(leq(a, a).unwrap());
                for b in &strata {
                    let ab = leq(a, b).unwrap();
                    let ba = leq(b, a).unwrap();
                    if ab && ba {
                        assert_eq!(a, b);
                    }
                }
            }
            // transitivity on a thinned triple loop (every 3rd set) keeps
            // this test fast while still crossing all cardinalities
            let thin: Vec<&Stratum> = strata.iter().step_by(3).collect();
            for a in &thin {
                for b in &thin {
                    if !leq(a, b).unwrap() {
                        continue;
                    }
                    for c in &thin {
                        if leq(b, c).unwrap() {
                            assert!(leq(a, c).unwrap());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn complexity_values() {
        assert_eq!(complexity(&Stratum::support(Side::Primal, [1, 4, 8])).unwrap(), 3);
        assert_eq!(complexity(&Stratum::rank(Side::Primal, 4)).unwrap(), 4);
        assert_eq!(complexity(&Stratum::support(Side::Primal, [])).unwrap(), 0);
        assert!(complexity(&Stratum::rank(Side::Dual, 2)).is_err());
    }

    #[test]
    fn sandwich_examples() {
        let reg = Regularizer::l1(10);
        let low = Stratum::support(Side::Primal, [0, 1]);
        let mid = Stratum::support(Side::Primal, [0, 1, 2]);
        let high = Stratum::support(Side::Dual, [0, 1, 2, 3]);
        assert!(sandwich_check(&low, &mid, &high, &reg).unwrap());

        let low = Stratum::support(Side::Primal, [0]);
        let mid = Stratum::support(Side::Primal, [4]);
        assert!(!sandwich_check(&low, &mid, &high, &reg).unwrap());

        let nuc = Regularizer::nuclear(20, 20);
        let r = Stratum::rank(Side::Primal, 4);
        assert!(sandwich_check(&r, &r, &Stratum::rank(Side::Dual, 4), &nuc).unwrap());
        assert!(sandwich_check(&r, &r, &r, &nuc).is_err());
    }

    #[test]
    fn json_shape() {
        let s = Stratum::support(Side::Dual, [3, 1]);
        assert_eq!(
            s.to_json_string(),
            r#"{"kind":"support","side":"dual","value":[1,3]}"#
        );
        let r = Stratum::rank(Side::Primal, 4);
        assert_eq!(r.to_json_string(), r#"{"kind":"rank","side":"primal","value":4}"#);
        for st in [s, r] {
            let back: Stratum = serde_json::from_str(&st.to_json_string()).unwrap();
            assert_eq!(back, st);
        }
        assert!(serde_json::from_str::<Stratum>(r#"{"kind":"rank","side":"dual","value":[1]}"#).is_err());
    }
}
