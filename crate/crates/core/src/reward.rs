//! Zero-tolerance and error-rate rewards.
//!
//! The zero-tolerance reward (ZTR) is all-or-nothing: a rollout succeeds only
//! if every asserted claim is matched by the Checker consensus. The penalty
//! form scores success/failure as `0 / -1`, the incentive form as `1 / 0`.
//! The error-rate reward (ERR) is the proportional alternative
//! `-n_err / n_total`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{AuditConsensus, ConsensusAnswer};
use crate::textparse::{numbers_match, ClaimQA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardFunction {
    Ztr,
    Err,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarVariant {
    /// Success 0, failure -1.
    PenaltyBased,
    /// Success 1, failure 0.
    IncentiveBased,
}

impl ScalarVariant {
    pub fn success(self) -> f64 {
        match self {
            ScalarVariant::PenaltyBased => 0.0,
            ScalarVariant::IncentiveBased => 1.0,
        }
    }

    pub fn failure(self) -> f64 {
        self.success() - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", content = "epsilon", rename_all = "snake_case")]
pub enum MatchPolicy {
    #[default]
    Exact,
    /// `|a - b| / max(|a|, |b|, 1) <= epsilon`, epsilon > 0.
    RelativeTol(f64),
}

/// Reward for a rollout in which no claim was proposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZeroClaimPolicy {
    #[default]
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub function: RewardFunction,
    pub scalar_variant: ScalarVariant,
    #[serde(default)]
    pub match_policy: MatchPolicy,
    #[serde(default)]
    pub n0_policy: ZeroClaimPolicy,
    /// Score rollouts with fewer claims than the Proposer minimum as failures.
    #[serde(default)]
    pub penalize_below_min: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            function: RewardFunction::Ztr,
            scalar_variant: ScalarVariant::PenaltyBased,
            match_policy: MatchPolicy::Exact,
            n0_policy: ZeroClaimPolicy::Success,
            penalize_below_min: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("{claims} claims but {consensus} consensus entries")]
    LengthMismatch { claims: usize, consensus: usize },
    #[error("relative tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        match self.match_policy {
            MatchPolicy::RelativeTol(eps) if !(eps > 0.0) => Err(RewardError::BadTolerance(eps)),
            _ => Ok(()),
        }
    }

    fn success(&self) -> f64 {
        match self.function {
            RewardFunction::Ztr => self.scalar_variant.success(),
            RewardFunction::Err => 0.0,
        }
    }

    fn failure(&self) -> f64 {
        match self.function {
            RewardFunction::Ztr => self.scalar_variant.failure(),
            RewardFunction::Err => -1.0,
        }
    }
}

/// An empty list is vacuously all-true.
pub fn ztr(matches: &[bool], variant: ScalarVariant) -> f64 {
    if matches.iter().all(|&m| m) {
        variant.success()
    } else {
        variant.failure()
    }
}

/// `-n_err / n_total`, and 0 for an empty list.
pub fn err(matches: &[bool]) -> f64 {
    if matches.is_empty() {
        return 0.0;
    }
    let n_err = matches.iter().filter(|&&m| !m).count();
    -(n_err as f64) / matches.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub function: RewardFunction,
    /// Only meaningful for ZTR.
    pub scalar_variant: Option<ScalarVariant>,
    pub per_claim: Vec<bool>,
    pub n_total: usize,
    pub n_err: usize,
    pub value: f64,
}

/// Pairs claims with consensus positionally. `NoConsensus` and
/// `CannotAnswer` count as mismatches. `min_questions` is the Proposer
/// minimum, consulted only when `penalize_below_min` is set.
pub fn score_rollout(
    claims: &[ClaimQA],
    consensus: &[AuditConsensus],
    cfg: &RewardConfig,
    min_questions: Option<usize>,
) -> Result<RewardRecord, RewardError> {
    if claims.len() != consensus.len() {
        return Err(RewardError::LengthMismatch {
            claims: claims.len(),
            consensus: consensus.len(),
        });
    }
    let per_claim: Vec<bool> = claims
        .iter()
        .zip(consensus)
        .map(|(claim, c)| match &c.consensus {
            ConsensusAnswer::Number(n) => numbers_match(&claim.asserted_answer, n, cfg.match_policy),
            ConsensusAnswer::CannotAnswer | ConsensusAnswer::NoConsensus => false,
        })
        .collect();
    let n_total = per_claim.len();
    let n_err = per_claim.iter().filter(|&&m| !m).count();

    let below_min = cfg.penalize_below_min && min_questions.is_some_and(|k| n_total < k);
    let value = if below_min {
        cfg.failure()
    } else if n_total == 0 {
        match cfg.n0_policy {
            ZeroClaimPolicy::Success => cfg.success(),
            ZeroClaimPolicy::Failure => cfg.failure(),
        }
    } else {
        match cfg.function {
            RewardFunction::Ztr => ztr(&per_claim, cfg.scalar_variant),
            RewardFunction::Err => err(&per_claim),
        }
    };

    Ok(RewardRecord {
        function: cfg.function,
        scalar_variant: (cfg.function == RewardFunction::Ztr).then_some(cfg.scalar_variant),
        per_claim,
        n_total,
        n_err,
        value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Vote;
    use crate::textparse::canonicalize_number;
    use proptest::prelude::*;

    fn claim(n: &str) -> ClaimQA {
        ClaimQA::new("q?", canonicalize_number(n).unwrap())
    }

    fn agreed(n: &str) -> AuditConsensus {
        let v = canonicalize_number(n).unwrap();
        AuditConsensus {
            question_index: 1,
            votes: vec![Vote::Number(v.clone())],
            evidence: vec![None],
            consensus: ConsensusAnswer::Number(v),
        }
    }

    fn unanswerable() -> AuditConsensus {
        AuditConsensus {
            question_index: 1,
            votes: vec![Vote::CannotAnswer],
            evidence: vec![None],
            consensus: ConsensusAnswer::CannotAnswer,
        }
    }

    #[test]
    fn ztr_examples() {
        assert_eq!(ztr(&[true; 5], ScalarVariant::PenaltyBased), 0.0);
        assert_eq!(ztr(&[true, false, true], ScalarVariant::PenaltyBased), -1.0);
        assert_eq!(ztr(&[true, true], ScalarVariant::IncentiveBased), 1.0);
        assert_eq!(ztr(&[], ScalarVariant::PenaltyBased), 0.0);
    }

    #[test]
    fn err_examples() {
        assert_eq!(err(&[true, false, true, false, true]), -0.4);
        assert_eq!(err(&[true; 4]), 0.0);
        assert_eq!(err(&[false; 3]), -1.0);
        assert_eq!(err(&[]), 0.0);
    }

    #[test]
    fn all_agreeing_claims_score_zero() {
        let values = ["52", "59", "50", "89", "78"];
        let claims: Vec<_> = values.iter().map(|v| claim(v)).collect();
        let consensus: Vec<_> = values.iter().map(|v| agreed(v)).collect();
        let r = score_rollout(&claims, &consensus, &RewardConfig::default(), None).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.per_claim, vec![true; 5]);
        assert_eq!((r.n_total, r.n_err), (5, 0));
        assert_eq!(r.scalar_variant, Some(ScalarVariant::PenaltyBased));
    }

    #[test]
    fn cannot_answer_fails_the_rollout() {
        let claims = vec![claim("52"), claim("59"), claim("50")];
        let consensus = vec![agreed("52"), agreed("59"), unanswerable()];
        let r = score_rollout(&claims, &consensus, &RewardConfig::default(), None).unwrap();
        assert_eq!(r.per_claim, vec![true, true, false]);
        assert_eq!(r.value, -1.0);
        let err_cfg = RewardConfig {
            function: RewardFunction::Err,
            ..Default::default()
        };
        let r = score_rollout(&claims, &consensus, &err_cfg, None).unwrap();
        assert_eq!(r.value, -1.0 / 3.0);
        assert_eq!(r.scalar_variant, None);
    }

    #[test]
    fn no_consensus_is_a_mismatch() {
        let mut c = agreed("5");
        c.consensus = ConsensusAnswer::NoConsensus;
        let r = score_rollout(&[claim("5")], &[c], &RewardConfig::default(), None).unwrap();
        assert_eq!(r.value, -1.0);
    }

    #[test]
    fn zero_claim_policies() {
        let cfg = RewardConfig::default();
        assert_eq!(score_rollout(&[], &[], &cfg, None).unwrap().value, 0.0);
        let fail = RewardConfig {
            n0_policy: ZeroClaimPolicy::Failure,
            ..cfg
        };
        assert_eq!(score_rollout(&[], &[], &fail, None).unwrap().value, -1.0);
        let penalize = RewardConfig {
            penalize_below_min: true,
            ..cfg
        };
        assert_eq!(score_rollout(&[], &[], &penalize, Some(3)).unwrap().value, -1.0);
        // below the minimum even though every claim agrees
        let r = score_rollout(&[claim("1")], &[agreed("1")], &penalize, Some(3)).unwrap();
        assert_eq!(r.value, -1.0);
        // flag without a configured minimum has no effect
        assert_eq!(score_rollout(&[], &[], &penalize, None).unwrap().value, 0.0);
    }

    #[test]
    fn length_mismatch_is_error() {
        assert_eq!(
            score_rollout(&[claim("1")], &[], &RewardConfig::default(), None),
            Err(RewardError::LengthMismatch { claims: 1, consensus: 0 })
        );
    }

    #[test]
    fn tolerance_must_be_positive() {
        let cfg = RewardConfig {
            match_policy: MatchPolicy::RelativeTol(0.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    /// Straightforward re-statement used as an oracle.
    fn oracle(matches: &[bool]) -> (f64, f64, f64) {
        let mut wrong = 0;
        for m in matches {
            if !m {
                wrong += 1;
            }
        }
        let penalty = if wrong == 0 { 0.0 } else { -1.0 };
        let incentive = if wrong == 0 { 1.0 } else { 0.0 };
        let rate = if matches.is_empty() {
            0.0
        } else {
            -(wrong as f64 / matches.len() as f64)
        };
        (penalty, incentive, rate)
    }

    #[test]
    fn exhaustive_against_oracle() {
        for len in 1..=12usize {
            for bits in 0u32..(1 << len) {
                let v: Vec<bool> = (0..len).map(|i| bits >> i & 1 == 1).collect();
                let (p, i, r) = oracle(&v);
                assert_eq!(ztr(&v, ScalarVariant::PenaltyBased), p);
                assert_eq!(ztr(&v, ScalarVariant::IncentiveBased), i);
                assert_eq!(err(&v), r);
            }
        }
    }

    proptest! {
        #[test]
        fn flipping_a_match_never_helps(v in prop::collection::vec(any::<bool>(), 1..40), idx in any::<prop::sample::Index>()) {
            let i = idx.index(v.len());
            prop_assume!(v[i]);
            let mut worse = v.clone();
            worse[i] = false;
            for variant in [ScalarVariant::PenaltyBased, ScalarVariant::IncentiveBased] {
                prop_assert!(ztr(&worse, variant) <= ztr(&v, variant));
            }
            prop_assert!(err(&worse) <= err(&v));
        }

        #[test]
        fn extremes_agree(n in 1usize..50) {
            prop_assert_eq!(ztr(&vec![true; n], ScalarVariant::PenaltyBased), err(&vec![true; n]));
            prop_assert_eq!(ztr(&vec![false; n], ScalarVariant::PenaltyBased), err(&vec![false; n]));
        }
    }
}
