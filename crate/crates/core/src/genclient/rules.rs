//! Deterministic rule-based generator with closed-form output probabilities.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenError, TextGenerator};
use crate::seq::{is_subsequence, SubSeq, TokenId, TokenSeq};

/// Rules whose firing is random are enumerated exhaustively; beyond this many
/// the pattern count is too large.
pub const MAX_ENUMERATED_RULES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub trigger: SubSeq,
    pub emission: SubSeq,
    pub prob: f64,
}

impl Rule {
    pub fn new(trigger: impl Into<SubSeq>, emission: impl Into<SubSeq>, prob: f64) -> Self {
        Self {
            trigger: trigger.into(),
            emission: emission.into(),
            prob,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    FirstMatch,
    IndependentOr,
}

/// A generator that emits fixed token strings when trigger subsequences are
/// present in the input.
///
/// Every call draws exactly one uniform per rule in rule order, whether or not
/// the rule is triggered, so the draw for rule `i` depends only on the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleGenerator {
    pub rules: Vec<Rule>,
    pub base_emission: SubSeq,
    pub combine: Combine,
}

impl RuleGenerator {
    pub fn new(rules: Vec<Rule>, base_emission: impl Into<SubSeq>, combine: Combine) -> Self {
        Self {
            rules,
            base_emission: base_emission.into(),
            combine,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        for (i, r) in self.rules.iter().enumerate() {
            if !(0.0..=1.0).contains(&r.prob) {
                return Err(GenError::InvalidRule(format!("rule {i} has prob {} outside [0,1]", r.prob)));
            }
        }
        Ok(())
    }

    /// Indices of the rules allowed to fire on `input`.
    fn eligible(&self, input: &[TokenId]) -> Vec<usize> {
        let mut hits = self
            .rules
            .iter()
            .enumerate()
            .filter(|(_, r)| is_subsequence(&r.trigger, input))
            .map(|(i, _)| i);
        match self.combine {
            Combine::IndependentOr => hits.collect(),
            Combine::FirstMatch => hits.next().into_iter().collect(),
        }
    }

    fn render(&self, fired: impl Iterator<Item = usize>) -> TokenSeq {
        let mut out = Vec::new();
        let mut any = false;
        for i in fired {
            any = true;
            out.extend_from_slice(&self.rules[i].emission);
        }
        if !any {
            out.extend_from_slice(&self.base_emission);
        }
        TokenSeq(out)
    }

    /// Sample an output for `input`; a pure function of `(self, input, seed)`.
    pub fn mock_generate(&self, input: &[TokenId], seed: u64) -> TokenSeq {
        let mut rng = crate::rng_from_seed(seed);
        let draws: Vec<f64> = self.rules.iter().map(|_| rng.random::<f64>()).collect();
        let eligible = self.eligible(input);
        self.render(eligible.into_iter().filter(|&i| draws[i] < self.rules[i].prob))
    }

    /// Exact probability over seeds that `target ⊑ mock_generate(input, ·)`.
    pub fn exact_output_prob(&self, input: &[TokenId], target: &[TokenId]) -> Result<f64, GenError> {
        let eligible = self.eligible(input);
        let sure: Vec<usize> = eligible.iter().copied().filter(|&i| self.rules[i].prob >= 1.0).collect();
        let random: Vec<usize> = eligible
            .iter()
            .copied()
            .filter(|&i| self.rules[i].prob > 0.0 && self.rules[i].prob < 1.0)
            .collect();
        if random.len() > MAX_ENUMERATED_RULES {
            return Err(GenError::TooManyRules(random.len()));
        }
        let mut total = 0.0;
        for mask in 0u32..(1u32 << random.len()) {
            let mut weight = 1.0;
            let mut fired = sure.clone();
            for (bit, &i) in random.iter().enumerate() {
                let p = self.rules[i].prob;
                if mask >> bit & 1 == 1 {
                    weight *= p;
                    fired.push(i);
                } else {
                    weight *= 1.0 - p;
                }
            }
            fired.sort_unstable();
            if is_subsequence(target, &self.render(fired.into_iter())) {
                total += weight;
            }
        }
        Ok(total)
    }
}

impl TextGenerator for RuleGenerator {
    fn generate(&self, input: &[TokenId], seed: u64) -> Result<TokenSeq, GenError> {
        Ok(self.mock_generate(input, seed))
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("rule generator serializes");
        format!("rules:{}", hex::encode(Sha256::digest(json)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = 1;
    const B: TokenId = 2;
    const X: TokenId = 10;
    const Y: TokenId = 11;
    const BASE: TokenId = 99;

    fn one_rule(p: f64) -> RuleGenerator {
        RuleGenerator::new(vec![Rule::new([A, B], [X], p)], [BASE], Combine::IndependentOr)
    }

    #[test]
    fn untriggered_gives_base() {
        let g = one_rule(1.0);
        assert_eq!(g.mock_generate(&[B, A], 7), TokenSeq::from([BASE]));
    }

    #[test]
    fn sure_rule_fires() {
        let g = one_rule(1.0);
        assert_eq!(g.mock_generate(&[A, 5, B], 7), TokenSeq::from([X]));
    }

    #[test]
    fn firing_frequency_matches_prob() {
        let g = one_rule(0.9);
        let n = 10_000u64;
        let hits = (0..n).filter(|&s| g.mock_generate(&[A, B], s).contains(&X)).count();
        let freq = hits as f64 / n as f64;
        // 3 sigma at n = 10,000 is 0.009, inside the 0.01 tolerance.
        assert!((freq - 0.9).abs() <= 0.01, "freq {freq}");
    }

    #[test]
    fn exact_prob_simple_cases() {
        let g = one_rule(0.3);
        assert_eq!(g.exact_output_prob(&[A], &[BASE]).unwrap(), 1.0);
        assert!((g.exact_output_prob(&[A, B], &[X]).unwrap() - 0.3).abs() < 1e-15);
        assert!((g.exact_output_prob(&[A, B], &[BASE]).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_rules_same_target_token() {
        let (p, q) = (0.35, 0.6);
        let g = RuleGenerator::new(
            vec![Rule::new([A], [X], p), Rule::new([B], [Y, X], q)],
            [BASE],
            Combine::IndependentOr,
        );
        let exact = g.exact_output_prob(&[A, B], &[X]).unwrap();
        assert!((exact - (1.0 - (1.0 - p) * (1.0 - q))).abs() < 1e-15);

        let n = 1_000_000u64;
        let hits = (0..n).filter(|&s| g.mock_generate(&[A, B], s).contains(&X)).count();
        let freq = hits as f64 / n as f64;
        let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((freq - exact).abs() <= 4.0 * sigma, "freq {freq} exact {exact}");
    }

    #[test]
    fn first_match_only_uses_first_triggered_rule() {
        let g = RuleGenerator::new(
            vec![Rule::new([A], [X], 0.5), Rule::new([B], [Y], 1.0)],
            [BASE],
            Combine::FirstMatch,
        );
        assert!((g.exact_output_prob(&[A, B], &[Y]).unwrap()).abs() < 1e-15);
        assert!((g.exact_output_prob(&[A, B], &[BASE]).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(g.exact_output_prob(&[B], &[Y]).unwrap(), 1.0);
    }

    #[test]
    fn emissions_concatenate_in_rule_order() {
        let g = RuleGenerator::new(
            vec![Rule::new([A], [X], 1.0), Rule::new([B], [Y], 1.0)],
            [BASE],
            Combine::IndependentOr,
        );
        assert_eq!(g.mock_generate(&[B, A], 0), TokenSeq::from([X, Y]));
        assert_eq!(g.exact_output_prob(&[A, B], &[X, Y]).unwrap(), 1.0);
        assert_eq!(g.exact_output_prob(&[A, B], &[Y, X]).unwrap(), 0.0);
    }

    #[test]
    fn too_many_random_rules() {
        let rules = (0..21).map(|_| Rule::new([A], [X], 0.5)).collect();
        let g = RuleGenerator::new(rules, [BASE], Combine::IndependentOr);
        assert!(matches!(g.exact_output_prob(&[A], &[X]), Err(GenError::TooManyRules(21))));
    }

    fn gen_strategy() -> impl Strategy<Value = RuleGenerator> {
        let rule = (
            prop::collection::vec(0u32..4, 1..3),
            prop::collection::vec(10u32..13, 1..3),
            prop::sample::select(vec![0.0, 0.25, 0.5, 0.8, 1.0]),
        )
            .prop_map(|(t, e, p)| Rule::new(t, e, p));
        (
            prop::collection::vec(rule, 0..4),
            prop::collection::vec(10u32..13, 0..2),
            any::<bool>(),
        )
            .prop_map(|(rules, base, fm)| {
                RuleGenerator::new(rules, base, if fm { Combine::FirstMatch } else { Combine::IndependentOr })
            })
    }

    proptest! {
        #[test]
        fn mock_is_pure(g in gen_strategy(), input in prop::collection::vec(0u32..4, 0..8), seed in any::<u64>()) {
            prop_assert_eq!(g.mock_generate(&input, seed), g.mock_generate(&input, seed));
        }

        #[test]
        fn exact_prob_agrees_with_sampling(
            g in gen_strategy(),
            input in prop::collection::vec(0u32..4, 0..8),
            target in prop::collection::vec(10u32..13, 0..3),
        ) {
            let exact = g.exact_output_prob(&input, &target).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&exact));
            let n = 4000u64;
            let hits = (0..n).filter(|&s| is_subsequence(&target, &g.mock_generate(&input, s))).count();
            let freq = hits as f64 / n as f64;
            let sigma = (exact * (1.0 - exact) / n as f64).sqrt();
            prop_assert!((freq - exact).abs() <= 5.0 * sigma + 1e-12, "freq {} exact {}", freq, exact);
        }
    }
}
