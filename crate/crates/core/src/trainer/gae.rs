//! Generalized advantage estimation for terminal-reward trajectories.

use super::TrainError;

/// Per-token rewards with `reward` on the last token and zeros elsewhere.
pub fn terminal_rewards(len: usize, reward: f64) -> Vec<f64> {
    let mut r = vec![0.0; len];
    if let Some(last) = r.last_mut() {
        *last = reward;
    }
    r
}

/// `delta_t = r_t + gamma * V_{t+1} - V_t` with `V_T = 0`, then
/// `A_t = delta_t + gamma * lambda * A_{t+1}`; returns are `A_t + V_t`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    if rewards.is_empty() {
        return Err(TrainError::EmptyTrajectory);
    }
    if rewards.len() != values.len() {
        return Err(TrainError::LengthMismatch {
            what: "values",
            expected: rewards.len(),
            got: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = rewards[t] + gamma * next_v - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Normalizes all advantages of a batch jointly to zero mean and unit
/// standard deviation.
pub fn whiten(advantages: &mut [Vec<f64>]) {
    let n: usize = advantages.iter().map(Vec::len).sum();
    if n == 0 {
        return;
    }
    let mean = advantages.iter().flatten().sum::<f64>() / n as f64;
    let var = advantages.iter().flatten().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = 1.0 / (var.sqrt() + 1e-8);
    for a in advantages.iter_mut().flatten() {
        *a = (*a - mean) * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct definition: `A_t = sum_l (gamma lambda)^l delta_{t+l}`.
    fn brute(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = rewards.len();
        let v = |t: usize| if t < n { values[t] } else { 0.0 };
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| {
                        let delta = rewards[k] + gamma * v(k + 1) - v(k);
                        (gamma * lambda).powi((k - t) as i32) * delta
                    })
                    .sum()
            })
            .collect()
    }

    #[test]
    fn single_token() {
        for (g, l) in [(0.998, 0.95), (1.0, 1.0), (0.5, 0.0)] {
            let (a, r) = compute_gae(&[-1.0], &[0.0], g, l).unwrap();
            assert_eq!((a[0], r[0]), (-1.0, -1.0));
        }
    }

    #[test]
    fn telescoping_with_zero_values() {
        let (a, r) = compute_gae(&terminal_rewards(7, 0.3), &[0.0; 7], 1.0, 1.0).unwrap();
        assert!(a.iter().all(|&x| x == 0.3));
        assert_eq!(a, r);
    }

    #[test]
    fn hand_checked_length_three() {
        let (g, l) = (0.998, 0.95);
        let v = [0.1, 0.2, 0.3];
        let (a, _) = compute_gae(&terminal_rewards(3, -1.0), &v, g, l).unwrap();
        let d2 = -1.0 - 0.3;
        let d1 = g * 0.3 - 0.2;
        let d0 = g * 0.2 - 0.1;
        let expect = [d0 + g * l * d1 + (g * l).powi(2) * d2, d1 + g * l * d2, d2];
        for (x, y) in a.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.iter().zip(brute(&terminal_rewards(3, -1.0), &v, g, l)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(compute_gae(&[], &[], 1.0, 1.0), Err(TrainError::EmptyTrajectory)));
        assert!(compute_gae(&[1.0], &[1.0, 2.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn whitening_is_joint() {
        let mut a = vec![vec![1.0, 2.0], vec![3.0], vec![4.0, 5.0, 6.0]];
        whiten(&mut a);
        let flat: Vec<f64> = a.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / 6.0;
        let var = flat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-6);
        let mut same = vec![vec![2.0; 3]];
        whiten(&mut same);
        assert_eq!(same, vec![vec![0.0; 3]]);
    }

    proptest! {
        #[test]
        fn matches_definition(
            len in 1usize..=64,
            reward in -1.0f64..1.0,
            seed_values in proptest::collection::vec(-2.0f64..2.0, 64),
            gamma in 0.5f64..=1.0,
            lambda in 0.0f64..=1.0,
        ) {
            let values = &seed_values[..len];
            let rewards = terminal_rewards(len, reward);
            let (a, r) = compute_gae(&rewards, values, gamma, lambda).unwrap();
            for (x, y) in a.iter().zip(brute(&rewards, values, gamma, lambda)) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            for t in 0..len {
                prop_assert!((r[t] - a[t] - values[t]).abs() <= 1e-12);
            }
        }
    }
}
