use proptest::prelude::*;

use rolldrop::env::{compute_reward, RewardInput, RewardWeights};
use rolldrop::harness::inject_noise_with;
use rolldrop::nn::{action_from_noise, gaussian_entropy, gaussian_log_prob};
use rolldrop::ppo::{clip_global_norm, clipped_surrogate, gae, normalize_advantages};
use rolldrop::rng::{RngStream, StreamId};

proptest! {
    #[test]
    fn noise_stays_inside_the_band(
        s in prop::collection::vec(-1e3f64..1e3, 1..40),
        n in 0.0f64..0.6,
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, 0, StreamId::ObsNoise);
        let u: Vec<f64> = s.iter().map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let mut out = s.clone();
        inject_noise_with(&mut out, n, &u).unwrap();
        for ((x, y), u) in s.iter().zip(&out).zip(&u) {
            prop_assert!((y - x).abs() <= n * x.abs() + f64::EPSILON * x.abs());
            prop_assert!((y - x * (1.0 + n * u)).abs() <= 4.0 * f64::EPSILON * x.abs());
        }
    }

    #[test]
    fn lambda_zero_is_one_step_td(
        r in prop::collection::vec(-5.0f64..5.0, 1..20),
        seed in any::<u64>(),
        gamma in 0.0f64..1.0,
    ) {
        let mut rng = RngStream::new(seed, 0, StreamId::Init);
        let n = r.len();
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.below(4) == 0).collect();
        let boot = rng.uniform_range(-3.0, 3.0);
        let (adv, _) = gae(&r, &v, &d, boot, gamma, 0.0).unwrap();
        for t in 0..n {
            let next = if d[t] { 0.0 } else if t + 1 < n { v[t + 1] } else { boot };
            prop_assert!((adv[t] - (r[t] + gamma * next - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_is_pessimistic(ratio in 0.0f64..3.0, adv in -5.0f64..5.0, clip in 0.05f64..0.5) {
        let s = clipped_surrogate(ratio, adv, clip);
        prop_assert!(s <= ratio * adv + 1e-15);
        prop_assert!(s <= ratio.clamp(1.0 - clip, 1.0 + clip) * adv + 1e-15);
        if (1.0 - clip..=1.0 + clip).contains(&ratio) {
            prop_assert_eq!(s, ratio * adv);
        }
    }

    #[test]
    fn normalised_advantages_are_standard(a in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let mut x = a.clone();
        normalize_advantages(&mut x);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-12);
        let spread = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - a.iter().cloned().fold(f64::INFINITY, f64::min);
        if spread > 1e-6 {
            let var = x.iter().map(|v| v * v).sum::<f64>() / n;
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn global_clip_bounds_the_norm(
        a in prop::collection::vec(-10.0f64..10.0, 1..30),
        b in prop::collection::vec(-10.0f64..10.0, 1..30),
        max in 0.1f64..5.0,
    ) {
        let (mut x, mut y) = (a.clone(), b.clone());
        let before = clip_global_norm(&mut x, &mut y, max);
        let norm = x.iter().chain(&y).map(|v| v * v).sum::<f64>().sqrt();
        let want = a.iter().chain(&b).map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((before - want).abs() <= 1e-12 * want.max(1.0));
        prop_assert!(norm <= max * (1.0 + 1e-12) || norm <= want * (1.0 + 1e-12) && want <= max);
    }

    #[test]
    fn gaussian_density_is_consistent(
        mean in prop::collection::vec(-2.0f64..2.0, 1..6),
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, 0, StreamId::ActionNoise);
        let log_std: Vec<f64> = mean.iter().map(|_| rng.uniform_range(-1.6, 0.5)).collect();
        let z: Vec<f64> = mean.iter().map(|_| rng.standard_normal()).collect();
        let (a, lp) = action_from_noise(&mean, &log_std, &z).unwrap();
        prop_assert!((gaussian_log_prob(&mean, &log_std, &a).unwrap() - lp).abs() < 1e-12);
        let at_mean = gaussian_log_prob(&mean, &log_std, &mean).unwrap();
        prop_assert!(lp <= at_mean + 1e-12);
        // the entropy equals minus the expected log density: E[z^2] = 1
        let expected = -(at_mean - 0.5 * mean.len() as f64);
        prop_assert!((gaussian_entropy(&log_std) - expected).abs() < 1e-12);
    }

    #[test]
    fn floored_reward_total_is_never_negative(
        pitch in -1.0f64..1.0, vx in -2.0f64..2.0, cmd in -1.0f64..1.0, rate in -3.0f64..3.0,
    ) {
        let w = RewardWeights::default();
        let terms = compute_reward(
            &RewardInput {
                pitch,
                vx,
                pitch_rate: rate,
                cmd_vx: cmd,
                cmd_pitch_rate: 0.0,
                prev_target: [0.0; 4],
                target: [0.3; 4],
                foot_height: [0.05, 0.0],
                foot_contact: [false, true],
                foot_vx: [0.2, 0.1],
                q: [0.1; 4],
                q_nominal: [0.0; 4],
                qd: [1.0; 4],
                torque: [3.0; 4],
                touchdown_air_time: [None, None],
            },
            &w,
        );
        prop_assert!(w.total(&terms) >= 0.0);
        let raw = RewardWeights { only_positive_total: false, ..w.clone() };
        prop_assert!(raw.total(&terms) <= w.total(&terms));
    }
}

#[test]
fn stream_words_are_a_pure_function_of_their_coordinates() {
    let mut a = RngStream::new(77, 3, StreamId::Dropout);
    let words: Vec<u64> = (0..50).map(|_| a.next_u64()).collect();
    for (k, w) in words.iter().enumerate() {
        assert_eq!(RngStream::at(77, 3, StreamId::Dropout, k as u64).next_u64(), *w);
    }
    let others = [
        RngStream::new(77, 4, StreamId::Dropout).next_u64(),
        RngStream::new(77, 3, StreamId::ActionNoise).next_u64(),
        RngStream::new(78, 3, StreamId::Dropout).next_u64(),
    ];
    assert!(others.iter().all(|o| *o != words[0]));
}
