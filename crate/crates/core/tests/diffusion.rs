use ppg_core::diffusion::*;
use ppg_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn schedule(t: usize, k: usize) -> DiffusionSchedule {
    DiffusionSchedule::new(t, k, ScheduleKind::LinearMask).unwrap()
}

#[test]
fn posterior_matches_matrix_oracle_everywhere() {
    let start = std::time::Instant::now();
    let mut compared = 0;
    for k in [2, 3, 5] {
        for tm in [4, 10] {
            let s = schedule(tm, k);
            for t in 1..=tm {
                for z_t in 0..=k {
                    for z0 in 0..=k {
                        match (s.posterior(z_t, z0, t), s.posterior_oracle(z_t, z0, t)) {
                            (Ok(fast), Ok(slow)) => {
                                for (a, b) in fast.iter().zip(&slow) {
                                    assert!((a - b).abs() <= 1e-10, "K={k} T={tm} t={t} z_t={z_t} z0={z0}: {a} vs {b}");
                                }
                                assert!((fast.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                                compared += 1;
                            }
                            (Err(Error::ImpossiblePair { .. }), Err(Error::ImpossiblePair { .. })) => {}
                            (a, b) => panic!("routes disagree at K={k} T={tm} t={t} z_t={z_t} z0={z0}: {a:?} / {b:?}"),
                        }
                    }
                }
            }
        }
    }
    assert!(compared > 500);
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn cumulative_columns_sum_to_one() {
    for k in [2, 3, 5, 64] {
        for tm in [4, 10, 20, 100] {
            let s = schedule(tm, k);
            for t in 1..=tm {
                for (j, c) in s.cumulative_matrix(t).unwrap().column_sums().iter().enumerate() {
                    assert!((c - 1.0).abs() <= 1e-12, "K={k} T={tm} t={t} column {j}: {c}");
                }
                for c in s.transition_matrix(t).unwrap().column_sums() {
                    assert!((c - 1.0).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn cumulative_equals_product_of_steps() {
    let s = schedule(10, 5);
    let mut acc = TransitionMatrix::identity(5);
    for t in 1..=10 {
        acc = s.transition_matrix(t).unwrap().matmul(&acc);
        let cum = s.cumulative_matrix(t).unwrap();
        for (a, b) in acc.entries.iter().zip(&cum.entries) {
            assert!((a - b).abs() < 1e-13);
        }
    }
}

#[test]
fn mask_mass_is_linear_in_t() {
    for (tm, k) in [(4, 2), (10, 3), (20, 4), (20, 64), (100, 64)] {
        let s = schedule(tm, k);
        for t in 0..=tm {
            let (_, _, g) = s.cum_coeffs(t).unwrap();
            assert!((g - t as f64 / tm as f64).abs() <= 1e-9, "T={tm} t={t}: {g}");
        }
    }
}

#[test]
fn final_step_absorbs_every_draw() {
    let s = schedule(20, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..100_000 {
        assert_eq!(s.forward_sample(i % 64, 20, &mut rng).unwrap(), 64);
    }
}

#[test]
fn forward_sample_frequencies_match_cumulative_column() {
    let s = schedule(10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 200_000;
    for t in [1, 4, 7] {
        let mut counts = [0usize; 6];
        for _ in 0..n {
            counts[s.forward_sample(2, t, &mut rng).unwrap()] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let p = s.q_cum(t, i, 2);
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!(((*c as f64 / n as f64) - p).abs() <= 4.0 * se + 1e-12, "t={t} state {i}: {c} vs {p}");
        }
    }
}

#[test]
fn t_zero_sample_is_clean() {
    let s = schedule(10, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for z in 0..5 {
        assert_eq!(s.forward_sample(z, 0, &mut rng).unwrap(), z);
    }
    assert!(s.forward_sample(5, 3, &mut rng).is_err());
    assert!(s.forward_sample(0, 11, &mut rng).is_err());
}

#[test]
fn unmasked_z_t_pins_the_previous_state() {
    // once a token is visible it was visible at every earlier step
    // (at t = T every token is MASK, so a visible z_T has no posterior)
    assert!(matches!(schedule(10, 5).posterior(3, 3, 10), Err(Error::ImpossiblePair { .. })));
    let s = schedule(10, 5);
    for t in 2..10 {
        let p = s.posterior(3, 3, t).unwrap();
        assert!(p[5] == 0.0);
    }
    // from MASK, the non-z0 regular states share one probability
    let p = s.posterior(5, 1, 6).unwrap();
    for i in [0, 2, 3, 4] {
        assert!((p[i] - p[0]).abs() < 1e-15, "state {i}: {}", p[i]);
    }
    assert!(p[1] > p[0] && p[5] > p[1]);
}

#[test]
fn t_one_posterior_is_the_clean_token() {
    let s = schedule(10, 5);
    for z_t in 0..=5 {
        let p = s.posterior(z_t, 2, 1);
        if let Ok(p) = p {
            assert_eq!(p[2], 1.0);
        }
    }
}

#[test]
fn reverse_step_marginalizes_the_posterior() {
    let s = schedule(10, 5);
    let p0 = [0.1, 0.2, 0.3, 0.15, 0.25];
    let mut out = vec![0.0; 6];
    reverse_step_distribution(&s, 5, 6, &p0, &mut out).unwrap();
    let mut expect = vec![0.0; 6];
    let mut norm = 0.0;
    for (z0, w) in p0.iter().enumerate() {
        let ev = s.q_cum(6, 5, z0);
        let post = s.posterior(5, z0, 6).unwrap();
        for i in 0..6 {
            expect[i] += w * ev * post[i];
        }
        norm += w * ev;
    }
    for (a, b) in out.iter().zip(&expect) {
        assert!((a - b / norm).abs() < 1e-12);
    }
}

#[test]
fn from_steps_reproduces_linear_mask() {
    let s = schedule(10, 5);
    let steps: Vec<_> = (1..=10).map(|t| s.step_coeffs(t).unwrap()).collect();
    let r = DiffusionSchedule::from_steps(5, &steps).unwrap();
    for t in 0..=10 {
        let (a, b, g) = s.cum_coeffs(t).unwrap();
        let (x, y, z) = r.cum_coeffs(t).unwrap();
        assert!((a - x).abs() < 1e-12 && (b - y).abs() < 1e-12 && (g - z).abs() < 1e-12);
    }
    assert!(DiffusionSchedule::from_steps(5, &[(0.5, 0.5, 0.5)]).is_err());
}

#[test]
fn csv_has_one_row_per_step() {
    let s = schedule(10, 5);
    let mut buf = Vec::new();
    s.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 11);
    assert_eq!(lines[0], "t,alpha,beta,gamma,cum_alpha,cum_gamma");
    let last: Vec<f64> = lines[10].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 10.0);
    assert!((last[5] - 1.0).abs() < 1e-15);
}

#[test]
fn degenerate_schedules_are_rejected() {
    assert!(DiffusionSchedule::new(0, 5, ScheduleKind::LinearMask).is_err());
    assert!(DiffusionSchedule::new(10, 1, ScheduleKind::LinearMask).is_err());
    assert!(schedule(10, 5).posterior(0, 0, 0).is_err());
    assert!(schedule(10, 5).posterior(0, 0, 11).is_err());
}
