use super::*;
use crate::rng::substream;

fn config(profile: SupertypeProfile) -> EpisodeConfig {
    let mut c = EpisodeConfig::new(profile, EcnModel::synthetic(3));
    c.horizon = 30;
    c.seed = 11;
    c
}

fn quoting(spread: f64, skew: f64, hedge: f64) -> FixedLp {
    FixedLp(LpAction { spread, skew, hedge })
}

#[test]
fn seeded_episode_is_reproducible() {
    let c = config(desk_profile(1.0, 4, 1));
    let a = run_episode_seeded(&c, &quoting(0.0, 0.0, 0.2), &StationaryLt::default(), 5).unwrap();
    let b = run_episode_seeded(&c, &quoting(0.0, 0.0, 0.2), &StationaryLt::default(), 5).unwrap();
    assert_eq!(a.hash(), b.hash());
    assert_eq!(a, b);
    let other = run_episode_seeded(&c, &quoting(0.0, 0.0, 0.2), &StationaryLt::default(), 6).unwrap();
    assert_ne!(a.hash(), other.hash());
    let mut rng = substream(1, "x", 0);
    let mut rng2 = substream(1, "x", 0);
    assert_eq!(
        run_episode(&c, &quoting(0.0, 0.0, 0.0), &StationaryLt::default(), &mut rng).unwrap(),
        run_episode(&c, &quoting(0.0, 0.0, 0.0), &StationaryLt::default(), &mut rng2).unwrap()
    );
}

#[test]
fn batch_matches_sequential_runs() {
    let c = config(desk_profile(1.0, 3, 1));
    let batch = run_batch(&c, &quoting(0.0, 0.0, 0.0), &StationaryLt::default(), 4, 3).unwrap();
    for (b, t) in batch.iter().enumerate() {
        let seed = substream_seed(c.seed, "episode", 4 + b as u64);
        assert_eq!(*t, run_episode_seeded(&c, &quoting(0.0, 0.0, 0.0), &StationaryLt::default(), seed).unwrap());
    }
}

#[test]
fn flow_is_conserved_and_shares_sum_to_one() {
    let c = config(desk_profile(0.5, 6, 2));
    for seed in 0..4 {
        let tr = run_episode_seeded(&c, &quoting(-0.5, 0.1, 0.3), &StationaryLt::default(), seed).unwrap();
        assert_eq!(tr.horizon(), c.horizon);
        for (t, s) in tr.steps.iter().enumerate() {
            let lp_flow: u64 = tr.lp.iter().map(|l| l[t].flow_ask + l[t].flow_bid).sum();
            let lt_filled: u64 = tr.lt.iter().map(|l| l[t].filled).sum();
            assert_eq!(lp_flow + s.ecn_lt_volume, lt_filled);
            assert_eq!(lt_filled, s.lt_volume);
            if let Some(e) = s.ecn_share {
                let total: f64 = tr.lp.iter().map(|l| l[t].share.unwrap()).sum::<f64>() + e;
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(tr.lp.iter().flatten().all(|s| s.reward.is_finite()));
        assert!(tr.lt.iter().flatten().all(|s| s.reward.is_finite()));
    }
}

#[test]
fn ledgers_mark_to_final_mid() {
    let c = config(desk_profile(1.0, 5, 2));
    let tr = run_episode_seeded(&c, &quoting(0.0, -0.2, 0.5), &StationaryLt::default(), 3).unwrap();
    let last = tr.steps.last().unwrap().next_mid;
    for l in tr.lp_ledgers.iter().chain(&tr.lt_ledgers) {
        assert!((l.total() - l.mark_to_market(last)).abs() < 1e-9);
    }
    for (i, l) in tr.lp_ledgers.iter().enumerate() {
        let pnl: f64 = tr.lp[i].iter().map(|s| s.pnl.total()).sum();
        assert!((pnl - l.total()).abs() < 1e-9);
    }
}

#[test]
fn without_takers_lps_do_nothing() {
    let c = config(desk_profile(1.0, 0, 0));
    let tr = run_episode_seeded(&c, &quoting(0.0, 0.0, 1.0), &StationaryLt::default(), 2).unwrap();
    for l in &tr.lp_ledgers {
        assert_eq!(l.inventory, 0);
        assert_eq!(l.total(), 0.0);
    }
    assert!(tr.steps.iter().all(|s| s.ecn_share.is_none()));
}

#[test]
fn wide_lp_loses_all_flow_to_ecn() {
    let c = config(desk_profile(1.0, 6, 0));
    let tr = run_episode_seeded(&c, &quoting(10.0, 0.0, 0.0), &StationaryLt::default(), 9).unwrap();
    assert!(tr.steps.iter().any(|s| s.lt_volume > 0));
    for l in &tr.lp {
        assert!(l.iter().all(|s| s.flow_ask == 0 && s.flow_bid == 0));
        assert_eq!(l.last().unwrap().avg_share, 0.0);
    }
}

#[test]
fn tight_lp_takes_all_flow() {
    let c = config(desk_profile(1.0, 6, 0));
    let tr = run_episode_seeded(&c, &quoting(-1.0, 0.0, 0.0), &StationaryLt::default(), 9).unwrap();
    assert!(tr.steps.iter().all(|s| s.ecn_lt_volume == 0));
    let share: f64 = tr.lp.iter().map(|l| l.last().unwrap().avg_share).sum();
    assert!((share - 1.0).abs() < 1e-12);
}

#[test]
fn out_of_range_actions_are_clamped_and_counted() {
    let c = config(desk_profile(1.0, 2, 0));
    let tr = run_episode_seeded(&c, &quoting(-3.0, 0.0, 1.5), &StationaryLt::default(), 1).unwrap();
    assert_eq!(tr.clamped_actions, c.horizon * 3);
    assert!(tr.lp[0].iter().all(|s| s.action.spread == -1.0 && s.action.hedge == 1.0));
}

#[test]
fn hedges_oppose_inventory() {
    let mut c = config(desk_profile(1.0, 6, 2));
    for timing in [HedgeTiming::BeforeTrades, HedgeTiming::AfterTrades] {
        c.hedge_timing = timing;
        let tr = run_episode_seeded(&c, &quoting(-1.0, 0.0, 1.0), &StationaryLt::default(), 4).unwrap();
        assert_eq!(tr.hedge_timing, timing);
        let mut hedged = 0;
        for l in &tr.lp {
            for s in l {
                if s.hedge_qty != 0 {
                    hedged += 1;
                    assert_eq!(s.hedge_qty, -s.obs.inventory);
                }
            }
        }
        assert!(hedged > 0);
    }
}

#[test]
fn routing_picks_best_price() {
    let mut rng = substream(0, "route", 0);
    let lps = [(0, 100.3), (1, 100.2)];
    assert_eq!(route_trade(Direction::Buy, &lps, Some(100.25), &mut rng), Some((Venue::Lp(1), 100.2)));
    assert_eq!(route_trade(Direction::Sell, &lps, Some(100.25), &mut rng), Some((Venue::Lp(0), 100.3)));
    assert_eq!(route_trade(Direction::Buy, &[], Some(100.25), &mut rng), Some((Venue::Ecn, 100.25)));
    assert_eq!(route_trade(Direction::Buy, &[], None, &mut rng), None);
}

#[test]
fn ties_split_evenly() {
    let mut rng = substream(0, "ties", 0);
    let n = 20_000;
    let first = (0..n)
        .filter(|_| route_trade(Direction::Buy, &[(0, 1.0), (1, 1.0)], Some(1.1), &mut rng).unwrap().0 == Venue::Lp(0))
        .count();
    let p = first as f64 / n as f64;
    let se = (0.25 / n as f64).sqrt();
    assert!((p - 0.5).abs() < 4.0 * se, "{p}");
}

#[test]
fn swapping_identical_supertypes_keeps_returns() {
    let mut profile = desk_profile(1.0, 4, 2);
    profile.lp = vec![
        (LpSupertype::point("a", 0.5, 1e4, 1.0, vec![1.0, 1.0]), 1),
        (LpSupertype::point("b", 0.5, 1e4, 1.0, vec![1.0, 1.0]), 1),
    ];
    let c = config(profile.clone());
    profile.lp.swap(0, 1);
    let c2 = config(profile);
    let policy = quoting(0.0, 0.0, 0.5);
    let sorted = |tr: &Trajectory| {
        let mut v: Vec<f64> = (0..tr.lp.len()).map(|i| tr.lp_return(i)).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let a = run_episode_seeded(&c, &policy, &StationaryLt::default(), 8).unwrap();
    let b = run_episode_seeded(&c2, &policy, &StationaryLt::default(), 8).unwrap();
    assert_eq!(sorted(&a), sorted(&b));
}

#[test]
fn disconnected_takers_trade_on_ecn() {
    let mut profile = desk_profile(1.0, 4, 0);
    profile.lt[0].0.connectivity = vec![0.0, 0.0];
    let c = config(profile);
    let tr = run_episode_seeded(&c, &quoting(-1.0, 0.0, 0.0), &StationaryLt::default(), 8).unwrap();
    assert!(tr.lt.iter().flatten().all(|s| s.venue.is_none() || s.venue == Some(Venue::Ecn)));
}

#[test]
fn always_buying_keeps_target_distance_constant() {
    let c = config(desk_profile(1.0, 2, 0));
    let tr = run_episode_seeded(&c, &quoting(0.0, 0.0, 0.0), &FixedLt(LtAction::Buy), 0).unwrap();
    for l in &tr.lt {
        assert!(l.iter().all(|s| s.reward.abs() < 1e-15));
    }
}

#[test]
fn csv_has_one_row_per_agent_step() {
    let c = config(desk_profile(1.0, 2, 1));
    let tr = run_episode_seeded(&c, &quoting(0.0, 0.0, 0.0), &StationaryLt::default(), 0).unwrap();
    let csv = tr.to_csv(7);
    assert_eq!(csv.lines().count(), 1 + c.horizon * 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("7,0,0,lp,"));
}

#[test]
fn mid_has_no_drift_without_traders() {
    let mut c = config(desk_profile(1.0, 0, 0));
    c.horizon = 100;
    let moves: Vec<f64> = run_batch(&c, &quoting(0.0, 0.0, 0.0), &StationaryLt::default(), 0, 100)
        .unwrap()
        .iter()
        .map(|t| (t.steps.last().unwrap().next_mid - t.steps[0].mid) / 1e-4)
        .collect();
    let n = moves.len() as f64;
    let mean = moves.iter().sum::<f64>() / n;
    let sd = (moves.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * sd / n.sqrt(), "mean move {mean} ticks, sd {sd}");
}

#[test]
fn supertype_policy_dispatches() {
    let p = SupertypeLt(vec![StationaryLt { buy: 1.0, sell: 0.0 }, StationaryLt { buy: 0.0, sell: 1.0 }]);
    let c = config(desk_profile(1.0, 2, 2));
    let t = run_episode_seeded(&c, &quoting(0.0, 0.0, 0.0), &p, 3).unwrap();
    for (k, ty) in t.population.lt.iter().enumerate() {
        let want = if ty.supertype == 0 { LtAction::Buy } else { LtAction::Sell };
        assert!(t.lt[k].iter().all(|s| s.action == want));
    }
}

#[test]
fn episodes_satisfy_accounting_invariants() {
    let mut c = EpisodeConfig::new(desk_profile(0.5, 6, 2), EcnModel::synthetic(3));
    c.horizon = 30;
    let lp = FixedLp(LpAction {
        spread: 0.0,
        skew: 0.2,
        hedge: 0.5,
    });
    for seed in 0..5 {
        let mut t = run_episode_seeded(&c, &lp, &StationaryLt::default(), seed).unwrap();
        t.check_invariants().unwrap();
        if let Some(s) = t.lp[0].iter_mut().find(|s| s.flow_ask > 0) {
            s.flow_ask += 1;
            assert_eq!(t.check_invariants().unwrap_err().id, "sim.flow_conservation");
        }
    }
}
