use proptest::prelude::*;

use twinsync::baselines::{fixed_interval_schedule, interval_cost, polling_schedule, FixedInterval, Polling, Scheduler};
use twinsync::env::{Action, Observation};
use twinsync::traces::{DeviceKind, DeviceProfile};

fn profile(id: usize, w: f64, b: u32) -> DeviceProfile {
    DeviceProfile {
        id,
        kind: DeviceKind::ThermoHygro,
        priority_w: w,
        rb_cost_b: b,
        threshold_xi: 0.01,
        payload_bits: 2000,
        tx_power_w: 0.5,
        distance_m: 100.0,
    }
}

fn served(a: &Action) -> Vec<usize> {
    a.0.iter().enumerate().filter(|(_, &u)| u).map(|(i, _)| i + 1).collect()
}

#[test]
fn polling_hand_simulation() {
    let ps: Vec<_> = (0..3).map(|i| profile(i, 0.1, 1)).collect();
    let mut pointer = 0;
    let mut seen = Vec::new();
    for _ in 0..3 {
        let (a, p) = polling_schedule(&ps, 2, pointer);
        seen.push(served(&a));
        pointer = p;
    }
    assert_eq!(seen, [vec![1, 2], vec![1, 3], vec![2, 3]]);
}

/// Every assignment of `candidates` to devices, checked with exact integer
/// budget arithmetic.
fn exhaustive(ps: &[DeviceProfile], change: &[f64], budget: u32, candidates: &[usize]) -> Option<f64> {
    let lcm = 720; // divisible by every candidate used below
    let n = ps.len();
    let mut best: Option<f64> = None;
    let mut idx = vec![0usize; n];
    loop {
        let used: usize = (0..n).map(|i| ps[i].rb_cost_b as usize * lcm / candidates[idx[i]]).sum();
        if used <= budget as usize * lcm {
            let obj: f64 = (0..n).map(|i| interval_cost(&ps[i], change[i], candidates[idx[i]])).sum();
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
        let mut k = 0;
        loop {
            if k == n {
                return best;
            }
            idx[k] += 1;
            if idx[k] < candidates.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn dp_matches_exhaustive_enumeration(
        devices in prop::collection::vec((0.01f64..1.0, 1u32..4, 0.0f64..2.0), 1..5),
        budget in 1u32..8,
    ) {
        let candidates = [1usize, 2, 3, 4, 6, 8];
        let ps: Vec<_> = devices.iter().enumerate().map(|(i, d)| profile(i, d.0, d.1)).collect();
        let change: Vec<f64> = devices.iter().map(|d| d.2).collect();
        let dp = fixed_interval_schedule(&ps, budget, &change, &candidates);
        match exhaustive(&ps, &change, budget, &candidates) {
            None => prop_assert!(dp.is_err()),
            Some(best) => {
                let plan = dp.unwrap();
                prop_assert!((plan.objective - best).abs() <= 1e-12 * best.max(1.0));
                let use_: f64 = ps.iter().zip(&plan.periods).map(|(p, &t)| p.rb_cost_b as f64 / t as f64).sum();
                prop_assert!(use_ <= budget as f64 + 1e-12);
                prop_assert!((use_ - plan.consumption).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baselines_never_exceed_the_budget(
        devices in prop::collection::vec((0.01f64..1.0, 1u32..6, 0.0f64..2.0), 1..12),
        budget in 1u32..20,
        slots in 1usize..60,
    ) {
        let ps: Vec<_> = devices.iter().enumerate().map(|(i, d)| profile(i, d.0, d.1)).collect();
        let change: Vec<f64> = devices.iter().map(|d| d.2).collect();
        let obs = Observation::initial(ps.len());
        let mut polling = Polling::new(ps.clone());
        let mut schedulers: Vec<Box<dyn Scheduler>> = vec![];
        if let Ok(plan) = fixed_interval_schedule(&ps, budget, &change, &[1, 2, 3, 4, 6, 8, 12, 16, 24, 48]) {
            schedulers.push(Box::new(FixedInterval::new(ps.clone(), plan, &change).unwrap()));
        }
        let mut times_served = vec![0usize; ps.len()];
        for _ in 0..slots {
            let a = polling.schedule(&obs, budget).unwrap();
            prop_assert!(a.rb_used(&ps) <= budget);
            for (i, &u) in a.0.iter().enumerate() {
                times_served[i] += u as usize;
                if ps[i].rb_cost_b > budget {
                    prop_assert!(!u);
                }
            }
            for s in schedulers.iter_mut() {
                prop_assert!(s.schedule(&obs, budget).unwrap().rb_used(&ps) <= budget);
            }
        }
        // round-robin reaches every device that fits within one cycle per device
        if slots >= ps.len() {
            for (i, p) in ps.iter().enumerate() {
                if p.rb_cost_b <= budget {
                    prop_assert!(times_served[i] > 0, "device {} never served", i);
                }
            }
        }
    }
}
