use greenwave::arrival::ArrivalProcess;
use greenwave::engine::{run_sample_path, SimOptions};
use greenwave::ipa::{propagation_trace, HopKind};
use greenwave::model::{ArteryModel, Dir, QueueId, ThetaVector};
use greenwave::scenario::Scenario;

fn chain() -> Scenario {
    let m = ArteryModel::uniform(3, 200.0, 10.0, 5.0, 1.3);
    let theta = ThetaVector::from_pairs(&[(30.4, 20.3), (25.6, 25.1), (28.2, 22.7)], 5.0, 120.0).unwrap();
    Scenario::new(m, theta, 600.0)
        .with_arrival(QueueId::new(0, Dir::Artery), ArrivalProcess::constant(0.3))
        .with_arrival(QueueId::new(1, Dir::Side), ArrivalProcess::constant(0.1))
}

#[test]
fn upstream_threshold_reaches_the_last_intersection() {
    let s = chain();
    let (traj, _) = run_sample_path(&s, &s.theta0, 1, SimOptions::default()).unwrap();
    let hops = propagation_trace(&s.model, &traj, 0).unwrap();
    assert!(hops.windows(2).all(|w| w[0].t <= w[1].t));
    let reached = |n: usize| {
        hops.iter().any(|h| {
            h.queue == QueueId::new(n, Dir::Artery)
                && matches!(h.kind, HopKind::Propagated | HopKind::Relayed)
        })
    };
    assert!(reached(1), "no hop at intersection 2: {hops:#?}");
    assert!(reached(2), "no hop at intersection 3: {hops:#?}");
    for h in hops.iter().filter(|h| h.kind == HopKind::Reset) {
        assert_eq!(h.x_prime_after, 0.0);
        assert_ne!(h.x_prime_before, 0.0);
    }
    for h in hops.iter().filter(|h| h.kind == HopKind::Propagated) {
        assert!(h.link.is_some());
        assert_ne!(h.x_prime_before, h.x_prime_after);
    }
}

#[test]
fn downstream_threshold_never_travels_upstream() {
    let s = chain();
    let (traj, _) = run_sample_path(&s, &s.theta0, 1, SimOptions::default()).unwrap();
    let hops = propagation_trace(&s.model, &traj, 5).unwrap();
    assert!(hops.iter().all(|h| h.queue.n == 2), "{hops:#?}");
}

#[test]
fn out_of_range_parameter_is_rejected() {
    let s = chain();
    let (traj, _) = run_sample_path(&s, &s.theta0, 1, SimOptions::default()).unwrap();
    assert!(propagation_trace(&s.model, &traj, 6).is_err());
}
