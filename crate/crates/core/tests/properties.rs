use kyber_shuffle::experiment::{experiment_key, flat_secret};
use kyber_shuffle::kem::{decrypt, decrypt_traced, encrypt, keygen, ParamSet};
use kyber_shuffle::leakage::{
    hd, hd_samples, lane_width, synthesize, LeakPoint, LeakageConfig, ScheduleFactory, TraceSet, UniformCiphertexts,
};
use kyber_shuffle::prng::SeedStream;
use kyber_shuffle::ring::{basemul, intt, ntt, Domain, Poly, N, Q};
use kyber_shuffle::rpg::{generate, is_restricted, PERM_LEN, RPG_CYCLES};
use kyber_shuffle::sca::{cpa_attack, tvla, Moments};
use kyber_shuffle::sched::{build_protected, build_unprotected, cycle_count, Op, TapDelays};
use proptest::prelude::*;

fn poly(c: Vec<u16>, domain: Domain) -> Poly {
    Poly::from_slice(&c, domain).unwrap()
}

fn coeffs() -> impl Strategy<Value = Vec<u16>> {
    prop::collection::vec(0..Q, N)
}

fn negacyclic(a: &[u16], b: &[u16]) -> Vec<u16> {
    let mut acc = vec![0i64; N];
    for i in 0..N {
        for j in 0..N {
            let p = a[i] as i64 * b[j] as i64;
            if i + j < N { acc[i + j] += p } else { acc[i + j - N] -= p }
        }
    }
    acc.iter().map(|x| x.rem_euclid(Q as i64) as u16).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ntt_roundtrip(c in coeffs()) {
        let p = poly(c, Domain::Time);
        prop_assert_eq!(intt(&ntt(&p).unwrap()).unwrap(), p);
    }

    #[test]
    fn pipeline_matches_schoolbook(a in coeffs(), b in coeffs()) {
        let (pa, pb) = (poly(a.clone(), Domain::Time), poly(b.clone(), Domain::Time));
        let prod = intt(&basemul(&ntt(&pa).unwrap(), &ntt(&pb).unwrap()).unwrap()).unwrap();
        prop_assert_eq!(prod.coeffs().to_vec(), negacyclic(&a, &b));
    }

    #[test]
    fn rpg_output_is_a_restricted_bijection(seed in 1u32..) {
        let (p, cycles) = generate(seed).unwrap();
        prop_assert_eq!(cycles, RPG_CYCLES);
        let mut seen = [false; PERM_LEN];
        for (pos, &v) in p.entries().iter().enumerate() {
            prop_assert!(!seen[v as usize]);
            seen[v as usize] = true;
            if pos < 6 || pos >= PERM_LEN - 6 {
                prop_assert!(!is_restricted(v), "restricted {v:#x} at {pos}");
            }
        }
    }

    #[test]
    fn protected_schedules_preserve_result_and_cycles(stream in any::<u64>(), msg in any::<[u8; 32]>(), which in 0usize..3) {
        let params = ParamSet::ALL[which].params();
        let kp = keygen(params, &[9u8; 32]).unwrap();
        let ct = encrypt(params, &kp.public, &msg, &[4u8; 32]).unwrap();
        let s = build_protected(params, &mut SeedStream::new(stream), TapDelays::default()).unwrap();
        s.validate().unwrap();
        prop_assert_eq!(cycle_count(&s), cycle_count(&build_unprotected(params)));
        let (m, events) = decrypt_traced(&kp, &ct, &s).unwrap();
        prop_assert_eq!(m, msg);
        prop_assert_eq!(m, decrypt(&kp, &ct).unwrap());
        for target in [LeakPoint::Point1, LeakPoint::Point2, LeakPoint::Point3, LeakPoint::All] {
            let width = |op: Op| lane_width(op) * 4;
            let bound = if target == LeakPoint::Point1 || target == LeakPoint::All { width(Op::Pwm) } else { width(Op::Reduce) };
            prop_assert!(hd_samples(&events, target).iter().all(|&x| x <= bound));
        }
    }

    #[test]
    fn hd_is_a_metric(a in 0u32..1 << 24, b in 0u32..1 << 24, c in 0u32..1 << 24) {
        prop_assert_eq!(hd(a, b, 24).unwrap(), hd(b, a, 24).unwrap());
        prop_assert_eq!(hd(a, a, 24).unwrap(), 0);
        prop_assert!(hd(a, c, 24).unwrap() <= hd(a, b, 24).unwrap() + hd(b, c, 24).unwrap());
        prop_assert!(hd(a, b, 24).unwrap() <= 24);
    }
}

fn small_set(seed: u64, n: usize, protected: bool, sigma: f64) -> (kyber_shuffle::kem::KeyPair, TraceSet) {
    let params = ParamSet::Kyber512.params();
    let kp = experiment_key(params, seed, 0).unwrap();
    let cts = UniformCiphertexts { params, seed, count: n };
    let f = if protected { ScheduleFactory::Protected(TapDelays::default()) } else { ScheduleFactory::Unprotected };
    let set = synthesize(&kp, &cts, f, LeakageConfig::new(LeakPoint::Point2, sigma, seed)).unwrap();
    (kp, set)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn sktl_roundtrip(seed in any::<u64>(), n in 1usize..20, protected in any::<bool>(), sigma in 0.0f64..10.0) {
        let (_, set) = small_set(seed, n, protected, sigma);
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = TraceSet::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back.n_traces(), n);
        for i in 0..n {
            prop_assert_eq!(
                back.trace(i).iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                set.trace(i).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
        prop_assert_eq!(back, set);
    }

    #[test]
    fn cpa_ranking_is_affine_invariant(seed in any::<u64>(), scale in prop::sample::select(vec![0.25f32, 0.5, 2.0, 8.0]), shift in -64i32..64) {
        let (kp, set) = small_set(seed, 120, false, 0.0);
        let truth = flat_secret(&kp);
        let base = cpa_attack(&set, LeakPoint::Point2, 0, 1, &[], Some(&truth)).unwrap();
        let mut moved = set.clone();
        moved.map_samples(|x| x * scale + shift as f32);
        let other = cpa_attack(&moved, LeakPoint::Point2, 0, 1, &[], Some(&truth)).unwrap();
        let (a, b) = (&base.coeffs[0].ranking, &other.coeffs[0].ranking);
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x.1 - y.1).abs() < 1e-9);
        }
        for w in a.windows(2) {
            // Order is only meaningful where scores are separated.
            if w[0].1 - w[1].1 > 1e-9 {
                let pos = |h: u16| b.iter().position(|r| r.0 == h).unwrap();
                prop_assert!(pos(w[0].0) < pos(w[1].0));
            }
        }
    }

    #[test]
    fn tvla_swap_negates_and_self_test_is_zero(seed in any::<u64>()) {
        let (_, a) = small_set(seed, 30, true, 3.0);
        let (_, b) = small_set(seed ^ 1, 30, true, 3.0);
        let ab = tvla(&a, &b).unwrap();
        let ba = tvla(&b, &a).unwrap();
        for (x, y) in ab.t.iter().zip(&ba.t) {
            prop_assert_eq!(*x, -*y);
        }
        let same = tvla(&a, &a).unwrap();
        prop_assert!(same.t.iter().all(|&t| t == 0.0));
    }
}

/// A single-coefficient predictor explains one of the four lanes summed in
/// each sample, so on noiseless aligned traces the correct key's peak
/// correlation converges to that lane's share of the variance.
#[test]
fn noiseless_correct_key_correlation_reaches_lane_share() {
    let (kp, set) = small_set(77, 6000, false, 0.0);
    let truth = flat_secret(&kp);
    let report = cpa_attack(&set, LeakPoint::Point2, 0, 1, &[], Some(&truth)).unwrap();
    let c = &report.coeffs[0];
    assert_eq!(c.truth_rank, Some(1));

    // Var(HW(y)) for y uniform on Z_q.
    let hw: Vec<f64> = (0..Q).map(|y| y.count_ones() as f64).collect();
    let mean = hw.iter().sum::<f64>() / Q as f64;
    let v = hw.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / Q as f64;
    let lanes = truth[..4].iter().filter(|&&s| s != 0).count() as f64;
    let expected = if truth[0] == 0 { 0.0 } else { (v / (lanes * v)).sqrt() };
    let peak = c.truth_peak.unwrap();
    assert!((peak - expected).abs() < 0.04, "peak {peak} expected {expected}");
}

#[test]
fn moments_match_two_pass_statistics() {
    let (_, set) = small_set(5, 300, true, 2.0);
    let mut m = Moments::new(set.n_samples());
    for i in 0..set.n_traces() {
        m.push(set.trace(i)).unwrap();
    }
    let n = set.n_traces() as f64;
    for s in 0..set.n_samples() {
        let xs: Vec<f64> = (0..set.n_traces()).map(|i| set.trace(i)[s] as f64).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((m.mean()[s] - mean).abs() < 1e-9);
        assert!((m.variance()[s] - var).abs() < 1e-7 * (1.0 + var));
    }
}
