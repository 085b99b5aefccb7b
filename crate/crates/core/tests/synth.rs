use cedecomp::decomposition::{accumulate, decompose};
use cedecomp::synth::{
    gen_corpus, gen_scaling_series, geometric_entropy, solve_p_for_entropy, PFamily, SeriesSpec, SynthSpec,
};
use cedecomp::Decomposition;

fn decomp_of(spec: &SynthSpec) -> Decomposition {
    let c = gen_corpus(spec).unwrap();
    decompose(&accumulate(&c.records).unwrap()).unwrap()
}

/// `p_e ∝ r^e` on `0..=max_rank`, summed term by term.
fn geometric_entropy_oracle(r: f64, max_rank: u64) -> f64 {
    let z: f64 = (0..=max_rank).map(|e| r.powi(e as i32)).sum();
    (0..=max_rank)
        .map(|e| {
            let p = r.powi(e as i32) / z;
            if p > 0.0 { -p * p.ln() } else { 0.0 }
        })
        .sum()
}

#[test]
fn geometric_entropy_matches_direct_sum() {
    for &(r, m) in &[(0.1, 10), (0.5, 63), (0.9, 255), (0.99, 4095)] {
        let got = geometric_entropy(r, m);
        let want = geometric_entropy_oracle(r, m);
        assert!((got - want).abs() < 1e-10, "r={r} m={m}: {got} vs {want}");
    }
}

#[test]
fn entropy_solver_inverts_the_forward_map() {
    for &h in &[0.05, 0.5, 2.0, 5.0] {
        let r = solve_p_for_entropy(h, 4095).unwrap();
        assert!((geometric_entropy_oracle(r, 4095) - h).abs() < 1e-9);
    }
}

#[test]
fn full_alignment_plants_entropy_and_confidence() {
    let (r, max_rank) = (0.7, 255);
    let spec = SynthSpec::new(
        50_000,
        PFamily::Geometric { r, max_rank },
        1.0,
        -0.4,
        42,
    );
    let d = decomp_of(&spec);
    assert!(d.sa < 1e-6, "sa = {}", d.sa);
    assert!((d.conf + 0.4).abs() < 1e-9);
    // Sampling error on a plug-in entropy at this size is well under 0.02 nats.
    let h = geometric_entropy_oracle(r, max_rank);
    assert!((d.ee - h).abs() < 0.02, "ee {} vs {h}", d.ee);
    assert!(d.identity_holds());
}

#[test]
fn self_alignment_grows_as_alignment_drops() {
    let sa: Vec<f64> = [1.0, 0.75, 0.5, 0.25, 0.0]
        .iter()
        .map(|&a| {
            decomp_of(&SynthSpec::new(
                20_000,
                PFamily::Explicit(vec![0.5, 0.2, 0.15, 0.1, 0.05]),
                a,
                -0.2,
                9,
            ))
            .sa
        })
        .collect();
    assert!(sa.windows(2).all(|w| w[1] > w[0]), "{sa:?}");
}

#[test]
fn same_seed_same_records_different_seed_different_records() {
    let spec = SynthSpec::new(2_000, PFamily::Geometric { r: 0.5, max_rank: 31 }, 0.5, -0.1, 1);
    let a = gen_corpus(&spec).unwrap();
    let b = gen_corpus(&spec).unwrap();
    assert!(a.records.iter().zip(&b.records).all(|(x, y)| x.bit_eq(y)));
    assert_eq!(a.manifest, b.manifest);
    let c = gen_corpus(&SynthSpec { seed: 2, ..spec }).unwrap();
    assert!(a.records.iter().zip(&c.records).any(|(x, y)| !x.bit_eq(y)));
}

#[test]
fn series_holds_sa_and_conf_fixed() {
    let mut spec = SeriesSpec::new(0.3, 2.0, vec![1_000_000, 8_000_000, 64_000_000], 10_000, 4);
    spec.sa_target = 0.07;
    spec.conf_target = -0.3;
    let series = gen_scaling_series(&spec).unwrap();
    assert_eq!(series.len(), 3);
    for c in &series {
        let d = decompose(&accumulate(&c.records).unwrap()).unwrap();
        assert!((d.sa - 0.07).abs() < 1e-6, "sa {}", d.sa);
        assert!((d.conf + 0.3).abs() < 1e-9);
        assert_eq!(c.manifest.num_records, 10_000);
    }
}

#[test]
fn infeasible_requests_are_rejected() {
    // ln C cannot exceed 0 when the top rank is the only one sampled.
    let spec = SynthSpec::new(100, PFamily::Explicit(vec![1.0]), 1.0, 0.5, 0);
    assert!(gen_corpus(&spec).is_err());
    let spec = SynthSpec::new(100, PFamily::Explicit(vec![0.5, 0.5]), 1.5, -0.1, 0);
    assert!(gen_corpus(&spec).is_err());
    let series = SeriesSpec::new(0.4, 100.0, vec![1_000_000], 100, 0);
    assert!(gen_scaling_series(&series).is_err());
}
