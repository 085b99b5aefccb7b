mod common;

use std::collections::BTreeMap;

use cedecomp::decomposition::{accumulate, decompose, RankAggregate};
use cedecomp::profiles::{bin_distribution, overlay_maps, BinScheme};
use cedecomp::records::{read_records, write_records};
use cedecomp::scaling::{fit_power_law, FitPoint, Metric};
use cedecomp::{CorpusManifest, Decomposition, PredictionRecord};
use proptest::prelude::*;

fn cell() -> impl Strategy<Value = (u64, f64)> {
    let score = prop_oneof![
        (1e-300f64..=1.0),
        (0.0f64..=1.0).prop_map(|u| 10f64.powf(-30.0 * u)),
        Just(1.0),
    ];
    (0u64..64, score)
}

fn records_from(cells: &[(u64, f64)]) -> Vec<PredictionRecord> {
    cells
        .iter()
        .enumerate()
        .map(|(i, &(rbe, s))| PredictionRecord::new(0, i as u64, 1, s.ln(), rbe))
        .collect()
}

fn decomp(records: &[PredictionRecord]) -> Decomposition {
    decompose(&accumulate(records).unwrap()).unwrap()
}

fn max_component_diff(a: &Decomposition, b: &Decomposition) -> f64 {
    [a.ce - b.ce, a.ee - b.ee, a.sa - b.sa, a.conf - b.conf]
        .iter()
        .fold(0.0f64, |m, d| m.max(d.abs()))
}

fn non_positive() -> impl Strategy<Value = f64> {
    any::<f64>()
        .prop_filter("not NaN", |x| !x.is_nan())
        .prop_map(|x| -x.abs())
}

fn wire_record() -> impl Strategy<Value = PredictionRecord> {
    (
        any::<u64>(),
        any::<u64>(),
        any::<u64>(),
        non_positive(),
        any::<u64>(),
        proptest::option::of(proptest::collection::vec(non_positive(), 0..6)),
    )
        .prop_map(|(doc, pos, gt, lns, rbe, topk)| {
            let r = PredictionRecord::new(doc, pos, gt, lns, rbe);
            match topk {
                Some(v) => r.with_topk(v),
                None => r,
            }
        })
}

proptest! {
    #[test]
    fn identity_and_bounds_hold(cells in proptest::collection::vec(cell(), 1..300)) {
        let records = records_from(&cells);
        let d = decomp(&records);
        prop_assert!(d.identity_holds(), "residual {}", d.residual);
        prop_assert!(d.sa >= 0.0);
        prop_assert!(d.ee >= 0.0);
        prop_assert!(d.ee <= (d.support_size as f64).ln());

        let oracle = common::naive(&records);
        prop_assert_eq!(oracle.support as u64, d.support_size);
        let tol = 1e-9 * oracle.ce.abs().max(1.0);
        prop_assert!((d.ce - oracle.ce).abs() <= tol);
        prop_assert!((d.ee - oracle.ee).abs() <= 1e-9);
        prop_assert!((d.conf - oracle.conf).abs() <= 1e-9);
        prop_assert!((d.sa - oracle.sa).abs() <= 1e-8);
    }

    #[test]
    fn permutation_does_not_change_components(
        (cells, shuffled) in proptest::collection::vec(cell(), 1..300)
            .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()))
    ) {
        let a = decomp(&records_from(&cells));
        let b = decomp(&records_from(&shuffled));
        prop_assert!(max_component_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn sharding_does_not_change_components(
        cells in proptest::collection::vec(cell(), 2..300),
        cut_frac in 0.0f64..1.0,
        shards in 1usize..6,
    ) {
        let records = records_from(&cells);
        let whole = decomp(&records);

        let cut = ((records.len() as f64) * cut_frac) as usize;
        let (head, tail) = records.split_at(cut);
        let mut merged = RankAggregate::new();
        for chunk in tail.chunks(tail.len().div_ceil(shards).max(1)) {
            merged.merge_in(&accumulate(chunk).unwrap());
        }
        if !head.is_empty() {
            merged = accumulate(head).unwrap().merge(&merged);
        }
        let sharded = decompose(&merged).unwrap();
        prop_assert_eq!(sharded.n, whole.n);
        prop_assert!(max_component_diff(&whole, &sharded) < 1e-12);
    }

    #[test]
    fn wire_round_trip_is_bit_exact(records in proptest::collection::vec(wire_record(), 0..40)) {
        let mut buf = Vec::new();
        write_records(&records, &mut buf).unwrap();
        let manifest = CorpusManifest::new("m", "f", 1, "d", u64::MAX, records.len() as u64);
        let back: Vec<PredictionRecord> = read_records(buf.as_slice(), &manifest)
            .unwrap()
            .collect::<Result<_, _>>()
            .unwrap();
        prop_assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            prop_assert!(a.bit_eq(b), "{:?} != {:?}", a, b);
        }
    }

    #[test]
    fn binning_conserves_mass(weights in proptest::collection::btree_map(0u64..5000, 1e-6f64..1.0, 1..80)) {
        let total: f64 = weights.values().sum();
        let dist: BTreeMap<u64, f64> = weights.iter().map(|(&k, &w)| (k, w / total)).collect();
        for scheme in [BinScheme::Raw, BinScheme::Log2] {
            let binned = bin_distribution(&dist, scheme);
            prop_assert!((binned.total_mass() - 1.0).abs() < 1e-12);
            for (&rank, &mass) in &dist {
                let holders: Vec<_> = binned.bins.iter().filter(|b| b.lo <= rank && rank < b.hi).collect();
                prop_assert_eq!(holders.len(), 1);
                prop_assert!(holders[0].mass >= mass - 1e-15);
            }
        }
    }

    #[test]
    fn total_variation_is_a_symmetric_distance(
        pairs in proptest::collection::btree_map(0u64..40, (1e-6f64..1.0, 1e-6f64..1.0), 1..20),
    ) {
        let norm = |pick: fn(&(f64, f64)) -> f64| {
            let t: f64 = pairs.values().map(pick).sum();
            pairs.iter().map(|(&k, v)| (k, pick(v) / t)).collect::<BTreeMap<_, _>>()
        };
        let (p, q) = (norm(|v| v.0), norm(|v| v.1));
        let pq = overlay_maps(&p, &q).unwrap().tv;
        let qp = overlay_maps(&q, &p).unwrap().tv;
        prop_assert!((pq - qp).abs() < 1e-15);
        prop_assert!((-1e-15..=1.0 + 1e-15).contains(&pq));
        prop_assert!(overlay_maps(&p, &p).unwrap().tv.abs() < 1e-15);
    }

    #[test]
    fn power_law_fit_is_scale_equivariant(
        values in proptest::collection::vec(1e-3f64..10.0, 3..10),
        k in 1e-3f64..1e3,
    ) {
        let points: Vec<FitPoint> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| FitPoint::new(format!("m{i}"), 10u64.pow(i as u32 + 3), v))
            .collect();
        let scaled: Vec<FitPoint> = points
            .iter()
            .map(|p| FitPoint::new(p.model.clone(), p.nonemb_params, p.value * k))
            .collect();
        let a = fit_power_law(Metric::Ee, &points, 0.0).unwrap();
        let b = fit_power_law(Metric::Ee, &scaled, 0.0).unwrap();
        prop_assert!((a.slope - b.slope).abs() < 1e-12);
        prop_assert!((b.intercept - a.intercept - k.ln()).abs() < 1e-12);
        prop_assert!((a.r2 - b.r2).abs() < 1e-12);
    }
}
