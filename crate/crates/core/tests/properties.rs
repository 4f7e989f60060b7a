use geocausal::geogrid::{read_grid, write_grid, ColumnSchema, GridDataset, Location, Node, N_FEATURES};
use geocausal::metrics::{roc_auc, roc_points, ScoredLabels};
use proptest::collection::vec;
use proptest::prelude::*;

fn location() -> impl Strategy<Value = (f64, f64, [f64; N_FEATURES], f64, f64, bool, Option<f64>)> {
    (
        -180.0..180.0f64,
        -90.0..90.0f64,
        proptest::array::uniform7(-1e4..1e4f64),
        0.0..=1.0f64,
        0.0..=1.0f64,
        any::<bool>(),
        proptest::option::of(-5.0..500.0f64),
    )
}

fn grid(n: std::ops::Range<usize>) -> impl Strategy<Value = GridDataset> {
    vec(location(), n).prop_map(|rows| {
        let locations = rows
            .into_iter()
            .enumerate()
            .map(|(id, (lon, lat, gf, prior_ls, prior_lf, has_building, dpm))| Location {
                id,
                lon,
                lat,
                gf,
                prior_ls,
                prior_lf,
                has_building,
                dpm,
            })
            .collect();
        GridDataset::new(locations).unwrap()
    })
}

fn scored(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    n.prop_flat_map(|n| (vec(0.0..=1.0f64, n), vec(any::<bool>(), n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grid_csv_round_trip_is_bit_exact(g in grid(1..40)) {
        let mut buf = Vec::new();
        write_grid(&g, &mut buf).unwrap();
        let back = read_grid(buf.as_slice(), &ColumnSchema::default()).unwrap();
        prop_assert_eq!(&g.locations, &back.locations);
    }

    #[test]
    fn standardization_inverts(mut g in grid(2..40)) {
        let raw: Vec<_> = g.locations.iter().map(|l| l.gf).collect();
        if g.standardize_features().is_ok() {
            for (i, r) in raw.iter().enumerate() {
                let back = g.raw_features(i);
                for j in 0..N_FEATURES {
                    prop_assert!((back[j] - r[j]).abs() <= 1e-9 * r[j].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn raising_the_floor_never_activates(mut g in grid(1..40), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        g.compute_active_masks(lo);
        let before: Vec<Vec<bool>> = Node::ALL.iter().map(|&n| (0..g.len()).map(|l| g.is_active(n, l)).collect()).collect();
        g.compute_active_masks(hi);
        for (k, &n) in Node::ALL.iter().enumerate() {
            for l in 0..g.len() {
                prop_assert!(!g.is_active(n, l) || before[k][l]);
            }
        }
    }

    #[test]
    fn auc_is_invariant_to_increasing_transforms((s, l) in scored(2..60)) {
        let base = ScoredLabels::new(s.clone(), l.clone());
        let moved = ScoredLabels::new(s.iter().map(|v| (3.0 * v - 1.0).exp()).collect(), l);
        match (roc_auc(&base), roc_auc(&moved)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.to_bits(), b.to_bits());
                prop_assert_eq!(roc_points(&base).unwrap(), roc_points(&moved).unwrap());
            }
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }

    #[test]
    fn auc_has_complement_symmetry((s, l) in scored(2..60)) {
        let base = ScoredLabels::new(s.clone(), l.clone());
        let flipped = ScoredLabels::new(s.iter().map(|v| -v).collect(), l.iter().map(|b| !b).collect());
        match (roc_auc(&base), roc_auc(&flipped)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (Err(_), Err(_)) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }
}
