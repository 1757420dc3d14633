use proptest::prelude::*;

use fairtree::data::{AuditDataset, CovariateColumn, LossKind};
use fairtree::partition::{self, AuditConfig, Engine, NodeKind};
use fairtree::report::TreeReport;
use fairtree::simgen;

fn dataset(x: Vec<f64>, g: Vec<usize>, noise: Vec<f64>, shift: f64) -> AuditDataset {
    let resid: Vec<f64> = noise.iter().zip(&g).map(|(e, &k)| e + if k == 1 { shift } else { 0.0 }).collect();
    let cols = vec![
        CovariateColumn::continuous("x", x).unwrap(),
        CovariateColumn::nominal("g", g, vec!["a".into(), "b".into(), "c".into()]).unwrap(),
    ];
    AuditDataset::build(vec![0.0; resid.len()], resid, cols, LossKind::SquaredError).unwrap()
}

fn inputs() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<f64>, f64)> {
    (30usize..150).prop_flat_map(|n| {
        (
            proptest::collection::vec(0.0..10.0f64, n),
            proptest::collection::vec(0usize..3, n),
            proptest::collection::vec(-1.0..1.0f64, n),
            0.0..2.0f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trees_are_well_formed((x, g, noise, shift) in inputs(), perm in any::<bool>()) {
        let d = dataset(x, g, noise, shift);
        let mut cfg = AuditConfig::new(if perm { Engine::Permutation } else { Engine::Fluctuation });
        cfg.n_permutations = 199;
        cfg.max_depth = 3;
        let tree = partition::grow_tree(&d, &cfg).unwrap();

        let mut rows: Vec<usize> = tree.leaves().iter().flat_map(|l| l.indices.clone()).collect();
        rows.sort_unstable();
        prop_assert_eq!(rows, d.all_indices());

        for (i, node) in tree.root.walk().iter().enumerate() {
            prop_assert_eq!(node.id, i);
            prop_assert!(node.depth <= cfg.max_depth);
            if let NodeKind::Internal { adjusted_p, children, .. } = &node.kind {
                prop_assert!(*adjusted_p < cfg.alpha);
                for c in children.iter() {
                    prop_assert!(c.indices.len() >= cfg.min_node);
                }
            }
        }
    }

    #[test]
    fn fluctuation_ignores_row_order((x, g, noise, shift) in inputs(), rot in 1usize..29) {
        let d = dataset(x.clone(), g.clone(), noise.clone(), shift);
        let (mut x2, mut g2, mut e2) = (x, g, noise);
        x2.rotate_left(rot);
        g2.rotate_left(rot);
        e2.rotate_left(rot);
        let d2 = dataset(x2, g2, e2, shift);
        let cfg = AuditConfig::new(Engine::Fluctuation);
        let a = partition::priority_audit(&d, &cfg).unwrap();
        let b = partition::priority_audit(&d2, &cfg).unwrap();
        let pa = a.iter().find(|e| e.covariate == "x").unwrap().raw_p;
        let pb = b.iter().find(|e| e.covariate == "x").unwrap().raw_p;
        prop_assert!((pa - pb).abs() <= 1e-9);
    }
}

#[test]
fn thread_count_does_not_change_reports() {
    let data = simgen::census_standin(1500, 3).unwrap();
    let data = simgen::inject_faults(&data, &simgen::census_faults(), 4).unwrap();
    for engine in [Engine::Permutation, Engine::Fluctuation] {
        let mut cfg = AuditConfig::new(engine);
        cfg.n_permutations = 300;
        cfg.seed = 9;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| TreeReport::from_tree(&partition::grow_tree(&data, &cfg).unwrap()).to_json())
        };
        let one = run(1);
        assert_eq!(one, run(4));
        assert_eq!(one, run(1));
        assert_eq!(TreeReport::from_json(&one).unwrap().to_json(), one);
    }
}
