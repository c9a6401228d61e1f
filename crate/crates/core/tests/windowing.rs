use proptest::prelude::*;
use sweepguide_core::dataio::{class_weights, make_windows, WINDOW};

/// Frame counts summing to `total` over `volumes` volumes, as even as possible.
fn split(total: usize, volumes: usize) -> Vec<usize> {
    (0..volumes).map(|i| total / volumes + usize::from(i < total % volumes)).collect()
}

fn windows(counts: &[usize]) -> usize {
    counts.iter().map(|&n| make_windows(n, WINDOW).unwrap().len()).sum()
}

#[test]
fn cohort_window_counts() {
    assert_eq!(windows(&split(8594, 54)), 8108);
    assert_eq!(windows(&split(1149, 7)), 1086);
}

#[test]
fn position_class_weights() {
    let w = class_weights([0.62, 0.23, 0.15]).unwrap();
    for (got, want) in w.iter().zip([0.383, 1.033, 1.584]) {
        assert!((got - want).abs() < 5e-4);
    }
    assert!((w.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn every_window_is_contiguous_and_ends_on_its_frame(n in WINDOW..400usize) {
        let w = make_windows(n, WINDOW).unwrap();
        prop_assert_eq!(w.len(), n - WINDOW + 1);
        for (i, r) in w.iter().enumerate() {
            prop_assert_eq!(r.len(), WINDOW);
            prop_assert_eq!(r.end - 1, WINDOW - 1 + i);
        }
    }

    #[test]
    fn weights_have_unit_mean_and_reverse_the_order(p in prop::array::uniform3(0.01f64..1.0)) {
        let s: f64 = p.iter().sum();
        let p = p.map(|x| x / s);
        let w = class_weights(p).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        for a in 0..3 {
            for b in 0..3 {
                if p[a] < p[b] {
                    prop_assert!(w[a] >= w[b]);
                }
            }
        }
    }
}

#[test]
fn short_volumes_are_rejected() {
    assert!(make_windows(WINDOW - 1, WINDOW).is_err());
}
