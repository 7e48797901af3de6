use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segdiff_core::ablation::{
    ablate_random, chi_square_uniform, enumerate_patterns, AblationPattern, Mask,
};

/// Upper 0.001 quantile of the chi-square distribution with 7 degrees of
/// freedom.
const CHI2_7_P001: f64 = 24.321886;

fn random_mask(rng: &mut ChaCha8Rng, c: usize) -> Mask {
    let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
    let labels = (0..w * h).map(|_| rng.random_range(0..c as u8)).collect();
    Mask::new(w, h, c, labels).unwrap()
}

#[test]
fn ablation_conserves_labels_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let c = rng.random_range(1..=6);
        let m = random_mask(&mut rng, c);
        let (out, p) = ablate_random(&m, &mut rng).unwrap();
        for (&before, &after) in m.labels().iter().zip(out.labels()) {
            if p.removes(before as usize) {
                assert_eq!(after, 0);
            } else {
                assert_eq!(after, before);
            }
        }
        let kept: usize = (1..c as u8)
            .filter(|&k| !p.removes(k as usize))
            .map(|k| m.count(k))
            .sum();
        let removed: usize = p.removed_classes().iter().map(|&k| m.count(k as u8)).sum();
        assert_eq!(out.count(0), m.count(0) + removed);
        assert_eq!(out.labels().len() - out.count(0), kept);
    }
}

#[test]
fn drawn_patterns_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut counts = [0u64; 8];
    for _ in 0..8000 {
        counts[AblationPattern::draw(4, &mut rng).unwrap().index() as usize] += 1;
    }
    let stat = chi_square_uniform(&counts);
    assert!(
        stat < CHI2_7_P001,
        "chi-square {stat} with counts {counts:?}"
    );
    assert_eq!(chi_square_uniform(&[10, 10, 10]), 0.0);
    // (5-10)^2/10 + (15-10)^2/10
    assert!((chi_square_uniform(&[5, 15]) - 5.0).abs() < 1e-12);
}

#[test]
fn enumeration_sizes() {
    for c in 1..=6 {
        let all = enumerate_patterns(c).unwrap();
        let distinct: std::collections::HashSet<Vec<usize>> =
            all.iter().map(|p| p.removed_classes()).collect();
        assert_eq!(all.len(), 1 << (c - 1));
        assert_eq!(distinct.len(), all.len());
    }
}
