use diffseg_core::data::LabelMap;
use diffseg_core::evaluator::{dice, jaccard, EvalResult};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Set-based Dice/Jaccard over explicit coordinate sets, percent.
fn oracle(pred: &[u8], target: &[u8]) -> (f64, f64) {
    let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == 1).collect();
    let t: Vec<usize> = (0..target.len()).filter(|&i| target[i] == 1).collect();
    let inter = p.iter().filter(|i| t.contains(i)).count();
    let mut union: Vec<usize> = p.iter().chain(&t).copied().collect();
    union.sort();
    union.dedup();
    if p.is_empty() && t.is_empty() {
        return (100.0, 100.0);
    }
    (
        100.0 * 2.0 * inter as f64 / (p.len() + t.len()) as f64,
        100.0 * inter as f64 / union.len() as f64,
    )
}

fn random_mask(rng: &mut ChaCha8Rng) -> LabelMap {
    // density varies per mask so empty and full masks appear too
    let density: f64 = rng.random_range(0.0..=1.0);
    let data = (0..64).map(|_| u8::from(rng.random_bool(density))).collect();
    LabelMap::new(8, 8, data).unwrap()
}

#[test]
fn thousand_random_masks_match_oracle_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (p, t) = (random_mask(&mut rng), random_mask(&mut rng));
        let (d, j) = oracle(p.data(), t.data());
        assert_eq!(dice(&p, &t, 1).unwrap(), d);
        assert_eq!(jaccard(&p, &t, 1).unwrap(), j);
    }
}

#[test]
fn dice_is_a_function_of_jaccard() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let (p, t) = (random_mask(&mut rng), random_mask(&mut rng));
        let (d, j) = (dice(&p, &t, 1).unwrap(), jaccard(&p, &t, 1).unwrap());
        assert!((d - 200.0 * j / (100.0 + j)).abs() < 1e-9, "DC {d} JI {j}");
    }
}

#[test]
fn hand_cases() {
    let a = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
    let b = LabelMap::new(1, 4, vec![0, 1, 1, 0]).unwrap();
    assert_eq!(dice(&a, &b, 1).unwrap(), 50.0);
    assert!((jaccard(&a, &b, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
    let empty = LabelMap::filled(1, 4, 0);
    assert_eq!(dice(&empty, &empty, 1).unwrap(), 100.0);
    assert_eq!(dice(&a, &empty, 1).unwrap(), 0.0);
    assert!(dice(&a, &LabelMap::filled(2, 2, 0), 1).is_err());
}

#[test]
fn per_sample_means() {
    let a = LabelMap::new(1, 2, vec![1, 0]).unwrap();
    let b = LabelMap::new(1, 2, vec![1, 1]).unwrap();
    let r = EvalResult::from_pairs(&[a.clone(), b.clone()], &[&a, &a], 1).unwrap();
    assert_eq!(r.per_sample_dice, vec![100.0, 100.0 * 2.0 / 3.0]);
    assert!((r.dice - (100.0 + 200.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!((r.jaccard - 75.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn metrics_are_symmetric_and_bounded(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, t) = (random_mask(&mut rng), random_mask(&mut rng));
        let d = dice(&p, &t, 1).unwrap();
        let j = jaccard(&p, &t, 1).unwrap();
        prop_assert_eq!(d, dice(&t, &p, 1).unwrap());
        prop_assert_eq!(j, jaccard(&t, &p, 1).unwrap());
        prop_assert!((0.0..=100.0).contains(&d) && (0.0..=100.0).contains(&j));
        prop_assert!(j <= d);
        prop_assert_eq!(dice(&p, &p, 1).unwrap(), 100.0);
    }
}
