//! Property tests for metrics, attention plumbing and the noise schedule.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use textsr::attention::{aggregate_attention, search_text_slice};
use textsr::autograd::Graph;
use textsr::backbone::{add_noise, remove_noise, ScheduleConfig};
use textsr::eval::{dice_coef, iou, lev_ratio, levenshtein, psnr};
use textsr::image::Image;
use textsr::tensor::Tensor;

/// Minimum edits by exhaustive search over all alignments.
fn brute(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute(ra, rb) + (x != y) as usize;
            sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
        }
    }
}

fn short() -> impl Strategy<Value = String> {
    "[ab]{0,6}"
}

fn text() -> impl Strategy<Value = String> {
    "[a-dé]{0,12}"
}

fn mask(seed: u64, side: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::uniform(&[1, side, side], 0.0, 1.0, &mut rng);
    Image::from_tensor(&t).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn levenshtein_matches_exhaustive_search(a in short(), b in short()) {
        let (ca, cb): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(levenshtein(&a, &b), brute(&ca, &cb));
    }

    #[test]
    fn levenshtein_is_a_metric(a in text(), b in text(), c in text()) {
        let ab = levenshtein(&a, &b);
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
        prop_assert!(ab <= a.chars().count().max(b.chars().count()));
    }

    #[test]
    fn lev_ratio_is_bounded_and_symmetric(a in text(), b in text()) {
        let r = lev_ratio(&a, &b);
        prop_assert!((0.0..=1.0).contains(&r));
        prop_assert_eq!(r, lev_ratio(&b, &a));
        prop_assert_eq!(r == 1.0, a == b);
    }

    #[test]
    fn overlap_scores_are_bounded_and_symmetric(s1 in any::<u64>(), s2 in any::<u64>(), th in 0.05f64..0.95) {
        let (a, b) = (mask(s1, 6), mask(s2, 6));
        for f in [iou, dice_coef] {
            let v = f(&a, &b, th).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, f(&b, &a, th).unwrap());
            prop_assert_eq!(f(&a, &a, th).unwrap(), 1.0);
        }
    }

    #[test]
    fn text_slice_is_the_score_column(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, tokens in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = (seed as usize) % tokens;
        let scores = Tensor::randn(&[h * w, tokens], 1.0, &mut rng);
        let mut g = Graph::new();
        let s = g.constant(scores.clone());
        let slice = search_text_slice(&mut g, s, k, (h, w)).unwrap();
        prop_assert_eq!(g.value(slice).shape(), &[1, h, w][..]);
        for i in 0..h * w {
            prop_assert_eq!(g.value(slice).data()[i], scores.data()[i * tokens + k]);
        }
        prop_assert!(search_text_slice(&mut g, s, tokens, (h, w)).is_err());
    }

    #[test]
    fn aggregation_is_linear_in_the_projection(seed in any::<u64>(), m in 1usize..5, d in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let maps: Vec<_> = (0..m)
            .map(|i| {
                let side = [2, 4, 8][i % 3];
                g.constant(Tensor::randn(&[1, side, side], 1.0, &mut rng))
            })
            .collect();
        let w1 = g.constant(Tensor::randn(&[d, m], 1.0, &mut rng));
        let w2 = g.constant(Tensor::randn(&[d, m], 1.0, &mut rng));
        let w12 = g.add(w1, w2);
        let a1 = aggregate_attention(&mut g, &maps, (8, 8), w1).unwrap();
        let a2 = aggregate_attention(&mut g, &maps, (8, 8), w2).unwrap();
        let a12 = aggregate_attention(&mut g, &maps, (8, 8), w12).unwrap();
        prop_assert_eq!(g.value(a12).shape(), &[d, 8, 8][..]);
        for ((x, y), z) in g.value(a1).data().iter().zip(g.value(a2).data()).zip(g.value(a12).data()) {
            prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
    }

    #[test]
    fn noise_round_trip_in_double_precision(seed in any::<u64>(), t in 0usize..1000) {
        let sch = ScheduleConfig::default().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::randn(&[64], 1.0, &mut rng);
        let n = Tensor::randn(&[64], 1.0, &mut rng);
        let noisy = add_noise(z.data(), n.data(), t, &sch).unwrap();
        let back = remove_noise(&noisy, n.data(), t, &sch).unwrap();
        for (a, b) in back.iter().zip(z.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clean = mask(1, 32);
    let noisy = |sigma: f64, rng: &mut ChaCha8Rng| {
        let normal = Normal::new(0.0, sigma).unwrap();
        let data = clean.data().iter().map(|v| v + normal.sample(rng)).collect();
        Image::new(1, 32, 32, data).unwrap()
    };
    let mut ordered = 0;
    for _ in 0..10 {
        let p: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| psnr(&noisy(s, &mut rng), &clean).unwrap())
            .collect();
        ordered += (p[0] > p[1] && p[1] > p[2]) as usize;
    }
    assert!(ordered >= 9, "{ordered}/10 trials ordered");
}
