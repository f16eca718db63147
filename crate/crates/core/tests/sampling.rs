use dnd_core::sampler::{cfg_combine, sample_code, sample_codegrid, SampleRequest};
use dnd_core::transformer::{BackboneConfig, HeadPlacement, Transformer, Variant};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_model(variant: Variant, layers: Vec<usize>) -> Transformer {
    let cfg = BackboneConfig {
        layers: 3,
        hidden: 16,
        heads: 2,
        dropout: 0.0,
        vocab: 16,
        classes: 4,
        max_seq_len: 16,
        rope: true,
        ffn_hidden: 0,
        norm_eps: 1e-5,
    };
    Transformer::init(cfg, HeadPlacement::new(variant, layers), 21).unwrap()
}

#[test]
fn uniform_logits_give_uniform_draws() {
    let n = 16;
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = vec![0.25f32; n];
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[sample_code(&logits, 1.0, 0, &mut rng).unwrap() as usize] += 1;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi-square {chi2} p={p}");
    let sigma = (draws as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
    for c in counts {
        assert!((c as f64 - expected).abs() < 3.0 * sigma + 1.0, "{c} vs {expected}");
    }
}

#[test]
fn softmax_probabilities_are_respected() {
    let logits = [0.0f32, (2.0f32).ln(), (5.0f32).ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut counts = [0usize; 3];
    let draws = 80_000;
    for _ in 0..draws {
        counts[sample_code(&logits, 1.0, 0, &mut rng).unwrap() as usize] += 1;
    }
    for (c, p) in counts.iter().zip([0.125, 0.25, 0.625]) {
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - draws as f64 * p).abs() < 4.0 * sigma);
    }
}

#[test]
fn unit_scale_matches_unguided_run() {
    for variant in [Variant::Dnd, Variant::Vertical] {
        let m = small_model(variant, vec![1, 2, 3]);
        let plain = SampleRequest::new(Some(3), 4, 4, 3, 99);
        let unit = SampleRequest { cfg_scale: 1.0, ..plain };
        assert_eq!(sample_codegrid(&m, &plain).unwrap().grid, sample_codegrid(&m, &unit).unwrap().grid);
        let guided = SampleRequest { cfg_scale: 4.0, ..plain };
        let g = sample_codegrid(&m, &guided).unwrap();
        assert_eq!(g.passes, 16);
    }
}

#[test]
fn zero_scale_follows_the_null_condition() {
    let m = small_model(Variant::Dnd, vec![2, 3]);
    let guided = SampleRequest { cfg_scale: 0.0, temperature: 1e-6, ..SampleRequest::new(Some(1), 3, 3, 2, 4) };
    let null = SampleRequest { temperature: 1e-6, ..SampleRequest::new(None, 3, 3, 2, 4) };
    assert_eq!(sample_codegrid(&m, &guided).unwrap().grid, sample_codegrid(&m, &null).unwrap().grid);
}

proptest! {
    #[test]
    fn draws_stay_in_range_and_in_top_k(
        logits in prop::collection::vec(-20.0f32..20.0, 1..40),
        k in 0usize..10,
        temperature in 1e-5f64..5.0,
        seed in any::<u64>(),
    ) {
        let k = k.min(logits.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = sample_code(&logits, temperature, k, &mut rng).unwrap() as usize;
        prop_assert!(q < logits.len());
        if k > 0 {
            let larger = logits.iter().filter(|&&l| l > logits[q]).count();
            prop_assert!(larger < k);
        }
    }

    #[test]
    fn cfg_combine_is_affine_in_scale(
        pairs in prop::collection::vec((-10.0f32..10.0, -10.0f32..10.0), 1..20),
        t in 0.0f64..8.0,
    ) {
        let (lu, lc): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let g = cfg_combine(&lu, &lc, t).unwrap();
        for ((u, c), v) in lu.iter().zip(&lc).zip(&g) {
            let want = *u as f64 + (*c as f64 - *u as f64) * t;
            prop_assert!((*v as f64 - want).abs() < 1e-4 * (1.0 + want.abs()));
        }
    }
}
