//! Structural invariants of grouping, decoding and mask handling.

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slotfeat::autograd::Tape;
use slotfeat::decoding::{
    MlpDecoder, MlpDecoderConfig, PixelDecoder, PixelDecoderConfig, SoftMaskStack,
    TransformerDecoder, TransformerDecoderConfig,
};
use slotfeat::features::PatchFeatureMap;
use slotfeat::grouping::{draw_slot_noise, GroupingConfig, SlotAttention, SlotInitMode};
use slotfeat::masks::{block_columns, block_pattern, boxes_from_masks, resize_masks, LabelMap};
use slotfeat::nn::ParamStore;

const SIMPLEX: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(i, j)| a[[perm[i], j]])
}

fn permute_cols(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(i, j)| a[[i, perm[j]]])
}

/// A slot count together with a random permutation of that many slots.
fn slots_and_perm(max: usize) -> impl Strategy<Value = (usize, Vec<usize>)> {
    (1..max).prop_flat_map(|k| (Just(k), Just((0..k).collect::<Vec<usize>>()).prop_shuffle()))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn assert_row_simplex(w: &Array2<f64>) {
    for row in w.rows() {
        assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(
            (row.sum() - 1.0).abs() <= SIMPLEX,
            "row sums to {}",
            row.sum()
        );
    }
}

struct Grouper {
    store: ParamStore,
    sa: SlotAttention,
}

fn grouper(seed: u64, feature_dim: usize, slot_dim: usize) -> Grouper {
    let mut store = ParamStore::new();
    let sa = SlotAttention::new(
        &mut store,
        GroupingConfig::new(feature_dim, slot_dim),
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    Grouper { store, sa }
}

fn group(
    g: &Grouper,
    features: &Array2<f64>,
    noise: &Array2<f64>,
    iterations: usize,
) -> (Array2<f64>, Array2<f64>) {
    let mut t = Tape::new();
    g.store.bind(&mut t);
    let f = t.constant(features.clone());
    let k = noise.nrows();
    let out = g.sa.forward(&mut t, f, k, iterations, Some(noise)).unwrap();
    (t.value(out.slots).clone(), t.value(out.attention).clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn slot_attention_is_equivariant_and_simplex(
        seed in 0u64..10_000,
        (k, perm) in slots_and_perm(6),
        iterations in 1usize..4,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grouper(seed, 5, 8);
        let features = random(&mut rng, 9, 5);
        let noise = draw_slot_noise(k, 8, &mut rng);

        let (slots, attn) = group(&g, &features, &noise, iterations);
        let (pslots, pattn) = group(&g, &features, &permute_rows(&noise, &perm), iterations);
        // Attention is N × K: permuting slots permutes its columns.
        prop_assert_eq!(pslots, permute_rows(&slots, &perm));
        prop_assert_eq!(pattn, permute_cols(&attn, &perm));
        assert_row_simplex(&attn);

        let (again, _) = group(&g, &features, &noise, iterations);
        prop_assert_eq!(again, slots);
    }

    #[test]
    fn mlp_decoder_masks_follow_slots(seed in 0u64..10_000, (k, perm) in slots_and_perm(6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = MlpDecoder::new(
            &mut store,
            MlpDecoderConfig { slot_dim: 6, feature_dim: 4, grid: (3, 2), hidden: 7 },
            &mut rng,
        );
        let slots = random(&mut rng, k, 6);
        let run = |s: &Array2<f64>| {
            let mut t = Tape::new();
            store.bind(&mut t);
            let v = t.constant(s.clone());
            let out = dec.forward(&mut t, v).unwrap();
            (t.value(out.reconstruction).clone(), t.value(out.masks).clone())
        };
        let (y, m) = run(&slots);
        let (py, pm) = run(&permute_rows(&slots, &perm));
        prop_assert!(max_abs_diff(&y, &py) <= 1e-12);
        prop_assert_eq!(pm, permute_cols(&m, &perm));
        assert_row_simplex(&m);
    }

    #[test]
    fn transformer_decoder_is_causal_and_slot_symmetric(
        seed in 0u64..10_000,
        (k, perm) in slots_and_perm(5),
        cut in 0usize..6,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dec = TransformerDecoder::new(
            &mut store,
            TransformerDecoderConfig { slot_dim: 5, feature_dim: 4, grid: (2, 3), layers: 2, heads: 2, mlp_hidden: 8 },
            &mut rng,
        )
        .unwrap();
        let slots = random(&mut rng, k, 5);
        let targets = random(&mut rng, 6, 4);
        let run = |s: &Array2<f64>, h: &Array2<f64>| {
            let mut t = Tape::new();
            store.bind(&mut t);
            let v = t.constant(s.clone());
            let out = dec.forward(&mut t, v, h).unwrap();
            (t.value(out.reconstruction).clone(), t.value(out.masks).clone())
        };
        let (y, m) = run(&slots, &targets);
        assert_row_simplex(&m);

        // Changing targets from `cut` on leaves outputs up to `cut` untouched.
        let mut edited = targets.clone();
        for r in cut..6 {
            for c in 0..4 {
                edited[[r, c]] = rng.random_range(-3.0..3.0);
            }
        }
        let (ey, _) = run(&slots, &edited);
        for r in 0..=cut.min(5) {
            prop_assert_eq!(ey.row(r), y.row(r), "position {} changed", r);
        }

        let (py, pm) = run(&permute_rows(&slots, &perm), &targets);
        prop_assert!(max_abs_diff(&y, &py) <= 1e-12);
        prop_assert!(max_abs_diff(&pm, &permute_cols(&m, &perm)) <= 1e-12);
    }

    #[test]
    fn resized_masks_stay_on_the_simplex(
        seed in 0u64..10_000,
        k in 1usize..5,
        (r, c) in (1usize..6, 1usize..6),
        (h, w) in (1usize..20, 1usize..20),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, r * c, k);
        let mut t = Tape::new();
        let v = t.constant(logits);
        let p = t.softmax_rows(v);
        let stack = SoftMaskStack::from_position_weights(t.value(p), (r, c)).unwrap();
        let (err, negative) = stack.simplex_error();
        prop_assert!(err <= SIMPLEX && !negative);
        let big = resize_masks(&stack, h, w).unwrap();
        prop_assert_eq!(big.masks.dim(), (k, h, w));
        let (err, negative) = big.simplex_error();
        prop_assert!(err <= 1e-5 && !negative);
    }

    #[test]
    fn block_pattern_partitions_the_image(m in 1usize..30, h in 30usize..70, w in 8usize..70) {
        let l = block_pattern(m, h, w).unwrap();
        let mut counts = vec![0usize; m];
        for &v in l.labels.iter() {
            prop_assert!((v as usize) < m);
            counts[v as usize] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c > 0));
        prop_assert_eq!(counts.iter().sum::<usize>(), h * w);
        // Every label is one rectangle: box area equals pixel count.
        for (label, b) in boxes_from_masks(&l) {
            prop_assert_eq!(b.area(), counts[label as usize]);
        }
    }

    #[test]
    fn boxes_are_tight(cells in proptest::collection::vec(0u32..3, 48)) {
        let l = LabelMap::new(Array2::from_shape_vec((6, 8), cells).unwrap());
        for (label, b) in boxes_from_masks(&l) {
            let mask = l.binary_mask(label);
            for ((y, x), &on) in mask.indexed_iter() {
                if on {
                    prop_assert!(x >= b.xmin && x < b.xmax && y >= b.ymin && y < b.ymax);
                }
            }
            // Each boundary row and column holds at least one pixel of the label.
            prop_assert!((b.xmin..b.xmax).any(|x| mask[[b.ymin, x]]));
            prop_assert!((b.xmin..b.xmax).any(|x| mask[[b.ymax - 1, x]]));
            prop_assert!((b.ymin..b.ymax).any(|y| mask[[y, b.xmin]]));
            prop_assert!((b.ymin..b.ymax).any(|y| mask[[y, b.xmax - 1]]));
        }
    }
}

#[test]
fn block_columns_follow_the_mask_count_rule() {
    let expected = [(4, 2), (8, 2), (9, 3), (11, 3), (15, 3), (16, 4), (24, 4)];
    for (m, cols) in expected {
        assert_eq!(block_columns(m), cols, "{m} masks");
        let l = block_pattern(m, 64, 64).unwrap();
        let top_row: std::collections::BTreeSet<u32> = l.labels.row(0).iter().copied().collect();
        assert_eq!(top_row.len(), cols, "{m} masks");
    }
}

#[test]
fn pixel_decoder_masks_are_a_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let dec = PixelDecoder::new(
        &mut store,
        PixelDecoderConfig {
            slot_dim: 4,
            channels: 3,
            image_channels: 3,
            broadcast: (2, 2),
            output: (8, 8),
            kernel: 3,
            layers: 3,
        },
        &mut rng,
    )
    .unwrap();
    let slots = random(&mut rng, 3, 4);
    let mut t = Tape::new();
    store.bind(&mut t);
    let v = t.constant(slots);
    let out = dec.forward(&mut t, v).unwrap();
    assert_eq!(t.shape(out.reconstruction), (64, 3));
    assert_row_simplex(t.value(out.masks));
}

#[test]
fn grouping_on_feature_maps_is_seed_deterministic() {
    let g = grouper(1, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = PatchFeatureMap::new(random(&mut rng, 6, 4), (2, 3), "test").unwrap();
    let run = |seed| {
        g.sa.group(
            &g.store,
            &map,
            4,
            3,
            SlotInitMode::Sampled,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    };
    let (a, aa) = run(7);
    let (b, ba) = run(7);
    assert_eq!(a, b);
    assert_eq!(aa, ba);
    let (c, _) = run(8);
    assert_ne!(a, c);
    // The public attention map is K × N with unit column sums.
    for col in aa.weights.columns() {
        assert!((col.sum() - 1.0).abs() <= SIMPLEX);
    }
}
