use maskscope::aes::{hamming_weight, mask_shares, sbox, sbox_inv, HW_COUNTS};
use maskscope::dataset::{class16_members, LabeledDataset, LeakageModel, Split};
use maskscope::interp::{
    expand_class16, hw_bin_counts, patched_activations, patched_forward, pca_fit, recover_share_hw_from_scores,
    PatchSpec, Pin, Rotation,
};
use maskscope::metrics::{perceived_information, softmax, ClassPrior};
use maskscope::nn::{init_model, Activation, Checkpoint, Init, MlpSpec};
use maskscope::rng::seeded;
use maskscope::sim::TraceSet;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = seeded(seed);
    Array2::from_shape_fn((rows, cols), |_| r.sample::<f64, _>(StandardNormal))
}

fn spec(width: usize, hidden: Vec<usize>, elu: bool, classes: usize) -> MlpSpec {
    MlpSpec {
        input_width: width,
        layer_widths: hidden,
        activation: if elu { Activation::Elu } else { Activation::Relu },
        init: if elu { Init::RandomUniform } else { Init::HeUniform },
        n_classes: classes,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn shares_recombine_to_the_secret(secret: u8, d in 2usize..6, seed: u64) {
        let v = mask_shares(secret, d, &mut seeded(seed)).unwrap();
        prop_assert_eq!(v.shares().iter().fold(0u8, |a, &s| a ^ s), secret);
        prop_assert_eq!(v.recombine(), secret);
        prop_assert_eq!(v.order(), d);
    }

    #[test]
    fn sbox_is_a_bijection_with_its_inverse(x: u8) {
        prop_assert_eq!(sbox_inv(sbox(x)), x);
        prop_assert_eq!(hamming_weight(x) as u32, x.count_ones());
    }

    #[test]
    fn hw_bins_are_largest_remainder_binomial(n in 256usize..20_000) {
        let c = hw_bin_counts(n);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        let exact: Vec<f64> = HW_COUNTS.iter().map(|&k| n as f64 * k as f64 / 256.0).collect();
        for h in 0..9 {
            prop_assert!((c[h] as f64 - exact[h]).abs() < 1.0);
        }
        // every bin rounded up has a remainder at least as large as any bin rounded down
        let rem = |h: usize| exact[h] - exact[h].floor();
        for up in (0..9).filter(|&h| c[h] as f64 > exact[h].floor()) {
            for down in (0..9).filter(|&h| c[h] as f64 == exact[h].floor() && rem(h) > 0.0) {
                prop_assert!(rem(up) >= rem(down) - 1e-9);
            }
        }
    }

    #[test]
    fn recovered_histogram_matches_bins_and_order(n in 256usize..3000, seed: u64) {
        let mut r = seeded(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let est = recover_share_hw_from_scores(&scores, Pin::Low, PatchSpec::identity(0)).unwrap();
        prop_assert_eq!(est.histogram(), hw_bin_counts(n).to_vec());
        // bins are monotone in the score
        for i in 0..n {
            for j in 0..n.min(64) {
                if scores[i] < scores[j] {
                    prop_assert!(est.values[i] <= est.values[j]);
                }
            }
        }
        let high = recover_share_hw_from_scores(&scores, Pin::High, PatchSpec::identity(0)).unwrap();
        for (a, b) in est.values.iter().zip(&high.values) {
            prop_assert_eq!(*a, 8 - *b);
        }
    }

    #[test]
    fn identity_patch_is_bit_exact(seed in 0u64..1000, elu: bool, depth in 1usize..4, layer_pick: usize) {
        let model = init_model(&spec(7, vec![9; depth], elu, 9), seed).unwrap();
        let x = gaussian(64, 7, seed + 1);
        let layer = layer_pick % depth;
        let acts = model.hidden_activations(x.view(), layer).unwrap();
        let basis = pca_fit(acts.view(), 3, layer).unwrap();
        let plain = model.logits(x.view()).unwrap();
        let patched = patched_forward(&model, x.view(), &basis, &PatchSpec::identity(layer)).unwrap();
        prop_assert!(plain.iter().zip(patched.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rotation_there_and_back_is_a_no_op(seed in 0u64..1000, angle in -6.3f64..6.3) {
        let model = init_model(&spec(6, vec![10, 10], false, 9), seed).unwrap();
        let x = gaussian(50, 6, seed + 2);
        let acts = model.hidden_activations(x.view(), 1).unwrap();
        let basis = pca_fit(acts.view(), 4, 1).unwrap();
        let mut coords = basis.project(acts.view()).unwrap();
        let fwd = Rotation { pc_i: 1, pc_j: 3, angle };
        let back = Rotation { angle: -angle, ..fwd };
        let start = coords.clone();
        for mut row in coords.rows_mut() {
            fwd.apply(&mut row);
            back.apply(&mut row);
        }
        for (a, b) in coords.iter().zip(start.iter()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
        let patch = PatchSpec { layer_index: 1, fixed_coords: vec![], rotation: Some(fwd) };
        let patched = patched_activations(&model, x.view(), &basis, &patch).unwrap();
        for (a, b) in patched.iter().zip(acts.iter()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn pca_project_reconstruct_is_idempotent(seed: u64, k in 1usize..6) {
        let x = gaussian(80, 6, seed);
        let basis = pca_fit(x.view(), k, 0).unwrap();
        let once = basis.reconstruct(basis.project(x.view()).unwrap().view()).unwrap();
        let twice = basis.reconstruct(basis.project(once.view()).unwrap().view()).unwrap();
        for (a, b) in once.iter().zip(twice.iter()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed: u64, scale in 0.1f64..500.0) {
        let logits = gaussian(20, 9, seed) * scale;
        let p = softmax(logits.view());
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pi_never_exceeds_label_entropy(seed: u64) {
        let mut r = seeded(seed);
        let p = softmax((gaussian(300, 9, seed) * 3.0).view());
        let labels: Vec<usize> = (0..300).map(|_| r.random_range(0..9)).collect();
        let prior = ClassPrior::binomial_hw();
        let pi = perceived_information(p.view(), &labels, &prior).unwrap();
        prop_assert!(pi <= prior.entropy_bits() + 1e-12);
    }

    #[test]
    fn class16_expansion_preserves_mass_within_sets(seed: u64) {
        let mut r = seeded(seed);
        let mut q = Array2::from_shape_fn((10, 16), |_| r.random::<f64>() + 1e-3);
        for mut row in q.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let p = expand_class16(q.view()).unwrap();
        for (i, row) in p.rows().into_iter().enumerate() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            for (c, ys) in class16_members().iter().enumerate() {
                let mass: f64 = ys.iter().map(|&y| row[y as usize]).sum();
                prop_assert!((mass - q[[i, c]]).abs() < 1e-12);
                let first = row[ys[0] as usize];
                prop_assert!(ys.iter().all(|&y| row[y as usize] == first));
            }
        }
    }

    #[test]
    fn dataset_round_trip(n in 1usize..40, len in 1usize..12, seed: u64, hw: bool) {
        let mut r = seeded(seed);
        let traces = TraceSet {
            samples: gaussian(n, len, seed),
            plaintext: (0..n).map(|_| r.random()).collect(),
            key: (0..n).map(|_| r.random()).collect(),
        };
        let model = if hw { LeakageModel::Hw } else { LeakageModel::Id };
        let ds = LabeledDataset::new(traces, model, Split::Attack);
        let bytes = ds.to_bytes();
        let back = LabeledDataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_files_are_rejected(cut in 1usize..200, seed: u64) {
        let model = init_model(&spec(4, vec![5], true, 9), seed).unwrap();
        let bytes = Checkpoint { epoch: 3, model, optimizer: None }.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Checkpoint::from_bytes(&bytes[..keep]).is_err());
    }
}
