//! Property tests for the loss coefficients, similarity statistics, and
//! pipeline invariants.

use proptest::prelude::*;
use rhythmlab_core::agcacl::{align_coeffs, class_weights, repel_coeffs, similarity_matrix};
use rhythmlab_core::dsp;
use rhythmlab_core::eval::{macro_metrics, ConfusionMatrix};
use rhythmlab_core::ingest::{MajorClass, Segment};
use rhythmlab_core::rng;
use rhythmlab_core::Tensor;

fn is_probability_vector(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn class_weights_form_a_probability_vector(freqs in prop::collection::vec(1.0f64..1e5, 2..8)) {
        let alpha = class_weights(&freqs, 0.1, 1e-6);
        prop_assert!(is_probability_vector(&alpha));
        // argmax of the weights is the argmin of the frequencies
        let amax = alpha.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let fmin = freqs.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        prop_assert_eq!(amax, fmin);
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(seed in 0u64..500, n in 6usize..40, c in 2usize..5) {
        let mut r = rng::rng_from(seed);
        let d = 7;
        let data: Vec<f64> = (0..n * d).map(|_| rng::standard_normal(&mut r)).collect();
        let emb = Tensor::new(&[n, d], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let (s, excluded) = similarity_matrix(&emb, &labels, c).unwrap();
        prop_assert_eq!(excluded, 0);
        for a in 0..c {
            prop_assert!(s.at2(a, a) <= 1.0 + 1e-12, "S[{}][{}] = {}", a, a, s.at2(a, a));
            for b in 0..c {
                prop_assert!(s.at2(a, b) >= -1.0 - 1e-12 && s.at2(a, b) <= 1.0 + 1e-12);
                prop_assert_eq!(s.at2(a, b), s.at2(b, a));
            }
        }
        // coefficient vectors derived from it are probability vectors
        let align = align_coeffs(&s, 0.1, 1e-6);
        prop_assert!(is_probability_vector(&align));
        let repel = repel_coeffs(&s, 0.01).unwrap();
        for a in 0..c {
            let row: Vec<f64> = (0..c).map(|b| repel.at2(a, b)).collect();
            prop_assert!(is_probability_vector(&row));
            prop_assert_eq!(repel.at2(a, a), 0.0);
        }
    }

    #[test]
    fn f2_favors_recall_per_class(counts in prop::collection::vec(0u64..40, 9)) {
        let total: u64 = counts.iter().sum();
        prop_assume!(total > 0);
        let cm = ConfusionMatrix::from_counts(3, counts.clone()).unwrap();
        let _ = macro_metrics(&cm).unwrap();
        for k in 0..3 {
            let tp = counts[k * 3 + k] as f64;
            let fn_: f64 = (0..3).filter(|&p| p != k).map(|p| counts[k * 3 + p] as f64).sum();
            let fp: f64 = (0..3).filter(|&t| t != k).map(|t| counts[t * 3 + k] as f64).sum();
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            if p > 0.0 && r > 0.0 {
                let f1 = 2.0 * p * r / (p + r);
                let f2 = 5.0 * p * r / (4.0 * p + r);
                prop_assert_eq!(f2 >= f1, r >= p, "class {}: P={} R={}", k, p, r);
            }
        }
    }

    #[test]
    fn zscore_output_is_standardized(seed in 0u64..300, n in 8usize..256) {
        let mut r = rng::rng_from(seed);
        let x: Vec<f64> = (0..n).map(|_| rng::standard_normal(&mut r) * 7.0 - 3.0).collect();
        let z = dsp::zscore(&x);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn windows_are_exact_and_never_exceed_the_segment(len in 0usize..9000, fs in 3u32..30) {
        let mut data = Tensor::zeros(&[18, len.max(1)]);
        for (i, v) in data.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let seg = Segment {
            subject: "s".into(),
            index: 0,
            start: 0,
            aux_label: "(N".into(),
            class: MajorClass::SinusRhythm,
            data,
        };
        let windows = dsp::slice_windows(&seg, fs);
        let expect_len = 2 * fs as usize;
        let mut emitted = 0usize;
        for w in &windows {
            prop_assert_eq!(w.data.shape()[1], expect_len);
            emitted += expect_len;
        }
        prop_assert!(emitted <= seg.len().max(1));
        prop_assert_eq!(windows.len(), seg.len().max(1) / expect_len);
    }

    #[test]
    fn augmentation_identity_spec_is_identity(seed in 0u64..200) {
        let mut r = rng::rng_from(seed);
        let len = 64;
        let mut ecg = Tensor::zeros(&[12, len]);
        let mut iegm = Tensor::zeros(&[6, len]);
        for v in ecg.data_mut().iter_mut().chain(iegm.data_mut().iter_mut()) {
            *v = rng::standard_normal(&mut r);
        }
        let sample = dsp::Sample {
            ecg,
            iegm,
            label: MajorClass::SinusRhythm,
            source: rhythmlab_core::ingest::WindowId { subject: "s".into(), segment: 0, window: 0 },
        };
        let out = dsp::augment(&sample, &dsp::AugmentationSpec::identity(), &mut rng::rng_from(seed ^ 1)).unwrap();
        prop_assert_eq!(out.ecg, sample.ecg);
        prop_assert_eq!(out.iegm, sample.iegm);
    }
}
