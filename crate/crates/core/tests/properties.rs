//! Randomized invariants of the public API.

use approx::assert_abs_diff_eq;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmfpt::fpt::{
    fourier_prompt_forward, prompt_attention, real_fft, real_spectrum, FftAxis, FourierPromptParams, PromptSpace,
    SpectralMode, TokenBundle,
};
use mmfpt::metrics::{compute_miou, ConfusionMatrix};
use mmfpt::modality::{
    apply_modality_dropout, assign_fixed_missing_ratio, count_missing_conditions, enumerate_conditions,
    parse_condition, DropoutMode, ModalityEntry, ModalityKind, ModalitySpec, MultiModalSample, SpatialLayout,
    SwitchMask,
};

fn spec_with(n: usize, m: usize) -> ModalitySpec {
    let mut entries = Vec::new();
    for i in 0..n {
        entries.push(ModalityEntry::new(&format!("d{i}"), ModalityKind::Dense, 1 + i % 3, SpatialLayout::Grid));
    }
    for i in 0..m {
        entries.push(ModalityEntry::new(&format!("s{i}"), ModalityKind::Sparse, 1, SpatialLayout::Grid));
    }
    ModalitySpec::new(entries).unwrap()
}

fn matrix(rows: usize, cols: usize, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(r, c)| values[(r * cols + c) % values.len()])
}

fn variant() -> impl Strategy<Value = PromptSpace> {
    prop_oneof![
        Just(PromptSpace::SpectrumSpatial),
        Just(PromptSpace::SpectrumOnly),
        Just(PromptSpace::SpatialOnly)
    ]
}

fn axis() -> impl Strategy<Value = FftAxis> {
    prop_oneof![Just(FftAxis::Channel), Just(FftAxis::Token), Just(FftAxis::Both)]
}

proptest! {
    #[test]
    fn real_fft_is_linear(
        x in prop::collection::vec(-10.0f64..10.0, 1..48),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 1.7 + (seed % 97) as f64 + i as f64).sin()).collect();
        let mixed: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (fx, fy, fm) = (real_fft(&x).unwrap(), real_fft(&y).unwrap(), real_fft(&mixed).unwrap());
        for k in 0..x.len() {
            assert_abs_diff_eq!(fm[k], a * fx[k] + b * fy[k], epsilon = 1e-9);
        }
    }

    #[test]
    fn real_fft_of_a_constant_is_a_spike(c in -5.0f64..5.0, n in 1usize..40) {
        let f = real_fft(&vec![c; n]).unwrap();
        assert_abs_diff_eq!(f[0], c * n as f64, epsilon = 1e-9);
        for v in &f[1..] {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn real_spectrum_is_self_adjoint(
        rows in 1usize..6,
        cols in 1usize..9,
        xs in prop::collection::vec(-1.0f64..1.0, 1..40),
        ys in prop::collection::vec(-1.0f64..1.0, 1..40),
        axis in axis(),
    ) {
        let x = matrix(rows, cols, &xs);
        let y = matrix(rows, cols, &ys);
        let lhs = (&real_spectrum(x.view(), axis) * &y).sum();
        let rhs = (&x * &real_spectrum(y.view(), axis)).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn prompt_attention_is_a_convex_mix_of_features(
        nq in 1usize..5,
        nkv in 1usize..10,
        d in 1usize..8,
        values in prop::collection::vec(-2.0f64..2.0, 8..64),
        variant in variant(),
        axis in axis(),
    ) {
        let bundle = TokenBundle::new(
            matrix(nq, d, &values),
            matrix(nkv, d, &values[3..]),
            Some(matrix(1, d, &values[5..])),
            2,
        ).unwrap();
        let params = FourierPromptParams { w_q: matrix(d, d, &values[1..]), w_k: matrix(d, d, &values[2..]) };
        let mode = SpectralMode::new(variant, axis);
        let out = fourier_prompt_forward(&bundle, &params, mode).unwrap();
        prop_assert_eq!(out.prompts.dim(), (nq, d));
        prop_assert_eq!(&out.features, &bundle.features);
        prop_assert_eq!(&out.cls, &bundle.cls);
        let (_, cache) = prompt_attention(bundle.prompts.view(), bundle.features.view(), &params, mode).unwrap();
        for row in cache.attention.rows() {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
        // Each new prompt lies inside the per-channel range of the features.
        for c in 0..d {
            let col = bundle.features.column(c);
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.prompts.column(c) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn condition_enumeration_matches_the_count(n in 1usize..4, m in 0usize..3) {
        let spec = spec_with(n, m);
        let conditions = enumerate_conditions(&spec);
        prop_assert_eq!(conditions.len() as u64, count_missing_conditions(n, m).unwrap());
        prop_assert!(conditions[0].is_complete());
        for pair in conditions.windows(2) {
            prop_assert!(pair[0].present_count() >= pair[1].present_count());
        }
        for (i, c) in conditions.iter().enumerate() {
            prop_assert_eq!(c.canonical_id(), i);
            prop_assert_eq!(&parse_condition(&spec, &c.label()).unwrap(), c);
            prop_assert!(c.present_names().iter().any(|name| name.starts_with('d')));
        }
    }

    #[test]
    fn raw_draw_remap_only_touches_all_off_dense_bits(
        n in 1usize..4,
        m in 0usize..3,
        word in any::<u64>(),
    ) {
        let spec = spec_with(n, m);
        let raw: Vec<bool> = (0..n + m).map(|i| word >> i & 1 == 1).collect();
        let mask = SwitchMask::from_raw_draw(&spec, raw.clone()).unwrap();
        let dense_off = raw[..n].iter().all(|b| !b);
        for (i, (&got, &drawn)) in mask.bits().iter().zip(&raw).enumerate() {
            let expected = if i < n && dense_off { true } else { drawn };
            prop_assert_eq!(got, expected);
        }
        let text = mask.to_string();
        prop_assert_eq!(text.find('|'), Some(n));
    }

    #[test]
    fn dropout_zeroes_absent_inputs_and_is_idempotent(
        n in 1usize..3,
        m in 0usize..3,
        word in any::<u64>(),
        drop_tokens in any::<bool>(),
    ) {
        let spec = spec_with(n, m);
        let sample = MultiModalSample::new(
            spec.entries().iter().enumerate()
                .map(|(i, e)| Array3::from_elem((4, 4, e.channels), 0.25 + i as f64))
                .collect(),
        );
        let mode = if drop_tokens { DropoutMode::DropTokens } else { DropoutMode::ZeroFill };
        let full = SwitchMask::all_present(&spec);
        prop_assert_eq!(&apply_modality_dropout(&sample, &full, mode).unwrap(), &sample);

        let raw: Vec<bool> = (0..n + m).map(|i| word >> i & 1 == 1).collect();
        let mask = SwitchMask::from_raw_draw(&spec, raw).unwrap();
        let once = apply_modality_dropout(&sample, &mask, mode).unwrap();
        let twice = apply_modality_dropout(&once, &mask, mode).unwrap();
        prop_assert_eq!(&once, &twice);
        for (i, input) in once.inputs.iter().enumerate() {
            if mask.is_present(i) {
                prop_assert_eq!(&input.data, &sample.inputs[i].data);
                prop_assert!(!input.omitted);
            } else {
                prop_assert!(input.data.iter().all(|&v| v == 0.0));
                prop_assert_eq!(input.omitted, drop_tokens);
            }
        }
    }

    #[test]
    fn fixed_ratio_assigns_the_rounded_share(size in 0usize..200, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
        let spec = ModalitySpec::quad();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let assignment = assign_fixed_missing_ratio(size, ratio, &spec, &mut rng).unwrap();
        prop_assert_eq!(assignment.len(), size);
        let incomplete = assignment.iter().filter(|&&c| c != 0).count();
        prop_assert_eq!(incomplete, (ratio * size as f64).round() as usize);
        prop_assert!(assignment.iter().all(|&c| c < 12));
    }

    #[test]
    fn miou_is_bounded_and_perfect_on_identity(
        k in 2usize..6,
        truth in prop::collection::vec(0u8..6, 16),
        pred in prop::collection::vec(0u8..6, 16),
    ) {
        let clamp = |v: &[u8]| Array2::from_shape_fn((4, 4), |(r, c)| v[r * 4 + c] % k as u8);
        let (t, p) = (clamp(&truth), clamp(&pred));
        let mut cm = ConfusionMatrix::new(k);
        cm.add(&t, &p).unwrap();
        let miou = compute_miou(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&miou));
        prop_assert_eq!(cm.total(), 16);

        let mut exact = ConfusionMatrix::new(k);
        exact.add(&t, &t).unwrap();
        prop_assert_eq!(compute_miou(&exact).unwrap(), 1.0);

        // Fixing one wrong pixel never lowers that pixel's true-class IoU.
        if let Some(i) = (0..16).find(|&i| t.as_slice().unwrap()[i] != p.as_slice().unwrap()[i]) {
            let class = t.as_slice().unwrap()[i] as usize;
            let mut fixed = p.clone();
            fixed.as_slice_mut().unwrap()[i] = t.as_slice().unwrap()[i];
            let mut better = ConfusionMatrix::new(k);
            better.add(&t, &fixed).unwrap();
            let before = cm.per_class_iou()[class].unwrap_or(0.0);
            prop_assert!(better.per_class_iou()[class].unwrap() >= before);
        }
    }
}
