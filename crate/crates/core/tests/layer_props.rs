use proptest::prelude::*;
use thama_core::layers::{bce_single, conv1d, maxpool1d, Conv1DLayer};
use thama_core::models::{build_model, BatchViews, ModelSpec};
use thama_core::Tensor;

fn identity_layer(c: usize) -> Conv1DLayer<f64> {
    let mut k = vec![0.0; c * c * 3];
    for i in 0..c {
        k[(i * c + i) * 3 + 1] = 1.0;
    }
    Conv1DLayer::new(Tensor::new(&[c, c, 3], k).unwrap(), Tensor::zeros(&[c])).unwrap()
}

proptest! {
    #[test]
    fn identity_kernel_is_identity(c in 1usize..5, len in 1usize..20, seed in any::<u64>()) {
        let data: Vec<f64> = (0..c * len).map(|i| ((seed >> (i % 60)) & 0xff) as f64 - 128.0).collect();
        let x = Tensor::new(&[c, len], data).unwrap();
        prop_assert_eq!(conv1d(&x, &identity_layer(c)).unwrap(), x);
    }

    #[test]
    fn pooling_halves_length(c in 1usize..4, len in 2usize..40) {
        let x = Tensor::<f64>::zeros(&[c, len]);
        let y = maxpool1d(&x).unwrap();
        prop_assert_eq!(y.shape(), &[c, len / 2]);
    }

    #[test]
    fn bce_is_nonnegative(p in 0.0f64..=1.0, y in 0u8..=1) {
        prop_assert!(bce_single(p, y) >= 0.0);
    }

    #[test]
    fn probabilities_lie_in_open_interval(seed in any::<u64>(), scale in 0.0f64..4.0) {
        let m = build_model::<f64>(&ModelSpec::fcn(8).with_seed(seed)).unwrap();
        let x = Tensor::new(&[4, 8], (0..32u32).map(|i| scale * (f64::from(i) - 16.0) / 16.0).collect()).unwrap();
        let p = m.predict_batch(&BatchViews { x1: &x, x2: None }).unwrap();
        prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{:?}", p);
    }
}

#[test]
fn batch_of_one_equals_row_of_batch() {
    let spec = ModelSpec::concat(16, 16).with_seed(3);
    let m = build_model::<f32>(&spec).unwrap();
    let x1 = Tensor::new(&[5, 16], (0..80).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let x2 = Tensor::new(&[5, 16], (0..80).map(|i| (i as f32 * 0.11).cos()).collect()).unwrap();
    let all = m
        .predict_batch(&BatchViews {
            x1: &x1,
            x2: Some(&x2),
        })
        .unwrap();
    for (r, &expect) in all.iter().enumerate() {
        let a = Tensor::new(&[1, 16], x1.data()[r * 16..(r + 1) * 16].to_vec()).unwrap();
        let b = Tensor::new(&[1, 16], x2.data()[r * 16..(r + 1) * 16].to_vec()).unwrap();
        let one = m
            .predict_batch(&BatchViews {
                x1: &a,
                x2: Some(&b),
            })
            .unwrap();
        assert!((one[0] - expect).abs() <= 1e-6, "row {r}");
    }
}
