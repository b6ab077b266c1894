use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msdial::graph::{build_feature_mlp, insert_ms_dial, ArchitectureSpec, Routing};
use msdial::layers::DomainSegments;
use msdial::losses::{source_ce, target_entropy, Reduction};
use msdial::{grad_check, Tensor};

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), values.iter().cycle().take(n).copied().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_chain(rows in 1usize..6, inner in 1usize..6, cols in 1usize..6,
                    vals in prop::collection::vec(-2.0f64..2.0, 36)) {
        let a = tensor(&[rows, inner], &vals);
        let b = tensor(&[inner, cols], &vals[3..]);
        let report = grad_check(
            |t, x| {
                let b = t.constant(b.clone());
                let y = t.matmul(x, b)?;
                let y = t.exp(y)?;
                Ok(t.mean(y))
            },
            &a,
            1e-5,
        );
        prop_assert!(report.passes(1e-4), "{:?}", report.max_rel_err);
    }

    #[test]
    fn conv_padding_and_stride(stride in 1usize..3, padding in 0usize..3, size in 3usize..7,
                               vals in prop::collection::vec(-1.0f64..1.0, 64)) {
        let x = tensor(&[2, 2, size, size], &vals);
        let w = tensor(&[3, 2, 3, 3], &vals[5..]);
        let report = grad_check(
            |t, k| {
                let x = t.constant(x.clone());
                let y = t.conv2d(x, k, None, stride, padding)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &w,
            1e-5,
        );
        prop_assert!(report.passes(1e-4), "{:?}", report.max_rel_err);
    }

    #[test]
    fn log_softmax_with_large_logits(vals in prop::collection::vec(-300.0f64..300.0, 12)) {
        let x = tensor(&[3, 4], &vals);
        let report = grad_check(
            |t, x| {
                let lp = t.log_softmax(x)?;
                target_entropy(t, lp, Reduction::Sum)
            },
            &x,
            1e-5,
        );
        prop_assert!(!report.nan_detected);
    }
}

#[test]
fn full_model_input_gradient_with_alignment_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = ArchitectureSpec::features(3, 2).with_input_dim(4).with_hidden(vec![5, 4]);
    let mut model = insert_ms_dial(&build_feature_mlp(&spec, &mut rng).unwrap(), 3).unwrap();
    model.set_dropout_enabled(false);
    let x = tensor(&[9, 4], &[0.3, -1.2, 2.2, 0.7, -0.4, 1.9, -2.5, 0.05, 1.1, -0.8, 0.6]);
    let segments = DomainSegments::ordered(&[3, 3, 3]).unwrap();
    let report = grad_check(
        |t, xv| {
            let mut m = model.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let pass = m.forward(t, xv, Routing::Train(&segments), &mut rng)?;
            let lp = t.log_softmax(pass.logits)?;
            let src = t.slice_rows(lp, 0, 6)?;
            let tgt = t.slice_rows(lp, 6, 3)?;
            let ls = source_ce(t, src, &[0, 1, 2, 2, 1, 0], Reduction::Mean)?;
            let lt = target_entropy(t, tgt, Reduction::Mean)?;
            let lt = t.scale(lt, 0.1);
            t.add(ls, lt)
        },
        &x,
        1e-5,
    );
    assert!(report.passes(1e-4), "max rel err {:.3e} at {:?}", report.max_rel_err, report.worst_index);
}
