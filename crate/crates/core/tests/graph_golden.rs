use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msdial::graph::{build_digit_model, build_feature_mlp, insert_ms_dial, ArchitectureSpec, ModelGraph};

fn golden(name: &str, model: &ModelGraph) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    let actual = model.describe();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, expected, "{name} drifted from its golden description");
}

#[test]
fn digit_model_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_digit_model(&ArchitectureSpec::digits(10, 3), &mut rng).unwrap();
    golden("digits.txt", &model);
    golden("digits_dial.txt", &insert_ms_dial(&model, 4).unwrap());
}

#[test]
fn feature_mlp_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = build_feature_mlp(&ArchitectureSpec::features(65, 2), &mut rng).unwrap();
    golden("features.txt", &model);
    golden("features_dial.txt", &insert_ms_dial(&model, 3).unwrap());
    let bn = build_feature_mlp(&ArchitectureSpec::features(65, 2).with_batchnorm(true), &mut rng).unwrap();
    golden("features_bn.txt", &bn);
    golden("features_bn_dial.txt", &insert_ms_dial(&bn, 3).unwrap());
}
