mod common;

use common::{fusion_path_error, image_encoder_error, op_cases, rng, text_encoder_error};
use uirate::text::TextEncoderKind;
use uirate::ActivationKind;

#[test]
fn every_op_at_ten_points() {
    let mut failures = Vec::new();
    for case in op_cases() {
        let mut worst = 0.0f64;
        for seed in 0..10 {
            worst = worst.max((case.run)(&mut rng(seed)).unwrap_or_else(|e| panic!("{}: {e}", case.name)));
        }
        if worst >= 1e-4 {
            failures.push(format!("{} {worst:.3e}", case.name));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}

#[test]
fn fusion_path() {
    for a in [ActivationKind::Swish, ActivationKind::Identity, ActivationKind::Gelu] {
        let e = fusion_path_error(1, a).unwrap();
        assert!(e < 1e-4, "{a}: {e}");
    }
}

#[test]
fn image_encoder_end_to_end() {
    let e = image_encoder_error(3).unwrap();
    assert!(e < 1e-3, "{e}");
}

#[test]
fn text_encoders_end_to_end() {
    for kind in [TextEncoderKind::Transformer, TextEncoderKind::SimpleRecurrent] {
        let e = text_encoder_error(kind, 4).unwrap();
        assert!(e < 1e-3, "{kind:?}: {e}");
    }
}
