mod common;

use common::{synthetic, tiny_model_config};
use image::{ImageFormat, Rgb, RgbImage};
use std::io::Cursor;
use uirate::data::{load_manifest, preprocess_image, ManifestSchema, Split};
use uirate::train::{self, evaluate_model, run_ablation, AblationAxis, AblationSpec, Checkpoint, ModelConfig};
use uirate::{ActivationKind, Error};

fn bits(m: &uirate::metrics::MetricsReport) -> Vec<u64> {
    let mut v = vec![m.mae.to_bits(), m.mse.to_bits(), m.rmse.to_bits()];
    v.extend(m.r2.map(f64::to_bits));
    v.extend(m.pearson_r.map(f64::to_bits));
    v
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 16, 2, 32);
    let out = train::train(&m, &tiny_model_config()).unwrap();
    let path = dir.path().join("ck.json");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let idx: Vec<usize> = (0..m.len()).collect();
    let a = evaluate_model(&out.checkpoint.to_model().unwrap(), &m, &idx).unwrap();
    let b = evaluate_model(&loaded.to_model().unwrap(), &m, &idx).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn checkpoint_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 8, 2, 32);
    let mut cfg = tiny_model_config();
    cfg.epochs = 1;
    let ck = train::train(&m, &cfg).unwrap().checkpoint;
    let mut raw: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
    raw["version"] = 2.into();
    assert!(matches!(Checkpoint::from_json(&raw.to_string()), Err(Error::Checkpoint(_))));
    let mut raw: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
    let blob = raw["weights"]["head.out.bias"].clone();
    raw["weights"]["head.extra.bias"] = blob;
    assert!(matches!(Checkpoint::from_json(&raw.to_string()), Err(Error::Checkpoint(_))));
    let mut raw: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
    raw["weights"].as_object_mut().unwrap().remove("image.proj.weight");
    assert!(matches!(Checkpoint::from_json(&raw.to_string()), Err(Error::Checkpoint(_))));
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 12, 5, 32);
    let cfg = tiny_model_config();
    let a = train::train(&m, &cfg).unwrap();
    let b = train::train(&m, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint, b.checkpoint);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(train::train(&m, &other).unwrap().history, a.history);
}

#[test]
fn desk_loss_mostly_non_increasing_over_protocol_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 32, 7, 64);
    let mut cfg = ModelConfig::desk();
    cfg.epochs = 20;
    let out = train::train(&m, &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
    let ok = losses.windows(2).filter(|w| w[1] <= w[0]).count();
    let frac = ok as f64 / (losses.len() - 1) as f64;
    assert!(frac >= 0.9, "non-increasing fraction {frac:.3}: {losses:?}");
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 8, 1, 32);
    let mut cfg = tiny_model_config();
    cfg.learning_rate = 1e200;
    cfg.epochs = 5;
    match train::train(&m, &cfg) {
        Err(Error::Training(msg)) => assert!(msg.contains("epoch") && msg.contains("batch"), "{msg}"),
        other => panic!("expected a training error, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn missing_validation_split_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 6, 1, 32).with_all_in(Split::Train);
    let mut cfg = tiny_model_config();
    cfg.epochs = 2;
    let out = train::train(&m, &cfg).unwrap();
    assert!(out.val_missing);
    assert!(out.history.iter().all(|r| r.split == Split::Train));
    assert_eq!(out.history.len(), 2);
}

#[test]
fn history_csv_has_one_row_per_epoch_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 32, 3, 32);
    let mut cfg = tiny_model_config();
    cfg.epochs = 2;
    let out = train::train(&m, &cfg).unwrap();
    let mut buf = Vec::new();
    train::write_history_csv(&out.history, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("epoch,split,loss"));
    assert_eq!(lines.len() - 1, out.history.len());
}

#[test]
fn ablation_is_deterministic_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic(dir.path(), 16, 4, 32);
    let mut cfg = tiny_model_config();
    cfg.epochs = 1;
    let specs = vec![
        AblationSpec::new("swish", AblationAxis::Activation(ActivationKind::Swish)),
        AblationSpec::new("none", AblationAxis::Activation(ActivationKind::Identity)),
        AblationSpec::new("resnet", AblationAxis::Unsupported("image encoder resnet50".into())),
    ];
    let a = run_ablation(&specs, &m, &cfg).unwrap();
    let b = run_ablation(&specs, &m, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 3);
    assert!(a.rows[2].metrics.is_none());
    assert_ne!(a.rows[0].metrics, a.rows[1].metrics);
}

#[test]
fn loader_accounts_for_every_row() {
    let dir = tempfile::tempdir().unwrap();
    synthetic(dir.path(), 5, 0, 16);
    let path = dir.path().join("manifest.csv");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("images/screen_00000.png,x,y,9,1\nimages/missing.png,x,y,3,1\nimages/screen_00001.png,x,y,3,-4\nshort,row\n");
    std::fs::write(&path, text).unwrap();
    let (m, r) = load_manifest(&path, ManifestSchema::Csv, 0).unwrap();
    assert_eq!(r.input_rows, 9);
    assert_eq!(r.accepted, 5);
    assert_eq!(m.len(), 5);
    assert_eq!(r.accepted + r.rejected, r.input_rows);
    assert_eq!(r.reasons.values().sum::<usize>(), 4);
}

fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).unwrap();
    out.into_inner()
}

#[test]
fn preprocessing_is_stable_under_reencoding() {
    let img = RgbImage::from_fn(48, 30, |x, y| Rgb([(x * 5) as u8, (y * 7) as u8, ((x + y) * 3) as u8]));
    let a = preprocess_image(&encode_png(&img), 32).unwrap();
    let back = RgbImage::from_fn(32, 32, |x, y| {
        let at = |c: usize| a.data()[c * 1024 + (y * 32 + x) as usize];
        let px = |c| ((at(c) * 0.5 + 0.5) * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    });
    let b = preprocess_image(&encode_png(&back), 32).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - q).abs() * 0.5 < 2.0 / 255.0);
    }
}

#[test]
fn already_sized_image_is_unchanged() {
    let img = RgbImage::from_fn(16, 16, |x, y| Rgb([(x * 13) as u8, (y * 11) as u8, 200]));
    let t = preprocess_image(&encode_png(&img), 16).unwrap();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            let want = px[c] as f64 / 255.0;
            let got = t.data()[c * 256 + (y * 16 + x) as usize] * 0.5 + 0.5;
            assert!((want - got).abs() <= 1.0 / 255.0);
        }
    }
}
