//! End-to-end checks on the registry models and the weight archive: parameter
//! counts against closed forms, pyramid shapes, and state that survives a trip
//! through the on-disk format bit for bit.

mod common;

use std::collections::BTreeMap;

use common::{model_params_oracle, random_tensor};
use hat_core::archive;
use hat_core::config::{load_config, RunConfig};
use hat_core::model::{build_variant, Model, MODEL_BIAS_HIDDEN, VARIANTS};
use hat_core::tensor::Tensor;
use hat_core::Graph;

const WIDTH_DIV: usize = 8;
const INPUT: usize = 224;
const CLASSES: usize = 1000;

fn build(name: &str, seed: u64) -> Model<f32> {
    build_variant(name, WIDTH_DIV, INPUT, CLASSES, seed).unwrap()
}

fn forward(model: &Model<f32>, x: &Tensor<f32>) -> Vec<f32> {
    let mut g = Graph::<f32>::inference();
    let v = g.constant(x.clone());
    let y = model.forward(&mut g, v).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn variant_param_counts_match_the_closed_form() {
    for spec in &VARIANTS {
        let mut model = build(spec.name, 5);
        let expected = model_params_oracle(
            spec.stem_mid as u64,
            [
                spec.channels[0] as u64,
                spec.channels[1] as u64,
                spec.channels[2] as u64,
                spec.channels[3] as u64,
            ],
            [
                spec.depths[0] as u64,
                spec.depths[1] as u64,
                spec.depths[2] as u64,
                spec.depths[3] as u64,
            ],
            [spec.heads[0] as u64, spec.heads[1] as u64],
            WIDTH_DIV as u64,
            INPUT as u64,
            spec.window_size as u64,
            spec.carrier_tokens as u64,
            CLASSES as u64,
            MODEL_BIAS_HIDDEN as u64,
        );
        assert_eq!(model.param_count(), expected, "{}", spec.name);
    }
}

#[test]
fn reduced_width_model_forwards_finitely_through_the_pyramid() {
    let model = build("faster_vit_1", 7);
    let x = random_tensor::<f32>(&[1, 3, INPUT, INPUT], 11);
    let mut g = Graph::<f32>::inference();
    let v = g.constant(x);
    let (logits, trace) = model.forward_features(&mut g, v).unwrap();
    let out = g.value(logits);
    assert_eq!(out.shape(), &[1, CLASSES]);
    assert!(out.data().iter().all(|v| v.is_finite()));
    let resolutions: Vec<usize> = trace.iter().map(|t| t.resolution).collect();
    let channels: Vec<usize> = trace.iter().map(|t| t.channels).collect();
    assert_eq!(resolutions, [56, 28, 14, 7]);
    assert_eq!(channels, [20, 40, 80, 160]);
}

#[test]
fn archived_state_restores_the_forward_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weights.hatw");

    let mut donor = build("faster_vit_1", 21);
    let mut other = build("faster_vit_1", 22);
    let x = random_tensor::<f32>(&[1, 3, INPUT, INPUT], 23);
    let donor_logits = forward(&donor, &x);
    assert_ne!(donor_logits, forward(&other, &x), "seeds should differ");

    archive::save(&path, &donor.state()).unwrap();
    let loaded = archive::load::<f32>(&path).unwrap();
    other.load_state(&loaded).unwrap();
    let restored = forward(&other, &x);
    assert!(donor_logits.iter().zip(&restored).all(|(a, b)| a.to_bits() == b.to_bits()));

    // Re-encoding the decoded map reproduces the file exactly.
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(archive::encode(&loaded), bytes);
}

#[test]
fn strict_loading_names_every_mismatch() {
    let mut model = build("faster_vit_1", 31);
    let state = model.state();

    let mut missing = state.clone();
    let key = missing.keys().next().unwrap().clone();
    missing.remove(&key);
    let err = model.load_state(&missing).unwrap_err().to_string();
    assert!(err.contains("missing") && err.contains(&key), "{err}");

    let mut extra = state.clone();
    extra.insert("stowaway".to_string(), Tensor::zeros(&[1]));
    let err = model.load_state(&extra).unwrap_err().to_string();
    assert!(err.contains("stowaway"), "{err}");

    let mut reshaped = state.clone();
    let (key, t) = reshaped.iter().find(|(_, t)| t.len() > 1).map(|(k, t)| (k.clone(), t.clone())).unwrap();
    reshaped.insert(key.clone(), Tensor::zeros(&[t.len()]));
    let err = model.load_state(&reshaped).unwrap_err().to_string();
    assert!(err.contains("shape mismatch") && err.contains(&key), "{err}");

    // The failed loads must not have corrupted the model.
    model.load_state(&state).unwrap();
}

#[test]
fn archive_preserves_every_float_bit_pattern() {
    let specials = vec![f32::NAN, -0.0, 0.0, f32::INFINITY, f32::NEG_INFINITY, f32::MIN_POSITIVE / 2.0];
    let mut m = BTreeMap::new();
    m.insert("specials".to_string(), Tensor::from_vec(&[6], specials).unwrap());
    let back = archive::decode::<f32>(&archive::encode(&m)).unwrap();
    assert!(back["specials"].bit_eq(&m["specials"]));
}

#[test]
fn configs_load_from_disk_and_name_their_violations() {
    let dir = tempfile::tempdir().unwrap();

    let good = dir.path().join("variant.json");
    std::fs::write(&good, r#"{"kind":"variant","name":"faster_vit_2","width_div":4}"#).unwrap();
    match load_config(&good).unwrap() {
        RunConfig::Variant(v) => {
            assert_eq!(v.name, "faster_vit_2");
            assert_eq!(v.width_div, 4);
        }
        other => panic!("expected variant config, got {other:?}"),
    }

    let bad = dir.path().join("stage.json");
    std::fs::write(&bad, r#"{"kind":"stage","feature_size":15,"window_size":7,"channels":8}"#).unwrap();
    let err = load_config(&bad).unwrap_err();
    assert_eq!(err.invariant_name(), Some("window_size_divides_feature_size"));
}
