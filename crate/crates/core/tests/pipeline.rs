//! End-to-end checks through the public library API.

use provts::eval::evaluate_model;
use provts::ingest::{parse_log, write_csv, write_jsonl, LogFormat};
use provts::model::{fit_model, ModelConfig, TrainedModel};
use provts::synth::{generate, Preset, SynthConfig};
use provts::transform::{build_dataset, FeatureTensor, TransformConfig};
use provts::{Environment, Error, FeatureSchema, Scale};

fn traces(env: Environment, n: usize, seed: u64) -> Vec<provts::SessionTrace> {
    generate(&SynthConfig::preset(Preset::Spaces3), n, seed, env).unwrap()
}

fn tensor(env: Environment, n: usize, seed: u64) -> FeatureTensor {
    let schema = FeatureSchema::for_environment(env);
    build_dataset(&traces(env, n, seed), &schema, &TransformConfig::default()).unwrap()
}

#[test]
fn logs_round_trip_through_both_formats() {
    let env = Environment::Immersive;
    let schema = FeatureSchema::for_environment(env);
    let original = traces(env, 2, 3);

    let mut csv = Vec::new();
    write_csv(&mut csv, &schema, &original).unwrap();
    let from_csv = parse_log(csv.as_slice(), LogFormat::Csv, env, &schema).unwrap();

    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &schema, &original).unwrap();
    let from_jsonl = parse_log(jsonl.as_slice(), LogFormat::Jsonl, env, &schema).unwrap();

    let config = TransformConfig::default();
    let a = build_dataset(&original, &schema, &config).unwrap();
    let b = build_dataset(&from_csv, &schema, &config).unwrap();
    let c = build_dataset(&from_jsonl, &schema, &config).unwrap();
    assert_eq!(a.len(), b.len());
    let diff = |x: &FeatureTensor, y: &FeatureTensor| {
        x.data.iter().zip(y.data.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    };
    assert!(diff(&a, &b) < 1e-9);
    assert!(diff(&a, &c) < 1e-9);
}

#[test]
fn saved_models_predict_like_the_original() {
    let train = tensor(Environment::Desktop, 3, 1);
    let test = tensor(Environment::Desktop, 1, 2);
    for kind in ["knn", "rocket"] {
        let config: ModelConfig = serde_json::from_value(serde_json::json!({ "kind": kind })).unwrap();
        let model = fit_model(&train, Scale::Space, &config, 5).unwrap();
        let reloaded = TrainedModel::from_bytes(&model.to_bytes().unwrap()).unwrap();
        let p = model.predict(&test).unwrap();
        let q = reloaded.predict(&test).unwrap();
        assert_eq!(p.labels, q.labels, "{kind}");
        assert_eq!(p.confidence, q.confidence, "{kind}");
        assert_eq!(model.id().unwrap(), reloaded.id().unwrap());
    }
}

#[test]
fn holdout_evaluation_checks_the_schema() {
    let train = tensor(Environment::Immersive, 3, 1);
    let config: ModelConfig = serde_json::from_value(serde_json::json!({ "kind": "knn", "k": 1 })).unwrap();
    let model = fit_model(&train, Scale::Space, &config, 0).unwrap();

    let report = evaluate_model(&model, &train).unwrap();
    assert_eq!(report.folds, 1);
    assert_eq!(report.n, train.len());
    assert_eq!(report.accuracy, 1.0);

    let other = tensor(Environment::Desktop, 1, 1);
    assert!(matches!(evaluate_model(&model, &other), Err(Error::SchemaMismatch(_))));
}
