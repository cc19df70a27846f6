//! Frozen-feature linear probe, few-shot episodes and classifier
//! fine-tuning.

mod fewshot;
mod finetune;
mod probe;

pub use fewshot::{few_shot_eval, FewShotConfig, FewShotEpisode, FewShotResult, QUERIES_PER_CLASS};
pub use finetune::{classifier_logits, finetune_classifier, Classifier, FinetuneConfig, HEAD};
pub use probe::{fit_linear, linear_probe, LinearClassifier, ProbeConfig, ProbeResult};

use crate::data::DatasetRecord;
use crate::error::Result;
use crate::model::Model;
use crate::parallel::Exec;
use serde::Serialize;
use serde_json::json;

/// Global features of every record, in record order.
pub fn extract_features(model: &Model<f32>, exec: Exec, records: &[DatasetRecord]) -> Result<Vec<Vec<f32>>> {
    exec.try_map(records.len(), |i| model.global_feature(&records[i].points))
}

/// Probe trained on `train` features, scored on `test`.
pub fn probe_model(
    model: &Model<f32>,
    exec: Exec,
    train: &[DatasetRecord],
    test: &[DatasetRecord],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let tx = extract_features(model, exec, train)?;
    let vx = extract_features(model, exec, test)?;
    let ty: Vec<usize> = train.iter().map(|r| r.label).collect();
    let vy: Vec<usize> = test.iter().map(|r| r.label).collect();
    linear_probe(&tx, &ty, &vx, &vy, num_classes, cfg)
}

/// `{accuracy, per_class, confusion, num_train, num_test, config_digest}`.
pub fn result_json(result: &ProbeResult, config_digest: &str) -> serde_json::Value {
    let mut v = serde_json::to_value(result).expect("probe results serialise");
    v["config_digest"] = json!(config_digest);
    v
}

/// Any serialisable result with the digest attached.
pub fn tagged_json<T: Serialize>(result: &T, config_digest: &str) -> serde_json::Value {
    let mut v = serde_json::to_value(result).expect("results serialise");
    v["config_digest"] = json!(config_digest);
    v
}

pub const CSV_HEADER: &str = "experiment,accuracy,num_train,num_test,config_digest";

pub fn csv_row(experiment: &str, result: &ProbeResult, config_digest: &str) -> String {
    format!(
        "{experiment},{:.6},{},{},{config_digest}",
        result.accuracy, result.num_train, result.num_test
    )
}
