use std::path::Path;

use serde_json::{json, Value};

/// Smallest configuration that still exercises every stage.
pub fn tiny(out: &Path) -> Value {
    json!({
        "phantom": { "dims": [16, 16, 16] },
        "dataset": { "n_disease": 12, "n_nondisease": 12 },
        "model": { "filters": [2, 4] },
        "train": { "max_epochs": 2, "patience": 1 },
        "unlearn": { "epochs": 1 },
        "pretrain_epochs": 1,
        "saliency": { "samples": 2 },
        "saliency_subjects": 2,
        "out_dir": out,
    })
}

pub fn with(mut base: Value, patch: Value) -> Value {
    for (k, v) in patch.as_object().expect("object patch") {
        base[k] = v.clone();
    }
    base
}
