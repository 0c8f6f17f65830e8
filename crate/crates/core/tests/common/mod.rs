#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use dcseg::dataio::{load_model, model_hash, save_model};
use dcseg::numerics::ParamVector;
use dcseg::segmenter::{pretrain, PretrainConfig};

pub struct Pretrained {
    pub params: Arc<ParamVector>,
    pub path: PathBuf,
    pub hash: String,
    pub validation_iou: Option<f64>,
}

/// The default pretrained model, trained once and cached under the cargo
/// target tmp dir keyed by the config.
pub fn pretrained() -> &'static Pretrained {
    static MODEL: OnceLock<Pretrained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = PretrainConfig::default();
        let key = model_hash(serde_json::to_string(&cfg).unwrap().as_bytes());
        let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("pretrained-{}.dcsg", &key[..16]));
        if let Ok((params, hash)) = load_model(&path) {
            return Pretrained { params: Arc::new(params), path, hash, validation_iou: None };
        }
        let (params, report) = pretrain(&cfg).expect("pretraining");
        // write then rename so concurrent test binaries never see a partial file
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_model(&tmp, &params).expect("save model");
        std::fs::rename(&tmp, &path).expect("rename model");
        let (params, hash) = load_model(&path).expect("reload model");
        Pretrained { params: Arc::new(params), path, hash, validation_iou: Some(report.validation_iou) }
    })
}
