#![allow(dead_code)]

pub mod fd;

use std::path::PathBuf;
use std::sync::OnceLock;

use resinv_core::denoiser::{load_weights, save_weights, DenoiserParams, ModelKind, TrainJob, TrainReport};
use sha2::{Digest, Sha256};

fn cache_path(job: &TrainJob) -> PathBuf {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION"));
    h.update(serde_json::to_vec(job).unwrap());
    let key = hex::encode(&h.finalize()[..8]);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("model-{key}.rinv"))
}

/// Trains the stock model of `kind`, reusing a copy cached under the target
/// directory when the job is unchanged.
pub fn stock_model(kind: ModelKind) -> (DenoiserParams, TrainReport) {
    let job = TrainJob::standard(kind);
    let path = cache_path(&job);
    let report_path = path.with_extension("json");
    if let (Ok(p), Ok(r)) = (load_weights(&path), std::fs::read(&report_path)) {
        if let Ok(r) = serde_json::from_slice(&r) {
            return (p, r);
        }
    }
    let start = std::time::Instant::now();
    let (params, report) = job.run().expect("training");
    eprintln!(
        "trained {kind:?} model in {:.0}s, final loss {:.4}",
        start.elapsed().as_secs_f64(),
        report.final_loss
    );
    std::fs::write(&report_path, serde_json::to_vec(&report).unwrap()).unwrap();
    let tmp = path.with_extension("tmp");
    save_weights(&params, &tmp).unwrap();
    std::fs::rename(&tmp, &path).unwrap();
    (params, report)
}

pub fn base() -> &'static (DenoiserParams, TrainReport) {
    static M: OnceLock<(DenoiserParams, TrainReport)> = OnceLock::new();
    M.get_or_init(|| stock_model(ModelKind::Base))
}

pub fn personalized() -> &'static (DenoiserParams, TrainReport) {
    static M: OnceLock<(DenoiserParams, TrainReport)> = OnceLock::new();
    M.get_or_init(|| stock_model(ModelKind::Personalized))
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
