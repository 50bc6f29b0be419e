//! Wall-clock comparison of the three inversion engines.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{ddim_invert, nti_invert, reconstruct_ddim, reconstruct_nti, reconstruct_res, res_invert};
use crate::data::RenderedImage;
use crate::denoiser::{Conditioning, DenoiserParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InversionMethod {
    Ddim,
    Res,
    Nti { inner_iters: usize },
}

impl InversionMethod {
    pub fn name(&self) -> &'static str {
        match self {
            InversionMethod::Ddim => "ddim",
            InversionMethod::Res => "res",
            InversionMethod::Nti { .. } => "nti",
        }
    }

    pub fn inner_iters(&self) -> usize {
        match self {
            InversionMethod::Nti { inner_iters } => *inner_iters,
            _ => 0,
        }
    }
}

impl fmt::Display for InversionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InversionMethod::Nti { inner_iters } => write!(f, "nti:{inner_iters}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `ddim`, `res`, `nti` (default inner iterations) or `nti:<n>`.
impl FromStr for InversionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ddim" => Ok(InversionMethod::Ddim),
            "res" => Ok(InversionMethod::Res),
            "nti" => Ok(InversionMethod::Nti {
                inner_iters: NtiSettings::default().inner_iters,
            }),
            other => other
                .strip_prefix("nti:")
                .and_then(|n| n.parse().ok())
                .map(|inner_iters| InversionMethod::Nti { inner_iters })
                .ok_or_else(|| Error::invalid(format!("unknown inversion method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtiSettings {
    pub inner_iters: usize,
    pub lr: f32,
    pub early_stop_eps: f32,
}

impl Default for NtiSettings {
    fn default() -> Self {
        NtiSettings {
            inner_iters: 10,
            lr: 1e-2,
            early_stop_eps: 1e-5,
        }
    }
}

/// One benchmark row. `latency_s` covers inversion plus reconstruction of
/// a single image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub method: String,
    #[serde(rename = "T")]
    pub steps: usize,
    pub inner_iters: usize,
    pub latency_s: f64,
    pub max_abs_err: f32,
    pub mse: f32,
}

/// Inverts and reconstructs one image with `method`.
pub fn invert_and_reconstruct(
    model: &DenoiserParams,
    image: &RenderedImage,
    cond: &Conditioning,
    method: InversionMethod,
    nti: &NtiSettings,
) -> Result<RenderedImage> {
    match method {
        InversionMethod::Ddim => {
            let traj = ddim_invert(model, image, cond)?;
            reconstruct_ddim(model, &traj.start(), cond)
        }
        InversionMethod::Res => {
            let free = cond.customization_free();
            let traj = ddim_invert(model, image, &free)?;
            let track = res_invert(model, &traj, &free)?;
            reconstruct_res(model, &track, &traj.start(), &free)
        }
        InversionMethod::Nti { inner_iters } => {
            let traj = ddim_invert(model, image, cond)?;
            let nulls = nti_invert(model, &traj, cond, inner_iters, nti.lr, nti.early_stop_eps)?;
            reconstruct_nti(model, &nulls, &traj.start(), cond)
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs every method over every image `repeats` times after one untimed
/// warm-up pass, which also decides the errors (the engines are
/// deterministic). Methods are interleaved within each repeat so slow drift
/// of the machine does not favour one of them. Latency is the median over
/// repeats of the mean per-image time.
pub fn bench_inversions(
    model: &DenoiserParams,
    images: &[(RenderedImage, Conditioning)],
    methods: &[InversionMethod],
    repeats: usize,
    nti: &NtiSettings,
) -> Result<Vec<InversionReport>> {
    if repeats < 3 {
        return Err(Error::invalid(format!("repeats must be at least 3, got {repeats}")));
    }
    if images.is_empty() {
        return Err(Error::invalid("benchmark needs at least one image"));
    }
    let n = images.len() as f64;
    let mut errors = Vec::with_capacity(methods.len());
    for &method in methods {
        let (mut max_abs, mut mse) = (0.0f64, 0.0f64);
        for (image, cond) in images {
            let out = invert_and_reconstruct(model, image, cond, method, nti)?;
            max_abs += out.max_abs_diff(image) as f64;
            mse += out.mse(image) as f64;
        }
        errors.push(((max_abs / n) as f32, (mse / n) as f32));
    }
    let mut times = vec![Vec::with_capacity(repeats); methods.len()];
    for _ in 0..repeats {
        for (m, &method) in methods.iter().enumerate() {
            let start = Instant::now();
            for (image, cond) in images {
                invert_and_reconstruct(model, image, cond, method, nti)?;
            }
            times[m].push(start.elapsed().as_secs_f64() / n);
        }
    }
    Ok(methods
        .iter()
        .zip(times)
        .zip(errors)
        .map(|((method, times), (max_abs_err, mse))| {
            let latency_s = median(times);
            log::info!("{method}: median {latency_s:.4}s per image");
            InversionReport {
                method: method.name().to_string(),
                steps: model.schedule().steps(),
                inner_iters: method.inner_iters(),
                latency_s,
                max_abs_err,
                mse,
            }
        })
        .collect())
}

pub fn reports_to_csv(reports: &[InversionReport]) -> String {
    let mut out = String::from("method,T,inner_iters,latency_s,max_abs_err,mse\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{:.6},{:e},{:e}\n",
            r.method, r.steps, r.inner_iters, r.latency_s, r.max_abs_err, r.mse
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_parse() {
        assert_eq!("ddim".parse::<InversionMethod>().unwrap(), InversionMethod::Ddim);
        assert_eq!(" res".parse::<InversionMethod>().unwrap(), InversionMethod::Res);
        assert_eq!(
            "nti".parse::<InversionMethod>().unwrap(),
            InversionMethod::Nti { inner_iters: 10 }
        );
        let m: InversionMethod = "nti:25".parse().unwrap();
        assert_eq!(m.inner_iters(), 25);
        assert_eq!(m.to_string(), "nti:25");
        assert!("nti:x".parse::<InversionMethod>().is_err());
        assert!("bogus".parse::<InversionMethod>().is_err());
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_header_and_rows() {
        let r = InversionReport {
            method: "res".into(),
            steps: 50,
            inner_iters: 0,
            latency_s: 0.25,
            max_abs_err: 1e-6,
            mse: 2e-12,
        };
        let csv = reports_to_csv(std::slice::from_ref(&r));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("method,T,inner_iters,latency_s,max_abs_err,mse"));
        assert!(lines.next().unwrap().starts_with("res,50,0,0.250000,"));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"T\":50"));
        assert_eq!(serde_json::from_str::<InversionReport>(&json).unwrap(), r);
    }
}
