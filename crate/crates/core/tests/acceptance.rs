//! The eight acceptance criteria, run against the stock trained models.
//!
//! Every criterion prints one PASS/FAIL line. A red criterion does not fail
//! the test unless `RESINV_ACCEPTANCE_STRICT=1` is set; errors and panics
//! inside a criterion always do.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resinv_core::bimd::{bimd_latent, bimd_sample, identity_fusion, BimdConfig, FlowBundle, SignMode};
use resinv_core::data::{
    background_diversity, base_dataset, personalized_dataset, IdentityParams, RenderedImage, Sample, IDENTITY_COUNT,
    SCENE_CODES,
};
use resinv_core::denoiser::{weights_from_bytes, weights_to_bytes, Conditioning, DenoiserParams};
use resinv_core::inversion::{
    bench_inversions, invert_and_reconstruct, reconstruct_res, sample_ddim, InversionMethod, NtiSettings,
};
use resinv_core::pipeline::{
    enhance, personalized_only, run_ablation_suite, EnhanceRequest, StageFit, DEFAULT_GUIDANCE,
};
use resinv_core::schedule::{Latent, NoiseSchedule};
use resinv_core::tensor::Tensor;

use common::{fd, median};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn guided(s: &Sample, w: f32) -> Conditioning {
    let mut c = Conditioning::scene(s.record.scene_code)
        .with_identity(s.record.identity)
        .with_guidance(w);
    if let Some(p) = s.record.control {
        c = c.with_control(p.mask());
    }
    c
}

fn base_cond(s: &Sample, w: f32) -> Conditioning {
    let mut c = Conditioning::scene(s.record.scene_code).with_guidance(w);
    if let Some(p) = s.record.control {
        c = c.with_control(p.mask());
    }
    c
}

fn random_identity(rng: &mut ChaCha8Rng) -> IdentityParams {
    IdentityParams::from_index(rng.random_range(0..IDENTITY_COUNT)).unwrap()
}

fn requests(steps: usize) -> Vec<EnhanceRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..20)
        .map(|i| {
            let scene = rng.random_range(0..SCENE_CODES);
            EnhanceRequest::new(scene, random_identity(&mut rng), steps, 1000 + i)
        })
        .collect()
}

fn exact_replay(base: &DenoiserParams, pers: &DenoiserParams) -> Outcome {
    let mut pairs: Vec<(&DenoiserParams, RenderedImage, Conditioning)> = Vec::new();
    for s in personalized_dataset(10, 501).unwrap() {
        let c = guided(&s, 3.0);
        pairs.push((pers, s.image, c));
    }
    for s in base_dataset(10, 502).unwrap() {
        let c = base_cond(&s, 3.0);
        pairs.push((base, s.image, c));
    }
    let mut worst = 0.0f32;
    for (model, image, cond) in &pairs {
        let out = invert_and_reconstruct(model, image, cond, InversionMethod::Res, &NtiSettings::default()).unwrap();
        worst = worst.max(out.max_abs_diff(image));
    }
    outcome(
        worst <= 1e-4,
        format!("max-abs error {worst:.2e} over {} pairs (<= 1e-4)", pairs.len()),
    )
}

fn error_ordering(pers: &DenoiserParams) -> Outcome {
    let nti = NtiSettings::default();
    let (mut res, mut nt, mut dd) = (Vec::new(), Vec::new(), Vec::new());
    for s in personalized_dataset(20, 777).unwrap() {
        let c = guided(&s, 3.0);
        let run = |m| {
            invert_and_reconstruct(pers, &s.image, &c, m, &nti)
                .unwrap()
                .mse(&s.image) as f64
        };
        res.push(run(InversionMethod::Res));
        nt.push(run(InversionMethod::Nti { inner_iters: 10 }));
        dd.push(run(InversionMethod::Ddim));
    }
    let (r, n, d) = (median(res), median(nt), median(dd));
    outcome(
        r <= n && n < d,
        format!("median MSE res {r:.2e} <= nti {n:.2e} < ddim {d:.2e}"),
    )
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    sxy * sxy / (sxx * syy)
}

fn latency(pers: &DenoiserParams) -> Outcome {
    let images: Vec<_> = personalized_dataset(4, 778)
        .unwrap()
        .into_iter()
        .map(|s| {
            let c = guided(&s, 3.0);
            (s.image, c)
        })
        .collect();
    let iters = [1usize, 5, 10, 25];
    let mut methods = vec![InversionMethod::Ddim, InversionMethod::Res];
    methods.extend(iters.iter().map(|&n| InversionMethod::Nti { inner_iters: n }));
    let rows = bench_inversions(pers, &images, &methods, 5, &NtiSettings::default()).unwrap();
    let (ddim, res) = (rows[0].latency_s, rows[1].latency_s);
    let nti: Vec<f64> = rows[2..].iter().map(|r| r.latency_s).collect();
    let xs: Vec<f64> = iters.iter().map(|&n| n as f64).collect();
    let r2 = r_squared(&xs, &nti);
    let pass = ddim < res && res <= 2.5 * ddim && nti[2] >= 8.0 * res && r2 >= 0.95;
    outcome(
        pass,
        format!(
            "ddim {ddim:.4}s, res {res:.4}s ({:.2}x ddim, <= 2.5), nti@10 {:.4}s ({:.2}x res, >= 8), nti R^2 {r2:.4} (>= 0.95) over {{1,5,10,25}} = {:.4?}s",
            res / ddim,
            nti[2],
            nti[2] / res,
            nti
        ),
    )
}

fn degenerations(pers: &DenoiserParams) -> Outcome {
    let steps = pers.schedule().steps();
    let (mut plain, mut replay, mut only) = (0.0f32, 0.0f32, 0.0f32);
    for s in personalized_dataset(10, 901).unwrap() {
        let mut rng = ChaCha8Rng::seed_from_u64(s.record.scene_code as u64);
        let id = guided(&s, 3.0).with_identity(random_identity(&mut rng));
        let bundle = FlowBundle::invert(pers, &s.image, id.clone()).unwrap();
        let start = bundle.pivot.start();
        let latent_diff = |cfg: BimdConfig, reference: &Tensor| -> f32 {
            let out = bimd_latent(pers, &bundle, &cfg).unwrap();
            out.values.max_abs_diff(reference).unwrap()
        };
        let base = BimdConfig::for_steps(steps);
        let ddim = sample_ddim(pers, &start, bundle.cond_free()).unwrap();
        let none = BimdConfig {
            mss: steps,
            lambda_bkwd: 0.0,
            lambda_fwd: 0.0,
            ..base
        };
        plain = plain.max(latent_diff(none, &ddim.values));
        let rec = reconstruct_res(pers, &bundle.residuals, &start, bundle.cond_free()).unwrap();
        let backward_only = BimdConfig {
            mss: steps,
            lambda_bkwd: 1.0,
            lambda_fwd: 0.0,
            sign_mode: SignMode::Verbatim,
            ..base
        };
        replay = replay.max(bimd_sample(pers, &bundle, &backward_only).unwrap().max_abs_diff(&rec));
        let custom = sample_ddim(pers, &start, &id).unwrap();
        only = only.max(latent_diff(BimdConfig { mss: 0, ..base }, &custom.values));
    }
    outcome(
        plain <= 1e-6 && replay <= 1e-5 && only <= 1e-6,
        format!("over 10 bundles: plain DDIM {plain:.1e} (<= 1e-6), replay {replay:.1e} (<= 1e-5), mss=0 {only:.1e}"),
    )
}

fn pipeline_direction(base: &DenoiserParams, pers: &DenoiserParams, reqs: &[EnhanceRequest]) -> Outcome {
    let (mut wins, mut enh, mut po) = (0, Vec::new(), Vec::new());
    for q in reqs {
        let r = enhance(q, base, pers).unwrap();
        let p = personalized_only(pers, q).unwrap();
        if r.fits[2].error <= StageFit::measure(&p, &q.target).error {
            wins += 1;
        }
        enh.push(r.enhanced);
        po.push(p);
    }
    let (de, dp) = (background_diversity(&enh).unwrap(), background_diversity(&po).unwrap());
    let need = (reqs.len() * 7).div_ceil(10);
    outcome(
        wins >= need && de >= dp,
        format!(
            "enhanced fits at least as well on {wins}/{} seeds (>= {need}); diversity {de:.4} vs personalized-only {dp:.4}",
            reqs.len()
        ),
    )
}

fn ablation_direction(base: &DenoiserParams, pers: &DenoiserParams, reqs: &[EnhanceRequest]) -> Outcome {
    let report = run_ablation_suite(base, pers, reqs).unwrap();
    let err = |s: &str| report.row(s).unwrap().identity_error;
    let (fin, swap, based, fwd, bkwd) = (
        err("final"),
        err("after-swap"),
        err("after-base"),
        err("ab-fwd"),
        err("ab-bkwd"),
    );
    let much_higher = based >= swap + 1.0;
    let close = (swap - fwd).abs() <= 0.05 + 0.1 * swap.max(fwd);
    let best = [swap, based, fwd, bkwd].iter().all(|&e| fin <= e);
    outcome(
        much_higher && close && best,
        format!(
            "after-base {based:.3} >> after-swap {swap:.3} [{much_higher}], after-swap ~ ab-fwd {fwd:.3} [{close}], final {fin:.3} best (ab-bkwd {bkwd:.3}) [{best}]"
        ),
    )
}

fn fusion(pers: &DenoiserParams) -> Outcome {
    let steps = pers.schedule().steps();
    let sweep = [0, steps / 4, steps / 2, 3 * steps / 4, steps];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut per_point = vec![Vec::new(); sweep.len()];
    for a in personalized_dataset(10, 5000).unwrap() {
        let b = Conditioning::scene(a.record.scene_code)
            .with_identity(random_identity(&mut rng))
            .with_guidance(DEFAULT_GUIDANCE);
        let frames = identity_fusion(pers, &a.image, &b, &sweep, &BimdConfig::for_steps(steps)).unwrap();
        for (i, f) in frames.iter().enumerate() {
            per_point[i].push(f.box_mse(&a.image) as f64);
        }
    }
    let med: Vec<f64> = per_point.into_iter().map(median).collect();
    let ok = 1 + med.windows(2).filter(|w| w[1] >= w[0]).count();
    outcome(
        ok >= 4,
        format!("median box MSE over mss {sweep:?} = {med:.4?}; non-decreasing at {ok}/5 points (>= 4)"),
    )
}

fn schedule_invariants(schedule: &NoiseSchedule) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let mut product = 1.0f64;
    for t in 1..=schedule.steps() {
        product *= schedule.alpha(t);
        if ((schedule.alpha_bar(t) - product) / product).abs() > 1e-7 {
            return Err(format!("alpha_bar({t}) is not the running product"));
        }
        let row = |rng: &mut ChaCha8Rng| {
            Tensor::row((0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).unwrap()
        };
        let (z, eps) = (Latent::new(row(&mut rng), t), row(&mut rng));
        let prev = schedule.ddim_step(&z, &eps, t).map_err(|e| e.to_string())?;
        let back = schedule.ddim_inverse_step(&prev, &eps, t).map_err(|e| e.to_string())?;
        let err = back.values.max_abs_diff(&z.values).unwrap();
        if err > 1e-5 {
            return Err(format!("step/inverse round trip off by {err:e} at t={t}"));
        }
        let implied = schedule.implied_eps(&z, &prev, t).map_err(|e| e.to_string())?;
        let err = implied.max_abs_diff(&eps).unwrap();
        if err > 1e-5 {
            return Err(format!("implied eps off by {err:e} at t={t}"));
        }
    }
    let x0 = Tensor::row(vec![0.25; n]).unwrap();
    let q0 = schedule
        .q_sample(&x0, 0, &Tensor::row(vec![1.0; n]).unwrap())
        .map_err(|e| e.to_string())?;
    if q0.values != x0 {
        return Err("q_sample at t=0 is not the identity".into());
    }
    let back = NoiseSchedule::from_json(&schedule.to_json().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if &back != schedule {
        return Err("schedule JSON round trip differs".into());
    }
    Ok(())
}

fn numerics(pers: &DenoiserParams) -> Outcome {
    let ops = fd::check_all(11);
    let (worst_op, worst) = ops
        .iter()
        .copied()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let sched = schedule_invariants(pers.schedule());
    let bytes = weights_to_bytes(pers).unwrap();
    let again = weights_to_bytes(&weights_from_bytes(&bytes).unwrap()).unwrap();
    let bitwise = bytes == again;
    outcome(
        worst <= 1e-4 && sched.is_ok() && bitwise,
        format!(
            "{} ops, worst FD relative error {worst:.1e} ({worst_op}); schedule invariants {}; weight round trip bitwise {bitwise}",
            ops.len(),
            sched.err().unwrap_or_else(|| "hold for every t".into())
        ),
    )
}

/// Writes past the test harness's output capture, so the summary shows up
/// in a plain `cargo test` run.
fn report(line: std::fmt::Arguments) {
    let _ = writeln!(std::io::stderr().lock(), "{line}");
}

/// Name, time budget in seconds, and the check itself.
type Criterion<'a> = (&'static str, u64, Box<dyn Fn() -> Outcome + 'a>);

#[test]
fn acceptance() {
    let base = &common::base().0;
    let pers = &common::personalized().0;
    let reqs = requests(pers.schedule().steps());

    let criteria: Vec<Criterion> = vec![
        ("exact replay", 120, Box::new(|| exact_replay(base, pers))),
        ("error ordering", 600, Box::new(|| error_ordering(pers))),
        ("latency ordering and scaling", 900, Box::new(|| latency(pers))),
        ("sampler degenerations", 120, Box::new(|| degenerations(pers))),
        (
            "pipeline direction",
            900,
            Box::new(|| pipeline_direction(base, pers, &reqs)),
        ),
        (
            "ablation direction",
            600,
            Box::new(|| ablation_direction(base, pers, &reqs)),
        ),
        ("fusion monotonicity", 600, Box::new(|| fusion(pers))),
        ("numerics", 120, Box::new(|| numerics(pers))),
    ];

    let mut red = Vec::new();
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        let took = start.elapsed();
        let in_time = took <= Duration::from_secs(*budget);
        let pass = o.pass && in_time;
        report(format_args!(
            "[{}] {}. {name}: {} ({:.1}s of {budget}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64()
        ));
        if !pass {
            red.push(i + 1);
        }
    }
    report(format_args!(
        "acceptance: {}/{} criteria pass",
        criteria.len() - red.len(),
        criteria.len()
    ));
    if std::env::var("RESINV_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        assert!(red.is_empty(), "failing criteria: {red:?}");
    }
}
