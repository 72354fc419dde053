//! Acceptance suite: one PASS/FAIL line per primary criterion.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sepad_core::config::ExperimentConfig;
use sepad_core::dsp::{self, MixConfig, Spectrogram, StftConfig, StftPlan};
use sepad_core::metrics::{auc_from, omega, pauc_from};
use sepad_core::model::{SeparatorConfig, SeparatorNet};
use sepad_core::runner;
use sepad_core::scoring::{fit_gaussian, mahalanobis};
use sepad_core::training::{separation_loss, separation_loss_grad, LossWeights, TrainMode};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

// published rows: AUC(Target), AUC(Source), pAUC over bearing, fan, gearbox, slider, toycar, toytrain, valve
const TABLE: [(&str, [[f64; 7]; 3], f64); 6] = [
    (
        "proposed 14 class",
        [
            [69.24, 62.76, 59.84, 55.88, 45.96, 65.64, 48.76],
            [61.04, 58.60, 68.68, 65.88, 44.72, 76.76, 46.36],
            [58.05, 54.16, 55.05, 51.58, 48.89, 54.79, 48.89],
        ],
        56.00,
    ),
    (
        "proposed 6 class",
        [
            [69.52, 63.28, 62.12, 47.16, 44.32, 65.36, 47.48],
            [61.04, 55.64, 61.84, 60.28, 47.68, 77.52, 48.08],
            [54.16, 51.42, 52.84, 51.58, 48.68, 51.84, 48.79],
        ],
        54.58,
    ),
    (
        "conventional separation",
        [
            [67.96, 57.00, 56.36, 53.72, 47.00, 65.08, 48.00],
            [64.52, 57.96, 61.80, 61.64, 42.48, 74.64, 42.24],
            [56.32, 48.74, 51.79, 51.63, 47.84, 53.53, 48.63],
        ],
        53.99,
    ),
    (
        "auto-encoder",
        [
            [67.84, 55.48, 49.84, 42.16, 49.72, 63.04, 47.56],
            [57.92, 57.92, 53.12, 44.92, 43.24, 76.76, 39.48],
            [51.89, 51.42, 51.05, 51.05, 48.11, 53.00, 49.32],
        ],
        51.41,
    ),
    (
        "baseline A",
        [
            [61.40, 55.24, 69.34, 56.01, 33.75, 46.92, 46.25],
            [62.01, 67.71, 70.40, 66.51, 66.98, 76.63, 51.07],
            [57.58, 57.53, 55.65, 51.77, 48.77, 47.95, 52.42],
        ],
        55.35,
    ),
    (
        "baseline B",
        [
            [51.58, 42.70, 74.35, 68.11, 37.35, 39.99, 53.61],
            [54.43, 79.37, 81.82, 75.35, 63.01, 61.99, 55.69],
            [58.82, 53.44, 55.74, 49.05, 51.04, 48.21, 51.26],
        ],
        55.02,
    ),
];

fn table_omega() -> Outcome {
    let mut worst: f64 = 0.0;
    for (name, rows, published) in TABLE {
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        let got = omega(&values).map_err(|e| e.to_string())?;
        worst = worst.max((got - published).abs());
        ensure((got - published).abs() <= 0.1, || format!("{name}: {got:.3} vs {published:.2}"))?;
    }
    Ok(format!("6 rows, max |ΔΩ| = {worst:.4} pp"))
}

fn pair_count_auc(normal: &[f64], anomalous: &[f64]) -> f64 {
    let mut credit = 0.0;
    for &a in anomalous {
        for &n in normal {
            credit += if a > n {
                1.0
            } else if a == n {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (normal.len() * anomalous.len()) as f64
}

fn dense_pauc(normal: &[f64], anomalous: &[f64], max_fpr: f64) -> f64 {
    let mut thresholds: Vec<f64> = normal.iter().chain(anomalous).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    for t in thresholds {
        xs.push(normal.iter().filter(|&&s| s >= t).count() as f64 / normal.len() as f64);
        ys.push(anomalous.iter().filter(|&&s| s >= t).count() as f64 / anomalous.len() as f64);
    }
    // never evaluated exactly at a vertex, so vertical steps need no special casing
    let tpr_at = |x: f64| {
        let k = xs.partition_point(|&v| v < x);
        let (x0, x1, y0, y1) = (xs[k - 1], xs[k], ys[k - 1], ys[k]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    };
    // cells aligned to 1/n so the curve is linear inside each; midpoint rule is then exact per cell
    let cell = 1.0 / (normal.len() * 1000) as f64;
    let mut area = 0.0;
    let mut left = 0.0;
    while left < max_fpr {
        let right = (left + cell).min(max_fpr);
        area += (right - left) * tpr_at(0.5 * (left + right));
        left += cell;
    }
    let lo = max_fpr * max_fpr / 2.0;
    0.5 * (1.0 + (area - lo) / (max_fpr - lo))
}

fn auc_pauc_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.gen_range(1..=19);
        let m = rng.gen_range(1..=20 - n);
        let levels = rng.gen_range(2..8);
        let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(0..levels) as f64 * 0.25).collect() };
        let normal = draw(n);
        let anomalous = draw(m);
        let got = auc_from(&normal, &anomalous).map_err(|e| e.to_string())?;
        let want = pair_count_auc(&normal, &anomalous);
        ensure(got == want, || format!("case {case}: auc {got} vs pair count {want}"))?;
        let p = pauc_from(&normal, &anomalous, 0.1).map_err(|e| e.to_string())?;
        let q = dense_pauc(&normal, &anomalous, 0.1);
        worst = worst.max((p - q).abs());
        ensure((p - q).abs() <= 1e-9, || format!("case {case}: pauc {p} vs dense {q}"))?;
    }
    Ok(format!("500 tied sets, AUC exact, max |ΔpAUC| = {worst:.1e}"))
}

fn scalar_loss(y: &[f64], er: &Array2<f64>, ei: &Array2<f64>, t: &[f64], tr: &Array2<f64>, ti: &Array2<f64>, w: &LossWeights) -> f64 {
    let mut l1 = 0.0;
    for i in 0..y.len() {
        l1 += (t[i] - y[i]).abs();
    }
    let (mut re, mut im) = (0.0, 0.0);
    let (rows, cols) = er.dim();
    for r in 0..rows {
        for c in 0..cols {
            re += (tr[[r, c]].abs() - er[[r, c]].abs()).powi(2);
            im += (ti[[r, c]].abs() - ei[[r, c]].abs()).powi(2);
        }
    }
    let cells = (rows * cols) as f64;
    w.alpha * l1 / y.len() as f64 + w.beta * re / cells + w.gamma * im / cells
}

// keeps every coordinate at least `gap` away from a kink
fn away_from(x: f64, gap: f64) -> f64 {
    if x.abs() < gap {
        gap.copysign(if x == 0.0 { 1.0 } else { x }) * 2.0
    } else {
        x
    }
}

fn loss_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = LossWeights::default();
    let mut worst_value: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for case in 0..100 {
        let len = rng.gen_range(8..64);
        let (rows, cols) = (rng.gen_range(2..6), rng.gen_range(2..9));
        let mat = |rng: &mut ChaCha8Rng| Array2::from_shape_vec((rows, cols), gauss(rng, rows * cols)).unwrap();
        let t = gauss(&mut rng, len);
        let y: Vec<f64> = gauss(&mut rng, len).iter().zip(&t).map(|(e, tv)| tv + away_from(*e, 1e-3)).collect();
        let tspec = Spectrogram {
            real: mat(&mut rng),
            imag: mat(&mut rng),
        };
        let est = Spectrogram {
            real: mat(&mut rng).mapv(|v| away_from(v, 1e-3)),
            imag: mat(&mut rng).mapv(|v| away_from(v, 1e-3)),
        };
        let got = separation_loss(&y, &est, &t, &tspec, &w, true).map_err(|e| e.to_string())?;
        let want = scalar_loss(&y, &est.real, &est.imag, &t, &tspec.real, &tspec.imag, &w);
        let rel = (got - want).abs() / want.abs();
        worst_value = worst_value.max(rel);
        ensure(rel <= 1e-7, || format!("case {case}: loss {got} vs scalar {want}"))?;

        let g = separation_loss_grad(&y, &est, &t, &tspec, &w, true).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let f = |y: &[f64], est: &Spectrogram| scalar_loss(y, &est.real, &est.imag, &t, &tspec.real, &tspec.imag, &w);
        let mut check = |an: f64, plus: f64, minus: f64, what: String| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (an - fd).abs() / an.abs().max(1e-3);
            worst_grad = worst_grad.max(rel);
            ensure(rel <= 1e-5, || format!("case {case}: {what} analytic {an} vs fd {fd}"))
        };
        for i in 0..len {
            let mut yp = y.clone();
            let mut ym = y.clone();
            yp[i] += h;
            ym[i] -= h;
            check(g.d_wave[i], f(&yp, &est), f(&ym, &est), format!("d_wave[{i}]"))?;
        }
        for r in 0..rows {
            for c in 0..cols {
                for plane in 0..2 {
                    let mut ep = est.clone();
                    let mut em = est.clone();
                    let (pp, mm, an) = if plane == 0 {
                        (&mut ep.real, &mut em.real, g.d_real[[r, c]])
                    } else {
                        (&mut ep.imag, &mut em.imag, g.d_imag[[r, c]])
                    };
                    pp[[r, c]] += h;
                    mm[[r, c]] -= h;
                    check(an, f(&y, &ep), f(&y, &em), format!("plane {plane} [{r},{c}]"))?;
                }
            }
        }
    }
    Ok(format!(
        "100 tensors, max rel loss err {worst_value:.1e}, max rel grad err {worst_grad:.1e}"
    ))
}

fn mixing_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MixConfig::default();
    let plan = StftPlan::new(&StftConfig::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let len = rng.gen_range(400..4000);
        let gd = 10f64.powf(rng.gen_range(-3.0..0.0));
        let gn = 10f64.powf(rng.gen_range(-3.0..0.0));
        let d: Vec<f64> = gauss(&mut rng, len).iter().map(|v| v * gd).collect();
        let n: Vec<f64> = gauss(&mut rng, len).iter().map(|v| v * gn).collect();
        let s = dsp::match_db_scale(&d, &n, &cfg).map_err(|e| e.to_string())?;
        let scaled: Vec<f64> = n.iter().map(|v| v * s).collect();
        let level = 20.0 * (dsp::rms(&scaled) / dsp::rms(&d)).log10();
        worst = worst.max((level - cfg.delta_db).abs());
        ensure((level - cfg.delta_db).abs() <= 1e-9, || format!("case {case}: level {level} dB"))?;
        let silent = dsp::mix(&d, &n, 0.0, &plan).map_err(|e| e.to_string())?;
        let clean = plan.stft(&d).map_err(|e| e.to_string())?;
        let same = |a: &Array2<f64>, b: &Array2<f64>| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(
            silent.spec.real.dim() == clean.real.dim() && same(&silent.spec.real, &clean.real) && same(&silent.spec.imag, &clean.imag),
            || format!("case {case}: s=0 mixture differs from stft(d)"),
        )?;
    }
    Ok(format!("100 pairs, max level error {worst:.1e} dB, s=0 bit-exact"))
}

fn stft_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let plan = StftPlan::new(&StftConfig::default()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let x: Vec<f64> = (0..32_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let spec = plan.stft(&x).map_err(|e| e.to_string())?;
        let back = plan.istft(&spec, x.len()).map_err(|e| e.to_string())?;
        ensure(back.len() == x.len(), || format!("case {case}: length {}", back.len()))?;
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        ensure(err < 1e-6, || format!("case {case}: max error {err:.3e}"))?;
    }
    Ok(format!("50 waveforms of 2 s at 400/100, max error {worst:.1e}"))
}

fn correlated(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> (Vec<Vec<f64>>, DMatrix<f64>, DVector<f64>) {
    let a = DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { 0.0 } + 0.4 * rng.sample::<f64, _>(StandardNormal));
    let mu = DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0));
    let rows = (0..n)
        .map(|_| {
            let z = DVector::from_vec(gauss(rng, dim));
            (&a * z + &mu).iter().copied().collect()
        })
        .collect();
    (rows, a, mu)
}

fn gaussian_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dim = 8;

    let (rows, _, _) = correlated(&mut rng, 300, dim);
    let model = fit_gaussian(rows.iter().map(|r| r.as_slice()), 1e-6).map_err(|e| e.to_string())?;
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for j in 0..dim {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    let mut cov_err: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let c: f64 = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / rows.len() as f64;
            cov_err = cov_err.max((c - model.covariance[(i, j)]).abs());
        }
    }
    ensure(cov_err <= 1e-10, || format!("covariance differs from two-pass by {cov_err:.2e}"))?;
    let at_mean: Vec<f64> = model.mean.iter().copied().collect();
    let d0 = mahalanobis(&model, &at_mean).map_err(|e| e.to_string())?;
    ensure(d0 == 0.0, || format!("distance at mean = {d0:e}"))?;

    let b = DMatrix::from_fn(dim, dim, |i, j| if i == j { 2.0 } else { 0.0 } + 0.3 * rng.sample::<f64, _>(StandardNormal));
    let shift = DVector::from_fn(dim, |_, _| rng.gen_range(-5.0..5.0));
    let map = |v: &[f64]| -> Vec<f64> { (&b * DVector::from_column_slice(v) + &shift).iter().copied().collect() };
    let mapped: Vec<Vec<f64>> = rows.iter().map(|r| map(r)).collect();
    // a relative ridge shifts distances by O(ridge_rel · cond), so invariance is checked with a negligible one
    let model_a = fit_gaussian(rows.iter().map(|r| r.as_slice()), 1e-15).map_err(|e| e.to_string())?;
    let model_b = fit_gaussian(mapped.iter().map(|r| r.as_slice()), 1e-15).map_err(|e| e.to_string())?;
    let mut affine: f64 = 0.0;
    for _ in 0..200 {
        let q: Vec<f64> = model.mean.iter().map(|m| m + 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let da = mahalanobis(&model_a, &q).map_err(|e| e.to_string())?;
        let db = mahalanobis(&model_b, &map(&q)).map_err(|e| e.to_string())?;
        affine = affine.max((da - db).abs());
    }
    ensure(affine <= 1e-6, || format!("affine invariance off by {affine:.2e}"))?;

    let (fit_rows, a, mu) = correlated(&mut rng, 5000, dim);
    let chi = fit_gaussian(fit_rows.iter().map(|r| r.as_slice()), 1e-6).map_err(|e| e.to_string())?;
    let mean_sq = |rs: &[Vec<f64>]| -> Result<f64, String> {
        let mut s = 0.0;
        for r in rs {
            s += mahalanobis(&chi, r).map_err(|e| e.to_string())?.powi(2);
        }
        Ok(s / rs.len() as f64)
    };
    let in_sample = mean_sq(&fit_rows)?;
    let fresh: Vec<Vec<f64>> = (0..5000)
        .map(|_| (&a * DVector::from_vec(gauss(&mut rng, dim)) + &mu).iter().copied().collect())
        .collect();
    let held_out = mean_sq(&fresh)?;
    for (what, v) in [("fit set", in_sample), ("held-out", held_out)] {
        ensure((v / dim as f64 - 1.0).abs() <= 0.02, || format!("{what} mean d² = {v:.4}, dim {dim}"))?;
    }
    Ok(format!(
        "cov err {cov_err:.1e}, affine err {affine:.1e}, d(μ)=0, mean d² {in_sample:.3}/{held_out:.3} (dim 8)"
    ))
}

fn embedding_shape() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let stft = StftConfig {
        hop: 200,
        ..StftConfig::default()
    };
    let plan = StftPlan::new(&stft).map_err(|e| e.to_string())?;
    let x: Vec<f64> = (0..8000).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let feats = dsp::make_input_features(&plan.stft(&x).map_err(|e| e.to_string())?, None);
    ensure(SeparatorConfig::default().embedding_dim() == 192, || "default dim is not 192".into())?;
    let mut dims = Vec::new();
    for k in 0..5 {
        let channels = [4, 6, 8, 12, 16][rng.gen_range(0..5)];
        let heads = [1, 2].into_iter().filter(|h| channels % h == 0).nth(rng.gen_range(0..2)).unwrap_or(1);
        let cfg = SeparatorConfig {
            channels,
            num_blocks: rng.gen_range(2..4),
            attention_heads: heads,
            freq_downsample: rng.gen_range(1..5),
            dense_depth: rng.gen_range(1..3),
            ffn_mult: rng.gen_range(1..3),
            conv_kernel: [3, 5, 7][rng.gen_range(0..3)],
            ..SeparatorConfig::default()
        };
        let net = SeparatorNet::new(&cfg, &stft, k).map_err(|e| e.to_string())?;
        let e = net.embed(&feats).map_err(|e| e.to_string())?;
        ensure(e.len() == 3 * channels && cfg.embedding_dim() == 3 * channels, || {
            format!("config {k}: {} dims for {channels} channels", e.len())
        })?;
        dims.push(format!("{channels}→{}", e.len()));
    }
    Ok(format!("default 192; random configs {}", dims.join(", ")))
}

struct DeskRun {
    elapsed: Duration,
    omegas: Vec<(TrainMode, f64)>,
    worst_ratio: (String, f64),
}

fn desk_run(out: &Path) -> Result<DeskRun, String> {
    let mut cfg = ExperimentConfig::desk();
    cfg.out_dir = out.to_path_buf();
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let runs = runner::cmd_compare(&cfg, &TrainMode::ALL).map_err(|e| e.to_string())?;
    let mut worst_ratio = (String::new(), 0.0);
    for r in &runs {
        for (m, h) in &r.histories {
            let ratio = h.loss_ratio().ok_or("empty history")?;
            if ratio > worst_ratio.1 {
                worst_ratio = (format!("{}/{m}", r.mode), ratio);
            }
        }
    }
    Ok(DeskRun {
        elapsed: t0.elapsed(),
        omegas: runs.iter().map(|r| (r.mode, r.report.omega)).collect(),
        worst_ratio,
    })
}

fn gated_outputs(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy();
            if name == "scores.csv" || name.starts_with("report.") {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(files)
}

fn end_to_end(first: &Path) -> Outcome {
    let run = desk_run(first)?;
    let summary = run
        .omegas
        .iter()
        .map(|(m, o)| format!("{m} {:.2}%", 100.0 * o))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(run.elapsed < Duration::from_secs(20 * 60), || format!("took {:.0} s", run.elapsed.as_secs_f64()))?;
    for (m, o) in &run.omegas {
        ensure(*o > 0.55, || format!("{m} Ω = {o:.4}"))?;
    }
    ensure(run.worst_ratio.1 <= 0.5, || {
        format!("{} loss only fell to {:.3} of epoch 1", run.worst_ratio.0, run.worst_ratio.1)
    })?;
    let ordered = run.omegas.windows(2).all(|w| w[0].1 > w[1].1);
    Ok(format!(
        "{:.0} s; Ω {summary}; worst final/initial loss {:.3} ({}); reference ordering {} (not gated)",
        run.elapsed.as_secs_f64(),
        run.worst_ratio.1,
        run.worst_ratio.0,
        if ordered { "reproduced" } else { "not reproduced" }
    ))
}

fn determinism(first: &Path, second: &Path) -> Outcome {
    let a = gated_outputs(first)?;
    ensure(!a.is_empty(), || "first run produced no score or report files".into())?;
    desk_run(second)?;
    let b = gated_outputs(second)?;
    ensure(a.keys().eq(b.keys()), || "runs wrote different file sets".into())?;
    for (name, bytes) in &a {
        ensure(b[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} score/report files byte-identical", a.len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let first = work.path().join("run1");
    let second = work.path().join("run2");

    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        ("published Ω aggregation oracle", Duration::from_secs(1), Box::new(table_omega)),
        ("AUC/pAUC oracle equivalence", Duration::from_secs(10), Box::new(auc_pauc_oracles)),
        ("loss correctness", Duration::from_secs(30), Box::new(loss_correctness)),
        ("mixing contract", Duration::MAX, Box::new(mixing_contract)),
        ("STFT round trip", Duration::MAX, Box::new(stft_round_trip)),
        ("Gaussian/Mahalanobis suite", Duration::MAX, Box::new(gaussian_suite)),
        ("embedding shape", Duration::MAX, Box::new(embedding_shape)),
        ("end-to-end desk experiment", Duration::MAX, Box::new(|| end_to_end(&first))),
        ("determinism", Duration::MAX, Box::new(|| determinism(&first, &second))),
    ];

    // optional substring filters, as with the default harness
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, limit, check) in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t0 = Instant::now();
        let mut outcome = check();
        let elapsed = t0.elapsed();
        if outcome.is_ok() && elapsed > *limit {
            outcome = Err(format!("took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()));
        }
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.2} s]", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{:.2} s]", elapsed.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
