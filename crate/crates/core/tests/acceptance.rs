//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (uncaptured) and then asserts the outcome.
//!
//! The heavy training criteria run for several minutes on one core; tests
//! take a shared lock so their timings are not distorted by each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use jointseg::ablate::{ablate, Cell, Grid};
use jointseg::config::Config;
use jointseg::encoder::{stage_channels, stage_level, Encoder, EncoderConfig, FusionMode};
use jointseg::gradcheck::run_suite;
use jointseg::loss::{dia_loss, dscc_loss, lr_consistency_weight, sm_loss};
use jointseg::metrics::{seg_metrics, stereo_metrics, Averaging, ConfusionMatrix};
use jointseg::nn::{NormMode, ParamStore, Session};
use jointseg::train::{evaluate, load_data, train, RunDir};
use jointseg::worldgen::generate_dataset;
use jointseg::{Tape, Tensor, Var};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

const FLOOR: f64 = 1e-12;

/// Random per-pixel distributions `[C, H, W]`, with some entries pushed to zero.
fn prob_map(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let hw = h * w;
    let mut p: Vec<f64> = (0..c * hw).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
    for px in 0..hw {
        if (0..c).all(|k| p[k * hw + px] == 0.0) {
            p[px] = 1.0;
        }
        let z: f64 = (0..c).map(|k| p[k * hw + px]).sum();
        for k in 0..c {
            p[k * hw + px] /= z;
        }
    }
    p
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

// ---- scalar-loop oracles ----

fn nll_oracle(p: &[f64], labels: &[u8], w: &[f64]) -> f64 {
    let n = labels.len();
    let mut acc = 0.0;
    for px in 0..n {
        let q = p[labels[px] as usize * n + px];
        acc += w[px] * if q > FLOOR { q.ln() } else { FLOOR.ln() };
    }
    -acc / n as f64
}

fn kl_pairs_oracle(maps: &[Vec<f64>], hw: usize) -> f64 {
    let mut acc = 0.0;
    for r in 0..maps.len() {
        for s in 0..maps.len() {
            if r != s {
                for i in 0..maps[r].len() {
                    let a = if maps[r][i] > FLOOR { maps[r][i] } else { FLOOR };
                    let b = if maps[s][i] > FLOOR { maps[s][i] } else { FLOOR };
                    acc += a * (a / b).ln();
                }
            }
        }
    }
    acc / hw as f64
}

/// Residual between the left disparity and the right disparity sampled at
/// `u - d_left` (linear interpolation along the row), and its normalisation.
fn lr_oracle(dl: &[f64], dr: &[f64], valid: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut raw = vec![0.0; h * w];
    for y in 0..h {
        for u in 0..w {
            let i = y * w + u;
            let x = u as f64 - dl[i];
            if !valid[i] || x < 0.0 || x > (w - 1) as f64 {
                continue;
            }
            let left = x.floor() as usize;
            let sampled = if left == w - 1 {
                dr[y * w + left]
            } else {
                let f = x - left as f64;
                dr[y * w + left] * (1.0 - f) + dr[y * w + left + 1] * f
            };
            raw[i] = dl[i] - sampled;
        }
    }
    let norm = raw.iter().map(|r| 1.0 / (1.0 + (-r.abs()).exp())).collect();
    (raw, norm)
}

fn smooth_l1_oracle(pred: &[f64], target: &[f64], valid: &[bool]) -> f64 {
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..pred.len() {
        if valid[i] {
            let a = (pred[i] - target[i]).abs();
            acc += if a < 1.0 { 0.5 * a * a } else { a - 0.5 };
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut cases = 0;
    for seed in 0..4 {
        for r in run_suite(seed) {
            cases += 1;
            if !r.passed() {
                failures.push(format!("{} (seed {seed}): {:?}", r.name, r.outcome));
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(120);
    report(1, ok, &format!("{cases} gradient checks, {} failed, {:.1}s", failures.len(), elapsed.as_secs_f64()));
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(elapsed < Duration::from_secs(120), "{elapsed:?}");
}

#[test]
fn criterion_2_loss_oracles() {
    let _g = serial();
    let (h, w, c, branches) = (4, 4, 3, 3);
    let hw = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 4];
    for instance in 0..100 {
        let maps: Vec<Vec<f64>> = (0..branches).map(|_| prob_map(c, h, w, &mut rng)).collect();
        let labels: Vec<u8> = (0..hw).map(|_| rng.random_range(0..c as u8)).collect();
        let integral = instance % 2 == 0;
        let mut disp = || -> Vec<f64> {
            (0..hw)
                .map(|_| if integral { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..3.5) })
                .collect()
        };
        let (dl, dr) = (disp(), disp());
        let valid: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.8)).collect();
        let target: Vec<f64> = (0..hw).map(|_| rng.random_range(0.0..4.0)).collect();
        let alpha = rng.random_range(0.0..2.0);
        let beta = rng.random_range(0.0..2.0);

        let mut tape = Tape::<f64>::new();
        let probs: Vec<Var> = maps.iter().map(|m| tape.constant(t(&[c, h, w], m.clone()))).collect();
        let dlv = tape.constant(t(&[1, h, w], dl.clone()));
        let drv = tape.constant(t(&[1, h, w], dr.clone()));

        // Left-right weight.
        let wm = lr_consistency_weight(&mut tape, dlv, drv, &valid).unwrap();
        let (raw, norm) = lr_oracle(&dl, &dr, &valid, h, w);
        let got_raw = tape.value(wm.raw).data();
        let got_norm = tape.value(wm.normalized).data();
        for i in 0..hw {
            worst[0] = worst[0].max((got_raw[i] - raw[i]).abs()).max((got_norm[i] - norm[i]).abs());
        }

        // DIA under the oracle's weights.
        let dia = dia_loss(&mut tape, &probs, &labels, wm.normalized, alpha).unwrap();
        let expect: f64 = alpha * maps.iter().map(|m| nll_oracle(m, &labels, &norm)).sum::<f64>();
        worst[1] = worst[1].max((tape.value(dia).item() - expect).abs());

        // DSCC with both sign conventions.
        for literal in [false, true] {
            let d = dscc_loss(&mut tape, &probs, beta, literal).unwrap();
            let sign = if literal { -1.0 } else { 1.0 };
            let expect = sign * beta * kl_pairs_oracle(&maps, hw);
            worst[2] = worst[2].max((tape.value(d).item() - expect).abs());
        }

        // Smooth-L1 on a prediction that straddles the quadratic region.
        if valid.iter().any(|&v| v) {
            let pred: Vec<f64> = target.iter().map(|&x| x + rng.random_range(-2.5..2.5)).collect();
            let pv = tape.constant(t(&[1, h, w], pred.clone()));
            let sm = sm_loss(&mut tape, pv, &t(&[1, h, w], target.clone()), &valid).unwrap();
            worst[3] = worst[3].max((tape.value(sm).item() - smooth_l1_oracle(&pred, &target, &valid)).abs());
        }
    }
    let ok = worst.iter().all(|&e| e <= 1e-10);
    report(
        2,
        ok,
        &format!("max abs error lr {:.1e}, dia {:.1e}, dscc {:.1e}, sm {:.1e} over 100 instances", worst[0], worst[1], worst[2], worst[3]),
    );
    assert!(ok, "{worst:?}");
}

fn encoder_config(fusion_mode: FusionMode, gate_bias_init: f64) -> EncoderConfig {
    EncoderConfig { n_layers: 4, channels: vec![3, 4, 5, 6], fusion_mode, gate_bias_init, ..EncoderConfig::default() }
}

fn run_encoder(store: &mut ParamStore<f64>, enc: &Encoder, ctx: &[Tensor<f64>], disp: &Tensor<f64>) -> [Vec<Tensor<f64>>; 3] {
    let mut s = Session::new(store, false, NormMode::Frozen);
    let cv: Vec<Var> = ctx.iter().map(|x| s.tape.constant(x.clone())).collect();
    let dv = s.tape.constant(disp.clone());
    let pyr = enc.encode(&mut s, &cv, dv).unwrap();
    let get = |vs: &[Var]| vs.iter().map(|&v| s.tape.value(v).clone()).collect::<Vec<_>>();
    [get(&pyr.fused), get(&pyr.geometric), get(&[pyr.gates_geometric.clone(), pyr.gates_fused.clone()].concat())]
}

#[test]
fn criterion_3_formula_fidelity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w) = (3, 5, 4);
    let hw = h * w;
    let mut mismatches = 0;
    for _ in 0..200 {
        let xp: Vec<f64> = (0..c * hw).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x: Vec<f64> = (0..c * hw).map(|_| rng.random_range(-2.0..2.0)).collect();
        let gp: Vec<f64> = (0..hw).map(|_| rng.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..hw).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let v = [
            tape.constant(t(&[c, h, w], xp.clone())),
            tape.constant(t(&[c, h, w], x.clone())),
            tape.constant(t(&[1, h, w], gp.clone())),
            tape.constant(t(&[1, h, w], g.clone())),
        ];
        let y = tape.sig_combine(v[0], v[1], v[2], v[3]).unwrap();
        let out = tape.value(y).data();
        for ch in 0..c {
            for p in 0..hw {
                let i = ch * hw + p;
                let expect = (1.0 + g[p]) * x[i] + (1.0 - g[p]) * (gp[p] * xp[i]);
                mismatches += usize::from(out[i] != expect);
            }
        }
    }

    // Closed gates: copy every shared tensor into a sum-fusion encoder.
    let gated = encoder_config(FusionMode::Tgf, f64::NEG_INFINITY);
    let plain = encoder_config(FusionMode::Sum, 0.0);
    let mut gstore = ParamStore::<f64>::new(31);
    let genc = Encoder::new(&mut gstore, "enc", &gated).unwrap();
    let ids: Vec<_> = gstore.ids().collect();
    for id in ids {
        let name = gstore.name(id).to_string();
        let data = gstore.get_mut(id).data_mut();
        if name.contains(".gate") && name.ends_with(".bias") {
            data.fill(f64::NEG_INFINITY);
        } else if name.ends_with(".bias") || name.ends_with("beta") || name.ends_with("running_mean") {
            data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        } else if name.ends_with("gamma") || name.ends_with("running_var") {
            data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let mut pstore = ParamStore::<f64>::new(32);
    let penc = Encoder::new(&mut pstore, "enc", &plain).unwrap();
    let ids: Vec<_> = pstore.ids().collect();
    for id in ids {
        let src = gstore.find(pstore.name(id)).expect("sum-fusion parameter missing from the gated encoder");
        let value = gstore.get(src).clone();
        pstore.set(id, value).unwrap();
    }
    let size = 32;
    let ctx: Vec<Tensor<f64>> = (1..=gated.context_stages_needed())
        .map(|j| {
            let side = size >> stage_level(j);
            Tensor::random_uniform(&[stage_channels(&gated.channels, j), side, side], -1.0, 1.0, &mut rng)
        })
        .collect();
    let disp = Tensor::random_uniform(&[1, size, size], 0.0, 1.0, &mut rng);
    let [gf, gg, gates] = run_encoder(&mut gstore, &genc, &ctx, &disp);
    let [pf, pg, _] = run_encoder(&mut pstore, &penc, &ctx, &disp);
    let closed = gates.iter().all(|g| g.data().iter().all(|&v| v == 0.0));
    let same = gf == pf && gg == pg;

    let ok = mismatches == 0 && closed && same;
    report(
        3,
        ok,
        &format!("gate formula mismatches {mismatches}; closed-gate encoder equals sum fusion: {same} (gates closed: {closed})"),
    );
    assert!(ok);
}

fn seg_oracle(pred: &[u8], gt: &[u8], classes: usize, averaging: Averaging) -> [f64; 7] {
    let n = gt.len() as f64;
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count() as f64;
    let present: Vec<usize> = (0..classes).filter(|&k| gt.iter().any(|&g| g as usize == k)).collect();
    let m = present.len() as f64;
    let mut out = [100.0 * correct / n, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for &k in &present {
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as usize == k, g as usize == k);
            if p && g {
                tp += 1.0;
            } else if p {
                fp += 1.0;
            } else if g {
                fneg += 1.0;
            }
        }
        let recall = tp / (tp + fneg);
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let iou = tp / (tp + fp + fneg);
        let f1 = 2.0 * tp / (2.0 * tp + fp + fneg);
        let freq = (tp + fneg) / n;
        let wt = match averaging {
            Averaging::Frequency => freq,
            Averaging::Macro => 1.0 / m,
        };
        out[1] += 100.0 * recall / m;
        out[2] += 100.0 * wt * precision;
        out[3] += 100.0 * wt * recall;
        out[4] += 100.0 * f1 / m;
        out[5] += 100.0 * iou / m;
        out[6] += 100.0 * freq * iou;
    }
    out
}

#[test]
fn criterion_4_metric_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut ordering_violations = 0;
    for case in 0..1000 {
        let classes = rng.random_range(2..7);
        let n = rng.random_range(1..300);
        // Skewed label draws leave some classes absent from either side.
        let skew: Vec<f64> = (0..classes).map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.1..1.0) }).collect();
        let draw = |rng: &mut ChaCha8Rng| -> u8 {
            let total: f64 = skew.iter().sum();
            if total == 0.0 {
                return 0;
            }
            let mut r = rng.random_range(0.0..total);
            for (k, &s) in skew.iter().enumerate() {
                if r < s {
                    return k as u8;
                }
                r -= s;
            }
            (classes - 1) as u8
        };
        let gt: Vec<u8> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<u8> =
            gt.iter().map(|&g| if rng.random_bool(0.6) { g } else { rng.random_range(0..classes as u8) }).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &gt, None).unwrap();
        let averaging = if case % 2 == 0 { Averaging::Frequency } else { Averaging::Macro };
        let r = seg_metrics(&cm, averaging).unwrap();
        let got = [r.acc, r.macc, r.pre, r.rec, r.mfsc, r.miou, r.fwiou];
        for (a, b) in got.iter().zip(seg_oracle(&pred, &gt, classes, averaging)) {
            worst = worst.max((a - b).abs());
        }

        let len = rng.random_range(1..200);
        let gt_d: Vec<f32> = (0..len).map(|_| rng.random_range(0..64) as f32 * 0.25).collect();
        let pred_d: Vec<f32> = gt_d
            .iter()
            .map(|&g| match rng.random_range(0..4) {
                // Exact threshold distances exercise the strict comparison.
                0 => g + [1.0f32, -1.0, 3.0, -3.0][rng.random_range(0..4)],
                1 => g,
                _ => g + rng.random_range(-6.0f32..6.0),
            })
            .collect();
        let mut valid: Vec<bool> = (0..len).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        let s = stereo_metrics(&pred_d, &gt_d, &valid).unwrap();
        let errs: Vec<f64> =
            (0..len).filter(|&i| valid[i]).map(|i| (f64::from(pred_d[i]) - f64::from(gt_d[i])).abs()).collect();
        let m = errs.len() as f64;
        let epe = errs.iter().sum::<f64>() / m;
        let pep1 = 100.0 * errs.iter().filter(|&&e| e > 1.0).count() as f64 / m;
        let pep3 = 100.0 * errs.iter().filter(|&&e| e > 3.0).count() as f64 / m;
        worst = worst.max((s.epe - epe).abs()).max((s.pep1 - pep1).abs()).max((s.pep3 - pep3).abs());
        ordering_violations += usize::from(s.pep1 < s.pep3);
    }
    let ok = worst <= 1e-9 && ordering_violations == 0;
    report(4, ok, &format!("max abs error {worst:.1e} over 1000 cases; PEP@1 < PEP@3 in {ordering_violations}"));
    assert!(ok);
}

#[test]
fn criterion_5_overfit() {
    let _g = serial();
    let cfg = Config::default();
    assert_eq!((cfg.data.scenes, cfg.data.scene.width, cfg.data.scene.height), (8, 64, 64));
    assert_eq!((cfg.data.scene.num_classes, cfg.model.stereo.d_max, cfg.train.iterations), (4, 16, 2000));
    assert_eq!((cfg.loss.alpha, cfg.loss.beta), (1.5, 1.0));
    let start = Instant::now();
    let data = load_data(&cfg).unwrap();
    let mut run = train(&cfg, &data, &RunDir(None)).unwrap();
    let r = evaluate(&run.model, &mut run.store, &data, &cfg).unwrap();
    let elapsed = start.elapsed();
    let ok = r.seg.miou >= 95.0 && r.stereo.epe <= 0.5 && elapsed <= Duration::from_secs(15 * 60);
    report(
        5,
        ok,
        &format!("training-set mIoU {:.2}, EPE {:.3} px, {:.0}s", r.seg.miou, r.stereo.epe, elapsed.as_secs_f64()),
    );
    assert!(ok);
}

#[test]
fn criterion_6_directional_ablation() {
    let _g = serial();
    let mut cfg = Config::default();
    cfg.train.iterations = 600;
    let data = generate_dataset(&cfg.data.scene, 64).unwrap();
    let (train_set, eval_set) = data.split_at(48);
    let mut grid = Grid::components();
    grid.cells.retain(|c| matches!(c.name.as_str(), "tgf" | "tgf+hds" | "tgf+hds+ct"));
    grid.cells.push(Cell::new("tgf+hds+ct-dscc", &[("loss.enable_dscc", "false")]));
    let table = ablate(&cfg, &grid, &[0, 1, 2], train_set, eval_set).unwrap();
    let _ = writeln!(std::io::stderr(), "{table}");
    let miou = |name: &str| table.row(name).unwrap().miou();
    let (tgf, tgf_hds, full) = (miou("tgf"), miou("tgf+hds"), miou("tgf+hds+ct"));
    let with = table.row("tgf+hds+ct").unwrap().disagreement();
    let without = table.row("tgf+hds+ct-dscc").unwrap().disagreement();
    let reduction = if without > 0.0 { 1.0 - with / without } else { 0.0 };
    let ordered = full >= tgf_hds && tgf_hds >= tgf;
    let ok = ordered && reduction >= 0.30;
    report(
        6,
        ok,
        &format!(
            "mean mIoU full {full:.2} / tgf+hds {tgf_hds:.2} / tgf {tgf:.2} (ordered: {ordered}); \
             disagreement {with:.4} vs {without:.4} without DSCC ({:.1}% reduction)",
            100.0 * reduction
        ),
    );
    assert!(ordered, "mIoU ordering");
    assert!(reduction >= 0.30, "disagreement reduction {reduction}");
}

#[test]
fn criterion_7_dscc_zero_iff_identical() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut bad = Vec::new();
    for case in 0..1000 {
        let c = rng.random_range(2..6);
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let a = prob_map(c, h, w, &mut rng);
        let identical = case % 2 == 0;
        let b = if identical {
            a.clone()
        } else if case % 4 == 1 {
            prob_map(c, h, w, &mut rng)
        } else {
            // One pixel moves a little mass between two classes.
            let mut b = a.clone();
            let hw = h * w;
            let px = rng.random_range(0..hw);
            let (k0, k1) = (rng.random_range(0..c), rng.random_range(0..c));
            let k1 = if k1 == k0 { (k0 + 1) % c } else { k1 };
            let m = rng.random_range(0.001..0.01);
            b[k0 * hw + px] += m;
            b[k1 * hw + px] -= m;
            if b[k1 * hw + px] < 0.0 {
                b[k0 * hw + px] -= 2.0 * m;
                b[k1 * hw + px] += 2.0 * m;
            }
            b
        };
        let mut tape = Tape::<f64>::new();
        let pa = tape.constant(t(&[c, h, w], a));
        let pb = tape.constant(t(&[c, h, w], b));
        let d = dscc_loss(&mut tape, &[pa, pb], 1.0, false).unwrap();
        let v = tape.value(d).item();
        let holds = if identical { v == 0.0 } else { v > 0.0 };
        if !holds {
            bad.push((case, v));
        }
    }
    report(7, bad.is_empty(), &format!("1000 pairs, {} violations", bad.len()));
    assert!(bad.is_empty(), "{bad:?}");
}

#[test]
fn criterion_8_reproducibility() {
    let _g = serial();
    let mut cfg = Config::default();
    cfg.train.iterations = 30;
    cfg.train.checkpoint_every = 10;
    let data = load_data(&cfg).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs.iter().map(|d| train(&cfg, &data, &RunDir(Some(d.path().into()))).unwrap()).collect();
    let losses = |i: usize| runs[i].record.losses().map(|(it, b)| (it, *b)).collect::<Vec<_>>();
    let same_losses = losses(0) == losses(1) && losses(0).len() == 30;
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("ckpt_"))
        .collect();
    names.sort();
    let same_ckpts = names.len() == 4
        && names.iter().all(|n| std::fs::read(dirs[0].path().join(n)).unwrap() == std::fs::read(dirs[1].path().join(n)).unwrap());
    let ok = same_losses && same_ckpts;
    report(8, ok, &format!("{} logged losses identical: {same_losses}; {} checkpoints byte-identical: {same_ckpts}", losses(0).len(), names.len()));
    assert!(ok);
}
