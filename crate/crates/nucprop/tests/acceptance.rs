//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its runtime (`cargo test --test acceptance -- --nocapture`).
//!
//! The suite covers the numeric kernels (loss value and gradients), the
//! propagation decision logic against an independent re-implementation,
//! the scope invariant, the ordering claims of the evaluation protocol
//! on a seeded synthetic benchmark, the tracker against brute force, the
//! warp/flow stack, and end-to-end byte determinism.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::Rng;

use nucprop::grid::{iou, FlowField, LabelMap, MeanValue, ScalarField};
use nucprop::loss::{heteroscedastic_ce_loss, softmax_cross_entropy, LogitField, Reduction};
use nucprop::metrics::{average_precision, collect_detections, mean_iou_by_category, ScoreMode};
use nucprop::motion::{generate_elastic_flow, invert_flow, DeformationSpec};
use nucprop::propagate::{
    run_propagation, summarize_uncertainty, PropagationConfig, PropagationInput, UpdateAction,
    UpdateScope, WarpMode,
};
use nucprop::rng::stream_rng;
use nucprop::sim::{degrade_predictions, generate_video, DegradeConfig, Predictions, SimConfig, SimDataset};
use nucprop::tracker::{build_tracks, link_frames, LinkConfig};
use nucprop::warp::{warp_image_backward, warp_mask_backward};

fn report(criterion: &str, started: Instant, budget: Duration) {
    let elapsed = started.elapsed();
    println!("criterion {criterion}: PASS ({elapsed:.2?})");
    assert!(
        elapsed <= budget,
        "criterion {criterion} exceeded its {budget:?} runtime budget: {elapsed:?}"
    );
}

// ---------------------------------------------------------------------------
// Criterion 1: zero-noise equivalence of the heteroscedastic loss
// ---------------------------------------------------------------------------

#[test]
fn c1_zero_noise_equivalence() {
    let started = Instant::now();
    let mut rng = stream_rng(0xC1, 0);
    for trial in 0..100u64 {
        let classes = if rng.random_bool(0.5) { 2 } else { 3 };
        let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-5.0..5.0)).collect();
        let target = rng.random_range(0..classes);
        let field = LogitField {
            classes,
            logits: logits.clone(),
            sigma: vec![0.0],
            target: vec![target],
            samples: 1 + (trial % 7) as usize,
            seed: trial,
        };
        let loss = heteroscedastic_ce_loss(&field, Reduction::Sum).unwrap().loss;
        let ce = softmax_cross_entropy(&logits, target);
        assert!(
            (loss - ce).abs() < 1e-9,
            "trial {trial}: loss {loss} vs cross-entropy {ce}"
        );
    }
    report("1 (zero-noise equivalence)", started, Duration::from_secs(1));
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients vs central finite differences
// ---------------------------------------------------------------------------

#[test]
fn c2_gradient_check() {
    let started = Instant::now();
    let mut rng = stream_rng(0xC2, 0);
    let h = 1e-5;
    for trial in 0..50u64 {
        let classes = rng.random_range(2..=4);
        let pixels = rng.random_range(1..=2);
        let field = LogitField {
            classes,
            logits: (0..pixels * classes).map(|_| rng.random_range(-4.0..4.0)).collect(),
            sigma: (0..pixels).map(|_| rng.random_range(0.1..1.5)).collect(),
            target: (0..pixels).map(|_| rng.random_range(0..classes)).collect(),
            samples: rng.random_range(2..=12),
            seed: 0x9000 + trial,
        };
        let out = heteroscedastic_ce_loss(&field, Reduction::Sum).unwrap();
        let eval = |f: &LogitField| heteroscedastic_ce_loss(f, Reduction::Sum).unwrap().loss;
        let check = |analytic: f64, fd: f64, what: &str| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "trial {trial} {what}: analytic {analytic} vs fd {fd} (rel {rel})");
        };
        for i in 0..pixels * classes {
            let mut plus = field.clone();
            plus.logits[i] += h;
            let mut minus = field.clone();
            minus.logits[i] -= h;
            check(out.grad_logits[i], (eval(&plus) - eval(&minus)) / (2.0 * h), "logit");
        }
        for p in 0..pixels {
            let mut plus = field.clone();
            plus.sigma[p] += h;
            let mut minus = field.clone();
            minus.sigma[p] -= h;
            check(out.grad_sigma[p], (eval(&plus) - eval(&minus)) / (2.0 * h), "sigma");
        }
    }
    report("2 (gradient check)", started, Duration::from_secs(5));
}

// ---------------------------------------------------------------------------
// Criterion 3: propagation decisions vs a straight-line re-implementation
// ---------------------------------------------------------------------------

/// Independent transliteration of the propagation decision procedure,
/// working directly on a mean-uncertainty vector. Shares only the policy,
/// none of the code: thresholds, branch order (two-sided, then previous,
/// then next), infinite targets passing relative tests, the min-of-sources
/// reassignment, and the visit order (ascending uncertainty; infinite
/// entries by distance to the nearest finite entry, then frame).
fn oracle_alg1(
    ubars: &[f64],
    theta: f64,
    alpha: f64,
    beta: f64,
) -> Vec<(UpdateAction, Vec<usize>)> {
    let n = ubars.len();
    let mut u = ubars.to_vec();
    let finite: Vec<usize> = (0..n).filter(|&i| ubars[i].is_finite()).collect();
    let gap = |i: usize| finite.iter().map(|&j| i.abs_diff(j)).min().unwrap_or(usize::MAX);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        ubars[a].total_cmp(&ubars[b]).then_with(|| {
            if ubars[a].is_finite() {
                a.cmp(&b)
            } else {
                gap(a).cmp(&gap(b)).then(a.cmp(&b))
            }
        })
    });
    let mut actions = vec![(UpdateAction::None, Vec::new()); n];
    for f in order {
        if u[f] < theta {
            continue;
        }
        let was_empty = u[f].is_infinite();
        let u_prev = if f > 0 { u[f - 1] } else { f64::INFINITY };
        let u_next = if f + 1 < n { u[f + 1] } else { f64::INFINITY };
        let pass = |factor: f64, source: f64| {
            source.is_finite() && (u[f].is_infinite() || factor * u[f] >= source)
        };
        let (action, sources) = if pass(beta, u_prev) && pass(beta, u_next) {
            (UpdateAction::TwoSided, vec![f - 1, f + 1])
        } else if pass(alpha, u_prev) {
            (UpdateAction::OneSidedPrev, vec![f - 1])
        } else if pass(alpha, u_next) {
            (UpdateAction::OneSidedNext, vec![f + 1])
        } else {
            continue;
        };
        u[f] = sources.iter().map(|&s| u[s]).fold(f64::INFINITY, f64::min);
        actions[f] = (if was_empty { UpdateAction::Interpolated } else { action }, sources);
    }
    actions
}

/// One static cell whose nucleus carries the requested mean uncertainty
/// per frame (missing where infinite).
fn realize_scene(ubars: &[f64]) -> (Vec<LabelMap>, Vec<LabelMap>, Vec<ScalarField>) {
    let (w, h) = (16usize, 16usize);
    let mut cells = Vec::new();
    let mut nuclei = Vec::new();
    let mut unc = Vec::new();
    for &u in ubars {
        let mut cell = LabelMap::new(w, h);
        for y in 2..14 {
            for x in 2..14 {
                cell.set(x, y, 1);
            }
        }
        cells.push(cell);
        let mut nucleus = LabelMap::new(w, h);
        if u.is_finite() {
            for y in 6..9 {
                for x in 6..9 {
                    nucleus.set(x, y, 1);
                }
            }
        }
        nuclei.push(nucleus);
        unc.push(ScalarField::new(w, h, if u.is_finite() { u } else { 0.0 }));
    }
    (cells, nuclei, unc)
}

fn run_scene(
    ubars: &[f64],
    cfg: &PropagationConfig,
) -> Vec<(UpdateAction, Vec<usize>)> {
    let (cells, nuclei, unc) = realize_scene(ubars);
    let flows = nucprop::propagate::FlowSet {
        forward: (0..ubars.len() - 1).map(|i| FlowField::zero(16, 16, (i, i + 1))).collect(),
        backward: (0..ubars.len() - 1).map(|i| FlowField::zero(16, 16, (i + 1, i))).collect(),
    };
    let (_, log) = run_propagation(
        &PropagationInput {
            cell_labels: &cells,
            nucleus_labels: &nuclei,
            uncertainty: &unc,
            flows: Some(&flows),
        },
        &LinkConfig::default(),
        cfg,
    )
    .unwrap();
    let mut out = vec![(UpdateAction::None, Vec::new()); ubars.len()];
    for r in log.records {
        out[r.frame] = (r.action, r.sources.clone());
    }
    out
}

#[test]
fn c3_hand_traces_and_randomized_oracle() {
    let started = Instant::now();
    let cfg = PropagationConfig::default();

    // hand-executed traces
    let traces: [(&[f64], &[UpdateAction]); 3] = [
        (
            &[0.1, 0.9, 0.1],
            &[UpdateAction::None, UpdateAction::TwoSided, UpdateAction::None],
        ),
        (&[0.1, 0.9], &[UpdateAction::None, UpdateAction::OneSidedPrev]),
        (&[0.6, 0.55], &[UpdateAction::None, UpdateAction::None]),
    ];
    for (ubars, expected) in traces {
        let got = run_scene(ubars, &cfg);
        let actions: Vec<UpdateAction> = got.iter().map(|(a, _)| *a).collect();
        assert_eq!(actions, expected, "trace {ubars:?}");
    }

    // randomized 5-frame vectors against the straight-line oracle
    let mut rng = stream_rng(0xC3, 0);
    for trial in 0..25 {
        let ubars: Vec<f64> = (0..5)
            .map(|_| {
                if rng.random_bool(0.25) {
                    f64::INFINITY
                } else {
                    rng.random_range(0.02..1.2)
                }
            })
            .collect();
        let got = run_scene(&ubars, &cfg);
        let expected = oracle_alg1(&ubars, cfg.theta, cfg.alpha, cfg.beta);
        assert_eq!(got, expected, "trial {trial}: ubars {ubars:?}");
    }
    report("3 (decision traces vs oracle)", started, Duration::from_secs(1));
}

// ---------------------------------------------------------------------------
// The seeded synthetic benchmark shared by criteria 4 and 5
// ---------------------------------------------------------------------------

fn benchmark_gt() -> SimDataset {
    generate_video(&SimConfig::default()).expect("benchmark generates")
}

fn benchmark_pred(gt: &SimDataset) -> (Predictions, DegradeConfig) {
    let cfg = DegradeConfig::default();
    let pred = degrade_predictions(gt, &cfg).expect("benchmark degrades");
    (pred, cfg)
}

fn propagate_with(
    pred: &Predictions,
    gt: &SimDataset,
    warp_mode: WarpMode,
    scope: UpdateScope,
) -> (Vec<LabelMap>, nucprop::propagate::UpdateLog) {
    let cfg = PropagationConfig { warp_mode, update_scope: scope, ..PropagationConfig::default() };
    run_propagation(
        &PropagationInput {
            cell_labels: &pred.cell_labels,
            nucleus_labels: &pred.nucleus_labels,
            uncertainty: &pred.uncertainty,
            flows: Some(&gt.flows),
        },
        &LinkConfig::default(),
        &cfg,
    )
    .expect("propagation runs")
}

// ---------------------------------------------------------------------------
// Criterion 4: certain nuclei are bit-identical under uncertain scope
// ---------------------------------------------------------------------------

#[test]
fn c4_scope_invariant_exhaustive() {
    let started = Instant::now();
    let gt = benchmark_gt();
    let (pred, _) = benchmark_pred(&gt);
    let (updated, _) = propagate_with(&pred, &gt, WarpMode::MeanFlow, UpdateScope::UncertainOnly);

    let tracks = build_tracks(&pred.cell_labels, &LinkConfig::default()).unwrap();
    let summary = summarize_uncertainty(&tracks, &pred.nucleus_labels, &pred.uncertainty).unwrap();
    let theta = PropagationConfig::default().theta;
    let mut checked = 0usize;
    for (i, track) in tracks.iter().enumerate() {
        for frame in track.frames() {
            if let MeanValue::Finite(u) = summary.ubar(i, track, frame) {
                if u < theta {
                    let id = track.cell_at(frame).unwrap();
                    assert_eq!(
                        pred.nucleus_labels[frame].mask_of(id),
                        updated[frame].mask_of(id),
                        "track {i} frame {frame} (ubar {u}) was modified"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 50, "benchmark must exercise many certain nuclei, got {checked}");
    report("4 (scope invariant, exhaustive)", started, Duration::from_secs(60));
}

// ---------------------------------------------------------------------------
// Criterion 5: desk-scale reproduction of the evaluation-table orderings
// ---------------------------------------------------------------------------

#[test]
fn c5_iou_table_orderings() {
    let started = Instant::now();
    let gt = benchmark_gt();
    let (pred, _) = benchmark_pred(&gt);

    let evaluate = |nuclei: &[LabelMap], log: &nucprop::propagate::UpdateLog| {
        mean_iou_by_category(nuclei, &pred.cell_labels, &gt.nucleus_labels, &gt.cell_labels, log)
            .expect("evaluation succeeds")
    };

    let (mean_nuclei, mean_log) =
        propagate_with(&pred, &gt, WarpMode::MeanFlow, UpdateScope::UncertainOnly);
    let (pixel_nuclei, pixel_log) =
        propagate_with(&pred, &gt, WarpMode::PixelFlow, UpdateScope::UncertainOnly);
    let (shift_nuclei, shift_log) =
        propagate_with(&pred, &gt, WarpMode::ShiftScale, UpdateScope::UncertainOnly);
    let (all_nuclei, _) = propagate_with(&pred, &gt, WarpMode::MeanFlow, UpdateScope::All);

    // categories always come from the uncertain-scope decisions so rows
    // compare the same nucleus populations
    let baseline = evaluate(&pred.nucleus_labels, &mean_log);
    let after_mean = evaluate(&mean_nuclei, &mean_log);
    let after_pixel = evaluate(&pixel_nuclei, &pixel_log);
    let after_shift = evaluate(&shift_nuclei, &shift_log);
    let all_row = evaluate(&all_nuclei, &mean_log);

    println!(
        "  baseline   all/upd/int/non = {:.3}/{:.3}/{:.3}/{:.3} (counts {}/{}/{}/{})",
        baseline.all.mean_iou,
        baseline.updated.mean_iou,
        baseline.interpolated.mean_iou,
        baseline.non_updated.mean_iou,
        baseline.all.count,
        baseline.updated.count,
        baseline.interpolated.count,
        baseline.non_updated.count,
    );
    for (name, r) in [("mean flow", &after_mean), ("pixel flow", &after_pixel), ("shift+scale", &after_shift), ("all scope", &all_row)] {
        println!(
            "  {name:11} all/upd/int/non = {:.3}/{:.3}/{:.3}/{:.3}",
            r.all.mean_iou, r.updated.mean_iou, r.interpolated.mean_iou, r.non_updated.mean_iou
        );
    }

    // (a) overall improvement by at least 0.05
    assert!(
        after_mean.all.mean_iou >= baseline.all.mean_iou + 0.05,
        "(a) all-category: {} -> {}",
        baseline.all.mean_iou,
        after_mean.all.mean_iou
    );
    // (b) interpolated rises from exactly zero to at least 0.30
    assert_eq!(baseline.interpolated.mean_iou, 0.0, "(b) baseline interpolated");
    assert!(baseline.interpolated.count > 0, "(b) benchmark must contain misses");
    assert!(
        after_mean.interpolated.mean_iou >= 0.30,
        "(b) interpolated after propagation: {}",
        after_mean.interpolated.mean_iou
    );
    // (c) indiscriminate propagation damages confident nuclei
    assert!(
        all_row.non_updated.mean_iou < after_mean.non_updated.mean_iou,
        "(c) non-updated: all-scope {} vs uncertain-scope {}",
        all_row.non_updated.mean_iou,
        after_mean.non_updated.mean_iou
    );
    // (d) flow variants beat shift+scale on recreated nuclei under
    // deformation-scale motion
    assert!(gt.config.motion.magnitude >= 8.0);
    assert!(
        after_pixel.interpolated.mean_iou >= after_shift.interpolated.mean_iou,
        "(d) pixel {} < shift {}",
        after_pixel.interpolated.mean_iou,
        after_shift.interpolated.mean_iou
    );
    assert!(
        after_mean.interpolated.mean_iou >= after_shift.interpolated.mean_iou,
        "(d) mean {} < shift {}",
        after_mean.interpolated.mean_iou,
        after_shift.interpolated.mean_iou
    );
    report("5 (evaluation-table orderings)", started, Duration::from_secs(60));
}

// ---------------------------------------------------------------------------
// Criterion 6: entropy ranking is at least as good as jittered scores
// ---------------------------------------------------------------------------

#[test]
fn c6_map_ranking_property() {
    let started = Instant::now();
    let gt = benchmark_gt();
    // close score bands so the +-0.1 jitter flips many clean-vs-damaged
    // pairs (first-order AP damage), and heavier morphology so damaged
    // detections rarely survive the 0.5 IoU gate
    let cfg = DegradeConfig {
        base_uncertainty: 0.48,
        error_uncertainty: 0.52,
        erode_dilate_px: 3,
        ..DegradeConfig::default()
    };
    let pred = degrade_predictions(&gt, &cfg).unwrap();
    let (dets, n_gt) = collect_detections(
        &pred.nucleus_labels,
        &gt.nucleus_labels,
        &pred.uncertainty,
        &pred.scores,
    )
    .unwrap();
    let map_ent = average_precision(&dets, n_gt, 0.5, ScoreMode::Entropy);
    let mut worst_sm = f64::NEG_INFINITY;
    for shuffle_seed in 0..10u64 {
        let mut rng = stream_rng(0xC6, shuffle_seed);
        let shuffled: Vec<_> = dets
            .iter()
            .map(|d| {
                let mut d = d.clone();
                d.score += rng.random_range(-0.1..=0.1);
                d
            })
            .collect();
        let map_sm = average_precision(&shuffled, n_gt, 0.5, ScoreMode::Softmax);
        worst_sm = worst_sm.max(map_sm);
        assert!(
            map_ent >= map_sm,
            "seed {shuffle_seed}: mAP(ent) {map_ent} < mAP(sm) {map_sm}"
        );
    }
    println!("  mAP(ent) = {map_ent:.4}, best shuffled mAP(sm) over 10 seeds = {worst_sm:.4}");
    report("6 (entropy-ranked mAP)", started, Duration::from_secs(30));
}

// ---------------------------------------------------------------------------
// Criterion 7: frame linking equals exhaustive assignment
// ---------------------------------------------------------------------------

fn brute_force_weight(na: usize, nb: usize, iou: &[f64], min_iou: f64) -> f64 {
    fn rec(i: usize, na: usize, nb: usize, iou: &[f64], min_iou: f64, used: &mut [bool]) -> f64 {
        if i == na {
            return 0.0;
        }
        let mut best = rec(i + 1, na, nb, iou, min_iou, used);
        for j in 0..nb {
            if !used[j] && iou[i * nb + j] >= min_iou && iou[i * nb + j] > 0.0 {
                used[j] = true;
                best = best.max(iou[i * nb + j] + rec(i + 1, na, nb, iou, min_iou, used));
                used[j] = false;
            }
        }
        best
    }
    rec(0, na, nb, iou, min_iou, &mut vec![false; nb])
}

#[test]
fn c7_tracker_matches_brute_force() {
    let started = Instant::now();
    let cfg = LinkConfig::default();
    for trial in 0..100u64 {
        let mut rng = stream_rng(0xC7, trial);
        let frame = |rng: &mut rand_chacha::ChaCha12Rng, n: usize| {
            let mut m = LabelMap::new(32, 32);
            for id in 1..=n as u32 {
                let (x0, y0) = (rng.random_range(0..24), rng.random_range(0..24));
                let (w, h) = (rng.random_range(3..10), rng.random_range(3..10));
                for y in y0..(y0 + h).min(32) {
                    for x in x0..(x0 + w).min(32) {
                        m.set(x, y, id);
                    }
                }
            }
            m
        };
        let na = rng.random_range(1..=5);
        let nb = rng.random_range(1..=5);
        let a = frame(&mut rng, na);
        let b = frame(&mut rng, nb);
        let pairs = link_frames(&a, &b, &cfg).unwrap();
        let got: f64 = pairs
            .iter()
            .map(|&(ia, ib)| iou(&a.mask_of(ia), &b.mask_of(ib)).unwrap())
            .sum();
        let ids_a = a.ids();
        let ids_b = b.ids();
        let mut weights = vec![0.0; ids_a.len() * ids_b.len()];
        for (i, &ia) in ids_a.iter().enumerate() {
            for (j, &ib) in ids_b.iter().enumerate() {
                weights[i * ids_b.len() + j] = iou(&a.mask_of(ia), &b.mask_of(ib)).unwrap();
            }
        }
        let best = brute_force_weight(ids_a.len(), ids_b.len(), &weights, cfg.min_link_iou);
        assert!((got - best).abs() < 1e-9, "trial {trial}: {got} vs optimum {best}");
    }
    report("7 (tracker vs exhaustive assignment)", started, Duration::from_secs(10));
}

// ---------------------------------------------------------------------------
// Criterion 8: warp and flow suite
// ---------------------------------------------------------------------------

#[test]
fn c8_warp_flow_suite() {
    let started = Instant::now();

    // zero-flow identity, bit-exact
    let gt_small = generate_video(&SimConfig {
        width: 64,
        height: 64,
        frames: 2,
        cells: 3,
        seed: 12,
        ..SimConfig::default()
    })
    .unwrap();
    let zero = FlowField::zero(64, 64, (0, 1));
    let mask = gt_small.nucleus_labels[0].mask_of(1);
    assert_eq!(warp_mask_backward(&mask, &zero).unwrap(), mask);
    assert_eq!(warp_image_backward(&gt_small.images[0], &zero).unwrap(), gt_small.images[0]);

    // constant integer flow is a translation, bit-exact
    let flow = FlowField::constant(64, 64, 3.0, -2.0, (0, 1));
    let warped = warp_mask_backward(&mask, &flow).unwrap();
    let mut expected = nucprop::grid::Mask::new(64, 64);
    for (x, y) in mask.pixels() {
        let (tx, ty) = (x as isize - 3, y as isize + 2);
        if tx >= 0 && ty >= 0 && (tx as usize) < 64 && (ty as usize) < 64 {
            expected.set(tx as usize, ty as usize, true);
        }
    }
    assert_eq!(warped, expected);

    // inversion residual below half a pixel at the stated configuration
    for seed in 0..10u64 {
        let spec = DeformationSpec { control_points: 10, magnitude: 10.0, seed };
        let f = generate_elastic_flow(&spec, 128, 128).unwrap();
        let g = invert_flow(&f, 5);
        let mut worst = 0.0f64;
        for y in 16..112 {
            for x in 16..112 {
                let i = y * 128 + x;
                let (gu, gv) = (g.u()[i] as f64, g.v()[i] as f64);
                let (fu, fv) = f.sample_bilinear_clamped(x as f64 + gu, y as f64 + gv);
                worst = worst.max((fu + gu).abs()).max((fv + gv).abs());
            }
        }
        assert!(worst < 0.5, "seed {seed}: inversion residual {worst}");
    }

    // simulated frame reconstruction: warping frame t+1 backward with the
    // emitted flow recovers frame t. For label-rendered imagery the
    // bilinear bound is the largest plateau step (background vs nucleus),
    // and the regression numbers below were measured on this seeded
    // benchmark and frozen.
    for noise in [0.0, 800.0] {
        let cfg = SimConfig { noise_sigma: noise, ..SimConfig::default() };
        let data = generate_video(&cfg).unwrap();
        let bilinear_bound = cfg.cytosol_intensity + cfg.nucleus_contrast_amplitude;
        let mut worst_p99 = 0.0f64;
        let mut worst_p50 = 0.0f64;
        for t in 0..cfg.frames - 1 {
            let recon =
                warp_image_backward(&data.images[t + 1], &data.flows.forward[t]).unwrap();
            let mut errs: Vec<f64> = Vec::new();
            for y in 0..cfg.height {
                for x in 0..cfg.width {
                    if data.cell_labels[t].get(x, y) != 0 {
                        errs.push((recon.get(x, y) - data.images[t].get(x, y)).abs());
                    }
                }
            }
            errs.sort_by(f64::total_cmp);
            worst_p50 = worst_p50.max(errs[errs.len() / 2]);
            worst_p99 = worst_p99.max(errs[(errs.len() as f64 * 0.99) as usize]);
        }
        assert!(
            worst_p99 <= 2.0 * noise + bilinear_bound,
            "noise {noise}: p99 residual {worst_p99}"
        );
        // frozen regression bounds (measured: p99 14625 / 16332, p50 696 / 1783)
        let (p99_cap, p50_cap) = if noise == 0.0 { (15000.0, 800.0) } else { (17000.0, 1900.0) };
        assert!(worst_p99 <= p99_cap, "noise {noise}: p99 residual {worst_p99} > {p99_cap}");
        assert!(worst_p50 <= p50_cap, "noise {noise}: p50 residual {worst_p50} > {p50_cap}");
    }
    report("8 (warp/flow suite)", started, Duration::from_secs(10));
}

// ---------------------------------------------------------------------------
// Criterion 9: end-to-end byte determinism
// ---------------------------------------------------------------------------

fn run_pipeline(dir: &std::path::Path) {
    let dir = dir.to_str().unwrap();
    let steps: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--out".into(), dir.into(), "--seed".into(), "7".into(), "--width".into(), "96".into(), "--height".into(), "96".into(), "--frames".into(), "12".into(), "--cells".into(), "5".into()],
        vec!["degrade".into(), "--data".into(), dir.into(), "--seed".into(), "11".into()],
        vec!["track".into(), "--data".into(), dir.into()],
        vec!["propagate".into(), "--data".into(), dir.into(), "--theta".into(), "0.5".into(), "--alpha".into(), "0.7".into(), "--beta".into(), "0.85".into(), "--warp".into(), "mean-flow".into()],
        vec!["eval-iou".into(), "--data".into(), dir.into(), "--prop".into(), "default".into(), "--out".into(), format!("{dir}/report_iou.json")],
        vec!["eval-map".into(), "--data".into(), dir.into(), "--out".into(), format!("{dir}/report_map.json")],
    ];
    for step in steps {
        let mut argv = vec!["nucprop".to_string()];
        argv.extend(step.clone());
        let code = nucprop::cli::run(argv);
        assert_eq!(code, 0, "step {step:?} failed");
    }
}

fn collect_files(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn c9_pipeline_byte_determinism() {
    let started = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let (dir_a, dir_b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&dir_a);
    run_pipeline(&dir_b);
    let files_a = collect_files(&dir_a);
    let files_b = collect_files(&dir_b);
    assert_eq!(
        files_a.keys().collect::<Vec<_>>(),
        files_b.keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    for (name, bytes) in &files_a {
        assert_eq!(bytes, &files_b[name], "{name} differs between runs");
    }
    assert!(files_a.contains_key("report_iou.json") && files_a.contains_key("report_map.json"));
    report("9 (pipeline byte determinism)", started, Duration::from_secs(120));
}
