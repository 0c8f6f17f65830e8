//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its PASS/FAIL line even when all of them pass.

mod common;

use std::collections::{BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcseg::clicksim::{fr, next_click, noc, run_benchmark, BenchConfig, BenchSample, Trajectory};
use dcseg::dataio::{generate_scene, read_image, SynthConfig};
use dcseg::engine::{aggregate_masks, iou, mask_hash, Decision, Engine, EngineConfig, Mode, Transcript, TranscriptEvent};
use dcseg::numerics::{gradient_check, merge_params, Layout, ParamVector, Part, TaskVector};
use dcseg::segmenter::{
    architecture_layout, init_params, predict_mask, Click, FrozenScene, Image, Mask, PromptState, Sign,
    DEFAULT_SIGMA_FRACTION,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    Mask::from_bits(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect()).unwrap()
}

/// Blocky random mask: a coarse random grid upsampled, so components are
/// larger than single pixels.
fn blocky_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Mask {
    let cell = rng.random_range(1..=4);
    let (gw, gh) = (w.div_ceil(cell), h.div_ceil(cell));
    let grid: Vec<bool> = (0..gw * gh).map(|_| rng.random_bool(0.45)).collect();
    Mask::from_fn(w, h, |x, y| grid[(y / cell) * gw + x / cell])
}

fn random_click(rng: &mut ChaCha8Rng, w: usize, h: usize, serial: u32) -> Click {
    let sign = if rng.random_bool(0.6) { Sign::Positive } else { Sign::Negative };
    Click::new(rng.random_range(0..w as u32), rng.random_range(0..h as u32), sign, serial)
}

// ---------------------------------------------------------------------------

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let pre = common::pretrained();
    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + s);
        let image = Arc::new(random_image(&mut rng, 16, 16));
        let params = if s % 2 == 0 { init_params(s) } else { (*pre.params).clone() };
        let n_clicks = rng.random_range(1..=6);
        let clicks: Vec<Click> = (0..n_clicks).map(|i| random_click(&mut rng, 16, 16, i + 1)).collect();
        let prev = rng.random_bool(0.5).then(|| random_mask(&mut rng, 16, 16, 0.4));
        let target = random_mask(&mut rng, 16, 16, 0.5);
        let scene = FrozenScene::new(image, &params, DEFAULT_SIGMA_FRACTION).unwrap();
        let prompts = PromptState::new(clicks.clone(), prev.as_ref());
        let err = gradient_check(
            |p| scene.tta_loss_and_gradient(&prompts, p, &target, &clicks).unwrap(),
            &params,
            50,
            s,
        );
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(worst < 1e-4 && secs < 30.0, format!("max relative error {worst:.3e} over 20 scenes x 50 probes in {secs:.1}s"))
}

// ---------------------------------------------------------------------------

fn scalar_merge(theta: &[f64], global: &[f64], units: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut sum = 0.0;
        for u in units {
            sum += u[i];
        }
        out.push(theta[i] + gamma * global[i] + gamma * gamma * sum);
    }
    out
}

fn merge_oracle() -> Verdict {
    let layout = architecture_layout();
    let (nb, nh) = (layout.backbone_len(), layout.head_len());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut identity_exact = true;
    for case in 0..100 {
        let gamma = match case {
            0 => 0.0,
            1 => 0.7,
            _ => rng.random_range(0.0..=1.0),
        };
        let k = rng.random_range(0..=5);
        let mut vec_of = |n: usize| (0..n).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let theta = ParamVector::new(Arc::clone(&layout), vec_of(nb), vec_of(nh)).unwrap();
        let global = vec_of(nh);
        let units: Vec<Vec<f64>> = (0..k).map(|_| vec_of(nh)).collect();
        let tv = |d: &Vec<f64>| TaskVector::new(Arc::clone(&layout), d.clone()).unwrap();
        let merged = merge_params(&theta, &tv(&global), &units.iter().map(tv).collect::<Vec<_>>(), gamma).unwrap();
        let oracle = scalar_merge(theta.head(), &global, &units, gamma);
        for (a, b) in merged.head().iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        if merged.backbone() != theta.backbone() {
            worst = f64::INFINITY;
        }
        if gamma == 0.0 && merged != theta {
            identity_exact = false;
        }
    }
    // two-coordinate worked example
    let tiny = Arc::new(Layout::new([("w", Part::Backbone, vec![1]), ("h", Part::Head, vec![2])]));
    let theta = ParamVector::new(Arc::clone(&tiny), vec![0.0], vec![0.0, 0.0]).unwrap();
    let tv = |d: Vec<f64>| TaskVector::new(Arc::clone(&tiny), d).unwrap();
    let example = merge_params(&theta, &tv(vec![1.0, 0.0]), &[tv(vec![0.0, 1.0]), tv(vec![0.0, 1.0])], 0.7).unwrap();
    let example_ok = (example.head()[0] - 0.7).abs() < 1e-12 && (example.head()[1] - 0.98).abs() < 1e-12;
    verdict(
        worst <= 1e-12 && identity_exact && example_ok,
        format!(
            "100 cases, max |merge - scalar| {worst:.1e}; gamma=0 identity exact: {identity_exact}; [0.7, 0.98] example: {example_ok}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn serials(clicks: &[Click]) -> Vec<u32> {
    clicks.iter().map(|c| c.serial).collect()
}

/// Checks every dc-core invariant for one step; returns the violations.
fn check_step(pre: &Engine, post: &Engine, click: Click, theta0: &ParamVector, outcome_routing: &dcseg::engine::Routing) -> Vec<String> {
    let mut v = Vec::new();
    let t = post.iteration();
    let all = post.clicks();
    let positives: Vec<Click> = all.iter().filter(|c| c.sign == Sign::Positive).copied().collect();
    let negatives: Vec<Click> = all.iter().filter(|c| c.sign == Sign::Negative).copied().collect();

    let stamped = Click { serial: t as u32, ..click };
    if t != pre.iteration() + 1 || all.last() != Some(&stamped) || serials(all) != (1..=t as u32).collect::<Vec<_>>() {
        v.push(format!("t={t}: click history does not end with the submitted click"));
    }

    // global completeness
    if serials(&post.units()[0].positives) != serials(&positives) {
        v.push(format!("t={t}: global unit positives differ from all positives"));
    }
    if serials(post.negatives()) != serials(&negatives) {
        v.push(format!("t={t}: negative set differs from all negatives"));
    }

    // partition of positives over non-global units
    let mut seen = BTreeSet::new();
    for u in &post.units()[1..] {
        for c in &u.positives {
            if !seen.insert(c.serial) {
                v.push(format!("t={t}: click {} is in two units", c.serial));
            }
        }
    }
    if seen != positives.iter().map(|c| c.serial).collect() {
        v.push(format!("t={t}: unit positives do not cover all positives"));
    }

    // union superset; before the first positive click no unit has a mask
    // and the final mask is empty
    if positives.is_empty() {
        let empty = post.final_mask().is_none_or(|m| m.is_empty());
        if post.units().len() != 1 || post.units()[0].mask.is_some() || !empty {
            v.push(format!("t={t}: state before the first positive click is not empty"));
        }
    } else {
        match aggregate_masks(post.units()) {
            Ok(agg) => {
                for u in post.units() {
                    if !u.mask.as_ref().is_some_and(|m| m.is_subset_of(&agg)) {
                        v.push(format!("t={t}: unit {} mask not inside the aggregate", u.id));
                    }
                }
                if post.mode() == Mode::DcOnly && post.final_mask() != Some(&agg) {
                    v.push(format!("t={t}: dc_only final mask is not the aggregate"));
                }
            }
            Err(e) => v.push(format!("t={t}: aggregate failed: {e}")),
        }
    }

    let thr = post.config().assign_iou_threshold;
    match click.sign {
        Sign::Negative => {
            if outcome_routing.decision != Decision::Negative || post.units().len() != pre.units().len() {
                v.push(format!("t={t}: negative click changed the unit set or was routed"));
            }
        }
        Sign::Positive => {
            // probe uses the pretrained parameters, a lone click and the old negatives
            let prompt: Vec<Click> = std::iter::once(stamped).chain(pre.negatives().iter().copied()).collect();
            let expected = predict_mask(post.image(), &PromptState::clicks_only(prompt), theta0).unwrap();
            let Some(probe) = outcome_routing.probe.as_ref() else {
                v.push(format!("t={t}: positive click has no probe"));
                return v;
            };
            if *probe != expected {
                v.push(format!("t={t}: probe differs from the pretrained-model prediction"));
            }
            let table = &outcome_routing.probe_iou_table;
            let units_before: Vec<usize> = pre.units()[1..].iter().map(|u| u.id).collect();
            if table.iter().map(|e| e.unit).collect::<Vec<_>>() != units_before {
                v.push(format!("t={t}: IoU table does not list every earlier unit"));
            }
            for e in table {
                let prev = pre.unit_mask(e.unit).unwrap();
                if iou(&expected, &prev).unwrap() != e.iou {
                    v.push(format!("t={t}: IoU against unit {} misreported", e.unit));
                }
            }
            let no_overlap = table.iter().all(|e| e.iou <= thr);
            let spawned = outcome_routing.decision == Decision::Spawn;
            if spawned != no_overlap {
                v.push(format!("t={t}: spawn={spawned} but all-IoU<=threshold={no_overlap}"));
            }
            if spawned {
                let new = post.units().last().unwrap();
                if post.units().len() != pre.units().len() + 1 || serials(&new.positives) != vec![stamped.serial] {
                    v.push(format!("t={t}: spawned unit malformed"));
                }
            } else {
                let best = table.iter().fold(None::<(usize, f64)>, |b, e| match b {
                    Some((_, bi)) if bi >= e.iou => b,
                    _ => Some((e.unit, e.iou)),
                });
                if outcome_routing.target_unit != best.map(|b| b.0) {
                    v.push(format!("t={t}: click not assigned to the max-IoU unit"));
                }
            }
        }
    }
    if post.pretrained().as_ref() != theta0 {
        v.push(format!("t={t}: pretrained parameters were modified"));
    }
    v
}

fn routing_invariants() -> Verdict {
    let pre_model = common::pretrained();
    let theta0 = pre_model.params.as_ref().clone();
    let mut violations = Vec::new();
    let (mut steps, mut spawns, mut assigns) = (0usize, 0usize, 0usize);
    for s in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
        let synth = SynthConfig {
            width: 32,
            height: 32,
            parts_per_object: [1, 4],
            camouflage_level: rng.random_range(0.2..0.95),
            seed: s,
            ..Default::default()
        };
        let scene = generate_scene(&synth, s).unwrap();
        let mode = if s % 2 == 0 { Mode::DcTta } else { Mode::DcOnly };
        let mut engine =
            Engine::new(Arc::new(scene.image.clone()), Arc::clone(&pre_model.params), mode, EngineConfig::default()).unwrap();
        let len = rng.random_range(1..=20);
        for _ in 0..len {
            let current = engine.final_mask().cloned().unwrap_or_else(|| Mask::empty(32, 32));
            let click = match next_click(&current, &scene.gt) {
                Ok(c) if rng.random_bool(0.7) => c,
                _ => random_click(&mut rng, 32, 32, 0),
            };
            let before = engine.clone();
            let outcome = match engine.step(click) {
                Ok(o) => o,
                Err(e) => {
                    violations.push(format!("session {s}: step failed: {e}"));
                    break;
                }
            };
            steps += 1;
            let Some(routing) = outcome.routing.as_ref() else {
                violations.push(format!("session {s}: no routing in {}", mode.as_str()));
                break;
            };
            match routing.decision {
                Decision::Spawn => spawns += 1,
                Decision::Assign => assigns += 1,
                Decision::Negative => {}
            }
            for msg in check_step(&before, &engine, click, &theta0, routing) {
                violations.push(format!("session {s}: {msg}"));
            }
        }
    }
    let mut detail = format!(
        "200 sessions, {steps} steps ({spawns} spawns, {assigns} assignments), {} violations",
        violations.len()
    );
    if let Some(first) = violations.first() {
        detail.push_str(&format!("; first: {first}"));
    }
    verdict(violations.is_empty(), detail)
}

// ---------------------------------------------------------------------------

fn brute_noc(ious: &[f64], thr: f64, max: usize) -> usize {
    let mut k = 1;
    while k <= max && k <= ious.len() {
        if ious[k - 1] >= thr {
            return k;
        }
        k += 1;
    }
    max
}

/// 4-connected components by breadth-first flood fill, in order of first pixel.
fn brute_components(bits: &[bool], w: usize, h: usize) -> Vec<Vec<usize>> {
    let mut label = vec![usize::MAX; bits.len()];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..bits.len() {
        if !bits[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if bits[q] && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Squared distance from `p` to the nearest pixel outside `comp`, counting
/// the ring beyond the image border as outside.
fn brute_distance(p: usize, comp: &BTreeSet<usize>, w: usize, h: usize) -> i64 {
    let (px, py) = ((p % w) as i64, (p / w) as i64);
    let (wi, hi) = (w as i64, h as i64);
    let mut best = [(px + 1), (wi - px), (py + 1), (hi - py)].iter().map(|d| d * d).min().unwrap();
    for q in 0..w * h {
        if !comp.contains(&q) {
            let (qx, qy) = ((q % w) as i64, (q / w) as i64);
            best = best.min((px - qx).pow(2) + (py - qy).pow(2));
        }
    }
    best
}

fn brute_next_click(pred: &Mask, gt: &Mask) -> Option<(u32, u32, Sign)> {
    let (w, h) = (gt.width(), gt.height());
    let fneg: Vec<bool> = gt.bits().iter().zip(pred.bits()).map(|(&g, &p)| g && !p).collect();
    let fpos: Vec<bool> = gt.bits().iter().zip(pred.bits()).map(|(&g, &p)| p && !g).collect();
    let mut regions: Vec<(Vec<usize>, Sign)> = brute_components(&fneg, w, h).into_iter().map(|c| (c, Sign::Positive)).collect();
    regions.extend(brute_components(&fpos, w, h).into_iter().map(|c| (c, Sign::Negative)));
    // largest area; then false negatives; then earliest first pixel
    let mut best: Option<&(Vec<usize>, Sign)> = None;
    for r in &regions {
        let better = match best {
            None => true,
            Some(b) => {
                let rank = |s: Sign| if s == Sign::Positive { 0 } else { 1 };
                (r.0.len(), std::cmp::Reverse(rank(r.1)), std::cmp::Reverse(r.0[0]))
                    > (b.0.len(), std::cmp::Reverse(rank(b.1)), std::cmp::Reverse(b.0[0]))
            }
        };
        if better {
            best = Some(r);
        }
    }
    let (pixels, sign) = best?;
    let set: BTreeSet<usize> = pixels.iter().copied().collect();
    let mut anchor = pixels[0];
    let mut far = -1;
    for &p in pixels {
        let d = brute_distance(p, &set, w, h);
        if d > far {
            far = d;
            anchor = p;
        }
    }
    Some(((anchor % w) as u32, (anchor / w) as u32, *sign))
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut noc_mismatch = 0;
    let mut trajs = Vec::new();
    for i in 0..1000 {
        let len = rng.random_range(0..=25);
        let ious: Vec<f64> = (0..len)
            .map(|_| if rng.random_bool(0.1) { [0.85, 0.9][rng.random_range(0..2)] } else { rng.random_range(0.0..=1.0) })
            .collect();
        let thr = [0.85, 0.9, rng.random_range(0.0..=1.0)][rng.random_range(0..3)];
        let max = rng.random_range(1..=25);
        let t = Trajectory::new(format!("t{i}"), ious.clone(), &[thr]);
        if noc(&t, thr, max) != brute_noc(&ious, thr, max) {
            noc_mismatch += 1;
        }
        trajs.push(t);
    }
    let mut fr_mismatch = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let start = rng.random_range(0..=1000 - n);
        let group = &trajs[start..start + n];
        let thr = [0.85, 0.9][rng.random_range(0..2)];
        let max = rng.random_range(1..=25);
        let mut failed = 0;
        for t in group {
            let mut reached = false;
            for k in 0..max.min(t.ious.len()) {
                if t.ious[k] >= thr {
                    reached = true;
                }
            }
            if !reached {
                failed += 1;
            }
        }
        if fr(group, thr, max).unwrap() != failed as f64 / n as f64 {
            fr_mismatch += 1;
        }
    }

    let mut click_mismatch = 0;
    let mut off_error = 0;
    let mut pairs = 0;
    while pairs < 100 {
        let (w, h) = (rng.random_range(8..=40), rng.random_range(8..=40));
        let gt = blocky_mask(&mut rng, w, h);
        let pred = blocky_mask(&mut rng, w, h);
        let Some(expected) = brute_next_click(&pred, &gt) else { continue };
        pairs += 1;
        let got = next_click(&pred, &gt).unwrap();
        let (x, y) = (got.x as usize, got.y as usize);
        if gt.get(x, y) == pred.get(x, y) {
            off_error += 1;
        }
        if (got.x, got.y, got.sign) != expected {
            click_mismatch += 1;
        }
    }
    verdict(
        noc_mismatch == 0 && fr_mismatch == 0 && click_mismatch == 0 && off_error == 0,
        format!(
            "noc mismatches {noc_mismatch}/1000, fr mismatches {fr_mismatch}/200 groups, next_click mismatches {click_mismatch}/100, clicks off an error pixel {off_error}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn ablation_ordering() -> Verdict {
    let start = Instant::now();
    let model = common::pretrained();
    let synth = SynthConfig::default();
    let samples: Vec<_> = (0..synth.n_samples as u64)
        .map(|i| {
            let s = generate_scene(&synth, i).unwrap();
            Ok(BenchSample { sample_id: format!("{i:04}"), image: Arc::new(s.image), gt: s.gt })
        })
        .collect();
    let cfg = BenchConfig { modes: Mode::ALL.to_vec(), ..Default::default() };
    let report = run_benchmark(&samples, &model.params, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let n90 = |m: Mode| report.mode(m).and_then(|s| s.noc(0.9)).unwrap();
    let (base, naive, dc, nomerge, full) =
        (n90(Mode::Baseline), n90(Mode::NaiveTta), n90(Mode::DcOnly), n90(Mode::DcTtaNoMerge), n90(Mode::DcTta));
    let ok = base >= dc && base >= naive && full <= naive && full <= dc && full <= nomerge && base - full >= 0.3 && secs < 900.0;
    verdict(
        ok,
        format!(
            "NoC90 baseline {base:.3}, naive_tta {naive:.3}, dc_only {dc:.3}, dc_tta_no_merge {nomerge:.3}, dc_tta {full:.3}; baseline - dc_tta = {:.3}; {} samples in {secs:.0}s",
            base - full,
            synth.n_samples
        ),
    )
}

// ---------------------------------------------------------------------------

/// Fraction of `part` covered by `mask`.
fn coverage(part: &Mask, mask: &Mask) -> f64 {
    let hit = part.bits().iter().zip(mask.bits()).filter(|(&a, &b)| a && b).count();
    hit as f64 / part.area() as f64
}

/// Frozen two-part scene: a heavily camouflaged pair of blobs where the
/// oracle's third click lands on the part the baseline has not picked up.
const FIG3_SCENE: u64 = 91;
const FIG3_CLICK: usize = 3;

fn two_part_fixture() -> Verdict {
    let model = common::pretrained();
    let synth = SynthConfig { parts_per_object: [2, 2], camouflage_level: 0.9, ..Default::default() };
    let scene = generate_scene(&synth, FIG3_SCENE).unwrap();
    let image = Arc::new(scene.image.clone());
    let cfg = EngineConfig::default();
    let mut base = Engine::new(Arc::clone(&image), Arc::clone(&model.params), Mode::Baseline, cfg.clone()).unwrap();
    let mut dc = Engine::new(image, Arc::clone(&model.params), Mode::DcOnly, cfg).unwrap();
    let mut before = Mask::empty(scene.gt.width(), scene.gt.height());
    for t in 1..=FIG3_CLICK {
        let click = next_click(&before, &scene.gt).unwrap();
        let b = base.step(click).unwrap().mask;
        let d = dc.step(click).unwrap().mask;
        if t < FIG3_CLICK {
            before = b;
            continue;
        }
        let Some(k) = scene.parts.iter().position(|p| p.get(click.x as usize, click.y as usize)) else {
            return verdict(false, "fixture click is not inside a part");
        };
        let other = &scene.parts[1 - k];
        let clicked = &scene.parts[k];
        let precondition = click.sign == Sign::Positive
            && coverage(other, &before) >= 0.5
            && coverage(clicked, &before) < 0.5
            && coverage(clicked, &b) < 0.5;
        let (ib, id) = (iou(&b, &scene.gt).unwrap(), iou(&d, &scene.gt).unwrap());
        return verdict(
            precondition && id > ib,
            format!(
                "scene {FIG3_SCENE}, click {t} on part {k}: baseline covers {:.2} of it (precondition {precondition}); IoU baseline {ib:.4}, dc_only {id:.4}",
                coverage(clicked, &b)
            ),
        );
    }
    unreachable!()
}

// ---------------------------------------------------------------------------

fn dcseg(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dcseg")).args(args).output().expect("run dcseg");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn determinism() -> Verdict {
    let model = common::pretrained();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (code, _, err) = dcseg(&["--seed", "3", "generate", "--out", path_str(&data), "--n-samples", "12"]);
    if code != 0 {
        return verdict(false, format!("generate exited {code}: {err}"));
    }
    let mut reports = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("report{run}.json"));
        let (code, _, err) = dcseg(&[
            "--seed",
            "3",
            "bench",
            "--model",
            path_str(&model.path),
            "--dataset",
            path_str(&data),
            "--modes",
            "baseline,naive_tta,dc_only,dc_tta_no_merge,dc_tta",
            "--out",
            path_str(&out),
        ]);
        if code != 0 {
            return verdict(false, format!("bench exited {code}: {err}"));
        }
        reports.push(std::fs::read(&out).unwrap());
    }
    let bench_same = reports[0] == reports[1];

    // record a dc_tta session in-process, then replay it through the binary
    let image_path = data.join("images").join("0000.png");
    let gt_path = data.join("masks").join("0000.png");
    let image = read_image(&image_path).unwrap();
    let gt = dcseg::dataio::read_mask(&gt_path).unwrap();
    let cfg = EngineConfig::default();
    let mut engine = Engine::new(Arc::new(image), Arc::clone(&model.params), Mode::DcTta, cfg.clone()).unwrap();
    let mut transcript = Transcript::new(Mode::DcTta, cfg, gt.width(), gt.height(), Some(model.hash.clone()));
    let mut current = Mask::empty(gt.width(), gt.height());
    for _ in 0..8 {
        let Ok(click) = next_click(&current, &gt) else { break };
        let outcome = engine.step(click).unwrap();
        current = outcome.mask.clone();
        transcript.events.push(TranscriptEvent::from_outcome(&outcome, Some(&gt)).unwrap());
    }
    let recorded = dir.path().join("recorded.json");
    std::fs::write(&recorded, serde_json::to_string(&transcript).unwrap()).unwrap();
    let replayed = dir.path().join("replayed.json");
    let (code, _, err) = dcseg(&[
        "replay",
        "--model",
        path_str(&model.path),
        "--image",
        path_str(&image_path),
        "--gt",
        path_str(&gt_path),
        "--clicks",
        path_str(&recorded),
        "--out",
        path_str(&replayed),
    ]);
    let replay_same = code == 0 && {
        let back: Transcript = serde_json::from_slice(&std::fs::read(&replayed).unwrap()).unwrap();
        let a: Vec<&String> = back.events.iter().map(|e| &e.mask_hash).collect();
        let b: Vec<&String> = transcript.events.iter().map(|e| &e.mask_hash).collect();
        a == b && !a.is_empty()
    };
    verdict(
        bench_same && replay_same,
        format!(
            "bench report byte-identical across runs: {bench_same} ({} bytes); replay of {} events reproduces mask hashes: {replay_same}{}",
            reports[0].len(),
            transcript.events.len(),
            if code == 0 { String::new() } else { format!(" (replay exited {code}: {})", err.trim()) }
        ),
    )
}

// ---------------------------------------------------------------------------

fn baseline_equivalence() -> Verdict {
    let model = common::pretrained();
    let mut mismatched = 0;
    let mut steps = 0;
    for s in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + s);
        let synth = SynthConfig { width: 32, height: 32, parts_per_object: [1, 3], seed: 77, ..Default::default() };
        let scene = generate_scene(&synth, s).unwrap();
        let mut engine =
            Engine::new(Arc::new(scene.image.clone()), Arc::clone(&model.params), Mode::Baseline, EngineConfig::default())
                .unwrap();
        let mut clicks = Vec::new();
        let mut prev: Option<Mask> = None;
        for t in 1..=rng.random_range(1..=20u32) {
            let current = prev.clone().unwrap_or_else(|| Mask::empty(32, 32));
            let click = match next_click(&current, &scene.gt) {
                Ok(c) if rng.random_bool(0.6) => c,
                _ => random_click(&mut rng, 32, 32, 0),
            };
            let got = engine.step(click).unwrap().mask;
            clicks.push(Click { serial: t, ..click });
            let direct = predict_mask(&scene.image, &PromptState::new(clicks.clone(), prev.as_ref()), &model.params).unwrap();
            steps += 1;
            if got != direct || mask_hash(&got) != mask_hash(&direct) {
                mismatched += 1;
            }
            prev = Some(direct);
        }
    }
    verdict(mismatched == 0, format!("50 sessions, {steps} steps, {mismatched} masks differ from direct inference"))
}

// ---------------------------------------------------------------------------

fn main() {
    let t0 = Instant::now();
    let model = common::pretrained();
    match model.validation_iou {
        Some(v) => println!("info: pretrained default model in {:.0}s, validation 1-click IoU {v:.3}", t0.elapsed().as_secs_f64()),
        None => println!("info: using cached pretrained model {}", model.path.display()),
    }

    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("merge arithmetic oracle", merge_oracle),
        ("routing and unit invariants", routing_invariants),
        ("metric oracles", metric_oracles),
        ("ablation ordering", ablation_ordering),
        ("two-part scenario fixture", two_part_fixture),
        ("determinism", determinism),
        ("baseline equivalence", baseline_equivalence),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed().as_secs_f64();
        println!("{} {name}: {} [{elapsed:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed += 1;
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
