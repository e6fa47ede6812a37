//! Acceptance suite: eleven property and oracle checks, one PASS/FAIL line
//! each, with a wall-clock budget per check.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use deepfake_align::dma::{build_dataset_to, SourceRecord};
use deepfake_align::domain::{render_response, BBox, DmaRecord, Label, RegionBox, RegionId};
use deepfake_align::fdm::{
    forgery_focal_loss, grad_check, identity_focal_loss, recon_loss, train_fdm, FdmBatch, FdmConfig, FdmDims,
    FdmParams, FocalParams, LossWeights,
};
use deepfake_align::grpo::{default_pool, demo_record, group_advantages, perfect_response, run_simulation, SimConfig};
use deepfake_align::lexicon::{default_lexicon, Lexicon};
use deepfake_align::metrics::{accuracy, auc, f1, EvalPair};
use deepfake_align::providers::{HashedBagEmbedder, LandmarkFixture};
use deepfake_align::rewards::{iou, reward_align, score_response, RewardWeights};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (c, d): (f64, f64) = (rng.random(), rng.random());
        if let Ok(bx) = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)) {
            return bx;
        }
    }
}

/// A record whose boxes cover exactly the regions its text names, as the
/// dataset builder would produce.
fn random_record(rng: &mut ChaCha8Rng, lexicon: &Lexicon) -> DmaRecord {
    let label = if rng.random_bool(0.5) { Label::Fake } else { Label::Real };
    loop {
        let mut mentions = Vec::new();
        for _ in 0..rng.random_range(1..=4) {
            let region = RegionId::ALL[rng.random_range(0..12)];
            let phrases = lexicon.lookup(region);
            mentions.push(format!("the {} looks odd", phrases[rng.random_range(0..phrases.len())]));
        }
        let gt_text = format!("The image is {label}: {}.", mentions.join(" and "));
        let regions = lexicon.extract_regions(&gt_text);
        if regions.is_empty() {
            continue;
        }
        return DmaRecord {
            image_ref: "r".into(),
            question: "Is this face real or fake?".into(),
            gt_boxes: regions.into_iter().map(|r| RegionBox::new(r, random_box(rng))).collect(),
            gt_text,
            gt_label: label,
        };
    }
}

fn random_response(rng: &mut ChaCha8Rng, rec: &DmaRecord) -> String {
    let perfect = perfect_response(rec);
    match rng.random_range(0..9) {
        0 => perfect,
        1 => perfect.replace("fake", "real"),
        2 => {
            let cut = rng.random_range(0..=perfect.len());
            perfect.get(..cut).unwrap_or("").to_string()
        }
        3 => {
            let mut boxes = Vec::new();
            for r in RegionId::ALL {
                if rng.random_bool(0.3) {
                    boxes.push(RegionBox::new(r, random_box(rng)));
                }
            }
            let words = ["mouth", "nose", "eye", "fake", "real", "hair", "jaw", "smooth", "skin"];
            let text: Vec<&str> = (0..rng.random_range(0..8)).map(|_| words[rng.random_range(0..words.len())]).collect();
            render_response("t", &text.join(" "), &boxes)
        }
        4 => (0..rng.random_range(0..60)).map(|_| rng.random_range(32u8..127) as char).collect(),
        5 => format!("<answer>{}</answer><think>x</think>", rec.gt_text),
        6 => "<think>a</think><answer>{\"explanation\": 3, \"bboxes\": []}</answer>".into(),
        7 => format!("<think>a</think><answer>{{\"explanation\":\"{}\",\"bboxes\":[{{\"region\":\"mouth\",\"box\":[0.5,0.5,0.4,0.6]}}]}}</answer>", rec.gt_text),
        _ => String::new(),
    }
}

fn random_weights(rng: &mut ChaCha8Rng) -> RewardWeights {
    RewardWeights {
        format: rng.random_range(0.0..2.0),
        accuracy: rng.random_range(0.0..2.0),
        text: rng.random_range(0.0..2.0),
        roi: rng.random_range(0.0..2.0),
        align: rng.random_range(0.0..2.0),
        align_epsilon: 10f64.powf(rng.random_range(-9.0..-1.0)),
    }
}

fn c1_reward_bounds() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lexicon = default_lexicon();
    let embedder = HashedBagEmbedder::default();
    let mut min_perfect = f64::INFINITY;
    for case in 0..10_000 {
        let rec = random_record(&mut rng, &lexicon);
        let raw = random_response(&mut rng, &rec);
        let w = if case % 2 == 0 { RewardWeights::default() } else { random_weights(&mut rng) };
        let v = score_response(&raw, &rec, &w, &embedder, &lexicon);
        for (name, c) in ["format", "accuracy", "text", "roi", "align"].iter().zip(v.components()) {
            check((0.0..=1.0).contains(&c), || format!("case {case}: {name} = {c} for {raw:?}"))?;
        }
        check(v.combined >= 0.0 && v.combined <= w.sum(), || format!("case {case}: combined {} outside [0, {}]", v.combined, w.sum()))?;

        let p = score_response(&perfect_response(&rec), &rec, &RewardWeights::default(), &embedder, &lexicon);
        min_perfect = min_perfect.min(p.combined);
    }
    check(min_perfect >= 0.999, || format!("perfect response scored {min_perfect}"))?;
    Ok(format!("10000 pairs in bounds; min perfect combined {min_perfect:.7}"))
}

fn c2_iou_oracle() -> Outcome {
    const GRID: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid_box = |rng: &mut ChaCha8Rng| {
        let (a, b) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
        let (c, d) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
        let (x1, x2) = (a.min(b), a.max(b) + 1);
        let (y1, y2) = (c.min(d), c.max(d) + 1);
        let s = |v: usize| v as f64 / GRID as f64;
        BBox::new(s(x1), s(y1), s(x2), s(y2)).unwrap()
    };
    let inside = |b: &BBox, i: usize, j: usize| {
        let (cx, cy) = ((i as f64 + 0.5) / GRID as f64, (j as f64 + 0.5) / GRID as f64);
        cx >= b.x1() && cx <= b.x2() && cy >= b.y1() && cy <= b.y2()
    };
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let (a, b) = (grid_box(&mut rng), grid_box(&mut rng));
        let lo_i = (a.x1().min(b.x1()) * GRID as f64).floor() as usize;
        let hi_i = ((a.x2().max(b.x2()) * GRID as f64).ceil() as usize).min(GRID);
        let lo_j = (a.y1().min(b.y1()) * GRID as f64).floor() as usize;
        let hi_j = ((a.y2().max(b.y2()) * GRID as f64).ceil() as usize).min(GRID);
        let (mut inter, mut union) = (0u64, 0u64);
        for i in lo_i..hi_i {
            for j in lo_j..hi_j {
                let (ia, ib) = (inside(&a, i, j), inside(&b, i, j));
                inter += u64::from(ia && ib);
                union += u64::from(ia || ib);
            }
        }
        let oracle = inter as f64 / union as f64;
        let got = iou(&a, &b);
        worst = worst.max((got - oracle).abs());
        check((got - oracle).abs() <= 1e-3, || format!("case {case}: iou {got} vs grid {oracle}"))?;
    }
    for case in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        check(iou(&a, &b).to_bits() == iou(&b, &a).to_bits(), || format!("asymmetric case {case}"))?;
    }
    Ok(format!("1000 grid pairs, max |err| {worst:.2e}; symmetry exact on 10000 pairs"))
}

fn c3_alignment() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = RewardWeights::default().align_epsilon;
    let to_set = |mask: u16| -> BTreeSet<RegionId> {
        RegionId::ALL.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, r)| *r).collect()
    };
    for case in 0..10_000 {
        let (ma, mb) = (rng.random_range(0..4096u16), rng.random_range(0..4096u16));
        let (a, b) = (to_set(ma), to_set(mb));
        let (mut inter, mut union) = (0usize, 0usize);
        for r in RegionId::ALL {
            let (ia, ib) = (a.contains(&r), b.contains(&r));
            inter += usize::from(ia && ib);
            union += usize::from(ia || ib);
        }
        let oracle = inter as f64 / (union as f64 + eps);
        let got = reward_align(&a, &b, eps);
        check(got.to_bits() == oracle.to_bits(), || format!("case {case}: {got} vs {oracle}"))?;
        check(got.to_bits() == reward_align(&b, &a, eps).to_bits(), || format!("case {case}: asymmetric"))?;
        check((got == 0.0) == (ma & mb == 0), || format!("case {case}: zero iff disjoint violated"))?;
    }
    Ok("10000 sampled set pairs match enumeration exactly; symmetric; zero iff disjoint".into())
}

/// Regions with landmarks per image, read straight from the fixture JSON.
fn landmark_coverage(path: &Path) -> std::collections::HashMap<String, BTreeSet<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let regions = v["regions"].as_object().unwrap().keys().cloned().collect();
            (v["image_ref"].as_str().unwrap().to_string(), regions)
        })
        .collect()
}

fn c4_dma_builder() -> Outcome {
    let src = fixtures().join("source_50.jsonl");
    let lm_path = fixtures().join("landmarks_50.jsonl");
    let lexicon = default_lexicon();
    let fixture = LandmarkFixture::load(&lm_path).map_err(|e| e.to_string())?;
    let run = || {
        let mut out = Vec::new();
        let report = build_dataset_to(&src, &fixture, &mut out, &lexicon, 0.05).map_err(|e| e.to_string())?;
        Ok::<_, String>((out, report))
    };
    let (first, report) = run()?;
    let (second, _) = run()?;
    check(first == second, || "outputs differ between runs".into())?;

    let coverage = landmark_coverage(&lm_path);
    let empty = BTreeSet::new();
    let built: std::collections::HashMap<String, BTreeSet<String>> = String::from_utf8(first)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let regions = v["gt_boxes"].as_array().unwrap().iter().map(|b| b["region"].as_str().unwrap().to_string()).collect();
            (v["image_ref"].as_str().unwrap().to_string(), regions)
        })
        .collect();
    let mut nonempty = 0;
    for line in std::fs::read_to_string(&src).unwrap().lines() {
        let s: SourceRecord = serde_json::from_str(line).unwrap();
        let mentioned: BTreeSet<String> = lexicon.extract_regions(&s.gt_text).iter().map(|r| r.as_str().to_string()).collect();
        let covered = coverage.get(&s.image_ref).unwrap_or(&empty);
        let expected: BTreeSet<String> = mentioned.intersection(covered).cloned().collect();
        match built.get(&s.image_ref) {
            Some(got) => check(got == &expected, || format!("{}: boxes {got:?} vs expected {expected:?}", s.image_ref))?,
            None => check(expected.is_empty(), || format!("{}: skipped but expected {expected:?}", s.image_ref))?,
        }
        nonempty += usize::from(!expected.is_empty());
    }
    check(report.succeeded == nonempty && report.total == 50, || format!("report {report:?}"))?;
    Ok(format!(
        "50 records: {} built, {} without regions, {} without landmarks; byte-identical reruns",
        report.succeeded, report.skipped_no_regions, report.skipped_missing_landmarks
    ))
}

fn c5_advantages() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eps = 1e-8;
    let mut general_shift_err: f64 = 0.0;
    for case in 0..1000 {
        let k = rng.random_range(2..=16);
        let rewards: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let adv = group_advantages(&rewards, eps).unwrap();
        let sum: f64 = adv.iter().sum();
        check(sum.abs() <= 1e-9 * k as f64, || format!("case {case}: sum {sum}"))?;

        let c: f64 = rng.random_range(-5.0..5.0);
        let constant = group_advantages(&vec![c; k], eps).unwrap();
        check(constant.iter().all(|&a| a == 0.0), || format!("case {case}: constant group gave {constant:?}"))?;

        // dyadic rewards and shifts are exactly representable, so the
        // shifted group must give bit-identical advantages
        let dyadic: Vec<f64> = (0..k).map(|_| rng.random_range(0..=1024) as f64 / 1024.0).collect();
        let shift = rng.random_range(-4096..=4096) as f64 / 1024.0;
        let shifted: Vec<f64> = dyadic.iter().map(|r| r + shift).collect();
        let (a, b) = (group_advantages(&dyadic, eps).unwrap(), group_advantages(&shifted, eps).unwrap());
        check(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()), || format!("case {case}: shift changed advantages"))?;

        let moved: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let m = group_advantages(&moved, eps).unwrap();
        general_shift_err = adv.iter().zip(&m).map(|(x, y)| (x - y).abs()).fold(general_shift_err, f64::max);
    }
    Ok(format!("1000 groups; shift invariance bit-exact on dyadic groups, max drift {general_shift_err:.1e} on arbitrary floats"))
}

fn c6_policy_improvement() -> Outcome {
    let rec = demo_record();
    let pool = default_pool(&rec);
    let cfg = SimConfig { group_size: 8, iterations: 200, learning_rate: 0.5, seed: 7, ..Default::default() };
    let outcome = run_simulation(&cfg, &rec, &pool, &HashedBagEmbedder::default(), &default_lexicon()).map_err(|e| e.to_string())?;
    let s = outcome.summary();
    check(s.best_template == 0, || format!("best template is {}", s.best_template))?;
    check(s.improvement >= 0.2, || format!("mean reward {} -> {}", s.initial_mean_reward, s.final_mean_reward))?;
    check(s.best_template_prob_end > s.best_template_prob_start, || {
        format!("perfect template probability {} -> {}", s.best_template_prob_start, s.best_template_prob_end)
    })?;
    Ok(format!(
        "mean reward {:.4} -> {:.4} (+{:.4}); perfect template p {:.3} -> {:.6}",
        s.initial_mean_reward, s.final_mean_reward, s.improvement, s.best_template_prob_start, s.best_template_prob_end
    ))
}

fn random_batch(dims: FdmDims, n: usize, rng: &mut ChaCha8Rng) -> FdmBatch {
    FdmBatch {
        features: Array2::from_shape_fn((n, dims.feature), |_| rng.random_range(-2.0..2.0)),
        identity: (0..n).map(|_| rng.random_range(0..dims.identities)).collect(),
        fake: (0..n).map(|_| rng.random_bool(0.5)).collect(),
    }
}

fn c7_grad_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let dims = FdmDims { feature: 8, identity: 4, structural: 3, forgery: 2, identities: 3 };
    let params = FdmParams::random(dims, 0.5, &mut rng);
    let batch = random_batch(dims, 10, &mut rng);
    let mut worst: f64 = 0.0;
    for (fp, lw) in [
        (FocalParams::default(), LossWeights::default()),
        (FocalParams::default(), LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0 }),
    ] {
        let err = grad_check(&params, &batch, &fp, &lw, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(err);
    }
    check(worst < 1e-4, || format!("max relative error {worst:.3e}"))?;
    Ok(format!("{} parameters, max relative error {worst:.2e}", params.num_params()))
}

fn c8_focal_reductions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (n, m) = (rng.random_range(1..40), rng.random_range(2..10));
        let logits = Array2::from_shape_fn((n, m), |_| rng.random_range(-6.0..6.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let mut probs = logits.clone();
        let mut ce = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            ce += lse - row[labels[i]];
            row.mapv_inplace(|z| (z - lse).exp());
        }
        ce /= n as f64;
        let got = identity_focal_loss(&probs, &labels, &FocalParams::cross_entropy(m)).map_err(|e| e.to_string())?;
        worst = worst.max((got - ce).abs());
    }
    check(worst <= 1e-12, || format!("focal vs cross-entropy differ by {worst:.3e}"))?;

    let fp = FocalParams::default();
    let onehot = Array2::from_shape_fn((3, 4), |(i, j)| f64::from(u8::from(i == j)));
    let id = identity_focal_loss(&onehot, &[0, 1, 2], &fp).map_err(|e| e.to_string())?;
    let forg = forgery_focal_loss(&Array1::from(vec![1.0, 0.0, 1.0]), &[true, false, true], &fp).map_err(|e| e.to_string())?;
    let feats = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64);
    let rec = recon_loss(&feats, &feats.clone()).map_err(|e| e.to_string())?;
    check(id == 0.0 && forg == 0.0 && rec == 0.0, || format!("perfect-prediction losses {id}, {forg}, {rec}"))?;
    Ok(format!("200 batches, max |focal - CE| {worst:.1e}; perfect predictions give 0, 0, 0"))
}

fn c9_fdm_training() -> Outcome {
    let full = train_fdm(&FdmConfig::default()).map_err(|e| e.to_string())?;
    let mut ablated_cfg = FdmConfig::default();
    ablated_cfg.loss_weights.lambda2 = 0.0;
    let ablated = train_fdm(&ablated_cfg).map_err(|e| e.to_string())?;
    let (acc, acc0) = (full.metrics.forgery_accuracy, ablated.metrics.forgery_accuracy);
    check(acc >= 0.95, || format!("held-out forgery accuracy {acc}"))?;
    check(acc0 <= 0.6, || format!("ablated forgery accuracy {acc0}"))?;
    Ok(format!("held-out forgery accuracy {acc:.4} (AUC {:.4}); without forgery loss {acc0:.4}", full.metrics.forgery_auc))
}

fn c10_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let labels = [Label::Fake, Label::Real, Label::Unknown];
    let mut auc_sets = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=20);
        let pairs: Vec<EvalPair> = (0..n)
            .map(|_| EvalPair {
                pred: labels[rng.random_range(0..3)],
                gt: labels[rng.random_range(0..2)],
                score: Some(rng.random_range(0..8) as f64 / 7.0),
            })
            .collect();
        // confusion table indexed by [pred][gt]
        let mut table = [[0usize; 2]; 3];
        for p in &pairs {
            let pi = labels.iter().position(|&l| l == p.pred).unwrap();
            let gi = labels.iter().position(|&l| l == p.gt).unwrap();
            table[pi][gi] += 1;
        }
        let correct = table[0][0] + table[1][1];
        let (tp, fp, fneg) = (table[0][0], table[0][1], table[1][0] + table[2][0]);
        let acc_oracle = correct as f64 / n as f64;
        let f1_oracle = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fneg) as f64 };
        let (a, f) = (accuracy(&pairs).unwrap(), f1(&pairs).unwrap());
        check(a == acc_oracle, || format!("case {case}: accuracy {a} vs {acc_oracle}"))?;
        check(f == f1_oracle, || format!("case {case}: f1 {f} vs {f1_oracle}"))?;
        if tp > 0 {
            let (p, r) = (tp as f64 / (tp + fp) as f64, tp as f64 / (tp + fneg) as f64);
            check((2.0 * p * r / (p + r) - f).abs() <= 1e-15, || format!("case {case}: harmonic mean disagrees"))?;
        }

        let scores: Vec<f64> = pairs.iter().map(|p| p.score.unwrap()).collect();
        let positive: Vec<bool> = pairs.iter().map(|p| p.gt == Label::Fake).collect();
        if positive.iter().all(|&x| x) || positive.iter().all(|&x| !x) {
            continue;
        }
        auc_sets += 1;
        let (mut twice_wins, mut total) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if positive[i] && !positive[j] {
                    total += 2;
                    twice_wins += if scores[i] > scores[j] { 2 } else if scores[i] == scores[j] { 1 } else { 0 };
                }
            }
        }
        let oracle = twice_wins as f64 / total as f64;
        let got = auc(&scores, &positive).unwrap();
        check(got == oracle, || format!("case {case}: auc {got} vs {oracle}"))?;
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() * 10.0 - 4.0).collect();
        check(auc(&transformed, &positive).unwrap() == got, || format!("case {case}: auc changed under monotone map"))?;
    }
    Ok(format!("1000 sets exact on accuracy and F1, {auc_sets} two-class sets exact on AUC and transform-invariant"))
}

fn serve_record() -> Value {
    serde_json::to_value(demo_record()).unwrap()
}

fn c11_serve_contract() -> Outcome {
    let rec = demo_record();
    let good = perfect_response(&rec);
    let mut lines = Vec::new();
    let mut malformed_ids = BTreeSet::new();
    for i in 0..100 {
        let id = format!("req-{i:03}");
        let line = if i % 10 == 3 {
            malformed_ids.insert(id.clone());
            let mut record = serve_record();
            match i / 10 {
                0 => serde_json::json!({ "id": id, "record": record }),
                1 => serde_json::json!({ "id": id, "raw_response": 17, "record": record }),
                2 => serde_json::json!({ "id": id, "raw_response": good }),
                3 => {
                    record["gt_label"] = Value::from("unknown");
                    serde_json::json!({ "id": id, "raw_response": good, "record": record })
                }
                4 => {
                    record["gt_boxes"][0]["box"] = serde_json::json!([0.9, 0.1, 0.2, 0.3]);
                    serde_json::json!({ "id": id, "raw_response": good, "record": record })
                }
                5 => {
                    record["gt_boxes"][0]["region"] = Value::from("forehead");
                    serde_json::json!({ "id": id, "raw_response": good, "record": record })
                }
                6 => {
                    record["gt_boxes"][1]["region"] = record["gt_boxes"][0]["region"].clone();
                    serde_json::json!({ "id": id, "raw_response": good, "record": record })
                }
                7 => {
                    record["gt_text"] = Value::from("   ");
                    serde_json::json!({ "id": id, "raw_response": good, "record": record })
                }
                8 => serde_json::json!({ "id": id, "raw_response": good, "record": "not a record" }),
                _ => serde_json::json!({ "id": id, "raw_response": good, "record": { "image_ref": "x" } }),
            }
        } else {
            let raw = if i % 2 == 0 { good.clone() } else { format!("The face is {}.", if i % 4 == 1 { "fake" } else { "real" }) };
            serde_json::json!({ "id": id, "raw_response": raw, "record": serve_record() })
        };
        lines.push(line.to_string());
    }

    let mut child = Command::new(env!("CARGO_BIN_EXE_deepfake-align"))
        .arg("serve")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut stdin = child.stdin.take().unwrap();
    let payload = lines.join("\n") + "\n";
    let writer = std::thread::spawn(move || stdin.write_all(payload.as_bytes()));
    let replies: Vec<Value> = BufReader::new(child.stdout.take().unwrap())
        .lines()
        .map(|l| serde_json::from_str(&l.unwrap()).unwrap())
        .collect();
    writer.join().unwrap().map_err(|e| e.to_string())?;
    let status = child.wait().map_err(|e| e.to_string())?;

    check(status.code() == Some(0), || format!("exit status {status}"))?;
    check(replies.len() == 100, || format!("{} replies", replies.len()))?;
    let reply_ids: BTreeSet<String> = replies.iter().map(|r| r["id"].as_str().unwrap_or("").to_string()).collect();
    let request_ids: BTreeSet<String> = (0..100).map(|i| format!("req-{i:03}")).collect();
    check(reply_ids == request_ids, || "reply ids do not match request ids".into())?;
    let errors: BTreeSet<String> =
        replies.iter().filter(|r| r.get("error").is_some()).map(|r| r["id"].as_str().unwrap().to_string()).collect();
    check(errors == malformed_ids, || format!("error replies for {errors:?}"))?;
    for r in replies.iter().filter(|r| r.get("error").is_none()) {
        check(r["components"].is_object() && r["combined"].is_f64(), || format!("bad reply {r}"))?;
    }
    Ok(format!("100 requests, 100 id-matched replies, {} errors, exit 0", errors.len()))
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("reward bounds", Duration::from_secs(10), c1_reward_bounds),
        ("IoU oracle", Duration::from_secs(30), c2_iou_oracle),
        ("alignment reward", Duration::from_secs(5), c3_alignment),
        ("DMA builder oracle", Duration::from_secs(5), c4_dma_builder),
        ("GRPO advantages", Duration::from_secs(5), c5_advantages),
        ("toy policy improvement", Duration::from_secs(10), c6_policy_improvement),
        ("FDM gradient check", Duration::from_secs(10), c7_grad_check),
        ("focal-loss reductions", Duration::from_secs(5), c8_focal_reductions),
        ("FDM synthetic training", Duration::from_secs(60), c9_fdm_training),
        ("metrics oracle", Duration::from_secs(10), c10_metrics_oracle),
        ("serve-mode contract", Duration::from_secs(5), c11_serve_contract),
    ];
    let mut failures = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            if elapsed <= *budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        match result {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({elapsed:.2?})", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL [{:>2}] {name}: {why} ({elapsed:.2?})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
