//! One pass/fail line per acceptance criterion. Runs without the libtest
//! harness so the lines are always printed.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use fewshot::augment::{
    build_target_background_category, contrast_lut, gamma_lut, replace_background, RegionRecord, TARGET_BACKGROUND,
};
use fewshot::detector::{build_targets, image_tensor, reweight, support_tensor, Detector, DetectorConfig};
use fewshot::episodic::{build_kshot_subset, make_split, SplitMode};
use fewshot::eval::{average_precision, iou, match_detections, ApMode, Detection, GroundTruth};
use fewshot::experiment::{run_comparison, DataSource, ExperimentSpec};
use fewshot::nn::gradcheck::{max_relative_error, numerical_gradient};
use fewshot::nn::{Tape, Tensor};
use fewshot::pipeline::{desk_corpus, run_pipeline, EvalConfig, DESK_NOVEL};
use fewshot::trainer::{finetune, train_base, Checkpoint, TrainOptions, TrainerConfig};
use fewshot::voc::{
    generate_synthetic_dataset, parse_voc_annotation, shape_palette, write_voc_annotation, Annotation, BoundingBox,
    CategoryId, CategoryRegistry, ImageRecord, SyntheticSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, ok: String, fail: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(fail)
    }
}

fn random_record(rng: &mut ChaCha8Rng, id: &str, size: usize, boxes: usize) -> ImageRecord {
    let pixels = (0..size * size * 3).map(|_| rng.gen()).collect();
    let annotations = (0..boxes)
        .map(|i| {
            let x0 = rng.gen_range(0.0..size as f64 * 0.5);
            let y0 = rng.gen_range(0.0..size as f64 * 0.5);
            let w = rng.gen_range(3.0..size as f64 * 0.5);
            let h = rng.gen_range(3.0..size as f64 * 0.5);
            Annotation::new(CategoryId(i % 2), BoundingBox::new(x0, y0, x0 + w, y0 + h).unwrap())
        })
        .collect();
    ImageRecord::new(id, size, size, pixels, annotations, None).unwrap()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let cfg = DetectorConfig {
        input_size: 16,
        widths: vec![4, 8],
        meta_channels: 8,
        ..DetectorConfig::default()
    };
    let cats = [CategoryId(0), CategoryId(1)];
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_record(&mut rng, "q", 16, 2);
        let queries = vec![(
            image_tensor::<f64>(&q, 16),
            build_targets::<f64>(&q, &cats, &cfg).unwrap(),
        )];
        let supports: Vec<Vec<Tensor<f64>>> = q
            .annotations
            .iter()
            .map(|a| vec![support_tensor::<f64>(&q, &a.bbox, 16).unwrap()])
            .collect();
        let det = Detector::<f64>::new(cfg.clone(), 100 + seed).unwrap();
        let loss_of = |d: &Detector<f64>| {
            let mut tape = Tape::new();
            let bound = d.bind(&mut tape).unwrap();
            let l = d.episode_loss(&mut tape, &bound, &supports, &queries).unwrap();
            (tape, l)
        };
        let mut analytic = det.clone();
        let (tape, l) = loss_of(&analytic);
        tape.backward(l.total, analytic.params_mut()).unwrap();
        let grads: Vec<_> = analytic.params().iter().map(|(_, p)| p.grad.clone()).collect();
        let numeric = numerical_gradient(det.params(), 1e-5, |s| {
            let d = Detector::from_params(cfg.clone(), s.clone()).unwrap();
            let (tape, l) = loss_of(&d);
            Ok(tape.value(l.total).item().unwrap())
        })
        .unwrap();
        worst = worst.max(max_relative_error(&grads, &numeric, 1e-6));
    }
    let t = start.elapsed();
    check(
        worst < 1e-3 && t < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 5 seeds in {t:.1?}"),
        format!("max relative error {worst:.2e}, runtime {t:.1?}"),
    )
}

fn reweight_identity() -> Outcome {
    let det = Detector::<f32>::new(DetectorConfig::default(), 3).unwrap();
    let m = det.config().meta_channels;
    let ones = Tensor::new(vec![m], vec![1.0f32; m]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 0..20 {
        let r = random_record(&mut rng, "r", 64, 0);
        let f = det.extract_features(&image_tensor(&r, 64)).unwrap();
        if reweight(&f, &ones).unwrap() != f {
            return Err(format!("input {i}: reweighted features differ"));
        }
        if det.predict(&f, Some(&ones)).unwrap() != det.predict(&f, None).unwrap() {
            return Err(format!("input {i}: predictions differ"));
        }
    }
    Ok("20 random inputs bit-identical".into())
}

/// Reference AP: rank, then for every cutoff re-match the prefix from scratch.
fn oracle_ap(dets: &[Detection], gt: &GroundTruth, mode: ApMode) -> Option<f64> {
    let npos = gt.values().flatten().filter(|(_, d)| !d).count();
    if npos == 0 {
        return None;
    }
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap()
            .then(a.bbox.lex_cmp(&b.bbox))
            .then(a.image_id.cmp(&b.image_id))
    });
    // outcome of detection k given the prefix before it: 1 tp, 0 fp, -1 ignored
    let outcome = |k: usize| -> i32 {
        let mut used: BTreeMap<(String, usize), bool> = BTreeMap::new();
        let mut last = 0;
        for d in &ranked[..=k] {
            let boxes = gt.get(&d.image_id).cloned().unwrap_or_default();
            let mut best: Option<(usize, f64)> = None;
            let mut difficult = false;
            for (j, (b, diff)) in boxes.iter().enumerate() {
                let o = iou(&d.bbox, b);
                if o >= 0.5 && *diff {
                    difficult = true;
                }
                if o >= 0.5 && !diff && !used.contains_key(&(d.image_id.clone(), j)) && best.is_none_or(|(_, v)| o > v)
                {
                    best = Some((j, o));
                }
            }
            last = match best {
                Some((j, _)) => {
                    used.insert((d.image_id.clone(), j), true);
                    1
                }
                None if difficult => -1,
                None => 0,
            };
        }
        last
    };
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    for k in 0..ranked.len() {
        match outcome(k) {
            1 => tp += 1.0,
            0 => fp += 1.0,
            _ => continue,
        }
        points.push((tp / npos as f64, tp / (tp + fp)));
    }
    let best_at = |r: f64| points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max);
    Some(match mode {
        ApMode::Voc07ElevenPoint => (0..=10).map(|t| best_at(t as f64 / 10.0)).sum::<f64>() / 11.0,
        ApMode::AllPoint => {
            let mut prev = 0.0;
            let mut area = 0.0;
            for &(r, _) in &points {
                if r > prev {
                    area += (r - prev) * best_at(r);
                    prev = r;
                }
            }
            area
        }
    })
}

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let images = rng.gen_range(1..=5);
        let mut gt: GroundTruth = BTreeMap::new();
        let mut dets = Vec::new();
        for i in 0..images {
            let id = format!("img{i}");
            let boxes: Vec<(BoundingBox, bool)> = (0..rng.gen_range(0..=4))
                .map(|_| {
                    let (x, y) = (rng.gen_range(0..12) as f64, rng.gen_range(0..12) as f64);
                    let (w, h) = (rng.gen_range(3..8) as f64, rng.gen_range(3..8) as f64);
                    (BoundingBox::new(x, y, x + w, y + h).unwrap(), rng.gen_bool(0.15))
                })
                .collect();
            gt.insert(id, boxes);
        }
        let ids: Vec<String> = gt.keys().cloned().collect();
        for _ in 0..rng.gen_range(0..=6) {
            let id = ids[rng.gen_range(0..ids.len())].clone();
            let boxes = &gt[&id];
            let bbox = if !boxes.is_empty() && rng.gen_bool(0.7) {
                let b = boxes[rng.gen_range(0..boxes.len())].0;
                let j = |r: &mut ChaCha8Rng| r.gen_range(-1..=1) as f64;
                BoundingBox::new(
                    (b.x_min + j(&mut rng)).max(0.0),
                    (b.y_min + j(&mut rng)).max(0.0),
                    b.x_max + j(&mut rng) + 1.5,
                    b.y_max + 1.5,
                )
                .unwrap()
            } else {
                let (x, y) = (rng.gen_range(0..14) as f64, rng.gen_range(0..14) as f64);
                BoundingBox::new(x, y, x + 4.0, y + 4.0).unwrap()
            };
            dets.push(Detection {
                image_id: id,
                category: CategoryId(0),
                confidence: rng.gen_range(1..6) as f64 / 6.0,
                bbox,
            });
        }
        let m = match_detections(&dets, &gt, 0.5);
        for mode in [ApMode::Voc07ElevenPoint, ApMode::AllPoint] {
            let (got, want) = (average_precision(&m, mode), oracle_ap(&dets, &gt, mode));
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                _ => return Err(format!("trial {trial}: defined-ness differs ({got:?} vs {want:?})")),
            }
        }
    }
    check(
        worst <= 1e-9,
        format!("200 trials, both AP modes, max deviation {worst:.1e}"),
        format!("max deviation {worst:.3e}"),
    )
}

fn iou_cases() -> Outcome {
    let b = |a: f64, c: f64, d: f64, e: f64| BoundingBox::new(a, c, d, e).unwrap();
    let same = iou(&b(1.0, 2.0, 5.0, 7.0), &b(1.0, 2.0, 5.0, 7.0));
    let disjoint = iou(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 2.0, 3.0, 3.0));
    let third = iou(&b(0.0, 0.0, 2.0, 1.0), &b(1.0, 0.0, 3.0, 1.0));
    check(
        same == 1.0 && disjoint == 0.0 && (third - 1.0 / 3.0).abs() <= 1e-12,
        format!("identical {same}, disjoint {disjoint}, one-third {third}"),
        format!("identical {same}, disjoint {disjoint}, one-third {third}"),
    )
}

fn augmentation_exactness() -> Outcome {
    let gamma = gamma_lut(1.5, true);
    let contrast = contrast_lut(2.0);
    for v in 0..256usize {
        let g = (255.0 * (v as f64 / 255.0).powf(1.0 / 1.5)).round() as u8;
        let c = ((v as f64 - 128.0) * 2.0 + 128.0).round().clamp(0.0, 255.0) as u8;
        if gamma[v] != g || contrast[v] != c {
            return Err(format!("lookup mismatch at input {v}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for f in 0..10 {
        let (w, h) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let pixels: Vec<u8> = (0..w * h * 3).map(|_| rng.gen()).collect();
        let mask: Vec<u8> = (0..w * h)
            .map(|_| if rng.gen_bool(0.4) { rng.gen_range(1..4) } else { 0 })
            .collect();
        let rec = ImageRecord::new("r", w, h, pixels.clone(), vec![], Some(mask.clone())).unwrap();
        let bg = ImageRecord::new("bg", w, h, (0..w * h * 3).map(|_| rng.gen()).collect(), vec![], None).unwrap();
        let out = replace_background(&rec, &bg).unwrap();
        for i in 0..w * h {
            let src = if mask[i] != 0 { &pixels } else { &bg.pixels };
            if out.pixels[i * 3..i * 3 + 3] != src[i * 3..i * 3 + 3] {
                return Err(format!("background replacement fixture {f} differs at pixel {i}"));
            }
        }
    }
    Ok("gamma 1.5 and contrast 2 tables exact on 256 inputs; 10 compositing fixtures exact".into())
}

fn exactly_k() -> Outcome {
    let spec = SyntheticSpec {
        objects_per_image: [1, 3],
        ..SyntheticSpec::simple(shape_palette(&["a", "b", "c", "d"]), 120)
    };
    let mut cases = 0;
    for seed in 0..10u64 {
        let ds = generate_synthetic_dataset(&spec, seed).unwrap();
        let cats: Vec<CategoryId> = ds.categories().ids().collect();
        for k in [1, 3, 10] {
            let subset = build_kshot_subset(&ds, &cats, k, seed).map_err(|e| e.to_string())?;
            for &c in &cats {
                let usable: usize = subset
                    .records
                    .iter()
                    .map(|r| r.annotations.iter().filter(|a| a.category == c && !a.ignored).count())
                    .sum();
                if usable != k {
                    return Err(format!(
                        "seed {seed}, k {k}: category {} has {usable} usable boxes",
                        c.0
                    ));
                }
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} (seed, k) cases, every category exactly k"))
}

fn atb_bookkeeping() -> Outcome {
    let names: Vec<String> = (0..15).map(|i| format!("c{i:02}")).collect();
    let ds = generate_synthetic_dataset(&SyntheticSpec::simple(shape_palette(&names), 80), 5).unwrap();
    let replaced = "c03";
    let slot = ds.categories().require(replaced).unwrap();
    let bg_spec = SyntheticSpec {
        id_prefix: "bg_".into(),
        ..SyntheticSpec::simple(shape_palette(&names), 6)
    };
    let regions: Vec<RegionRecord> = generate_synthetic_dataset(&bg_spec, 6)
        .unwrap()
        .records()
        .iter()
        .map(|r| RegionRecord::from_annotated(r))
        .collect();
    let out = build_target_background_category(&ds, &regions, replaced).map_err(|e| e.to_string())?;

    // counting oracle
    let mut want: BTreeMap<usize, usize> = BTreeMap::new();
    for r in ds.records().iter().filter(|r| !r.has_category(slot)) {
        for a in &r.annotations {
            *want.entry(a.category.0).or_default() += 1;
        }
    }
    *want.entry(slot.0).or_default() += regions.iter().map(|r| r.regions.len()).sum::<usize>();
    let mut got: BTreeMap<usize, usize> = BTreeMap::new();
    for r in out.records() {
        for a in &r.annotations {
            *got.entry(a.category.0).or_default() += 1;
        }
    }
    let reg = out.categories();
    check(
        reg.len() == 15 && reg.lookup(replaced).is_none() && reg.name(slot) == TARGET_BACKGROUND && got == want,
        format!(
            "15 categories, `{replaced}` replaced, {} annotations match the oracle",
            out.annotation_count()
        ),
        format!("registry {:?}, counts {got:?} vs {want:?}", reg.names()),
    )
}

fn voc_round_trip() -> Outcome {
    let registry = CategoryRegistry::voc_cucumber();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..100 {
        let (w, h) = (rng.gen_range(16..800usize), rng.gen_range(16..800usize));
        let anns: Vec<Annotation> = (0..rng.gen_range(0..6))
            .map(|_| {
                let x0 = rng.gen_range(0..w - 2) as f64;
                let y0 = rng.gen_range(0..h - 2) as f64;
                let x1 = rng.gen_range(x0 as usize + 2..=w) as f64;
                let y1 = rng.gen_range(y0 as usize + 2..=h) as f64;
                Annotation {
                    ignored: rng.gen_bool(0.2),
                    ..Annotation::new(
                        CategoryId(rng.gen_range(0..registry.len())),
                        BoundingBox::new(x0, y0, x1, y1).unwrap(),
                    )
                }
            })
            .collect();
        let name = format!("{i:06}.jpg");
        let xml = write_voc_annotation(Some(&name), (w, h), &anns, &registry).map_err(|e| e.to_string())?;
        let parsed = parse_voc_annotation(&xml, &registry).map_err(|e| e.to_string())?;
        let again = write_voc_annotation(
            parsed.filename.as_deref(),
            (parsed.width, parsed.height),
            &parsed.annotations,
            &registry,
        )
        .map_err(|e| e.to_string())?;
        let reparsed = parse_voc_annotation(&again, &registry).map_err(|e| e.to_string())?;
        if parsed != reparsed || again != xml || parsed.annotations != anns {
            return Err(format!("file {i} does not round-trip"));
        }
    }
    Ok("100 generated files, parse/write/parse identical, writes byte-stable".into())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let (train, test) = desk_corpus(200, 60, 0).map_err(|e| e.to_string())?;
    let split =
        make_split(train.categories(), &SplitMode::Novel(vec![DESK_NOVEL.into()]), 0).map_err(|e| e.to_string())?;
    let run = || {
        run_pipeline(
            "FS-FRW",
            &train,
            &test,
            &split,
            &DetectorConfig::default(),
            &TrainerConfig::default(),
            &EvalConfig::default(),
            0,
        )
        .map_err(|e| e.to_string())
    };
    let first = run()?;
    let elapsed = start.elapsed();
    let second = run()?;
    let ap = first.novel_map();
    let same = first.report.to_text() == second.report.to_text() && first.report.to_csv() == second.report.to_csv();
    check(
        ap >= 0.5 && elapsed < Duration::from_secs(15 * 60) && same,
        format!("novel AP@0.5 {ap:.3} in {elapsed:.1?} (2000 + 400 iterations, k = 10); rerun report identical"),
        format!("novel AP@0.5 {ap:.3}, runtime {elapsed:.1?}, rerun identical: {same}"),
    )
}

fn resume_equivalence() -> Outcome {
    let spec = SyntheticSpec {
        width: 32,
        height: 32,
        object_size: [8, 14],
        ..SyntheticSpec::simple(shape_palette(&["a", "b", "c"]), 40)
    };
    let ds = generate_synthetic_dataset(&spec, 4).unwrap();
    let split = make_split(ds.categories(), &SplitMode::Novel(vec!["c".into()]), 0).unwrap();
    let det = DetectorConfig {
        input_size: 32,
        widths: vec![4, 8],
        meta_channels: 8,
        ..DetectorConfig::default()
    };
    let cfg = TrainerConfig {
        base_iterations: 12,
        finetune_iterations: 6,
        k: 2,
        batch_size: 2,
        ..TrainerConfig::default()
    };
    let err = |e: fewshot::trainer::TrainError| e.to_string();
    let none = TrainOptions::default();
    let full = train_base(&ds, &split, &det, &cfg, 8, &none).map_err(err)?;
    let part = train_base(
        &ds,
        &split,
        &det,
        &cfg,
        8,
        &TrainOptions {
            stop_after: Some(5),
            ..Default::default()
        },
    )
    .map_err(err)?;
    let reload = Checkpoint::from_bytes(&part.checkpoint.to_bytes()).map_err(err)?;
    let resumed = train_base(
        &ds,
        &split,
        &det,
        &cfg,
        8,
        &TrainOptions {
            resume: Some(reload),
            ..Default::default()
        },
    )
    .map_err(err)?;
    let base_ok = resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes();

    let ft_full = finetune(&full.checkpoint, &ds, &split, &det, &cfg, 8, &none).map_err(err)?;
    let ft_part = finetune(
        &full.checkpoint,
        &ds,
        &split,
        &det,
        &cfg,
        8,
        &TrainOptions {
            stop_after: Some(2),
            ..Default::default()
        },
    )
    .map_err(err)?;
    let ft_resumed = finetune(
        &full.checkpoint,
        &ds,
        &split,
        &det,
        &cfg,
        8,
        &TrainOptions {
            resume: Some(ft_part.outcome.checkpoint),
            ..Default::default()
        },
    )
    .map_err(err)?;
    let ft_ok = ft_resumed.outcome.checkpoint.to_bytes() == ft_full.outcome.checkpoint.to_bytes();
    check(
        base_ok && ft_ok,
        "base (stop 5/12) and finetune (stop 2/6) resumed runs bitwise equal to uninterrupted runs".into(),
        format!("base equal: {base_ok}, finetune equal: {ft_ok}"),
    )
}

fn table_iv_emission() -> Outcome {
    let mut spec = ExperimentSpec::shift_default();
    if let DataSource::Shift(s) = &mut spec.source {
        s.source_images = 40;
        s.target_images = 16;
        s.test_images = 12;
        s.background_images = 6;
    }
    spec.trainer = TrainerConfig {
        base_iterations: 20,
        finetune_iterations: 4,
        k: 3,
        ..TrainerConfig::default()
    };
    let result = run_comparison(&spec).map_err(|e| e.to_string())?;
    let labels: Vec<&str> = result.rows.iter().map(|(l, _)| l.as_str()).collect();
    let table = result.table();
    let observation = result.observation();
    check(
        labels == ["FS-FRW", "+BR", "+ATB", "+IA", "+CA"]
            && table.lines().count() == 7
            && observation.contains("+ATB vs FS-FRW"),
        format!("5 rows {labels:?}; {}", observation.lines().last().unwrap_or("")),
        format!("rows {labels:?}\n{table}{observation}"),
    )
}

fn main() {
    // Single-threaded, as in deterministic mode.
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().unwrap();
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("reweight identity", reweight_identity),
        ("mAP oracle equivalence", map_oracle),
        ("IoU hand cases", iou_cases),
        ("augmentation bit-exactness", augmentation_exactness),
        ("exactly-k invariant", exactly_k),
        ("target-background bookkeeping", atb_bookkeeping),
        ("VOC round-trip", voc_round_trip),
        ("end-to-end desk-scale learning", end_to_end),
        ("checkpoint resume equivalence", resume_equivalence),
        ("strategy table emission", table_iv_emission),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
