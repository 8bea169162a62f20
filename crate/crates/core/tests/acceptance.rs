//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Tolerances are pinned next to each check.

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use image::RgbaImage;
use ppg_core::composer::{compose_base, compose_poster, contrast_ratio, region_mean, TEXT_INSET};
use ppg_core::diffusion::{DiffusionSchedule, ScheduleKind};
use ppg_core::embed::EmbeddingBundle;
use ppg_core::layout::{dequantize_tokens, quantize_layout, Category, Element, Layout, TokenGrid, E_MAX, N_ATTRS};
use ppg_core::metrics::{fd_geo, frechet_distance, max_iou, FEATURE_DIM};
use ppg_core::pipeline::{plan_grids, train_planner, Manifest, Planner, Profile, RunConfig};
use ppg_core::plannet::{corrupt_batch, LayoutConstraint, LayoutDecoder, PlannerSchedules, SamplerOptions};
use ppg_core::render::{assemble_condition, rasterize_masks, FusionConfig, RenderFrontEnd};
use ppg_core::synth::{check_rules, generate, SyntheticGrammar, SynthRecord};
use ppg_nn::graph::Targets;
use ppg_nn::layers::{AdaLn, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention, TimestepEmbedder};
use ppg_nn::{gradient_check, GradCheckOptions, GradCheckReport, Graph, ParameterStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const POSTERIOR_TOL: f64 = 1e-10;
const COLUMN_SUM_TOL: f64 = 1e-12;
const CRIT1_SECONDS: f64 = 5.0;
const ABSORB_DRAWS: usize = 100_000;
const MASK_MASS_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const CRIT3_SECONDS: f64 = 120.0;
const TRAIN_RECORDS: usize = 512;
const TRAIN_STEPS: usize = 2000;
const CE_RATIO: f64 = 0.5;
const VALID_SAMPLES: usize = 200;
const VALID_FRACTION: f64 = 0.70;
const CRIT4_SECONDS: f64 = 600.0;
const CONSTRAINT_SEEDS: u64 = 100;
const BRUTE_TOL: f64 = 1e-12;
const FD_SELF_TOL: f64 = 1e-6;
const FD_SHIFT_REL_TOL: f64 = 0.05;
const FD_SHIFT_N: usize = 5000;
const FD_SHIFT_DELTA: f64 = 2.0;
const MIN_INSET_PX: i64 = 2;
const MIN_CONTRAST: f64 = 4.5;
const E2E_RECORDS: usize = 256;
const E2E_SECONDS: f64 = 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    let mut compared = 0;
    let mut mismatched_errors = 0;
    for k in [2, 3, 5] {
        for tm in [4, 10] {
            let s = DiffusionSchedule::new(tm, k, ScheduleKind::LinearMask).unwrap();
            for t in 1..=tm {
                for sum in s.cumulative_matrix(t).unwrap().column_sums() {
                    worst_sum = worst_sum.max((sum - 1.0).abs());
                }
                for z_t in 0..=k {
                    for z0 in 0..=k {
                        match (s.posterior(z_t, z0, t), s.posterior_oracle(z_t, z0, t)) {
                            (Ok(a), Ok(b)) => {
                                compared += 1;
                                for (x, y) in a.iter().zip(&b) {
                                    worst = worst.max((x - y).abs());
                                }
                            }
                            (Err(_), Err(_)) => {}
                            _ => mismatched_errors += 1,
                        }
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst <= POSTERIOR_TOL && worst_sum <= COLUMN_SUM_TOL && mismatched_errors == 0 && secs < CRIT1_SECONDS,
        format!(
            "{compared} posteriors, max |fast - oracle| {worst:.2e} (tol {POSTERIOR_TOL:e}), max |column sum - 1| {worst_sum:.2e} \
             (tol {COLUMN_SUM_TOL:e}), {mismatched_errors} support disagreements, {secs:.2}s (limit {CRIT1_SECONDS}s)"
        ),
    )
}

fn criterion_2() -> Outcome {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let sched = PlannerSchedules::new(cfg.decoder.t_p, &cfg.decoder.vocab, ScheduleKind::LinearMask).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut masked = 0;
    for i in 0..ABSORB_DRAWS {
        let s = &sched.attrs[i % N_ATTRS];
        if s.forward_sample(i % s.k, s.t_max, &mut rng).unwrap() == s.mask() {
            masked += 1;
        }
    }
    let mut worst: f64 = 0.0;
    for (tm, k) in [(cfg.decoder.t_p, 64), (cfg.decoder.t_p, 4), (100, 64), (4, 2), (10, 5)] {
        let s = DiffusionSchedule::new(tm, k, ScheduleKind::LinearMask).unwrap();
        for t in 0..=tm {
            let (_, _, g) = s.cum_coeffs(t).unwrap();
            worst = worst.max((g - t as f64 / tm as f64).abs());
        }
    }
    outcome(
        masked == ABSORB_DRAWS && worst <= MASK_MASS_TOL,
        format!("{masked}/{ABSORB_DRAWS} draws at t = T are MASK; max |gamma_bar_t - t/T| {worst:.2e} (tol {MASK_MASS_TOL:e})"),
    )
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> ppg_nn::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.shape(y), &mut rng);
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    g.sum(p)
}

fn nn_err(e: ppg_core::Error) -> ppg_nn::NnError {
    match e {
        ppg_core::Error::Nn(n) => n,
        other => panic!("{other}"),
    }
}

fn perturb(store: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();
    let opts = GradCheckOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // elementwise, normalization and softmax ops
    let (a, b, r) = (rand_tensor(&[3, 5], &mut rng), rand_tensor(&[3, 5], &mut rng), rand_tensor(&[5], &mut rng));
    let rep = gradient_check(
        &[a, b, r],
        &ParameterStore::new(),
        |g, _, x| {
            let s = g.add(x[0], x[1])?;
            let m = g.mul(s, x[1])?;
            let ar = g.add_row(m, x[2])?;
            let mr = g.mul_row(ar, x[2])?;
            let sc = g.scale(mr, -1.7)?;
            let sh = g.add_scalar(sc, 0.3)?;
            let ge = g.gelu(sh)?;
            let si = g.silu(ge)?;
            let ln = g.layer_norm(si, 1e-5)?;
            let sm = g.softmax(ln)?;
            project(g, sm, 4)
        },
        opts,
    )
    .unwrap();
    results.push(("elementwise/layer_norm/softmax", rep));

    // dropout with a fixed mask
    let x = rand_tensor(&[6, 6], &mut rng);
    let rep = gradient_check(
        &[x],
        &ParameterStore::new(),
        |g, _, x| {
            let y = g.dropout(x[0], 0.3, &mut ChaCha8Rng::seed_from_u64(99))?;
            project(g, y, 8)
        },
        GradCheckOptions { training: true, ..opts },
    )
    .unwrap();
    results.push(("dropout", rep));

    // gathers, concatenation and row repetition
    let (table, other) = (rand_tensor(&[5, 4], &mut rng), rand_tensor(&[2, 4], &mut rng));
    let rep = gradient_check(
        &[table, other],
        &ParameterStore::new(),
        |g, _, x| {
            let e = g.gather_rows(x[0], &[4, 0, 4, 2])?;
            let c = g.concat_rows(&[e, x[1]])?;
            let r = g.repeat_rows(x[1], &[3, 1])?;
            let c = g.concat_rows(&[c, r])?;
            let flat = g.gather(c, vec![0, 5, 5, 39, 12, 7], &[2, 3])?;
            let a = project(g, c, 12)?;
            let b = project(g, flat, 13)?;
            g.add(a, b)
        },
        opts,
    )
    .unwrap();
    results.push(("gather/concat/repeat", rep));

    // hard and soft cross-entropy
    let logits = rand_tensor(&[4, 6], &mut rng);
    let mut soft: Vec<f64> = (0..24).map(|_| rng.gen_range(0.0..1.0)).collect();
    for row in soft.chunks_mut(6) {
        let s: f64 = row[..5].iter().sum();
        row[..5].iter_mut().for_each(|v| *v /= s);
        row[5] = 0.0;
    }
    let rep = gradient_check(
        &[logits],
        &ParameterStore::new(),
        |g, _, x| {
            let a = g.cross_entropy(x[0], Targets::Hard(vec![0, 4, 2, 2]), vec![1.0, 0.5, 0.01, 2.0], 5)?;
            let b = g.cross_entropy(x[0], Targets::Soft(soft.clone()), vec![0.3, 1.0, 1.0, 0.7], 5)?;
            g.add(a, b)
        },
        opts,
    )
    .unwrap();
    results.push(("cross_entropy", rep));

    // layers
    let mut store = ParameterStore::<f64>::new();
    let lin = Linear::new(&mut store, "lin", 10, 10, true, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 10, &mut rng).unwrap();
    let temb = TimestepEmbedder::new(&mut store, "t", 8, 10, &mut rng).unwrap();
    let ada = AdaLn::new(&mut store, "ada", 10, 10, &mut rng).unwrap();
    let ff = FeedForward::new(&mut store, "ff", 10, 20, &mut rng).unwrap();
    let sa = MultiHeadAttention::new(&mut store, "sa", 10, 10, 2, &mut rng).unwrap();
    let ca = MultiHeadAttention::new(&mut store, "ca", 10, 6, 5, &mut rng).unwrap();
    perturb(&mut store, 31, 0.3);
    let (x, ctx) = (rand_tensor(&[7, 10], &mut rng), rand_tensor(&[5, 6], &mut rng));
    let rep = gradient_check(
        &[x, ctx],
        &store,
        |g, s, x| {
            let h = lin.forward(g, s, x[0])?;
            let h = ln.forward(g, s, h)?;
            let c = temb.forward(g, s, &[3, 17])?;
            let h = ada.forward(g, s, h, c, &[3, 4])?;
            let a = sa.forward(g, s, h, h, &[(3, 3), (4, 4)])?;
            let h = g.add(h, a)?;
            let a = ca.forward(g, s, h, x[1], &[(3, 2), (4, 3)])?;
            let h = g.add(h, a)?;
            let f = ff.forward(g, s, h)?;
            let y = g.add(h, f)?;
            project(g, y, 18)
        },
        opts,
    )
    .unwrap();
    results.push(("linear/layer_norm/timestep/adaln/attention/feed_forward", rep));

    let mut store = ParameterStore::<f64>::new();
    let c1 = Conv2d::new(&mut store, "c1", 2, 3, 3, 2, 1, false, &mut rng).unwrap();
    let c2 = Conv2d::new(&mut store, "c2", 3, 2, 3, 1, 1, false, &mut rng).unwrap();
    let x = rand_tensor(&[2, 2, 7, 6], &mut rng);
    let rep = gradient_check(
        &[x],
        &store,
        |g, s, x| {
            let y = c1.forward(g, s, x[0])?;
            let y = g.silu(y)?;
            let y = c2.forward(g, s, y)?;
            project(g, y, 10)
        },
        opts,
    )
    .unwrap();
    results.push(("conv2d", rep));

    // the full desk decoder, both output parameterizations
    let records = generate(&SyntheticGrammar::default(), 2, 3).unwrap();
    for (label, cfg) in [
        ("desk decoder (x0 head)", RunConfig::for_profile(Profile::Desk).decoder),
        (
            "desk decoder (direct head)",
            ppg_core::plannet::DecoderConfig {
                parameterization: ppg_core::plannet::Parameterization::Direct,
                ..RunConfig::for_profile(Profile::Desk).decoder
            },
        ),
    ] {
        let mut store = ParameterStore::<f64>::new();
        let dec = LayoutDecoder::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        perturb(&mut store, 9, 0.05);
        let schedules = PlannerSchedules::new(cfg.t_p, &cfg.vocab, ScheduleKind::LinearMask).unwrap();
        let grids: Vec<TokenGrid> = records.iter().map(|r| quantize_layout(&r.layout, &cfg.vocab).unwrap()).collect();
        let clean: Vec<&TokenGrid> = grids.iter().collect();
        let batch = corrupt_batch(&clean, &schedules, 0.0, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let conds: Vec<&EmbeddingBundle> = records.iter().map(|r| &r.embeddings).collect();
        let rep = gradient_check(
            &[],
            &store,
            |g, s, _| {
                let out = dec.loss(g, s, &batch, &conds, &schedules, &mut ChaCha8Rng::seed_from_u64(0)).map_err(nn_err)?;
                Ok(out.loss)
            },
            GradCheckOptions { full_check_limit: 4000, subsample_fraction: 0.01, ..opts },
        )
        .unwrap();
        results.push((label, rep));
    }

    // the layout fusion branch
    let fcfg = FusionConfig { channels: 2, width: 16, height: 16, patch: 8, depth: 1, heads: 2, d_model: 8, ..FusionConfig::desk() };
    let mut store = ParameterStore::<f64>::new();
    let fusion = ppg_core::render::LayoutFusion::new(fcfg, &mut store, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    perturb(&mut store, 7, 0.1);
    let l = Layout::new(
        vec![Element::new(Category::Text, 0.3, 0.6, 0.4, 0.3), Element::new(Category::Underlay, 0.6, 0.4, 0.5, 0.5)],
        1.0,
    );
    let stack = rasterize_masks(&l, 16, 16);
    let rep = gradient_check(
        &[],
        &store,
        |g, s, _| {
            let z = fusion.forward(g, s, &[&stack]).map_err(nn_err)?;
            project(g, z, 19)
        },
        GradCheckOptions { full_check_limit: 100_000, ..opts },
    )
    .unwrap();
    results.push(("layout fusion", rep));

    let secs = t0.elapsed().as_secs_f64();
    let (name, rep) = results.iter().max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error)).unwrap();
    let worst = rep.max_rel_error;
    let parts: Vec<String> = results.iter().map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error)).collect();
    outcome(
        worst <= GRAD_TOL && secs < CRIT3_SECONDS,
        format!(
            "max rel err {worst:.2e} (tol {GRAD_TOL:e}) in {name} at {:?}, analytic {:.2e} vs numeric {:.2e}; \
             {secs:.1}s (limit {CRIT3_SECONDS}s); {}",
            rep.worst,
            rep.worst_analytic,
            rep.worst_numeric,
            parts.join(", ")
        ),
    )
}

/// Shared by criteria 4 and 5.
struct Trained {
    cfg: RunConfig,
    planner: Planner,
    records: Vec<SynthRecord>,
}

fn train_desk() -> (Trained, f64, f64, f64) {
    let cfg = RunConfig::for_profile(Profile::Desk);
    let records = generate(&cfg.synth.grammar, TRAIN_RECORDS, 7).unwrap();
    let data: Vec<(TokenGrid, EmbeddingBundle)> =
        records.iter().map(|r| (quantize_layout(&r.layout, &cfg.decoder.vocab).unwrap(), r.embeddings.clone())).collect();
    let mut train = cfg.train.clone();
    train.steps = TRAIN_STEPS;
    let t0 = Instant::now();
    // corrupted-token CE and its uniform baseline over the final 100 steps
    let (mut ce, mut uni, mut n) = (0.0, 0.0, 0usize);
    let planner = train_planner(&cfg.decoder, cfg.schedule, &train, &data, 11, |step, st| {
        if step + 100 >= TRAIN_STEPS {
            ce += st.corrupt_ce * st.n_corrupt as f64;
            uni += st.uniform_ce * st.n_corrupt as f64;
            n += st.n_corrupt;
        }
    })
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    (Trained { cfg, planner, records }, ce / n as f64, uni / n as f64, secs)
}

fn valid_fraction(t: &Trained, temperature: f64) -> (usize, [usize; 5]) {
    let conds: Vec<&EmbeddingBundle> = t.records.iter().take(VALID_SAMPLES).map(|r| &r.embeddings).collect();
    let seeds: Vec<u64> = (0..VALID_SAMPLES as u64).map(|i| 1000 + i).collect();
    let grids =
        plan_grids(&t.planner, &conds, &seeds, &LayoutConstraint::default(), &SamplerOptions { temperature }).unwrap();
    let mut ok = 0;
    let mut parts = [0usize; 5];
    for (g, r) in grids.iter().zip(&t.records) {
        let l = dequantize_tokens(g, &t.cfg.decoder.vocab, r.layout.canvas_aspect).unwrap();
        let rep = check_rules(&t.cfg.synth.grammar, &l);
        ok += rep.all() as usize;
        for (i, b) in [
            rep.single_product,
            rep.product_in_band,
            rep.has_text,
            rep.underlays_contain_texts,
            rep.text_product_overlap_ok,
        ]
        .iter()
        .enumerate()
        {
            parts[i] += *b as usize;
        }
    }
    (ok, parts)
}

fn criterion_4(t: &Trained, ce: f64, uni: f64, train_secs: f64) -> Outcome {
    let t0 = Instant::now();
    let temperature = t.cfg.sampler.temperature;
    let (ok, parts) = valid_fraction(t, temperature);
    let secs = train_secs + t0.elapsed().as_secs_f64();
    let frac = ok as f64 / VALID_SAMPLES as f64;
    outcome(
        ce <= CE_RATIO * uni && frac >= VALID_FRACTION && secs < CRIT4_SECONDS,
        format!(
            "{TRAIN_STEPS} steps on {TRAIN_RECORDS} records: corrupted-token CE {ce:.3} vs {CE_RATIO} x ln K = {:.3}; \
             {ok}/{VALID_SAMPLES} valid at temperature {temperature} (need {VALID_FRACTION}); rule passes \
             [single product, in band, has text, underlay contains, overlap] {parts:?}; {secs:.0}s (limit {CRIT4_SECONDS}s)",
            CE_RATIO * uni
        ),
    )
}

fn criterion_5(t: &Trained) -> Outcome {
    let v = t.cfg.decoder.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // hand-written files plus random ones over arbitrary slots and attributes
    let mut constraints = Vec::new();
    for json in [
        r#"{"fix": [{"slot": 0, "category": "product", "box": [0.5, 0.4, 0.45, 0.3]}]}"#,
        r#"{"fix": [{"slot": 2, "category": "text", "box": [null, 0.85, 0.6, null]}, {"slot": 3, "category": "underlay"}]}"#,
        r#"{"fix": [{"slot": 15, "category": "pad"}, {"slot": 7, "box": [0.1, 0.1, 0.1, 0.1]}]}"#,
    ] {
        let file = serde_json::from_str(json).unwrap();
        constraints.push(LayoutConstraint::from_file(&file, &v).unwrap());
    }
    for _ in 0..3 {
        let mut c = LayoutConstraint::default();
        for _ in 0..rng.gen_range(1..=12) {
            let slot = rng.gen_range(0..E_MAX);
            let attr = rng.gen_range(0..N_ATTRS);
            c.set(slot, attr, rng.gen_range(0..v.states(attr)) as u16, &v).unwrap();
        }
        constraints.push(c);
    }
    let mut total = 0;
    let mut satisfied = 0;
    for (ci, c) in constraints.iter().enumerate() {
        let conds: Vec<&EmbeddingBundle> =
            (0..CONSTRAINT_SEEDS as usize).map(|i| &t.records[i % t.records.len()].embeddings).collect();
        let seeds: Vec<u64> = (0..CONSTRAINT_SEEDS).map(|s| s * 7919 + ci as u64).collect();
        let opts = SamplerOptions { temperature: t.cfg.sampler.temperature };
        for g in plan_grids(&t.planner, &conds, &seeds, c, &opts).unwrap() {
            total += 1;
            satisfied += c.satisfied_by(&g) as usize;
        }
    }
    outcome(
        satisfied == total,
        format!("{satisfied}/{total} sampled grids carry every constrained token ({} constraint sets x {CONSTRAINT_SEEDS} seeds)", constraints.len()),
    )
}

fn criterion_6() -> Outcome {
    let corpus = generate(&SyntheticGrammar::default(), 1000, 13).unwrap();
    let self_ok = corpus.iter().filter(|r| max_iou(&r.layout, &r.layout) == 1.0).count();

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let instances = 2000;
    for _ in 0..instances {
        let a = common::random_layout(&mut rng, 6);
        let b = common::random_layout(&mut rng, 6);
        worst = worst.max((max_iou(&a, &b) - common::brute_max_iou(&a, &b)).abs());
    }

    let layouts: Vec<Layout> = corpus.iter().map(|r| r.layout.clone()).collect();
    let fd_self = fd_geo(&layouts, &layouts).unwrap();

    let mut draw = |shift: f64| -> Vec<Vec<f64>> {
        (0..FD_SHIFT_N)
            .map(|_| {
                let mut v: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                v[0] += shift;
                v
            })
            .collect()
    };
    let (pa, pb) = (draw(0.0), draw(FD_SHIFT_DELTA));
    let fd_shift = frechet_distance(&pa, &pb).unwrap();
    let expect = FD_SHIFT_DELTA * FD_SHIFT_DELTA;
    let rel = (fd_shift - expect).abs() / expect;
    outcome(
        self_ok == corpus.len() && worst <= BRUTE_TOL && fd_self <= FD_SELF_TOL && rel <= FD_SHIFT_REL_TOL,
        format!(
            "self max IoU = 1 on {self_ok}/{}; max |hungarian - brute force| {worst:.1e} over {instances} instances (tol {BRUTE_TOL:e}); \
             fd_geo(A, A) {fd_self:.1e} (tol {FD_SELF_TOL:e}); mean shift fd {fd_shift:.4} vs {expect} (rel err {rel:.4}, tol {FD_SHIFT_REL_TOL})",
            corpus.len()
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (w_px, h_px) = (128usize, 192usize);
    let mut exact = 0;
    let n = 1000;
    for i in 0..n {
        let cat = if i % 2 == 0 { Category::Text } else { Category::Underlay };
        let w = rng.gen_range(0.0..1.0);
        let h = rng.gen_range(0.0..1.0);
        let x = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
        let y = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
        let s = rasterize_masks(&Layout::new(vec![Element::new(cat, x, y, w, h)], 1.5), w_px, h_px);
        let expect = ((w * w_px as f64).round() * (h * h_px as f64).round()) as usize;
        if s.count(i % 2) == expect && s.count(1 - i % 2) == 0 {
            exact += 1;
        }
    }
    let patches = FusionConfig::paper().patches();

    let cfg = FusionConfig::desk();
    let mut store = ParameterStore::<f32>::new();
    let fe = RenderFrontEnd::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let rec = generate(&SyntheticGrammar::default(), 1, 9).unwrap().remove(0);
    let z_t = Tensor::from_fn(&cfg.latent_shape(), |_| rng.gen_range(-3.0f32..3.0));
    let c = fe.condition(&store, &rec.layout, &rec.product, &z_t).unwrap();
    let zero = c.z_l.data().iter().chain(c.z_v.data()).all(|v| *v == 0.0);
    let zeros = Tensor::<f32>::zeros(&cfg.latent_shape());
    let identity = assemble_condition(&z_t, &zeros, &zeros).unwrap() == z_t && c.z_prime == z_t;
    outcome(
        exact == n && patches == 384 && zero && identity,
        format!(
            "{exact}/{n} single-box rasters equal rounded areas exactly; paper patch count {patches}; \
             Z_L = Z_V = 0 at init: {zero}; assemble(Z_t, 0, 0) = Z_t: {identity}"
        ),
    )
}

fn compose_run(records: &[SynthRecord], dir: &Path) -> Vec<Vec<u8>> {
    std::fs::create_dir_all(dir).unwrap();
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = compose_poster(&r.product, &r.texts, &r.layout, r.canvas, i as u64).unwrap();
            let path = dir.join(format!("{}.png", r.id));
            p.save(&path).unwrap();
            std::fs::read(&path).unwrap()
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let records = generate(&SyntheticGrammar::default(), 50, 3).unwrap();
    let (mut texts, mut inset_ok, mut contrast_ok) = (0, 0, 0);
    let mut min_contrast = f64::INFINITY;
    for (i, r) in records.iter().enumerate() {
        let poster = compose_poster(&r.product, &r.texts, &r.layout, r.canvas, i as u64).unwrap();
        let base: RgbaImage = compose_base(&r.product, &r.layout, r.canvas, i as u64).unwrap();
        for e in &poster.report.elements {
            let Some(t) = &e.text else { continue };
            texts += 1;
            let b = e.box_px;
            if let Some(g) = t.glyph_bounds {
                if g[0] >= b[0] + MIN_INSET_PX && g[1] >= b[1] + MIN_INSET_PX && g[2] <= b[2] - MIN_INSET_PX && g[3] <= b[3] - MIN_INSET_PX {
                    inset_ok += 1;
                }
            }
            let inner = [b[0] + TEXT_INSET, b[1] + TEXT_INSET, b[2] - TEXT_INSET, b[3] - TEXT_INSET];
            let measured = region_mean(&base, inner).unwrap();
            let c = contrast_ratio(t.color, measured);
            min_contrast = min_contrast.min(c);
            contrast_ok += (c >= MIN_CONTRAST) as usize;
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let a = compose_run(&records, &tmp.path().join("a"));
    let b = compose_run(&records, &tmp.path().join("b"));
    let identical = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    outcome(
        inset_ok == texts && contrast_ok == texts && identical == records.len(),
        format!(
            "{} posters, {texts} texts: {inset_ok} inside box with >= {MIN_INSET_PX}px inset, {contrast_ok} with contrast >= {MIN_CONTRAST} \
             (min {min_contrast:.2}); {identical}/{} PNGs byte-identical across two runs",
            records.len(),
            records.len()
        ),
    )
}

fn run_ppg(args: &[&str]) -> (bool, f64, String) {
    let t0 = Instant::now();
    let o = Command::new(env!("CARGO_BIN_EXE_ppg")).args(args).env("RUST_LOG", "warn").output().expect("ppg runs");
    (o.status.success(), t0.elapsed().as_secs_f64(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let n = E2E_RECORDS.to_string();
    let (ok_a, secs, err_a) = run_ppg(&["all", "--profile", "desk", "--n", &n, "--out", a.to_str().unwrap()]);
    if !ok_a {
        return outcome(false, format!("first run failed: {err_a}"));
    }
    let manifest = a.join("manifest.json");
    let (ok_b, secs_b, err_b) = run_ppg(&["all", "--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    if !ok_b {
        return outcome(false, format!("rerun from manifest failed: {err_b}"));
    }
    let ha: BTreeMap<String, String> = Manifest::load(&manifest).unwrap().layouts;
    let hb = Manifest::load(&b.join("manifest.json")).unwrap().layouts;
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    outcome(
        ha == hb && ha.len() == E2E_RECORDS && secs < E2E_SECONDS,
        format!(
            "`ppg all --profile desk` on {E2E_RECORDS} records took {secs:.1}s (limit {E2E_SECONDS}s, {cores} core(s) available); \
             rerun from manifest {secs_b:.1}s; {} layout hashes, identical on rerun: {}",
            ha.len(),
            ha == hb
        ),
    )
}

fn report(id: usize, name: &str, o: &Outcome, failures: &mut usize) {
    println!("{} [{id}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    if !o.pass {
        *failures += 1;
    }
}

fn main() {
    // `cargo test -- --list` and filters: nothing to enumerate here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;
    report(1, "diffusion kernel", &criterion_1(), &mut failures);
    report(2, "absorption", &criterion_2(), &mut failures);
    report(3, "gradient fidelity", &criterion_3(), &mut failures);
    let (trained, ce, uni, train_secs) = train_desk();
    report(4, "learning signal", &criterion_4(&trained, ce, uni, train_secs), &mut failures);
    let (ok_t1, _) = valid_fraction(&trained, 1.0);
    println!("INFO [4] valid layouts at sampler temperature 1.0: {ok_t1}/{VALID_SAMPLES}");
    report(5, "constraint clamping", &criterion_5(&trained), &mut failures);
    report(6, "metrics", &criterion_6(), &mut failures);
    report(7, "geometry branch", &criterion_7(), &mut failures);
    report(8, "composer", &criterion_8(), &mut failures);
    report(9, "end to end", &criterion_9(), &mut failures);
    println!("acceptance: {} passed, {failures} failed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
