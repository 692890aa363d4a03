//! Property checks shared by the property tests and the acceptance report.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rebq::backbone::{InjectionMode, LayerPrefix, MultimodalBackbone, PromptInjection, UNIFIED_LAYOUT};
use rebq::bench::{apply_missing_mask, Label, MissingCase, Sample};
use rebq::eval::{average_forgetting, average_performance, EvalMatrix, RunConfig};
use rebq::pipeline::{batch_loss, build_variant, ModelConfig, PreparedSample, RebQModel};
use rebq::prompt::{PoolRole, PromptGeometry, PromptPool, PromptWeights};
use rebq::tensor::{Tape, Tensor, COSINE_EPS};

pub const SCALE_TOL: f64 = 1e-13;
pub const LINEARITY_TOL: f64 = 1e-10;
pub const METRIC_TOL: f64 = 1e-12;

pub fn random_pool(r: &mut impl Rng) -> PromptPool {
    let d = r.random_range(1..=8);
    let k = r.random_range(1..=8);
    let mode = if r.random_bool(0.5) { InjectionMode::Attention } else { InjectionMode::Input };
    let geometry = PromptGeometry {
        embed_dim: d,
        prompt_len: r.random_range(1..=3),
        num_layers: r.random_range(1..=2),
        mode,
    };
    let mut pool = PromptPool::new(PoolRole::Text, geometry, k, r).unwrap();
    // wider than the default init so that near-parallel and sign-flipped
    // pairs show up
    for t in [&mut pool.attention, &mut pool.keys] {
        t.data_mut().iter_mut().for_each(|x| *x = r.random_range(-2.0..2.0));
    }
    pool
}

pub fn random_vec(r: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-bound..bound)).collect()
}

/// Largest shift the cosine epsilon can cause in any weight when the query
/// is scaled down by `c`.
fn eps_slack(pool: &PromptPool, q: &[f64], c: f64) -> f64 {
    let d = pool.geometry.embed_dim;
    (0..pool.size())
        .map(|k| {
            let aq: f64 = pool.attention.row(k).iter().zip(q).map(|(a, x)| (a * x).powi(2)).sum::<f64>().sqrt();
            let kn: f64 = pool.keys.data()[k * d..(k + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt();
            let den = c * aq * kn;
            if den == 0.0 { 0.0 } else { 2.0 * COSINE_EPS / den }
        })
        .fold(0.0, f64::max)
}

/// Weights in [-1, 1], positive-scale invariance, aggregation linearity and
/// exact one-hot selection for one (query, pool) pair.
pub fn selection_pair(pool: &PromptPool, q: &[f64], r: &mut impl Rng) -> Result<(), String> {
    let w = pool.compute_weights(q).map_err(|e| e.to_string())?;
    if let Some(x) = w.0.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
        return Err(format!("weight {x} outside [-1, 1]"));
    }
    let c = 10f64.powf(r.random_range(-3.0..3.0));
    let scaled: Vec<f64> = q.iter().map(|x| c * x).collect();
    let ws = pool.compute_weights(&scaled).map_err(|e| e.to_string())?;
    let dev = w.0.iter().zip(&ws.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if dev > SCALE_TOL + eps_slack(pool, q, c.min(1.0)) {
        return Err(format!("scaling by {c} moved weights by {dev:e}"));
    }

    let k = pool.size();
    let (w1, w2) = (random_vec(r, k, 1.0), random_vec(r, k, 1.0));
    let (alpha, beta) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
    let mix: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| alpha * a + beta * b).collect();
    let lhs = pool.aggregate(&PromptWeights(mix)).unwrap().data;
    let p1 = pool.aggregate(&PromptWeights(w1)).unwrap().data;
    let p2 = pool.aggregate(&PromptWeights(w2)).unwrap().data;
    let dev = lhs
        .iter()
        .zip(p1.iter().zip(&p2))
        .map(|(l, (a, b))| (l - (alpha * a + beta * b)).abs())
        .fold(0.0, f64::max);
    if dev > LINEARITY_TOL {
        return Err(format!("aggregation not linear: deviation {dev:e}"));
    }

    let j = r.random_range(0..k);
    let mut onehot = vec![0.0; k];
    onehot[j] = 1.0;
    let sel = pool.aggregate(&PromptWeights(onehot)).unwrap().data;
    if sel != pool.components.row(j) {
        return Err(format!("one-hot weights at {j} did not return component {j}"));
    }
    Ok(())
}

pub fn selection_invariants(pairs: usize, seed: u64) -> Result<(), String> {
    let mut r = super::rng(seed);
    for i in 0..pairs {
        let pool = random_pool(&mut r);
        let q = random_vec(&mut r, pool.geometry.embed_dim, 3.0);
        selection_pair(&pool, &q, &mut r).map_err(|e| format!("pair {i}: {e}"))?;
    }
    Ok(())
}

/// Expected `(text_only, image_only)` counts for an integer ratio, in
/// integer arithmetic: `floor((p·n + 50) / 100)` rounds half up.
pub fn expected_counts(n: usize, eta: usize, case: MissingCase) -> (usize, usize) {
    let round = |p2: usize| (p2 * n + 100) / 200; // p2 is twice the percentage
    match case {
        MissingCase::TextMissing => (0, round(2 * eta)),
        MissingCase::ImageMissing => (round(2 * eta), 0),
        MissingCase::BothMissing => {
            let t = round(eta);
            (t, round(eta).min(n - t))
        }
    }
}

fn complete(i: usize) -> Sample {
    Sample {
        id: format!("s{i}"),
        text_tokens: vec![1, 2],
        patches: vec![vec![0.5; 2]; 2],
        label: Label::Single(0),
        has_text: true,
        has_visual: true,
    }
}

pub const ETAS: [usize; 5] = [10, 30, 50, 70, 90];
pub const CASES: [MissingCase; 3] = [MissingCase::TextMissing, MissingCase::ImageMissing, MissingCase::BothMissing];

/// Masks `n` complete samples and compares the resulting composition with
/// [`expected_counts`].
pub fn masking_case(n: usize, eta: usize, case: MissingCase, seed: u64) -> Result<(), String> {
    let samples: Vec<Sample> = (0..n).map(complete).collect();
    let masked = apply_missing_mask(&samples, eta as f64, case, seed).map_err(|e| e.to_string())?;
    let text_only = masked.iter().filter(|s| s.has_text && !s.has_visual).count();
    let image_only = masked.iter().filter(|s| !s.has_text && s.has_visual).count();
    let both = masked.iter().filter(|s| s.is_complete()).count();
    let (et, ei) = expected_counts(n, eta, case);
    if (text_only, image_only, both) != (et, ei, n - et - ei) {
        return Err(format!(
            "n={n} eta={eta} {case:?}: got text-only {text_only}, image-only {image_only}, complete {both}; expected {et}, {ei}, {}",
            n - et - ei
        ));
    }
    if masked.iter().zip(&samples).any(|(m, s)| m.id != s.id) {
        return Err("masking reordered samples".into());
    }
    Ok(())
}

pub fn masking_exactness(ns: usize, seed: u64) -> Result<usize, String> {
    let mut r = super::rng(seed);
    let mut checked = 0;
    for _ in 0..ns {
        let n = r.random_range(1..=500);
        for eta in ETAS {
            for case in CASES {
                masking_case(n, eta, case, r.random())?;
                checked += 1;
            }
        }
    }
    Ok(checked)
}

/// AP straight from the printed formula: mean of the last column.
pub fn brute_ap(a: &[Vec<f64>]) -> f64 {
    let t = a.len();
    (0..t).map(|i| a[i][t - 1]).sum::<f64>() / t as f64
}

/// FG straight from the printed formula, `a[i][j]` being session `i` after
/// training session `j`.
pub fn brute_fg(a: &[Vec<f64>]) -> f64 {
    let t = a.len();
    let mut total = 0.0;
    for i in 0..t - 1 {
        let mut best = f64::NEG_INFINITY;
        for z in i..t - 1 {
            best = best.max(a[i][z] - a[i][t - 1]);
        }
        total += best;
    }
    total / (t - 1) as f64
}

pub fn random_matrix(r: &mut impl Rng, t: usize) -> (EvalMatrix, Vec<Vec<f64>>) {
    let mut full = vec![vec![0.0; t]; t];
    let mut m = EvalMatrix::new(t);
    for (i, row) in full.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate().skip(i) {
            *slot = r.random_range(0.0..=1.0);
            m.set(i, j, *slot).unwrap();
        }
    }
    (m, full)
}

pub fn metric_oracle(matrices: usize, seed: u64) -> Result<(), String> {
    let mut r = super::rng(seed);
    for n in 0..matrices {
        let t = r.random_range(2..=10);
        let (m, full) = random_matrix(&mut r, t);
        let ap = average_performance(&m).map_err(|e| e.to_string())?;
        let fg = average_forgetting(&m).map_err(|e| e.to_string())?;
        let (bap, bfg) = (brute_ap(&full), brute_fg(&full));
        if (ap - bap).abs() > METRIC_TOL || (fg - bfg).abs() > METRIC_TOL {
            return Err(format!("matrix {n}: AP {ap} vs {bap}, FG {fg} vs {bfg}"));
        }
    }
    Ok(())
}

pub fn metric_hand_cases() -> Result<(), String> {
    let ap = average_performance(&EvalMatrix::from_upper(&[vec![0.5, 0.7], vec![0.9]]).unwrap()).unwrap();
    let fg1 = average_forgetting(&EvalMatrix::from_upper(&[vec![0.9, 0.7], vec![0.8]]).unwrap()).unwrap();
    let fg2 = average_forgetting(&EvalMatrix::from_upper(&[vec![0.5, 0.6], vec![0.8]]).unwrap()).unwrap();
    // exact up to the decimal representation of the inputs themselves
    let want = [(ap, (0.7 + 0.9) / 2.0), (fg1, 0.9 - 0.7), (fg2, 0.5 - 0.6)];
    for (got, expected) in want {
        if got != expected {
            return Err(format!("hand case: got {got}, expected {expected}"));
        }
    }
    if (ap - 0.8).abs() > 1e-15 || (fg1 - 0.2).abs() > 1e-15 || (fg2 + 0.1).abs() > 1e-15 {
        return Err(format!("hand cases {ap} {fg1} {fg2} differ from 0.8, 0.2, -0.1"));
    }
    Ok(())
}


/// Backbone bytes unchanged by training, and every trained parameter group
/// (each pool, the missing-type prompts, the head) moved away from its
/// initialization.
pub fn freeze_contract(
    config: &RunConfig,
    backbone: &Arc<MultimodalBackbone>,
    bytes_before: &[u8],
    trained: &RebQModel,
) -> Result<(), String> {
    let after = backbone.to_container(serde_json::Value::Null).to_bytes().map_err(|e| e.to_string())?;
    if after != bytes_before {
        return Err("backbone checkpoint bytes changed".into());
    }
    let model_config = ModelConfig {
        num_classes: trained.config.num_classes,
        multi_label: trained.config.multi_label,
        prompt: config.prompt,
        lambda: config.lambda,
    };
    let fresh = build_variant(config.variant, backbone.clone(), &model_config, config.seeds.model).map_err(|e| e.to_string())?;
    let init: BTreeMap<String, &Tensor> = fresh.named_params().into_iter().collect();
    let mut moved: BTreeMap<String, bool> = BTreeMap::new();
    for (name, t) in trained.named_params() {
        let group = name.split('.').next().unwrap_or_default().to_string();
        let differs = init.get(&name).is_none_or(|f| f.data() != t.data());
        *moved.entry(group).or_default() |= differs;
    }
    match moved.iter().find(|(_, &m)| !m) {
        Some((g, _)) => Err(format!("parameter group {g} did not change")),
        None if moved.contains_key("head") => Ok(()),
        None => Err("model has no head".into()),
    }
}

/// An empty injection and a zero-length attention prefix both reproduce the
/// uninjected forward bit for bit.
pub fn empty_injection_exact(backbone: &MultimodalBackbone, samples: &[Sample]) -> Result<(), String> {
    let d = backbone.config.embed_dim;
    for s in samples {
        let mut tape = Tape::new();
        let plain = backbone.encode(&mut tape, s, &UNIFIED_LAYOUT, None).map_err(|e| e.to_string())?;
        let empty = backbone
            .encode(&mut tape, s, &UNIFIED_LAYOUT, Some(&PromptInjection::default()))
            .map_err(|e| e.to_string())?;
        let key = tape.constant(vec![0, d], Vec::new()).map_err(|e| e.to_string())?;
        let value = tape.constant(vec![0, d], Vec::new()).map_err(|e| e.to_string())?;
        let zero_len = PromptInjection {
            layers: vec![LayerPrefix { key, value }; backbone.config.num_layers],
            appended: None,
        };
        let prefixed = backbone.encode(&mut tape, s, &UNIFIED_LAYOUT, Some(&zero_len)).map_err(|e| e.to_string())?;
        let bits = |v| tape.value(v).iter().map(|x: &f64| x.to_bits()).collect::<Vec<_>>();
        if bits(plain) != bits(empty) {
            return Err(format!("{}: empty injection changed the output", s.id));
        }
        if bits(plain) != bits(prefixed) {
            return Err(format!("{}: zero-length prefix changed the output", s.id));
        }
    }
    Ok(())
}

/// With lambda = 0 the total loss is the classification loss, bit for bit.
pub fn lambda_zero_exact(model: &RebQModel, batch: &[PreparedSample]) -> Result<(), String> {
    if model.config.lambda != 0.0 {
        return Err("model lambda is not zero".into());
    }
    let refs: Vec<&PreparedSample> = batch.iter().collect();
    let mut tape = Tape::new();
    let l = batch_loss(model, &mut tape, &refs, None).map_err(|e| e.to_string())?;
    if l.complete == 0 || tape.scalar(l.reconstruction) == 0.0 {
        return Err("batch has no reconstruction term to suppress".into());
    }
    let (total, cls) = (tape.scalar(l.total), tape.scalar(l.classification));
    if total.to_bits() != cls.to_bits() {
        return Err(format!("total {total:e} differs from classification {cls:e}"));
    }
    Ok(())
}
