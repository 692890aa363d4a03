#![allow(dead_code)]

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rebq::backbone::{BackboneConfig, MultimodalBackbone};
use rebq::bench::{InputShape, Label, Sample, SynthConfig};
use rebq::eval::{run_experiment_with, DataConfig, RunConfig, RunOptions, RunOutcome};
use rebq::pipeline::PromptConfig;
use rebq::tensor::{Gradients, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_backbone_config() -> BackboneConfig {
    BackboneConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 8,
        text_vocab_size: 8,
        max_text_len: 3,
        num_patches: 2,
        patch_dim: 3,
        pretrain_classes: 3,
    }
}

pub fn frozen_tiny_backbone(seed: u64) -> MultimodalBackbone {
    let mut b = MultimodalBackbone::init(tiny_backbone_config(), seed).unwrap();
    b.freeze();
    b
}

pub fn tiny_shape() -> InputShape {
    tiny_backbone_config().input_shape()
}

pub fn complete_sample(id: &str, class: usize) -> Sample {
    Sample {
        id: id.into(),
        text_tokens: vec![1 + class as u32, 4, 2 + class as u32],
        patches: vec![vec![0.3 * class as f64, -0.4, 0.8], vec![-0.1, 0.6 - 0.2 * class as f64, 0.2]],
        label: Label::Single(class),
        has_text: true,
        has_visual: true,
    }
}

/// Gradients whose norm is below this are exactly zero in theory (e.g. key
/// biases under softmax shift invariance); differences there are rounding.
pub const FD_NORM_FLOOR: f64 = 1e-6;

/// Norm-wise relative error `|a - n| / max(|a|, |n|, FD_NORM_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(analytic).max(scale(numeric)).max(FD_NORM_FLOOR)
}

/// Central differences of `loss` with respect to every entry of the
/// tensors returned by `params`, compared with `grads`. Returns the worst
/// per-tensor relative error with its name.
pub fn check_params<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> Vec<(String, &mut Tensor)>,
    loss: impl Fn(&M) -> f64,
    grads: &Gradients,
) -> (String, f64) {
    let names_keys: Vec<(String, u64, usize)> = params(model).into_iter().map(|(n, t)| (n, t.key(), t.len())).collect();
    let mut worst = (String::new(), 0.0);
    for (idx, (name, key, len)) in names_keys.iter().enumerate() {
        let analytic = grads.get(*key).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; *len]);
        let mut numeric = vec![0.0; *len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = params(model)[idx].1.data()[j];
            params(model)[idx].1.data_mut()[j] = orig + FD_STEP;
            let up = loss(model);
            params(model)[idx].1.data_mut()[j] = orig - FD_STEP;
            let down = loss(model);
            params(model)[idx].1.data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let e = rel_error(&analytic, &numeric);
        if e > worst.1 {
            worst = (name.clone(), e);
        }
    }
    worst
}

/// Checks one tape function of several input tensors. Non-scalar outputs
/// are reduced against a fixed random projection so every output entry
/// contributes.
pub fn check_op(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape<'_>, &[rebq::tensor::Var]) -> rebq::tensor::Var) -> f64 {
    use rand::Rng;
    let mut inputs: Vec<Tensor> = inputs.into_iter().map(|t| t.with_trainable(true)).collect();
    let projection = |n: usize| -> Vec<f64> {
        let mut r = rng(99);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    };
    let eval = |inputs: &Vec<Tensor>, with_grad: bool| -> (f64, Option<Gradients>) {
        let mut tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let loss = if tape.value(out).len() == 1 {
            out
        } else {
            let r = tape.constant(shape.clone(), projection(shape.iter().product())).unwrap();
            let m = tape.mul(out, r).unwrap();
            tape.sum(m)
        };
        let v = tape.scalar(loss);
        (v, with_grad.then(|| tape.backward(loss).unwrap()))
    };
    let (_, grads) = eval(&inputs, true);
    let grads = grads.unwrap();
    let (_, worst) = check_params(
        &mut inputs,
        |ins| ins.iter_mut().enumerate().map(|(i, t)| (format!("{name}[{i}]"), t)).collect(),
        |ins| eval(ins, false).0,
        &grads,
    );
    worst
}

pub mod criteria;

pub fn small_backbone_config() -> BackboneConfig {
    BackboneConfig {
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 16,
        text_vocab_size: 32,
        max_text_len: 4,
        num_patches: 3,
        patch_dim: 4,
        pretrain_classes: 3,
    }
}

pub fn small_backbone(seed: u64) -> Arc<MultimodalBackbone> {
    let mut b = MultimodalBackbone::init(small_backbone_config(), seed).unwrap();
    b.freeze();
    Arc::new(b)
}

/// Six classes in three sessions on a randomly initialized backbone; a full
/// run takes well under a second.
pub fn small_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.backbone.config = small_backbone_config();
    c.data = DataConfig {
        corpus_path: None,
        num_classes: 6,
        samples_per_class: 10,
        synth: SynthConfig {
            shape: c.backbone.config.input_shape(),
            bag_size: 2,
            ..SynthConfig::default()
        },
    };
    c.stream.num_sessions = 3;
    c.prompt = PromptConfig {
        pool_size: 3,
        memory_pool_size: 3,
        prompt_len: 2,
        prompted_layers: 2,
    };
    c.train.epochs = 1;
    c.train.optimizer.lr = 1e-2;
    c.with_root_seed(11)
}

pub fn small_run(config: &RunConfig, backbone: &Arc<MultimodalBackbone>) -> RunOutcome {
    let opts = RunOptions {
        backbone: Some(backbone.clone()),
        ..RunOptions::default()
    };
    run_experiment_with(config, opts).unwrap()
}

pub mod suite {
    use std::sync::Arc;

    use super::*;
    use rand::Rng;
    use rebq::backbone::{InjectionMode, PromptInjection, UNIFIED_LAYOUT};
    use rebq::bench::Modality;
    use rebq::pipeline::{batch_loss, build_variant, ModelConfig, PreparedSample, PromptConfig, VariantSpec};
    use rebq::prompt::{PoolRole, PromptGeometry, PromptPool};
    use rebq::tensor::Var;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut rng(seed))
    }

    fn positive_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut t = rand_tensor(shape, seed);
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
        t
    }

    /// Every differentiable tape operation, each on a random instance with
    /// dimensions at most 8.
    pub fn primitive_ops() -> Vec<(&'static str, f64)> {
        let a = || rand_tensor(&[3, 4], 1);
        let b = || rand_tensor(&[3, 4], 2);
        let row = || rand_tensor(&[1, 4], 3);
        let mut r = vec![
            ("add", check_op("add", vec![a(), b()], |t, v| t.add(v[0], v[1]).unwrap())),
            ("sub", check_op("sub", vec![a(), b()], |t, v| t.sub(v[0], v[1]).unwrap())),
            ("mul", check_op("mul", vec![a(), b()], |t, v| t.mul(v[0], v[1]).unwrap())),
            (
                "mul_scalar_broadcast",
                check_op("mul_scalar_broadcast", vec![a(), rand_tensor(&[1], 4)], |t, v| t.mul(v[0], v[1]).unwrap()),
            ),
            ("scale", check_op("scale", vec![a()], |t, v| t.scale(v[0], -1.7))),
            ("add_row", check_op("add_row", vec![a(), row()], |t, v| t.add_row(v[0], v[1]).unwrap())),
            ("mul_row", check_op("mul_row", vec![a(), row()], |t, v| t.mul_row(v[0], v[1]).unwrap())),
            (
                "matmul",
                check_op("matmul", vec![a(), rand_tensor(&[4, 2], 5)], |t, v| t.matmul(v[0], v[1]).unwrap()),
            ),
            ("matmul_nt", check_op("matmul_nt", vec![a(), b()], |t, v| t.matmul_nt(v[0], v[1]).unwrap())),
            ("transpose", check_op("transpose", vec![a()], |t, v| t.transpose(v[0]))),
            ("softmax_rows", check_op("softmax_rows", vec![a()], |t, v| t.softmax_rows(v[0]))),
            (
                "layer_norm",
                check_op("layer_norm", vec![a(), row(), rand_tensor(&[1, 4], 6)], |t, v| {
                    t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()
                }),
            ),
            ("gelu", check_op("gelu", vec![a()], |t, v| t.gelu(v[0]))),
            ("sum", check_op("sum", vec![a()], |t, v| t.sum(v[0]))),
            ("sum_squares", check_op("sum_squares", vec![a()], |t, v| t.sum_squares(v[0]))),
            ("slice_rows", check_op("slice_rows", vec![a()], |t, v| t.slice_rows(v[0], 1, 2).unwrap())),
            ("row", check_op("row", vec![a()], |t, v| t.row(v[0], 2).unwrap())),
            ("slice_cols", check_op("slice_cols", vec![a()], |t, v| t.slice_cols(v[0], 1, 2).unwrap())),
            ("concat_rows", check_op("concat_rows", vec![a(), row()], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap())),
            (
                "concat_cols",
                check_op("concat_cols", vec![a(), rand_tensor(&[3, 2], 7)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
            ),
            ("reshape", check_op("reshape", vec![a()], |t, v| t.reshape(v[0], vec![2, 6]).unwrap())),
            ("cosine_rows", check_op("cosine_rows", vec![a(), b()], |t, v| t.cosine_rows(v[0], v[1]).unwrap())),
            (
                "cross_entropy",
                check_op("cross_entropy", vec![row()], |t, v| t.cross_entropy(v[0], &[0.0, 0.0, 1.0, 0.0], None).unwrap()),
            ),
            (
                "cross_entropy_masked",
                check_op("cross_entropy_masked", vec![row()], |t, v| {
                    t.cross_entropy(v[0], &[0.0, 1.0, 0.0, 0.0], Some(&[true, true, false, true])).unwrap()
                }),
            ),
            (
                "bce_with_logits",
                check_op("bce_with_logits", vec![row()], |t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0]).unwrap()),
            ),
            ("mse", check_op("mse", vec![a(), b()], |t, v| t.mse(v[0], v[1]).unwrap())),
            (
                "gather_rows",
                check_op("gather_rows", vec![rand_tensor(&[5, 3], 8)], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap()),
            ),
        ];
        // composite used in the spec examples: sum(softmax(W x))
        r.push((
            "sum_softmax_wx",
            check_op("sum_softmax_wx", vec![rand_tensor(&[1, 4], 9), rand_tensor(&[4, 5], 10)], |t, v| {
                let z = t.matmul(v[0], v[1]).unwrap();
                let s = t.softmax_rows(z);
                let sq = t.mul(s, s).unwrap();
                t.sum(sq)
            }),
        ));
        r.push((
            "cosine_positive_inputs",
            check_op("cosine_positive_inputs", vec![positive_tensor(&[2, 4], 11), rand_tensor(&[2, 4], 12)], |t, v| {
                t.cosine_rows(v[0], v[1]).unwrap()
            }),
        ));
        r
    }

    fn geometry(mode: InjectionMode) -> PromptGeometry {
        PromptGeometry {
            embed_dim: 8,
            prompt_len: 2,
            num_layers: 2,
            mode,
        }
    }

    /// Prompt selection (weights and aggregation) with respect to A, keys
    /// and components.
    pub fn selection() -> f64 {
        let mut pool = PromptPool::new(PoolRole::Text, geometry(InjectionMode::Attention), 3, &mut rng(20)).unwrap();
        let q: Vec<f64> = {
            let mut r = rng(21);
            (0..8).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let proj: Vec<f64> = {
            let mut r = rng(22);
            (0..pool.geometry.flat_len()).map(|_| r.random_range(-1.0..1.0)).collect()
        };
        let loss = |p: &PromptPool| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let qv = tape.constant_row(&q);
            let sel = p.select_on(&mut tape, qv).unwrap();
            let r = tape.constant(tape.shape(sel).to_vec(), proj.clone()).unwrap();
            let m = tape.mul(sel, r).unwrap();
            let l = tape.sum(m);
            (tape.scalar(l), tape.backward(l).unwrap())
        };
        let (_, grads) = loss(&pool);
        check_params(&mut pool, |p| p.named_params_mut(), |p| loss(p).0, &grads).1
    }

    /// Frozen-backbone forward with pool-selected prompts, for both
    /// injection modes.
    pub fn injected_forward(mode: InjectionMode) -> f64 {
        let backbone = frozen_tiny_backbone(23);
        let mut pool = PromptPool::new(PoolRole::Visual, geometry(mode), 3, &mut rng(24)).unwrap();
        let sample = complete_sample("g", 1);
        let q = vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.0, 0.7];
        let loss = |p: &PromptPool| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let qv = tape.constant_row(&q);
            let inj: PromptInjection = p.select_injection(&mut tape, qv).unwrap();
            let out = backbone.encode(&mut tape, &sample, &UNIFIED_LAYOUT, Some(&inj)).unwrap();
            let cls = tape.row(out, 0).unwrap();
            let sq = tape.mul(cls, cls).unwrap();
            let s = tape.sum(sq);
            let c0 = tape.slice_cols(cls, 0, 1).unwrap();
            let l = tape.add(s, c0).unwrap();
            (tape.scalar(l), tape.backward(l).unwrap())
        };
        let (_, grads) = loss(&pool);
        check_params(&mut pool, |p| p.named_params_mut(), |p| loss(p).0, &grads).1
    }

    /// Pretraining loss with respect to every backbone parameter.
    pub fn backbone_pretraining() -> f64 {
        let mut backbone = MultimodalBackbone::init(tiny_backbone_config(), 25).unwrap();
        let samples = [complete_sample("a", 0), complete_sample("b", 2)];
        let loss = |b: &MultimodalBackbone| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let mut parts = Vec::new();
            for s in &samples {
                let logits = b.pretrain_logits(&mut tape, s).unwrap();
                let target = s.label.target(3).unwrap();
                parts.push(tape.cross_entropy(logits, &target, None).unwrap());
            }
            let all = tape.concat_cols(&parts).unwrap();
            let l = tape.sum(all);
            (tape.scalar(l), tape.backward(l).unwrap())
        };
        let (_, grads) = loss(&backbone);
        check_params(&mut backbone, |b| b.named_params_mut(), |b| loss(b).0, &grads).1
    }

    fn prepared(backbone: &MultimodalBackbone) -> Vec<PreparedSample> {
        let shape = tiny_shape();
        let samples = [
            complete_sample("c0", 0),
            complete_sample("c1", 2).without(Modality::Text, &shape),
            complete_sample("c2", 1).without(Modality::Visual, &shape),
            complete_sample("c3", 3),
        ];
        samples.iter().map(|s| PreparedSample::new(backbone, s, true).unwrap()).collect()
    }

    /// `L = L_c + lambda L_r` on a mixed batch, with respect to every
    /// trainable parameter of the model.
    pub fn end_to_end(spec: VariantSpec, lambda: f64) -> f64 {
        let backbone = Arc::new(frozen_tiny_backbone(26));
        let config = ModelConfig {
            num_classes: 4,
            multi_label: false,
            prompt: PromptConfig {
                pool_size: 3,
                memory_pool_size: 2,
                prompt_len: 2,
                prompted_layers: 2,
            },
            lambda,
        };
        let mut model = build_variant(spec, backbone.clone(), &config, 27).unwrap();
        // a zero head would hide the gradient path into the prompts
        let mut r = rng(28);
        model.head_w.data_mut().iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));
        let data = prepared(&backbone);
        let refs: Vec<&PreparedSample> = data.iter().collect();
        let allowed = [true, true, true, true];
        let loss = |m: &rebq::pipeline::RebQModel| -> (f64, Gradients) {
            let mut tape = Tape::new();
            let l = batch_loss(m, &mut tape, &refs, Some(&allowed)).unwrap();
            let v: Var = l.total;
            (tape.scalar(v), tape.backward(v).unwrap())
        };
        let (_, grads) = loss(&model);
        check_params(&mut model, |m| m.named_params_mut(), |m| loss(m).0, &grads).1
    }

    /// Every check of the suite, by name.
    pub fn all() -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = primitive_ops().into_iter().map(|(n, e)| (n.to_string(), e)).collect();
        out.push(("select_prompt".into(), selection()));
        out.push(("attention_prefix_forward".into(), injected_forward(InjectionMode::Attention)));
        out.push(("input_append_forward".into(), injected_forward(InjectionMode::Input)));
        out.push(("backbone_pretraining".into(), backbone_pretraining()));
        out.push(("total_loss_rebq".into(), end_to_end(VariantSpec::canonical(), 0.5)));
        out.push((
            "total_loss_naive".into(),
            end_to_end(VariantSpec::preset("naive").unwrap(), 0.5),
        ));
        out.push((
            "total_loss_no_memory_pool".into(),
            end_to_end(VariantSpec::preset("no_memory_pool").unwrap(), 0.5),
        ));
        out
    }
}
