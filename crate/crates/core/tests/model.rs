use sbcit_core::config::{BackboneConfig, ModelConfig, RunConfig};
use sbcit_core::model::backbone::{
    backbone_forward, cit_block_forward, lcmhsa_forward, lpu_forward, patch_embed, rrffn_forward, smoothing_boundary,
    stem_forward, AttentionSpec, Tokens,
};
use sbcit_core::model::head::{channel_enhance, classify, spatial_attention};
use sbcit_core::model::layers::{conv, ConvSpec};
use sbcit_core::model::streams::{residual_block_forward, spatial_stream_forward, BlockKind};
use sbcit_core::model::{describe_model, model_forward, Ctx, Mode, Model};
use sbcit_core::Result;
use sbcit_tensor::gradcheck::SplitMix64;
use sbcit_tensor::{ParameterStore, PoolMode, Tape, Tensor, Var};

type Build<'f> = dyn Fn(&mut Ctx<'_, f64>, Var) -> Result<Var> + 'f;

fn noise(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.next_signed())
}

/// Creates the parameters used by `f` on an input of the given shape.
fn build(shape: &[usize], seed: u64, f: &Build<'_>) -> ParameterStore<f64> {
    let mut store = ParameterStore::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, seed);
    let x = ctx.tape.constant(Tensor::zeros(shape.to_vec()));
    f(&mut ctx, x).unwrap();
    store
}

fn run(store: &ParameterStore<f64>, input: &Tensor<f64>, f: &Build<'_>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, store, Mode::Eval).frozen();
    let x = ctx.tape.constant(input.clone());
    let y = f(&mut ctx, x).unwrap();
    tape.value(y).clone()
}

fn set_where(store: &mut ParameterStore<f64>, pred: impl Fn(&str) -> bool, f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if pred(&store.get(id).name) {
            let t = f(store.value(id));
            store.set_value(id, t).unwrap();
        }
    }
}

fn zero_where(store: &mut ParameterStore<f64>, pred: impl Fn(&str) -> bool) {
    set_where(store, pred, |t| Tensor::zeros(t.shape().to_vec()));
}

fn tokens(var: Var, grid: (usize, usize), dim: usize) -> Tokens {
    Tokens { var, grid, dim }
}

const ATTN: AttentionSpec = AttentionSpec {
    dim: 8,
    heads: 2,
    window: 4,
    kv_stride: 2,
};

#[test]
fn stem_halves_extent_and_sets_width() {
    let f: &Build<'_> = &|ctx, x| stem_forward(ctx, x, 1, 64);
    let store = build(&[1, 1, 64, 64], 1, f);
    assert_eq!(run(&store, &noise(&[1, 1, 64, 64], 2), f).shape(), &[1, 64, 32, 32]);
}

#[test]
fn zero_stem_convolutions_give_zero_output() {
    let f: &Build<'_> = &|ctx, x| stem_forward(ctx, x, 1, 8);
    let mut store = build(&[1, 1, 16, 16], 1, f);
    zero_where(&mut store, |n| n.ends_with(".weight") || n.ends_with(".bias"));
    let y = run(&store, &noise(&[1, 1, 16, 16], 3), f);
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_embedding_token_counts() {
    for (stride, out, expect) in [(1, 64, [1, 1024, 64]), (2, 128, [1, 256, 128])] {
        let f: &Build<'_> = &|ctx, x| Ok(patch_embed(ctx, "embed", x, 64, out, stride)?.var);
        let store = build(&[1, 64, 32, 32], 4, f);
        assert_eq!(run(&store, &noise(&[1, 64, 32, 32], 5), f).shape(), &expect);
    }
}

#[test]
fn tokens_refold_to_the_original_map() {
    let map = noise(&[2, 3, 4, 6], 6);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(map.clone());
    let t = tape.map_to_tokens(x).unwrap();
    assert_eq!(tape.shape(t), &[2, 24, 3]);
    let back = tape.tokens_to_map(t, (4, 6)).unwrap();
    assert_eq!(tape.value(back), &map);
}

#[test]
fn lpu_with_zero_kernel_is_identity() {
    let f: &Build<'_> = &|ctx, x| Ok(lpu_forward(ctx, "lpu", tokens(x, (4, 4), 8))?.var);
    let mut store = build(&[2, 16, 8], 7, f);
    zero_where(&mut store, |_| true);
    let x = noise(&[2, 16, 8], 8);
    assert_eq!(run(&store, &x, f), x);
}

#[test]
fn lpu_centre_tap_doubles_a_single_token() {
    let f: &Build<'_> = &|ctx, x| Ok(lpu_forward(ctx, "lpu", tokens(x, (1, 1), 3))?.var);
    let mut store = build(&[1, 1, 3], 9, f);
    zero_where(&mut store, |_| true);
    set_where(&mut store, |n| n == "lpu.dw.weight", |t| {
        let mut t = t.clone();
        for c in 0..3 {
            t.data_mut()[c * 9 + 4] = 1.0;
        }
        t
    });
    let x = noise(&[1, 1, 3], 10);
    assert_eq!(run(&store, &x, f), x.map(|v| 2.0 * v));
}

fn attention_maps(spec: AttentionSpec, grid: (usize, usize), seed: u64, zero_q: bool) -> Vec<Tensor<f64>> {
    let shape = [2, grid.0 * grid.1, spec.dim];
    let f: &Build<'_> = &|ctx, x| Ok(lcmhsa_forward(ctx, "attn", tokens(x, grid, spec.dim), spec)?.var);
    let mut store = build(&shape, seed, f);
    set_where(&mut store, |n| n.ends_with("rel_bias"), |t| noise(t.shape(), seed ^ 0xB1A5));
    if zero_q {
        zero_where(&mut store, |n| n.starts_with("attn.q.") || n.ends_with("rel_bias"));
    }
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval).frozen().with_taps();
    let x = ctx.tape.constant(noise(&shape, seed + 1));
    lcmhsa_forward(&mut ctx, "attn", tokens(x, grid, spec.dim), spec).unwrap();
    let taps = ctx.taps("attention").to_vec();
    taps.iter().map(|&v| tape.value(v).clone()).collect()
}

#[test]
fn attention_rows_are_normalized() {
    for heads in [1, 2, 4] {
        let spec = AttentionSpec { heads, ..ATTN };
        for map in attention_maps(spec, (8, 8), heads as u64, false) {
            let tk = *map.shape().last().unwrap();
            for row in map.data().chunks(tk) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
            }
        }
    }
}

#[test]
fn zero_logits_give_uniform_attention() {
    let maps = attention_maps(ATTN, (8, 8), 11, true);
    let tk = *maps[0].shape().last().unwrap();
    assert_eq!(tk, 4);
    for &w in maps[0].data() {
        assert!((w - 0.25).abs() < 1e-12);
    }
}

#[test]
fn key_value_grid_is_strided() {
    let g = BackboneConfig::default().window_geometry((8, 8)).unwrap();
    assert_eq!(g.kv_grid.0 * g.kv_grid.1, 16);
    assert_eq!(g.window.0 * g.window.1, 16);
}

#[test]
fn rrffn_with_zero_inner_kernel_skips_the_depthwise_path() {
    let grid = (4, 4);
    let f: &Build<'_> = &|ctx, x| Ok(rrffn_forward(ctx, "ffn", tokens(x, grid, 8), 4)?.var);
    let mut store = build(&[2, 16, 8], 12, f);
    zero_where(&mut store, |n| n.starts_with("ffn.dw."));
    let reference: &Build<'_> = &|ctx, x| {
        let map = ctx.tape.tokens_to_map(x, grid)?;
        let h = conv(ctx, "ffn.expand", map, ConvSpec::new(8, 32, 1))?;
        let h = ctx.tape.gelu(h);
        let out = conv(ctx, "ffn.project", h, ConvSpec::new(32, 8, 1))?;
        Ok(ctx.tape.map_to_tokens(out)?)
    };
    let x = noise(&[2, 16, 8], 13);
    let got = run(&store, &x, f);
    assert!(got.max_abs_diff(&run(&store, &x, reference)) < 1e-12);
    assert!(store.iter().any(|(_, p)| p.name == "ffn.expand.weight" && p.value.shape()[0] == 32));
}

#[test]
fn cit_block_with_zero_sublayers_is_identity() {
    let f: &Build<'_> = &|ctx, x| Ok(cit_block_forward(ctx, "block", tokens(x, (4, 4), 8), ATTN, 4)?.var);
    let mut store = build(&[2, 16, 8], 14, f);
    zero_where(&mut store, |n| !n.contains("norm"));
    let x = noise(&[2, 16, 8], 15);
    assert_eq!(run(&store, &x, f), x);
}

#[test]
fn smoothing_and_boundary_agree_on_constant_maps() {
    let mut store = ParameterStore::<f64>::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, 16).with_taps();
    let x = ctx.tape.constant(Tensor::full(vec![1, 4, 5, 5], 0.7));
    smoothing_boundary(&mut ctx, "sb", x, 4).unwrap();
    let (avg, max) = (ctx.taps("sb_avg")[0], ctx.taps("sb_max")[0]);
    assert!(tape.value(avg).max_abs_diff(tape.value(max)) < 1e-15);
}

#[test]
fn backbone_stage_shapes_follow_repeated_halving() {
    let cfg = BackboneConfig::default();
    let f = |ctx: &mut Ctx<'_, f32>, x: Var| -> Result<Vec<Var>> {
        let stem = stem_forward(ctx, x, 1, cfg.stem_channels)?;
        backbone_forward(ctx, &cfg, stem)
    };
    let mut store = ParameterStore::<f32>::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, 17);
    let x = ctx.tape.constant(Tensor::zeros(vec![3, 1, 64, 64]));
    let stages = f(&mut ctx, x).unwrap();
    let shapes: Vec<Vec<usize>> = stages.iter().map(|&s| tape.shape(s).to_vec()).collect();
    assert_eq!(shapes, vec![vec![3, 64, 16, 16], vec![3, 128, 8, 8], vec![3, 192, 4, 4], vec![3, 256, 2, 2]]);
}

#[test]
fn residual_block_with_zero_t_path_is_relu() {
    let f: &Build<'_> = &|ctx, x| residual_block_forward(ctx, "block", x, BlockKind::K, 4, 4, 1);
    let mut store = build(&[2, 4, 5, 5], 18, f);
    zero_where(&mut store, |n| n.starts_with("block.t"));
    let x = noise(&[2, 4, 5, 5], 19);
    assert_eq!(run(&store, &x, f), x.map(|v| v.max(0.0)));
}

#[test]
fn residual_block_projects_on_channel_change() {
    let f: &Build<'_> = &|ctx, x| residual_block_forward(ctx, "block", x, BlockKind::L, 4, 8, 2);
    let store = build(&[1, 4, 6, 6], 20, f);
    assert!(store.id("block.proj.weight").is_some());
    let same: &Build<'_> = &|ctx, x| residual_block_forward(ctx, "block", x, BlockKind::K, 4, 4, 1);
    assert!(build(&[1, 4, 6, 6], 20, same).id("block.proj.weight").is_none());
}

#[test]
fn residual_block_scalar_hand_evaluation() {
    // x = 2, T(x) = 1.5 · relu(1 · x) = 3, y = relu(3 + 2) = 5
    let f: &Build<'_> = &|ctx, x| residual_block_forward(ctx, "block", x, BlockKind::K, 1, 1, 1);
    let mut store = build(&[1, 1, 1, 1], 21, f);
    zero_where(&mut store, |_| true);
    for (name, centre) in [("block.t1.weight", 1.0), ("block.t2.weight", 1.5)] {
        set_where(&mut store, |n| n == name, |t| {
            let mut t = t.clone();
            t.data_mut()[4] = centre;
            t
        });
    }
    let y = run(&store, &Tensor::full(vec![1, 1, 1, 1], 2.0), f);
    assert_eq!(y.data(), &[5.0]);
}

#[test]
fn spatial_stream_reaches_the_fusion_extent_and_depends_on_pool_mode() {
    let cfg = ModelConfig::miniature();
    let alternating: &Build<'_> =
        &|ctx, x| spatial_stream_forward(ctx, &cfg.spatial, 16, x, sbcit_core::model::streams::spatial_pool_mode);
    let all_avg: &Build<'_> = &|ctx, x| spatial_stream_forward(ctx, &cfg.spatial, 16, x, |_| PoolMode::Avg);
    let store = build(&[4, 1, 64, 64], 22, alternating);
    let x = noise(&[4, 1, 64, 64], 23);
    let a = run(&store, &x, alternating);
    assert_eq!(a.shape(), &[4, 16, 2, 2]);
    assert!(a.max_abs_diff(&run(&store, &x, all_avg)) > 1e-9);
}

#[test]
fn channel_enhancement_concatenates_in_order() {
    let mut tape = Tape::<f64>::new();
    let mut store = ParameterStore::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, 0);
    let r = ctx.tape.constant(Tensor::zeros(vec![2, 3, 2, 2]));
    let s = ctx.tape.constant(noise(&[2, 4, 2, 2], 24));
    let b = ctx.tape.constant(noise(&[2, 5, 2, 2], 25));
    let z = channel_enhance(&mut ctx, r, s, b).unwrap();
    let z = tape.value(z).clone();
    assert_eq!(z.shape(), &[2, 12, 2, 2]);
    assert!(z.narrow(1, 0, 3).unwrap().data().iter().all(|&v| v == 0.0));
    assert_eq!(&z.narrow(1, 3, 4).unwrap(), tape.value(s));
    assert_eq!(&z.narrow(1, 7, 5).unwrap(), tape.value(b));
}

fn gated(bias: f64) -> (Tensor<f64>, Tensor<f64>) {
    let f: &Build<'_> = &|ctx, x| spatial_attention(ctx, x, 4);
    let mut store = build(&[2, 6, 3, 3], 26, f);
    zero_where(&mut store, |n| n == "fusion.gate.weight");
    set_where(&mut store, |n| n == "fusion.gate.bias", |t| Tensor::full(t.shape().to_vec(), bias));
    let z = noise(&[2, 6, 3, 3], 27);
    (run(&store, &z, f), z)
}

#[test]
fn saturated_gate_passes_the_map_through() {
    let (out, z) = gated(20.0);
    assert!(out.max_abs_diff(&z) < 1e-6);
}

#[test]
fn closed_gate_suppresses_the_map() {
    let (out, _) = gated(-20.0);
    assert!(out.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn gate_values_stay_in_the_unit_interval() {
    let f: &Build<'_> = &|ctx, x| spatial_attention(ctx, x, 4);
    let mut store = build(&[2, 6, 8, 8], 28, f);
    set_where(&mut store, |_| true, |t| noise(t.shape(), 29).map(|v| 25.0 * v));
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &store, Mode::Eval).frozen().with_taps();
    let x = ctx.tape.constant(noise(&[2, 6, 8, 8], 30).map(|v| 10.0 * v));
    spatial_attention(&mut ctx, x, 4).unwrap();
    let gate = ctx.taps("gate")[0];
    let g = tape.value(gate);
    assert_eq!(g.shape(), &[2, 1, 8, 8]);
    assert!(g.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn classifier_pools_and_normalizes() {
    let f = |ctx: &mut Ctx<'_, f64>, x: Var| classify(ctx, x, 4, 0.3);
    let mut store = ParameterStore::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, 31);
    let x = ctx.tape.constant(Tensor::full(vec![2, 5, 3, 3], 1.25));
    let out = f(&mut ctx, x).unwrap();
    assert!(tape.value(out.penultimate).data().iter().all(|&v| (v - 1.25).abs() < 1e-12));
    // the classifier weights start at zero
    assert!(tape.value(out.probabilities).data().iter().all(|&p| (p - 0.25).abs() < 1e-12));
}

#[test]
fn softmax_closed_form() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 0.0, 0.0, 3f64.ln()]).unwrap());
    let p = tape.softmax(x, 1).unwrap();
    let expect = [1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5];
    for (a, b) in tape.value(p).data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn model_output_contract() {
    let cfg = ModelConfig::miniature();
    let model = Model::new(cfg.clone(), 32).unwrap();
    let x = noise(&[8, 1, 64, 64], 33).cast::<f32>();
    let a = model.predict(&x, 8).unwrap();
    assert_eq!(a.logits.shape(), &[8, 4]);
    assert_eq!(a.penultimate.shape(), &[8, cfg.fused_channels()]);
    for row in a.probabilities.data().chunks(4) {
        assert!((row.iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let b = model.predict(&x, 3).unwrap();
    assert_eq!(a, b, "eval-mode outputs must not depend on chunking or repetition");
}

#[test]
fn model_rejects_wrong_input_extent() {
    let cfg = ModelConfig::miniature();
    let model = Model::new(cfg, 34).unwrap();
    assert!(model.predict(&Tensor::zeros(vec![1, 1, 32, 32]), 1).is_err());
}

#[test]
fn indivisible_input_size_is_rejected() {
    let cfg = RunConfig::miniature().with_assignments(&["input_size=48"]);
    let err = cfg.and_then(|c| Model::new(c.model(), 0).map(|_| ()));
    assert!(err.is_err());
}

#[test]
fn describe_counts_a_single_convolution() {
    let mut store = ParameterStore::<f32>::new();
    let mut tape = Tape::new();
    let mut ctx = Ctx::building(&mut tape, &mut store, 0);
    ctx.tape.set_scope("c");
    let x = ctx.tape.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    conv(&mut ctx, "c", x, ConvSpec::new(1, 1, 3).no_bias()).unwrap();
    assert_eq!(tape.mac_counts().get("c"), Some(&144));
    assert_eq!(store.iter().map(|(_, p)| p.value.numel()).sum::<usize>(), 9);
}

#[test]
fn describe_is_deterministic_and_sums_fusion_widths() {
    let cfg = ModelConfig::miniature();
    let a = describe_model(&cfg).unwrap();
    assert_eq!(a, describe_model(&cfg).unwrap());
    assert_eq!(a.fused_channels, 3 * cfg.backbone.stage_dims[3]);
    assert_eq!(a.total_params, a.modules.iter().map(|m| m.params).sum::<usize>());
    let model = Model::new(cfg, 5).unwrap();
    let trainable: usize = model.params.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.numel()).sum();
    assert_eq!(a.total_params, trainable);
}

#[test]
fn full_forward_exposes_aligned_streams() {
    let cfg = ModelConfig::miniature();
    let model = Model::new(cfg.clone(), 35).unwrap();
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &model.params, Mode::Eval).frozen();
    let x = ctx.tape.constant(Tensor::zeros(vec![2, 1, 64, 64]));
    let f = model_forward(&mut ctx, &cfg, x).unwrap();
    let w = cfg.stream_width();
    for v in [f.residual, f.spatial, f.stages[3]] {
        assert_eq!(tape.shape(v), &[2, w, 2, 2]);
    }
    assert_eq!(tape.shape(f.enhanced), &[2, 3 * w, 2, 2]);
}
