mod common;

use diffcore::gradcheck::random_tensor;
use diffcore::{grad_check_default, Archive, Binder, Graph, ParamStore, Tensor};
use meshfuse::body_model::{forward_mesh, project, regress_joints, toy_asset};
use meshfuse::config::{Config, Feat2dMode};
use meshfuse::fusion::{
    attention_archive, contribution_mask, corner_weights, mass_split, sample_values, trilinear_sample, Fusion,
    NUM_SMPL_TOKENS,
};
use meshfuse::lifting::cell_centers;
use meshfuse::model::Model;
use meshfuse::nn::{self, zero_param, Init, Mlp, MultiHeadAttention, TokenEncoder};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn fusion_with(cfg: &Config, seed: u64) -> (ParamStore, Fusion) {
    let mut store = ParamStore::new();
    let f = Fusion::new(&mut store, &mut Init::from_seed(seed), cfg, 18);
    (store, f)
}

fn randomize(store: &mut ParamStore, id: diffcore::ParamId, rng: &mut ChaCha8Rng, scale: f64) {
    for x in store.get_mut(id).data_mut() {
        *x = rng.random_range(-scale..scale);
    }
}

fn random_inputs(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        random_tensor(&mut rng, &[3, 16, 16], 0.0, 1.0),
        random_tensor(&mut rng, &[17, 2], -0.9, 0.9),
    )
}

#[test]
fn attention_single_key_returns_its_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let q = g.constant(random_mat(&mut rng, 4, 6, 3.0));
    let k = g.constant(random_mat(&mut rng, 1, 6, 3.0));
    let v = random_mat(&mut rng, 1, 6, 3.0);
    let (out, probs) = nn::attention(q, k, g.constant(v.clone()));
    for r in 0..4 {
        assert_eq!(out.value().row_slice(r), v.row_slice(0));
        assert_eq!(probs.value().get2(r, 0), 1.0);
    }
}

#[test]
fn attention_identical_keys_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::new();
    let key = random_mat(&mut rng, 1, 4, 1.0);
    let k = Tensor::from_vec(&[2, 4], key.data().repeat(2));
    let v = random_mat(&mut rng, 2, 4, 1.0);
    let q = g.constant(random_mat(&mut rng, 3, 4, 1.0));
    let (out, _) = nn::attention(q, g.constant(k), g.constant(v.clone()));
    for r in 0..3 {
        for c in 0..4 {
            let mean = 0.5 * (v.get2(0, c) + v.get2(1, c));
            assert!((out.value().get2(r, c) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn multi_head_attention_matches_per_head_oracle() {
    let mut store = ParamStore::new();
    let a = MultiHeadAttention::new(&mut store, &mut Init::from_seed(4), "m", 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for id in [a.q.b, a.k.b, a.v.b, a.o.b] {
        randomize(&mut store, id, &mut rng, 0.3);
    }
    let (q, kv) = (random_mat(&mut rng, 3, 8, 1.0), random_mat(&mut rng, 5, 8, 1.0));
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let out = a.forward(&p, g.constant(q.clone()), g.constant(kv.clone()), g.constant(kv.clone()));
    let want = from_mat(&mha(&store, &a, &to_mat(&q), &to_mat(&kv), &to_mat(&kv)));
    assert!(max_abs_diff(&out.out.value(), &want) < 1e-10);
    for r in 0..3 {
        assert!((out.probs.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
#[should_panic(expected = "do not divide")]
fn heads_must_divide_channels() {
    let mut store = ParamStore::new();
    MultiHeadAttention::new(&mut store, &mut Init::from_seed(0), "m", 8, 3);
}

#[test]
fn encode2d_keeps_token_shape() {
    let (store, f) = fusion_with(&tiny_config(), 5);
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(5), &[4, 8], -1.0, 1.0);
    assert_eq!(f.encode2d(&p, g.constant(x)).dims(), vec![4, 8]);
}

#[test]
fn encode2d_with_zero_blocks_is_identity() {
    let (mut store, f) = fusion_with(&tiny_config(), 6);
    for l in &f.encoder2d.layers {
        l.zero_residuals(&mut store);
    }
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let x = random_tensor(&mut ChaCha8Rng::seed_from_u64(6), &[4, 8], -1.0, 1.0);
    assert!(bits_equal(&f.encode2d(&p, g.constant(x.clone())).value(), &x));
}

#[test]
fn encoder_two_token_layer_matches_hand_oracle() {
    let mut store = ParamStore::new();
    let enc = TokenEncoder::new(&mut store, &mut Init::from_seed(7), "e", 2, 4, 1, 2, 1);
    let l = enc.layers[0];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // nonzero biases and affines so every term is exercised
    for id in [l.attn.q.b, l.attn.v.b, l.ln1.beta, l.ln2.gamma, l.mlp.fc1.b] {
        randomize(&mut store, id, &mut rng, 0.5);
    }
    let x = random_mat(&mut rng, 2, 4, 1.0);
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let got = enc.forward(&p, g.constant(x.clone()));

    let xm = to_mat(&x);
    let pos = to_mat(store.get(enc.pos));
    let h = ln_affine(&store, &l.ln1, &xm);
    let qk = add(&h, &pos);
    let x1 = add(&xm, &mha(&store, &l.attn, &qk, &qk, &h));
    let want = add(&x1, &mlp(&store, &l.mlp, &ln_affine(&store, &l.ln2, &x1)));
    assert!(max_abs_diff(&got.value(), &from_mat(&want)) < 1e-10);
}

#[test]
fn zero_heads_give_neutral_parameters() {
    let (mut store, f) = fusion_with(&tiny_config(), 8);
    f.zero_heads(&mut store);
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let mem = g.constant(random_mat(&mut ChaCha8Rng::seed_from_u64(8), 4, 8, 1.0));
    let (_, _, s) = f.initial_regress(&p, mem, p.var(f.encoder2d.pos));
    assert!(s.beta.value().data().iter().all(|&b| b == 0.0));
    assert!(s.theta.value().data().iter().all(|&t| t == 0.0));
    assert_eq!(s.cam.value().data(), &[1.0, 0.0, 0.0]);
    assert_eq!(s.joints.dims(), vec![17, 3]);
    assert!(s.joints.value().data().iter().all(|&j| j == 0.5));
}

#[test]
fn joint_query_permutation_permutes_joint_outputs() {
    let (store, f) = fusion_with(&tiny_config(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut perm: Vec<usize> = (0..17).collect();
    for i in (1..17).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut permuted = store.clone();
    let q = store.get(f.queries);
    let mut rows: Vec<f64> = q.data()[..NUM_SMPL_TOKENS * q.cols()].to_vec();
    for &j in &perm {
        rows.extend_from_slice(q.row_slice(NUM_SMPL_TOKENS + j));
    }
    permuted.get_mut(f.queries).data_mut().copy_from_slice(&rows);
    let mem = random_mat(&mut rng, 4, 8, 1.0);
    let run = |s: &ParamStore| {
        let g = Graph::new();
        let p = Binder::new(&g, s, false);
        let (_, _, snap) = f.initial_regress(&p, g.constant(mem.clone()), p.var(f.encoder2d.pos));
        ((*snap.joints.value()).clone(), (*snap.beta.value()).clone())
    };
    let (j0, b0) = run(&store);
    let (j1, b1) = run(&permuted);
    for (r, &j) in perm.iter().enumerate() {
        for a in 0..3 {
            assert!((j1.get2(r, a) - j0.get2(j, a)).abs() < 1e-12);
        }
    }
    // the SMPL tokens see the joint tokens only as a set
    assert!(max_abs_diff(&b0, &b1) < 1e-12);
}

#[test]
fn single_key_decoder_layer_adds_the_value_projection() {
    let (mut store, f) = fusion_with(&tiny_config(), 10);
    let layer = f.initial[0];
    layer.self_attn.zero_output(&mut store);
    layer.mlp.fc2.zero(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mem = random_mat(&mut rng, 1, 8, 1.0);
    let pos = random_mat(&mut rng, 1, 8, 1.0);
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let tgt = p.var(f.queries);
    let out = layer.forward(&p, tgt, g.constant(mem.clone()), Some(g.constant(pos)));
    let proj = linear(&store, &layer.cross_attn.o, &linear(&store, &layer.cross_attn.v, &to_mat(&mem)));
    let want = add_row(&to_mat(store.get(f.queries)), &proj[0]);
    assert!(max_abs_diff(&out.tgt.value(), &from_mat(&want)) < 1e-12);
    assert!(out.cross_probs.data().iter().all(|&x| x == 1.0));
}

#[test]
fn trilinear_reproduces_every_cell_center() {
    let dims = [3, 2, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = random_mat(&mut rng, 24, 5, 1.0);
    let (zs, ys, xs) = (cell_centers(3), cell_centers(2), cell_centers(4));
    let mut pts = Vec::new();
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                pts.extend_from_slice(&[x, y, z]);
            }
        }
    }
    let out = sample_values(&grid, dims, &Tensor::from_vec(&[24, 3], pts));
    assert!(bits_equal(&out, &grid));
}

#[test]
fn trilinear_midpoint_along_x_is_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let grid = random_mat(&mut rng, 8, 3, 1.0);
    let out = sample_values(&grid, [2, 2, 2], &Tensor::row(&[0.5, 0.25, 0.25]));
    for c in 0..3 {
        assert!((out.get2(0, c) - 0.5 * (grid.get2(0, c) + grid.get2(1, c))).abs() < 1e-15);
    }
}

#[test]
fn trilinear_warps_depth_before_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let grid = random_mat(&mut rng, 8, 2, 1.0);
    let g = Graph::new();
    // with λ = 2 the depth sqrt(0.75) lands on the upper depth center
    let pts = g.constant(Tensor::row(&[0.25, 0.25, 0.75f64.sqrt()]));
    let out = trilinear_sample(g.constant(grid.clone()), [2, 2, 2], pts, g.constant(Tensor::scalar(2.0)));
    for c in 0..2 {
        assert!((out.value().get2(0, c) - grid.get2(4, c)).abs() < 1e-12);
    }
}

#[test]
fn trilinear_clamps_outside_the_center_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let grid = random_mat(&mut rng, 8, 2, 1.0);
    // x below the first center, y above the last, z below the first
    let out = sample_values(&grid, [2, 2, 2], &Tensor::row(&[0.0, 1.0, 0.1]));
    assert_eq!(out.row_slice(0), grid.row_slice(2));
}

#[test]
fn trilinear_gradients_through_grid_points_and_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..10 {
        let grid = random_tensor(&mut rng, &[12, 3], -1.0, 1.0);
        let pts = random_tensor(&mut rng, &[5, 3], 0.3, 0.7);
        let lam = Tensor::scalar(rng.random_range(1.2..3.0));
        let rep = grad_check_default(|_, v| trilinear_sample(v[0], [3, 2, 2], v[1], v[2]), &[grid, pts, lam]).unwrap();
        assert!(rep.passed(), "max rel error {}", rep.max_rel_error);
    }
}

#[test]
fn contribution_mask_marks_the_enclosing_corners() {
    let at_center = Tensor::from_vec(&[3, 3], [0.25, 0.25, 0.25].repeat(3));
    assert_eq!(contribution_mask([2, 2, 2], &at_center, 1.0).iter().filter(|&&m| m).count(), 1);
    let generic = Tensor::row(&[0.4, 0.6, 0.7]);
    assert_eq!(contribution_mask([2, 2, 2], &generic, 1.0).iter().filter(|&&m| m).count(), 8);
    let w = corner_weights([2, 2, 2], [0.4, 0.6, 0.7]);
    assert!((w.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn trilinear_is_linear_along_axis_segments(
        a in prop::array::uniform3(0.26f64..0.74),
        b in prop::array::uniform3(0.26f64..0.74),
        t in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        // inside one cell the map is multilinear, hence affine along any
        // segment parallel to an axis
        let grid = random_mat(&mut ChaCha8Rng::seed_from_u64(seed), 8, 4, 1.0);
        let axis = (seed % 3) as usize;
        let mut b2 = a;
        b2[axis] = b[axis];
        let mid: [f64; 3] = std::array::from_fn(|i| (1.0 - t) * a[i] + t * b2[i]);
        let pts = Tensor::from_vec(&[3, 3], [a, b2, mid].concat());
        let out = sample_values(&grid, [2, 2, 2], &pts);
        for c in 0..4 {
            let blend = (1.0 - t) * out.get2(0, c) + t * out.get2(1, c);
            prop_assert!((out.get2(2, c) - blend).abs() < 1e-10);
        }
    }
}

#[test]
fn zero_residuals_keep_every_snapshot() {
    let cfg = tiny_config();
    let mut model = Model::new(&cfg, toy_asset()).unwrap();
    model.fusion.zero_residuals(&mut model.store);
    let (image, j2d) = random_inputs(16);
    let snaps = model.predict(&image, &j2d);
    assert_eq!(snaps.len(), cfg.model.refine_layers + 1);
    for s in &snaps[1..] {
        assert_eq!(s, &snaps[0]);
    }
}

#[test]
fn refine_emits_one_snapshot_per_layer_plus_initial() {
    for layers in [0, 1, 3] {
        let mut cfg = tiny_config();
        cfg.model.refine_layers = layers;
        cfg.loss.contrast_round = None;
        let model = Model::new(&cfg, toy_asset()).unwrap();
        let g = Graph::new();
        let p = Binder::new(&g, &model.store, false);
        let (image, j2d) = random_inputs(17);
        let fwd = model.forward(&p, &image, &j2d);
        assert_eq!(fwd.fusion.snapshots.len(), layers + 1);
        assert_eq!(fwd.fusion.attention.len(), layers);
        assert_eq!(fwd.fusion.joint_features.len(), layers);
        for a in &fwd.fusion.attention {
            assert_eq!(a.dims(), &[model.fusion.num_queries(), 4 + 17]);
        }
    }
}

/// One refining layer over one 2D key without 3D keys: the update composed
/// by hand from the value projection and the residual MLPs.
#[test]
fn single_layer_single_key_refine_matches_composition() {
    let mut cfg = tiny_config();
    cfg.model.height = 1;
    cfg.model.width = 1;
    cfg.model.refine_layers = 1;
    let (mut store, fu) = fusion_with(&cfg, 18);
    let layer = fu.refine[0];
    layer.self_attn.zero_output(&mut store);
    layer.mlp.fc2.zero(&mut store);
    let r = fu.residuals[0];
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for m in [r.pose, r.shape, r.cam, r.joints] {
        randomize(&mut store, m.fc2.w, &mut rng, 0.3);
    }
    let mem = random_mat(&mut rng, 1, 8, 1.0);
    let g = Graph::new();
    let p = Binder::new(&g, &store, false);
    let memv = g.constant(mem.clone());
    let pos = p.var(fu.encoder2d.pos);
    let (tgt, hidden, first) = fu.initial_regress(&p, memv, pos);
    let lam = g.constant(Tensor::scalar(3.0));
    let out = fu.refine_from(&p, tgt, hidden, first, memv, pos, None, lam);

    let cross = linear(&store, &layer.cross_attn.o, &linear(&store, &layer.cross_attn.v, &to_mat(&mem)));
    let hd = ln_affine(&store, &layer.ln_out, &add_row(&to_mat(&tgt.value()), &cross[0]));
    let step = |m: &Mlp, x: &[f64], h: &[f64]| -> Vec<f64> {
        let d = mlp(&store, m, &vec![[x, h].concat()]);
        x.iter().zip(&d[0]).map(|(a, b)| a + b).collect()
    };
    let close = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
    let s = out.snapshots[1];
    assert!(close(s.latent.value().data(), &step(&r.pose, first.latent.value().data(), &hd[0])));
    assert!(close(s.beta.value().data(), &step(&r.shape, first.beta.value().data(), &hd[1])));
    let cam_raw = step(&r.cam, first.cam_raw.value().data(), &hd[2]);
    assert!(close(s.cam_raw.value().data(), &cam_raw));
    assert!((s.cam.value().data()[0] - cam_raw[0].exp()).abs() < 1e-12);
    let j0 = first.joints.value();
    for j in 0..17 {
        let want: Vec<f64> = step(&r.joints, j0.row_slice(j), &hd[NUM_SMPL_TOKENS + j])
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        assert!(close(s.joints.value().row_slice(j), &want));
    }
}

#[test]
fn pose_decoder_maps_zero_to_zero_and_embeds_the_identity() {
    let (mut store, fu) = fusion_with(&tiny_config(), 19);
    let g = Graph::new();
    {
        let p = Binder::new(&g, &store, false);
        let theta = fu.decode_pose_latent(&p, g.constant(Tensor::zeros(&[1, 6])));
        assert!(theta.value().data().iter().all(|&t| t == 0.0));
    }
    let w = store.get_mut(fu.pose_decoder.w).data_mut();
    w.fill(0.0);
    for i in 0..6 {
        w[i * 18 + i] = 1.0;
    }
    zero_param(&mut store, fu.pose_decoder.b);
    let p = Binder::new(&g, &store, false);
    let latent = Tensor::row(&[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]);
    let theta = fu.decode_pose_latent(&p, g.constant(latent.clone()));
    assert_eq!(&theta.value().data()[..6], latent.data());
    assert!(theta.value().data()[6..].iter().all(|&t| t == 0.0));
}

#[test]
fn latent_to_projected_joints_passes_grad_check() {
    let (store, fu) = fusion_with(&tiny_config(), 20);
    let asset = toy_asset();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..3 {
        let latent = random_tensor(&mut rng, &[1, 6], -0.5, 0.5);
        let beta = random_tensor(&mut rng, &[1, 10], -0.5, 0.5);
        let cam = Tensor::row(&[1.1, 0.05, -0.02]);
        let e = grad_check_with_params(&store, &[fu.pose_decoder.w], &[latent, beta, cam], 12, |p, x| {
            let g = p.graph();
            let theta = fu.decode_pose_latent(p, x[0]);
            let verts = forward_mesh(g, &asset, theta, x[1]);
            project(regress_joints(verts, g.constant(asset.j_eval.clone())).unwrap(), x[2])
        });
        assert!(e < 1e-4, "rel error {e}");
    }
}

#[test]
fn attention_export_rows_sum_to_one_and_round_trip() {
    let model = Model::new(&tiny_config(), toy_asset()).unwrap();
    let g = Graph::new();
    let p = Binder::new(&g, &model.store, false);
    let (image, j2d) = random_inputs(21);
    let fwd = model.forward(&p, &image, &j2d);
    for a in &fwd.fusion.attention {
        for r in 0..a.rows() {
            assert!((a.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("att.jtrk");
    attention_archive(&fwd.fusion.attention).write(&path).unwrap();
    let back = Archive::read(&path).unwrap();
    for (l, a) in fwd.fusion.attention.iter().enumerate() {
        assert!(bits_equal(back.get(&format!("layer{l}.attn")).unwrap(), a));
    }
}

#[test]
fn uniform_attention_mass_split() {
    let probs = Tensor::full(&[20, 81], 1.0 / 81.0);
    let (a, b) = mass_split(&probs, 64);
    assert!((a - 64.0 / 81.0).abs() < 1e-12);
    assert!((b - 17.0 / 81.0).abs() < 1e-12);
    assert_eq!(format!("{a:.3}/{b:.3}"), "0.790/0.210");
}

#[test]
fn sampling_mode_uses_one_key_per_joint() {
    let mut cfg = tiny_config();
    cfg.model.feat2d = Feat2dMode::Sampling;
    let model = Model::new(&cfg, toy_asset()).unwrap();
    let g = Graph::new();
    let p = Binder::new(&g, &model.store, false);
    let (image, j2d) = random_inputs(22);
    assert_eq!(model.forward(&p, &image, &j2d).fusion.keys_2d, 17);
}

#[test]
fn joint_sampling_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let grid = random_mat(&mut rng, 8, 4, 1.0);
    let pts = random_tensor(&mut rng, &[17, 3], 0.0, 1.0);
    let perm: Vec<usize> = (0..17).rev().collect();
    let permuted = Tensor::from_vec(&[17, 3], perm.iter().flat_map(|&i| pts.row_slice(i).to_vec()).collect());
    let g = Graph::new();
    let lam = g.constant(Tensor::scalar(3.0));
    let a = trilinear_sample(g.constant(grid.clone()), [2, 2, 2], g.constant(pts), lam).value();
    let b = trilinear_sample(g.constant(grid), [2, 2, 2], g.constant(permuted), lam).value();
    for (r, &i) in perm.iter().enumerate() {
        assert_eq!(b.row_slice(r), a.row_slice(i));
    }
}
