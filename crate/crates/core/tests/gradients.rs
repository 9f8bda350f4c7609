mod common;

use common::*;
use duda_core::autograd::{Graph, ParamId, ParamStore};
use duda_core::detector::{
    assign_targets, detection_loss_node, network_input, Detector, DetectorConfig, RawPredictions,
};
use duda_core::nn::Grad;
use duda_core::style_align::{GatePlacement, StyleBranch};
use duda_core::weather_contrast::Projector;
use duda_core::{BoundingBox, Tensor};
use rand::Rng;

const TOL: f64 = 1e-4;

fn randomize(store: &mut ParamStore, ids: &[ParamId], rng: &mut impl Rng, scale: f64) {
    for &id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = random_tensor(rng, &shape, scale);
    }
}

fn check_params(store: &ParamStore, ids: &[ParamId], analytic: &[Option<Tensor>], f: impl Fn(&ParamStore) -> f64) {
    check_params_step(store, ids, analytic, f, SMOOTH_STEP)
}

fn check_params_step(
    store: &ParamStore,
    ids: &[ParamId],
    analytic: &[Option<Tensor>],
    f: impl Fn(&ParamStore) -> f64,
    h: f64,
) {
    for &id in ids {
        let a = analytic[id.0]
            .as_ref()
            .unwrap_or_else(|| panic!("no gradient for {}", store.name(id)));
        let n = numeric_param_grad_step(store, id, &f, h);
        let err = max_rel_err(a.data(), &n);
        assert!(err <= TOL, "{}: relative error {err}", store.name(id));
    }
}

fn style_fixture(placement: GatePlacement) -> (ParamStore, StyleBranch) {
    let mut store = ParamStore::new();
    let mut r = rng(11);
    let branch = StyleBranch::new(&mut store, 8, 4, 8, placement, &mut r);
    let ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &ids, &mut r, 0.6);
    (store, branch)
}

fn attention_ids(b: &StyleBranch) -> Vec<ParamId> {
    vec![
        b.attn_hidden.weight,
        b.attn_hidden.bias,
        b.attn_out.weight,
        b.attn_out.bias,
    ]
}

fn disc_ids(b: &StyleBranch) -> Vec<ParamId> {
    vec![
        b.disc_hidden.weight,
        b.disc_hidden.bias,
        b.disc_out.weight,
        b.disc_out.bias,
    ]
}

#[test]
fn attention_gradients_match_finite_differences() {
    let (store, branch) = style_fixture(GatePlacement::default());
    let mut r = rng(5);
    let mut stats = random_tensor(&mut r, &[3, 16], 1.0);
    for row in stats.data_mut().chunks_mut(16) {
        row[8..].iter_mut().for_each(|v| *v = v.abs() + 0.1);
    }
    let eval = |store: &ParamStore, s: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(s.clone());
        let w = branch.attention(&mut g, store, x, Grad::Freeze);
        g.value(w).sum()
    };
    let mut g = Graph::new();
    let x = g.tracked_input(stats.clone());
    let w = branch.attention(&mut g, &store, x, Grad::Track);
    assert!(g.value(w).data().iter().all(|&v| v > 0.0 && v < 1.0));
    let root = g.sum(w);
    let grads = g.backward(root);
    check_params(&store, &attention_ids(&branch), &grads.param_grads(&store), |s| {
        eval(s, &stats)
    });
    let n = numeric_grad(|t| eval(&store, t), &stats);
    assert!(max_rel_err(grads.get(x).unwrap().data(), &n) <= TOL);
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let (store, branch) = style_fixture(GatePlacement::default());
    let mut r = rng(6);
    let gated = random_tensor(&mut r, &[4, 16], 1.0);
    let weights = random_tensor(&mut r, &[4, 1], 1.0);
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(x.clone());
        let z = branch.discriminate(&mut g, store, x, Grad::Freeze);
        g.value(z)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut g = Graph::new();
    let x = g.tracked_input(gated.clone());
    let z = branch.discriminate(&mut g, &store, x, Grad::Track);
    let wv = g.input(weights.clone());
    let prod = g.mul(z, wv);
    let root = g.sum(prod);
    let grads = g.backward(root);
    check_params(&store, &disc_ids(&branch), &grads.param_grads(&store), |s| {
        eval(s, &gated)
    });
    let n = numeric_grad(|t| eval(&store, t), &gated);
    assert!(max_rel_err(grads.get(x).unwrap().data(), &n) <= TOL);
}

fn feature_pair(seed: u64) -> (Tensor, Tensor) {
    let mut r = rng(seed);
    (
        random_tensor(&mut r, &[3, 8, 3, 3], 1.0),
        random_tensor(&mut r, &[2, 8, 3, 3], 1.5),
    )
}

/// With `λ = −1` the reversal layer is the identity in both directions, so
/// the whole style loss must match finite differences.
#[test]
fn style_loss_without_reversal_matches_finite_differences() {
    for placement in [GatePlacement::FeatureSide, GatePlacement::DiscriminatorSide] {
        let (store, branch) = style_fixture(placement);
        let (fs, ft) = feature_pair(7);
        let eval = |store: &ParamStore, a: &Tensor, b: &Tensor| {
            let mut g = Graph::new();
            let (s, t) = (g.input(a.clone()), g.input(b.clone()));
            let (l, _) = branch.loss_on_tape(&mut g, store, s, t, -1.0, Grad::Freeze).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new();
        let s = g.tracked_input(fs.clone());
        let t = g.tracked_input(ft.clone());
        let (l, _) = branch.loss_on_tape(&mut g, &store, s, t, -1.0, Grad::Track).unwrap();
        let grads = g.backward(l);
        let ids: Vec<ParamId> = store.ids().collect();
        check_params(&store, &ids, &grads.param_grads(&store), |p| eval(p, &fs, &ft));
        let ns = numeric_grad(|x| eval(&store, x, &ft), &fs);
        let nt = numeric_grad(|x| eval(&store, &fs, x), &ft);
        assert!(max_rel_err(grads.get(s).unwrap().data(), &ns) <= TOL, "{placement:?}");
        assert!(max_rel_err(grads.get(t).unwrap().data(), &nt) <= TOL, "{placement:?}");
    }
}

#[test]
fn projector_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut r = rng(12);
    let proj = Projector::new(&mut store, 8, 6, 4, &mut r);
    // nonzero biases keep rows away from the kink of the normalization at 0
    let ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &ids, &mut r, 0.8);
    let x0 = random_tensor(&mut r, &[3, 8], 1.0);
    let weights = random_tensor(&mut r, &[3, 4], 1.0);
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(x.clone());
        let z = proj.forward(&mut g, store, x, Grad::Freeze);
        g.value(z)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut g = Graph::new();
    let x = g.tracked_input(x0.clone());
    let z = proj.forward(&mut g, &store, x, Grad::Track);
    for row in 0..3 {
        let n: f64 = g.value(z).row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-6);
    }
    let wv = g.input(weights.clone());
    let prod = g.mul(z, wv);
    let root = g.sum(prod);
    let grads = g.backward(root);
    check_params(&store, &ids, &grads.param_grads(&store), |s| eval(s, &x0));
    let n = numeric_grad(|t| eval(&store, t), &x0);
    assert!(max_rel_err(grads.get(x).unwrap().data(), &n) <= TOL);
}

fn tiny_detector() -> (ParamStore, Detector) {
    let mut store = ParamStore::new();
    let mut r = rng(13);
    let cfg = DetectorConfig {
        num_classes: 2,
        widths: vec![3, 4],
        strides: vec![2, 2],
        head_hidden: 5,
        objectness_prior: -1.0,
    };
    let det = Detector::new(&mut store, cfg, &mut r).unwrap();
    let ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &ids, &mut r, 0.5);
    assert!(store.numel() <= 1000);
    (store, det)
}

#[test]
fn backbone_and_head_gradients_match_finite_differences() {
    let (store, det) = tiny_detector();
    let mut r = rng(14);
    let x0 = random_tensor(&mut r, &[2, 3, 8, 8], 0.5);
    let wf = random_tensor(&mut r, &[2, 4, 2, 2], 1.0);
    let wh = random_tensor(&mut r, &[2, 7, 2, 2], 1.0);
    let dot = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let eval = |store: &ParamStore, x: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(x.clone());
        let f = det.backbone(&mut g, store, x, Grad::Freeze);
        let h = det.head(&mut g, store, f, Grad::Freeze);
        dot(g.value(f), &wf) + dot(g.value(h), &wh)
    };
    let mut g = Graph::new();
    let x = g.tracked_input(x0.clone());
    let f = det.backbone(&mut g, &store, x, Grad::Track);
    let h = det.head(&mut g, &store, f, Grad::Track);
    let (a, b) = (g.input(wf.clone()), g.input(wh.clone()));
    let (pf, ph) = (g.mul(f, a), g.mul(h, b));
    let (sf, sh) = (g.sum(pf), g.sum(ph));
    let root = g.combine(&[(sf, 1.0), (sh, 1.0)]);
    let grads = g.backward(root);
    let ids: Vec<ParamId> = store.ids().collect();
    check_params_step(&store, &ids, &grads.param_grads(&store), |s| eval(s, &x0), KINK_STEP);
    let n = numeric_grad_step(|t| eval(&store, t), &x0, KINK_STEP);
    assert!(max_rel_err(grads.get(x).unwrap().data(), &n) <= TOL);
}

#[test]
fn detection_loss_gradients_reach_head_weights() {
    let (store, det) = tiny_detector();
    let mut r = rng(15);
    let imgs = [random_image(&mut r, 16, 16), random_image(&mut r, 16, 16)];
    let boxes = [
        vec![BoundingBox::new(1.0, 2.0, 11.0, 12.0, 0)],
        vec![
            BoundingBox::new(4.0, 0.0, 16.0, 9.0, 1),
            BoundingBox::new(0.0, 8.0, 7.0, 16.0, 0),
        ],
    ];
    let targets: Vec<_> = boxes.iter().map(|b| assign_targets(b, (4, 4), 4)).collect();
    let input = network_input(&[&imgs[0], &imgs[1]]);
    let run = |store: &ParamStore, grad: Grad| {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let f = det.backbone(&mut g, store, x, grad);
        let h = det.head(&mut g, store, f, grad);
        let preds = RawPredictions::new(g.value(h).clone(), 2, 4, (16, 16)).unwrap();
        let (l, _) = detection_loss_node(&mut g, h, &preds, &targets).unwrap();
        (g, l)
    };
    let (g, l) = run(&store, Grad::Track);
    let grads = g.backward(l).param_grads(&store);
    let ids = [det.head_out.weight, det.head_out.bias, det.head_hidden.weight];
    let loss = |s: &ParamStore| {
        let (g, l) = run(s, Grad::Freeze);
        g.value(l).item()
    };
    check_params_step(&store, &ids, &grads, loss, KINK_STEP);
}

#[test]
fn grl_forward_is_identity_and_backward_is_exact() {
    let mut r = rng(16);
    let x0 = random_tensor(&mut r, &[5, 7], 3.0);
    let up = random_tensor(&mut r, &[5, 7], 2.0);
    for lambda in [1.5, 0.0, 0.1, 2.0 / 3.0] {
        let mut g = Graph::new();
        let x = g.tracked_input(x0.clone());
        let y = g.grl(x, lambda);
        assert_eq!(g.value(y), &x0);
        let u = g.input(up.clone());
        let p = g.mul(y, u);
        let s = g.sum(p);
        let grads = g.backward(s);
        let got = grads.get(x).unwrap();
        for (gv, uv) in got.data().iter().zip(up.data()) {
            assert_eq!(*gv, -lambda * uv);
        }
        if lambda == 0.0 {
            assert!(got.data().iter().all(|&v| v == 0.0));
        }
    }
}

fn style_grads_through_backbone(lambda: f64) -> (Vec<Option<Tensor>>, StyleBranch, Detector) {
    let (mut store, det) = tiny_detector();
    let mut r = rng(17);
    let branch = StyleBranch::new(&mut store, 4, 2, 6, GatePlacement::default(), &mut r);
    let ids: Vec<ParamId> = store.ids().collect();
    randomize(&mut store, &ids[ids.len() - 8..], &mut r, 0.7);
    let xs = random_tensor(&mut r, &[2, 3, 16, 16], 0.5);
    let xt = random_tensor(&mut r, &[3, 3, 16, 16], 0.3);
    let mut g = Graph::new();
    let (s, t) = (g.input(xs), g.input(xt));
    let fs = det.backbone(&mut g, &store, s, Grad::Track);
    let ft = det.backbone(&mut g, &store, t, Grad::Track);
    let (l, _) = branch
        .loss_on_tape(&mut g, &store, fs, ft, lambda, Grad::Track)
        .unwrap();
    (g.backward(l).param_grads(&store), branch, det)
}

#[test]
fn reversal_scales_backbone_gradient_exactly() {
    let (reversed, _, det) = style_grads_through_backbone(0.5);
    let (plain, _, _) = style_grads_through_backbone(-1.0);
    let backbone: Vec<usize> = det.blocks.iter().flat_map(|b| [b.weight.0, b.bias.0]).collect();
    for i in backbone {
        let (a, b) = (reversed[i].as_ref().unwrap(), plain[i].as_ref().unwrap());
        assert!(b.data().iter().any(|&v| v != 0.0));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, -0.5 * y);
        }
    }
}

#[test]
fn zero_lambda_blocks_feature_gradient_only() {
    let (grads, branch, det) = style_grads_through_backbone(0.0);
    for b in &det.blocks {
        for id in [b.weight, b.bias] {
            assert!(grads[id.0].as_ref().is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
        }
    }
    let d = grads[branch.disc_out.weight.0].as_ref().unwrap();
    assert!(d.data().iter().any(|&v| v != 0.0));
}
