//! Central-difference checks of every differentiable path against the
//! 64-bit reference forwards in the parent module.

use fuselab_core::detector::{detection_loss, GradRequest, ModelInputs, Targets, NUM_CLASSES};
use fuselab_core::lidarmap::{densify, maps_backward, project_points, MapGrad};
use fuselab_core::ndlab::{Tape, Tensor};
use fuselab_core::rng::named_rng;
use fuselab_core::{CameraIntrinsics, Detector, DetectorConfig, FusionMode};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero so leaky kinks are not probed by accident.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.05..2.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn f32s(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

fn f64s(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

fn tensor(shape: &[usize], x: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), f32s(x)).unwrap()
}

/// The check runs at the f32-rounded point so both sides see the same input.
fn rounded(x: Vec<f64>) -> Vec<f64> {
    x.iter().map(|&v| v as f32 as f64).collect()
}

struct Scalarizer {
    target: Vec<f64>,
    weight: Vec<f64>,
}

impl Scalarizer {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        Self {
            target: rounded(uniform(rng, n, 0.0, 1.0)),
            weight: rounded(uniform(rng, n, 0.2, 1.5)),
        }
    }

    fn reference(&self, y: &[f64]) -> f64 {
        bce(y, &self.target, &self.weight)
    }

    fn record(&self, tape: &mut Tape, y: fuselab_core::ndlab::Var) -> fuselab_core::ndlab::Var {
        tape.bce_with_logits(y, f32s(&self.target), f32s(&self.weight)).unwrap()
    }
}

/// One check per tape primitive, each scalarized through a weighted BCE
/// (which is itself checked directly).
pub fn primitive_checks(seed: u64) -> Vec<GradCheck> {
    let mut rng = named_rng(seed, "primitives");
    let mut out = Vec::new();

    // conv2d: input, weight and bias, stride 1 and 2, kernels 1 and 3.
    for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
        let (c, h, w, o) = (3, 7, 6, 4);
        let x = rounded(uniform(&mut rng, c * h * w, -1.0, 1.0));
        let wt = rounded(uniform(&mut rng, o * c * k * k, -0.5, 0.5));
        let b = rounded(uniform(&mut rng, o, -0.5, 0.5));
        let mut tape = Tape::new();
        let xv = tape.leaf(tensor(&[c, h, w], &x), true);
        let wv = tape.leaf(tensor(&[o, c, k, k], &wt), true);
        let bv = tape.leaf(tensor(&[o], &b), true);
        let y = tape.conv2d(xv, wv, Some(bv), stride).unwrap();
        let n = tape.value(y).len();
        let s = Scalarizer::new(&mut rng, n);
        let root = s.record(&mut tape, y);
        let g = tape.backward(root).unwrap();
        let f = |x: &[f64], wt: &[f64], b: &[f64]| s.reference(&conv2d(x, (c, h, w), wt, o, k, Some(b), stride).0);
        let tag = format!("conv2d k{k} s{stride}");
        out.push(check_coords(&format!("{tag} input"), &x, &f64s(g.data(xv).unwrap()), 0..x.len(), |p, _| f(p, &wt, &b)));
        out.push(check_coords(&format!("{tag} weight"), &wt, &f64s(g.data(wv).unwrap()), 0..wt.len(), |p, _| f(&x, p, &b)));
        out.push(check_coords(&format!("{tag} bias"), &b, &f64s(g.data(bv).unwrap()), 0..b.len(), |p, _| f(&x, &wt, p)));
    }

    // elementwise unary ops
    let shape = [2, 3, 4];
    let n = 24;
    for op in ["leaky_relu", "sigmoid", "scale"] {
        let x = rounded(off_zero(&mut rng, n));
        let s = Scalarizer::new(&mut rng, n);
        let mut tape = Tape::new();
        let xv = tape.leaf(tensor(&shape, &x), true);
        let y = match op {
            "leaky_relu" => tape.leaky_relu(xv).unwrap(),
            "sigmoid" => tape.sigmoid(xv).unwrap(),
            _ => tape.scale(xv, -1.75).unwrap(),
        };
        let root = s.record(&mut tape, y);
        let g = tape.backward(root).unwrap();
        let reference = |p: &[f64], pat: &mut Pattern| {
            let y: Vec<f64> = match op {
                "leaky_relu" => {
                    let mut y = p.to_vec();
                    leaky(&mut y, pat);
                    y
                }
                "sigmoid" => p.iter().map(|&v| sigmoid(v)).collect(),
                _ => p.iter().map(|&v| -1.75 * v).collect(),
            };
            s.reference(&y)
        };
        out.push(check_coords(op, &x, &f64s(g.data(xv).unwrap()), 0..n, reference));
    }

    // add
    {
        let a = rounded(uniform(&mut rng, n, -2.0, 2.0));
        let b = rounded(uniform(&mut rng, n, -2.0, 2.0));
        let s = Scalarizer::new(&mut rng, n);
        let mut tape = Tape::new();
        let av = tape.leaf(tensor(&shape, &a), true);
        let bv = tape.leaf(tensor(&shape, &b), true);
        let y = tape.add(av, bv).unwrap();
        let root = s.record(&mut tape, y);
        let g = tape.backward(root).unwrap();
        let f = |a: &[f64], b: &[f64]| s.reference(&a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>());
        out.push(check_coords("add lhs", &a, &f64s(g.data(av).unwrap()), 0..n, |p, _| f(p, &b)));
        out.push(check_coords("add rhs", &b, &f64s(g.data(bv).unwrap()), 0..n, |p, _| f(&a, p)));
    }

    // concat_channels and slice_channels
    {
        let (h, w) = (3, 2);
        let a = rounded(uniform(&mut rng, 2 * h * w, -2.0, 2.0));
        let b = rounded(uniform(&mut rng, 3 * h * w, -2.0, 2.0));
        let s = Scalarizer::new(&mut rng, 5 * h * w);
        let mut tape = Tape::new();
        let av = tape.leaf(tensor(&[2, h, w], &a), true);
        let bv = tape.leaf(tensor(&[3, h, w], &b), true);
        let y = tape.concat_channels(&[av, bv]).unwrap();
        let root = s.record(&mut tape, y);
        let g = tape.backward(root).unwrap();
        let f = |a: &[f64], b: &[f64]| s.reference(&a.iter().chain(b).copied().collect::<Vec<_>>());
        out.push(check_coords("concat first", &a, &f64s(g.data(av).unwrap()), 0..a.len(), |p, _| f(p, &b)));
        out.push(check_coords("concat second", &b, &f64s(g.data(bv).unwrap()), 0..b.len(), |p, _| f(&a, p)));

        let s = Scalarizer::new(&mut rng, 2 * h * w);
        let mut tape = Tape::new();
        let bv = tape.leaf(tensor(&[3, h, w], &b), true);
        let y = tape.slice_channels(bv, 1, 3).unwrap();
        let root = s.record(&mut tape, y);
        let g = tape.backward(root).unwrap();
        out.push(check_coords("slice_channels", &b, &f64s(g.data(bv).unwrap()), 0..b.len(), |p, _| {
            s.reference(&p[h * w..])
        }));
    }

    // sum, reduced through a scale so the root is not the identity
    {
        let x = rounded(uniform(&mut rng, n, -2.0, 2.0));
        let mut tape = Tape::new();
        let xv = tape.leaf(tensor(&shape, &x), true);
        let y = tape.sum(xv).unwrap();
        let y = tape.scale(y, 0.3).unwrap();
        let s = Scalarizer::new(&mut rng, 1);
        let root = s.record(&mut tape, y);
        let g = tape.backward(root).unwrap();
        out.push(check_coords("sum", &x, &f64s(g.data(xv).unwrap()), 0..n, |p, _| {
            s.reference(&[0.3 * p.iter().sum::<f64>()])
        }));
    }

    // the three losses, directly on a leaf
    {
        let x = rounded(uniform(&mut rng, n, -4.0, 4.0));
        let s = Scalarizer::new(&mut rng, n);
        let mut tape = Tape::new();
        let xv = tape.leaf(tensor(&shape, &x), true);
        let root = s.record(&mut tape, xv);
        let g = tape.backward(root).unwrap();
        out.push(check_coords("bce_with_logits", &x, &f64s(g.data(xv).unwrap()), 0..n, |p, _| s.reference(p)));
    }
    for beta in [1.0, 0.1] {
        let x = rounded(uniform(&mut rng, n, -3.0, 3.0));
        let t = rounded(uniform(&mut rng, n, -3.0, 3.0));
        let w = rounded(uniform(&mut rng, n, 0.2, 1.5));
        let mut tape = Tape::new();
        let xv = tape.leaf(tensor(&shape, &x), true);
        let root = tape.smooth_l1(xv, f32s(&t), f32s(&w), beta as f32).unwrap();
        let g = tape.backward(root).unwrap();
        out.push(check_coords("smooth_l1", &x, &f64s(g.data(xv).unwrap()), 0..n, |p, pat| {
            smooth_l1(p, &t, &w, beta, pat)
        }));
    }
    {
        let (k, cells) = (NUM_CLASSES, 8);
        let x = rounded(uniform(&mut rng, k * cells, -3.0, 3.0));
        let t: Vec<usize> = (0..cells).map(|_| rng.gen_range(0..k)).collect();
        let w = rounded(uniform(&mut rng, cells, 0.0, 1.5));
        let mut tape = Tape::new();
        let xv = tape.leaf(tensor(&[k, 2, 4], &x), true);
        let root = tape.softmax_cross_entropy(xv, t.clone(), f32s(&w)).unwrap();
        let g = tape.backward(root).unwrap();
        out.push(check_coords("softmax_cross_entropy", &x, &f64s(g.data(xv).unwrap()), 0..x.len(), |p, _| {
            softmax_ce(p, k, &t, &w)
        }));
    }
    out
}

/// Random targets with roughly a quarter of the cells positive.
pub fn random_targets(rng: &mut ChaCha8Rng, gh: usize, gw: usize, h: usize, w: usize) -> Targets {
    let cells = gh * gw;
    let mut owner = vec![None; cells];
    let mut class = vec![0; cells];
    let mut boxes = vec![[0.0f32; 4]; cells];
    let mut next = 0;
    for c in 0..cells {
        if rng.gen_bool(0.25) || (c == cells - 1 && next == 0) {
            owner[c] = Some(next);
            next += 1;
            class[c] = rng.gen_range(0..NUM_CLASSES);
            boxes[c] = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(-3.0..-0.5),
                rng.gen_range(-3.0..-0.5),
            ];
        }
    }
    Targets {
        grid_h: gh,
        grid_w: gw,
        image_h: h,
        image_w: w,
        owner,
        class,
        boxes,
        dropped: 0,
    }
}

/// Parameter and input gradients of the full detection loss.
///
/// `sample = None` checks every parameter scalar; otherwise that many
/// coordinates are drawn per parameter tensor (all of them if fewer).
pub fn detector_checks(config: DetectorConfig, seed: u64, sample_per_tensor: Option<usize>, input_coords: usize) -> Vec<GradCheck> {
    let fusion = config.fusion;
    let (h, w) = (config.image_height, config.image_width);
    let (gh, gw) = config.grid();
    let model = Detector::init(config, seed).unwrap();
    let mut rng = named_rng(seed, "detector-check");
    let rgb = rounded(uniform(&mut rng, 3 * h * w, 0.0, 1.0));
    let lidar = rounded(uniform(&mut rng, 2 * h * w, -1.5, 1.5));
    let targets = random_targets(&mut rng, gh, gw, h, w);

    let rgb_t = tensor(&[3, h, w], &rgb);
    let lidar_t = tensor(&[2, h, w], &lidar);
    let mut tape = Tape::new();
    let graph = model
        .graph(
            &mut tape,
            ModelInputs {
                rgb: fusion.uses_rgb().then_some(&rgb_t),
                lidar: fusion.uses_lidar().then_some(&lidar_t),
            },
            GradRequest {
                params: true,
                rgb: fusion.uses_rgb(),
                lidar: fusion.uses_lidar(),
            },
        )
        .unwrap();
    let loss = detection_loss(&mut tape, graph.pred, &targets).unwrap();
    let grads = tape.backward(loss.total).unwrap();

    let base = Params64::from_store(&model.params);
    let eval = |p: &Params64, rgb: &[f64], lidar: &[f64], pat: &mut Pattern| {
        let (grid, _) = detector_forward(p, fusion, rgb, lidar, h, w, pat);
        detection_loss_ref(&grid, &targets, pat)
    };

    // The f32 and f64 forwards must agree before gradients mean anything.
    let mut pat = Pattern::default();
    let reference = eval(&base, &rgb, &lidar, &mut pat);
    let got = tape.value(loss.total).item() as f64;
    assert!(
        (reference - got).abs() <= 1e-4 * reference.abs().max(1.0),
        "{} forward mismatch: f64 {reference} vs f32 {got}",
        fusion.name()
    );

    let mut out = Vec::new();
    for (pi, var) in graph.params.iter().enumerate() {
        let n = base.values[pi].len();
        let coords: Vec<usize> = match sample_per_tensor {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let autodiff = f64s(grads.data(*var).expect("every parameter reaches the loss"));
        let x = base.values[pi].clone();
        let mut p = base.clone();
        out.push(check_coords(
            &format!("{} {}", fusion.name(), base.names[pi]),
            &x,
            &autodiff,
            coords,
            |probe, pat| {
                p.values[pi].copy_from_slice(probe);
                eval(&p, &rgb, &lidar, pat)
            },
        ));
    }
    if let Some(v) = graph.rgb {
        let coords = sample(&mut rng, rgb.len(), input_coords.min(rgb.len())).into_vec();
        out.push(check_coords(
            &format!("{} rgb input", fusion.name()),
            &rgb,
            &f64s(grads.data(v).unwrap()),
            coords,
            |probe, pat| eval(&base, probe, &lidar, pat),
        ));
    }
    if let Some(v) = graph.lidar {
        let coords = sample(&mut rng, lidar.len(), input_coords.min(lidar.len())).into_vec();
        out.push(check_coords(
            &format!("{} lidar input", fusion.name()),
            &lidar,
            &f64s(grads.data(v).unwrap()),
            coords,
            |probe, pat| eval(&base, &rgb, probe, pat),
        ));
    }
    out
}

fn detection_loss_ref(grid: &[f64], t: &Targets, pat: &mut Pattern) -> f64 {
    detection_loss_f64(grid, t, pat)[0]
}

/// Narrow network at 16×16 so every parameter scalar can be probed.
pub fn narrow_config(fusion: FusionMode) -> DetectorConfig {
    DetectorConfig {
        fusion,
        backbone_widths: [4, 8, 8, 8],
        branch_widths: [4, 8, 8],
        fuse_width: 8,
        image_height: 16,
        image_width: 16,
    }
}

/// Default widths on a 32×32 input, for sampled probes.
pub fn wide_config(fusion: FusionMode) -> DetectorConfig {
    DetectorConfig {
        image_height: 32,
        image_width: 32,
        ..DetectorConfig::with_fusion(fusion)
    }
}

/// Point-coordinate gradient of a weighted sum of the raw maps with the
/// pixel-to-point assignment held fixed.
pub fn maps_backward_check(seed: u64) -> GradCheck {
    let mut rng = named_rng(seed, "maps-backward");
    let intr = CameraIntrinsics {
        fx: 40.0,
        fy: 40.0,
        cx: 12.0,
        cy: 8.0,
        width: 24,
        height: 16,
    };
    let cloud: Vec<[f32; 3]> = (0..30)
        .map(|_| {
            let z: f32 = rng.gen_range(4.0..20.0);
            let u: f32 = rng.gen_range(0.5..23.5);
            let v: f32 = rng.gen_range(0.5..15.5);
            [(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z]
        })
        .collect();
    let hits = project_points(&cloud, &intr);
    let maps = densify(&hits, intr.height, intr.width).unwrap();
    let n = intr.pixels();
    let gd: Vec<f64> = rounded(uniform(&mut rng, n, -1.0, 1.0));
    let gr: Vec<f64> = rounded(uniform(&mut rng, n, -1.0, 1.0));
    let grad = MapGrad {
        depth: f32s(&gd),
        distance: f32s(&gr),
    };
    let autodiff: Vec<f64> = maps_backward(&grad, &maps, &cloud, &intr)
        .unwrap()
        .iter()
        .flat_map(|g| g.iter().map(|&v| v as f64))
        .collect();

    // f64 maps under the frozen assignment: a pixel's depth is its source
    // point's z, its distance runs from the pixel center to the source's
    // projection (zero at pixels the source hits directly).
    let (fx, fy, cx, cy) = (intr.fx as f64, intr.fy as f64, intr.cx as f64, intr.cy as f64);
    let x0: Vec<f64> = cloud.iter().flat_map(|p| p.iter().map(|&v| v as f64)).collect();
    let assign = maps.assign.clone();
    let direct = maps.direct.clone();
    let width = intr.width;
    let f = |x: &[f64], _: &mut Pattern| {
        let mut total = 0.0;
        for p in 0..n {
            let i = assign[p] as usize;
            let (px, py, pz) = (x[3 * i], x[3 * i + 1], x[3 * i + 2]);
            total += gd[p] * pz;
            if !direct[p] {
                let u = fx * px / pz + cx;
                let v = fy * py / pz + cy;
                let du = u - ((p % width) as f64 + 0.5);
                let dv = v - ((p / width) as f64 + 0.5);
                total += gr[p] * (du * du + dv * dv).sqrt();
            }
        }
        total
    };
    check_coords("maps_backward", &x0, &autodiff, 0..x0.len(), f)
}
