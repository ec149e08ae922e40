use dynframe::autodiff::Tensor;
use dynframe::crystal::CrystalStructure;
use dynframe::features::GbfConfig;
use dynframe::frames::FrameMethod;
use dynframe::model::{ModelConfig, ParamStore};
use nalgebra::{Matrix3, Vector3};

use crate::eigen::jacobi_eigen;
use crate::images::{brute_force_images, OracleImage};

/// Radius of the fixed `exp(-r²)` neighborhood behind static local frames.
const STATIC_RADIUS: f64 = 6.0;

struct Dense<'a> {
    t: &'a Tensor,
    cols: usize,
}

impl<'a> Dense<'a> {
    fn new(params: &'a ParamStore, name: &str) -> Self {
        let t = params.get(name).unwrap_or_else(|_| panic!("parameter {name} missing"));
        let cols = *t.shape().last().expect("non-scalar parameter");
        Dense { t, cols }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.t.data()[r * self.cols + c]
    }

    fn times(&self, x: &[f64]) -> Vec<f64> {
        (0..self.cols)
            .map(|c| x.iter().enumerate().map(|(r, v)| v * self.at(r, c)).sum())
            .collect()
    }
}

fn gaussians(x: f64, cfg: &GbfConfig) -> Vec<f64> {
    let spacing = (cfg.max - cfg.min) / (cfg.count as f64 - 1.0);
    let width = cfg.width_scale * spacing;
    (0..cfg.count)
        .map(|k| {
            let mu = cfg.min + spacing * k as f64;
            (-(x - mu).powi(2) / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Relative closeness at which two scores, or two key components, count as
/// equal. Exact ties come from symmetry-related images.
const TIE: f64 = 1e-10;

/// Key order with components compared up to [`TIE`].
fn key_order(a: &Vector3<f64>, b: &Vector3<f64>) -> std::cmp::Ordering {
    (0..3)
        .find(|&k| (a[k] - b[k]).abs() > TIE * (1.0 + a[k].abs().max(b[k].abs())))
        .map_or(std::cmp::Ordering::Equal, |k| a[k].total_cmp(&b[k]))
}

/// Highest score; among near-equal scores the largest lattice key wins, then
/// the earliest entry.
fn argmax(scores: &[f64], nb: &Neighborhood) -> usize {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pick: Option<usize> = None;
    for k in 0..scores.len() {
        if (best - scores[k]).abs() > TIE * best.abs() {
            continue;
        }
        if pick.is_none_or(|p| key_order(&nb[k].2, &nb[p].2).is_gt()) {
            pick = Some(k);
        }
    }
    pick.expect("at least one score")
}

/// `(unit direction, weight, lattice key)` triples, self excluded.
type Neighborhood = Vec<(Vector3<f64>, f64, Vector3<f64>)>;

fn max_frame(nb: &Neighborhood) -> [Vector3<f64>; 3] {
    if nb.is_empty() {
        // only the self image remains, whose angles are zero in any frame
        return [Vector3::x(), Vector3::y(), Vector3::z()];
    }
    let w: Vec<f64> = nb.iter().map(|n| n.1).collect();
    let e1 = nb[argmax(&w, nb)].0;
    let second: Vec<f64> = nb.iter().map(|(d, wk, _)| (1.0 - e1.dot(d).abs()) * wk).collect();
    let top = w.iter().copied().fold(0.0, f64::max);
    let d = if second.iter().copied().fold(0.0, f64::max) > 1e-12 * top {
        nb[argmax(&second, nb)].0
    } else {
        // collinear neighbors: every completion yields zero cosines on the
        // other two axes, so any orthonormal one will do
        [Vector3::x(), Vector3::y(), Vector3::z()]
            .into_iter()
            .min_by(|a, b| e1.dot(a).abs().total_cmp(&e1.dot(b).abs()))
            .expect("three axes")
    };
    let e2 = (d - e1 * e1.dot(&d)).normalize();
    [e1, e2, e1.cross(&e2)]
}

fn weighted_pca_frame(nb: &Neighborhood) -> [Vector3<f64>; 3] {
    if nb.is_empty() {
        return max_frame(nb);
    }
    let mut cov = Matrix3::zeros();
    for (d, w, _) in nb {
        cov += d * d.transpose() * *w;
    }
    let eig = jacobi_eigen(&cov);
    let v = eig.values;
    let scale = v.iter().map(|x| x.abs()).sum::<f64>() + 1e-12;
    if (v[0] - v[1]).abs() < 1e-6 * scale || (v[1] - v[2]).abs() < 1e-6 * scale {
        return max_frame(nb);
    }
    let orient = |e: Vector3<f64>| {
        let scores: Vec<f64> = nb.iter().map(|(d, w, _)| w * e.dot(d).abs()).collect();
        if e.dot(&nb[argmax(&scores, nb)].0) < 0.0 {
            -e
        } else {
            e
        }
    };
    let e1 = orient(eig.vectors[0]);
    let e2 = orient(eig.vectors[1]);
    [e1, e2, e1.cross(&e2)]
}

fn neighborhood(images: &[OracleImage], weights: &[f64]) -> Neighborhood {
    images
        .iter()
        .zip(weights)
        .filter(|(im, _)| im.r > 0.0)
        .map(|(im, &w)| (im.displacement / im.r, w, im.frac))
        .collect()
}

/// One encoder block evaluated by explicit loops over atoms, heads and
/// periodic images, with images gathered by [`brute_force_images`] out to
/// `radius_multiplier · σ`. Supports no frames, max, weighted PCA and
/// static local frames; panics on anything else.
pub fn oracle_attention(
    cfg: &ModelConfig,
    params: &ParamStore,
    s: &CrystalStructure,
    x: &Tensor,
    layer: usize,
    radius_multiplier: f64,
    bounds: [i32; 3],
) -> Tensor {
    let n = s.len();
    let d = cfg.width;
    let heads = cfg.heads;
    let dk = d / heads;
    let key = |name: &str| format!("block{layer}.{name}");
    let (wq, wk, wv) = (Dense::new(params, &key("wq")), Dense::new(params, &key("wk")), Dense::new(params, &key("wv")));
    let sw = Dense::new(params, &key("sigma_w"));
    let sb = params.get(&key("sigma_b")).expect("sigma bias").data();
    let psi_dist = Dense::new(params, &key("psi_dist"));
    let psi_angl = Dense::new(params, &key("psi_angl"));
    let (wo, bo) = (Dense::new(params, &key("wo")), params.get(&key("bo")).expect("bias").data());
    let (ff1, bf1) = (Dense::new(params, &key("ff1")), params.get(&key("bf1")).expect("bias").data());
    let (ff2, bf2) = (Dense::new(params, &key("ff2")), params.get(&key("bf2")).expect("bias").data());

    let rows: Vec<&[f64]> = (0..n).map(|i| x.row(i)).collect();
    let q: Vec<Vec<f64>> = rows.iter().map(|r| wq.times(r)).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| wk.times(r)).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| wv.times(r)).collect();
    let gate: Vec<Vec<f64>> = rows.iter().map(|r| sw.times(r)).collect();

    let angular = cfg.frame_method != FrameMethod::None && cfg.pos.c_angl != 0.0;
    let static_frames: Option<Vec<[Vector3<f64>; 3]>> = (angular && cfg.frame_method == FrameMethod::StaticLocal)
        .then(|| {
            (0..n)
                .map(|i| {
                    let images = brute_force_images(s, i, STATIC_RADIUS, bounds);
                    let w: Vec<f64> = images.iter().map(|im| (-im.r * im.r).exp()).collect();
                    max_frame(&neighborhood(&images, &w))
                })
                .collect()
        });

    let mut concat = vec![vec![0.0; d]; n];
    for i in 0..n {
        for h in 0..heads {
            let z = gate[i][h] + sb[h];
            let sigma = cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) / (1.0 + (-z).exp());
            let images = brute_force_images(s, i, radius_multiplier * sigma, bounds);
            let logits: Vec<f64> = images
                .iter()
                .map(|im| {
                    let dot: f64 = (0..dk).map(|c| q[i][h * dk + c] * k[im.j][h * dk + c]).sum();
                    dot / (dk as f64).sqrt() - im.r * im.r / (2.0 * sigma * sigma)
                })
                .collect();
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z_sum: f64 = logits.iter().map(|l| (l - top).exp()).sum();
            let alpha: Vec<f64> = logits.iter().map(|l| (l - top).exp() / z_sum).collect();

            let frame = if !angular {
                None
            } else if let Some(f) = &static_frames {
                Some(f[i])
            } else {
                let nb = neighborhood(&images, &alpha);
                Some(match cfg.frame_method {
                    FrameMethod::Max => max_frame(&nb),
                    FrameMethod::WeightedPca => weighted_pca_frame(&nb),
                    other => panic!("oracle does not model {other} frames"),
                })
            };

            let out = &mut concat[i][h * dk..(h + 1) * dk];
            for (im, a) in images.iter().zip(&alpha) {
                let gd = gaussians(im.r, &cfg.pos.dist);
                let angles = match (&frame, im.r > 0.0) {
                    (Some(f), true) => {
                        let u = im.displacement / im.r;
                        Some([f[0].dot(&u), f[1].dot(&u), f[2].dot(&u)])
                    }
                    (Some(_), false) => Some([0.0; 3]),
                    (None, _) => None,
                };
                for c in 0..dk {
                    let col = h * dk + c;
                    let mut psi: f64 = cfg.pos.c_dist * gd.iter().enumerate().map(|(m, g)| g * psi_dist.at(m, col)).sum::<f64>();
                    if let Some(theta) = angles {
                        let da = cfg.pos.angl.count;
                        let mut acc = 0.0;
                        for (axis, t) in theta.iter().enumerate() {
                            for (m, g) in gaussians(*t, &cfg.pos.angl).iter().enumerate() {
                                acc += g * psi_angl.at(axis * da + m, col);
                            }
                        }
                        psi += cfg.pos.c_angl * acc;
                    }
                    out[c] += a * (v[im.j][col] + cfg.pos.lambda * psi);
                }
            }
        }
    }

    let mut result = Vec::with_capacity(n * d);
    for i in 0..n {
        let proj = wo.times(&concat[i]);
        let x1: Vec<f64> = (0..d).map(|c| rows[i][c] + proj[c] + bo[c]).collect();
        let hidden: Vec<f64> = ff1
            .times(&x1)
            .iter()
            .zip(bf1)
            .map(|(h, b)| {
                let z = h + b;
                z / (1.0 + (-z).exp())
            })
            .collect();
        let ff = ff2.times(&hidden);
        result.extend((0..d).map(|c| x1[c] + ff[c] + bf2[c]));
    }
    Tensor::matrix(n, d, result).expect("shape matches by construction")
}
