use dynframe::autodiff::Tensor;
use dynframe::crystal::{CrystalStructure, Lattice, Species};
use dynframe::features::PosEncodingConfig;
use dynframe::frames::{eig3_sym, max_frame, weighted_pca_frame, FrameMethod, FrameRng, WeightedDirection, WeightedNeighborhood};
use dynframe::images::enumerate_images;
use dynframe::model::{attention_block, ForwardOptions, Model, ModelConfig};
use dynframe_oracles::fixtures::{random_neighborhood, random_structure, random_unit};
use dynframe_oracles::{admissible_frames, brute_force_images, jacobi_eigen, oracle_attention, OracleConfig, OracleFrameKind};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn production_nbhd(nb: &[(Vector3<f64>, f64)]) -> WeightedNeighborhood {
    WeightedNeighborhood(nb.iter().map(|&(dir, weight)| WeightedDirection { dir, key: dir, weight }).collect())
}

fn contains(set: &[[Vector3<f64>; 3]], axes: &[Vector3<f64>; 3]) -> bool {
    set.iter().any(|f| (0..3).all(|k| (f[k] - axes[k]).norm() < 1e-9))
}

#[test]
fn image_sets_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let s = random_structure(&mut rng, 5);
        let radius = rng.random_range(2.0..12.0);
        for i in 0..s.len() {
            let mut fast: Vec<(usize, Vector3<f64>)> =
                enumerate_images(&s, i, radius).unwrap().into_iter().map(|im| (im.j, im.displacement)).collect();
            let mut slow: Vec<(usize, Vector3<f64>)> = brute_force_images(&s, i, radius, OracleConfig::default().bounds)
                .into_iter()
                .map(|im| (im.j, im.displacement))
                .collect();
            assert_eq!(fast.len(), slow.len());
            let order = |a: &(usize, Vector3<f64>), b: &(usize, Vector3<f64>)| {
                a.0.cmp(&b.0).then(a.1.iter().zip(b.1.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
            };
            fast.sort_by(order);
            slow.sort_by(order);
            for (a, b) in fast.iter().zip(&slow) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).norm() < 1e-9);
            }
        }
    }
}

#[test]
fn eigenvalues_match_jacobi() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let m = a + a.transpose();
        let fast = eig3_sym(&m).unwrap();
        let slow = jacobi_eigen(&m);
        for k in 0..3 {
            assert!((fast.values[k] - slow.values[k]).abs() < 1e-10, "{m} {fast:?} {slow:?}");
        }
    }
}

#[test]
fn near_degenerate_eigenspaces_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let rot = dynframe_oracles::fixtures::random_rotation(&mut rng);
        let gap = rng.random_range(0.0..1e-9);
        let m = rot * Matrix3::from_diagonal(&Vector3::new(2.0, 2.0 + gap, -1.0)) * rot.transpose();
        let m = (m + m.transpose()) * 0.5;
        let fast = eig3_sym(&m).unwrap();
        let slow = jacobi_eigen(&m);
        for k in 0..3 {
            assert!((fast.values[k] - slow.values[k]).abs() < 1e-10, "{m} {:?} {:?} {gap}", fast.values, slow.values);
        }
        // the top two vectors span the same plane even if the bases differ
        let proj = |v: &Vector3<f64>| slow.vectors[0] * slow.vectors[0].dot(v) + slow.vectors[1] * slow.vectors[1].dot(v);
        for v in &fast.vectors[..2] {
            assert!((proj(v) - v).norm() < 1e-8);
        }
        assert!(fast.vectors[2].dot(&slow.vectors[2]).abs() > 1.0 - 1e-10);
    }
}

#[test]
fn worked_example_has_one_admissible_max_frame() {
    let s = 0.5f64.sqrt();
    let nb = vec![(Vector3::x(), 0.5), (Vector3::y(), 0.3), (Vector3::new(s, s, 0.0), 0.2)];
    let set = admissible_frames(&nb, OracleFrameKind::Max);
    assert_eq!(set.len(), 1);
    let f = max_frame(&production_nbhd(&nb), &mut FrameRng::eval()).unwrap();
    assert!(contains(&set, &f.axes));
}

#[test]
fn distinct_spectrum_has_four_admissible_pca_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let nb = random_neighborhood(&mut rng, 8);
    let set = admissible_frames(&nb, OracleFrameKind::WeightedPca);
    assert_eq!(set.len(), 4);
    assert!(set.iter().all(|f| (f[0].cross(&f[1]).dot(&f[2]) - 1.0).abs() < 1e-12));
}

#[test]
fn production_frames_are_admissible() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let mut nb = random_neighborhood(&mut rng, 12);
        if rng.random_bool(0.3) {
            // exact weight tie between two directions
            nb[1].1 = nb[0].1;
        }
        let p = production_nbhd(&nb);
        let f = max_frame(&p, &mut FrameRng::eval()).unwrap();
        assert!(contains(&admissible_frames(&nb, OracleFrameKind::Max), &f.axes), "{nb:?}");
        let f = weighted_pca_frame(&p, &mut FrameRng::eval()).unwrap();
        assert!(contains(&admissible_frames(&nb, OracleFrameKind::WeightedPca), &f.axes), "{nb:?}");
        assert!(f.invariant_violation() < 1e-9);
    }
}

fn small_config(method: FrameMethod) -> ModelConfig {
    ModelConfig {
        width: 8,
        heads: 2,
        blocks: 1,
        ffn_width: 8,
        frame_method: method,
        pos: PosEncodingConfig::lightweight(),
        ..ModelConfig::default()
    }
}

fn relative(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.norm()
}

#[test]
fn block_matches_oracle_at_same_radius() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for (k, method) in [FrameMethod::None, FrameMethod::Max, FrameMethod::WeightedPca, FrameMethod::StaticLocal]
        .into_iter()
        .cycle()
        .take(40)
        .enumerate()
    {
        // alternate head counts and encodings so tie-breaking is exercised
        let cfg = ModelConfig {
            width: 16,
            heads: if k % 8 < 4 { 2 } else { 4 },
            pos: if k % 16 < 8 { PosEncodingConfig::lightweight() } else { PosEncodingConfig::default_config() },
            ..small_config(method)
        };
        let model = Model::new(cfg.clone(), k as u64).unwrap();
        let s = random_structure(&mut rng, 4);
        let x = Tensor::matrix(s.len(), cfg.width, (0..s.len() * cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let fast = attention_block(&cfg, &model.params, &s, &x, 0, &ForwardOptions::default()).unwrap();
        let slow = oracle_attention(&cfg, &model.params, &s, &x, 0, 3.5, OracleConfig::default().bounds);
        assert!(relative(&fast, &slow) < 1e-12, "{k} {method} {}: {}", cfg.heads, relative(&fast, &slow));
    }
}

#[test]
fn lone_atom_in_huge_cell_is_closed_form() {
    let cfg = small_config(FrameMethod::Max);
    let model = Model::new(cfg.clone(), 9).unwrap();
    let s = CrystalStructure::new(vec![Species::new(6).unwrap()], vec![Vector3::zeros()], Lattice::cubic(200.0).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::matrix(1, cfg.width, (0..cfg.width).map(|_| random_unit(&mut rng).x).collect()).unwrap();
    let fast = attention_block(&cfg, &model.params, &s, &x, 0, &ForwardOptions::default()).unwrap();
    let slow = oracle_attention(&cfg, &model.params, &s, &x, 0, 7.0, OracleConfig::default().bounds);
    assert!(relative(&fast, &slow) < 1e-13);
}
