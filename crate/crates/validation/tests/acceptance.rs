//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints exactly one status line, even when an earlier one
//! fails; the process exits nonzero if any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use dynframe::autodiff::{finite_difference_check, Tensor};
use dynframe::crystal::{CrystalStructure, Lattice, Species};
use dynframe::data::{gen_synthetic, Entry};
use dynframe::features::PosEncodingConfig;
use dynframe::frames::{eig3_sym, max_frame, weighted_pca_frame, FrameMethod, FrameRng, WeightedDirection, WeightedNeighborhood};
use dynframe::images::enumerate_images;
use dynframe::model::{attention_block, ForwardOptions, Model, ModelConfig, TargetNorm, DEFAULT_RADIUS_MULTIPLIER};
use dynframe::train::{evaluate_mae, learning_rate, train, TrainConfig};
use dynframe_cli::commands::run_from;
use dynframe_oracles::fixtures::{random_neighborhood, random_rotation, random_structure, random_vector};
use dynframe_oracles::{admissible_frames, brute_force_images, jacobi_eigen, oracle_attention, OracleConfig, OracleFrameKind};
use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

/// Outcome of one criterion: pass flag plus a one-line summary.
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn synthetic(count: usize, seed: u64) -> Vec<(String, CrystalStructure)> {
    gen_synthetic(count, seed)
        .unwrap()
        .into_iter()
        .map(|r| (r.id.clone(), r.to_structure().unwrap()))
        .collect()
}

fn model(method: FrameMethod, seed: u64) -> Model {
    Model::new(
        ModelConfig {
            frame_method: method,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn predict(m: &Model, s: &CrystalStructure) -> f64 {
    m.predict(s, &ForwardOptions::default()).unwrap()
}

/// Largest `|f(variant) - f(base)|` and the structure it came from.
struct Worst {
    value: f64,
    id: String,
}

impl Worst {
    fn new() -> Self {
        Worst {
            value: 0.0,
            id: String::new(),
        }
    }

    fn see(&mut self, value: f64, id: &str) {
        let value = if value.is_nan() { f64::INFINITY } else { value };
        if value > self.value || self.id.is_empty() {
            self.value = value;
            self.id = id.to_string();
        }
    }
}

fn rigid_motion_invariance() -> Verdict {
    let structures = synthetic(20, 101);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lines = Vec::new();
    let mut pass = true;
    for method in [FrameMethod::Max, FrameMethod::WeightedPca] {
        let m = model(method, 11);
        let mut worst = Worst::new();
        for (id, s) in &structures {
            let base = predict(&m, s);
            for _ in 0..10 {
                let moved = s.rigid_transform(&random_rotation(&mut rng), &random_vector(&mut rng, 20.0)).unwrap();
                worst.see((predict(&m, &moved) - base).abs(), id);
            }
        }
        pass &= worst.value <= 1e-8;
        lines.push(format!("{method}: max |dy| {:.2e} ({})", worst.value, worst.id));
    }
    verdict(pass, format!("{}; tolerance 1e-8", lines.join(", ")))
}

fn rewrapped(s: &CrystalStructure, rng: &mut impl Rng) -> CrystalStructure {
    let mut out = s.clone();
    for i in 0..s.len() {
        let n = Vector3::from_fn(|_, _| rng.random_range(-3i32..=3) as f64);
        out = out.displaced(i, &s.lattice().to_cartesian(&n)).unwrap();
    }
    out
}

fn periodic_invariance() -> Verdict {
    let structures = synthetic(20, 101);
    let mut lines = Vec::new();
    let mut pass = true;
    for method in [FrameMethod::Max, FrameMethod::WeightedPca, FrameMethod::Pca] {
        let m = model(method, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst = Worst::new();
        for (id, s) in &structures {
            let base = predict(&m, s);
            for factors in [[2, 1, 1], [1, 2, 2]] {
                worst.see((predict(&m, &s.make_supercell(factors).unwrap()) - base).abs(), id);
            }
            worst.see((predict(&m, &rewrapped(s, &mut rng)) - base).abs(), id);
        }
        if method.is_dynamic() {
            pass &= worst.value <= 1e-8;
            lines.push(format!("{method}: max |dy| {:.2e} ({})", worst.value, worst.id));
        } else {
            let status = if worst.value > 1e-8 { "not invariant, as expected" } else { "invariant on this sample" };
            lines.push(format!("{method}: max |dy| {:.2e} ({status})", worst.value));
        }
    }
    verdict(pass, format!("{}; tolerance 1e-8 for dynamic frames", lines.join(", ")))
}

fn permutation_invariance() -> Verdict {
    let structures = synthetic(20, 101);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut lines = Vec::new();
    let mut pass = true;
    for method in [FrameMethod::Max, FrameMethod::WeightedPca] {
        let m = model(method, 13);
        let mut worst = Worst::new();
        for (id, s) in &structures {
            let base = predict(&m, s);
            for _ in 0..5 {
                let mut order: Vec<usize> = (0..s.len()).collect();
                order.shuffle(&mut rng);
                worst.see((predict(&m, &s.permuted(&order).unwrap()) - base).abs(), id);
            }
        }
        pass &= worst.value <= 1e-9;
        lines.push(format!("{method}: max |dy| {:.2e}", worst.value));
    }
    verdict(pass, format!("{}; tolerance 1e-9", lines.join(", ")))
}

fn final_states(m: &Model, s: &CrystalStructure, radius_multiplier: f64) -> Vec<f64> {
    let f = m
        .forward(
            s,
            &ForwardOptions {
                radius_multiplier,
                ..ForwardOptions::default()
            },
        )
        .unwrap();
    f.graph.value(*f.states.last().unwrap()).data().to_vec()
}

fn relative_change(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / b.iter().map(|y| y * y).sum::<f64>().sqrt()
}

fn truncation_convergence() -> Verdict {
    let m = model(FrameMethod::Max, 14);
    let mut worst = Worst::new();
    let mut total = 0.0;
    let structures = synthetic(50, 104);
    for (id, s) in &structures {
        let near = final_states(&m, s, DEFAULT_RADIUS_MULTIPLIER);
        let far = final_states(&m, s, 2.0 * DEFAULT_RADIUS_MULTIPLIER);
        let change = relative_change(&near, &far);
        total += change;
        worst.see(change, id);
    }
    verdict(
        worst.value < 1e-5,
        format!(
            "relative state change 3.5 vs 7 decay lengths: max {:.2e} ({}), mean {:.2e}; tolerance 1e-5",
            worst.value,
            worst.id,
            total / structures.len() as f64
        ),
    )
}

fn oracle_equivalence() -> Verdict {
    let oracle = OracleConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut wide = 0.0f64;
    let mut same = 0.0f64;
    for k in 0..50 {
        let method = [FrameMethod::Max, FrameMethod::WeightedPca][k % 2];
        let cfg = ModelConfig {
            width: 16,
            heads: 4,
            blocks: 1,
            ffn_width: 16,
            frame_method: method,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg.clone(), k as u64).unwrap();
        let s = random_structure(&mut rng, 4);
        let x = Tensor::matrix(s.len(), cfg.width, (0..s.len() * cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let fast = attention_block(&cfg, &m.params, &s, &x, 0, &ForwardOptions::default()).unwrap();
        let far = oracle_attention(&cfg, &m.params, &s, &x, 0, oracle.wide_multiplier * DEFAULT_RADIUS_MULTIPLIER, oracle.bounds);
        let near = oracle_attention(&cfg, &m.params, &s, &x, 0, DEFAULT_RADIUS_MULTIPLIER, oracle.bounds);
        let rel = |a: &Tensor, b: &Tensor| {
            a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() / b.norm()
        };
        wide = wide.max(rel(&fast, &far));
        same = same.max(rel(&fast, &near));
    }

    let mut image_mismatches = 0;
    for _ in 0..50 {
        let s = random_structure(&mut rng, 5);
        let radius = rng.random_range(2.0..12.0);
        for i in 0..s.len() {
            let key = |j: usize, d: Vector3<f64>| (j, d.map(|c| (c * 1e6).round() as i64));
            let mut fast: Vec<_> = enumerate_images(&s, i, radius).unwrap().into_iter().map(|im| key(im.j, im.displacement)).collect();
            let mut slow: Vec<_> = brute_force_images(&s, i, radius, oracle.bounds).into_iter().map(|im| key(im.j, im.displacement)).collect();
            let order = |a: &(usize, Vector3<i64>), b: &(usize, Vector3<i64>)| a.0.cmp(&b.0).then_with(|| a.1.as_slice().cmp(b.1.as_slice()));
            fast.sort_by(order);
            slow.sort_by(order);
            if fast != slow {
                image_mismatches += 1;
            }
        }
    }

    let mut eig = 0.0f64;
    for _ in 0..200 {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let sym = a + a.transpose();
        let fast = eig3_sym(&sym).unwrap();
        let slow = jacobi_eigen(&sym);
        for k in 0..3 {
            eig = eig.max((fast.values[k] - slow.values[k]).abs());
        }
    }

    let pass = wide < 1e-5 && image_mismatches == 0 && eig < 1e-10;
    verdict(
        pass,
        format!(
            "attention vs wide-radius oracle rel {wide:.2e} (tol 1e-5; same-radius oracle {same:.2e}), \
             image-set mismatches {image_mismatches}/50 structures, eigenvalue error {eig:.2e} (tol 1e-10)"
        ),
    )
}

fn two_atom_salt() -> CrystalStructure {
    let l = Lattice::from_rows([[0.0, 2.8, 2.8], [2.8, 0.0, 2.8], [2.8, 2.8, 0.0]]).unwrap();
    CrystalStructure::new(
        vec![Species::new(11).unwrap(), Species::new(17).unwrap()],
        vec![Vector3::new(0.1, -0.05, 0.02), Vector3::new(2.75, 2.85, 2.8)],
        l,
    )
    .unwrap()
}

/// Largest gap between the reverse-mode gradient and central differences of
/// a full re-evaluation (frames rebuilt) for the attention query weights of
/// the first block.
fn frame_path_gap(m: &Model, s: &CrystalStructure) -> f64 {
    let f = m.forward(s, &ForwardOptions::default()).unwrap();
    let grads = f.graph.backward(f.output).unwrap();
    let (_, id) = f.params.iter().find(|(n, _)| n == "block0.wq").unwrap();
    let analytic = grads.wrt(*id).unwrap().data().to_vec();
    let h = 1e-5;
    let mut gap = 0.0f64;
    for (k, g) in analytic.iter().enumerate() {
        let shifted = |delta: f64| {
            let mut p = m.clone();
            p.params.get_mut("block0.wq").unwrap().data_mut()[k] += delta;
            p.predict_normalized(s, &ForwardOptions::default()).unwrap()
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        gap = gap.max((numeric - g).abs());
    }
    gap
}

fn gradient_correctness() -> Verdict {
    let s = two_atom_salt();
    let mut pass = true;
    let mut lines = Vec::new();
    let mut gaps = HashMap::new();
    for method in [FrameMethod::Max, FrameMethod::WeightedPca] {
        let cfg = ModelConfig {
            width: 8,
            heads: 2,
            blocks: 2,
            ffn_width: 8,
            frame_method: method,
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, 21).unwrap();
        let f = m.forward(&s, &ForwardOptions::default()).unwrap();
        let report = finite_difference_check(&f.graph, f.output, &f.param_ids(), 1e-5).unwrap();
        pass &= report.max_relative_error < 1e-4;
        lines.push(format!("{method} {} params rel err {:.2e}", report.components, report.max_relative_error));
        gaps.insert(method, frame_path_gap(&m, &s));
    }
    // With frames held fixed the tape gradient matches replayed differences
    // (above). Rebuilding frames under the perturbation moves weighted PCA
    // axes, so a visible gap there shows the frame path exists and carries
    // no gradient; max frames pick neighbor directions and do not move.
    let pca_gap = gaps[&FrameMethod::WeightedPca];
    let max_gap = gaps[&FrameMethod::Max];
    pass &= pca_gap > 1e-6 && max_gap < 1e-6;
    verdict(
        pass,
        format!(
            "{}; tolerance 1e-4; frame-path gap weighted_pca {pca_gap:.2e} (nonzero), max {max_gap:.2e} (zero)",
            lines.join(", ")
        ),
    )
}

fn frame_correctness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut outside = 0;
    for _ in 0..200 {
        let mut nb = random_neighborhood(&mut rng, 12);
        if rng.random_bool(0.3) {
            nb[1].1 = nb[0].1;
        }
        let production = WeightedNeighborhood(nb.iter().map(|&(dir, weight)| WeightedDirection { dir, key: dir, weight }).collect());
        let member = |set: Vec<[Vector3<f64>; 3]>, axes: &[Vector3<f64>; 3]| {
            set.iter().any(|f| (0..3).all(|k| (f[k] - axes[k]).norm() < 1e-9))
        };
        let f = max_frame(&production, &mut FrameRng::eval()).unwrap();
        outside += usize::from(!member(admissible_frames(&nb, OracleFrameKind::Max), &f.axes));
        let f = weighted_pca_frame(&production, &mut FrameRng::eval()).unwrap();
        outside += usize::from(!member(admissible_frames(&nb, OracleFrameKind::WeightedPca), &f.axes));
    }

    let mut violation = 0.0f64;
    let mut frames = 0;
    let structures = synthetic(10, 107);
    for method in [FrameMethod::Max, FrameMethod::WeightedPca, FrameMethod::StaticLocal, FrameMethod::Pca, FrameMethod::Lattice] {
        let m = model(method, 17);
        for (_, s) in &structures {
            for rec in m.dump_trace(s, &ForwardOptions::default()).unwrap() {
                let f = rec.frame.unwrap();
                violation = violation.max(f.invariant_violation());
                frames += 1;
            }
        }
    }
    verdict(
        outside == 0 && violation <= 1e-9,
        format!("{outside} of 400 production frames outside the admissible sets; {frames} traced frames, max invariant violation {violation:.2e} (tol 1e-9)"),
    )
}

fn desk_scale_learning() -> Verdict {
    let data: Vec<Entry> = gen_synthetic(256, 0).unwrap().into_iter().map(|r| Entry::new(r).unwrap()).collect();
    let targets: Vec<f64> = data.iter().map(|e| e.record.target).collect();
    let std = TargetNorm::fit(&targets).std;
    let cfg = ModelConfig {
        width: 32,
        heads: 4,
        blocks: 2,
        ffn_width: 64,
        frame_method: FrameMethod::Max,
        pos: PosEncodingConfig::lightweight(),
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 63,
        batch_size: 32,
        swa_epochs: 10,
        max_steps: Some(500),
        ..TrainConfig::default()
    };
    let run = |cfg: &ModelConfig| {
        let out = train(&data, &[], cfg, &tc, None).unwrap();
        let last = out.report.epochs.last().unwrap().train_mae;
        let swa = out.swa_model.as_ref().map(|m| evaluate_mae(m, &data).unwrap());
        (out.report.steps, last, swa)
    };
    let started = Instant::now();
    let (steps, full, full_swa) = run(&cfg);
    let ablated_cfg = ModelConfig {
        pos: PosEncodingConfig { c_angl: 0.0, ..cfg.pos },
        ..cfg.clone()
    };
    let (_, ablated, _) = run(&ablated_cfg);
    let seconds = started.elapsed().as_secs_f64();
    let ratio = full / std;
    let gain = ablated / full;
    verdict(
        steps == 500 && ratio < 0.1 && gain >= 1.2,
        format!(
            "{steps} steps, train MAE {full:.4} = {ratio:.3} of target std {std:.4} (need < 0.1), \
             ablation MAE {ablated:.4} = {gain:.2}x (need >= 1.2), SWA weights {:.3} of std, both runs {seconds:.0} s",
            full_swa.map(|v| v / std).unwrap_or(f64::NAN)
        ),
    )
}

fn config_fidelity() -> Verdict {
    let d = PosEncodingConfig::default_config();
    let l = PosEncodingConfig::lightweight();
    let mut wrong = Vec::new();
    let mut expect = |name: &str, got: f64, want: f64| {
        if got != want {
            wrong.push(format!("{name} = {got}, expected {want}"));
        }
    };
    expect("lambda", d.lambda, 1.0);
    expect("c_dist", d.c_dist, 1.0);
    expect("dist.min", d.dist.min, 14.0 / 64.0);
    expect("dist.max", d.dist.max, 14.0);
    expect("dist.width_scale", d.dist.width_scale, 1.0);
    expect("dist.count", d.dist.count as f64, 64.0);
    expect("c_angl", d.c_angl, 1.0);
    expect("angl.min", d.angl.min, -1.0);
    expect("angl.max", d.angl.max, 1.0);
    expect("angl.width_scale", d.angl.width_scale, 4.0);
    expect("angl.count", d.angl.count as f64, 64.0);
    expect("lightweight c_angl", l.c_angl, 4.0);
    expect("lightweight angl.width_scale", l.angl.width_scale, 1.0);
    expect("lightweight angl.count", l.angl.count as f64, 16.0);
    expect("lightweight lambda", l.lambda, 1.5);
    expect("lightweight dist unchanged", f64::from(u8::from(l.dist == d.dist)), 1.0);
    expect("lightweight angl range", f64::from(u8::from(l.angl.min == -1.0 && l.angl.max == 1.0)), 1.0);
    expect("lightweight c_dist", l.c_dist, 1.0);
    expect("lr(0)", learning_rate(5e-4, 0), 5e-4);
    expect("lr(4000)", learning_rate(5e-4, 4000), 5e-4 / 2f64.sqrt());
    let n = wrong.len();
    verdict(
        n == 0,
        if n == 0 {
            "default and lightweight encodings and schedule values exact".to_string()
        } else {
            wrong.join("; ")
        },
    )
}

/// Runs one `dynframe` command line through the CLI library.
fn run_cli(args: &[&str]) -> Result<(), String> {
    run_from(std::iter::once("dynframe").chain(args.iter().copied())).map_err(|e| format!("{args:?}: {e}"))
}

fn sweep_is_valid(text: &str, range: f64, steps: usize) -> Result<(), String> {
    let mut lines = text.lines();
    if lines.next() != Some("step,displacement,prediction") {
        return Err("bad header".into());
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != steps {
        return Err(format!("{} rows, expected {steps}", rows.len()));
    }
    for (k, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 3 || cols[0] != k.to_string() {
            return Err(format!("bad row `{row}`"));
        }
        let t: f64 = cols[1].parse().map_err(|_| format!("bad displacement `{row}`"))?;
        let y: f64 = cols[2].parse().map_err(|_| format!("bad prediction `{row}`"))?;
        let want = -range + 2.0 * range * k as f64 / (steps - 1) as f64;
        if (t - want).abs() > 1e-12 || !y.is_finite() {
            return Err(format!("row `{row}` off the grid or not finite"));
        }
    }
    Ok(())
}

fn perturbation_sweep() -> Verdict {
    let dir = TempDir::new().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let attempt = || -> Result<String, String> {
        run_cli(&["generate", "--count", "16", "--seed", "4", "--out", &p("data.jsonl")])?;
        let mut spans = Vec::new();
        for method in ["max", "weighted_pca"] {
            let set = format!("model.frame_method={method}");
            run_cli(&[
                "train", "--data", &p("data.jsonl"), "--out", &p(method), "--seed", "2",
                "--set", &set, "--set", "model.width=16", "--set", "model.heads=4", "--set", "model.blocks=2",
                "--set", "train.epochs=4", "--set", "train.batch_size=4", "--set", "train.swa_epochs=1",
            ])?;
            let ck = Path::new(&p(method)).join("checkpoint.json");
            let ck = ck.to_str().unwrap();
            let sweep = |out: &str| {
                run_cli(&[
                    "perturb", "--checkpoint", ck, "--data", &p("data.jsonl"), "--index", "3", "--atom", "1",
                    "--direction", "a", "--range", "0.3", "--steps", "31", "--out", out,
                ])
            };
            let (first, second) = (p(&format!("{method}_1.csv")), p(&format!("{method}_2.csv")));
            sweep(&first)?;
            sweep(&second)?;
            let a = fs::read_to_string(&first).map_err(|e| e.to_string())?;
            let b = fs::read_to_string(&second).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{method}: repeated sweeps differ"));
            }
            sweep_is_valid(&a, 0.3, 31).map_err(|e| format!("{method}: {e}"))?;
            let ys: Vec<f64> = a.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
            let span = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ys.iter().copied().fold(f64::INFINITY, f64::min);
            spans.push(format!("{method} span {span:.3e}"));
        }
        Ok(spans.join(", "))
    };
    match attempt() {
        Ok(spans) => verdict(true, format!("finite, byte-identical 31-point sweeps; {spans}")),
        Err(e) => verdict(false, e),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("rigid-motion invariance", rigid_motion_invariance),
        ("periodic invariance", periodic_invariance),
        ("permutation invariance", permutation_invariance),
        ("truncation convergence", truncation_convergence),
        ("oracle equivalence", oracle_equivalence),
        ("gradient correctness", gradient_correctness),
        ("frame correctness", frame_correctness),
        ("desk-scale learning", desk_scale_learning),
        ("config fidelity", config_fidelity),
        ("perturbation sweep", perturbation_sweep),
    ];
    // Only run criteria whose name contains a filter argument, if given.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!(
            "acceptance {:>2} {:<24} {} [{:.1} s] {}",
            k + 1,
            name,
            if v.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            v.detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
