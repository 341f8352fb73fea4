//! Acceptance suite. Each criterion prints one `Ak PASS|FAIL: ...` line to
//! stderr (visible without `--nocapture`) and then asserts. Tolerances and
//! budgets are pinned here. The tests take a shared lock so the timed ones
//! never compete for the core.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lrsa_core::autodiff::grad_check;
use lrsa_core::lrsa::{
    block_flops, dense_attention_flops, measure_block_flops, slicing_compress, LrsaConfig, LrsaModel, SliceAxis,
    Variant,
};
use lrsa_core::nn::sdpa_scaled;
use lrsa_core::pde::{green_kernel_1d_poisson, make_dataset, SmoothField1d, Task, DEFAULT_MAX_MODE};
use lrsa_core::spectral::{loglog_slope, spectral_report, svd};
use lrsa_core::train::{evaluate, train, TrainConfig};
use lrsa_core::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

const VARIANTS: [Variant; 5] =
    [Variant::Full, Variant::NoIntraAttn, Variant::SymmetricTied, Variant::LinearNo, Variant::FixedBasis];

fn report(id: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{id} {verdict}: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn frob(t: &Tensor) -> f64 {
    t.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    max_abs_diff(a, b) / b.data().iter().fold(1e-300f64, |m, v| m.max(v.abs()))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.last_dim();
    let data = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_vec(&[perm.len(), c], data).unwrap()
}

fn midpoints(n: usize) -> Tensor {
    Tensor::from_vec(&[n, 1], (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()).unwrap()
}

#[test]
fn a1_toy_operator_learning() {
    const LIMIT: f64 = 5e-2;
    const BUDGET: Duration = Duration::from_secs(600);
    let _g = serial();
    let t0 = Instant::now();
    let ds = make_dataset(Task::Poisson1d, 640, 64, 1).unwrap();
    let (tr, te) = ds.split_count(512, 0).unwrap();
    let model_cfg = LrsaConfig { depth: 2, width: 64, heads: 4, latent_count: 8, ..LrsaConfig::default() };
    let cfg = TrainConfig { max_lr: 1e-3, weight_decay: 1e-5, epochs: 200, batch_size: 8, ..TrainConfig::default() };
    let out = train(&model_cfg, &tr, &te, &cfg, None).unwrap();
    let err = evaluate(&out.model, &te).unwrap().rel_l2.unwrap();
    let elapsed = t0.elapsed();
    let pass = err <= LIMIT && elapsed <= BUDGET;
    report("A1", pass, format!("test rel L2 {err:.4e} (limit {LIMIT:e}), {:.1} s (budget {} s)", elapsed.as_secs_f64(), BUDGET.as_secs()));
    assert!(pass);
}

#[test]
fn a2_green_kernel_compressibility() {
    const BUDGET: Duration = Duration::from_secs(30);
    let _g = serial();
    let t0 = Instant::now();
    let g = green_kernel_1d_poisson(256).unwrap();
    let rep = spectral_report(&g, 1e-12, Some(&[16])).unwrap();
    let slope = loglog_slope(&rep.singular_values, 2, 32).unwrap();
    let err16 = rep.rank_errors[&16];
    let elapsed = t0.elapsed();
    let pass = (-2.2..=-1.8).contains(&slope) && err16 <= 1e-2 && elapsed <= BUDGET;
    report(
        "A2",
        pass,
        format!("slope {slope:.4} (want [-2.2, -1.8]), rank-16 error {err16:.3e} (limit 1e-2), {:.2} s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn a3_rank_bound_and_induced_kernel() {
    const RANK_TOL: f64 = 1e-10;
    const KERNEL_TOL: f64 = 1e-8;
    const BUDGET: Duration = Duration::from_secs(60);
    let _g = serial();
    let t0 = Instant::now();
    let (n, d) = (128, 32);
    let mut worst_tail = 0.0f64;
    let mut worst_kernel = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in [1, 4, 8] {
            let f = Tensor::randn(&[n, 1], 1.0, &mut rng);
            let x = Tensor::rand_uniform(&[n, 1], 0.0, 1.0, &mut rng);
            for variant in VARIANTS {
                // One head, so the stacked latent count equals M.
                let cfg = LrsaConfig { width: d, heads: 1, latent_count: m, num_freqs: 4, variant, ..LrsaConfig::default() };
                let model = LrsaModel::new(cfg, seed * 31 + m as u64).unwrap();
                let mut tape = Tape::new();
                let pv = model.bind_const(&mut tape);
                let fv = tape.constant(f.clone());
                let tr = model.forward_traced(&mut tape, &pv, fv, &x).unwrap();
                for b in &tr.blocks {
                    let s = svd(tape.value(b.delta)).unwrap().s;
                    worst_tail = worst_tail.max(s[m] / s[0]);
                }
            }
            // Factored kernel against the frozen pathway, one variant per seed.
            let variant = VARIANTS[seed as usize % VARIANTS.len()];
            let cfg = LrsaConfig { width: d, heads: 1, latent_count: m, num_freqs: 4, variant, ..LrsaConfig::default() };
            let model = LrsaModel::new(cfg, seed * 31 + m as u64).unwrap();
            for layer in 0..2 {
                let k = model.induced_kernel(layer, &f, &x).unwrap();
                assert_eq!(k.rank_bound, m);
                let w = Tensor::randn(&[n, d], 1.0, &mut rng);
                worst_kernel = worst_kernel.max(rel_diff(&k.apply_transpose(&w).unwrap(), &k.frozen_vjp(&model, &w).unwrap()));
                if matches!(variant, Variant::LinearNo | Variant::FixedBasis) {
                    // Linear in the values: the kernel reproduces the update itself.
                    worst_kernel = worst_kernel.max(rel_diff(&k.apply(&k.normed).unwrap(), &k.delta));
                } else {
                    let v = Tensor::randn(&[n, d], 1.0, &mut rng);
                    let lhs: f64 = k.apply(&v).unwrap().data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
                    let rhs: f64 = v.data().iter().zip(k.frozen_vjp(&model, &w).unwrap().data()).map(|(a, b)| a * b).sum();
                    worst_kernel = worst_kernel.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300));
                }
                worst_kernel = worst_kernel.max(rel_diff(&k.frozen_delta(&model, &k.normed).unwrap(), &k.delta));
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst_tail <= RANK_TOL && worst_kernel <= KERNEL_TOL && elapsed <= BUDGET;
    report(
        "A3",
        pass,
        format!(
            "max s_(M+1)/s_1 {worst_tail:.2e} (limit {RANK_TOL:e}), kernel vs direct {worst_kernel:.2e} (limit {KERNEL_TOL:e}), {:.1} s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a4_gradient_check_every_parameter() {
    const LIMIT: f64 = 1e-5;
    const STEP: f64 = 1e-5;
    const BUDGET: Duration = Duration::from_secs(300);
    let _g = serial();
    let t0 = Instant::now();
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = Tensor::randn(&[n, 1], 1.0, &mut rng);
    let x = midpoints(n);
    let probe = Tensor::rand_uniform(&[n, 1], 0.5, 1.5, &mut rng);
    let mut lines = Vec::new();
    let mut pass = true;
    for variant in VARIANTS {
        let cfg = LrsaConfig { depth: 2, width: 8, heads: 2, latent_count: 4, num_freqs: 2, variant, ..LrsaConfig::default() };
        let model = LrsaModel::new(cfg, 0).unwrap();
        let out0 = model.predict(&f, &x).unwrap();
        let params: Vec<Tensor> = model.params.tensors().cloned().collect();
        let rep = grad_check(
            |tape, v| {
                let fv = tape.constant(f.clone());
                let out = model.forward(tape, v, fv, &x)?;
                let c = tape.constant(out0.clone());
                let d = tape.sub(out, c)?;
                let w = tape.constant(probe.clone());
                let p = tape.mul(d, w)?;
                tape.sum(p)
            },
            &params,
            STEP,
        )
        .unwrap();
        pass &= rep.max_rel_error <= LIMIT;
        lines.push(format!(
            "{} rel {:.2e} (scaled {:.2e}, {} entries)",
            variant.name(),
            rep.max_rel_error,
            rep.max_scaled_error,
            rep.checked
        ));
    }
    let elapsed = t0.elapsed();
    pass &= elapsed <= BUDGET;
    report("A4", pass, format!("{}; limit {LIMIT:e}, {:.1} s", lines.join("; "), elapsed.as_secs_f64()));
    assert!(pass);
}

#[test]
fn a5_permutation_equivariance() {
    const LIMIT: f64 = 1e-12;
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let variant = VARIANTS[trial % VARIANTS.len()];
        let n = rng.gen_range(8..=128);
        let cfg = LrsaConfig { width: 32, heads: 4, latent_count: 8, variant, ..LrsaConfig::default() };
        let model = LrsaModel::new(cfg, trial as u64).unwrap();
        let f = Tensor::randn(&[n, 1], 1.0, &mut rng);
        let x = Tensor::rand_uniform(&[n, 1], 0.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let y = model.predict(&f, &x).unwrap();
        let yp = model.predict(&permute_rows(&f, &perm), &permute_rows(&x, &perm)).unwrap();
        worst = worst.max(max_abs_diff(&yp, &permute_rows(&y, &perm)));
    }
    let pass = worst <= LIMIT;
    report("A5", pass, format!("max deviation {worst:.2e} over 100 permutations (limit {LIMIT:e})"));
    assert!(pass);
}

#[test]
fn a6_quadrature_consistency() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let field = SmoothField1d::new(0.1, DEFAULT_MAX_MODE, &mut rng).unwrap();
    let model = LrsaModel::new(LrsaConfig::default(), 6).unwrap();
    let latents = |n: usize| {
        let x = midpoints(n);
        let f = x.map(|v| field.eval(v));
        let mut tape = Tape::new();
        let pv = model.bind_const(&mut tape);
        let fv = tape.constant(f);
        let tr = model.forward_traced(&mut tape, &pv, fv, &x).unwrap();
        tape.value(tr.blocks[0].latents.unwrap()).clone()
    };
    let zs: Vec<Tensor> = [32, 64, 128, 256].into_iter().map(latents).collect();
    let gaps: Vec<f64> = zs.windows(2).map(|w| frob(&w[1].sub(&w[0]).unwrap())).collect();
    let pass = gaps.windows(2).all(|w| w[1] < w[0]);
    report("A6", pass, format!("||Z_2N - Z_N|| for N = 32, 64, 128: {}", sci(&gaps)));
    assert!(pass);
}

#[test]
fn a7_near_linear_scaling() {
    let _g = serial();
    let cfg = LrsaConfig { latent_count: 64, ..LrsaConfig::default() };
    let (small, large) = (block_flops(&cfg, 512), block_flops(&cfg, 4096));
    let mixing = large.mixing as f64 / small.mixing as f64;
    let total = large.total as f64 / small.total as f64;
    let dense = dense_attention_flops(4096, cfg.width, cfg.heads) as f64 / dense_attention_flops(512, cfg.width, cfg.heads) as f64;
    // The analytic model must agree with what the tape actually counts.
    let measured = measure_block_flops(&cfg, 512, 7).unwrap();
    let counted = measured.mixing == small.mixing && measured.total == small.total;
    let mut clock = Vec::new();
    for n in [512, 4096] {
        let t0 = Instant::now();
        measure_block_flops(&cfg, n, 7).unwrap();
        clock.push(t0.elapsed().as_secs_f64());
    }
    // The whole block is asserted; the N-independent latent stage pulls its
    // ratio below that of the global mixing alone, which is reported too.
    let pass = (7.5..=8.5).contains(&total) && (dense - 64.0).abs() <= 1e-9 && counted;
    report(
        "A7",
        pass,
        format!(
            "block ratio {total:.3} (want [7.5, 8.5]), dense ratio {dense:.1}, global-mixing ratio {mixing:.3}, \
             tape count matches {counted}, wall-clock {:.3} s -> {:.3} s (x{:.2})",
            clock[0],
            clock[1],
            clock[1] / clock[0]
        ),
    );
    assert!(pass);
}

/// Reduced training budget shared by the ablation and rank sweeps.
const SWEEP_EPOCHS: usize = 100;
const SWEEP_WIDTH: usize = 32;

fn sweep_error(task: Task, variant: Variant, m: usize, seed: u64) -> f64 {
    let ds = make_dataset(task, 640, 64, 1).unwrap();
    let (tr, te) = ds.split_count(512, 0).unwrap();
    let model_cfg = LrsaConfig { width: SWEEP_WIDTH, heads: 4, latent_count: m, variant, ..LrsaConfig::default() };
    let cfg = TrainConfig { epochs: SWEEP_EPOCHS, seed, ..TrainConfig::default() };
    let out = train(&model_cfg, &tr, &te, &cfg, None).unwrap();
    evaluate(&out.model, &te).unwrap().rel_l2.unwrap()
}

/// Mean test error over three training seeds, and the per-seed values.
fn over_seeds(task: Task, variant: Variant, m: usize) -> (f64, Vec<f64>) {
    let errs: Vec<f64> = (0..3).map(|s| sweep_error(task, variant, m, s)).collect();
    (errs.iter().sum::<f64>() / 3.0, errs)
}

#[test]
fn a8_ablation_ordering() {
    let _g = serial();
    let t0 = Instant::now();
    let (full, full_s) = over_seeds(Task::Advection1d, Variant::Full, 8);
    let (no_intra, no_intra_s) = over_seeds(Task::Advection1d, Variant::NoIntraAttn, 8);
    let (tied, tied_s) = over_seeds(Task::Advection1d, Variant::SymmetricTied, 8);
    let pass = full <= no_intra && full <= tied;
    report(
        "A8",
        pass,
        format!(
            "mean test rel L2: full {full:.4e} {}, no_intra_attn {no_intra:.4e} {}, symmetric_tied {tied:.4e} {} \
             ({SWEEP_EPOCHS} epochs, width {SWEEP_WIDTH}, {:.0} s)",
            sci(&full_s),
            sci(&no_intra_s),
            sci(&tied_s),
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a9_rank_sensitivity() {
    let _g = serial();
    let t0 = Instant::now();
    let ms = [2, 4, 8, 32];
    let runs: Vec<(f64, Vec<f64>)> = ms.iter().map(|&m| over_seeds(Task::Poisson1d, Variant::Full, m)).collect();
    let errs: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let spread: Vec<String> = runs.iter().map(|r| sci(&r.1)).collect();
    let monotone = errs[0] >= errs[1] && errs[1] >= errs[2];
    let change = (errs[3] - errs[2]).abs() / errs[2];
    let pass = monotone && change < 0.2;
    report(
        "A9",
        pass,
        format!(
            "mean test rel L2 for M = {ms:?}: {}; change 8 -> 32 {:.1}% (limit 20%); per seed {} \
             ({SWEEP_EPOCHS} epochs, width {SWEEP_WIDTH}, {:.0} s)",
            sci(&errs),
            100.0 * change,
            spread.join(" "),
            t0.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a10_slicing_matches_attention() {
    const LIMIT: f64 = 1e-10;
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let m = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=8);
        let h = Tensor::randn(&[n, d], 1.0, &mut rng);
        let w = Tensor::randn(&[m, d], 1.0, &mut rng);
        let sliced = slicing_compress(&h, &w, SliceAxis::Points).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(w);
        let k = tape.constant(h.clone());
        let v = tape.constant(h);
        let att = sdpa_scaled(&mut tape, q, k, v, 1.0).unwrap();
        worst = worst.max(max_abs_diff(&sliced, tape.value(att)));
    }
    let pass = worst <= LIMIT;
    report("A10", pass, format!("max deviation {worst:.2e} over 100 instances (limit {LIMIT:e})"));
    assert!(pass);
}
