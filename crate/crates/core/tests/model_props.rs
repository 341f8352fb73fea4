//! Structural properties of the backbone that hold for any parameters:
//! the rank of the mixing update, permutation equivariance, and the
//! gradient bookkeeping of tied projections.

use lrsa_core::autodiff::grad_check;
use lrsa_core::lrsa::{LrsaConfig, LrsaModel, Variant};
use lrsa_core::spectral::svd;
use lrsa_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VARIANTS: [Variant; 5] =
    [Variant::Full, Variant::NoIntraAttn, Variant::SymmetricTied, Variant::LinearNo, Variant::FixedBasis];

fn small_config(variant: Variant, m: usize, heads: usize) -> LrsaConfig {
    LrsaConfig {
        depth: 2,
        width: 8,
        heads,
        latent_count: m,
        num_freqs: 2,
        variant,
        ..LrsaConfig::default()
    }
}

fn sample(n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    (Tensor::randn(&[n, 1], 1.0, rng), Tensor::rand_uniform(&[n, 1], 0.0, 1.0, rng))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.last_dim();
    let data = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::from_vec(&[perm.len(), c], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mixing_update_rank_is_at_most_latent_count(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(10..33);
        let m = rng.gen_range(1..5);
        for variant in VARIANTS {
            let model = LrsaModel::new(small_config(variant, m, 1), seed).unwrap();
            let (f, x) = sample(n, &mut rng);
            let mut tape = Tape::new();
            let pv = model.bind_const(&mut tape);
            let fv = tape.constant(f);
            let tr = model.forward_traced(&mut tape, &pv, fv, &x).unwrap();
            for b in &tr.blocks {
                let s = svd(tape.value(b.delta)).unwrap().s;
                prop_assert!(s[0] > 0.0);
                if s.len() > m {
                    prop_assert!(s[m] / s[0] <= 1e-10, "{variant:?} n={n} m={m}: {:e}", s[m] / s[0]);
                }
            }
        }
    }

    #[test]
    fn predictions_follow_point_permutations(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(5..20);
        let m = rng.gen_range(1..5);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for variant in VARIANTS {
            let model = LrsaModel::new(small_config(variant, m, 2), seed).unwrap();
            let (f, x) = sample(n, &mut rng);
            let y = model.predict(&f, &x).unwrap();
            let yp = model.predict(&permute_rows(&f, &perm), &permute_rows(&x, &perm)).unwrap();
            let expect = permute_rows(&y, &perm);
            for (a, b) in yp.data().iter().zip(expect.data()) {
                prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{variant:?}");
            }
        }
    }
}

#[test]
fn tied_projection_gradient_is_the_sum_of_both_roles() {
    let tied = LrsaModel::new(small_config(Variant::SymmetricTied, 3, 2), 21).unwrap();
    let mut full = LrsaModel::new(small_config(Variant::Full, 3, 2), 21).unwrap();
    for (name, value) in tied.params.iter() {
        let id = full.params.find(name).unwrap();
        *full.params.get_mut(id) = value.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (f, x) = sample(9, &mut rng);
    let probe = Tensor::rand_uniform(&[9, 1], 0.5, 1.5, &mut rng);

    for layer in 0..2 {
        let shared = tied.params.find(&format!("layers.{layer}.down.wk")).unwrap();
        let qid = full.params.find(&format!("layers.{layer}.up.wq")).unwrap();
        *full.params.get_mut(qid) = tied.params.get(shared).clone();
    }
    for layer in 0..2 {
        let shared = format!("layers.{layer}.down.wk");
        let qid = full.params.find(&format!("layers.{layer}.up.wq")).unwrap();

        let grads_of = |model: &LrsaModel| {
            let mut tape = Tape::new();
            let pv = model.bind(&mut tape);
            let fv = tape.constant(f.clone());
            let out = model.forward(&mut tape, &pv, fv, &x).unwrap();
            let w = tape.constant(probe.clone());
            let p = tape.mul(out, w).unwrap();
            let s = tape.sum(p).unwrap();
            let g = tape.backward_scalar(s).unwrap();
            (pv, g)
        };
        let (pv_t, g_t) = grads_of(&tied);
        let (pv_f, g_f) = grads_of(&full);
        let shape = [8, 8];
        let gt = g_t.get_or_zeros(pv_t[tied.params.find(&shared).unwrap().index()], &shape);
        let gk = g_f.get_or_zeros(pv_f[full.params.find(&shared).unwrap().index()], &shape);
        let gq = g_f.get_or_zeros(pv_f[qid.index()], &shape);
        for ((t, k), q) in gt.data().iter().zip(gk.data()).zip(gq.data()) {
            assert!((t - (k + q)).abs() <= 1e-12 * (1.0 + t.abs()), "{t} vs {k} + {q}");
        }

        // And the tied gradient itself against central differences.
        let sid = tied.params.find(&shared).unwrap();
        let out0 = tied.predict(&f, &x).unwrap();
        let rep = grad_check(
            |tape, v| {
                let mut pv = tied.bind_const(tape);
                pv[sid.index()] = v[0];
                let fv = tape.constant(f.clone());
                let out = tied.forward(tape, &pv, fv, &x)?;
                let c = tape.constant(out0.clone());
                let d = tape.sub(out, c)?;
                let w = tape.constant(probe.clone());
                let p = tape.mul(d, w)?;
                tape.sum(p)
            },
            &[tied.params.get(sid).clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-5, "layer {layer}: {rep:?}");
    }
}
