mod common;

use common::LossParams;
use lesionkit::losses::{
    base_loss, cat_index, cat_loss, component_weights, mil_loss, soft_dice_coefficient,
    tversky_loss,
};
use lesionkit::{
    BinaryMask, Dims, LossConfig, Objective, ProbabilityVolume, Spacing, Target, Volume,
};
use rand::Rng;

fn params(cfg: &LossConfig) -> LossParams {
    LossParams {
        alpha: cfg.alpha,
        beta: cfg.beta,
        gamma: cfg.gamma,
        delta: cfg.delta,
        eps_weight: cfg.eps_weight,
        w_bg: cfg.w_bg,
        eps_mil: cfg.eps_mil,
        connectivity: cfg.connectivity.as_u8(),
    }
}

fn prob(d: Dims, v: Vec<f64>) -> ProbabilityVolume {
    ProbabilityVolume::new(Volume::new(d, Spacing::default(), v).unwrap()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn values_match_scalar_formulas() {
    let mut rng = common::rng(1);
    for _ in 0..100 {
        let d = common::random_dims(&mut rng, 7);
        let (p, gt) = common::random_prob_instance(&mut rng, d);
        let cfg = LossConfig {
            gamma: [0.0, 0.5, 1.0][rng.random_range(0..3)],
            alpha: rng.random_range(0.0..1.0),
            beta: rng.random_range(0.0..1.0),
            w_bg: rng.random_range(0.1..2.0),
            ..Default::default()
        };
        let q = params(&cfg);
        let (pv, gv) = (p.data(), gt.data());
        assert!(close(
            cat_loss(&p, &gt, &cfg).unwrap().value,
            common::cat_value(d, pv, gv, &q),
            1e-12
        ));
        assert!(close(
            mil_loss(&p, &gt, &cfg).unwrap().value,
            common::mil_value(d, pv, gv, &q),
            1e-12
        ));
        assert!(close(
            base_loss(&p, &gt, &cfg).unwrap().value,
            common::dice_ce_value(pv, gv, &q),
            1e-12
        ));
        let flat = LossParams {
            gamma: 0.0,
            w_bg: 1.0,
            ..params(&cfg)
        };
        assert!(close(
            tversky_loss(&p, &gt, &cfg).unwrap().value,
            common::cat_value(d, pv, gv, &flat),
            1e-12
        ));

        let target = Target::new(&gt, &cfg);
        for step in [0u64, 7, 50, 400] {
            let lc = cfg.lambda_cat(step);
            let want = common::dice_ce_value(pv, gv, &q)
                + lc * common::cat_value(d, pv, gv, &q)
                + cfg.lambda_mil * common::mil_value(d, pv, gv, &q);
            let got = Objective::Catmil
                .evaluate(&p, &target, &cfg, step)
                .unwrap()
                .value;
            assert!(close(got, want, 1e-12), "step {step}: {got} vs {want}");
        }
    }
}

fn near_tie_voxels(d: Dims, p: &[f64], g: &[bool], conn: u8, h: f64) -> Vec<bool> {
    let mut skip = vec![false; p.len()];
    for c in common::bfs_components(d, g, conn) {
        let s = c.iter().map(|&v| p[v]).fold(f64::NEG_INFINITY, f64::max);
        let close: Vec<usize> = c.iter().copied().filter(|&v| s - p[v] <= 2.0 * h).collect();
        if close.len() > 1 {
            for v in close {
                skip[v] = true;
            }
        }
    }
    skip
}

#[test]
fn gradients_match_central_differences() {
    let h = 1e-6;
    let mut rng = common::rng(2);
    for o in Objective::ALL {
        for _ in 0..25 {
            let d = common::random_dims(&mut rng, 6);
            let (p, gt) = common::random_prob_instance(&mut rng, d);
            let cfg = LossConfig {
                gamma: [0.0, 0.5, 1.0][rng.random_range(0..3)],
                ..Default::default()
            };
            let step = rng.random_range(0..100);
            let target = Target::new(&gt, &cfg);
            let analytic = o.evaluate(&p, &target, &cfg, step).unwrap();
            let numeric = common::central_differences(p.data(), h, |x| {
                o.evaluate(&prob(d, x.to_vec()), &target, &cfg, step)
                    .unwrap()
                    .value
            });
            let skip = near_tie_voxels(d, p.data(), gt.data(), cfg.connectivity.as_u8(), h);
            let uses_mil = matches!(o, Objective::Mil | Objective::Catmil);
            for (i, (&a, &n)) in analytic.grad.data().iter().zip(&numeric).enumerate() {
                if uses_mil && skip[i] {
                    continue;
                }
                // Below 1e-4 the comparison is absolute (1e-9), the resolution of
                // central differences with h = 1e-6 on O(1) losses.
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                assert!(rel < 1e-5, "{o} voxel {i}: analytic {a} numeric {n}");
            }
        }
    }
}

#[test]
fn cat_reduces_to_tversky_and_soft_dice() {
    let mut rng = common::rng(3);
    for _ in 0..50 {
        let d = common::random_dims(&mut rng, 8);
        let (p, gt) = common::random_prob_instance(&mut rng, d);
        let cfg = LossConfig {
            gamma: 0.0,
            w_bg: 1.0,
            ..Default::default()
        };
        let cat = cat_loss(&p, &gt, &cfg).unwrap();
        let tv = tversky_loss(&p, &gt, &cfg).unwrap();
        assert!((cat.value - tv.value).abs() <= 1e-12);
        for (a, b) in cat.grad.data().iter().zip(tv.grad.data()) {
            assert!((a - b).abs() <= 1e-12);
        }

        // With α = β = 1/2 the index's smoothing term enters twice as the
        // Dice coefficient's: TI(δ) = SoftDice(2δ).
        let half = LossConfig {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.0,
            w_bg: 1.0,
            ..Default::default()
        };
        let ti = cat_index(&p, &Target::new(&gt, &half), &half).unwrap();
        let sd = soft_dice_coefficient(p.data(), gt.data(), 2.0 * half.delta);
        assert!((ti - sd).abs() <= 1e-12, "{ti} vs {sd}");
    }
}

#[test]
fn lesion_weights_balance_components() {
    let cfg = LossConfig::default();
    // Components of 1, 10, 1000 and 100000 voxels, separated by empty planes.
    let d = Dims::new(100, 100, 16);
    let mut m = vec![false; d.len()];
    m[d.index(0, 0, 0)] = true;
    for x in 0..10 {
        m[d.index(x, 0, 2)] = true;
    }
    for i in 0..1000 {
        m[d.index(i % 100, i / 100, 4)] = true;
    }
    for z in 6..16 {
        for i in 0..10_000 {
            m[d.index(i % 100, i / 100, z)] = true;
        }
    }
    let gt = BinaryMask::new(d, Spacing::default(), m).unwrap();
    let target = Target::new(&gt, &cfg);
    let sizes = target.labeling().sizes();
    assert_eq!(sizes, vec![1, 10, 1000, 100_000]);
    let w = component_weights(&gt, &cfg).weights;
    for c in target.labeling().components() {
        let total: f64 = c.voxels.iter().map(|&v| w.data()[v]).sum();
        assert!(
            total > 1.0 - 1e-5 && total < 1.0,
            "size {}: {total}",
            c.size()
        );
    }
}

#[test]
fn mil_without_foreground_is_exactly_zero() {
    let mut rng = common::rng(4);
    for _ in 0..20 {
        let d = common::random_dims(&mut rng, 6);
        let p = prob(
            d,
            (0..d.len()).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let gt = BinaryMask::new(d, Spacing::default(), vec![false; d.len()]).unwrap();
        let r = mil_loss(&p, &gt, &LossConfig::default()).unwrap();
        assert_eq!(r.value.to_bits(), 0.0f64.to_bits());
        assert!(r
            .grad
            .data()
            .iter()
            .all(|g| g.to_bits() == 0.0f64.to_bits()));
    }
}
