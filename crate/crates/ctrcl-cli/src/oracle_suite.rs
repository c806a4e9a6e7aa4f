//! The `oracle-test` command: vectorized implementations against the scalar
//! references on random instances, printed one line per check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ctrcl_core::cfcl::{cpm, CPM_ALPHA, PROTO_EPS};
use ctrcl_core::error::Result;
use ctrcl_core::labels::LabelBatch;
use ctrcl_core::metrics::{boundary, dsc, hsd, jac, mae, Mask};
use ctrcl_core::oracle;
use ctrcl_core::rlcl::{arm, LambdaConfig};
use ctrcl_core::tensor::Tensor;

const TOL: f64 = 1e-9;

fn random_probs(rng: &mut ChaCha8Rng, n: usize, l: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = vec![0.0; n * l * hw];
    for s in 0..n {
        for pix in 0..hw {
            let raw: Vec<f64> = (0..l).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for (c, v) in raw.iter().enumerate() {
                data[(s * l + c) * hw + pix] = v / sum;
            }
        }
    }
    Tensor::new(vec![n, l, h, w], data).expect("valid shape")
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize, h: usize, w: usize) -> LabelBatch {
    LabelBatch::new(
        n,
        h,
        w,
        (0..n * h * w).map(|_| rng.random_range(0..classes) as u8).collect(),
    )
    .expect("valid labels")
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    Mask::new(h, w, (0..h * w).map(|_| rng.random_bool(0.35)).collect())
}

struct Check {
    name: &'static str,
    worst: f64,
}

/// Runs all oracle-equivalence checks; returns false (nonzero exit) if any
/// deviates beyond tolerance.
pub fn run() -> Result<bool> {
    let mut checks = Vec::new();

    // Rectification maps, 50 random instances.
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = random_probs(&mut rng, 2, 4, 6, 6);
        let y = random_labels(&mut rng, 2, 4, 6, 6);
        let got = arm(&p, &y, LambdaConfig::Full)?;
        let want = oracle::arm_ref(p.data(), 2, 4, 6, 6, &y);
        for (a, b) in got.probs.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    checks.push(Check { name: "arm_vs_scalar_reference", worst });

    // Class-aware representations, 50 random instances.
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, c, h, w) = (2, 4, 4, 4);
        let data = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = Tensor::new(vec![n, c, h, w], data)?;
        let y = random_labels(&mut rng, n, 4, h, w);
        let rep = cpm(&f, &y)?;
        let want = oracle::cpm_ref(f.data(), n, c, h, w, &y, PROTO_EPS, CPM_ALPHA);
        for (s, (ids, map)) in want.iter().enumerate() {
            assert_eq!(&rep.per_sample[s].class_ids, ids, "class slots diverged");
            for (a, b) in rep.per_sample[s].rep.data().iter().zip(map) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    checks.push(Check { name: "cpm_vs_scalar_reference", worst });

    // Metrics against brute-force references, 50 random mask pairs each.
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let (mut wd, mut wj, mut wh, mut wm, mut wb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let a = random_mask(&mut rng, 16, 16);
        let b = random_mask(&mut rng, 16, 16);
        wd = wd.max((dsc(&a, &b) - oracle::dsc_ref(&a.data, &b.data)).abs());
        wj = wj.max((jac(&a, &b) - oracle::jac_ref(&a.data, &b.data)).abs());
        wh = wh.max((hsd(&a, &b) - oracle::hsd_ref(&a.data, &b.data, 16, 16)).abs());
        wm = wm.max((mae(&a, &b) - oracle::mae_ref(&a.data, &b.data)).abs());
        let got = boundary(&a);
        let want = oracle::boundary_ref(&a.data, 16, 16);
        wb = wb.max(if got == want { 0.0 } else { 1.0 });
    }
    checks.push(Check { name: "dsc_vs_brute_force", worst: wd });
    checks.push(Check { name: "jac_vs_brute_force", worst: wj });
    checks.push(Check { name: "hsd_vs_brute_force", worst: wh });
    checks.push(Check { name: "mae_vs_brute_force", worst: wm });
    checks.push(Check { name: "boundary_vs_scalar_reference", worst: wb });

    // Nearest-neighbor label downsampling, exhaustive small sizes.
    let mut rng = ChaCha8Rng::seed_from_u64(1004);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let h = rng.random_range(2..=16);
        let w = rng.random_range(2..=16);
        let oh = rng.random_range(1..=h);
        let ow = rng.random_range(1..=w);
        let data: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..5) as u8).collect();
        let batch = LabelBatch::new(1, h, w, data.clone())?;
        let got = batch.nearest_downsample(oh, ow)?;
        let want = oracle::nearest_downsample_ref(&data, h, w, oh, ow);
        if got.data != want {
            worst = 1.0;
        }
    }
    checks.push(Check { name: "nearest_downsample_vs_reference", worst });

    // Bilinear upsampling against the scalar interpolation reference.
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..=5), rng.random_range(2..=5));
        let (oh, ow) = (h * rng.random_range(1..=3), w * rng.random_range(1..=3));
        let data: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![1, 1, h, w], data.clone())?;
        let got = t.bilinear_upsample(oh, ow)?;
        let want = oracle::bilinear_ref(&data, h, w, oh, ow);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    checks.push(Check { name: "bilinear_vs_scalar_reference", worst });

    // Matmul and conv against naive loops.
    let mut rng = ChaCha8Rng::seed_from_u64(1006);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (m, k, n) = (
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        );
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = Tensor::new(vec![m, k], a.clone())?
            .matmul(&Tensor::new(vec![k, n], b.clone())?)?;
        let want = oracle::matmul_ref(m, k, n, &a, &b);
        for (x, y) in got.data().iter().zip(&want) {
            worst = worst.max((x - y).abs());
        }
    }
    checks.push(Check { name: "matmul_vs_triple_loop", worst });

    let mut rng = ChaCha8Rng::seed_from_u64(1007);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (n, c, o) = (2, rng.random_range(1..=3), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(4..=7), rng.random_range(4..=7));
        let stride = rng.random_range(1..=2);
        let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let kw: Vec<f64> = (0..o * c * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = Tensor::new(vec![n, c, h, w], x.clone())?
            .conv2d(&Tensor::new(vec![o, c, 3, 3], kw.clone())?, stride, 1)?;
        let want = oracle::conv2d_ref(&x, n, c, h, w, &kw, o, 3, 3, stride, 1);
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    checks.push(Check { name: "conv2d_vs_naive_loops", worst });

    let mut ok = true;
    for c in &checks {
        let pass = c.worst <= TOL;
        ok &= pass;
        println!(
            "{:34} max abs dev {:\u{2007}>12.3e}  {}",
            c.name,
            c.worst,
            if pass { "pass" } else { "FAIL" }
        );
    }
    println!("{} oracle checks at tolerance {TOL:.0e}", checks.len());
    Ok(ok)
}
