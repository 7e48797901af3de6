use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use segdiff_core::ablation::Mask;
use segdiff_core::eval::linalg::symmetric_eigen;
use segdiff_core::eval::{
    dataset_dice, eval_empty_mask, eval_faithfulness, eval_quality, feature_fid,
    fid_from_gaussians, organ_found_fraction, segment_all, stack_images, EvalReport, Gaussian,
    NoiseGenerator, OracleGenerator,
};
use segdiff_core::phantom::{gen_sample, LabeledSample, PhantomConfig};
use segdiff_core::train::{train_segmenter, SegPair, SegmenterConfig};
use segdiff_core::unet::{UNet, UNetConfig};
use segdiff_core::Error;

fn phantoms(range: std::ops::Range<u64>) -> Vec<LabeledSample> {
    let c = PhantomConfig::default();
    range.map(|i| gen_sample(&c, i).unwrap()).collect()
}

fn pairs(data: &[LabeledSample]) -> Vec<SegPair> {
    data.iter()
        .map(|d| SegPair {
            image: d.image.clone(),
            mask: d.mask.clone(),
        })
        .collect()
}

/// A segmenter trained once on 128 phantoms and shared by the tests below.
fn segmenter() -> &'static UNet<f32> {
    static NET: OnceLock<UNet<f32>> = OnceLock::new();
    NET.get_or_init(|| {
        let start = Instant::now();
        let cfg = SegmenterConfig {
            epochs: 20,
            batch_size: 8,
            ..Default::default()
        };
        let run = train_segmenter(
            &pairs(&phantoms(0..128)),
            &pairs(&phantoms(128..144)),
            &cfg,
            &UNetConfig::segmenter(4),
        )
        .unwrap();
        eprintln!("shared segmenter trained in {:?}", start.elapsed());
        run.checkpoint.to_net().unwrap()
    })
}

fn sym_random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = rng.sample(StandardNormal);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    m
}

/// Roots of the characteristic polynomial of a symmetric 3x3 matrix by the
/// trigonometric cubic formula, ascending.
fn cubic_eigen(m: &[f64]) -> [f64; 3] {
    let (a, b, c, d, e, f) = (m[0], m[4], m[8], m[1], m[5], m[2]);
    let q = (a + b + c) / 3.0;
    let p1 = d * d + e * e + f * f;
    let p2 = (a - q).powi(2) + (b - q).powi(2) + (c - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let bm = [
        (a - q) / p,
        d / p,
        f / p,
        d / p,
        (b - q) / p,
        e / p,
        f / p,
        e / p,
        (c - q) / p,
    ];
    let det = bm[0] * (bm[4] * bm[8] - bm[5] * bm[7]) - bm[1] * (bm[3] * bm[8] - bm[5] * bm[6])
        + bm[2] * (bm[3] * bm[7] - bm[4] * bm[6]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let mut out = [l1, 3.0 * q - l1 - l3, l3];
    out.sort_by(f64::total_cmp);
    out
}

#[test]
fn jacobi_matches_characteristic_polynomial() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let m = sym_random(&mut rng, 2);
        let (a, b, d) = (m[0], m[1], m[3]);
        let mid = (a + d) / 2.0;
        let rad = (((a - d) / 2.0).powi(2) + b * b).sqrt();
        let e = symmetric_eigen(&m, 2).unwrap();
        assert!((e.values[0] - (mid - rad)).abs() < 1e-10);
        assert!((e.values[1] - (mid + rad)).abs() < 1e-10);

        let m = sym_random(&mut rng, 3);
        let want = cubic_eigen(&m);
        let e = symmetric_eigen(&m, 3).unwrap();
        for k in 0..3 {
            assert!(
                (e.values[k] - want[k]).abs() < 1e-10,
                "{:?} vs {want:?}",
                e.values
            );
        }
    }
}

#[test]
fn jacobi_reconstructs_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [1, 2, 5, 17, 32, 64] {
        let m = sym_random(&mut rng, n);
        let e = symmetric_eigen(&m, n).unwrap();
        let back = e.reconstruct_with(|v| v);
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let err = m
            .iter()
            .zip(&back)
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        assert!(err < 1e-8 * scale, "n={n} err {err}");
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
    }
    assert!(symmetric_eigen(&[1.0, 2.0, 0.0, 1.0], 2).is_err());
}

fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    shift + rng.sample::<f64, _>(StandardNormal) * (1.0 + (i % 3 + j) as f64 * 0.1)
                })
                .collect()
        })
        .collect()
}

#[test]
fn fid_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = gaussian_rows(&mut rng, 200, 32, 0.0);
    let b = gaussian_rows(&mut rng, 150, 32, 0.3);
    assert!(feature_fid(&a, &a).unwrap().abs() <= 1e-6);
    let ab = feature_fid(&a, &b).unwrap();
    let ba = feature_fid(&b, &a).unwrap();
    assert!((ab - ba).abs() <= 1e-6, "{ab} vs {ba}");
    assert!(ab > 0.0);
    let doubled: Vec<Vec<f64>> = a.iter().chain(&a).cloned().collect();
    assert!(feature_fid(&a, &doubled).unwrap().abs() <= 1e-6);
    assert!(matches!(feature_fid(&a[..32], &b), Err(Error::Contract(_))));
}

#[test]
fn fid_one_dimensional_closed_form() {
    // {-1, 1} fits N(0, 1); {0, 2} fits N(1, 1)
    let a = vec![vec![-1.0], vec![1.0]];
    let b = vec![vec![0.0], vec![2.0]];
    assert!((feature_fid(&a, &b).unwrap() - 1.0).abs() < 1e-9);
    let ga = Gaussian {
        dim: 1,
        mean: vec![0.0],
        cov: vec![4.0],
    };
    let gb = Gaussian {
        dim: 1,
        mean: vec![0.5],
        cov: vec![1.0],
    };
    // (0.5)^2 + (2 - 1)^2
    assert!((fid_from_gaussians(&ga, &gb).unwrap() - 1.25).abs() < 1e-12);
    let bad = Gaussian {
        dim: 1,
        mean: vec![0.0],
        cov: vec![-1.0],
    };
    assert!(matches!(
        fid_from_gaussians(&bad, &gb),
        Err(Error::Numerical(_))
    ));
}

#[test]
fn report_validation_and_text() {
    let mut r = EvalReport::new("demo");
    r.set("dice_x", 0.5);
    r.set("fid", 0.0);
    r.set("dice_gap", -0.2);
    assert!(r.validate().is_ok());
    assert!(r.to_text().contains("dice_x = 0.500000"));
    assert!(r.to_tsv().starts_with("metric\tvalue\n"));
    r.set("dice_x", 1.5);
    assert!(r.validate().is_err());
    r.set("dice_x", 0.5);
    r.set("fid", -1e-3);
    assert!(r.validate().is_err());
}

#[test]
fn segmenter_overfits_small_set() {
    let data = phantoms(200..208);
    let cfg = SegmenterConfig {
        epochs: 150,
        batch_size: 4,
        ..Default::default()
    };
    let run = train_segmenter(
        &pairs(&data),
        &pairs(&data),
        &cfg,
        &UNetConfig::segmenter(4),
    )
    .unwrap();
    assert_eq!(run.losses.len(), 300);
    let net = run.checkpoint.to_net().unwrap();
    let (pred, _) = segment_all(&net, &stack_images(&data).unwrap()).unwrap();
    let masks: Vec<Mask> = data.iter().map(|d| d.mask.clone()).collect();
    let (d, _) = dataset_dice(&pred, &masks).unwrap();
    eprintln!("overfit dice {d:.4}");
    assert!(d > 0.9, "dice {d}");
}

#[test]
fn faithfulness_with_oracle_and_noise() {
    let test = phantoms(300..340);
    let images = stack_images(&test).unwrap();
    let masks: Vec<Mask> = test.iter().map(|d| d.mask.clone()).collect();
    let oracle = OracleGenerator {
        images: test.iter().map(|d| d.image.clone()).collect(),
    };
    let r = eval_faithfulness(&oracle, segmenter(), &masks, &images).unwrap();
    assert_eq!(r.get("dice_gen_vs_real"), Some(1.0));
    assert!(r.validate().is_ok());
    assert!(r.get("dice_real_vs_mask").unwrap() > 0.8);
    let noise =
        eval_faithfulness(&NoiseGenerator { seed: 1 }, segmenter(), &masks, &images).unwrap();
    let d = noise.get("dice_gen_vs_mask").unwrap();
    eprintln!("noise dice {d:.4}");
    assert!(d < 0.2, "noise dice {d}");
    let short = OracleGenerator { images: vec![] };
    assert!(eval_faithfulness(&short, segmenter(), &masks, &images).is_err());
}

#[test]
fn quality_with_identity_oracle_has_zero_gap() {
    let heldout = phantoms(400..416);
    let val = phantoms(416..420);
    let test = phantoms(420..428);
    let oracle = OracleGenerator {
        images: heldout.iter().map(|d| d.image.clone()).collect(),
    };
    let cfg = SegmenterConfig {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    let q = eval_quality(
        &heldout,
        &oracle,
        &val,
        &test,
        &cfg,
        &UNetConfig::segmenter(4),
    )
    .unwrap();
    assert_eq!(q.report.get("dice_gap"), Some(0.0));
    assert_eq!(q.report.get("dice_real"), q.report.get("dice_synthetic"));
    let overlap = eval_quality(
        &heldout,
        &oracle,
        &heldout[..2],
        &test,
        &cfg,
        &UNetConfig::segmenter(4),
    );
    assert!(matches!(overlap, Err(Error::Config(_))));
}

#[test]
fn empty_mask_protocol_edges() {
    let real = stack_images(&phantoms(500..540)).unwrap();
    let gen = OracleGenerator { images: vec![] };
    let r = eval_empty_mask(&gen, &gen, segmenter(), &real, 0).unwrap();
    assert!(r.is_empty());
    let (pred, _) = segment_all(segmenter(), &real).unwrap();
    assert_eq!(organ_found_fraction(&pred), 1.0);
    let a = OracleGenerator {
        images: phantoms(600..640).into_iter().map(|d| d.image).collect(),
    };
    let u = NoiseGenerator { seed: 4 };
    let r = eval_empty_mask(&a, &u, segmenter(), &real, 40).unwrap();
    assert_eq!(r.get("organ_found.real"), Some(1.0));
    assert_eq!(r.get("fid_ablated_le_unconditional"), Some(1.0));
    assert!(r.get("fid_ablated").unwrap() < r.get("fid_unconditional").unwrap());
}
