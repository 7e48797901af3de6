use std::sync::Mutex;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use segdiff_core::ablation::Mask;
use segdiff_core::autodiff::Tensor;
use segdiff_core::diffusion::{
    ddim_step, forward_sample, initial_noise, linear_schedule, sample, sample_indexed,
    NoisePredictor, NoiseSchedule, SamplerConfig, SamplerKind,
};
use segdiff_core::unet::{UNet, UNetConfig};
use segdiff_core::Result;

/// Predicts zero noise and records every mask channel it is shown.
#[derive(Default)]
struct ZeroProbe {
    seen: Mutex<Vec<(Vec<usize>, Vec<f32>)>>,
}

impl NoisePredictor<f32> for ZeroProbe {
    fn image_channels(&self) -> usize {
        1
    }

    fn predict(&self, x_t: &Tensor<f32>, mask: &Tensor<f32>, ts: &[usize]) -> Result<Tensor<f32>> {
        self.seen
            .lock()
            .unwrap()
            .push((ts.to_vec(), mask.data().to_vec()));
        Ok(Tensor::zeros(x_t.shape().to_vec()))
    }
}

fn striped_mask(size: usize) -> Mask {
    let labels = (0..size * size)
        .map(|i| ((i % size) * 4 / size) as u8)
        .collect();
    Mask::new(size, size, 4, labels).unwrap()
}

#[test]
fn zero_prediction_ddim_telescopes() {
    let s = NoiseSchedule::desk_default();
    let masks = vec![striped_mask(8), Mask::empty(8, 8, 4)];
    let cfg = SamplerConfig::ddim(&s, 5);
    let out = sample(&ZeroProbe::default(), &masks, &s, &cfg).unwrap();
    let scale = 1.0 / s.alpha_bar(200).unwrap().sqrt();
    for i in 0..2 {
        let x_t = initial_noise::<f64>(5, i as u64, &[1, 1, 8, 8]);
        let got = out.slice_outer(i, i + 1).unwrap();
        for (g, x) in got.data().iter().zip(x_t.data()) {
            let want = x * scale;
            assert!(
                ((*g as f64 - want) / want.abs().max(1.0)).abs() < 1e-5,
                "{g} vs {want}"
            );
        }
    }
}

#[test]
fn mask_channel_is_fed_at_every_step() {
    let s = linear_schedule(40, 1e-3, 0.2).unwrap();
    let mask = striped_mask(8);
    let probe = ZeroProbe::default();
    let cfg = SamplerConfig {
        kind: SamplerKind::Ddim,
        num_inference_steps: 7,
        seed: 1,
        batch_size: 4,
    };
    sample(&probe, std::slice::from_ref(&mask), &s, &cfg).unwrap();
    let seen = probe.seen.lock().unwrap();
    assert_eq!(seen.len(), 7);
    let want: Vec<f32> = mask.labels().iter().map(|&l| l as f32 / 3.0).collect();
    let visited: Vec<usize> = seen.iter().map(|(ts, _)| ts[0]).collect();
    assert_eq!(visited, cfg.timesteps(&s).unwrap());
    for (_, m) in seen.iter() {
        assert_eq!(m, &want);
    }
}

#[test]
fn ddim_with_all_steps_visits_every_timestep() {
    let s = linear_schedule(30, 1e-3, 0.2).unwrap();
    let probe = ZeroProbe::default();
    let cfg = SamplerConfig {
        kind: SamplerKind::Ddim,
        num_inference_steps: 30,
        seed: 0,
        batch_size: 1,
    };
    sample(&probe, &[Mask::empty(4, 4, 2)], &s, &cfg).unwrap();
    let visited: Vec<usize> = probe
        .seen
        .lock()
        .unwrap()
        .iter()
        .map(|(ts, _)| ts[0])
        .collect();
    assert_eq!(visited, (1..=30).rev().collect::<Vec<_>>());
}

#[test]
fn too_many_steps_is_an_error() {
    let s = linear_schedule(10, 1e-3, 0.2).unwrap();
    let mut cfg = SamplerConfig::ddim(&s, 0);
    cfg.num_inference_steps = 11;
    assert!(sample(&ZeroProbe::default(), &[Mask::empty(4, 4, 2)], &s, &cfg).is_err());
    let mut ddpm = SamplerConfig::ddpm(&s, 0);
    ddpm.num_inference_steps = 5;
    assert!(sample(&ZeroProbe::default(), &[Mask::empty(4, 4, 2)], &s, &ddpm).is_err());
}

#[test]
fn sampling_is_seed_deterministic_and_batch_independent() {
    let s = linear_schedule(40, 1e-3, 0.2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut config = UNetConfig::denoiser(4);
    config.base_channels = 8;
    config.image_size = 8;
    let mut net = UNet::<f32>::init(config, &mut rng).unwrap();
    // give the zero-initialised output layer some weight so the model matters
    for (name, t) in net
        .params_mut()
        .names()
        .to_vec()
        .iter()
        .zip(net.params_mut().tensors_mut())
    {
        if name.starts_with("out.conv") {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i % 7) as f32 - 3.0) * 0.01;
            }
        }
    }
    let masks: Vec<Mask> = (0..5)
        .map(|i| {
            if i % 2 == 0 {
                striped_mask(8)
            } else {
                Mask::empty(8, 8, 4)
            }
        })
        .collect();
    for kind in [SamplerKind::Ddim, SamplerKind::Ddpm] {
        let mut cfg = match kind {
            SamplerKind::Ddim => SamplerConfig::ddim(&s, 7),
            SamplerKind::Ddpm => SamplerConfig::ddpm(&s, 7),
        };
        cfg.batch_size = 5;
        let a = sample(&net, &masks, &s, &cfg).unwrap();
        let b = sample(&net, &masks, &s, &cfg).unwrap();
        assert_eq!(a, b);
        cfg.batch_size = 2;
        let c = sample(&net, &masks, &s, &cfg).unwrap();
        assert_eq!(a, c, "{kind} depends on batching");
        let tail = sample_indexed(&net, &masks[3..], 3, &s, &cfg).unwrap();
        assert_eq!(a.slice_outer(3, 5).unwrap(), tail);
        cfg.seed = 8;
        assert_ne!(a, sample(&net, &masks, &s, &cfg).unwrap());
    }
}

#[test]
fn untrained_unet_matches_zero_prediction() {
    let s = NoiseSchedule::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut config = UNetConfig::denoiser(4);
    config.base_channels = 8;
    config.image_size = 8;
    let net = UNet::<f32>::init(config, &mut rng).unwrap();
    let masks = vec![striped_mask(8)];
    let cfg = SamplerConfig::ddim(&s, 2);
    let from_net = sample(&net, &masks, &s, &cfg).unwrap();
    let from_mock = sample(&ZeroProbe::default(), &masks, &s, &cfg).unwrap();
    assert_eq!(from_net, from_mock);
}

fn moments_at(t: usize) {
    let s = NoiseSchedule::desk_default();
    let x0 = Tensor::<f64>::new([4], vec![-1.0, -0.2, 0.5, 1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
    let n = 10_000;
    let mut sum = [0.0f64; 4];
    let mut sq = [0.0f64; 4];
    for _ in 0..n {
        let eps = Tensor::from_fn([4], |_| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        });
        let x = forward_sample(&x0, t, &eps, &s).unwrap();
        for i in 0..4 {
            sum[i] += x.data()[i];
            sq[i] += x.data()[i] * x.data()[i];
        }
    }
    let ab = s.alpha_bar(t).unwrap();
    for i in 0..4 {
        let mean = sum[i] / n as f64;
        let var = (sq[i] - n as f64 * mean * mean) / (n - 1) as f64;
        let se = ((1.0 - ab) / n as f64).sqrt();
        assert!(
            (mean - ab.sqrt() * x0.data()[i]).abs() < 4.0 * se,
            "t={t} mean {mean}"
        );
        assert!(
            ((var - (1.0 - ab)) / (1.0 - ab)).abs() < 0.05,
            "t={t} var {var}"
        );
    }
}

#[test]
fn forward_process_moments() {
    for t in [1, 100, 200] {
        moments_at(t);
    }
}

proptest! {
    #[test]
    fn ddim_step_inverts_to_eps(
        t in 2usize..=200,
        back in 1usize..200,
        x in -3.0f32..3.0,
        e in -3.0f32..3.0,
    ) {
        let s = NoiseSchedule::desk_default();
        let t_prev = t.saturating_sub(back).max(1).min(t - 1);
        let xt = Tensor::scalar(x);
        let out = ddim_step(&xt, t, t_prev, &Tensor::scalar(e), &s).unwrap().item().unwrap() as f64;
        let (ab, abp) = (s.alpha_bar(t).unwrap(), s.alpha_bar(t_prev).unwrap());
        let (sa, sn, pa, pn) = (ab.sqrt(), (1.0 - ab).sqrt(), abp.sqrt(), (1.0 - abp).sqrt());
        let recovered = (out - pa / sa * x as f64) / (pn - pa * sn / sa);
        prop_assert!((recovered - e as f64).abs() < 1e-5, "recovered {} from {}", recovered, e);
    }
}
