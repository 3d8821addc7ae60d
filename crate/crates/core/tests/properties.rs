use ndarray::{Array1, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lbt_css::dsp::{istft, stft_channel, ComplexSpectrogram, StftConfig, Waveform, SAMPLE_RATE};
use lbt_css::losses::{lbt_assignment, pit_loss, SortKey};
use lbt_css::model::{DecoderFeatureGroups, Separator, SeparatorConfig};
use lbt_css::pipeline::{segment_stream, stitch_segments};
use lbt_css::spatialsim::{mix_segment, sample_scene, Corpus, SceneConfig};

fn signal(seed: u64, n: usize, amp: f32) -> Array1<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(n, |_| amp * rng.gen_range(-1.0f32..1.0))
}

fn spec(seed: u64, frames: usize, bins: usize, scale: f64) -> ComplexSpectrogram<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ComplexSpectrogram {
        real: ndarray::Array2::from_shape_fn((frames, bins), |_| scale * rng.gen_range(-1.0..1.0)),
        imag: ndarray::Array2::from_shape_fn((frames, bins), |_| scale * rng.gen_range(-1.0..1.0)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stft_round_trip(seed in any::<u64>(), n in 512usize..20_000, exp in -4.0f32..2.0) {
        let cfg = StftConfig::default();
        let x = signal(seed, n, 10f32.powf(exp));
        let y = istft(&stft_channel(x.view(), &cfg).unwrap(), &cfg, n).unwrap();
        let num: f64 = x.iter().zip(&y).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        let den: f64 = x.iter().map(|&a| (a as f64).powi(2)).sum();
        prop_assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn stft_is_linear(seed in any::<u64>(), n in 512usize..6000, a in -2.0f32..2.0, b in -2.0f32..2.0) {
        let cfg = StftConfig::default();
        let x = signal(seed, n, 1.0);
        let y = signal(seed ^ 1, n, 1.0);
        let z = &x * a + &y * b;
        let (sx, sy, sz) = (
            stft_channel(x.view(), &cfg).unwrap(),
            stft_channel(y.view(), &cfg).unwrap(),
            stft_channel(z.view(), &cfg).unwrap(),
        );
        let peak = sz.real.iter().chain(sz.imag.iter()).fold(1f32, |m, v| m.max(v.abs()));
        let err_re = (&sx.real * a + &sy.real * b - &sz.real).iter().fold(0f32, |m, v| m.max(v.abs()));
        let err_im = (&sx.imag * a + &sy.imag * b - &sz.imag).iter().fold(0f32, |m, v| m.max(v.abs()));
        prop_assert!(err_re.max(err_im) / peak < 1e-6);
    }

    #[test]
    fn frame_energy_matches_windowed_signal(seed in any::<u64>(), n in 512usize..4000) {
        let cfg = StftConfig::default();
        let x = signal(seed, n, 1.0);
        let s = stft_channel(x.view(), &cfg).unwrap();
        let w = cfg.window();
        let len = cfg.frame_length;
        let pad = cfg.left_pad();
        for t in 0..s.frames() {
            let mut time = 0.0;
            for (i, wi) in w.iter().enumerate() {
                let k = (t * cfg.frame_shift + i).checked_sub(pad);
                let v = k.and_then(|k| x.get(k)).copied().unwrap_or(0.0) as f64;
                time += (wi * v).powi(2);
            }
            let mut freq = 0.0;
            for k in 0..s.bins() {
                let weight = if k == 0 || k == len / 2 { 1.0 } else { 2.0 };
                freq += weight * ((s.real[[t, k]] as f64).powi(2) + (s.imag[[t, k]] as f64).powi(2));
            }
            freq /= len as f64;
            prop_assert!((freq - time).abs() <= 1e-5 * time.max(1e-12));
        }
    }

    #[test]
    fn decoder_groups_partition_channels(channels in 4usize..512) {
        let g = DecoderFeatureGroups::split(channels);
        let mut next = 0;
        for r in &g.ranges {
            prop_assert_eq!(r.start, next);
            prop_assert!(!r.is_empty());
            next = r.end;
        }
        prop_assert_eq!(next, channels);
        let lens: Vec<usize> = g.ranges.iter().map(|r| r.len()).collect();
        prop_assert!(lens.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn pit_argmin_survives_joint_scaling(seed in any::<u64>(), n in 2usize..4, c in 0.01f64..100.0) {
        let est: Vec<_> = (0..n).map(|i| spec(seed.wrapping_add(i as u64), 3, 5, 1.0)).collect();
        let refs: Vec<_> = (0..n).map(|i| spec(seed.wrapping_add(100 + i as u64), 3, 5, 1.0)).collect();
        let scale = |v: &[ComplexSpectrogram<f64>]| -> Vec<_> {
            v.iter()
                .map(|s| ComplexSpectrogram { real: &s.real * c, imag: &s.imag * c })
                .collect()
        };
        let (_, a, _) = pit_loss(&est, &refs).unwrap();
        let (_, b, _) = pit_loss(&scale(&est), &scale(&refs)).unwrap();
        prop_assert_eq!(a.order, b.order);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scenes_sort_cleanly_and_mixtures_add_up(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let scene = sample_scene(seed, &cfg).unwrap();
        let (a, b) = (&scene.speakers[0], &scene.speakers[1]);
        prop_assert!(a.azimuth_deg != b.azimuth_deg);
        prop_assert!((a.distance_m - b.distance_m).abs() >= 0.05);
        let locs: Vec<_> = scene.speakers.iter().map(|s| s.location()).collect();
        for key in [SortKey::Azimuth, SortKey::Distance] {
            prop_assert!(lbt_assignment(&locs, key, &[true, true]).is_ok());
        }

        let corpus = Corpus::synthetic(4, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 9600;
        let u = corpus.utterance(0, &mut rng, len).unwrap();
        let v = corpus.utterance(1, &mut rng, len).unwrap();
        let ex = mix_segment(&u, &v, &scene, 0.3, scene.noise_snr, len).unwrap();
        let residual = ex.mixture.samples() - &(ex.reverberant[0].samples() + ex.reverberant[1].samples());
        prop_assert!(residual == *ex.noise.samples());
    }

    #[test]
    fn separator_shapes_and_determinism(seed in any::<u64>(), tm in 1usize..5, fm in 1usize..5) {
        let cfg = SeparatorConfig { channels: 8, ..SeparatorConfig::toy() };
        let m = Separator::<f32>::new(cfg.clone(), seed).unwrap();
        let mult = cfg.pad_multiple();
        let (t, f) = (tm * mult, fm * mult);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array3::from_shape_fn((15, t, f), |_| rng.gen_range(-1.0f32..1.0));
        let a = m.forward(x.view()).unwrap();
        let b = m.forward(x.view()).unwrap();
        prop_assert!(a == b);
        let kd = cfg.decoder_layers;
        for (k0, tap) in a.taps.iter().enumerate() {
            let factor = 1 << (kd - (k0 + 1));
            for s in tap {
                prop_assert_eq!((s.frames() * factor, s.bins() * factor), (t, f));
            }
        }
    }

    #[test]
    fn stitched_noise_streams_recover_their_order(seed in any::<u64>(), secs in 2.0f64..9.0) {
        let len = (secs * SAMPLE_RATE as f64) as usize;
        let streams = [signal(seed, len, 1.0), signal(seed ^ 7, len, 0.5)];
        let waves: Vec<Waveform> = streams
            .iter()
            .map(|s| Waveform::new(s.clone().insert_axis(ndarray::Axis(0)), SAMPLE_RATE).unwrap())
            .collect();
        let (plan, s0) = segment_stream(&waves[0], 38_400, 19_200).unwrap();
        let (_, s1) = segment_stream(&waves[1], 38_400, 19_200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outputs: Vec<[Vec<f32>; 2]> = s0
            .iter()
            .zip(&s1)
            .map(|(a, b)| {
                let (a, b) = (a.channel(0).to_vec(), b.channel(0).to_vec());
                if rng.gen_bool(0.5) { [b, a] } else { [a, b] }
            })
            .collect();
        let (out, _) = stitch_segments(&plan, outputs, len).unwrap();
        prop_assert_eq!(out[0].len(), len);
        prop_assert_eq!(out[1].len(), len);
        let (first, second) = if (out[0][0] - streams[0][0]).abs() < 1e-5 { (0, 1) } else { (1, 0) };
        for (o, k) in [(first, 0), (second, 1)] {
            let err = out[o].iter().zip(streams[k].iter()).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(err < 1e-4, "stream {k}: max error {err}");
        }
    }
}
