use proptest::prelude::*;

use wg_core::audio::{extract_layers, AudioTrack};
use wg_core::codec::{CodecConfig, LatentCodec, LatentVideo, PixelVideo, Stride3};
use wg_core::dubbing::{noise_inject, segment_bounds};
use wg_core::formats::{decode_audio, decode_video, encode_audio, encode_video, Checkpoint};
use wg_core::framepack::{patchify, unpatchify};
use wg_core::numerics::{DenseArray, ParamStore, Rng};
use wg_core::sampler::{build_schedule, cfg_velocity, shift_time, unshift_time};

fn latent(seed: u64, dims: [usize; 4]) -> LatentVideo<f32> {
    LatentVideo::new(Rng::new(seed).normal_array(&dims, 1.0), Stride3::new(4, 16, 16)).unwrap()
}

fn pixels(seed: u64, t: usize, h: usize, w: usize) -> PixelVideo {
    PixelVideo::new(Rng::new(seed).uniform_array(&[t, 3, h, w], 0.0, 1.0), 25.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_is_monotone_and_invertible(u in 0.0f64..=1.0, v in 0.0f64..=1.0, shift in 0.5f64..10.0) {
        let (tu, tv) = (shift_time(u, shift), shift_time(v, shift));
        prop_assert!((0.0..=1.0).contains(&tu));
        prop_assert!((unshift_time(tu, shift) - u).abs() < 1e-12);
        if u < v {
            prop_assert!(tu <= tv);
        }
    }

    #[test]
    fn schedule_runs_from_noise_to_data(steps in 1usize..80, shift in 0.5f64..10.0) {
        let s = build_schedule(steps, shift).unwrap();
        prop_assert_eq!(s.timesteps.len(), steps + 1);
        prop_assert_eq!(s.timesteps[0], 1.0);
        prop_assert_eq!(*s.timesteps.last().unwrap(), 0.0);
        prop_assert!(s.timesteps.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn truncation_starts_at_largest_step_not_above(alpha in 0.0f64..=1.0) {
        let s = build_schedule(50, 5.0).unwrap();
        let tail = s.truncate(alpha).unwrap();
        prop_assert!(tail[0] <= alpha);
        let skipped = s.timesteps.len() - tail.len();
        if skipped > 0 {
            prop_assert!(s.timesteps[skipped - 1] > alpha);
        }
        prop_assert_eq!(&s.timesteps[skipped..], &tail[..]);
    }

    #[test]
    fn guidance_endpoints_select_a_branch(seed in any::<u64>(), scale in -2.0f64..10.0) {
        let mut rng = Rng::new(seed);
        let c: DenseArray<f64> = rng.normal_array(&[3, 5], 1.0);
        let u: DenseArray<f64> = rng.normal_array(&[3, 5], 1.0);
        prop_assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u.clone());
        let g = cfg_velocity(&c, &u, scale).unwrap();
        for ((g, c), u) in g.data().iter().zip(c.data()).zip(u.data()) {
            prop_assert!((g - (u + scale * (c - u))).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_injection_interpolates(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let z0 = latent(seed, [2, 4, 2, 2]);
        let zt = noise_inject(&z0, alpha, &mut Rng::new(seed ^ 1)).unwrap();
        let eps: DenseArray<f32> = Rng::new(seed ^ 1).normal_array(&[2, 4, 2, 2], 1.0);
        for ((x, z), e) in zt.grid.data().iter().zip(z0.grid.data()).zip(eps.data()) {
            let want = (1.0 - alpha) * *z as f64 + alpha * *e as f64;
            prop_assert!((*x as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn patchify_round_trips(seed in any::<u64>(), nt in 1usize..4, nh in 1usize..3, nw in 1usize..3, pt in 1usize..3) {
        let patch = Stride3::new(pt, 2, 2);
        let dims = [nt * pt, 3, nh * 2, nw * 2];
        let z = latent(seed, dims);
        let tokens = patchify(&z, patch).unwrap();
        prop_assert_eq!(tokens.shape(), &[nt * nh * nw, 3 * patch.volume()][..]);
        let back = unpatchify(&tokens, dims, patch, z.stride).unwrap();
        prop_assert_eq!(back, z);
    }

    #[test]
    fn segments_tile_the_input(frames in 0usize..500, seg in 1usize..100) {
        let b = segment_bounds(frames, seg);
        let mut next = 0;
        for (s, l) in b {
            prop_assert_eq!(s, next);
            prop_assert!(l >= 1 && l <= seg);
            next = s + l;
        }
        prop_assert_eq!(next, frames);
    }

    #[test]
    fn audio_container_round_trips(seed in any::<u64>(), n in 0usize..2000, rate in 8000u32..48000) {
        let mut rng = Rng::new(seed);
        let a = AudioTrack::new((0..n).map(|_| rng.normal() as f32).collect(), rate);
        prop_assert_eq!(decode_audio(&encode_audio(&a).unwrap()).unwrap(), a);
    }

    #[test]
    fn video_container_round_trips(seed in any::<u64>(), t in 1usize..5, h in 1usize..9, w in 1usize..9) {
        let v = pixels(seed, t, h, w);
        prop_assert_eq!(decode_video(&encode_video(&v).unwrap()).unwrap(), v);
    }

    #[test]
    fn checkpoint_round_trips(seed in any::<u64>(), n in 0usize..5) {
        let mut rng = Rng::new(seed);
        let mut s32 = ParamStore::<f32>::new();
        let mut s64 = ParamStore::<f64>::new();
        for i in 0..n {
            let shape = [1 + rng.below(3), 1 + rng.below(4)];
            s32.insert(format!("a.{i}"), rng.normal_array(&shape, 1.0), false).unwrap();
            s64.insert(format!("b.{i}"), rng.normal_array(&shape, 1.0), false).unwrap();
        }
        let mut ck = Checkpoint::from_stores([seed as u8; 32], &[&s32]);
        ck.records.extend(Checkpoint::from_stores([0; 32], &[&s64]).records);
        prop_assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }

    #[test]
    fn audio_features_are_causal(seed in any::<u64>(), cut in 1usize..7) {
        let spf = 640;
        let mut rng = Rng::new(seed);
        let samples: Vec<f32> = (0..8 * spf).map(|_| rng.normal() as f32).collect();
        let mut altered = samples.clone();
        for x in &mut altered[cut * spf..] {
            *x = rng.normal() as f32 * 3.0;
        }
        let a = extract_layers(&AudioTrack::new(samples, 16_000), 25.0, 8).unwrap();
        let b = extract_layers(&AudioTrack::new(altered, 16_000), 25.0, 8).unwrap();
        prop_assert_eq!(a.slice_frames(0, cut).unwrap(), b.slice_frames(0, cut).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn codec_reconstruction_is_a_projection(seed in any::<u64>(), lt in 1usize..3) {
        let codec = LatentCodec::new(CodecConfig::default()).unwrap();
        let v = pixels(seed, 4 * lt, 32, 32);
        let z: LatentVideo<f64> = codec.encode(&v).unwrap();
        let once = codec.decode(&z, 25.0).unwrap();
        let z2: LatentVideo<f64> = codec.encode(&once).unwrap();
        prop_assert!(z2.grid.max_abs_diff(&z.grid) < 1e-4);
    }
}
