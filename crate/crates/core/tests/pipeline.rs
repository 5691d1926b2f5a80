use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volcodec::codec::{decode_volume, encode_volume, read_container, write_container, DecodeMode};
use volcodec::par;
use volcodec::synth::phantom;
use volcodec::training::{TrainConfig, Trainer};
use volcodec::transforms::{Model, ModelConfig};
use volcodec::volume::{load_vvol, save_vvol, Volume};

fn noise_volume(w: usize, h: usize, d: usize, bits: u8, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max = (1u32 << bits) - 1;
    let s = (0..w * h * d).map(|_| rng.gen_range(0..=max)).collect();
    Volume::new(w, h, d, bits, s).unwrap()
}

#[test]
fn files_round_trip_through_a_reloaded_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::init(ModelConfig::debug(), 7).unwrap();
    model.to_checkpoint().save(dir.path().join("m.ckpt")).unwrap();
    let v = phantom(40, 24, 5, 3).volume;
    save_vvol(&v, dir.path().join("v.vvol")).unwrap();

    let v = load_vvol(dir.path().join("v.vvol")).unwrap();
    let coded = encode_volume(&model, &v, 3).unwrap();
    write_container(&coded.container, dir.path().join("v.vvmc")).unwrap();

    let reloaded = Model::load(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(reloaded.id(), model.id());
    let c = read_container(dir.path().join("v.vvmc")).unwrap();
    assert_eq!(c, coded.container);
    let a = decode_volume(&model, &coded.container, DecodeMode::Both).unwrap();
    let b = decode_volume(&reloaded, &c, DecodeMode::Both).unwrap();
    assert_eq!(a.volume, b.volume);
    let out = b.volume.unwrap();
    assert_eq!((out.width(), out.height(), out.depth(), out.bit_depth()), (40, 24, 5, 8));
    assert!(a.features.iter().zip(&b.features).all(|(x, y)| x.bits() == y.bits()));
}

#[test]
fn a_different_model_is_refused() {
    let a = Model::init(ModelConfig::debug(), 1).unwrap();
    let b = Model::init(ModelConfig::debug(), 2).unwrap();
    let coded = encode_volume(&a, &phantom(32, 32, 2, 1).volume, 2).unwrap();
    let err = decode_volume(&b, &coded.container, DecodeMode::Pixels).unwrap_err();
    assert!(err.is_model_error(), "{err}");
}

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let model = Model::init(ModelConfig::debug(), 4).unwrap();
    let v = noise_volume(32, 48, 6, 16, 9);
    par::set_enabled(false);
    let seq = encode_volume(&model, &v, 2).unwrap();
    let seq_out = decode_volume(&model, &seq.container, DecodeMode::Pixels).unwrap();
    par::set_enabled(true);
    let par_ = encode_volume(&model, &v, 2).unwrap();
    let par_out = decode_volume(&model, &par_.container, DecodeMode::Pixels).unwrap();
    assert_eq!(seq.container, par_.container);
    assert_eq!(seq_out.volume, par_out.volume);
}

#[test]
fn training_checkpoints_reproduce_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let v = phantom(32, 32, 4, 2).volume;
    let cfg = TrainConfig {
        model: "debug".into(),
        crop: 32,
        gop_stride: 4,
        steps_per_epoch: Some(2),
        ..TrainConfig::smoke()
    };
    let mut t = Trainer::new(cfg, None, &[v.clone()]).unwrap();
    let before = t.model().unwrap().id();
    for _ in 0..2 {
        let m = t.step().unwrap();
        assert!(m.loss.is_finite() && m.bpp_est >= 0.0);
    }
    let trained = t.model().unwrap();
    assert_ne!(trained.id(), before);
    t.checkpoint().save(dir.path().join("t.ckpt")).unwrap();
    let back = Model::load(dir.path().join("t.ckpt")).unwrap();
    assert_eq!(
        encode_volume(&trained, &v, 4).unwrap().container,
        encode_volume(&back, &v, 4).unwrap().container
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn vvol_files_round_trip(w in 1usize..40, h in 1usize..40, d in 1usize..4, wide in any::<bool>(), seed in any::<u64>()) {
        let v = noise_volume(w, h, d, if wide { 16 } else { 8 }, seed);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vvol");
        save_vvol(&v, &p).unwrap();
        prop_assert_eq!(load_vvol(&p).unwrap(), v);
    }
}
