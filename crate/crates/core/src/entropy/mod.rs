//! Quantization, probability models, the context model and the range coder.

pub mod coder;
pub mod context;
pub mod latent;
pub mod quant;

pub use coder::{build_cdf, rc_decode, rc_encode, CdfTable, RangeDecoder, RangeEncoder, SIGMA_MIN, TAIL};
pub use context::{
    anchor_mask, channel_ctx, entropy_params, spatial_ctx, AnchorMask, ChannelSlicePlan, ContextModel, Pass,
    Relaxation,
};
pub use latent::{
    decode_hyper, decode_latents, decode_latents_serial, encode_hyper, encode_latents, hyper_cost_bits,
    hyper_tables, latent_information, run_schedule, CodedLatent, PassCoder,
};
pub use quant::{
    estimate_rate, factorized_likelihood, gaussian_likelihood, quantize_eval, quantize_train, uniform_noise,
};

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;
    use crate::error::Result;
    use crate::nn::{Graph, Tensor};
    use crate::transforms::{ModelConfig, Net, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
    }

    struct Setup {
        cfg: ModelConfig,
        params: ParamStore,
        lf: Tensor,
        psi: Tensor,
        y: Tensor,
    }

    fn setup(cfg: ModelConfig, seed: u64) -> Setup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ParamStore::init(&cfg, seed).unwrap();
        let (m, hw) = (cfg.latent_channels, 8);
        let lf = random(&[cfg.inter_latent, hw, hw], 1.0, &mut rng);
        let psi = random(&[2 * m, hw, hw], 1.0, &mut rng);
        let y = random(&[m, hw, hw], 4.0, &mut rng);
        Setup { cfg, params, lf, psi, y }
    }

    fn with_model<T>(s: &Setup, f: impl FnOnce(&ContextModel) -> Result<T>) -> T {
        let g = Graph::inference();
        let net = Net::new(&g, &s.cfg, &s.params);
        let lf = s.cfg.auxiliary.then(|| g.constant(s.lf.clone()));
        let psi = g.constant(s.psi.clone());
        let cm = ContextModel::new(&net, lf, psi).unwrap();
        f(&cm).unwrap()
    }

    #[test]
    fn schedule_round_trips_for_every_variant() {
        let base = ModelConfig::debug();
        for cfg in [
            base.clone(),
            base.clone().without_checkerboard(),
            base.clone().without_channelwise(),
            base.clone().without_auxiliary(),
        ] {
            let s = setup(cfg, 4);
            let coded = with_model(&s, |cm| encode_latents(cm, &s.y));
            let back = with_model(&s, |cm| decode_latents(cm, &coded.bytes));
            assert_eq!(back.bits(), coded.yhat.bits());
            assert!(coded.yhat.data().iter().zip(s.y.data()).all(|(a, b)| (a - b).abs() <= 0.5 + 1e-12));
        }
    }

    #[test]
    fn two_pass_decode_matches_serial_reference() {
        let s = setup(ModelConfig::debug(), 7);
        let coded = with_model(&s, |cm| encode_latents(cm, &s.y));
        let fast = with_model(&s, |cm| decode_latents(cm, &coded.bytes));
        let slow = with_model(&s, |cm| decode_latents_serial(cm, &coded.bytes));
        assert_eq!(fast.bits(), slow.bits());
    }

    /// Feeds fixed symbols and records the parameters of every pass.
    struct Recorder<'s> {
        symbols: &'s [i32],
        next: usize,
        seen: HashMap<(usize, Pass), (Vec<u64>, Vec<u64>)>,
    }

    impl PassCoder for Recorder<'_> {
        fn code_pass(&mut self, k: usize, pass: Pass, mu: &[f64], sigma: &[f64], pos: &[usize]) -> Result<Vec<i32>> {
            let pick = |v: &[f64]| pos.iter().map(|&p| v[p].to_bits()).collect();
            self.seen.insert((k, pass), (pick(mu), pick(sigma)));
            let out = self.symbols[self.next..self.next + pos.len()].to_vec();
            self.next += pos.len();
            Ok(out)
        }
    }

    #[test]
    fn parameters_depend_only_on_earlier_symbols() {
        let s = setup(ModelConfig::debug(), 9);
        let coded = with_model(&s, |cm| encode_latents(cm, &s.y));
        let record = |syms: &[i32]| {
            with_model(&s, |cm| {
                let mut r = Recorder { symbols: syms, next: 0, seen: HashMap::new() };
                run_schedule(cm, &mut r)?;
                Ok(r.seen)
            })
        };
        let base = record(&coded.symbols);
        let per_pass = coded.symbols.len() / 8;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let at = rng.gen_range(0..coded.symbols.len());
            let flipped_pass = at / per_pass;
            let mut flipped = coded.symbols.clone();
            flipped[at] += 3;
            let other = record(&flipped);
            for ((gk, pass), v) in &base {
                let idx = 2 * gk + usize::from(*pass == Pass::NonAnchor);
                if idx <= flipped_pass {
                    assert_eq!(&other[&(*gk, *pass)], v, "flip at {at} changed group {gk} {pass:?}");
                }
            }
        }
    }

    #[test]
    fn hyper_round_trip() {
        let cfg = ModelConfig::debug();
        let params = ParamStore::init(&cfg, 2).unwrap();
        let tables = hyper_tables(&cfg, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&[cfg.hyper_channels, 2, 3], 6.0, &mut rng);
        let (bytes, zhat) = encode_hyper(&tables, &z).unwrap();
        let back = decode_hyper(&tables, &bytes, [cfg.hyper_channels, 2, 3]).unwrap();
        assert_eq!(back, zhat);
        assert!(bytes.len() as f64 * 8.0 <= hyper_cost_bits(&tables, &zhat) + 64.0);
    }
}
