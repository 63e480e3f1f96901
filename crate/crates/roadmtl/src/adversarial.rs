//! Domain discriminators for the two segmentation streams.
//!
//! Each discriminator is a fully-convolutional patch classifier over a
//! 1-channel road-probability map: four stride-2 convolutions with leaky
//! ReLU, then a 1-channel score convolution, so the score grid is 1/16 of
//! the input in each spatial dimension. Both streams compare target-domain
//! maps against the *primary* segmentation of the source domain.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{kaiming_normal, Binding, ParamStore};
use crate::tensor::{ArrayDyn, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Which segmentation stream a discriminator judges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Primary,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Channel widths of the four stride-2 stages.
    pub widths: [usize; 4],
    /// Adam settings for the discriminator update.
    pub adam_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { widths: [64, 128, 256, 512], adam_lr: 1e-4, adam_beta1: 0.9, adam_beta2: 0.99 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if self.adam_lr <= 0.0 {
            return Err(Error::Config("discriminator learning rate must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1)")));
            }
        }
        Ok(())
    }
}

/// One patch discriminator. Convolution weights carry `{name}.convK.*`
/// parameter names inside the given store.
pub struct PatchDiscriminator {
    name: String,
    widths: [usize; 4],
}

impl PatchDiscriminator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: [usize; 4],
    ) -> Result<Self> {
        let mut in_ch = 1;
        for (k, &out_ch) in widths.iter().enumerate() {
            let fan_in = in_ch * 4 * 4;
            store.add_param(
                &format!("{name}.conv{k}.weight"),
                kaiming_normal(rng, &[out_ch, in_ch, 4, 4], fan_in),
            )?;
            store.add_param(&format!("{name}.conv{k}.bias"), ArrayDyn::zeros(ndarray::IxDyn(&[out_ch])))?;
            in_ch = out_ch;
        }
        store.add_param(
            &format!("{name}.score.weight"),
            kaiming_normal(rng, &[1, in_ch, 3, 3], in_ch * 9),
        )?;
        store.add_param(&format!("{name}.score.bias"), ArrayDyn::zeros(ndarray::IxDyn(&[1])))?;
        Ok(Self { name: name.to_string(), widths })
    }

    /// `[N,1,H,W]` probabilities → `[N,1,⌈H/16⌉,⌈W/16⌉]` patch scores.
    pub fn forward(&self, b: &Binding<'_>, prob_map: &Tensor) -> Result<Tensor> {
        let s = prob_map.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape(
                "discriminate",
                format!("want a [N,1,H,W] probability map, got {s:?}"),
            ));
        }
        let mut x = prob_map.clone();
        for k in 0..self.widths.len() {
            let w = b.param(&format!("{}.conv{k}.weight", self.name))?;
            let bias = b.param(&format!("{}.conv{k}.bias", self.name))?;
            x = x.conv2d(&w, Some(&bias), (2, 2), (1, 1))?.leaky_relu(LEAKY_SLOPE);
        }
        let w = b.param(&format!("{}.score.weight", self.name))?;
        let bias = b.param(&format!("{}.score.bias", self.name))?;
        x.conv2d(&w, Some(&bias), (1, 1), (1, 1))
    }
}

/// The two independent discriminators. Their parameters live in their own
/// store so generator optimizers never see them.
pub struct DiscriminatorPair {
    pub config: DiscriminatorConfig,
    d_primary: PatchDiscriminator,
    d_auxiliary: PatchDiscriminator,
}

impl DiscriminatorPair {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let d_primary = PatchDiscriminator::new(store, rng, "d_primary", config.widths)?;
        let d_auxiliary = PatchDiscriminator::new(store, rng, "d_auxiliary", config.widths)?;
        Ok(Self { config, d_primary, d_auxiliary })
    }

    pub fn discriminate(&self, b: &Binding<'_>, which: Stream, prob_map: &Tensor) -> Result<Tensor> {
        match which {
            Stream::Primary => self.d_primary.forward(b, prob_map),
            Stream::Auxiliary => self.d_auxiliary.forward(b, prob_map),
        }
    }
}

/// Least-squares discriminator objective:
/// `mean((real − 1)²) + mean(fake²)`.
pub fn discriminator_loss(scores_real: &Tensor, scores_fake: &Tensor) -> Tensor {
    let real_term = scores_real.add_scalar(-1.0).square().mean_all();
    let fake_term = scores_fake.square().mean_all();
    real_term.add(&fake_term).expect("scalars share a tape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::adversarial_gen_loss;
    use crate::nn::{Adam, Mode};
    use crate::rng;
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn tiny_pair(seed: u64) -> (ParamStore, DiscriminatorPair) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "disc_init", 0);
        let cfg = DiscriminatorConfig { widths: [4, 8, 8, 16], ..DiscriminatorConfig::default() };
        let pair = DiscriminatorPair::new(&mut store, &mut r, cfg).unwrap();
        (store, pair)
    }

    fn prob_map(tape: &Tape, shape: &[usize], v: f64) -> Tensor {
        tape.constant(ArrayDyn::from_elem(IxDyn(shape), v))
    }

    #[test]
    fn score_grid_is_one_sixteenth_of_input() {
        let (store, pair) = tiny_pair(1);
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let s64 = pair.discriminate(&b, Stream::Primary, &prob_map(&tape, &[1, 1, 64, 64], 0.5)).unwrap();
        assert_eq!(s64.shape(), &[1, 1, 4, 4]);
        let s_target = pair
            .discriminate(&b, Stream::Auxiliary, &prob_map(&tape, &[2, 1, 320, 1216], 0.5))
            .unwrap();
        assert_eq!(s_target.shape(), &[2, 1, 20, 76]);
    }

    #[test]
    fn constant_input_yields_finite_scores() {
        let (store, pair) = tiny_pair(2);
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let s = pair.discriminate(&b, Stream::Primary, &prob_map(&tape, &[1, 1, 32, 32], 1.0)).unwrap();
        assert!(s.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_multichannel_input() {
        let (store, pair) = tiny_pair(3);
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Eval);
        let bad = prob_map(&tape, &[1, 3, 32, 32], 0.5);
        assert!(pair.discriminate(&b, Stream::Primary, &bad).is_err());
    }

    #[test]
    fn discriminator_loss_hand_values() {
        let tape = Tape::new();
        let cases = [((1.0, 0.0), 0.0), ((0.0, 1.0), 2.0), ((0.5, 0.5), 0.5)];
        for ((real, fake), want) in cases {
            let r = prob_map(&tape, &[1, 1, 2, 2], real);
            let f = prob_map(&tape, &[1, 1, 2, 2], fake);
            assert!((discriminator_loss(&r, &f).scalar_value() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn streams_use_independent_parameters() {
        let (store, _) = tiny_pair(4);
        let primary = store.param_names().filter(|n| n.starts_with("d_primary.")).count();
        let auxiliary = store.param_names().filter(|n| n.starts_with("d_auxiliary.")).count();
        assert_eq!(primary, auxiliary);
        assert_eq!(primary * 2, store.param_names().count());
    }

    #[test]
    fn generator_adv_loss_leaves_discriminator_gradfree() {
        // the generator's adversarial term must not produce discriminator
        // gradients (frozen binding) while still reaching generator leaves
        let (store, pair) = tiny_tiny();
        let tape = Tape::new();
        let frozen = Binding::frozen(&store, &tape, Mode::Eval);
        let gen_map = tape.var(ArrayDyn::from_elem(IxDyn(&[1, 1, 16, 16]), 0.4));
        let scores = pair.discriminate(&frozen, Stream::Primary, &gen_map).unwrap();
        let loss = adversarial_gen_loss(&scores);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.wrt(&gen_map).iter().any(|&g| g != 0.0));
        let weight = frozen.param("d_primary.conv0.weight").unwrap();
        assert!(!grads.has_grad(&weight));
    }

    fn tiny_tiny() -> (ParamStore, DiscriminatorPair) {
        tiny_pair(5)
    }

    #[test]
    fn discriminator_loss_ignores_detached_generator_maps() {
        let (store, pair) = tiny_tiny();
        let tape = Tape::new();
        let b = Binding::new(&store, &tape, Mode::Train);
        // trainer feeds detached maps: constants on the discriminator tape
        let real = prob_map(&tape, &[1, 1, 16, 16], 0.9);
        let fake = prob_map(&tape, &[1, 1, 16, 16], 0.1);
        let loss = discriminator_loss(
            &pair.discriminate(&b, Stream::Primary, &real).unwrap(),
            &pair.discriminate(&b, Stream::Primary, &fake).unwrap(),
        );
        let grads = tape.backward(&loss).unwrap();
        assert!(!grads.has_grad(&real));
        assert!(!grads.has_grad(&fake));
        let weight = b.param("d_primary.conv0.weight").unwrap();
        assert!(grads.wrt(&weight).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn separable_toy_discriminator_converges() {
        // source maps sit at 0.9, target maps at 0.1; the discriminator
        // should tell them apart within 200 Adam steps (median of 3 seeds)
        let mut finals = Vec::new();
        let mut initials = Vec::new();
        for seed in [11, 12, 13] {
            let (mut store, pair) = tiny_pair(seed);
            let cfg = pair.config.clone();
            let mut adam = Adam::new(cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2);
            let mut first = None;
            let mut last = 0.0;
            let mut noise = rng::stream(seed, "toy_noise", 0);
            for _ in 0..200 {
                let tape = Tape::new();
                let b = Binding::new(&store, &tape, Mode::Train);
                let jitter = |base: f64, r: &mut ChaCha8Rng| {
                    ArrayD::from_shape_vec(
                        IxDyn(&[2, 1, 16, 16]),
                        (0..512).map(|_| (base + r.gen_range(-0.05..0.05)).clamp(0.0, 1.0)).collect(),
                    )
                    .unwrap()
                };
                let real = tape.constant(jitter(0.9, &mut noise));
                let fake = tape.constant(jitter(0.1, &mut noise));
                let loss = discriminator_loss(
                    &pair.discriminate(&b, Stream::Primary, &real).unwrap(),
                    &pair.discriminate(&b, Stream::Primary, &fake).unwrap(),
                );
                last = loss.scalar_value();
                first.get_or_insert(last);
                let grads = tape.backward(&loss).unwrap();
                let bound = b.bound_map();
                drop(b);
                adam.step(&mut store, &bound, &grads).unwrap();
            }
            initials.push(first.unwrap());
            finals.push(last);
        }
        initials.sort_by(f64::total_cmp);
        finals.sort_by(f64::total_cmp);
        assert!(
            finals[1] < 0.5 * initials[1],
            "median discriminator loss should at least halve: {initials:?} -> {finals:?}"
        );
    }
}
