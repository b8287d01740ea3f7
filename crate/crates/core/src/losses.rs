//! The four training objectives: baseline Pix2Pix and the three
//! physics-based regularization (PBR) variants.
//!
//! All divergence quantities are differentiated through the same periodic
//! central-difference stencil the evaluation metrics use.

use serde::{Deserialize, Serialize};

use crate::autodiff::{logistic, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BoundParams, DiscriminatorNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    SimpleAddition,
    Sigmoid,
    ArcTan,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline,
        Method::SimpleAddition,
        Method::Sigmoid,
        Method::ArcTan,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::SimpleAddition => "simple-addition",
            Method::Sigmoid => "sigmoid",
            Method::ArcTan => "arctan",
        }
    }

    pub fn from_slug(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.slug() == s)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub lambda_l1: f64,
    pub lambda_div: f64,
    pub atan_scale: f64,
    pub atan_weight: f64,
    pub sigmoid_sharpness: f64,
}

impl LossConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            lambda_l1: 100.0,
            lambda_div: 10.0,
            atan_scale: 100.0,
            atan_weight: 1.0,
            sigmoid_sharpness: 50.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda_l1 <= 0.0
            || self.lambda_div < 0.0
            || self.atan_scale <= 0.0
            || self.atan_weight <= 0.0
            || self.sigmoid_sharpness <= 0.0
        {
            return Err(Error::Usage(
                "loss weights must be positive (lambda_div may be zero)".into(),
            ));
        }
        Ok(())
    }
}

/// Diagnostic decomposition of one loss evaluation. `pbr` is the already
/// weighted physics term, so `total = adversarial + lambda_l1 * l1 + pbr`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub adversarial: f64,
    pub l1: f64,
    pub pbr: f64,
    pub discriminator_loss: f64,
}

/// Equilibrium probability of the Sigmoid method:
/// logistic(a * (r_real - rms)).
pub fn p_equil(sharpness: f64, r_real: f64, rms: f64) -> f64 {
    logistic(sharpness * (r_real - rms))
}

/// Running mean RMS divergence of real training batches (EMA, decay 0.99).
#[derive(Debug, Clone, Copy)]
pub struct RealDivergenceEma {
    decay: f64,
    value: Option<f64>,
}

impl Default for RealDivergenceEma {
    fn default() -> Self {
        Self {
            decay: 0.99,
            value: None,
        }
    }
}

impl RealDivergenceEma {
    pub fn update(&mut self, batch_mean_rms: f64) -> f64 {
        let v = match self.value {
            None => batch_mean_rms,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * batch_mean_rms,
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> f64 {
        self.value.unwrap_or(0.0)
    }
}

const PROB_FLOOR: f64 = 1e-12;

/// Combined per-image real-probability of the Sigmoid discriminator:
/// mean patch probability times the equilibrium probability.
fn combined_real_probability(
    tape: &mut Tape,
    cfg: &LossConfig,
    disc: &DiscriminatorNet,
    disc_bound: &BoundParams,
    micro: Var,
    stress: Var,
    r_real: f64,
) -> Result<Var> {
    let pair = tape.concat_channels(micro, stress)?;
    let logits = disc.forward(tape, disc_bound, pair)?;
    let probs = tape.sigmoid(logits)?;
    let p_patch = tape.mean_per_image(probs)?;
    let div = tape.divergence(stress, 1.0)?;
    let rms = tape.rms_per_image(div)?;
    // logistic(a*(r_real - rms)) = sigmoid(-a*rms + a*r_real)
    let arg = tape.affine(rms, -cfg.sigmoid_sharpness, cfg.sigmoid_sharpness * r_real)?;
    let pe = tape.sigmoid(arg)?;
    tape.mul(p_patch, pe)
}

/// Mean of -ln(p) with a clamp away from zero.
fn mean_neg_ln(tape: &mut Tape, p: Var) -> Result<Var> {
    let ln = tape.ln_clamped(p, PROB_FLOOR)?;
    let m = tape.mean(ln)?;
    tape.affine(m, -1.0, 0.0)
}

/// Generator objective. `micro` is the (N,1,H,W) phase batch, `pred` and
/// `target` are (N,3,H,W) stress batches; `r_real` is the running real RMS
/// divergence (only the Sigmoid method reads it). Gradients flow into the
/// discriminator's bound parameters too; the caller simply does not apply
/// them during a generator step.
pub fn generator_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    disc: &DiscriminatorNet,
    disc_bound: &BoundParams,
    micro: Var,
    pred: Var,
    target: Var,
    r_real: f64,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let adv = match cfg.method {
        Method::Sigmoid => {
            let p = combined_real_probability(tape, cfg, disc, disc_bound, micro, pred, r_real)?;
            mean_neg_ln(tape, p)?
        }
        _ => {
            let pair = tape.concat_channels(micro, pred)?;
            let logits = disc.forward(tape, disc_bound, pair)?;
            tape.bce_with_logits(logits, 1.0)?
        }
    };

    let diff = tape.sub(pred, target)?;
    let absdiff = tape.abs(diff)?;
    let l1 = tape.mean(absdiff)?;
    let l1_weighted = tape.affine(l1, cfg.lambda_l1, 0.0)?;

    let pbr = match cfg.method {
        Method::Baseline | Method::Sigmoid => None,
        Method::SimpleAddition => {
            // mean(|K1| + |K2|)/2 over the batch equals the mean absolute
            // entry of the (N,2,H,W) divergence field
            let div = tape.divergence(pred, 1.0)?;
            let absdiv = tape.abs(div)?;
            let m = tape.mean(absdiv)?;
            Some(tape.affine(m, cfg.lambda_div, 0.0)?)
        }
        Method::ArcTan => {
            let div_p = tape.divergence(pred, 1.0)?;
            let rms_p = tape.rms_per_image(div_p)?;
            let div_t = tape.divergence(target, 1.0)?;
            let rms_t = tape.rms_per_image(div_t)?;
            let gap = tape.sub(rms_p, rms_t)?;
            let abs_gap = tape.abs(gap)?;
            let scaled = tape.affine(abs_gap, cfg.atan_scale, 0.0)?;
            let at = tape.atan(scaled)?;
            let m = tape.mean(at)?;
            Some(tape.affine(m, cfg.atan_weight, 0.0)?)
        }
    };

    let partial = tape.add(adv, l1_weighted)?;
    let total = match pbr {
        Some(p) => tape.add(partial, p)?,
        None => partial,
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).data[0],
        adversarial: tape.value(adv).data[0],
        l1: tape.value(l1).data[0],
        pbr: pbr.map(|p| tape.value(p).data[0]).unwrap_or(0.0),
        discriminator_loss: 0.0,
    };
    Ok((total, breakdown))
}

/// Discriminator objective: patch BCE with real labeled 1 and fake labeled
/// 0, averaged over both halves. The Sigmoid method takes the BCE over the
/// combined patch-times-equilibrium probability instead. `fake` must be a
/// detached leaf.
pub fn discriminator_loss(
    tape: &mut Tape,
    cfg: &LossConfig,
    disc: &DiscriminatorNet,
    disc_bound: &BoundParams,
    micro: Var,
    real: Var,
    fake: Var,
    r_real: f64,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let total = match cfg.method {
        Method::Sigmoid => {
            let p_real =
                combined_real_probability(tape, cfg, disc, disc_bound, micro, real, r_real)?;
            let p_fake =
                combined_real_probability(tape, cfg, disc, disc_bound, micro, fake, r_real)?;
            let real_term = mean_neg_ln(tape, p_real)?;
            let one_minus = tape.affine(p_fake, -1.0, 1.0)?;
            let fake_term = mean_neg_ln(tape, one_minus)?;
            let s = tape.add(real_term, fake_term)?;
            tape.affine(s, 0.5, 0.0)?
        }
        _ => {
            let real_pair = tape.concat_channels(micro, real)?;
            let real_logits = disc.forward(tape, disc_bound, real_pair)?;
            let real_term = tape.bce_with_logits(real_logits, 1.0)?;
            let fake_pair = tape.concat_channels(micro, fake)?;
            let fake_logits = disc.forward(tape, disc_bound, fake_pair)?;
            let fake_term = tape.bce_with_logits(fake_logits, 0.0)?;
            let s = tape.add(real_term, fake_term)?;
            tape.affine(s, 0.5, 0.0)?
        }
    };
    let value = tape.value(total).data[0];
    Ok((
        total,
        LossBreakdown {
            total: value,
            adversarial: 0.0,
            l1: 0.0,
            pbr: 0.0,
            discriminator_loss: value,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tensor};
    use crate::field::{rms_divergence, ScalarField2D, StressField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const HW: usize = 8;

    fn uniform_stress(v: [f64; 3]) -> Tensor {
        let mut data = Vec::new();
        for c in v {
            data.extend(std::iter::repeat(c).take(HW * HW));
        }
        Tensor::new(vec![1, 3, HW, HW], data).unwrap()
    }

    fn micro_tensor() -> Tensor {
        let data = (0..HW * HW).map(|k| (k % 2) as f64).collect();
        Tensor::new(vec![1, 1, HW, HW], data).unwrap()
    }

    fn random_stress(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * HW * HW).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![1, 3, HW, HW], data).unwrap()
    }

    fn eval_gen(cfg: &LossConfig, pred: &Tensor, target: &Tensor, r_real: f64) -> LossBreakdown {
        let disc = DiscriminatorNet::init(3);
        let mut tape = Tape::new();
        let bound = disc.bind(&mut tape).unwrap();
        let m = tape.leaf(micro_tensor()).unwrap();
        let p = tape.leaf(pred.clone()).unwrap();
        let t = tape.leaf(target.clone()).unwrap();
        let (_, bd) = generator_loss(&mut tape, cfg, &disc, &bound, m, p, t, r_real).unwrap();
        bd
    }

    #[test]
    fn perfect_prediction_on_uniform_target_zeroes_l1_and_pbr() {
        let target = uniform_stress([0.3, -0.2, 0.1]);
        for method in [Method::SimpleAddition, Method::ArcTan] {
            let cfg = LossConfig::for_method(method);
            let bd = eval_gen(&cfg, &target, &target, 0.1);
            assert_eq!(bd.l1, 0.0, "{method:?}");
            assert!(bd.pbr.abs() < 1e-15, "{method:?} pbr {}", bd.pbr);
            assert!(
                (bd.total - bd.adversarial).abs() < 1e-15,
                "{method:?} total"
            );
        }
    }

    /// pred = target + sinusoidal s11 perturbation; the rms-divergence gap g
    /// is known, so the ArcTan term must equal atan_weight * atan(c*g).
    #[test]
    fn arctan_term_matches_closed_form() {
        let target = uniform_stress([0.0, 0.0, 0.0]);
        let term_for_amp = |amp: f64| -> (f64, f64) {
            let mut pred = target.clone();
            for j in 0..HW {
                let v = amp * (2.0 * PI * j as f64 / HW as f64).sin();
                for i in 0..HW {
                    pred.data[i * HW + j] = v;
                }
            }
            let s11 = ScalarField2D::new(HW, HW, pred.data[..HW * HW].to_vec()).unwrap();
            let zero = ScalarField2D::constant(HW, HW, 0.0);
            let sf = StressField::new(s11, zero.clone(), zero).unwrap();
            let g = rms_divergence(&sf, 1.0).unwrap();
            let cfg = LossConfig::for_method(Method::ArcTan);
            let bd = eval_gen(&cfg, &pred, &target, 0.1);
            (g, bd.pbr)
        };

        let (g, pbr) = term_for_amp(0.05);
        assert!(g > 0.0);
        assert!((pbr - (100.0 * g).atan()).abs() < 1e-12, "{pbr} vs atan");

        // derivative w.r.t. g near 0 is atan_weight * c
        let (g_small, pbr_small) = term_for_amp(1e-6);
        assert!(((pbr_small / g_small) - 100.0).abs() / 100.0 < 1e-4);

        // and decays as 1/(1 + (c g)^2) away from 0
        let (g1, p1) = term_for_amp(0.05 * 0.999);
        let (g2, p2) = term_for_amp(0.05 * 1.001);
        let fd = (p2 - p1) / (g2 - g1);
        let expected = 100.0 / (1.0 + (100.0 * g).powi(2));
        assert!((fd - expected).abs() / expected < 1e-3, "{fd} vs {expected}");
    }

    #[test]
    fn arctan_term_is_bounded_by_half_pi() {
        let cfg = LossConfig::for_method(Method::ArcTan);
        for seed in 0..5 {
            let bd = eval_gen(&cfg, &random_stress(seed), &random_stress(seed + 100), 0.1);
            assert!(bd.pbr <= cfg.atan_weight * PI / 2.0);
            assert!(bd.pbr >= 0.0);
        }
    }

    /// The central-difference stencil cannot see the Nyquist checkerboard,
    /// so adding one to s22 leaves the SimpleAddition term unchanged.
    #[test]
    fn simple_addition_blind_to_nyquist_checkerboard() {
        let target = random_stress(7);
        let mut pred = target.clone();
        for i in 0..HW {
            for j in 0..HW {
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                pred.data[HW * HW + i * HW + j] += 0.25 * sign;
            }
        }
        let cfg = LossConfig::for_method(Method::SimpleAddition);
        let bd_target = eval_gen(&cfg, &target, &target, 0.1);
        let bd_pred = eval_gen(&cfg, &pred, &target, 0.1);
        assert_eq!(bd_pred.pbr, bd_target.pbr);
    }

    #[test]
    fn simple_addition_with_zero_weight_equals_baseline() {
        let pred = random_stress(1);
        let target = random_stress(2);
        let mut cfg = LossConfig::for_method(Method::SimpleAddition);
        cfg.lambda_div = 0.0;
        let bd_sa = eval_gen(&cfg, &pred, &target, 0.1);
        let bd_base = eval_gen(&LossConfig::for_method(Method::Baseline), &pred, &target, 0.1);
        assert_eq!(bd_sa.total, bd_base.total);
    }

    #[test]
    fn simple_addition_term_is_translation_invariant() {
        let pred = random_stress(9);
        let mut shifted = pred.clone();
        for v in shifted.data.iter_mut() {
            *v += 0.37;
        }
        let target = random_stress(10);
        let cfg = LossConfig::for_method(Method::SimpleAddition);
        let a = eval_gen(&cfg, &pred, &target, 0.1);
        let b = eval_gen(&cfg, &shifted, &target, 0.1);
        assert!((a.pbr - b.pbr).abs() < 1e-12);
    }

    #[test]
    fn p_equil_examples() {
        // rms equal to the running mean -> exactly 1/2
        assert_eq!(p_equil(50.0, 0.2, 0.2), 0.5);
        // rms far above the running mean -> probability collapses
        assert!(p_equil(50.0, 0.2, 5.0) < 1e-50);
        // closed-form sweep
        for delta in [0.1, 0.01, 0.001] {
            for sign in [-1.0, 1.0] {
                let rms: f64 = 0.2 + sign * delta;
                let expected = 1.0 / (1.0 + (-50.0 * (0.2_f64 - rms)).exp());
                assert!((p_equil(50.0, 0.2, rms) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_discriminator_with_zero_weights_isolates_p_equil() {
        // zero discriminator -> all logits 0 -> p_patch = 1/2 per image, so
        // the combined real-probability is p_equil/2
        let mut disc = DiscriminatorNet::init(3);
        for name in disc.param_names() {
            disc.params.get_mut(&name).unwrap().data.fill(0.0);
        }
        let real = random_stress(4);
        let fake = random_stress(5);
        let cfg = LossConfig::for_method(Method::Sigmoid);
        let r_real = 0.3;

        let rms_of = |t: &Tensor| {
            let s11 = ScalarField2D::new(HW, HW, t.data[..HW * HW].to_vec()).unwrap();
            let s22 = ScalarField2D::new(HW, HW, t.data[HW * HW..2 * HW * HW].to_vec()).unwrap();
            let s12 =
                ScalarField2D::new(HW, HW, t.data[2 * HW * HW..3 * HW * HW].to_vec()).unwrap();
            let sf = StressField::new(s11, s22, s12).unwrap();
            rms_divergence(&sf, 1.0).unwrap()
        };
        let p_real = 0.5 * p_equil(cfg.sigmoid_sharpness, r_real, rms_of(&real));
        let p_fake = 0.5 * p_equil(cfg.sigmoid_sharpness, r_real, rms_of(&fake));
        let expected = 0.5 * (-(p_real.ln()) + -( (1.0 - p_fake).ln()));

        let mut tape = Tape::new();
        let bound = disc.bind(&mut tape).unwrap();
        let m = tape.leaf(micro_tensor()).unwrap();
        let r = tape.leaf(real).unwrap();
        let f = tape.leaf(fake).unwrap();
        let (_, bd) =
            discriminator_loss(&mut tape, &cfg, &disc, &bound, m, r, f, r_real).unwrap();
        assert!(
            (bd.discriminator_loss - expected).abs() < 1e-12,
            "{} vs {expected}",
            bd.discriminator_loss
        );
    }

    #[test]
    fn ema_tracks_real_divergence() {
        let mut ema = RealDivergenceEma::default();
        assert_eq!(ema.update(0.4), 0.4); // first sample sets the value
        let v = ema.update(0.2);
        assert!((v - (0.99 * 0.4 + 0.01 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn all_generator_losses_pass_gradient_checks_on_pred() {
        let disc = DiscriminatorNet::init(6);
        let names = disc.param_names();
        let mut params: Vec<Tensor> = disc
            .params
            .entries()
            .iter()
            .map(|(_, t)| t.clone())
            .collect();
        let n_disc = params.len();
        params.push(micro_tensor());
        params.push(random_stress(20)); // pred
        params.push(random_stress(21)); // target
        let pred_idx = n_disc + 1;
        let probes: Vec<(usize, usize)> =
            (0..12).map(|k| (pred_idx, (k * 17) % (3 * HW * HW))).collect();
        for method in Method::ALL {
            let cfg = LossConfig::for_method(method);
            gradcheck::check(
                &params,
                |tape, vars| {
                    let bound = BoundParams::from_vars(&names, &vars[..n_disc]);
                    let (total, _) = generator_loss(
                        tape,
                        &cfg,
                        &disc,
                        &bound,
                        vars[n_disc],
                        vars[n_disc + 1],
                        vars[n_disc + 2],
                        0.25,
                    )
                    .unwrap();
                    total
                },
                1e-4,
                &probes,
            );
        }
    }

    #[test]
    fn discriminator_loss_passes_gradient_checks_on_disc_params() {
        let disc = DiscriminatorNet::init(8);
        let names = disc.param_names();
        let mut params: Vec<Tensor> = disc
            .params
            .entries()
            .iter()
            .map(|(_, t)| t.clone())
            .collect();
        let n_disc = params.len();
        params.push(micro_tensor());
        params.push(random_stress(30)); // real
        params.push(random_stress(31)); // fake
        let probes: Vec<(usize, usize)> = (0..n_disc)
            .map(|pi| (pi, 11 % params[pi].numel()))
            .collect();
        for method in [Method::Baseline, Method::Sigmoid] {
            let cfg = LossConfig::for_method(method);
            gradcheck::check(
                &params,
                |tape, vars| {
                    let bound = BoundParams::from_vars(&names, &vars[..n_disc]);
                    let (total, _) = discriminator_loss(
                        tape,
                        &cfg,
                        &disc,
                        &bound,
                        vars[n_disc],
                        vars[n_disc + 1],
                        vars[n_disc + 2],
                        0.25,
                    )
                    .unwrap();
                    total
                },
                1e-4,
                &probes,
            );
        }
    }

    #[test]
    fn non_finite_prediction_is_rejected() {
        let mut pred = random_stress(2);
        pred.data[5] = f64::NAN;
        let mut tape = Tape::new();
        assert!(tape.leaf(pred).is_err());
    }
}
