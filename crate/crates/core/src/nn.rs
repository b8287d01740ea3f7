//! The conditional generator/discriminator pair, Adam, seeded
//! initialization, and checkpoint persistence.
//!
//! Both nets are deliberately small: 3 stride-2 encoder blocks at base width
//! 16, mirrored decoder with skip connections for the generator, and a
//! patch-logit head for the discriminator. Everything is f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::datagen::mix_seed;
use crate::error::{Error, Result};

/// Ordered, name-keyed parameter storage.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replace values from `saved`, matching names and shapes exactly.
    pub fn load(&mut self, saved: &[(String, Tensor)]) -> Result<()> {
        if saved.len() != self.entries.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.entries.len()),
                found: format!("{}", saved.len()),
                context: "ParamStore::load".into(),
            });
        }
        for ((name, tensor), (sname, stensor)) in self.entries.iter_mut().zip(saved) {
            if name != sname || tensor.shape != stensor.shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} {:?}", tensor.shape),
                    found: format!("{sname} {:?}", stensor.shape),
                    context: "ParamStore::load".into(),
                });
            }
            tensor.data.clone_from(&stensor.data);
        }
        Ok(())
    }

    /// Stable FNV-1a hash over all parameter bytes, for determinism checks.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for (name, tensor) in &self.entries {
            for &b in name.as_bytes() {
                eat(b);
            }
            for v in &tensor.data {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Parameter leaves registered on a tape, in store order.
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn from_vars(names: &[String], vars: &[Var]) -> Self {
        assert_eq!(names.len(), vars.len());
        Self {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    /// Gradients per parameter in store order; zero where a parameter did
    /// not participate in the loss.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<(String, Vec<f64>)> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(*var).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

fn bind(store: &ParamStore, tape: &mut Tape) -> Result<BoundParams> {
    let mut vars = Vec::with_capacity(store.entries.len());
    for (name, tensor) in &store.entries {
        vars.push((name.clone(), tape.leaf(tensor.clone())?));
    }
    Ok(BoundParams { vars })
}

fn kaiming_conv(
    rng: &mut ChaCha8Rng,
    shape: [usize; 4],
    fan_in: usize,
) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller from the seeded stream
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let th = 2.0 * std::f64::consts::PI * u2;
        data.push(std * r * th.cos());
        if data.len() < n {
            data.push(std * r * th.sin());
        }
    }
    Tensor::new(shape.to_vec(), data).expect("kaiming shape")
}

fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

/// Encoder-decoder stress predictor: phase in, 3 tanh-bounded stress
/// channels out.
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub params: ParamStore,
}

impl GeneratorNet {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let entries = vec![
            ("enc1.weight".into(), kaiming_conv(&mut rng, [16, 1, k, k], k * k)),
            ("enc1.bias".into(), zeros(vec![16])),
            ("enc2.weight".into(), kaiming_conv(&mut rng, [32, 16, k, k], 16 * k * k)),
            ("enc2.bias".into(), zeros(vec![32])),
            ("enc3.weight".into(), kaiming_conv(&mut rng, [64, 32, k, k], 32 * k * k)),
            ("enc3.bias".into(), zeros(vec![64])),
            ("dec3.weight".into(), kaiming_conv(&mut rng, [64, 32, k, k], 64 * k * k)),
            ("dec3.bias".into(), zeros(vec![32])),
            ("dec2.weight".into(), kaiming_conv(&mut rng, [64, 16, k, k], 64 * k * k)),
            ("dec2.bias".into(), zeros(vec![16])),
            ("dec1.weight".into(), kaiming_conv(&mut rng, [32, 3, k, k], 32 * k * k)),
            ("dec1.bias".into(), zeros(vec![3])),
        ];
        Self {
            params: ParamStore::new(entries),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        bind(&self.params, tape)
    }

    /// Forward pass from a bound parameter set; `x` is (N,1,H,W) with H and
    /// W divisible by 8.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let shape = &tape.value(x).shape;
        if shape.len() != 4 || shape[1] != 1 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(Error::ShapeMismatch {
                expected: "(N,1,H,W) with H,W divisible by 8".into(),
                found: format!("{:?}", shape),
                context: "GeneratorNet::forward".into(),
            });
        }
        let a = 0.2;
        let c1 = tape.conv2d(x, bound.var("enc1.weight"), bound.var("enc1.bias"), 2, 1)?;
        let e1 = tape.leaky_relu(c1, a)?;
        let c2 = tape.conv2d(e1, bound.var("enc2.weight"), bound.var("enc2.bias"), 2, 1)?;
        let e2 = tape.leaky_relu(c2, a)?;
        let c3 = tape.conv2d(e2, bound.var("enc3.weight"), bound.var("enc3.bias"), 2, 1)?;
        let e3 = tape.leaky_relu(c3, a)?;

        let u3 = tape.conv_transpose2d(e3, bound.var("dec3.weight"), bound.var("dec3.bias"), 2, 1)?;
        let d3 = tape.relu(u3)?;
        let s3 = tape.concat_channels(d3, e2)?;
        let u2 = tape.conv_transpose2d(s3, bound.var("dec2.weight"), bound.var("dec2.bias"), 2, 1)?;
        let d2 = tape.relu(u2)?;
        let s2 = tape.concat_channels(d2, e1)?;
        let u1 = tape.conv_transpose2d(s2, bound.var("dec1.weight"), bound.var("dec1.bias"), 2, 1)?;
        tape.tanh(u1)
    }

    /// Inference convenience: run the forward pass on a throwaway tape.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(input.clone())?;
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Patch discriminator over the concatenated (phase, stress) image.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    pub params: ParamStore,
}

impl DiscriminatorNet {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 4;
        let entries = vec![
            ("d1.weight".into(), kaiming_conv(&mut rng, [16, 4, k, k], 4 * k * k)),
            ("d1.bias".into(), zeros(vec![16])),
            ("d2.weight".into(), kaiming_conv(&mut rng, [32, 16, k, k], 16 * k * k)),
            ("d2.bias".into(), zeros(vec![32])),
            ("d3.weight".into(), kaiming_conv(&mut rng, [64, 32, k, k], 32 * k * k)),
            ("d3.bias".into(), zeros(vec![64])),
            ("d4.weight".into(), kaiming_conv(&mut rng, [1, 64, 3, 3], 64 * 9)),
            ("d4.bias".into(), zeros(vec![1])),
        ];
        Self {
            params: ParamStore::new(entries),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        bind(&self.params, tape)
    }

    /// Logit patch map: (N,4,H,W) -> (N,1,H/8,W/8).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let shape = &tape.value(x).shape;
        if shape.len() != 4 || shape[1] != 4 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
            return Err(Error::ShapeMismatch {
                expected: "(N,4,H,W) with H,W divisible by 8".into(),
                found: format!("{:?}", shape),
                context: "DiscriminatorNet::forward".into(),
            });
        }
        let a = 0.2;
        let c1 = tape.conv2d(x, bound.var("d1.weight"), bound.var("d1.bias"), 2, 1)?;
        let e1 = tape.leaky_relu(c1, a)?;
        let c2 = tape.conv2d(e1, bound.var("d2.weight"), bound.var("d2.bias"), 2, 1)?;
        let e2 = tape.leaky_relu(c2, a)?;
        let c3 = tape.conv2d(e2, bound.var("d3.weight"), bound.var("d3.bias"), 2, 1)?;
        let e3 = tape.leaky_relu(c3, a)?;
        tape.conv2d(e3, bound.var("d4.weight"), bound.var("d4.bias"), 1, 1)
    }
}

/// Bias-corrected Adam with Pix2Pix defaults.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_lr(params, 2e-4)
    }

    pub fn with_lr(params: &ParamStore, lr: f64) -> Self {
        let m = params
            .entries
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        let v = params
            .entries
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step. `grads` must cover every parameter in store order
/// (use [`BoundParams::collect_grads`]).
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamStore,
    grads: &[(String, Vec<f64>)],
) -> Result<()> {
    if grads.len() != params.entries.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient arrays", params.entries.len()),
            found: format!("{}", grads.len()),
            context: "adam_step".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (k, ((name, tensor), (gname, grad))) in
        params.entries.iter_mut().zip(grads).enumerate()
    {
        if name != gname || grad.len() != tensor.numel() {
            return Err(Error::ShapeMismatch {
                expected: format!("{name} ({} values)", tensor.numel()),
                found: format!("{gname} ({} values)", grad.len()),
                context: "adam_step".into(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                iteration: state.step as usize,
                reason: format!("non-finite gradient in layer {name}"),
            });
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            tensor.data[i] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Deterministic initialization of both nets plus the data-order stream for
/// one training session.
pub fn seed_all(seed: u64) -> (GeneratorNet, DiscriminatorNet, ChaCha8Rng) {
    let gen = GeneratorNet::init(mix_seed(seed, 0));
    let disc = DiscriminatorNet::init(mix_seed(seed, 1));
    let order = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    (gen, disc, order)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EQCK";
const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(
    path: &Path,
    iteration: u64,
    params: &[(String, Tensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&iteration.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
        for &d in &tensor.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in &tensor.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(u64, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let parse_err = |reason: &str| Error::Parse {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| parse_err("truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(parse_err("bad magic"));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(|_| parse_err("truncated header"))?;
    if u16::from_le_bytes(b2) != CHECKPOINT_VERSION {
        return Err(parse_err("unsupported version"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| parse_err("truncated header"))?;
    let iteration = u64::from_le_bytes(b8);
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| parse_err("truncated header"))?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut b4).map_err(|_| parse_err("truncated name"))?;
        let name_len = u32::from_le_bytes(b4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| parse_err("truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| parse_err("invalid name"))?;
        r.read_exact(&mut b4).map_err(|_| parse_err("truncated shape"))?;
        let ndims = u32::from_le_bytes(b4) as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            r.read_exact(&mut b4).map_err(|_| parse_err("truncated shape"))?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b8).map_err(|_| parse_err("truncated values"))?;
            data.push(f64::from_le_bytes(b8));
        }
        params.push((
            name,
            Tensor::new(shape, data).map_err(|_| parse_err("invalid tensor shape"))?,
        ));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(Error::Io)? != 0 {
        return Err(parse_err("trailing bytes"));
    }
    Ok((iteration, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::Rng;
    use tempfile::tempdir;

    fn random_input(seed: u64, n: usize, c: usize, hw: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, c, hw, hw], data).unwrap()
    }

    #[test]
    fn generator_output_shape_and_range() {
        let gen = GeneratorNet::init(11);
        let x = random_input(0, 2, 1, 16);
        let y = gen.predict(&x).unwrap();
        assert_eq!(y.shape, vec![2, 3, 16, 16]);
        assert!(y.data.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut gen = GeneratorNet::init(11);
        gen.params.get_mut("dec1.weight").unwrap().data.fill(0.0);
        gen.params.get_mut("dec1.bias").unwrap().data.fill(0.0);
        let y = gen.predict(&random_input(1, 1, 1, 16)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generator_is_deterministic() {
        let gen = GeneratorNet::init(5);
        let x = random_input(2, 1, 1, 16);
        assert_eq!(gen.predict(&x).unwrap(), gen.predict(&x).unwrap());
    }

    #[test]
    fn indivisible_spatial_dims_rejected() {
        let gen = GeneratorNet::init(5);
        let x = random_input(3, 1, 1, 12);
        assert!(gen.predict(&x).is_err());
    }

    #[test]
    fn discriminator_patch_map_is_one_eighth() {
        let disc = DiscriminatorNet::init(9);
        let mut tape = Tape::new();
        let bound = disc.bind(&mut tape).unwrap();
        let x = tape.leaf(random_input(4, 2, 4, 32)).unwrap();
        let y = disc.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y).shape, vec![2, 1, 4, 4]);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn seed_all_is_reproducible_and_seed_sensitive() {
        let (g1, d1, _) = seed_all(7);
        let (g2, d2, _) = seed_all(7);
        let (g3, d3, _) = seed_all(8);
        assert_eq!(g1.params.param_hash(), g2.params.param_hash());
        assert_eq!(d1.params.param_hash(), d2.params.param_hash());
        assert_ne!(g1.params.param_hash(), g3.params.param_hash());
        assert_ne!(d1.params.param_hash(), d3.params.param_hash());
    }

    #[test]
    fn init_variance_matches_kaiming_formula() {
        // enc3 weight has 64*32*16 = 32768 entries with fan_in 512
        let gen = GeneratorNet::init(123);
        let w = gen.params.get("enc3.weight").unwrap();
        let n = w.numel() as f64;
        let mean = w.data.iter().sum::<f64>() / n;
        let var = w.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 2.0 / 512.0;
        assert!(
            (var - expected).abs() / expected < 0.2,
            "var {var} vs {expected}"
        );
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut gen = GeneratorNet::init(1);
        let before = gen.params.param_hash();
        let mut state = AdamState::new(&gen.params);
        let grads: Vec<(String, Vec<f64>)> = gen
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        adam_step(&mut state, &mut gen.params, &grads).unwrap();
        assert_eq!(gen.params.param_hash(), before);
    }

    #[test]
    fn adam_first_step_matches_hand_calculation() {
        // bias correction cancels at t=1: update = -lr*g/(|g| + eps)
        let mut gen = GeneratorNet::init(1);
        let name = "dec1.bias";
        let p0 = gen.params.get(name).unwrap().data[0];
        let mut state = AdamState::new(&gen.params);
        let g = 0.3;
        let grads: Vec<(String, Vec<f64>)> = gen
            .params
            .entries()
            .iter()
            .map(|(n, t)| {
                let v = if n == name { g } else { 0.0 };
                (n.clone(), vec![v; t.numel()])
            })
            .collect();
        adam_step(&mut state, &mut gen.params, &grads).unwrap();
        let expected = p0 - state.lr * g / (g + state.eps);
        let p1 = gen.params.get(name).unwrap().data[0];
        assert!((p1 - expected).abs() < 1e-15, "{p1} vs {expected}");
    }

    #[test]
    fn adam_constant_gradient_step_size_approaches_lr() {
        let mut gen = GeneratorNet::init(1);
        let mut state = AdamState::new(&gen.params);
        let grads: Vec<(String, Vec<f64>)> = gen
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.25; t.numel()]))
            .collect();
        let mut prev = gen.params.get("enc1.bias").unwrap().data[0];
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam_step(&mut state, &mut gen.params, &grads).unwrap();
            let cur = gen.params.get("enc1.bias").unwrap().data[0];
            last_step = (cur - prev).abs();
            prev = cur;
        }
        assert!(
            (last_step - state.lr).abs() / state.lr < 0.01,
            "step {last_step} vs lr {}",
            state.lr
        );
    }

    #[test]
    fn adam_rejects_non_finite_gradient_with_layer_name() {
        let mut gen = GeneratorNet::init(1);
        let mut state = AdamState::new(&gen.params);
        let mut grads: Vec<(String, Vec<f64>)> = gen
            .params
            .entries()
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        grads[4].1[0] = f64::NAN; // enc3.weight
        let err = adam_step(&mut state, &mut gen.params, &grads).unwrap_err();
        match err {
            Error::Training { reason, .. } => assert!(reason.contains("enc3.weight")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn generator_mse_gradients_match_finite_differences() {
        // mse_sigma through the whole generator, probed on >= 20 parameters
        let gen = GeneratorNet::init(17);
        let names = gen.param_names();
        let mut params: Vec<Tensor> = gen
            .params
            .entries()
            .iter()
            .map(|(_, t)| t.clone())
            .collect();
        params.push(random_input(30, 1, 1, 8)); // input leaf, not probed
        params.push(random_input(31, 1, 3, 8)); // target leaf
        let probes: Vec<(usize, usize)> = (0..24)
            .map(|k| {
                let pi = k % 12;
                let ei = (k * 37) % params[pi].numel();
                (pi, ei)
            })
            .collect();
        gradcheck::check(
            &params,
            |tape, vars| {
                let bound = BoundParams::from_vars(&names, &vars[..12]);
                let out = gen.forward(tape, &bound, vars[12]).unwrap();
                let diff = tape.sub(out, vars[13]).unwrap();
                let sq = tape.mul(diff, diff).unwrap();
                tape.mean(sq).unwrap()
            },
            1e-4,
            &probes,
        );
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("iter-100.eqck");
        let (gen, disc, _) = seed_all(42);
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in gen.params.entries() {
            named.push((format!("gen.{n}"), t.clone()));
        }
        for (n, t) in disc.params.entries() {
            named.push((format!("disc.{n}"), t.clone()));
        }
        write_checkpoint(&path, 100, &named).unwrap();
        let (iter, back) = read_checkpoint(&path).unwrap();
        assert_eq!(iter, 100);
        assert_eq!(back, named);
    }

    #[test]
    fn checkpoint_bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.eqck");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(Error::Parse { .. })
        ));
    }
}
