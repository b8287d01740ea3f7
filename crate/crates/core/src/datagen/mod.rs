//! Synthetic two-phase microstructures and their equilibrium stress fields,
//! plus dataset assembly, normalization, and persistence.

mod io;
mod micro;
mod solver;

pub use io::{read_dataset, write_dataset};
pub use micro::generate_microstructure;
pub use solver::{solve_elasticity, solve_elasticity_detailed, SolveOutcome};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::field::{ScalarField2D, StressField};

/// Two-phase indicator field. Values are exactly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Microstructure {
    phase: ScalarField2D,
}

impl Microstructure {
    pub fn new(phase: ScalarField2D) -> Result<Self> {
        let mut ones = 0usize;
        for &v in phase.values() {
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(Error::Generation(format!(
                    "phase indicator must be 0 or 1, found {v}"
                )));
            }
        }
        if ones == 0 || ones == phase.values().len() {
            return Err(Error::Generation("both phases must be present".into()));
        }
        Ok(Self { phase })
    }

    pub fn phase(&self) -> &ScalarField2D {
        &self.phase
    }

    pub fn shape(&self) -> (usize, usize) {
        self.phase.shape()
    }

    /// Fraction of pixels in phase 1.
    pub fn volume_fraction(&self) -> f64 {
        let ones = self.phase.values().iter().filter(|&&v| v == 1.0).count();
        ones as f64 / self.phase.values().len() as f64
    }
}

/// Isotropic plane-strain elasticity of the two phases and the applied mean strain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticSpec {
    /// Young's modulus of phase 0 (the soft phase).
    pub young_modulus_soft: f64,
    /// E_hard = contrast * E_soft; must be >= 1.
    pub contrast: f64,
    /// Shared Poisson ratio, in (0, 0.5).
    pub poisson_ratio: f64,
    /// Applied mean strain (E11, E22, E12); default loads along x2.
    pub applied_strain: [f64; 3],
}

impl Default for ElasticSpec {
    fn default() -> Self {
        Self {
            young_modulus_soft: 1.0,
            contrast: 10.0,
            poisson_ratio: 0.3,
            applied_strain: [0.0, 0.01, 0.0],
        }
    }
}

impl ElasticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.young_modulus_soft <= 0.0 {
            return Err(Error::Usage("young_modulus_soft must be positive".into()));
        }
        if self.contrast < 1.0 {
            return Err(Error::Usage("contrast must be >= 1".into()));
        }
        if self.poisson_ratio <= 0.0 || self.poisson_ratio >= 0.5 {
            return Err(Error::Usage("poisson_ratio must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Plane-strain Lame parameters (lambda, mu) for the given phase.
    pub fn lame(&self, phase: f64) -> (f64, f64) {
        let e = if phase == 1.0 {
            self.young_modulus_soft * self.contrast
        } else {
            self.young_modulus_soft
        };
        let nu = self.poisson_ratio;
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        (lambda, mu)
    }
}

/// One dataset record: input microstructure, normalized target stress, and
/// the scale that recovers solver units.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: Microstructure,
    pub target: StressField,
    pub norm_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Validation => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Validation),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub split: Split,
    pub generation_seed: u64,
    pub elastic_spec: ElasticSpec,
}

impl Dataset {
    pub fn shape(&self) -> (usize, usize) {
        self.pairs[0].input.shape()
    }

    pub fn norm_scale(&self) -> f64 {
        self.pairs[0].norm_scale
    }
}

/// Parameters for generating one dataset split.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub size: usize,
    pub correlation_length: f64,
    pub target_volume_fraction: f64,
    pub elastic_spec: ElasticSpec,
    pub solver_tolerance: f64,
    pub solver_max_iters: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            size: 32,
            correlation_length: 4.0,
            target_volume_fraction: 0.4,
            elastic_spec: ElasticSpec::default(),
            solver_tolerance: 1e-4,
            solver_max_iters: 10_000,
        }
    }
}

/// SplitMix64 finalizer; used to derive independent per-pair seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scale all targets by one global factor so values lie in [-1, 1].
pub fn normalize_dataset(
    raw: Vec<(Microstructure, StressField)>,
    split: Split,
    generation_seed: u64,
    elastic_spec: ElasticSpec,
) -> Result<Dataset> {
    if raw.is_empty() {
        return Err(Error::Normalization("empty dataset".into()));
    }
    let shape = raw[0].0.shape();
    for (m, s) in &raw {
        if m.shape() != shape || s.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{shape:?}"),
                found: format!("{:?} / {:?}", m.shape(), s.shape()),
                context: "normalize_dataset".into(),
            });
        }
    }
    let mut max_abs = 0.0f64;
    for (_, s) in &raw {
        for c in s.components() {
            for &v in c.values() {
                max_abs = max_abs.max(v.abs());
            }
        }
    }
    if max_abs == 0.0 {
        return Err(Error::Normalization("all stresses are zero".into()));
    }
    let pairs = raw
        .into_iter()
        .map(|(input, stress)| SamplePair {
            input,
            target: stress.map(|v| v / max_abs),
            norm_scale: max_abs,
        })
        .collect();
    Ok(Dataset {
        pairs,
        split,
        generation_seed,
        elastic_spec,
    })
}

/// Outcome of generating one split, with per-pair solver diagnostics.
pub struct GeneratedSplit {
    pub dataset: Dataset,
    /// (iterations, relative residual) per pair, in pair order.
    pub solver_stats: Vec<(usize, f64)>,
}

/// Generate `count` pairs for one split. Pure function of its arguments;
/// each pair owns seed `mix_seed(generation_seed, split_offset + index)`.
pub fn generate_split(
    config: &GenerationConfig,
    split: Split,
    count: usize,
    generation_seed: u64,
) -> Result<GeneratedSplit> {
    if count == 0 {
        return Err(Error::Usage("split pair count must be positive".into()));
    }
    config.elastic_spec.validate()?;
    let split_offset = (split.tag() as u64) << 32;
    let results: Vec<Result<(Microstructure, StressField, SolveOutcome)>> =
        exec::map_indexed(count, |i| {
            let pair_seed = mix_seed(generation_seed, split_offset + i as u64);
            let micro = generate_microstructure(
                pair_seed,
                config.size,
                config.correlation_length,
                config.target_volume_fraction,
            )?;
            let outcome = solve_elasticity_detailed(
                &micro,
                &config.elastic_spec,
                config.solver_tolerance,
                config.solver_max_iters,
            )?;
            let stress = outcome.stress.clone();
            Ok((micro, stress, outcome))
        });
    let mut raw = Vec::with_capacity(count);
    let mut solver_stats = Vec::with_capacity(count);
    for r in results {
        let (micro, stress, outcome) = r?;
        raw.push((micro, stress));
        solver_stats.push((outcome.iterations, outcome.residual));
    }
    let dataset = normalize_dataset(raw, split, generation_seed, config.elastic_spec)?;
    Ok(GeneratedSplit {
        dataset,
        solver_stats,
    })
}
