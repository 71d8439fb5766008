//! Synthetic embeddings drawn from the PLDA generative model.
//!
//! Every speaker draws `omega ~ N(0, I)` once; each of its segments is
//! `mean + Phi * omega + eps` with a fresh `eps ~ N(0, Sigma)`. Randomness
//! comes from ChaCha8 streams seeded with `seed_from_u64`, and normal
//! deviates from the `rand_distr` ziggurat sampler, so archives regenerate
//! bit-identically on every platform.
//!
//! Specs can be read from a key-value text file:
//!
//! ```text
//! # comment
//! dim = 32
//! rank = 32
//! speakers = 200
//! segments_per_speaker = 20
//! seed = 42
//! phi_seed = 7            # Phi drawn from its own stream
//! phi_spectrum = 1.0      # one value, or one per column
//! sigma = 0.5             # scalar * I, or:
//! sigma_diag = 1,0.5,...  # diagonal, optionally rotated by
//! sigma_rotation_seed = 3 # a random orthogonal matrix
//! mean = 0.0              # constant offset added to every coordinate
//! id_prefix = train-
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataio::{Embedding, EmbeddingArchive, Gender};
use crate::error::{Error, Result};
use crate::linalg::symmetrize;

#[derive(Debug, Clone, PartialEq)]
pub enum PhiSpec {
    Explicit(DMatrix<f64>),
    /// I.i.d. standard normal entries, column `j` scaled by `spectrum[j]`.
    Random {
        spectrum: Vec<f64>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum SigmaSpec {
    Scalar(f64),
    Explicit(DMatrix<f64>),
    /// `R diag(values) R'` with `R` a random orthogonal matrix, or the plain
    /// diagonal when `rotation_seed` is `None`.
    Diagonal {
        values: Vec<f64>,
        rotation_seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub dim: usize,
    pub rank: usize,
    pub n_speakers: usize,
    pub segments_per_speaker: usize,
    pub phi: PhiSpec,
    pub sigma: SigmaSpec,
    pub mean: Option<DVector<f64>>,
    pub seed: u64,
    pub id_prefix: String,
}

impl SynthSpec {
    /// Full-rank random subspace with unit spectrum and `sigma_scale * I`.
    pub fn isotropic(
        dim: usize,
        n_speakers: usize,
        segments_per_speaker: usize,
        sigma_scale: f64,
        seed: u64,
    ) -> Self {
        Self {
            dim,
            rank: dim,
            n_speakers,
            segments_per_speaker,
            phi: PhiSpec::Random {
                spectrum: vec![1.0],
                seed: seed.wrapping_add(0x5eed),
            },
            sigma: SigmaSpec::Scalar(sigma_scale),
            mean: None,
            seed,
            id_prefix: String::new(),
        }
    }

    pub fn phi_matrix(&self) -> Result<DMatrix<f64>> {
        match &self.phi {
            PhiSpec::Explicit(m) => {
                if m.shape() != (self.dim, self.rank) {
                    return Err(Error::Config(format!(
                        "phi is {}x{}, expected {}x{}",
                        m.nrows(),
                        m.ncols(),
                        self.dim,
                        self.rank
                    )));
                }
                Ok(m.clone())
            }
            PhiSpec::Random { spectrum, seed } => {
                let scale = |j: usize| -> Result<f64> {
                    match spectrum.len() {
                        1 => Ok(spectrum[0]),
                        n if n == self.rank => Ok(spectrum[j]),
                        n => Err(Error::Config(format!(
                            "phi_spectrum has {n} values, expected 1 or {}",
                            self.rank
                        ))),
                    }
                };
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut m = DMatrix::zeros(self.dim, self.rank);
                // column-major draw order
                for j in 0..self.rank {
                    let s = scale(j)?;
                    for i in 0..self.dim {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m[(i, j)] = s * z;
                    }
                }
                Ok(m)
            }
        }
    }

    pub fn sigma_matrix(&self) -> Result<DMatrix<f64>> {
        let m = match &self.sigma {
            SigmaSpec::Scalar(s) => DMatrix::identity(self.dim, self.dim) * *s,
            SigmaSpec::Explicit(m) => m.clone(),
            SigmaSpec::Diagonal {
                values,
                rotation_seed,
            } => {
                if values.len() != self.dim {
                    return Err(Error::Config(format!(
                        "sigma_diag has {} values, expected {}",
                        values.len(),
                        self.dim
                    )));
                }
                let diag = DMatrix::from_diagonal(&DVector::from_row_slice(values));
                match rotation_seed {
                    Some(seed) => {
                        let r = random_rotation(self.dim, *seed);
                        symmetrize(&(&r * diag * r.transpose()))
                    }
                    None => diag,
                }
            }
        };
        if m.shape() != (self.dim, self.dim) {
            return Err(Error::Config("sigma has the wrong shape".into()));
        }
        if m.clone().cholesky().is_none() {
            return Err(Error::Config("sigma is not positive definite".into()));
        }
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.rank == 0 || self.n_speakers == 0 || self.segments_per_speaker == 0
        {
            return Err(Error::Config(
                "dim, rank, speakers and segments must be positive".into(),
            ));
        }
        if self.rank > self.dim {
            return Err(Error::Config(format!(
                "rank {} exceeds dim {}",
                self.rank, self.dim
            )));
        }
        if let Some(m) = &self.mean {
            if m.len() != self.dim {
                return Err(Error::Config("mean has the wrong length".into()));
            }
        }
        self.phi_matrix()?;
        self.sigma_matrix()?;
        Ok(())
    }

    /// Parses the key-value format described in the module docs.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .or_else(|| {
                    line.split_once(char::is_whitespace)
                        .map(|(k, v)| (k.trim(), v.trim()))
                })
                .ok_or_else(|| {
                    Error::Config(format!("line {}: expected `key = value`", lineno + 1))
                })?;
            kv.insert(key.to_string(), value.to_string());
        }
        let take = |key: &str| kv.get(key).map(String::as_str);
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',').map(|x| num(key, x.trim())).collect()
        }
        const KNOWN: &[&str] = &[
            "dim",
            "rank",
            "speakers",
            "segments_per_speaker",
            "seed",
            "phi_seed",
            "phi_spectrum",
            "sigma",
            "sigma_diag",
            "sigma_rotation_seed",
            "mean",
            "id_prefix",
        ];
        if let Some(bad) = kv.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown key {bad:?}")));
        }
        let required =
            |key: &str| take(key).ok_or_else(|| Error::Config(format!("missing key {key:?}")));

        let dim: usize = num("dim", required("dim")?)?;
        let rank: usize = take("rank")
            .map(|v| num("rank", v))
            .transpose()?
            .unwrap_or(dim);
        let seed: u64 = take("seed")
            .map(|v| num("seed", v))
            .transpose()?
            .unwrap_or(42);
        let phi_seed: u64 = take("phi_seed")
            .map(|v| num("phi_seed", v))
            .transpose()?
            .unwrap_or(seed.wrapping_add(0x5eed));
        let spectrum = take("phi_spectrum")
            .map(|v| list("phi_spectrum", v))
            .transpose()?
            .unwrap_or_else(|| vec![1.0]);
        let sigma = match (take("sigma"), take("sigma_diag")) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give either sigma or sigma_diag, not both".into(),
                ))
            }
            (Some(s), None) => SigmaSpec::Scalar(num("sigma", s)?),
            (None, Some(d)) => SigmaSpec::Diagonal {
                values: list("sigma_diag", d)?,
                rotation_seed: take("sigma_rotation_seed")
                    .map(|v| num("sigma_rotation_seed", v))
                    .transpose()?,
            },
            (None, None) => SigmaSpec::Scalar(1.0),
        };
        let mean = take("mean")
            .map(|v| num::<f64>("mean", v))
            .transpose()?
            .map(|m| DVector::from_element(dim, m));
        let spec = Self {
            dim,
            rank,
            n_speakers: num("speakers", required("speakers")?)?,
            segments_per_speaker: num("segments_per_speaker", required("segments_per_speaker")?)?,
            phi: PhiSpec::Random {
                spectrum,
                seed: phi_seed,
            },
            sigma,
            mean,
            seed,
            id_prefix: take("id_prefix").unwrap_or("").to_string(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Haar-ish random orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn random_rotation(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Draws an archive from `spec`. Speakers alternate male/female.
pub fn generate(spec: &SynthSpec) -> Result<EmbeddingArchive> {
    spec.validate()?;
    let phi = spec.phi_matrix()?;
    let sigma = spec.sigma_matrix()?;
    let chol_l = sigma
        .cholesky()
        .ok_or_else(|| Error::Config("sigma is not positive definite".into()))?
        .l();
    let mean = spec
        .mean
        .clone()
        .unwrap_or_else(|| DVector::zeros(spec.dim));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |n: usize| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));

    let mut records = Vec::with_capacity(spec.n_speakers * spec.segments_per_speaker);
    for s in 0..spec.n_speakers {
        let speaker = format!("{}spk{s:04}", spec.id_prefix);
        let gender = if s % 2 == 0 {
            Gender::Male
        } else {
            Gender::Female
        };
        let center = &mean + &phi * draw(spec.rank);
        for j in 0..spec.segments_per_speaker {
            let vector = &center + &chol_l * draw(spec.dim);
            records.push(Embedding {
                segment_id: format!("{speaker}-{j:03}"),
                speaker_id: Some(speaker.clone()),
                gender,
                vector,
            });
        }
    }
    EmbeddingArchive::new(spec.dim, records)
}
