//! Synthetic cohorts with a planted risk signal, the MEBG matrix file format,
//! the cohort manifest, and seeded cross-validation folds.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::survival::{discretize_times, interval_of, SurvivalLabel, DEFAULT_BINS};

pub const MEBG_MAGIC: &[u8; 4] = b"MEBG";
pub const MEBG_VERSION: u16 = 1;
pub const MEBG_HEADER_LEN: usize = 14;
pub const GENOMIC_GROUPS: usize = 6;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Knobs of the synthetic cohort.
///
/// Each patient has two independent standard-normal factors: `z_p`, carried by
/// a fraction of the pathology instances, and `z_g`, carried by some genomic
/// groups. The survival risk is `z = √w·z_p + √(1−w)·z_g` with
/// `w = pathology_share`, so neither modality alone explains all of `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub n_patients: usize,
    pub dim: usize,
    pub bag_min: usize,
    pub bag_max: usize,
    pub signal_groups: usize,
    pub signal_fraction: f64,
    pub beta: f64,
    pub censor_fraction: f64,
    pub pathology_share: f64,
    pub signal_scale: f64,
    pub signal_offset: f64,
    pub noise: f64,
    /// Mean event time (months) at `z = 0`.
    pub time_scale: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            n_patients: 200,
            dim: 256,
            bag_min: 64,
            bag_max: 512,
            signal_groups: 2,
            signal_fraction: 0.1,
            beta: 1.0,
            censor_fraction: 0.3,
            pathology_share: 0.5,
            signal_scale: 1.5,
            signal_offset: 3.0,
            noise: 1.0,
            time_scale: 30.0,
        }
    }
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_patients < 8 {
            return bad(format!("need at least 8 patients, got {}", self.n_patients));
        }
        if self.dim == 0 {
            return bad("feature width must be positive".into());
        }
        if self.bag_min == 0 || self.bag_min > self.bag_max {
            return bad(format!("bag size range {}..={} is empty", self.bag_min, self.bag_max));
        }
        if self.signal_groups > GENOMIC_GROUPS {
            return bad(format!("at most {GENOMIC_GROUPS} signal groups"));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad(format!("signal fraction {} outside (0, 1]", self.signal_fraction));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.censor_fraction >= 0.0 && self.censor_fraction < 1.0) {
            return bad(format!("censor fraction {} outside [0, 1)", self.censor_fraction));
        }
        if !(0.0..=1.0).contains(&self.pathology_share) {
            return bad(format!("pathology share {} outside [0, 1]", self.pathology_share));
        }
        for (name, v) in [
            ("signal_scale", self.signal_scale),
            ("noise", self.noise),
            ("time_scale", self.time_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.signal_offset >= 0.0 && self.signal_offset.is_finite()) {
            return bad(format!("signal_offset must be non-negative, got {}", self.signal_offset));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    /// `n × d` pathology instances.
    pub bag: Tensor,
    /// `6 × d` genomic group embeddings.
    pub genomics: Tensor,
    pub label: SurvivalLabel,
    /// Planted risk factor, when known.
    pub latent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub seed: u64,
    pub params: GeneratorParams,
    pub edges: Vec<f64>,
    pub patients: Vec<PatientRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.label.time).collect()
    }

    pub fn censored(&self) -> Vec<bool> {
        self.patients.iter().map(|p| p.label.censored).collect()
    }

    /// Re-bins every label into `n_bins` intervals.
    pub fn rebin(&mut self, n_bins: usize) -> Result<()> {
        let b = discretize_times(&self.times(), &self.censored(), n_bins)?;
        for (p, k) in self.patients.iter_mut().zip(b.k) {
            p.label.k = k;
        }
        self.edges = b.edges;
        Ok(())
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Stored precision: features are rounded to `f32` on creation so the
/// in-memory cohort equals its on-disk form.
fn round32(v: f64) -> f64 {
    v as f32 as f64
}

/// Expected censored fraction when event rates are `exp(βz)/scale` with
/// `z ~ N(0,1)` and censoring times are exponential with rate `rate_c`.
pub fn expected_censor_fraction(rate_c: f64, beta: f64, time_scale: f64) -> f64 {
    const STEPS: usize = 4000;
    const LIM: f64 = 10.0;
    let h = 2.0 * LIM / STEPS as f64;
    let mut total = 0.0;
    for i in 0..=STEPS {
        let z = -LIM + i as f64 * h;
        let w = if i == 0 || i == STEPS { 0.5 } else { 1.0 };
        let rate_e = (beta * z).exp() / time_scale;
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        total += w * pdf * rate_c / (rate_c + rate_e);
    }
    total * h
}

/// Censoring rate whose expected censored fraction equals `target`.
pub fn censoring_rate(target: f64, beta: f64, time_scale: f64) -> f64 {
    if target <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_censor_fraction(mid.exp(), beta, time_scale) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

/// Draws a cohort. Identical `(params, seed)` always give an identical cohort.
pub fn generate_cohort(params: &GeneratorParams, seed: u64) -> Result<Cohort> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = params.dim;
    let dir_p = unit_vector(&mut rng, d);
    let mu_p: Vec<f64> = unit_vector(&mut rng, d).into_iter().map(|v| v * params.signal_offset).collect();
    let dir_g = unit_vector(&mut rng, d);
    let mu_g: Vec<f64> = unit_vector(&mut rng, d).into_iter().map(|v| v * params.signal_offset).collect();
    let mut groups: Vec<usize> = (0..GENOMIC_GROUPS).collect();
    groups.shuffle(&mut rng);
    let signal_groups = &groups[..params.signal_groups];

    let rate_c = censoring_rate(params.censor_fraction, params.beta, params.time_scale);
    let share = params.pathology_share;
    let mut patients = Vec::with_capacity(params.n_patients);
    for i in 0..params.n_patients {
        let z_p = normal(&mut rng);
        let z_g = normal(&mut rng);
        let z = share.sqrt() * z_p + (1.0 - share).sqrt() * z_g;

        let n = rng.random_range(params.bag_min..=params.bag_max);
        let n_signal = ((params.signal_fraction * n as f64).round() as usize).clamp(1, n);
        let mut slots: Vec<usize> = (0..n).collect();
        slots.shuffle(&mut rng);
        let mut is_signal = vec![false; n];
        for &s in &slots[..n_signal] {
            is_signal[s] = true;
        }
        let mut bag = Vec::with_capacity(n * d);
        for &sig in &is_signal {
            for j in 0..d {
                let mut v = params.noise * normal(&mut rng);
                if sig {
                    v += mu_p[j] + z_p * params.signal_scale * dir_p[j];
                }
                bag.push(round32(v));
            }
        }
        let mut genomics = Vec::with_capacity(GENOMIC_GROUPS * d);
        for g in 0..GENOMIC_GROUPS {
            let sig = signal_groups.contains(&g);
            for j in 0..d {
                let mut v = params.noise * normal(&mut rng);
                if sig {
                    v += mu_g[j] + z_g * params.signal_scale * dir_g[j];
                }
                genomics.push(round32(v));
            }
        }

        let rate_e = (params.beta * z).exp() / params.time_scale;
        let t_event = Exp::new(rate_e).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng);
        let t_cens = if rate_c > 0.0 {
            Exp::new(rate_c).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng)
        } else {
            f64::INFINITY
        };
        let censored = t_cens < t_event;
        let time = round32(t_event.min(t_cens)).max(f32::MIN_POSITIVE as f64);
        patients.push(PatientRecord {
            id: format!("P{i:04}"),
            bag: Tensor::matrix(n, d, bag)?,
            genomics: Tensor::matrix(GENOMIC_GROUPS, d, genomics)?,
            label: SurvivalLabel { time, k: 1, censored },
            latent: Some(z),
        });
    }
    let mut cohort = Cohort {
        seed,
        params: params.clone(),
        edges: Vec::new(),
        patients,
    };
    cohort.rebin(DEFAULT_BINS)?;
    Ok(cohort)
}

// ---------------------------------------------------------------- MEBG

pub fn encode_bag(x: &Tensor) -> Result<Vec<u8>> {
    let (rows, cols) = x.dims2()?;
    let (r32, c32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => return Err(Error::dim("save_bag", format!("{rows}×{cols} exceeds the format's u32 extents"))),
    };
    let mut out = Vec::with_capacity(MEBG_HEADER_LEN + 4 * x.len());
    out.extend_from_slice(MEBG_MAGIC);
    out.extend_from_slice(&MEBG_VERSION.to_le_bytes());
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for &v in x.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_bag(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < MEBG_HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("header needs {MEBG_HEADER_LEN} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != MEBG_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != MEBG_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(6, format!("{rows}×{cols} overflows")))?;
    let payload = &bytes[MEBG_HEADER_LEN..];
    if payload.len() != expected {
        return Err(fail(
            MEBG_HEADER_LEN + payload.len().min(expected),
            format!("expected {expected} payload bytes, found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::matrix(rows, cols, data)
}

pub fn save_bag(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, encode_bag(x)?).map_err(|e| Error::io(path, e))
}

pub fn load_bag(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes, path)
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub id: String,
    pub bag_path: String,
    pub genomics_path: String,
    pub time: f64,
    /// 1 when right-censored.
    pub censor: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub patients: Vec<ManifestPatient>,
    pub edges: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub params: GeneratorParams,
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes bags, genomic matrices, and `manifest.json` under `dir`. Returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    for sub in ["bags", "genomics"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        let bag_rel = format!("bags/{}.mebg", p.id);
        let gen_rel = format!("genomics/{}.mebg", p.id);
        save_bag(&dir.join(&bag_rel), &p.bag)?;
        save_bag(&dir.join(&gen_rel), &p.genomics)?;
        entries.push(ManifestPatient {
            id: p.id.clone(),
            bag_path: bag_rel,
            genomics_path: gen_rel,
            time: p.label.time,
            censor: u8::from(p.label.censored),
            latent: p.latent,
        });
    }
    let manifest = Manifest {
        patients: entries,
        edges: cohort.edges.clone(),
        seed: cohort.seed,
        params: cohort.params.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&path))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Accepts either a manifest file or the directory containing `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(json_err(path))
}

pub fn load_cohort(path: &Path) -> Result<Cohort> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = std::collections::HashSet::new();
    let mut patients = Vec::with_capacity(manifest.patients.len());
    for e in &manifest.patients {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Format {
                path: path.clone(),
                offset: 0,
                detail: format!("duplicate patient id {}", e.id),
            });
        }
        if !(e.time > 0.0 && e.time.is_finite()) || e.censor > 1 {
            return Err(Error::Format {
                path: path.clone(),
                offset: 0,
                detail: format!("patient {} has invalid label (time {}, censor {})", e.id, e.time, e.censor),
            });
        }
        patients.push(PatientRecord {
            id: e.id.clone(),
            bag: load_bag(&base.join(&e.bag_path))?,
            genomics: load_bag(&base.join(&e.genomics_path))?,
            label: SurvivalLabel {
                time: e.time,
                k: interval_of(&manifest.edges, e.time),
                censored: e.censor == 1,
            },
            latent: e.latent,
        });
    }
    Ok(Cohort {
        seed: manifest.seed,
        params: manifest.params,
        edges: manifest.edges,
        patients,
    })
}

// ---------------------------------------------------------------- folds

/// Seeded shuffle into `k` folds whose sizes differ by at most one; the first
/// `n mod k` folds take the extra patient.
pub fn split_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot split {n} patients into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(idx[start..start + size].to_vec());
        start += size;
    }
    Ok(folds)
}
