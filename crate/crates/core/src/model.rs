//! The full network: two modality experts, the synergistic expert, and the hazard head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::experts::{Expert, DEFAULT_ATTENTION_HIDDEN, DEFAULT_EXPERT_DEPTH};
use crate::fusion::{FusionConfig, SynergisticExpert, TransportPlan};
use crate::ssm::DEFAULT_D_STATE;
use crate::survival::{self, HazardHead, SurvivalLabel, DEFAULT_BINS};

pub const DEFAULT_D_MODEL: usize = 256;

/// Which experts feed the hazard head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    PathologyOnly,
    GenomicsOnly,
    NoSynergistic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::PathologyOnly,
        Variant::GenomicsOnly,
        Variant::NoSynergistic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::PathologyOnly => "pathology-only",
            Variant::GenomicsOnly => "genomics-only",
            Variant::NoSynergistic => "no-synergistic",
        }
    }

    pub fn uses_pathology(self) -> bool {
        self != Variant::GenomicsOnly
    }

    pub fn uses_genomics(self) -> bool {
        self != Variant::PathologyOnly
    }

    pub fn uses_fusion(self) -> bool {
        self == Variant::Full
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub expert_depth: usize,
    pub attention_hidden: usize,
    pub n_bins: usize,
    pub fusion: FusionConfig,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: DEFAULT_D_MODEL,
            d_state: DEFAULT_D_STATE,
            expert_depth: DEFAULT_EXPERT_DEPTH,
            attention_hidden: DEFAULT_ATTENTION_HIDDEN,
            n_bins: DEFAULT_BINS,
            fusion: FusionConfig::default(),
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("expert_depth", self.expert_depth),
            ("attention_hidden", self.attention_hidden),
            ("n_bins", self.n_bins),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        self.fusion.validate()
    }
}

/// Forward-pass products needed for the loss.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub hazards: Var,
    pub global_loss: Option<Var>,
    pub plan: Option<TransportPlan>,
}

#[derive(Debug, Clone)]
pub struct MeMamba {
    pub config: ModelConfig,
    pub pathology: Option<Expert>,
    pub genomics: Option<Expert>,
    pub synergistic: Option<SynergisticExpert>,
    pub head: HazardHead,
}

impl MeMamba {
    /// Builds the model and registers its parameters in a fresh store.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let expert = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            Expert::new(store, rng, name, c.expert_depth, c.d_model, c.d_state, c.attention_hidden)
        };
        let pathology = c
            .variant
            .uses_pathology()
            .then(|| expert(&mut store, &mut rng, "pathology"))
            .transpose()?;
        let genomics = c
            .variant
            .uses_genomics()
            .then(|| expert(&mut store, &mut rng, "genomics"))
            .transpose()?;
        let synergistic = c
            .variant
            .uses_fusion()
            .then(|| SynergisticExpert::new(&mut store, &mut rng, "synergistic", &c.fusion, c.d_model, c.d_state))
            .transpose()?;
        let head = HazardHead::new(&mut store, &mut rng, "head", c.d_model, c.attention_hidden, c.n_bins);
        Ok((
            Self {
                config,
                pathology,
                genomics,
                synergistic,
                head,
            },
            store,
        ))
    }

    fn check_input(&self, name: &str, x: &Tensor) -> Result<()> {
        let (n, d) = x.dims2()?;
        if n == 0 || d != self.config.d_model {
            return Err(Error::dim(
                "model_forward",
                format!("{name} input is {n}×{d}, expected n≥1 rows of width {}", self.config.d_model),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, bag: &Tensor, genomics: &Tensor) -> Result<ModelOutput> {
        self.check_input("pathology", bag)?;
        self.check_input("genomics", genomics)?;
        let mut parts = Vec::with_capacity(3);
        let xp = match &self.pathology {
            Some(e) => {
                let x = tape.constant(bag.clone());
                let y = e.forward(tape, store, x)?;
                parts.push(y);
                Some(y)
            }
            None => None,
        };
        let xg = match &self.genomics {
            Some(e) => {
                let x = tape.constant(genomics.clone());
                let y = e.forward(tape, store, x)?;
                parts.push(y);
                Some(y)
            }
            None => None,
        };
        let (mut global_loss, mut plan) = (None, None);
        if let (Some(syn), Some(xp), Some(xg)) = (&self.synergistic, xp, xg) {
            let out = syn.forward(tape, store, xp, xg)?;
            parts.push(out.fused);
            global_loss = Some(out.global_loss);
            plan = Some(out.plan);
        }
        let hazards = self.head.predict(tape, store, &parts)?;
        Ok(ModelOutput {
            hazards,
            global_loss,
            plan,
        })
    }

    /// Total training loss for one patient.
    pub fn loss(&self, tape: &mut Tape, out: &ModelOutput, label: &SurvivalLabel) -> Result<Var> {
        let surv = survival::surv_loss(tape, out.hazards, label)?;
        survival::total_loss(tape, surv, out.global_loss, self.config.fusion.lambda)
    }

    /// Hazards for one patient without keeping the tape.
    pub fn predict(&self, store: &ParamStore, bag: &Tensor, genomics: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, bag, genomics)?;
        Ok(tape.value(out.hazards).data().to_vec())
    }

    pub fn risk(&self, store: &ParamStore, bag: &Tensor, genomics: &Tensor) -> Result<f64> {
        Ok(survival::risk_score(&self.predict(store, bag, genomics)?))
    }
}

/// Serialized model: architecture plus parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rebuilds the model and overwrites its parameters with the saved values.
    pub fn restore(&self) -> Result<(MeMamba, ParamStore)> {
        let (model, mut store) = MeMamba::new(self.config, 0)?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }
}
