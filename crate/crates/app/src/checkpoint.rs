//! Binary checkpoints.
//!
//! Layout: `b"EVLP"`, `u32` LE format version, `u64` LE header length, a JSON
//! header, then every tensor as LE `f64` in header order.

use std::path::Path;

use evalp_core::models::{EnergyFunction, FlowSampler, FlowSpec, Mlp, MlpSpec, Parameterized, VaeModel, VaeSpec};
use evalp_core::{SeededRng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"EVLP";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "spec", rename_all = "snake_case")]
pub enum ModelSpec {
    Vae(VaeSpec),
    Energy(MlpSpec),
    Flow(FlowSpec),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Vae(_) => "vae",
            Self::Energy(_) => "energy",
            Self::Flow(_) => "flow",
        }
    }

    /// Latent dimension the model reads or writes.
    pub fn nz(&self) -> usize {
        match self {
            Self::Vae(s) => s.nz,
            Self::Energy(s) => s.input(),
            Self::Flow(s) => s.nz,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(flatten)]
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    /// Snapshot of the run configuration that produced the model.
    pub config: serde_json::Value,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: ModelSpec, params: &impl Parameterized, config: serde_json::Value, seed: u64) -> Self {
        let tensors: Vec<(String, Tensor)> = params
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let entries = tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        Self {
            header: Header {
                model,
                tensors: entries,
                config,
                seed,
            },
            tensors,
        }
    }

    pub fn vae(model: &VaeModel, config: serde_json::Value, seed: u64) -> Self {
        Self::capture(ModelSpec::Vae(model.spec().clone()), model, config, seed)
    }

    pub fn energy(model: &EnergyFunction, config: serde_json::Value, seed: u64) -> Self {
        Self::capture(ModelSpec::Energy(model.mlp().spec().clone()), model, config, seed)
    }

    pub fn flow(model: &FlowSampler, config: serde_json::Value, seed: u64) -> Self {
        Self::capture(ModelSpec::Flow(model.spec()), model, config, seed)
    }

    pub fn to_bytes(&self) -> AppResult<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let floats: usize = self.tensors.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(PREAMBLE + header.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a checkpoint; `Err` carries a human-readable
    /// reason.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < PREAMBLE {
            return Err(format!("file is {} bytes, shorter than the preamble", bytes.len()));
        }
        if &bytes[..4] != MAGIC {
            return Err("not an EVLP checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format!("format version {version}, expected {VERSION}"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let header_end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(PREAMBLE))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format!("header length {len} exceeds file size"))?;
        let header: Header =
            serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| format!("header: {e}"))?;
        let mut payload = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= payload.len()))
                .ok_or_else(|| format!("payload truncated at tensor {}", entry.name))?;
            let (head, rest) = payload.split_at(8 * n);
            let data = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(&entry.shape, data).map_err(|e| format!("tensor {}: {e}", entry.name))?;
            tensors.push((entry.name.clone(), t));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(format!("{} trailing bytes after the last tensor", payload.len()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> AppResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| AppError::Checkpoint {
            path: path.into(),
            detail: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|detail| AppError::Checkpoint {
            path: path.into(),
            detail,
        })
    }

    fn fill<M: Parameterized>(&self, mut model: M) -> Result<M, String> {
        model.load_parameters(&self.tensors).map_err(|e| e.to_string())?;
        Ok(model)
    }

    fn expect_kind(&self, kind: &str) -> Result<(), String> {
        if self.header.model.kind() != kind {
            return Err(format!(
                "expected a {kind} checkpoint, found {}",
                self.header.model.kind()
            ));
        }
        Ok(())
    }

    pub fn into_vae(self) -> Result<VaeModel, String> {
        self.expect_kind("vae")?;
        let ModelSpec::Vae(spec) = &self.header.model else {
            unreachable!()
        };
        let model = VaeModel::new(spec.clone(), &mut SeededRng::new(0)).map_err(|e| e.to_string())?;
        self.fill(model)
    }

    pub fn into_energy(self) -> Result<EnergyFunction, String> {
        self.expect_kind("energy")?;
        let ModelSpec::Energy(spec) = &self.header.model else {
            unreachable!()
        };
        let spec = MlpSpec::new(spec.widths.clone(), spec.activations.clone()).map_err(|e| e.to_string())?;
        let model = EnergyFunction::from_mlp(Mlp::zeros(spec)).map_err(|e| e.to_string())?;
        self.fill(model)
    }

    pub fn into_flow(self) -> Result<FlowSampler, String> {
        self.expect_kind("flow")?;
        let ModelSpec::Flow(spec) = self.header.model else {
            unreachable!()
        };
        if spec.nz < 2 || spec.layers == 0 || spec.hidden == 0 {
            return Err(format!("invalid flow spec {spec:?}"));
        }
        self.fill(FlowSampler::new(spec, &mut SeededRng::new(0)))
    }
}

fn wrap(path: &Path, detail: String) -> AppError {
    AppError::Checkpoint {
        path: path.into(),
        detail,
    }
}

/// Trained models used by `sample` and `eval`.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub vae: VaeModel,
    pub energy: EnergyFunction,
    pub flow: FlowSampler,
}

impl ModelSet {
    /// Reads all three checkpoints and checks latent dimensions agree from
    /// the headers alone, before any parameters are materialised.
    pub fn load(vae: &Path, energy: &Path, flow: &Path) -> AppResult<Self> {
        let cks = [vae, energy, flow].map(Checkpoint::load);
        let [v, e, f] = cks;
        let (v, e, f) = (v?, e?, f?);
        let dims = [&v, &e, &f].map(|c| c.header.model.nz());
        if dims[1] != dims[0] || dims[2] != dims[0] {
            return Err(AppError::Incompatible(format!(
                "latent dimensions differ: vae {}, energy {}, flow {}",
                dims[0], dims[1], dims[2]
            )));
        }
        Ok(Self {
            vae: v.into_vae().map_err(|d| wrap(vae, d))?,
            energy: e.into_energy().map_err(|d| wrap(energy, d))?,
            flow: f.into_flow().map_err(|d| wrap(flow, d))?,
        })
    }
}
