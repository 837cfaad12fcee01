use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a toy transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            vocab: 256,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_layers: 2,
            seed: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `(d_out, d_in)` of a projection.
    pub fn proj_shape(&self, kind: ProjKind) -> (usize, usize) {
        match kind {
            ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => (self.d_model, self.d_model),
            ProjKind::Gate | ProjKind::Up => (self.d_ff, self.d_model),
            ProjKind::Down => (self.d_model, self.d_ff),
        }
    }
}

/// The seven patchable projection sub-types, in canonical block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ProjKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl ProjKind {
    pub const ALL: [ProjKind; 7] = [
        ProjKind::Q,
        ProjKind::K,
        ProjKind::V,
        ProjKind::O,
        ProjKind::Gate,
        ProjKind::Up,
        ProjKind::Down,
    ];

    pub fn sub_type(self) -> &'static str {
        match self {
            ProjKind::Q => "q_proj",
            ProjKind::K => "k_proj",
            ProjKind::V => "v_proj",
            ProjKind::O => "o_proj",
            ProjKind::Gate => "gate_proj",
            ProjKind::Up => "up_proj",
            ProjKind::Down => "down_proj",
        }
    }

    fn group(self) -> &'static str {
        match self {
            ProjKind::Q | ProjKind::K | ProjKind::V | ProjKind::O => "attn",
            _ => "mlp",
        }
    }

    pub fn from_sub_type(s: &str) -> Option<ProjKind> {
        ProjKind::ALL.into_iter().find(|k| k.sub_type() == s)
    }
}

/// Canonical address of one projection, e.g. `blocks.0.attn.q_proj`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LayerId {
    pub block: usize,
    pub kind: ProjKind,
}

impl LayerId {
    pub fn new(block: usize, kind: ProjKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "blocks.{}.{}.{}",
            self.block,
            self.kind.group(),
            self.kind.sub_type()
        )
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownLayer(s.to_string());
        let mut parts = s.split('.');
        if parts.next() != Some("blocks") {
            return Err(unknown());
        }
        let block: usize = parts.next().and_then(|b| b.parse().ok()).ok_or_else(unknown)?;
        let group = parts.next().ok_or_else(unknown)?;
        let kind = parts
            .next()
            .and_then(ProjKind::from_sub_type)
            .ok_or_else(unknown)?;
        if parts.next().is_some() || kind.group() != group {
            return Err(unknown());
        }
        Ok(LayerId { block, kind })
    }
}
