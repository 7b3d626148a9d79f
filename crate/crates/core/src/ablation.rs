//! Named ablation grids, each a list of config override sets.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Text and prototype branches on/off.
    Branches,
    /// Number of learnable context tokens.
    Tokens,
    /// Prototype-text alignment loss.
    AlignLoss,
    /// Image encoder.
    Encoder,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branches" => Ok(Grid::Branches),
            "tokens" => Ok(Grid::Tokens),
            "align-loss" => Ok(Grid::AlignLoss),
            "encoder" => Ok(Grid::Encoder),
            other => Err(Error::Config(format!(
                "unknown grid {other:?} (branches|tokens|align-loss|encoder)"
            ))),
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Branches => "branches",
            Grid::Tokens => "tokens",
            Grid::AlignLoss => "align-loss",
            Grid::Encoder => "encoder",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<String>,
}

fn variant(name: impl Into<String>, overrides: &[String]) -> Variant {
    Variant {
        name: name.into(),
        overrides: overrides.to_vec(),
    }
}

pub fn variants(grid: Grid) -> Vec<Variant> {
    match grid {
        Grid::Branches => [(true, true), (true, false), (false, true), (false, false)]
            .into_iter()
            .map(|(text, proto)| {
                let name = match (text, proto) {
                    (true, true) => "text+proto",
                    (true, false) => "text-only",
                    (false, true) => "proto-only",
                    (false, false) => "no-alignment-branches",
                };
                variant(
                    name,
                    &[format!("align.use_text={text}"), format!("align.use_prototype={proto}")],
                )
            })
            .collect(),
        Grid::Tokens => [0, 2, 3, 4, 5]
            .into_iter()
            .map(|m| variant(format!("tokens-{m}"), &[format!("align.num_context_tokens={m}")]))
            .collect(),
        Grid::AlignLoss => ["none", "cosine", "kl", "mse"]
            .into_iter()
            .map(|k| variant(format!("align-{k}"), &[format!("align.loss=\"{k}\"")]))
            .collect(),
        Grid::Encoder => ["toy", "uni"]
            .into_iter()
            .map(|k| variant(format!("encoder-{k}"), &[format!("encoder.kind=\"{k}\"")]))
            .collect(),
    }
}
