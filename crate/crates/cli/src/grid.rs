//! Experiment grids for `compare`.
//!
//! Text format, one directive per line, `#` starts a comment:
//!
//! ```text
//! seeds = 0 1 2
//! base train.steps=300
//! arm baseline encoder.strategy=mim encoder.denoise_weight=0
//! arm full
//! ```
//!
//! `base` overrides apply to every arm before the arm's own.

use noisymim_core::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub seeds: Vec<u64>,
    pub base: Vec<String>,
    pub arms: Vec<Arm>,
}

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

fn arm(name: &str, overrides: &[&str]) -> Arm {
    Arm {
        name: name.into(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
    }
}

/// Names accepted by [`builtin`].
pub const BUILTINS: [&str; 4] = ["components", "strategies", "noise-blocks", "disruption"];

pub fn builtin(name: &str) -> Option<Grid> {
    let arms = match name {
        // Plain MIM, then feature-level noise and the affinity-entropy term
        // added separately and together.
        "components" => vec![
            arm(
                "baseline",
                &[
                    "encoder.strategy=mim",
                    "encoder.noise_block=0",
                    "encoder.denoise_weight=0",
                    "encoder.disruption_weight=0",
                ],
            ),
            arm(
                "feature-noise",
                &[
                    "encoder.strategy=hybrid",
                    "encoder.noise_block=2",
                    "encoder.disruption_weight=0",
                ],
            ),
            arm(
                "disentangle",
                &[
                    "encoder.strategy=hybrid",
                    "encoder.noise_block=0",
                    "encoder.disruption_weight=0.1",
                ],
            ),
            arm(
                "both",
                &[
                    "encoder.strategy=hybrid",
                    "encoder.noise_block=2",
                    "encoder.disruption_weight=0.1",
                ],
            ),
        ],
        "strategies" => ["mim", "diffused", "hybrid"]
            .iter()
            .map(|s| {
                let mut a = arm(s, &["encoder.disruption_weight=0"]);
                a.overrides.push(format!("encoder.strategy={s}"));
                if *s == "mim" {
                    a.overrides.push("encoder.denoise_weight=0".into());
                }
                a
            })
            .collect(),
        "noise-blocks" => [0, 2, 4, 6]
            .iter()
            .map(|k| Arm {
                name: format!("block{k}"),
                overrides: vec![format!("encoder.noise_block={k}")],
            })
            .collect(),
        "disruption" => vec![
            arm("off", &["encoder.disruption_weight=0"]),
            arm("on", &["encoder.disruption_weight=0.1"]),
        ],
        _ => return None,
    };
    Some(Grid {
        seeds: DEFAULT_SEEDS.to_vec(),
        base: Vec::new(),
        arms,
    })
}

fn bad(line: usize, detail: impl std::fmt::Display) -> Error {
    Error::Config(format!("grid line {line}: {detail}"))
}

fn check_override(line: usize, kv: &str) -> Result<()> {
    match kv.split_once('=') {
        Some((k, _)) if !k.is_empty() => Ok(()),
        _ => Err(bad(line, format!("expected key=value, got `{kv}`"))),
    }
}

pub fn parse_grid(text: &str) -> Result<Grid> {
    let mut grid = Grid {
        seeds: DEFAULT_SEEDS.to_vec(),
        base: Vec::new(),
        arms: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().unwrap_or("");
        if let Some(rest) = line.strip_prefix("seeds") {
            let rest = rest.trim_start();
            let list = rest
                .strip_prefix('=')
                .ok_or_else(|| bad(n, "expected `seeds = ...`"))?;
            grid.seeds = list
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|_| bad(n, format!("bad seed `{s}`"))))
                .collect::<Result<_>>()?;
            continue;
        }
        match head {
            "base" => {
                for kv in words {
                    check_override(n, kv)?;
                    grid.base.push(kv.to_string());
                }
            }
            "arm" => {
                let name = words.next().ok_or_else(|| bad(n, "arm needs a name"))?;
                if name.contains('=') || name.contains('/') {
                    return Err(bad(n, format!("invalid arm name `{name}`")));
                }
                if grid.arms.iter().any(|a| a.name == name) {
                    return Err(bad(n, format!("duplicate arm `{name}`")));
                }
                let overrides = words
                    .map(|kv| check_override(n, kv).map(|_| kv.to_string()))
                    .collect::<Result<_>>()?;
                grid.arms.push(Arm {
                    name: name.into(),
                    overrides,
                });
            }
            other => return Err(bad(n, format!("unknown directive `{other}`"))),
        }
    }
    if grid.arms.is_empty() {
        return Err(Error::Config("grid defines no arms".into()));
    }
    if grid.seeds.is_empty() {
        return Err(Error::Config("grid has an empty seed list".into()));
    }
    Ok(grid)
}
