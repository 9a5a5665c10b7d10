//! Run configuration.
//!
//! A TOML file names a `profile` (`lastfm`, `reddit` or `synthetic`, default
//! `lastfm`) and overrides any subset of that profile's values; unknown keys
//! are rejected. `thrnn config --profile <p>` prints a complete file.
//!
//! ```toml
//! profile = "reddit"
//! seed = 7
//! [model]
//! alpha_exp = 0.5
//! [evaluation.quadrature]
//! num_points = 4096
//! ```

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use thrnn_core::evaluation::EvalConfig;
use thrnn_core::hawkes::FitConfig;
use thrnn_core::pipeline::{BucketScheme, GapBucketizer, PipelineConfig};
use thrnn_core::synthetic::{ring_transition, ContextCoupling, GapComponent, SynthSpec};
use thrnn_core::{ModelConfig, SECONDS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Lastfm,
    Reddit,
    Synthetic,
}

/// Synthetic corpus recipe: a ring Markov chain over items and a gap
/// mixture, optionally coupled so that each mixture component owns a
/// contiguous block of the item vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRecipe {
    pub num_users: usize,
    pub sessions_per_user: usize,
    pub min_session_len: usize,
    pub max_session_len: usize,
    pub num_items: usize,
    /// Probability of moving one step along the ring; the rest is spread
    /// uniformly over the other items.
    pub stay_probability: f64,
    pub gap_mixture: Vec<GapComponent>,
    pub coupled: bool,
    pub persistence: f64,
    pub train_fraction: f64,
    pub start_time: i64,
}

impl Default for SynthRecipe {
    fn default() -> Self {
        SynthRecipe {
            num_users: 200,
            sessions_per_user: 60,
            min_session_len: 2,
            max_session_len: 6,
            num_items: 20,
            stay_probability: 0.6,
            gap_mixture: vec![
                GapComponent {
                    weight: 0.5,
                    mean_seconds: 0.2 * SECONDS_PER_DAY,
                },
                GapComponent {
                    weight: 0.5,
                    mean_seconds: 5.0 * SECONDS_PER_DAY,
                },
            ],
            coupled: true,
            persistence: 0.0,
            train_fraction: 0.8,
            start_time: 0,
        }
    }
}

impl SynthRecipe {
    pub fn to_spec(&self) -> Result<SynthSpec> {
        ensure!(self.num_items >= 2, "synthetic corpora need at least two items");
        let k = self.gap_mixture.len();
        let context_coupling = if self.coupled {
            ensure!(
                k > 0 && self.num_items.is_multiple_of(k),
                "coupled corpora split {} items evenly over {k} gap components",
                self.num_items
            );
            let block = self.num_items / k;
            Some(ContextCoupling {
                item_sets: (0..k).map(|c| (c * block..(c + 1) * block).collect()).collect(),
                persistence: self.persistence,
            })
        } else {
            None
        };
        let spec = SynthSpec {
            num_users: self.num_users,
            sessions_per_user: self.sessions_per_user,
            min_session_len: self.min_session_len,
            max_session_len: self.max_session_len,
            item_transition: ring_transition(self.num_items, self.stay_probability),
            gap_mixture: self.gap_mixture.clone(),
            context_coupling,
            train_fraction: self.train_fraction,
            start_time: self.start_time,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub epochs: usize,
    /// Evaluate on the test sessions after every epoch.
    pub validate_each_epoch: bool,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub evaluation: EvalConfig,
    pub hawkes_short: FitConfig,
    pub hawkes_long: FitConfig,
    pub synth: SynthRecipe,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (pipeline, model) = match profile {
            Profile::Lastfm => (PipelineConfig::lastfm(), ModelConfig::lastfm()),
            Profile::Reddit => (PipelineConfig::reddit(), ModelConfig::reddit()),
            Profile::Synthetic => (
                PipelineConfig {
                    max_session_len: SynthRecipe::default().max_session_len,
                    ..PipelineConfig::reddit()
                },
                ModelConfig {
                    item_embedding_dim: 16,
                    user_embedding_dim: 4,
                    gap_embedding_dim: 4,
                    hidden_dim_inter: 16,
                    hidden_dim_intra: 16,
                    dropout_rate: 0.0,
                    batch_size: 20,
                    learning_rate: 0.005,
                    learning_rate_time: 0.005,
                    gap_buckets: GapBucketizer::new(10.0 * SECONDS_PER_DAY, 10, BucketScheme::Uniform)
                        .expect("valid bucketizer"),
                    ..ModelConfig::lastfm()
                },
            ),
        };
        RunConfig {
            profile,
            seed: 42,
            epochs: match profile {
                Profile::Synthetic => 15,
                _ => 10,
            },
            validate_each_epoch: true,
            pipeline,
            model,
            evaluation: EvalConfig::default(),
            hawkes_short: FitConfig::short_window(),
            hawkes_long: FitConfig::long_term(),
            synth: SynthRecipe::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate().context("[pipeline]")?;
        self.model.validate().context("[model]")?;
        self.evaluation.validate().context("[evaluation]")?;
        self.hawkes_short.validate().context("[hawkes_short]")?;
        self.hawkes_long.validate().context("[hawkes_long]")?;
        ensure!(self.epochs > 0, "epochs must be positive");
        ensure!(
            self.evaluation.time_unit == self.model.time_unit,
            "evaluation.time_unit and model.time_unit differ"
        );
        Ok(())
    }

    /// Profile defaults overridden by the TOML text, then validated.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().context("parsing TOML")?;
        let profile = match user.get("profile") {
            None => Profile::Lastfm,
            Some(v) => v.clone().try_into().context("profile must be lastfm, reddit or synthetic")?,
        };
        let mut merged = toml::Table::try_from(Self::profile(profile))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Recursive table merge; `over` wins, except that nested tables merge.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses a comma-separated list of exponents, each in (0, 1].
pub fn parse_alphas(list: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let a: f64 = part.parse().with_context(|| format!("bad exponent {part:?}"))?;
        if !(a > 0.0 && a <= 1.0) {
            bail!("alpha_exp {a} is outside (0, 1]");
        }
        out.push(a);
    }
    ensure!(!out.is_empty(), "no exponents given");
    Ok(out)
}

/// The exponents swept in the original study.
pub const ALPHA_SWEEP: [f64; 5] = [0.3, 0.5, 0.7, 0.9, 1.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_profile_round_trips() {
        for p in [Profile::Lastfm, Profile::Reddit, Profile::Synthetic] {
            let cfg = RunConfig::profile(p);
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_overrides_keep_profile_defaults() {
        let cfg = RunConfig::from_toml("profile = \"reddit\"\nseed = 7\n[model]\nalpha_exp = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.alpha_exp, 0.5);
        assert_eq!(cfg.model.item_embedding_dim, 50);
        assert_eq!(cfg.pipeline, PipelineConfig::reddit());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = format!("{:#}", RunConfig::from_toml("[model]\nalpha = 0.5\n").unwrap_err());
        assert!(err.contains("alpha"), "{err}");
        assert!(RunConfig::from_toml("typo = 1\n").is_err());
        assert!(RunConfig::from_toml("[evaluation.quadrature]\npoints = 5\n").is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nalpha_exp = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[model]\nalpha_exp = 0.0\n").is_err());
        assert!(RunConfig::from_toml("epochs = 0\n").is_err());
        assert!(RunConfig::from_toml("profile = \"imdb\"\n").is_err());
    }

    #[test]
    fn alpha_lists() {
        assert_eq!(parse_alphas("0.3, 1.0").unwrap(), vec![0.3, 1.0]);
        assert!(parse_alphas("0").is_err());
        assert!(parse_alphas("1.2").is_err());
        assert!(parse_alphas("").is_err());
    }

    #[test]
    fn synthetic_recipe_builds_a_valid_spec() {
        let spec = SynthRecipe::default().to_spec().unwrap();
        assert_eq!(spec.num_items(), 20);
        let sets = &spec.context_coupling.unwrap().item_sets;
        assert_eq!(sets[1], (10..20).collect::<Vec<_>>());
        let odd = SynthRecipe {
            num_items: 21,
            ..SynthRecipe::default()
        };
        assert!(odd.to_spec().is_err());
    }
}
