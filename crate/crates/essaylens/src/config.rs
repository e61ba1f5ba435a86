//! Runtime settings. Precedence, highest first: command-line flags,
//! `ESSAYLENS_*` environment variables, a JSON config file, defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "ESSAYLENS_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model_dir: PathBuf,
    pub provider: String,
    pub bind: String,
    pub port: u16,
    pub seed: u64,
    /// Highlight threshold for analysis responses.
    pub tau: f64,
    pub static_dir: PathBuf,
    /// JSON array of essay-set metadata overriding the built-in table.
    pub meta_file: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model_dir: PathBuf::from("./models"),
            provider: "hashed-bow".into(),
            bind: "127.0.0.1".into(),
            port: 8080,
            seed: 42,
            tau: essaylens_core::insight::DEFAULT_TAU,
            static_dir: PathBuf::from("./ui/dist"),
            meta_file: None,
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub model_dir: Option<PathBuf>,
    pub provider: Option<String>,
    pub port: Option<u16>,
    pub seed: Option<u64>,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}{} = `{}` is not valid", ENV_PREFIX, key, v)))
}

impl Config {
    /// `env` is the process environment or a stand-in for it. The config
    /// file is `file` if given, else `ESSAYLENS_CONFIG` if set.
    pub fn load<I, K, V>(file: Option<&Path>, env: I, flags: &Overrides) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| {
                k.as_ref()
                    .strip_prefix(ENV_PREFIX)
                    .map(|k| (k.to_string(), v.as_ref().to_string()))
            })
            .collect();
        let env_file = env.iter().find(|(k, _)| k == "CONFIG").map(|(_, v)| PathBuf::from(v));
        let mut cfg = match file.map(Path::to_path_buf).or(env_file) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e)))?
            }
            None => Config::default(),
        };
        for (k, v) in &env {
            match k.as_str() {
                "MODEL_DIR" => cfg.model_dir = v.into(),
                "PROVIDER" => cfg.provider = v.clone(),
                "BIND" => cfg.bind = v.clone(),
                "PORT" => cfg.port = parse(k, v)?,
                "SEED" => cfg.seed = parse(k, v)?,
                "TAU" => cfg.tau = parse(k, v)?,
                "STATIC_DIR" => cfg.static_dir = v.into(),
                "META_FILE" => cfg.meta_file = Some(v.into()),
                _ => {}
            }
        }
        if let Some(d) = &flags.model_dir {
            cfg.model_dir = d.clone();
        }
        if let Some(p) = &flags.provider {
            cfg.provider = p.clone();
        }
        if let Some(p) = flags.port {
            cfg.port = p;
        }
        if let Some(s) = flags.seed {
            cfg.seed = s;
        }
        if !(0.0..1.0).contains(&cfg.tau) {
            return Err(Error::Config(format!("tau {} must lie in [0, 1)", cfg.tau)));
        }
        Ok(cfg)
    }
}
