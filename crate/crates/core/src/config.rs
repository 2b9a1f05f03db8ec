//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored; a `#` after a value
//! starts a comment. Absent keys keep their defaults, unknown or repeated keys
//! are rejected.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{ConfigError, Error, Result};
use crate::losses::StyleLossKind;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Random group order at inference; `None` keeps the identity order.
    pub shuffle_seed: Option<u64>,
    pub content_dir: Option<PathBuf>,
    pub style_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Weight file for inference, or the encoder to train with.
    pub weights: Option<PathBuf>,
}

/// Every accepted key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 27] = [
    "alpha",
    "k",
    "heads",
    "shared_gate",
    "proj_kernel",
    "vgg_width",
    "disc_width",
    "style_loss",
    "lr",
    "batch",
    "steps",
    "crop",
    "seed",
    "shuffle_seed",
    "d_every",
    "checkpoint_every",
    "lambda_adv",
    "lambda_rec",
    "lambda_cont",
    "lambda_sty",
    "lambda_remd",
    "lambda_rec1",
    "lambda_rec2",
    "content_dir",
    "style_dir",
    "out_dir",
    "weights",
];

fn parse<V: FromStr>(key: &str, value: &str, expected: &'static str) -> Result<V, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_owned(),
        value: value.to_owned(),
        expected,
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value {
            key: key.to_owned(),
            value: value.to_owned(),
            expected: "a boolean",
        }),
    }
}

impl FromStr for StyleLossKind {
    type Err = ();

    fn from_str(s: &str) -> std::result::Result<Self, ()> {
        match s {
            "stats" => Ok(StyleLossKind::Stats),
            "gram" => Ok(StyleLossKind::Gram),
            _ => Err(()),
        }
    }
}

impl std::fmt::Display for StyleLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StyleLossKind::Stats => "stats",
            StyleLossKind::Gram => "gram",
        })
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    text: raw.to_owned(),
                }
                .into());
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_owned(),
                }
                .into());
            }
            if !seen.insert(key.to_owned()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_owned(),
                }
                .into());
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let w = &mut t.weights;
        match key {
            "alpha" => t.model.sae.alpha = parse(key, v, "a number")?,
            "k" => t.model.k = parse(key, v, "a positive odd integer")?,
            "heads" => t.model.sae.heads = parse(key, v, "a positive integer")?,
            "shared_gate" => t.model.sae.shared_gate = parse_bool(key, v)?,
            "proj_kernel" => t.model.sae.proj_kernel = parse(key, v, "1 or 3")?,
            "vgg_width" => t.model.vgg_width = parse(key, v, "a positive integer")?,
            "disc_width" => t.disc_width = parse(key, v, "a positive integer")?,
            "style_loss" => t.style_loss = parse(key, v, "stats or gram")?,
            "lr" => t.lr = parse(key, v, "a number")?,
            "batch" => t.batch = parse(key, v, "a positive integer")?,
            "steps" => t.steps = parse(key, v, "an integer")?,
            "crop" => t.crop = parse(key, v, "a positive integer")?,
            "seed" => t.seed = parse(key, v, "an integer")?,
            "shuffle_seed" => self.shuffle_seed = Some(parse(key, v, "an integer")?),
            "d_every" => t.d_every = parse(key, v, "a positive integer")?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v, "an integer")?,
            "lambda_adv" => w.adv = parse(key, v, "a number")?,
            "lambda_rec" => w.rec = parse(key, v, "a number")?,
            "lambda_cont" => w.cont = parse(key, v, "a number")?,
            "lambda_sty" => w.sty = parse(key, v, "a number")?,
            "lambda_remd" => w.remd = parse(key, v, "a number")?,
            "lambda_rec1" => w.rec1 = parse(key, v, "a number")?,
            "lambda_rec2" => w.rec2 = parse(key, v, "a number")?,
            "content_dir" => self.content_dir = Some(v.into()),
            "style_dir" => self.style_dir = Some(v.into()),
            "out_dir" => self.out_dir = Some(v.into()),
            "weights" => self.weights = Some(v.into()),
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train.model.sae.validate(8 * self.train.model.vgg_width)?;
        let k = self.train.model.k;
        if k == 0 || k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("k must be a positive odd integer, got {k}")));
        }
        if self.train.model.vgg_width == 0 || self.train.disc_width == 0 {
            return Err(Error::InvalidArgument("network widths must be positive".into()));
        }
        Ok(())
    }

    /// Serializes every key; parsing the result gives back an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let w = &t.weights;
        let mut s = String::new();
        let mut line = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(s, "{k}={v}");
        };
        line("alpha", &t.model.sae.alpha);
        line("k", &t.model.k);
        line("heads", &t.model.sae.heads);
        line("shared_gate", &t.model.sae.shared_gate);
        line("proj_kernel", &t.model.sae.proj_kernel);
        line("vgg_width", &t.model.vgg_width);
        line("disc_width", &t.disc_width);
        line("style_loss", &t.style_loss);
        line("lr", &t.lr);
        line("batch", &t.batch);
        line("steps", &t.steps);
        line("crop", &t.crop);
        line("seed", &t.seed);
        if let Some(v) = self.shuffle_seed {
            line("shuffle_seed", &v);
        }
        line("d_every", &t.d_every);
        line("checkpoint_every", &t.checkpoint_every);
        line("lambda_adv", &w.adv);
        line("lambda_rec", &w.rec);
        line("lambda_cont", &w.cont);
        line("lambda_sty", &w.sty);
        line("lambda_remd", &w.remd);
        line("lambda_rec1", &w.rec1);
        line("lambda_rec2", &w.rec2);
        for (k, v) in [
            ("content_dir", &self.content_dir),
            ("style_dir", &self.style_dir),
            ("out_dir", &self.out_dir),
            ("weights", &self.weights),
        ] {
            if let Some(p) = v {
                line(k, &p.display());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = RunConfig::parse("# toy run\nlr = 0.001\nk=5  # wider\n\nstyle_loss=gram\ncontent_dir=data/c\n").unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.model.k, 5);
        assert_eq!(cfg.train.style_loss, StyleLossKind::Gram);
        assert_eq!(cfg.content_dir.as_deref(), Some(Path::new("data/c")));
        assert_eq!(cfg.train.batch, 2);
    }

    #[test]
    fn rejects_bad_input() {
        for (text, needle) in [
            ("learning_rate=1", "unknown key"),
            ("lr=1\nlr=2", "duplicate key"),
            ("lr", "expected key=value"),
            ("lr=fast", "cannot parse"),
            ("k=4", "odd"),
            ("shared_gate=maybe", "boolean"),
        ] {
            let err = RunConfig::parse(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text:?}: {err}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.shuffle_seed = Some(9);
        cfg.out_dir = Some("runs/a".into());
        cfg.train.lr = 3e-4;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(KEYS.len(), KEYS.iter().collect::<HashSet<_>>().len());
    }
}
