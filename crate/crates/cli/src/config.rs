//! The run configuration file.
//!
//! ```text
//! # comment
//! [model]
//! attention = sla
//! [train]
//! lambda = 1.0
//! [data]
//! root = runs/data
//! [eval]
//! split = test
//! ```
//!
//! `[model]` and `[train]` keys map onto [`TrainConfig`], `[data]` holds the
//! dataset location, palette and synthetic-scene parameters, `[eval]` the
//! evaluation split. Unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use semfuse::data::{Split, SynthSpec};
use semfuse::types::TRAIN_CONFIG_KEYS;
use semfuse::{LabelPalette, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Dataset root holding `{split}/ir`, `{split}/vis`, `{split}/labels`.
    pub root: Option<PathBuf>,
    /// `synthetic`, `mfnet` or `numbered`.
    pub palette: String,
    pub train_split: Split,
    /// `None` trains without validation.
    pub val_split: Option<Split>,
    pub synth: SynthSpec,
    pub val_images: usize,
    pub test_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            palette: "synthetic".into(),
            train_split: Split::Train,
            val_split: Some(Split::Val),
            synth: SynthSpec::default(),
            val_images: 16,
            test_images: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub split: Split,
    pub ignore_index: Option<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            ignore_index: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn optional(value: &str) -> Option<&str> {
    (!value.is_empty() && !value.eq_ignore_ascii_case("none")).then_some(value)
}

impl RunConfig {
    /// Sets `section.key`; `value` is already trimmed and unquoted.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let d = &mut self.data;
        match key {
            "data.root" => d.root = optional(value).map(PathBuf::from),
            "data.palette" => {
                palette_by_name(value, self.train.class_count)?;
                d.palette = value.to_ascii_lowercase();
            }
            "data.train_split" => d.train_split = value.parse().map_err(|e| format!("{e}"))?,
            "data.val_split" => {
                d.val_split = optional(value)
                    .map(str::parse)
                    .transpose()
                    .map_err(|e| format!("{e}"))?
            }
            "data.size" => d.synth.size = parse(key, value)?,
            "data.images" => d.synth.count = parse(key, value)?,
            "data.val_images" => d.val_images = parse(key, value)?,
            "data.test_images" => d.test_images = parse(key, value)?,
            "data.seed" => d.synth.seed = parse(key, value)?,
            "data.glare_probability" => d.synth.glare_probability = parse(key, value)?,
            "data.blob_min" => d.synth.blob_range.0 = parse(key, value)?,
            "data.blob_max" => d.synth.blob_range.1 = parse(key, value)?,
            "eval.split" => self.eval.split = value.parse().map_err(|e| format!("{e}"))?,
            "eval.ignore_index" => {
                self.eval.ignore_index = optional(value).map(|v| parse(key, v)).transpose()?
            }
            k if TRAIN_CONFIG_KEYS.contains(&k) => {
                self.train.set(k, value).map_err(|e| e.to_string())?
            }
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses a configuration file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        let mut section: Option<String> = None;
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "train", "data", "eval"].contains(&name) {
                    return Err(format!("line {line_no}: unknown section [{name}]"));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("line {line_no}: expected `key = value`, got `{line}`"))?;
            let sec = section.as_deref().ok_or_else(|| {
                format!(
                    "line {line_no}: `{}` appears before any [section]",
                    key.trim()
                )
            })?;
            let full = format!("{sec}.{}", key.trim());
            cfg.set(&full, unquote(value.trim()))
                .map_err(|e| format!("line {line_no}: {e}"))?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), String> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| format!("--set expects section.key=value, got `{spec}`"))?;
        self.set(k.trim(), unquote(v.trim()))
            .map_err(|e| format!("--set {spec}: {e}"))
    }

    /// Cross-field checks run after all overrides.
    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        let palette = self.palette()?;
        if palette.class_count() != self.train.class_count {
            return Err(format!(
                "palette `{}` has {} classes but model.class_count = {}",
                self.data.palette,
                palette.class_count(),
                self.train.class_count
            ));
        }
        Ok(())
    }

    pub fn palette(&self) -> Result<LabelPalette, String> {
        let p = palette_by_name(&self.data.palette, self.train.class_count)?;
        LabelPalette::new(p.class_names().to_vec(), self.eval.ignore_index)
            .map_err(|e| e.to_string())
    }

    /// The effective configuration as a loadable file.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut section = String::new();
        let mut kv: Vec<(String, String)> = self.train.to_kv();
        let d = &self.data;
        let opt = |o: Option<String>| o.unwrap_or_else(|| "none".into());
        kv.extend([
            (
                "data.root".into(),
                opt(d.root.as_ref().map(|p| p.display().to_string())),
            ),
            ("data.palette".into(), d.palette.clone()),
            ("data.train_split".into(), d.train_split.to_string()),
            (
                "data.val_split".into(),
                opt(d.val_split.map(|s| s.to_string())),
            ),
            ("data.size".into(), d.synth.size.to_string()),
            ("data.images".into(), d.synth.count.to_string()),
            ("data.val_images".into(), d.val_images.to_string()),
            ("data.test_images".into(), d.test_images.to_string()),
            ("data.seed".into(), d.synth.seed.to_string()),
            (
                "data.glare_probability".into(),
                d.synth.glare_probability.to_string(),
            ),
            ("data.blob_min".into(), d.synth.blob_range.0.to_string()),
            ("data.blob_max".into(), d.synth.blob_range.1.to_string()),
            ("eval.split".into(), self.eval.split.to_string()),
            (
                "eval.ignore_index".into(),
                opt(self.eval.ignore_index.map(|i| i.to_string())),
            ),
        ]);
        for (k, v) in kv {
            let (sec, key) = k.split_once('.').expect("sectioned key");
            if sec != section {
                if !s.is_empty() {
                    s.push('\n');
                }
                writeln!(s, "[{sec}]").unwrap();
                section = sec.to_string();
            }
            writeln!(s, "{key} = {v}").unwrap();
        }
        s
    }
}

pub fn palette_by_name(name: &str, class_count: usize) -> Result<LabelPalette, String> {
    match name.to_ascii_lowercase().as_str() {
        "synthetic" => Ok(LabelPalette::synthetic()),
        "mfnet" => Ok(LabelPalette::mfnet()),
        "numbered" => Ok(LabelPalette::numbered(class_count)),
        other => Err(format!(
            "unknown palette `{other}` (synthetic, mfnet, numbered)"
        )),
    }
}

fn strip_comment(line: &str) -> &str {
    let cut = line.find(['#', ';']).unwrap_or(line.len());
    &line[..cut]
}

fn unquote(v: &str) -> &str {
    v.strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .unwrap_or(v)
}
