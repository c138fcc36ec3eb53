//! Experiment configuration: TOML with `[data]`, `[topology]`, `[train]` and
//! `[eval]` sections plus top-level `name` and `output`. Parsing reports
//! every problem in one pass, each with its line when it can be located.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};

use crate::losses::LossWeights;
use crate::model::{Attention, TopologyConfig};
use crate::pipeline::dataset::DataConfig;
use crate::pipeline::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalizationMode {
    /// Coarse U-Net trained on the training split.
    #[default]
    Unet,
    /// Region centered on the ground-truth centroid.
    Oracle,
}

/// Grid axes; the cells are their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyGrid {
    #[serde(default = "d_names")]
    pub names: Vec<String>,
    #[serde(default = "d_alpha")]
    pub alpha: Vec<f64>,
    #[serde(default = "d_attention")]
    pub attention: Vec<Attention>,
    #[serde(default)]
    pub attention_averaged: bool,
    #[serde(default = "d_width")]
    pub base_width: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_slices")]
    pub in_slices: usize,
    /// Training seeds; defaults to `[train] seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

fn d_names() -> Vec<String> {
    vec!["hf-6".into()]
}
fn d_alpha() -> Vec<f64> {
    vec![0.2]
}
fn d_attention() -> Vec<Attention> {
    vec![Attention::None]
}
fn d_width() -> usize {
    8
}
fn d_depth() -> usize {
    3
}
fn d_slices() -> usize {
    3
}

impl Default for TopologyGrid {
    fn default() -> Self {
        Self {
            names: d_names(),
            alpha: d_alpha(),
            attention: d_attention(),
            attention_averaged: false,
            base_width: d_width(),
            depth: d_depth(),
            in_slices: d_slices(),
            seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub localization: LocalizationMode,
    #[serde(default = "d_loc_epochs")]
    pub localizer_epochs: usize,
    #[serde(default = "d_loc_steps")]
    pub localizer_steps_per_epoch: usize,
    #[serde(default = "d_loc_batch")]
    pub localizer_batch: usize,
    #[serde(default = "d_true")]
    pub largest_component: bool,
    #[serde(default = "d_infer_batch")]
    pub infer_batch: usize,
    /// Validate on the val split every this many epochs; 0 disables.
    #[serde(default)]
    pub validate_every: usize,
}

fn d_loc_epochs() -> usize {
    4
}
fn d_loc_steps() -> usize {
    25
}
fn d_loc_batch() -> usize {
    8
}
fn d_true() -> bool {
    true
}
fn d_infer_batch() -> usize {
    16
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            localization: LocalizationMode::Unet,
            localizer_epochs: d_loc_epochs(),
            localizer_steps_per_epoch: d_loc_steps(),
            localizer_batch: d_loc_batch(),
            largest_component: true,
            infer_batch: d_infer_batch(),
            validate_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_name")]
    pub name: String,
    #[serde(default = "d_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub topology: TopologyGrid,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn d_name() -> String {
    "experiment".into()
}
fn d_output() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: d_name(),
            output: d_output(),
            data: DataConfig::default(),
            topology: TopologyGrid::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// One point of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub topology: TopologyConfig,
    pub seed: u64,
}

impl Cell {
    /// Directory-safe identifier, e.g. `hf-6-a0.2-none-s0`.
    pub fn id(&self) -> String {
        format!("{}-a{}-{}-s{}", self.topology.name(), self.topology.alpha, self.topology.attention, self.seed)
    }
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Vec<u64> {
        self.topology.seeds.clone().unwrap_or_else(|| vec![self.train.seed])
    }

    /// Cells in names, alpha, attention, seed order.
    pub fn cells(&self) -> Result<Vec<Cell>, String> {
        let g = &self.topology;
        let mut out = Vec::new();
        for name in &g.names {
            let base = TopologyConfig::named(name).map_err(|e| e.to_string())?;
            for &alpha in &g.alpha {
                for &attention in &g.attention {
                    for seed in self.seeds() {
                        let topology = TopologyConfig {
                            alpha,
                            attention,
                            attention_averaged: g.attention_averaged,
                            base_width: g.base_width,
                            depth: g.depth,
                            in_slices: g.in_slices,
                            ..base.clone()
                        };
                        out.push(Cell { topology, seed });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Constraint violations as `(section, field, message)`.
    fn constraint_issues(&self) -> Vec<(&'static str, Option<String>, String)> {
        let mut out = Vec::new();
        for m in self.data.validate() {
            out.push(("data", None, m));
        }
        for m in self.train.validate() {
            out.push(("train", None, m));
        }
        let g = &self.topology;
        for (field, empty) in [
            ("names", g.names.is_empty()),
            ("alpha", g.alpha.is_empty()),
            ("attention", g.attention.is_empty()),
            ("seeds", g.seeds.as_ref().is_some_and(|s| s.is_empty())),
        ] {
            if empty {
                out.push(("topology", Some(field.into()), format!("{field} must not be empty")));
            }
        }
        for &a in &g.alpha {
            if !(0.0..=1.0).contains(&a) {
                out.push(("topology", Some("alpha".into()), format!("alpha {a} outside [0, 1]")));
            }
        }
        for n in &g.names {
            let Ok(mut t) = TopologyConfig::named(n) else {
                out.push(("topology", Some("names".into()), format!("unknown topology '{n}' (unet, eb, lb, hf-<k>)")));
                continue;
            };
            t.depth = g.depth;
            t.base_width = g.base_width;
            t.in_slices = g.in_slices;
            if let Err(e) = t.validate() {
                out.push(("topology", None, format!("{n}: {e}")));
            }
        }
        let crop = self.train.crop_size;
        let m = 1usize << g.depth.min(16);
        if crop % m != 0 {
            out.push(("train", Some("crop_size".into()), format!("crop_size {crop} must be divisible by 2^depth = {m}")));
        }
        let e = &self.eval;
        if e.localizer_epochs == 0 || e.localizer_steps_per_epoch == 0 || e.localizer_batch == 0 || e.infer_batch == 0 {
            out.push(("eval", None, "localizer_epochs, localizer_steps_per_epoch, localizer_batch and infer_batch must be positive".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            out.push(("", Some("name".into()), format!("name '{}' must be a non-empty single path component", self.name)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    Syntax,
    UnknownKey,
    Type,
    Constraint,
    Io,
}

impl fmt::Display for IssueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Syntax => "syntax",
            Self::UnknownKey => "unknown key",
            Self::Type => "type mismatch",
            Self::Constraint => "constraint",
            Self::Io => "io",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub kind: IssueKind,
    /// 1-based line in the source, when known.
    pub line: Option<usize>,
    /// Dotted key path, e.g. `topology.alpha`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(l) = self.line {
            write!(f, "line {l}: ")?;
        }
        write!(f, "{}", self.kind)?;
        if !self.path.is_empty() {
            write!(f, " at {}", self.path)?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.0.len();
        write!(f, "{n} config error{}", if n == 1 { "" } else { "s" })?;
        for i in &self.0 {
            write!(f, "\n  {i}")?;
        }
        Ok(())
    }
}

/// Field names a struct's `Deserialize` impl accepts.
fn struct_fields<T: for<'de> Deserialize<'de>>() -> &'static [&'static str] {
    #[derive(Debug)]
    struct Stop;
    impl fmt::Display for Stop {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("probe")
        }
    }
    impl std::error::Error for Stop {}
    impl de::Error for Stop {
        fn custom<M: fmt::Display>(_: M) -> Self {
            Stop
        }
    }
    struct Probe<'a>(&'a mut &'static [&'static str]);
    impl<'de> Deserializer<'de> for Probe<'_> {
        type Error = Stop;
        fn deserialize_any<V: Visitor<'de>>(self, _: V) -> Result<V::Value, Stop> {
            Err(Stop)
        }
        fn deserialize_struct<V: Visitor<'de>>(
            self,
            _: &'static str,
            fields: &'static [&'static str],
            _: V,
        ) -> Result<V::Value, Stop> {
            *self.0 = fields;
            Err(Stop)
        }
        serde::forward_to_deserialize_any! {
            bool i8 i16 i32 i64 i128 u8 u16 u32 u64 u128 f32 f64 char str string bytes byte_buf option unit
            unit_struct newtype_struct seq tuple tuple_struct map enum identifier ignored_any
        }
    }
    let mut f: &'static [&'static str] = &[];
    let _ = T::deserialize(Probe(&mut f));
    f
}

/// 1-based line of `key = ...` inside `[section]` (top level for "").
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in src.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[') {
            current = h.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
            continue;
        }
        if current != section {
            continue;
        }
        if let Some(rest) = line.strip_prefix(key) {
            let rest = rest.trim_start();
            if rest.starts_with('=') || rest.starts_with('.') {
                return Some(i + 1);
            }
        }
    }
    None
}

fn line_of_offset(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn clean(e: &toml::de::Error) -> String {
    e.message().trim().to_string()
}

/// Checks the keys of `table` against `T`, then type-checks each known key
/// on its own so that every mismatch is reported.
fn check_section<T: for<'de> Deserialize<'de>>(
    src: &str,
    section: &str,
    table: &toml::Table,
    issues: &mut Vec<ConfigIssue>,
) {
    let fields = struct_fields::<T>();
    let header = if section.is_empty() { String::new() } else { format!("{section}.") };
    for (k, v) in table {
        let path = format!("{header}{k}");
        if !fields.contains(&k.as_str()) {
            issues.push(ConfigIssue {
                kind: IssueKind::UnknownKey,
                line: locate(src, section, k),
                path,
                message: format!("unknown key '{k}' (expected one of: {})", fields.join(", ")),
            });
            continue;
        }
        if section == "train" && k == "weights" {
            if let toml::Value::Table(w) = v {
                check_section::<LossWeights>(src, "train.weights", w, issues);
                continue;
            }
        }
        let mut one = toml::Table::new();
        one.insert(k.clone(), v.clone());
        if let Err(e) = toml::Value::Table(one).try_into::<T>() {
            issues.push(ConfigIssue {
                kind: IssueKind::Type,
                line: locate(src, section, k).or_else(|| locate(src, &path, "")),
                path,
                message: clean(&e),
            });
        }
    }
}

/// Parses and validates a config from TOML text.
pub fn parse_config_str(src: &str) -> Result<ExperimentConfig, ConfigErrors> {
    let root: toml::Table = match src.parse() {
        Ok(t) => t,
        Err(e) => {
            let e: toml::de::Error = e;
            return Err(ConfigErrors(vec![ConfigIssue {
                kind: IssueKind::Syntax,
                line: e.span().map(|s| line_of_offset(src, s.start)),
                path: String::new(),
                message: clean(&e),
            }]));
        }
    };
    let mut issues = Vec::new();
    let mut top = toml::Table::new();
    for (k, v) in &root {
        match (k.as_str(), v) {
            ("data", toml::Value::Table(t)) => check_section::<DataConfig>(src, "data", t, &mut issues),
            ("topology", toml::Value::Table(t)) => check_section::<TopologyGrid>(src, "topology", t, &mut issues),
            ("train", toml::Value::Table(t)) => check_section::<TrainConfig>(src, "train", t, &mut issues),
            ("eval", toml::Value::Table(t)) => check_section::<EvalConfig>(src, "eval", t, &mut issues),
            _ => {
                top.insert(k.clone(), v.clone());
            }
        }
    }
    check_section::<ExperimentConfig>(src, "", &top, &mut issues);
    if !issues.is_empty() {
        issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
        return Err(ConfigErrors(issues));
    }
    let cfg: ExperimentConfig = toml::Value::Table(root).try_into().map_err(|e| {
        ConfigErrors(vec![ConfigIssue { kind: IssueKind::Type, line: None, path: String::new(), message: clean(&e) }])
    })?;
    for (section, field, message) in cfg.constraint_issues() {
        let field = field.or_else(|| {
            let first = message.split([' ', ',', ':']).next().unwrap_or("");
            locate(src, section, first).map(|_| first.to_string())
        });
        let line = field.as_deref().and_then(|f| locate(src, section, f)).or_else(|| locate(src, section, ""));
        let path = match (section, field) {
            ("", Some(f)) => f,
            (s, Some(f)) => format!("{s}.{f}"),
            (s, None) => s.to_string(),
        };
        issues.push(ConfigIssue { kind: IssueKind::Constraint, line, path, message });
    }
    issues.sort_by_key(|i| i.line.unwrap_or(usize::MAX));
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigErrors(issues))
    }
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigErrors> {
    let p = path.as_ref();
    let src = std::fs::read_to_string(p).map_err(|e| {
        ConfigErrors(vec![ConfigIssue {
            kind: IssueKind::Io,
            line: None,
            path: String::new(),
            message: format!("{}: {e}", p.display()),
        }])
    })?;
    parse_config_str(&src)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!(c.train.weights.lambda1, 1.0);
        assert_eq!(c.train.weights.lambda2, 0.01);
        assert_eq!(c.train.weights.lambda3, 1.0);
        assert_eq!(c.data.sigma, 5.0);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.cells().unwrap().len(), 1);
    }

    #[test]
    fn alpha_out_of_range_names_field() {
        let e = parse_config_str("[topology]\nnames = [\"hf-6\"]\nalpha = [1.5]\n").unwrap_err();
        assert_eq!(e.0.len(), 1);
        assert_eq!(e.0[0].kind, IssueKind::Constraint);
        assert_eq!(e.0[0].path, "topology.alpha");
        assert_eq!(e.0[0].line, Some(3));
    }

    #[test]
    fn all_unknown_keys_reported() {
        let src = "name = \"x\"\nbogus = 1\n[train]\nepochs = 2\nlearning_rate = 0.1\n[train.weights]\nlambda9 = 1\n";
        let e = parse_config_str(src).unwrap_err();
        let unknown: Vec<_> = e.0.iter().filter(|i| i.kind == IssueKind::UnknownKey).map(|i| (i.path.as_str(), i.line)).collect();
        assert_eq!(unknown, [("bogus", Some(2)), ("train.learning_rate", Some(5)), ("train.weights.lambda9", Some(7))]);
    }

    #[test]
    fn type_mismatches_each_reported() {
        let src = "[train]\nepochs = \"many\"\nbatch_size = -3\n[data]\nsigma = true\n";
        let e = parse_config_str(src).unwrap_err();
        let lines: Vec<_> = e.0.iter().map(|i| (i.kind, i.line)).collect();
        assert_eq!(lines, [(IssueKind::Type, Some(2)), (IssueKind::Type, Some(3)), (IssueKind::Type, Some(5))]);
    }

    #[test]
    fn syntax_error_has_line() {
        let e = parse_config_str("[train]\nepochs = = 3\n").unwrap_err();
        assert_eq!(e.0[0].kind, IssueKind::Syntax);
        assert_eq!(e.0[0].line, Some(2));
    }

    #[test]
    fn grid_is_product() {
        let src = "[topology]\nnames = [\"unet\", \"hf-6\"]\nalpha = [0.1, 0.2, 0.3]\nattention = [\"none\", \"dual\"]\nseeds = [0, 1]\n";
        let c = parse_config_str(src).unwrap();
        let cells = c.cells().unwrap();
        assert_eq!(cells.len(), 24);
        assert_eq!(cells[0].id(), "unet-a0.1-none-s0");
        assert_eq!(cells[23].id(), "hf-6-a0.3-dual-s1");
    }

    #[test]
    fn round_trip() {
        let src = "name = \"rt\"\n[data]\ntruncation = 4.0\n[topology]\nnames = [\"hf-2\"]\nseeds = [3]\n[train]\nepochs = 3\n[train.weights]\nlambda2 = 0.5\n[eval]\nlocalization = \"oracle\"\n";
        let c = parse_config_str(src).unwrap();
        let back = parse_config_str(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        let d = ExperimentConfig::default();
        assert_eq!(parse_config_str(&d.to_toml()).unwrap(), d);
    }
}
