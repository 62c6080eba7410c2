//! Scenario files: TOML key/value documents describing a synthetic stream.
//!
//! ```toml
//! frames = 60
//! height = 16
//! width = 16
//! c_key = 32
//! noise_sigma = 0.5
//! seed = 0
//!
//! [[object]]
//! id = 1
//! size = [6, 6]
//! start = [1.0, 1.0]
//! velocity = [0.3, 0.21]
//! occlusions = [[15, 35]]
//! ```
//!
//! Omitted stream keys take the values of [`SyntheticScenario`]'s defaults
//! below; omitted object keys default to a static, single-pose object that
//! enters at frame 0.

use std::fmt;
use std::path::Path;

use featbank::simstream::{ObjectSpec, ScenarioError, SyntheticScenario};
use serde::Deserialize;

/// Scenarios shipped with the binary, addressable by name.
pub const BUNDLED: [(&str, &str); 5] = [
    ("static", include_str!("../scenarios/static.cfg")),
    ("drift", include_str!("../scenarios/drift.cfg")),
    ("deform", include_str!("../scenarios/deform.cfg")),
    ("occlude", include_str!("../scenarios/occlude.cfg")),
    ("late-object", include_str!("../scenarios/late-object.cfg")),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub source_name: String,
    /// 1-based line of the offending key, when it can be located.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.source_name, line, self.message),
            None => write!(f, "{}: {}", self.source_name, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamFile {
    frames: u64,
    height: usize,
    width: usize,
    c_key: usize,
    #[serde(default)]
    noise_sigma: f64,
    #[serde(default)]
    burst_prob: f64,
    #[serde(default)]
    burst_sigma: f64,
    #[serde(default = "one")]
    prototype_scale: f64,
    #[serde(default)]
    seed: u64,
    #[serde(default, rename = "object")]
    objects: Vec<ObjectFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectFile {
    id: u8,
    size: [usize; 2],
    start: [f64; 2],
    #[serde(default)]
    velocity: [f64; 2],
    #[serde(default)]
    entry_frame: u64,
    #[serde(default)]
    drift_rate: f64,
    #[serde(default = "one_pose")]
    poses: usize,
    #[serde(default)]
    pose_spread: f64,
    #[serde(default)]
    pose_switch: f64,
    #[serde(default)]
    occlusions: Vec<[u64; 2]>,
}

fn one() -> f64 {
    1.0
}

fn one_pose() -> usize {
    1
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// First line assigning `key`, optionally searching only after `after_line`.
fn line_of_key(text: &str, key: &str, after_line: usize) -> Option<usize> {
    text.lines().enumerate().skip(after_line).find_map(|(i, line)| {
        let line = line.trim_start();
        let rest = line.strip_prefix(key)?;
        rest.trim_start().starts_with('=').then_some(i + 1)
    })
}

/// Line of the `[[object]]` table declaring `id`.
fn line_of_object(text: &str, id: u8) -> Option<usize> {
    let mut table = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line == "[[object]]" {
            table = Some(i);
        } else if let Some(rest) = line.strip_prefix("id") {
            let value = rest.trim_start().strip_prefix('=').map(|v| v.trim());
            if let (Some(t), Some(v)) = (table, value) {
                if v.split('#').next().map(str::trim) == Some(&id.to_string()) {
                    return Some(t + 1);
                }
            }
        }
    }
    None
}

fn locate(text: &str, err: &ScenarioError) -> Option<usize> {
    match err {
        ScenarioError::ZeroGrid => ["height", "width", "c_key"]
            .iter()
            .find_map(|k| line_of_key(text, k, 0).filter(|&l| value_on_line(text, l) == Some("0"))),
        ScenarioError::NoFrames => line_of_key(text, "frames", 0),
        ScenarioError::ReservedObjectId => line_of_object(text, 0),
        ScenarioError::DuplicateObject(id) => {
            let first = line_of_object(text, id.0)?;
            text.lines()
                .enumerate()
                .skip(first)
                .filter(|(_, l)| l.trim() == "[[object]]")
                .map(|(i, _)| i + 1)
                .find(|&l| line_of_object(&tail(text, l), id.0) == Some(1))
        }
        ScenarioError::EntryAfterEnd { object, .. } => {
            let table = line_of_object(text, object.0)?;
            line_of_key(text, "entry_frame", table).or(Some(table))
        }
        ScenarioError::ObjectTooLarge { object, .. } => {
            let table = line_of_object(text, object.0)?;
            line_of_key(text, "size", table).or(Some(table))
        }
        ScenarioError::NoPoses(object) => {
            let table = line_of_object(text, object.0)?;
            line_of_key(text, "poses", table).or(Some(table))
        }
        ScenarioError::NegativeParameter { field } => line_of_key(text, field, 0),
        ScenarioError::Overlap { b, .. } => line_of_object(text, b.0),
        ScenarioError::Grid(_) => None,
    }
}

fn value_on_line(text: &str, line: usize) -> Option<&str> {
    let raw = text.lines().nth(line - 1)?;
    let value = raw.split_once('=')?.1;
    Some(value.split('#').next()?.trim())
}

/// Text starting at 1-based `line`.
fn tail(text: &str, line: usize) -> String {
    text.lines().skip(line - 1).collect::<Vec<_>>().join("\n")
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str, source_name: &str) -> Result<SyntheticScenario, ConfigError> {
    let file: StreamFile = toml::from_str(text).map_err(|e| ConfigError {
        source_name: source_name.to_string(),
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })?;
    let scenario = SyntheticScenario {
        num_frames: file.frames,
        height: file.height,
        width: file.width,
        c_key: file.c_key,
        noise_sigma: file.noise_sigma,
        burst_prob: file.burst_prob,
        burst_sigma: file.burst_sigma,
        prototype_scale: file.prototype_scale,
        rng_seed: file.seed,
        objects: file
            .objects
            .into_iter()
            .map(|o| {
                let mut spec = ObjectSpec::new(o.id, (o.size[0], o.size[1]), (o.start[0], o.start[1]));
                spec.velocity = (o.velocity[0], o.velocity[1]);
                spec.entry_frame = o.entry_frame;
                spec.drift_rate = o.drift_rate;
                spec.poses = o.poses;
                spec.pose_spread = o.pose_spread;
                spec.pose_switch = o.pose_switch;
                spec.occlusions = o.occlusions.iter().map(|w| (w[0], w[1])).collect();
                spec
            })
            .collect(),
    };
    let checked = scenario.validate().and_then(|_| {
        // Overlaps only show up frame by frame.
        (0..scenario.num_frames).try_for_each(|t| scenario.labels(t).map(drop))
    });
    checked.map_err(|e| ConfigError {
        source_name: source_name.to_string(),
        line: locate(text, &e),
        message: e.to_string(),
    })?;
    Ok(scenario)
}

/// Loads a scenario from a path, or from the bundled set when `name` is not
/// an existing file but matches a bundled scenario name.
pub fn load_scenario(name: &str) -> Result<SyntheticScenario, ConfigError> {
    let path = Path::new(name);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            source_name: name.to_string(),
            line: None,
            message: e.to_string(),
        })?;
        return parse_scenario(&text, name);
    }
    let stem = name.strip_suffix(".cfg").unwrap_or(name);
    match BUNDLED.iter().find(|(n, _)| *n == stem) {
        Some((n, text)) => parse_scenario(text, &format!("{n}.cfg")),
        None => Err(ConfigError {
            source_name: name.to_string(),
            line: None,
            message: format!(
                "no such file, and not a bundled scenario ({})",
                BUNDLED.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        }),
    }
}

/// A bundled scenario by name.
pub fn bundled(name: &str) -> Option<SyntheticScenario> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_scenario(text, n).expect("bundled scenarios are valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "frames = 4\nheight = 4\nwidth = 4\nc_key = 2\n\n[[object]]\nid = 1\nsize = [2, 2]\nstart = [0.0, 0.0]\n";

    #[test]
    fn all_bundled_scenarios_parse() {
        for (name, _) in BUNDLED {
            let s = bundled(name).unwrap();
            assert!(!s.objects.is_empty(), "{name}");
        }
    }

    #[test]
    fn defaults_fill_omitted_keys() {
        let s = parse_scenario(MINIMAL, "min.cfg").unwrap();
        assert_eq!(s.prototype_scale, 1.0);
        assert_eq!(s.noise_sigma, 0.0);
        assert_eq!(s.objects[0].poses, 1);
        assert_eq!(s.objects[0].velocity, (0.0, 0.0));
    }

    #[test]
    fn syntax_error_reports_line() {
        let text = MINIMAL.replace("c_key = 2", "c_key = two");
        let err = parse_scenario(&text, "bad.cfg").unwrap_err();
        assert_eq!(err.line, Some(4));
        assert!(err.to_string().starts_with("bad.cfg:4:"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = MINIMAL.replace("start = [0.0, 0.0]", "start = [0.0, 0.0]\ncolour = 3");
        let err = parse_scenario(&text, "bad.cfg").unwrap_err();
        assert_eq!(err.line, Some(10));
        assert!(err.message.contains("colour"));
    }

    #[test]
    fn semantic_errors_report_line() {
        let text = MINIMAL.replace("c_key = 2", "c_key = 2\nnoise_sigma = -1.0");
        assert_eq!(parse_scenario(&text, "x").unwrap_err().line, Some(5));

        let text = MINIMAL.replace("size = [2, 2]", "size = [5, 2]");
        assert_eq!(parse_scenario(&text, "x").unwrap_err().line, Some(8));

        let text = MINIMAL.replace("id = 1", "id = 1\nentry_frame = 9");
        assert_eq!(parse_scenario(&text, "x").unwrap_err().line, Some(8));

        let text = format!("{MINIMAL}\n[[object]]\nid = 1\nsize = [1, 1]\nstart = [3.0, 3.0]\n");
        assert_eq!(parse_scenario(&text, "x").unwrap_err().line, Some(11));

        let text = format!("{MINIMAL}\n[[object]]\nid = 2\nsize = [1, 1]\nstart = [1.0, 1.0]\n");
        let err = parse_scenario(&text, "x").unwrap_err();
        assert!(err.message.contains("overlap"));
        assert_eq!(err.line, Some(11));
    }

    #[test]
    fn unknown_bundled_name_lists_choices() {
        let err = load_scenario("no-such-scenario").unwrap_err();
        assert!(err.message.contains("drift"));
    }
}
