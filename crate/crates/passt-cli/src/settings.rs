//! Run settings: built-in defaults, overridden by a flat key=value config
//! file, overridden again by command-line flags. The seed additionally
//! falls back to the PASST_SEED environment variable.

use passt::net::ModelConfig;
use passt::tokenizer::{PatchGeometry, PatchoutMode};
use passt::train::{ScheduleConfig, NORM_MEAN, NORM_STD};
use std::fmt::Write as _;
use std::path::Path;

/// Everything a subcommand might need, in one flat bag. Field names double
/// as the config-file keys.
#[derive(Clone, Debug)]
pub struct Settings {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub mlp_ratio: usize,
    pub dist_token: bool,
    pub n_mels: usize,
    pub frames: usize,
    pub stride_f: usize,
    pub stride_t: usize,
    pub patchout: PatchoutMode,
    pub seed: Option<u64>,
    pub norm_mean: f32,
    pub norm_std: f32,
    pub schedule: ScheduleConfig,
    pub lr_scale: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub clip_seconds: f64,
    pub epoch_size: Option<usize>,
    pub augment: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            embed_dim: 768,
            n_heads: 12,
            depth: 12,
            n_classes: 527,
            mlp_ratio: 4,
            dist_token: true,
            n_mels: 128,
            frames: 1001,
            stride_f: 10,
            stride_t: 10,
            patchout: PatchoutMode::None,
            seed: None,
            norm_mean: NORM_MEAN,
            norm_std: NORM_STD,
            schedule: ScheduleConfig::default(),
            lr_scale: 1.0,
            batch_size: 4,
            steps: 200,
            clip_seconds: 10.0,
            epoch_size: None,
            augment: true,
        }
    }
}

pub const CONFIG_KEYS: &str = "embed_dim n_heads depth n_classes mlp_ratio dist_token n_mels \
     frames stride_f stride_t patchout seed norm_mean norm_std lr_max lr_min warm_hold_epochs \
     decay_end_epoch finetune_epochs weight_decay lr_scale batch_size steps clip_seconds \
     epoch_size augment";

impl Settings {
    /// Defaults, then the config file's key=value lines if one was given.
    /// Errors are usage errors (malformed file, unknown key, bad value).
    pub fn load(config: Option<&Path>) -> Result<Self, String> {
        let mut s = Settings::default();
        let Some(path) = config else { return Ok(s) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
            s.apply(key.trim(), value.trim())
                .map_err(|e| format!("{}:{}: {e}", path.display(), lineno + 1))?;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value `{value}` for {key}"))
        }
        match key {
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "dist_token" => self.dist_token = parse(key, value)?,
            "n_mels" => self.n_mels = parse(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            "stride_f" => self.stride_f = parse(key, value)?,
            "stride_t" => self.stride_t = parse(key, value)?,
            "patchout" => self.patchout = parse_patchout(value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "norm_mean" => self.norm_mean = parse(key, value)?,
            "norm_std" => self.norm_std = parse(key, value)?,
            "lr_max" => self.schedule.lr_max = parse(key, value)?,
            "lr_min" => self.schedule.lr_min = parse(key, value)?,
            "warm_hold_epochs" => self.schedule.warm_hold_epochs = parse(key, value)?,
            "decay_end_epoch" => self.schedule.decay_end_epoch = parse(key, value)?,
            "finetune_epochs" => self.schedule.finetune_epochs = parse(key, value)?,
            "weight_decay" => self.schedule.weight_decay = parse(key, value)?,
            "lr_scale" => self.lr_scale = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "clip_seconds" => self.clip_seconds = parse(key, value)?,
            "epoch_size" => self.epoch_size = Some(parse(key, value)?),
            "augment" => self.augment = parse(key, value)?,
            _ => return Err(format!("unknown config key `{key}` (known: {CONFIG_KEYS})")),
        }
        Ok(())
    }

    /// Seed precedence: --seed flag, config file, PASST_SEED, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, String> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var("PASST_SEED") {
            Ok(v) => v
                .parse()
                .map_err(|_| format!("PASST_SEED is not an integer: `{v}`")),
            Err(_) => Ok(0),
        }
    }

    pub fn geometry(&self, frames: usize) -> passt::Result<PatchGeometry> {
        PatchGeometry::new(self.n_mels, frames, self.stride_f, self.stride_t)
    }

    /// Model shape with positional tables sized for `frames`-long clips.
    pub fn model_config(&self, frames: usize) -> passt::Result<ModelConfig> {
        ModelConfig::new(
            self.embed_dim,
            self.n_heads,
            self.depth,
            self.n_classes,
            self.mlp_ratio,
            self.geometry(frames)?,
            self.dist_token,
        )
    }

    /// Learning-rate plan with `lr_scale` applied.
    pub fn schedule(&self) -> ScheduleConfig {
        self.schedule.scaled(self.lr_scale)
    }

    /// The `# key=value ...` line each subcommand echoes so a run can be
    /// reproduced from its output.
    pub fn header(&self, command: &str, seed: u64, extra: &str) -> String {
        let mut line = format!(
            "# passt {command} seed={seed} embed_dim={} n_heads={} depth={} n_classes={} \
             mlp_ratio={} dist_token={} n_mels={} frames={} stride_f={} stride_t={} patchout={}",
            self.embed_dim,
            self.n_heads,
            self.depth,
            self.n_classes,
            self.mlp_ratio,
            self.dist_token,
            self.n_mels,
            self.frames,
            self.stride_f,
            self.stride_t,
            patchout_str(self.patchout),
        );
        if !extra.is_empty() {
            write!(line, " {extra}").expect("string write");
        }
        line
    }
}

/// `none`, `unstructured:K`, or `structured:F,T`.
pub fn parse_patchout(s: &str) -> Result<PatchoutMode, String> {
    let bad = || format!("bad patchout `{s}` (expected none, unstructured:K, or structured:F,T)");
    if s == "none" {
        return Ok(PatchoutMode::None);
    }
    let (kind, args) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "unstructured" => {
            let k = args.parse().map_err(|_| bad())?;
            Ok(PatchoutMode::Unstructured { k })
        }
        "structured" => {
            let (f, t) = args.split_once(',').ok_or_else(bad)?;
            let f_drop = f.parse().map_err(|_| bad())?;
            let t_drop = t.parse().map_err(|_| bad())?;
            Ok(PatchoutMode::Structured { f_drop, t_drop })
        }
        _ => Err(bad()),
    }
}

pub fn patchout_str(mode: PatchoutMode) -> String {
    match mode {
        PatchoutMode::None => "none".to_string(),
        PatchoutMode::Unstructured { k } => format!("unstructured:{k}"),
        PatchoutMode::Structured { f_drop, t_drop } => format!("structured:{f_drop},{t_drop}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchout_grammar_round_trips() {
        for text in ["none", "unstructured:400", "structured:4,40"] {
            assert_eq!(patchout_str(parse_patchout(text).unwrap()), text);
        }
        for text in ["", "structured", "structured:4", "unstructured:x", "u:3"] {
            assert!(parse_patchout(text).is_err(), "{text}");
        }
    }

    #[test]
    fn config_file_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# comment\n\nembed_dim=16\npatchout=structured:4,40\nlr_scale=100\nseed=9\n",
        )
        .unwrap();
        let s = Settings::load(Some(&path)).unwrap();
        assert_eq!(s.embed_dim, 16);
        assert_eq!(
            s.patchout,
            PatchoutMode::Structured {
                f_drop: 4,
                t_drop: 40
            }
        );
        assert_eq!(s.schedule().lr_max, 1e-5 * 100.0);
        assert_eq!(s.resolve_seed(None).unwrap(), 9);
        assert_eq!(s.resolve_seed(Some(3)).unwrap(), 3, "flag wins");
        // Untouched keys keep their defaults.
        assert_eq!(s.n_heads, 12);
    }

    #[test]
    fn bad_config_lines_are_reported_with_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        for (text, needle) in [
            ("embed_dim 16", "expected key=value"),
            ("embed_dim=lots", "bad value"),
            ("color=blue", "unknown config key"),
        ] {
            std::fs::write(&path, text).unwrap();
            let err = Settings::load(Some(&path)).unwrap_err();
            assert!(err.contains(needle), "{err}");
            assert!(err.contains(":1:"), "{err}");
        }
    }
}
