//! Flat `key=value` configuration files, CLI overrides, and the resolved
//! run manifest every command writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rhythmlab_core::agcacl::{LossConfig, PriorSpec};
use rhythmlab_core::dsp::{AugmentationSpec, FilterSpec, WaveletSpec};
use rhythmlab_core::ingest::NUM_CLASSES;
use rhythmlab_core::model::{FocalConfig, ModelConfig};
use rhythmlab_core::synth::SynthSpec;
use rhythmlab_core::train::TrainConfig;

use crate::{CliError, Result};

/// Every tunable of the pipeline, with the reference defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Width divisor; 1 = full-size model.
    pub toy_scale: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub use_contrastive: bool,
    pub similarity_on_augmented: bool,
    pub gamma: f64,
    pub tau: f64,
    pub tau_repel: f64,
    pub tau_align: f64,
    pub tau_weight: f64,
    pub epsilon: f64,
    pub momentum: f64,
    /// Symmetric repulsion prior pairs: `a:b:value;...` with 1-based ids.
    pub prior_pairs: String,
    /// Alignment prior entries: `class:value;...` with 1-based ids.
    pub prior_align: String,
    pub notch_freq: f64,
    pub notch_q: f64,
    pub cheby_order: usize,
    pub cheby_cutoff: f64,
    pub cheby_ripple_db: f64,
    pub wavelet_levels: usize,
    pub aug_shift_s: f64,
    pub aug_flip_prob: f64,
    pub aug_warp_lo: f64,
    pub aug_warp_hi: f64,
    pub aug_drift_amp_lo: f64,
    pub aug_drift_amp_hi: f64,
    pub aug_drift_freq_lo: f64,
    pub aug_drift_freq_hi: f64,
    pub aug_scale_lo: f64,
    pub aug_scale_hi: f64,
    /// Upsampling target per class (0 = leave unchanged).
    pub target: usize,
    /// `long_tail` or `balanced`.
    pub synth_profile: String,
    pub synth_noise: f64,
    /// Windows per class for the balanced profile.
    pub synth_windows: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            toy_scale: 1,
            epochs: 30,
            batch_size: 48,
            lr: 1e-4,
            weight_decay: 1e-4,
            use_contrastive: true,
            similarity_on_augmented: true,
            gamma: 1.0,
            tau: 0.1,
            tau_repel: 0.01,
            tau_align: 0.1,
            tau_weight: 0.1,
            epsilon: 1e-6,
            momentum: 0.9,
            prior_pairs: "6:3:1".into(),
            prior_align: String::new(),
            notch_freq: 60.0,
            notch_q: 30.0,
            cheby_order: 4,
            cheby_cutoff: 45.0,
            cheby_ripple_db: 0.5,
            wavelet_levels: 5,
            aug_shift_s: 0.2,
            aug_flip_prob: 0.5,
            aug_warp_lo: 0.9,
            aug_warp_hi: 1.1,
            aug_drift_amp_lo: 0.0,
            aug_drift_amp_hi: 0.1,
            aug_drift_freq_lo: 0.0,
            aug_drift_freq_hi: 0.3,
            aug_scale_lo: 0.8,
            aug_scale_hi: 1.2,
            target: 5000,
            synth_profile: "long_tail".into(),
            synth_noise: 0.05,
            synth_windows: 4,
            split_train: 0.7,
            split_val: 0.1,
            split_test: 0.2,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $f:ident) => {
        $f!(seed, u64);
        $f!(toy_scale, usize);
        $f!(epochs, usize);
        $f!(batch_size, usize);
        $f!(lr, f64);
        $f!(weight_decay, f64);
        $f!(use_contrastive, bool);
        $f!(similarity_on_augmented, bool);
        $f!(gamma, f64);
        $f!(tau, f64);
        $f!(tau_repel, f64);
        $f!(tau_align, f64);
        $f!(tau_weight, f64);
        $f!(epsilon, f64);
        $f!(momentum, f64);
        $f!(prior_pairs, String);
        $f!(prior_align, String);
        $f!(notch_freq, f64);
        $f!(notch_q, f64);
        $f!(cheby_order, usize);
        $f!(cheby_cutoff, f64);
        $f!(cheby_ripple_db, f64);
        $f!(wavelet_levels, usize);
        $f!(aug_shift_s, f64);
        $f!(aug_flip_prob, f64);
        $f!(aug_warp_lo, f64);
        $f!(aug_warp_hi, f64);
        $f!(aug_drift_amp_lo, f64);
        $f!(aug_drift_amp_hi, f64);
        $f!(aug_drift_freq_lo, f64);
        $f!(aug_drift_freq_hi, f64);
        $f!(aug_scale_lo, f64);
        $f!(aug_scale_hi, f64);
        $f!(target, usize);
        $f!(synth_profile, String);
        $f!(synth_noise, f64);
        $f!(synth_windows, usize);
        $f!(split_train, f64);
        $f!(split_val, f64);
        $f!(split_test, f64);
    };
}

impl Config {
    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let usage = |detail: String| CliError::Usage(detail);
        macro_rules! apply {
            ($field:ident, String) => {
                if key == stringify!($field) {
                    self.$field = value.to_string();
                    return Ok(());
                }
            };
            ($field:ident, $ty:ty) => {
                if key == stringify!($field) {
                    self.$field = value
                        .parse::<$ty>()
                        .map_err(|e| usage(format!("bad value for {key}: {e}")))?;
                    return Ok(());
                }
            };
        }
        config_keys!(self, apply);
        Err(usage(format!("unknown configuration key {key:?}")))
    }

    /// Parse a config file: `key=value` lines, `#` comments, blank lines.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Format {
                what: "config file",
                path: path.to_path_buf(),
                detail: format!("line {}: expected key=value, got {line:?}", ln + 1),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// All keys and their current values, sorted.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        macro_rules! collect {
            ($field:ident, String) => {
                map.insert(stringify!($field).to_string(), self.$field.clone());
            };
            ($field:ident, bool) => {
                map.insert(stringify!($field).to_string(), self.$field.to_string());
            };
            ($field:ident, f64) => {
                map.insert(stringify!($field).to_string(), format!("{:?}", self.$field));
            };
            ($field:ident, $ty:ty) => {
                map.insert(stringify!($field).to_string(), self.$field.to_string());
            };
        }
        config_keys!(self, collect);
        map
    }

    /// Deterministic resolved-configuration manifest text.
    pub fn manifest(&self, command: &str) -> String {
        let mut out = format!("# resolved configuration\ncommand={command}\n");
        for (k, v) in self.entries() {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    // ----- derived component configs ---------------------------------------

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = if self.toy_scale <= 1 { ModelConfig::full() } else { ModelConfig::toy(self.toy_scale)? };
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            use_contrastive: self.use_contrastive,
            similarity_on_augmented: self.similarity_on_augmented,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            tau_repel: self.tau_repel,
            tau_align: self.tau_align,
            tau_weight: self.tau_weight,
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }

    pub fn focal_config(&self) -> FocalConfig {
        FocalConfig { gamma: self.gamma }
    }

    pub fn filter_spec(&self) -> FilterSpec {
        FilterSpec {
            notch_freq: self.notch_freq,
            notch_q: self.notch_q,
            cheby_order: self.cheby_order,
            cheby_cutoff: self.cheby_cutoff,
            cheby_ripple_db: self.cheby_ripple_db,
            ..FilterSpec::default()
        }
    }

    pub fn wavelet_spec(&self) -> WaveletSpec {
        WaveletSpec { levels: self.wavelet_levels }
    }

    pub fn augmentation_spec(&self) -> AugmentationSpec {
        AugmentationSpec {
            shift_max_s: self.aug_shift_s,
            flip_prob: self.aug_flip_prob,
            warp: (self.aug_warp_lo, self.aug_warp_hi),
            drift_amp: (self.aug_drift_amp_lo, self.aug_drift_amp_hi),
            drift_freq: (self.aug_drift_freq_lo, self.aug_drift_freq_hi),
            scale: (self.aug_scale_lo, self.aug_scale_hi),
        }
    }

    pub fn prior_spec(&self) -> Result<PriorSpec> {
        let mut prior = PriorSpec::zeros(NUM_CLASSES);
        for item in self.prior_pairs.split(';').filter(|s| !s.trim().is_empty()) {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(CliError::Usage(format!("prior pair {item:?}: expected a:b:value")));
            }
            let a: usize = parts[0].parse().map_err(|e| CliError::Usage(format!("prior pair {item:?}: {e}")))?;
            let b: usize = parts[1].parse().map_err(|e| CliError::Usage(format!("prior pair {item:?}: {e}")))?;
            let v: f64 = parts[2].parse().map_err(|e| CliError::Usage(format!("prior pair {item:?}: {e}")))?;
            if a == 0 || a > NUM_CLASSES || b == 0 || b > NUM_CLASSES || a == b {
                return Err(CliError::Usage(format!("prior pair {item:?}: ids must be distinct, in 1..{NUM_CLASSES}")));
            }
            prior = prior.with_pair(a - 1, b - 1, v);
        }
        for item in self.prior_align.split(';').filter(|s| !s.trim().is_empty()) {
            let parts: Vec<&str> = item.trim().split(':').collect();
            if parts.len() != 2 {
                return Err(CliError::Usage(format!("alignment prior {item:?}: expected class:value")));
            }
            let c: usize = parts[0].parse().map_err(|e| CliError::Usage(format!("alignment prior {item:?}: {e}")))?;
            let v: f64 = parts[1].parse().map_err(|e| CliError::Usage(format!("alignment prior {item:?}: {e}")))?;
            if c == 0 || c > NUM_CLASSES {
                return Err(CliError::Usage(format!("alignment prior {item:?}: class out of range")));
            }
            prior.align[c - 1] = v;
        }
        prior.validate()?;
        Ok(prior)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        match self.synth_profile.as_str() {
            "long_tail" => Ok(SynthSpec::long_tail(self.synth_noise)),
            "balanced" => Ok(SynthSpec::balanced(self.synth_windows, self.synth_noise)),
            other => Err(CliError::Usage(format!("unknown synth profile {other:?} (long_tail|balanced)"))),
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split_train, self.split_val, self.split_test)
    }
}

/// Write the resolved manifest next to a command's outputs.
pub fn write_manifest(out_dir: &Path, command: &str, config: &Config) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;
    let path = out_dir.join("run_manifest.txt");
    fs::write(&path, config.manifest(command)).map_err(CliError::io(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let c = Config::default();
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.batch_size, 48);
        assert_eq!(c.epochs, 30);
        assert_eq!(c.gamma, 1.0);
        assert_eq!((c.tau, c.tau_repel, c.tau_align, c.tau_weight), (0.1, 0.01, 0.1, 0.1));
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.target, 5000);
    }

    #[test]
    fn set_and_reject_keys() {
        let mut c = Config::default();
        c.set("epochs", "3").unwrap();
        assert_eq!(c.epochs, 3);
        c.set("lr", "0.003").unwrap();
        assert_eq!(c.lr, 0.003);
        c.set("use_contrastive", "false").unwrap();
        assert!(!c.use_contrastive);
        assert!(c.set("no_such_key", "1").is_err());
        assert!(c.set("epochs", "abc").is_err());
    }

    #[test]
    fn file_round_trip_through_manifest() {
        let mut c = Config::default();
        c.set("seed", "99").unwrap();
        c.set("synth_profile", "balanced").unwrap();
        let manifest = c.manifest("synth");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        // a manifest (minus the command line) is itself a valid config file
        let body: String = manifest.lines().filter(|l| !l.starts_with('#') && !l.starts_with("command=")).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, body).unwrap();
        let mut loaded = Config::default();
        loaded.load_file(&path).unwrap();
        assert_eq!(loaded, c);
    }

    #[test]
    fn prior_pairs_parse_symmetrically() {
        let mut c = Config::default();
        c.set("prior_pairs", "6:3:1").unwrap();
        let p = c.prior_spec().unwrap();
        assert_eq!(p.repel.at2(5, 2), 1.0);
        assert_eq!(p.repel.at2(2, 5), 1.0);
        assert_eq!(p.repel.at2(0, 1), 0.0);
        c.set("prior_pairs", "7:1:1").unwrap();
        assert!(c.prior_spec().is_err());
        c.set("prior_pairs", "").unwrap();
        c.set("prior_align", "2:0.5").unwrap();
        let p = c.prior_spec().unwrap();
        assert_eq!(p.align, vec![0.0, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }
}
