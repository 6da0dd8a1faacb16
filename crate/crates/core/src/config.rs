//! Flat `key=value` configuration with named profiles.

use std::fs;
use std::path::Path;

use crate::error::{Result, SlmError};
use crate::masking::MaskingConfig;
use crate::shuffle::PositionMode;

macro_rules! config_struct {
    ($($field:ident: $ty:ty,)*) => {
        /// Every tunable of a run. The textual echo lists the fields in
        /// declaration order.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $(pub $field: $ty,)*
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its textual form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($field) => {
                        self.$field = value.trim().parse().map_err(|_| {
                            SlmError::Config(format!("invalid value {value:?} for {key}"))
                        })?;
                    })*
                    _ => return Err(SlmError::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// `key=value` lines, one per field.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{}={}\n", stringify!($field), self.$field));)*
                out
            }
        }
    };
}

config_struct! {
    vocab_size: usize,
    hidden: usize,
    enc_layers: usize,
    dec_layers: usize,
    heads: usize,
    ffn: usize,
    max_len: usize,
    max_sentences: usize,
    dropout: f64,
    attn_dropout: f64,
    layer_norm_eps: f64,
    init_std: f64,
    batch_size: usize,
    steps: usize,
    warmup: usize,
    peak_lr: f64,
    adam_eps: f64,
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    clip_norm: f64,
    seed: u64,
    shuffle_fraction: f64,
    sr_enabled: bool,
    sentence_reps_enabled: bool,
    position_mode: PositionMode,
    accum_steps: usize,
    checkpoint_every: usize,
    log_throughput: bool,
    p_geom: f64,
    max_span: usize,
    mask_rate: f64,
    replace_mask: f64,
    replace_random: f64,
    keep: f64,
    ft_steps: usize,
    ft_lr: f64,
    ft_batch_size: usize,
    max_answer_len: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config::tiny()
    }
}

impl Config {
    /// BERT-base sized pre-training setup.
    pub fn paper() -> Self {
        Config {
            vocab_size: 30522,
            hidden: 768,
            enc_layers: 12,
            dec_layers: 3,
            heads: 12,
            ffn: 3072,
            max_len: 512,
            max_sentences: 20,
            dropout: 0.1,
            attn_dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            batch_size: 256,
            steps: 1_000_000,
            warmup: 10_000,
            peak_lr: 1.5e-4,
            adam_eps: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            shuffle_fraction: 0.5,
            sr_enabled: true,
            sentence_reps_enabled: true,
            position_mode: PositionMode::Resequence,
            accum_steps: 1,
            checkpoint_every: 10_000,
            log_throughput: false,
            p_geom: 0.2,
            max_span: 3,
            mask_rate: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
            keep: 0.1,
            ft_steps: 1000,
            ft_lr: 5e-5,
            ft_batch_size: 32,
            max_answer_len: 30,
        }
    }

    /// Desk-scale setup used by tests and quick experiments.
    pub fn tiny() -> Self {
        Config {
            vocab_size: 2000,
            hidden: 64,
            enc_layers: 2,
            dec_layers: 1,
            heads: 4,
            ffn: 256,
            max_len: 128,
            max_sentences: 8,
            batch_size: 16,
            steps: 5000,
            warmup: 500,
            peak_lr: 1e-3,
            checkpoint_every: 1000,
            ft_steps: 200,
            ft_lr: 1e-3,
            ft_batch_size: 16,
            ..Config::paper()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Config::tiny()),
            "paper" => Ok(Config::paper()),
            other => Err(SlmError::Config(format!("unknown profile {other:?}"))),
        }
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.apply_assignment(line)
                .map_err(|e| SlmError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| SlmError::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn from_text(base: Config, text: &str) -> Result<Self> {
        let mut c = base;
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(base: Config, path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SlmError::io(path, e))?;
        Self::from_text(base, &text)
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            p_geom: self.p_geom,
            max_span: self.max_span,
            mask_rate: self.mask_rate,
            replace_mask: self.replace_mask,
            replace_random: self.replace_random,
            keep: self.keep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SlmError::Config(m));
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return fail(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.max_len < 4 {
            return fail(format!("max_len {} is too short", self.max_len));
        }
        if self.max_sentences == 0 {
            return fail("max_sentences must be at least 1".into());
        }
        if self.warmup > self.steps {
            return fail(format!("warmup {} exceeds steps {}", self.warmup, self.steps));
        }
        if !(0.0..=1.0).contains(&self.shuffle_fraction) {
            return fail(format!("shuffle_fraction {} outside [0, 1]", self.shuffle_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attn_dropout) {
            return fail("dropout rates must lie in [0, 1)".into());
        }
        if self.sr_enabled && !self.sentence_reps_enabled {
            return fail("sr_enabled requires sentence_reps_enabled".into());
        }
        if self.batch_size == 0 || self.accum_steps == 0 {
            return fail("batch_size and accum_steps must be positive".into());
        }
        self.masking().validate()
    }
}
