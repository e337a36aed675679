use crate::error::{Error, Result};

/// Which blocks of the two-stage architecture are active. Everything on
/// by default; the switches reproduce the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub lstm: bool,
    pub temporal_attention: bool,
    pub spatial_attention: bool,
    pub spatial_interaction: bool,
    pub temporal_interaction: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            lstm: true,
            temporal_attention: true,
            spatial_attention: true,
            spatial_interaction: true,
            temporal_interaction: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub lstm_layers: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    /// Number of predicted modes `K`.
    pub modes: usize,
    pub future_steps: usize,
    pub dropout: f64,
    /// Feed-forward width multiplier in interaction layers.
    pub ffn_mult: usize,
    /// Agents farther apart than this at t = 0 are not neighbors.
    pub neighbor_radius: f64,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 128,
            heads: 8,
            lstm_layers: 2,
            spatial_layers: 3,
            temporal_layers: 4,
            modes: 6,
            future_steps: 30,
            dropout: 0.1,
            ffn_mult: 2,
            neighbor_radius: f64::INFINITY,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("lstm_layers", self.lstm_layers),
            ("modes", self.modes),
            ("future_steps", self.future_steps),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.neighbor_radius.is_nan() || self.neighbor_radius <= 0.0 {
            return Err(Error::Config("neighbor_radius must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Keys accepted by [`ModelConfig::set`], in serialization order.
    pub const KEYS: [&'static str; 15] = [
        "hidden",
        "heads",
        "lstm_layers",
        "spatial_layers",
        "temporal_layers",
        "modes",
        "future_steps",
        "dropout",
        "ffn_mult",
        "neighbor_radius",
        "use_lstm",
        "use_temporal_attention",
        "use_spatial_attention",
        "use_spatial_interaction",
        "use_temporal_interaction",
    ];

    /// Sets one field from its textual form. Returns `Ok(false)` for keys
    /// that are not model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value for {key}: {value:?}")))
        }
        let ab = &mut self.ablation;
        match key {
            "hidden" => self.hidden = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "lstm_layers" => self.lstm_layers = num(key, value)?,
            "spatial_layers" => self.spatial_layers = num(key, value)?,
            "temporal_layers" => self.temporal_layers = num(key, value)?,
            "modes" => self.modes = num(key, value)?,
            "future_steps" => self.future_steps = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "neighbor_radius" => self.neighbor_radius = num(key, value)?,
            "use_lstm" => ab.lstm = num(key, value)?,
            "use_temporal_attention" => ab.temporal_attention = num(key, value)?,
            "use_spatial_attention" => ab.spatial_attention = num(key, value)?,
            "use_spatial_interaction" => ab.spatial_interaction = num(key, value)?,
            "use_temporal_interaction" => ab.temporal_interaction = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn get(&self, key: &str) -> String {
        let ab = &self.ablation;
        match key {
            "hidden" => self.hidden.to_string(),
            "heads" => self.heads.to_string(),
            "lstm_layers" => self.lstm_layers.to_string(),
            "spatial_layers" => self.spatial_layers.to_string(),
            "temporal_layers" => self.temporal_layers.to_string(),
            "modes" => self.modes.to_string(),
            "future_steps" => self.future_steps.to_string(),
            "dropout" => self.dropout.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "neighbor_radius" => self.neighbor_radius.to_string(),
            "use_lstm" => ab.lstm.to_string(),
            "use_temporal_attention" => ab.temporal_attention.to_string(),
            "use_spatial_attention" => ab.spatial_attention.to_string(),
            "use_spatial_interaction" => ab.spatial_interaction.to_string(),
            "use_temporal_interaction" => ab.temporal_interaction.to_string(),
            _ => unreachable!("unknown model key {key}"),
        }
    }

    /// `key = value` lines for every field.
    pub fn to_kv(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Inverse of [`ModelConfig::to_kv`]. Every key must be present.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let mut seen = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got {line:?}")))?;
            let k = k.trim();
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown model key {k:?}")));
            }
            seen.push(k.to_string());
        }
        let missing: Vec<String> = Self::KEYS
            .iter()
            .filter(|k| !seen.iter().any(|s| s == *k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig {
            hidden: 16,
            neighbor_radius: 12.5,
            ..Default::default()
        };
        cfg.ablation.lstm = false;
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert_eq!(
            ModelConfig::from_kv(&ModelConfig::default().to_kv()).unwrap(),
            ModelConfig::default()
        );
    }

    #[test]
    fn missing_keys_are_listed() {
        match ModelConfig::from_kv("hidden = 8\nheads = 2\n") {
            Err(Error::MissingKeys(k)) => assert!(k.contains(&"modes".to_string())),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            hidden: 10,
            heads: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
