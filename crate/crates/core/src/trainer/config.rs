use crate::error::{Error, Result};
use crate::io::parse_key_values;

/// Every training hyperparameter, with defaults for a 64×64 desk-scale run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_s: f64,
    pub lambda_e: f64,
    /// Soft-skeleton depth.
    pub k: usize,
    pub epsilon: f64,
    /// EVP window side; clamped to the image size.
    pub window_l: usize,
    pub t1_steps: u64,
    pub t2_steps: u64,
    pub lr0: f64,
    pub n_critic: usize,
    pub lambda_gp: f64,
    pub batch: usize,
    pub seed: u64,
    pub m_max: usize,
    /// Square image side.
    pub image_size: usize,
    pub keep_identity_phase2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 30.0,
            lambda2: 15.0,
            lambda_s: 1.0,
            lambda_e: 35.0,
            k: 20,
            epsilon: 1e-3,
            window_l: 64,
            t1_steps: 200,
            t2_steps: 200,
            lr0: 1e-4,
            n_critic: 5,
            lambda_gp: 10.0,
            batch: 4,
            seed: 0,
            m_max: 128,
            image_size: 64,
            keep_identity_phase2: false,
        }
    }
}

pub const CONFIG_KEYS: [&str; 17] = [
    "lambda1",
    "lambda2",
    "lambda_s",
    "lambda_e",
    "k",
    "epsilon",
    "window_l",
    "t1_steps",
    "t2_steps",
    "lr0",
    "n_critic",
    "lambda_gp",
    "batch",
    "seed",
    "m_max",
    "image_size",
    "keep_identity_phase2",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for key `{key}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for key `{key}`"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` text over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in parse_key_values(text)? {
            match k.as_str() {
                "lambda1" => c.lambda1 = num(&k, &v)?,
                "lambda2" => c.lambda2 = num(&k, &v)?,
                "lambda_s" => c.lambda_s = num(&k, &v)?,
                "lambda_e" => c.lambda_e = num(&k, &v)?,
                "k" => c.k = num(&k, &v)?,
                "epsilon" => c.epsilon = num(&k, &v)?,
                "window_l" => c.window_l = num(&k, &v)?,
                "t1_steps" => c.t1_steps = num(&k, &v)?,
                "t2_steps" => c.t2_steps = num(&k, &v)?,
                "lr0" => c.lr0 = num(&k, &v)?,
                "n_critic" => c.n_critic = num(&k, &v)?,
                "lambda_gp" => c.lambda_gp = num(&k, &v)?,
                "batch" => c.batch = num(&k, &v)?,
                "seed" => c.seed = num(&k, &v)?,
                "m_max" => c.m_max = num(&k, &v)?,
                "image_size" => c.image_size = num(&k, &v)?,
                "keep_identity_phase2" => c.keep_identity_phase2 = boolean(&k, &v)?,
                _ => return Err(Error::Config(format!("unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_s", self.lambda_s),
            ("lambda_e", self.lambda_e),
            ("lambda_gp", self.lambda_gp),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        for (name, v) in [
            ("n_critic", self.n_critic),
            ("batch", self.batch),
            ("window_l", self.window_l),
            ("m_max", self.m_max),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.image_size < 16 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 4 and at least 16, got {}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let vals = [
            self.lambda1.to_string(),
            self.lambda2.to_string(),
            self.lambda_s.to_string(),
            self.lambda_e.to_string(),
            self.k.to_string(),
            self.epsilon.to_string(),
            self.window_l.to_string(),
            self.t1_steps.to_string(),
            self.t2_steps.to_string(),
            self.lr0.to_string(),
            self.n_critic.to_string(),
            self.lambda_gp.to_string(),
            self.batch.to_string(),
            self.seed.to_string(),
            self.m_max.to_string(),
            self.image_size.to_string(),
            self.keep_identity_phase2.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// EVP window side actually used on `h`×`w` images.
    pub fn effective_window(&self, h: usize, w: usize) -> usize {
        self.window_l.min(h).min(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let c = TrainConfig::default();
        assert_eq!((c.lambda1, c.lambda2, c.lambda_s, c.lambda_e), (30.0, 15.0, 1.0, 35.0));
        assert_eq!((c.k, c.epsilon, c.window_l, c.lr0), (20, 1e-3, 64, 1e-4));
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        let mut d = c.clone();
        d.seed = 99;
        d.keep_identity_phase2 = true;
        d.lr0 = 3.3e-4;
        assert_eq!(TrainConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        let e = TrainConfig::parse("lambda3 = 1").unwrap_err();
        assert!(e.to_string().contains("lambda3"));
        assert!(TrainConfig::parse("lr0 = 0").is_err());
        assert!(TrainConfig::parse("lambda_s = -1").is_err());
        assert!(TrainConfig::parse("n_critic = 0").is_err());
        assert!(TrainConfig::parse("image_size = 62").is_err());
        assert!(TrainConfig::parse("keep_identity_phase2 = maybe").is_err());
        assert_eq!(TrainConfig::parse("seed = 5\n").unwrap().seed, 5);
    }

    #[test]
    fn window_is_clamped() {
        let c = TrainConfig::default();
        assert_eq!(c.effective_window(32, 48), 32);
        assert_eq!(c.effective_window(128, 128), 64);
    }
}
