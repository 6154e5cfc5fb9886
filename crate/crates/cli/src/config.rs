//! `key = value` configuration with `OTP_` environment overrides.
//!
//! Precedence, lowest first: built-in defaults, the config file, `OTP_*`
//! variables, command-line flags.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use otp_core::qsim::NoiseModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Role {
    /// Both parties in this process over an in-memory link.
    #[default]
    Local,
    Alice,
    Bob,
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Role::Local),
            "alice" => Ok(Role::Alice),
            "bob" => Ok(Role::Bob),
            other => Err(format!("unknown role '{other}' (local, alice, bob)")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Local => "local",
            Role::Alice => "alice",
            Role::Bob => "bob",
        })
    }
}

/// Keys accepted in the file, and as `OTP_<KEY>` in the environment.
pub const KEYS: &[&str] = &[
    "role", "listen", "connect", "table", "seed", "noise", "window_ns", "sig_n", "sig_m", "tau",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub role: Role,
    /// Alice's listen address in daemon mode.
    pub listen: String,
    /// Bob's connect address in daemon mode.
    pub connect: String,
    /// Directory holding `alice.otpt` and `bob.otpt`. Without it, local runs
    /// generate fresh tables in memory.
    pub table: Option<PathBuf>,
    pub seed: u64,
    /// `ideal`, `v0.936` or `v0.955`.
    pub noise: String,
    pub window_ns: f64,
    pub sig_n: u32,
    pub sig_m: u32,
    pub tau: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            role: Role::Local,
            listen: "127.0.0.1:7878".into(),
            connect: "127.0.0.1:7878".into(),
            table: None,
            seed: 1,
            noise: "ideal".into(),
            window_ns: 6.0,
            sig_n: 1000,
            sig_m: 224,
            tau: 0.776,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for {key}"))
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "role" => self.role = value.parse()?,
            "listen" => self.listen = value.to_string(),
            "connect" => self.connect = value.to_string(),
            "table" => self.table = Some(PathBuf::from(value)),
            "seed" => self.seed = parse(key, value)?,
            "noise" => {
                NoiseModel::preset(value).map_err(|e| e.to_string())?;
                self.noise = value.to_string();
            }
            "window_ns" => {
                let w: f64 = parse(key, value)?;
                if !(w > 0.0) {
                    return Err("window_ns must be positive".into());
                }
                self.window_ns = w;
            }
            "sig_n" => self.sig_n = parse(key, value)?,
            "sig_m" => self.sig_m = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    /// Applies a config file's text. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Applies `OTP_<KEY>` variables for known keys; others are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), String> {
        for (name, value) in vars {
            let Some(key) = name.strip_prefix("OTP_") else {
                continue;
            };
            let key = key.to_ascii_lowercase();
            if KEYS.contains(&key.as_str()) {
                self.set(&key, &value).map_err(|e| format!("{name}: {e}"))?;
            }
        }
        Ok(())
    }

    pub fn noise_model(&self) -> NoiseModel {
        NoiseModel::preset(&self.noise).expect("checked when set")
    }

    pub fn window_ps(&self) -> i64 {
        (self.window_ns * 1000.0).round() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_env_layers() {
        let mut c = Config::default();
        c.apply_text("# comment\nseed = 9\nnoise = v0.955  # calibrated\n\nrole=alice\n")
            .unwrap();
        assert_eq!((c.seed, c.noise.as_str(), c.role), (9, "v0.955", Role::Alice));
        c.apply_env([
            ("OTP_SEED".to_string(), "12".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
            ("OTP_UNRELATED_THING".to_string(), "x".to_string()),
        ])
        .unwrap();
        assert_eq!(c.seed, 12);
    }

    #[test]
    fn bad_input_rejected() {
        let mut c = Config::default();
        assert!(c.apply_text("colour = red").unwrap_err().contains("unknown config key"));
        assert!(c.apply_text("seed").is_err());
        assert!(c.apply_text("seed = -1").is_err());
        assert!(c.apply_text("noise = loud").is_err());
        assert!(c.apply_text("window_ns = 0").is_err());
        assert!(c.apply_env([("OTP_TAU".to_string(), "high".to_string())]).is_err());
    }
}
