use std::path::Path;

use dnsreg::config::FileConfig;
use dnsreg_core::registration::{Metric, RegistrationConfig};

#[test]
fn keys_mirror_field_names() {
    let text = r#"
[registration]
metric = "nmi"
scales = [0.5, 1.0]
learning_rates = [1e-3, 1e-3]
iterations = [10, 5]
lambdas = [0.1, 0.0]
sigma = 0.5
checkpoint = "net.masr"

[registration.nmi]
bins = 24
parzen_sigma = 0.8

[augmentation]
n = 4
delta = 0.25

[training]
samples = 256
max_steps = 40
"#;
    let cfg = FileConfig::parse(Path::new("c.toml"), text).unwrap();
    let r = &cfg.registration;
    assert_eq!(r.metric, Metric::Nmi);
    assert_eq!(r.iterations, vec![10, 5]);
    assert_eq!(r.nmi.bins, 24);
    assert_eq!(r.checkpoint.as_deref(), Some("net.masr"));
    assert_eq!(cfg.training.augmentation.n, 4);
    assert_eq!(cfg.training.augmentation.delta, 0.25);
    assert_eq!(cfg.training.samples, 256);
    assert_eq!(cfg.training.temperature, 0.07);
    assert!(r.validate().is_ok());
}

#[test]
fn defaults_and_round_trip() {
    let empty = FileConfig::parse(Path::new("e.toml"), "").unwrap();
    assert_eq!(empty.registration, RegistrationConfig::default());
    let text = empty.to_toml();
    assert_eq!(FileConfig::parse(Path::new("r.toml"), &text).unwrap(), empty);
}

#[test]
fn unknown_keys_are_rejected() {
    assert!(FileConfig::parse(Path::new("u.toml"), "[registration]\nlambda = 1.0\n").is_err());
    assert!(FileConfig::parse(Path::new("u.toml"), "[registraton]\n").is_err());
}
