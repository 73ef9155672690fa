//! The committed configuration files stay in sync with the code.

use std::path::PathBuf;

use vinpaint::config::AppConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// `defaults.toml` lists every key with its default value. Set
/// `VINPAINT_BLESS=1` to rewrite it after changing a default.
#[test]
fn defaults_file_matches_the_default_config() {
    let path = configs_dir().join("defaults.toml");
    let want = AppConfig::default().snapshot();
    if std::env::var_os("VINPAINT_BLESS").is_some() {
        std::fs::write(&path, &want).unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, want, "configs/defaults.toml is stale");
    assert_eq!(AppConfig::resolve(&text, &[]).unwrap(), AppConfig::default());
}

#[test]
fn desk_profile_resolves_to_the_defaults() {
    let cfg = AppConfig::load(Some(&configs_dir().join("desk.toml")), &[]).unwrap();
    assert_eq!(cfg, AppConfig::default());
}

#[test]
fn large_profile_resolves() {
    let cfg = AppConfig::load(Some(&configs_dir().join("large.toml")), &[]).unwrap();
    assert_eq!((cfg.model.channels, cfg.model.ref_radius), (64, 2));
    assert_eq!((cfg.optim.crop_size, cfg.data.height, cfg.data.width), (256, 256, 256));
}
