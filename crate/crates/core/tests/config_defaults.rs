use deid_core::config::GlobalConfig;

#[test]
fn documented_defaults_match_the_code() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config-defaults.toml");
    let doc = std::fs::read_to_string(path).unwrap();
    let body: String = doc.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let defaults = GlobalConfig::default();
    assert_eq!(body.trim(), defaults.canonical().trim(), "regenerate docs/config-defaults.toml");
    assert_eq!(GlobalConfig::from_toml_str(&doc).unwrap(), defaults);
}
