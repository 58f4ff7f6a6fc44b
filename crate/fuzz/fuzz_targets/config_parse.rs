#![no_main]

use esd_cli::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = ExperimentConfig::parse(text) {
            assert_eq!(ExperimentConfig::parse(&cfg.echo()).unwrap(), cfg);
        }
    }
});
