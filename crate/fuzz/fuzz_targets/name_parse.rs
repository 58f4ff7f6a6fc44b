#![no_main]

use esd_core::baselines::BaselineKind;
use esd_core::denoiser::{ConditionId, ParamGroup};
use esd_core::erasure::EraseMode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(mode) = s.parse::<EraseMode>() {
        assert_eq!(mode.to_string().parse::<EraseMode>().unwrap(), mode);
    }
    if let Ok(c) = s.parse::<ConditionId>() {
        assert_eq!(c.to_string().parse::<ConditionId>().unwrap(), c);
    }
    if let Ok(g) = s.parse::<ParamGroup>() {
        assert_eq!(g.tag().parse::<ParamGroup>().unwrap(), g);
    }
    let _ = s.parse::<BaselineKind>();
});
