#![no_main]

use libfuzzer_sys::fuzz_target;
use sec_core::harness::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml(text) {
        // Anything accepted must survive its own round trip.
        let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again.hash().unwrap(), cfg.hash().unwrap());
    }
});
