#![no_main]

use libfuzzer_sys::fuzz_target;

use homog::runner::{ExperimentConfig, ExperimentKind};

// Config files are the runner's untrusted input surface: parsing and
// validation must never panic, whatever the bytes.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        for kind in [
            ExperimentKind::Cell,
            ExperimentKind::NormSweep,
            ExperimentKind::Counterexample,
        ] {
            let _ = cfg.validate(kind);
            let _ = cfg.hash();
        }
    }
});
