#![no_main]

use libfuzzer_sys::fuzz_target;
use vw_core::depth::{analyze_depth, DepthBinConfig};
use vw_core::pgm::depth_from_pgm;
use vw_core::GridSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = depth_from_pgm(data) {
        assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        let _ = analyze_depth(&map, &GridSpec::default(), &DepthBinConfig::default());
    }
});
