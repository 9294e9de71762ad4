#![no_main]

use libfuzzer_sys::fuzz_target;
use vw_core::sim::{read_metrics_csv, write_metrics_csv};
use vw_core::stats::summarize_experiment;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(rows) = read_metrics_csv(text) {
        if let Ok(out) = write_metrics_csv(&rows) {
            let _ = read_metrics_csv(&out);
        }
        let _ = summarize_experiment(&rows);
    }
});
