#![no_main]

use libfuzzer_sys::fuzz_target;
use vw_core::cockpit::{encode_line, parse_control};

fuzz_target!(|data: &[u8]| {
    let Ok(line) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(control) = parse_control(line) {
        let again = encode_line(&control).expect("controls serialize");
        assert_eq!(
            parse_control(&again).expect("own output must parse"),
            control
        );
    }
});
