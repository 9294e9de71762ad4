#![no_main]

use libfuzzer_sys::fuzz_target;
use vw_core::belt::{decode_command, encode_command};

fuzz_target!(|data: &[u8]| {
    // anything accepted must be the canonical encoding of what it decodes to
    if let Ok(cmd) = decode_command(data) {
        assert_eq!(encode_command(&cmd), data);
    }
});
