#![no_main]

use libfuzzer_sys::fuzz_target;
use vw_core::pgm::{mask_from_pgm, mask_to_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = mask_from_pgm(data) {
        assert_eq!(mask.bits().len(), mask.width() * mask.height());
        // a written mask reads back identically
        let again = mask_from_pgm(&mask_to_pgm(&mask)).expect("own output must parse");
        assert_eq!(again, mask);
    }
});
