#![no_main]

use libfuzzer_sys::fuzz_target;
use vw_core::scene::CourseFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(course) = CourseFile::parse(text) {
        if let Ok(scene) = course.build() {
            scene.validate().expect("built scenes are valid");
        }
    }
});
