#![no_main]

use libfuzzer_sys::fuzz_target;
use taskgap::formats::{format_poses, parse_poses};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_poses(text) {
        let again = parse_poses(&format_poses(&records)).expect("formatted poses parse");
        assert_eq!(again, records);
    }
});
