#![no_main]

use libfuzzer_sys::fuzz_target;
use taskgap::training::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).expect("serialized checkpoints load"), ck);
    }
});
