#![no_main]

use libfuzzer_sys::fuzz_target;
use lesita::checkpoint::{Checkpoint, SavedModel};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        // Whatever decodes must re-encode to the same bytes.
        assert_eq!(ck.encode(), data);
        let _ = SavedModel::from_checkpoint(&ck);
        let _ = ck.dump();
    }
});
