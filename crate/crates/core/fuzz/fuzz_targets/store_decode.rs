#![no_main]

use agd::trajectory::TrajectoryStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = TrajectoryStore::decode(data) {
        let bytes = store.encode();
        let back = TrajectoryStore::decode(&bytes).expect("re-encoded store decodes");
        assert_eq!(back, store);
        assert_eq!(back.checksum(), store.checksum());
    }
});
