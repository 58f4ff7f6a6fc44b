#![no_main]

use esd_cli::checkpoint::{decode, decode_header, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = decode_header(data);
    if let Ok((model, sched)) = decode(data) {
        let bytes = encode(&model, &sched);
        let (again, sched_again) = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(sched_again, sched);
        assert_eq!(again.checksum(), model.checksum());
        assert_eq!(encode(&again, &sched_again), bytes);
    }
});
