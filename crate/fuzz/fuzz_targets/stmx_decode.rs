#![no_main]

use libfuzzer_sys::fuzz_target;
use stmixer::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::from_stmx_bytes(data) {
        // decoded values are f32-exact, so re-encoding reproduces the input
        assert_eq!(t.to_stmx_bytes().unwrap(), data);
    }
});
