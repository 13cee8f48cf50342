#![no_main]

use libfuzzer_sys::fuzz_target;

use homog::field::read_field_binary;

// The binary field layout is read back from disk; arbitrary bytes must
// produce a clean error, never a panic or an oversized allocation.
fuzz_target!(|data: &[u8]| {
    let mut cursor = data;
    if let Ok(decoded) = read_field_binary(&mut cursor) {
        // decoded fields respect the advertised geometry
        assert_eq!(
            decoded.components[0].len(),
            decoded.grid.node_count(),
            "payload length must match the header"
        );
    }
});
