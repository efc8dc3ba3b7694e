#![no_main]

use dynreg::forecaster::{Layout, ParameterVector};
use libfuzzer_sys::fuzz_target;

// Input: layout text, a NUL byte, then the little-endian parameter blob.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|b| *b == 0) else { return };
    let Ok(text) = std::str::from_utf8(&data[..split]) else { return };
    let Ok(layout) = Layout::parse(text) else { return };
    let blob = &data[split + 1..];
    let Ok(params) = ParameterVector::from_bytes(blob, layout) else { return };
    assert_eq!(params.to_bytes(), blob);
    let blocks = params.unpack();
    assert_eq!(ParameterVector::pack(&blocks).to_bytes(), blob);
});
