#![no_main]

use dynreg::forecaster::Layout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(layout) = Layout::parse(text) else { return };
    assert_eq!(Layout::parse(&layout.render()).expect("rendered layout re-parses"), layout);
});
