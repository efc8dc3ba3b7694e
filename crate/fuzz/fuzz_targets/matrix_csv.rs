#![no_main]

use dynreg::io::{matrix_from_csv, matrix_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = matrix_from_csv(text) else { return };
    let again = matrix_from_csv(&matrix_to_csv(&m)).expect("written matrix re-parses");
    assert_eq!(again.shape(), m.shape());
    for (a, b) in again.iter().zip(m.iter()) {
        assert!(a == b || (a.is_nan() && b.is_nan()));
    }
});
