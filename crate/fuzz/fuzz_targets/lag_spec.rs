#![no_main]

use dynreg::cli::parse_lags;
use libfuzzer_sys::fuzz_target;

// First byte picks the resolution in minutes; the rest is the lag list.
fuzz_target!(|data: &[u8]| {
    let Some((&res, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    if let Ok(lags) = parse_lags(text, u32::from(res)) {
        assert!(!lags.is_empty());
        assert!(lags.windows(2).all(|w| w[0] < w[1]));
        assert!(lags.iter().all(|l| *l > 0));
    }
});
