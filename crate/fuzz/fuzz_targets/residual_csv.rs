#![no_main]

use dynreg::diagnostics::ResidualSeries;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(series) = ResidualSeries::from_csv_str(text) else { return };
    let text = series.to_csv_string();
    let again = ResidualSeries::from_csv_str(&text).expect("written series re-parses");
    assert_eq!(again.to_csv_string(), text);
});
