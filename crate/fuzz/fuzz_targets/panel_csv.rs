#![no_main]

use dynreg::SeriesPanel;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(panel) = SeriesPanel::from_csv_str(text) else { return };
    let text = panel.to_csv_string();
    let again = SeriesPanel::from_csv_str(&text).expect("written panel re-parses");
    assert_eq!(again.mask, panel.mask);
    assert_eq!(again.node_ids, panel.node_ids);
    assert_eq!(again.times, panel.times);
    assert_eq!(again.resolution_minutes, panel.resolution_minutes);
    assert_eq!(again.to_csv_string(), text);
});
