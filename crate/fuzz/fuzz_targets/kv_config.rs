#![no_main]

use dynreg::io::KvDoc;
use dynreg::training::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(doc) = KvDoc::parse(text) else { return };
    assert_eq!(KvDoc::parse(&doc.render()).expect("rendered config re-parses"), doc);
    // typed access must fail cleanly, never panic
    let _ = TrainConfig::from_config(&doc, 5, 4);
});
