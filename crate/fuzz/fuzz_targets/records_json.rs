#![no_main]

use libfuzzer_sys::fuzz_target;
use stmixer::io::{parse_records, records_to_json};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_records(text) {
        let json = records_to_json(&records).expect("valid records serialise");
        let back = parse_records(&json).expect("serialised records parse");
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!((&a.video, a.clip_start, a.class, a.boxes.len()), (&b.video, b.clip_start, b.class, b.boxes.len()));
            // the JSON float parser may be one ulp off
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(1.0);
            assert!(close(a.score, b.score));
            assert!(a.boxes.iter().flatten().zip(b.boxes.iter().flatten()).all(|(x, y)| close(*x, *y)));
        }
    }
});
