#![no_main]
use libfuzzer_sys::fuzz_target;
use tradeflow::simulation::parse_transcript;

fuzz_target!(|data: &str| {
    if let Ok(t) = parse_transcript(data) {
        parse_transcript(&t.to_jsonl()).expect("written transcript reads back");
    }
});
