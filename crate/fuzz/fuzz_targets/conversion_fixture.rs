//! Fuzzes the in-context example file decoder: blocks separated by `===`
//! lines must parse or error without panicking, and accepted examples carry
//! non-empty sections.

#![no_main]

use libfuzzer_sys::fuzz_target;
use planact::annotate::parse_conversion_fixture_file;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(examples) = parse_conversion_fixture_file(text) {
        for example in examples {
            assert!(!example.task.is_empty());
            assert!(!example.rationale.is_empty());
            assert!(!example.plan.is_empty());
        }
    }
});
