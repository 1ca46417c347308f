//! Fuzzes the expression evaluator: arbitrary text must evaluate or error,
//! never panic, and every produced value is either a boolean word or a
//! finite decimal rendering.

#![no_main]

use libfuzzer_sys::fuzz_target;
use planact::calc::calculator_eval;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(value) = calculator_eval(text) {
        if value != "True" && value != "False" {
            let parsed: f64 = value
                .parse()
                .unwrap_or_else(|_| panic!("non-numeric output `{value}`"));
            assert!(parsed.is_finite(), "non-finite output `{value}`");
        }
    }
});
