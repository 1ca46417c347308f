//! Fuzzes the action-script parser in both suffix modes. The first input
//! byte selects whether `= <result>` suffixes are allowed; the rest is the
//! script text. Accepted scripts must survive a serialize/parse round trip
//! once their annotation suffixes are dropped, since serialization is
//! defined to emit the live (suffix-free) form.

#![no_main]

use libfuzzer_sys::fuzz_target;
use planact::dsl::{parse_action_script, serialize_action_script};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut chars = text.chars();
    let allow_suffix = chars.next() == Some('1');
    let body = chars.as_str();

    let Ok(mut script) = parse_action_script(body, allow_suffix) else {
        return;
    };
    for action in &mut script.actions {
        action.annotated_result = None;
    }
    let rendered = serialize_action_script(&script);
    let reparsed =
        parse_action_script(&rendered, false).expect("canonical rendering parses back");
    assert_eq!(reparsed, script, "round trip changed `{rendered}`");
});
