//! Fuzzes the converted-annotation parser. The first input byte selects
//! whether result suffixes are required; the rest is the annotation body.
//! Anything accepted must render back to a form the parser accepts again
//! with an identical result, and the rendered form must be a fixed point.

#![no_main]

use libfuzzer_sys::fuzz_target;
use planact::annotate::{parse_converted, render_converted};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut chars = text.chars();
    let require_results = chars.next() == Some('1');
    let body = chars.as_str();

    let Ok(annotation) = parse_converted(body, require_results) else {
        return;
    };
    let rendered = render_converted(&annotation);
    let reparsed = parse_converted(&rendered, require_results)
        .expect("rendered annotation parses back");
    assert_eq!(
        render_converted(&reparsed),
        rendered,
        "rendering is not a fixed point"
    );
});
