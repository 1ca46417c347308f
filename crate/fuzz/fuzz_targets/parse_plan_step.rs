//! Fuzzes the planner-reply classifier: arbitrary text must either classify
//! cleanly or error, never panic, and accepted subgoals keep a positive
//! index and non-empty body.

#![no_main]

use libfuzzer_sys::fuzz_target;
use planact::agent::{parse_plan_step, PlanStep};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    match parse_plan_step(text) {
        Ok(PlanStep::Subgoal(subgoal)) => {
            assert!(subgoal.index >= 1);
            assert!(!subgoal.text.is_empty());
        }
        Ok(PlanStep::Terminal) | Err(_) => {}
    }
});
