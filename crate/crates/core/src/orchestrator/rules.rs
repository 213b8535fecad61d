use crate::pipeline::{Target, TransitionRule};
use crate::stats::StatResult;

/// Whether `rule` fires for the completed `test` with `result`.
pub fn rule_applies(rule: &TransitionRule, result: &StatResult, test: &str) -> bool {
    rule.assoc == test && rule.condition.eval(result)
}

/// First applying rule in declaration order, or End when none applies.
pub fn next_element<'r>(
    rules: &'r [TransitionRule],
    result: &StatResult,
    test: &str,
) -> (Option<&'r TransitionRule>, Target) {
    for rule in rules {
        if rule_applies(rule, result, test) {
            return (Some(rule), rule.next.clone());
        }
    }
    (None, Target::End)
}
