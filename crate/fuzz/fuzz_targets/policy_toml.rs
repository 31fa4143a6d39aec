#![no_main]
use libfuzzer_sys::fuzz_target;
use tradeflow::state_machine::TransitionPolicy;

fuzz_target!(|data: &str| {
    if let Ok(policy) = TransitionPolicy::from_toml_str(data) {
        let again = TransitionPolicy::from_toml_str(&policy.to_toml_string()).expect("policy round-trips");
        assert_eq!(again, policy);
    }
});
