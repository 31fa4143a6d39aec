#![no_main]
use libfuzzer_sys::fuzz_target;
use tradeflow::prompt::{PromptVariant, VariantId};
use tradeflow::response::parse_response;

fuzz_target!(|data: &str| {
    for id in [VariantId::Baseline1, VariantId::Astp, VariantId::AstpNoPpp] {
        let out = parse_response(data, &PromptVariant::of(id));
        // Whatever was accepted must survive its own serialization.
        if let Some(r) = out.response {
            let again = parse_response(&r.to_json().to_string(), &PromptVariant::of(id));
            assert_eq!(again.response.map(|x| x.state()), Some(r.state()));
        }
    }
});
