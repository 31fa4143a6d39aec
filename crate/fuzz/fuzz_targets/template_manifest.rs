#![no_main]
use libfuzzer_sys::fuzz_target;
use tradeflow::prompt::TemplateStore;

// Input is `manifest NUL player NUL section`; every section file the
// manifest names resolves to the same text.
fuzz_target!(|data: &str| {
    let mut parts = data.splitn(3, '\0');
    let manifest = parts.next().unwrap_or_default();
    let player = parts.next().unwrap_or_default();
    let section = parts.next().unwrap_or_default();
    let _ = TemplateStore::from_sources(manifest, player, |_| Some(Ok(section.to_string())));
});
