#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(world) = tradeflow::game_world::parse_world(data) {
        let again = tradeflow::game_world::parse_world(&world.to_json()).expect("world round-trips");
        assert_eq!(again, world);
    }
});
