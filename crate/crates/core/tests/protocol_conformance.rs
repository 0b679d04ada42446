use visicrit_core::gateway::conformance::check_client;

#[test]
fn gateway_round_trips_fuzzed_critic_responses() {
    let r = check_client(1000, 100, 2024);
    assert_eq!((r.valid, r.invalid), (1000, 100));
    assert_eq!(r.valid_ok, 1000, "{:?}", r.failures);
    assert_eq!(r.invalid_rejected, 100, "{:?}", r.failures);
}
