//! Kept in its own binary: it mutates the process environment.

use condshap::bridge::{BridgePool, SessionConfig, SIDECAR_ENV};
use condshap::methods::{parse_estimator, BridgeProvider};

const SIDECAR: &str = env!("CARGO_BIN_EXE_condshap-refsidecar");

#[test]
fn env_var_overrides_sidecar_command() {
    std::env::remove_var(SIDECAR_ENV);
    assert!(BridgePool::spawn("condshap-no-such-sidecar", 1, SessionConfig::default()).is_err());

    std::env::set_var(SIDECAR_ENV, SIDECAR);
    let pool = BridgePool::spawn("condshap-no-such-sidecar", 1, SessionConfig::default()).unwrap();
    assert!(pool.capabilities().backend("ols-ref").is_some());

    // Specs resolve bridge backends through the same fallback.
    let provider = BridgeProvider::default();
    let spec = parse_estimator("separate:bridge:ols-ref").unwrap();
    assert!(spec.build(0, &provider).is_ok());
    assert_eq!(
        provider.pool().unwrap().capabilities().max_context_rows,
        50_000
    );
    std::env::remove_var(SIDECAR_ENV);
}
