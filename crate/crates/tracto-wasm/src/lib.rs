//! wasm demo bindings.
