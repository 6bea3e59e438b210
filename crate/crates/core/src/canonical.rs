//! Canonical JSON serialization and SHA-256 helpers.
//!
//! Canonical JSON here means: object keys sorted by code point, no
//! insignificant whitespace, UTF-8, and numbers written as the shortest
//! decimal that round-trips. Every content-addressed object in the store is
//! hashed over these bytes.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes `value` to canonical JSON bytes.
///
/// Goes through [`serde_json::Value`], whose object map is ordered by key.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("canonical values are always representable as JSON");
    serde_json::to_vec(&v).expect("serializing a JSON value cannot fail")
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the canonical JSON encoding of `value`.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&to_canonical_json(value))
}

/// True for a 64-character lowercase hex string.
pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Current UTC time in the `YYYY-MM-DDTHH:MM:SSZ` format used throughout.
pub fn utc_now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// `secs` since the Unix epoch in the same format as [`utc_now`].
pub fn utc_from_epoch(secs: i64) -> Option<String> {
    chrono::DateTime::from_timestamp(secs, 0).map(|t| t.format("%Y-%m-%dT%H:%M:%SZ").to_string())
}
