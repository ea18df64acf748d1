use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

/// Hex SHA-256 over the shapes and little-endian payloads of `tensors`, in order.
pub fn digest<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut hasher = Sha256::new();
    for t in tensors {
        for &extent in t.shape() {
            hasher.update((extent as u64).to_le_bytes());
        }
        hasher.update(t.payload_bytes());
    }
    hex::encode(hasher.finalize())
}
