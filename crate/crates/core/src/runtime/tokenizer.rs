//! Byte-level tokenizer: ids 0..=255 are raw bytes, ids above are specials.

pub const BYTE_VOCAB: usize = 256;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

pub fn encode(text: &str) -> Vec<u32> {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Lossy UTF-8 decode; special ids render as `<|id|>`.
pub fn decode(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &id in ids {
        if (id as usize) < BYTE_VOCAB {
            bytes.push(id as u8);
        } else {
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            out.push_str(&format!("<|{id}|>"));
        }
    }
    out.push_str(&String::from_utf8_lossy(&bytes));
    out
}
