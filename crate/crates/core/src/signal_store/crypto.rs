use ring::aead::{Aad, LessSafeKey, Nonce, UnboundKey, CHACHA20_POLY1305, NONCE_LEN};
use ring::rand::{SecureRandom, SystemRandom};

use super::{Profile, StoreError};

pub const KEY_ENV: &str = "HEART2MIND_KEY";

/// 256-bit profile encryption key.
#[derive(Clone)]
pub struct ProfileKey([u8; 32]);

impl std::fmt::Debug for ProfileKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ProfileKey(..)")
    }
}

impl ProfileKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn from_hex(text: &str) -> Result<Self, StoreError> {
        let text = text.trim();
        if text.len() != 64 {
            return Err(StoreError::Config(format!("{KEY_ENV} must be 64 hex characters, got {}", text.len())));
        }
        let bytes = hex::decode(text).map_err(|_| StoreError::Config(format!("{KEY_ENV} is not valid hex")))?;
        let mut key = [0u8; 32];
        key.copy_from_slice(&bytes);
        Ok(Self(key))
    }

    pub fn from_env() -> Result<Self, StoreError> {
        match std::env::var(KEY_ENV) {
            Ok(v) => Self::from_hex(&v),
            Err(_) => Err(StoreError::Config(format!("encryption key variable {KEY_ENV} is not set"))),
        }
    }

    pub fn generate() -> Self {
        let mut key = [0u8; 32];
        SystemRandom::new().fill(&mut key).expect("system randomness");
        Self(key)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    fn aead(&self) -> LessSafeKey {
        LessSafeKey::new(UnboundKey::new(&CHACHA20_POLY1305, &self.0).expect("32-byte key"))
    }
}

/// `nonce || ciphertext || tag`, with the session id as associated data.
pub fn encrypt_profile(key: &ProfileKey, session_id: &str, profile: &Profile) -> Result<Vec<u8>, StoreError> {
    let mut nonce = [0u8; NONCE_LEN];
    SystemRandom::new()
        .fill(&mut nonce)
        .map_err(|_| StoreError::Internal("nonce generation failed".into()))?;
    let mut buf = serde_json::to_vec(profile).map_err(|e| StoreError::Internal(e.to_string()))?;
    key.aead()
        .seal_in_place_append_tag(Nonce::assume_unique_for_key(nonce), Aad::from(session_id.as_bytes()), &mut buf)
        .map_err(|_| StoreError::Internal("encryption failed".into()))?;
    let mut out = nonce.to_vec();
    out.extend_from_slice(&buf);
    Ok(out)
}

pub fn decrypt_profile(key: &ProfileKey, session_id: &str, blob: &[u8]) -> Result<Profile, StoreError> {
    if blob.len() < NONCE_LEN {
        return Err(StoreError::Authentication);
    }
    let (nonce, sealed) = blob.split_at(NONCE_LEN);
    let nonce = Nonce::try_assume_unique_for_key(nonce).map_err(|_| StoreError::Authentication)?;
    let mut buf = sealed.to_vec();
    let plain = key
        .aead()
        .open_in_place(nonce, Aad::from(session_id.as_bytes()), &mut buf)
        .map_err(|_| StoreError::Authentication)?;
    serde_json::from_slice(plain).map_err(|_| StoreError::Authentication)
}
