//! Sealed packet bodies.
//!
//! [`SealedCipher`] is an authenticated public-key box between two peers:
//! X25519 agreement, HSalsa20 key derivation, XSalsa20 encryption and a
//! Poly1305 tag. Output layout is `nonce(24) || tag(16) || ciphertext`,
//! byte-compatible with the NaCl `crypto_box` combined form prefixed by its
//! nonce. [`IdentityCipher`] passes bytes through unchanged and is the default
//! for simulation so measurements are not skewed by cryptography.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use curve25519_dalek::montgomery::MontgomeryPoint;
use poly1305::universal_hash::KeyInit;
use poly1305::Poly1305;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salsa20::cipher::consts::U10;
use salsa20::cipher::{KeyIvInit, StreamCipher};
use salsa20::XSalsa20;
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 24;
pub const TAG_LEN: usize = 16;
/// Bytes [`SealedCipher`] adds to every message.
pub const SEAL_OVERHEAD: usize = NONCE_LEN + TAG_LEN;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("key must be {KEY_LEN} bytes, got {0}")]
    InvalidKeyLength(usize),
    #[error("sealed message shorter than its {SEAL_OVERHEAD}-byte overhead")]
    Truncated,
    #[error("authentication failed")]
    Authentication,
}

/// X25519 key pair of a peer.
#[derive(Clone)]
pub struct PeerKeyPair {
    public: [u8; KEY_LEN],
    secret: [u8; KEY_LEN],
}

impl fmt::Debug for PeerKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PeerKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl PeerKeyPair {
    /// Derives the public half from 32 secret bytes.
    pub fn from_secret(secret: [u8; KEY_LEN]) -> Self {
        Self {
            public: MontgomeryPoint::mul_base_clamped(secret).to_bytes(),
            secret,
        }
    }

    pub fn from_secret_slice(secret: &[u8]) -> Result<Self, CryptoError> {
        Ok(Self::from_secret(key_array(secret)?))
    }

    pub fn public_key(&self) -> [u8; KEY_LEN] {
        self.public
    }

    pub fn secret_bytes(&self) -> &[u8; KEY_LEN] {
        &self.secret
    }
}

fn key_array(bytes: &[u8]) -> Result<[u8; KEY_LEN], CryptoError> {
    bytes
        .try_into()
        .map_err(|_| CryptoError::InvalidKeyLength(bytes.len()))
}

/// Symmetric key shared by `ours` and the holder of `their_public`.
fn shared_key(ours: &PeerKeyPair, their_public: &[u8; KEY_LEN]) -> [u8; KEY_LEN] {
    let point = MontgomeryPoint(*their_public).mul_clamped(ours.secret);
    salsa20::hsalsa::<U10>(&point.to_bytes().into(), &Default::default()).into()
}

fn poly_key_and_stream(key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN]) -> (XSalsa20, [u8; 32]) {
    let mut stream = XSalsa20::new(key.into(), nonce.into());
    let mut poly_key = [0u8; 32];
    stream.apply_keystream(&mut poly_key);
    (stream, poly_key)
}

fn seal_with_key(plaintext: &[u8], key: &[u8; KEY_LEN], nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
    let (mut stream, poly_key) = poly_key_and_stream(key, nonce);
    let mut out = Vec::with_capacity(SEAL_OVERHEAD + plaintext.len());
    out.extend_from_slice(nonce);
    out.extend_from_slice(&[0u8; TAG_LEN]);
    out.extend_from_slice(plaintext);
    stream.apply_keystream(&mut out[SEAL_OVERHEAD..]);
    let tag = Poly1305::new(&poly_key.into()).compute_unpadded(&out[SEAL_OVERHEAD..]);
    out[NONCE_LEN..SEAL_OVERHEAD].copy_from_slice(&tag);
    out
}

fn open_with_key(sealed: &[u8], key: &[u8; KEY_LEN]) -> Result<Vec<u8>, CryptoError> {
    if sealed.len() < SEAL_OVERHEAD {
        return Err(CryptoError::Truncated);
    }
    let nonce: &[u8; NONCE_LEN] = sealed[..NONCE_LEN].try_into().unwrap();
    let (mut stream, poly_key) = poly_key_and_stream(key, nonce);
    let body = &sealed[SEAL_OVERHEAD..];
    let tag = Poly1305::new(&poly_key.into()).compute_unpadded(body);
    if !bool::from(tag.as_slice().ct_eq(&sealed[NONCE_LEN..SEAL_OVERHEAD])) {
        return Err(CryptoError::Authentication);
    }
    let mut plaintext = body.to_vec();
    stream.apply_keystream(&mut plaintext);
    Ok(plaintext)
}

/// Seals `plaintext` from `sender` to the holder of `recipient_public`.
/// `entropy` becomes the nonce and must not repeat for a key pair.
pub fn seal(
    plaintext: &[u8],
    recipient_public: &[u8],
    sender: &PeerKeyPair,
    entropy: &[u8; NONCE_LEN],
) -> Result<Vec<u8>, CryptoError> {
    let key = shared_key(sender, &key_array(recipient_public)?);
    Ok(seal_with_key(plaintext, &key, entropy))
}

/// Opens a message sealed by the holder of `sender_public` for `recipient`.
pub fn open(sealed: &[u8], recipient: &PeerKeyPair, sender_public: &[u8]) -> Result<Vec<u8>, CryptoError> {
    let key = shared_key(recipient, &key_array(sender_public)?);
    open_with_key(sealed, &key)
}

/// Transformation applied to every encoded packet before it hits the link.
pub trait Cipher {
    /// Constant number of bytes `seal` adds.
    fn overhead(&self) -> usize;
    fn seal(&mut self, plaintext: &[u8]) -> Vec<u8>;
    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CryptoError>;
}

impl<C: Cipher + ?Sized> Cipher for Box<C> {
    fn overhead(&self) -> usize {
        (**self).overhead()
    }

    fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        (**self).seal(plaintext)
    }

    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        (**self).open(sealed)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityCipher;

impl Cipher for IdentityCipher {
    fn overhead(&self) -> usize {
        0
    }

    fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        plaintext.to_vec()
    }

    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        Ok(sealed.to_vec())
    }
}

/// Box between one local key pair and one remote peer.
pub struct SealedCipher {
    key: [u8; KEY_LEN],
    nonces: ChaCha8Rng,
}

impl fmt::Debug for SealedCipher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SealedCipher").finish_non_exhaustive()
    }
}

impl SealedCipher {
    /// `entropy` seeds the nonce generator.
    pub fn new(local: &PeerKeyPair, peer_public: &[u8], entropy: u64) -> Result<Self, CryptoError> {
        Ok(Self {
            key: shared_key(local, &key_array(peer_public)?),
            nonces: ChaCha8Rng::seed_from_u64(entropy),
        })
    }
}

impl Cipher for SealedCipher {
    fn overhead(&self) -> usize {
        SEAL_OVERHEAD
    }

    fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let mut nonce = [0u8; NONCE_LEN];
        self.nonces.fill_bytes(&mut nonce);
        seal_with_key(plaintext, &self.key, &nonce)
    }

    fn open(&self, sealed: &[u8]) -> Result<Vec<u8>, CryptoError> {
        open_with_key(sealed, &self.key)
    }
}

/// Writes a raw 32-byte key readable only by the owner.
pub fn write_key_file(path: &Path, key: &[u8; KEY_LEN]) -> io::Result<()> {
    let mut options = fs::OpenOptions::new();
    options.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    io::Write::write_all(&mut options.open(path)?, key)
}

pub fn read_key_file(path: &Path) -> io::Result<[u8; KEY_LEN]> {
    let bytes = fs::read(path)?;
    key_array(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
