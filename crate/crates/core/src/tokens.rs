//! Project-scoped bearer tokens: issue, validate, list, revoke.
//!
//! Wire format is three dot-separated unpadded URL-safe base64 segments:
//!
//! ```text
//! base64url(header_json) "." base64url(claims_json) "." base64url(hmac_sha256(key, seg0 "." seg1))
//! ```
//!
//! The tag covers the *text* of the first two segments, so any edit to them
//! (including non-canonical base64 that decodes to the same bytes) fails
//! verification. Validation order is: structure, signature, claims decode,
//! revocation, expiry.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, KeyInit, Mac};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::error::{Classify, ErrorKind};
use crate::policy::PolicyEngine;
use crate::scope::{Scope, ScopeSet};
use crate::time::{Clock, Timestamp};

type HmacSha256 = Hmac<Sha256>;

/// Header segment JSON. Fixed for every token this service issues.
pub const TOKEN_HEADER_JSON: &str = r#"{"alg":"HS256","typ":"S3M"}"#;

pub const DEFAULT_TTL: Duration = Duration::from_secs(8 * 3600);

/// The signed payload of a token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claims {
    #[serde(rename = "tid")]
    pub token_id: String,
    #[serde(rename = "sub")]
    pub user_id: String,
    #[serde(rename = "prj")]
    pub project_id: String,
    #[serde(rename = "scp")]
    pub scopes: ScopeSet,
    #[serde(rename = "iat")]
    pub issued_at: Timestamp,
    #[serde(rename = "exp")]
    pub expires_at: Timestamp,
}

/// Identity of an authenticated caller. Only [`TokenService::validate`]
/// produces one, so holding an `AuthContext` means the token passed
/// signature, revocation and expiry checks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthContext {
    claims: Claims,
}

impl AuthContext {
    pub(crate) fn from_validated(claims: Claims) -> Self {
        AuthContext { claims }
    }

    pub fn claims(&self) -> &Claims {
        &self.claims
    }

    pub fn user_id(&self) -> &str {
        &self.claims.user_id
    }

    pub fn project_id(&self) -> &str {
        &self.claims.project_id
    }

    pub fn scopes(&self) -> ScopeSet {
        self.claims.scopes
    }

    pub fn token_id(&self) -> &str {
        &self.claims.token_id
    }

    pub fn expires_at(&self) -> Timestamp {
        self.claims.expires_at
    }

    pub fn has_scope(&self, scope: Scope) -> bool {
        self.claims.scopes.contains(scope)
    }

    pub(crate) fn require(&self, scope: Scope) -> Result<(), TokenError> {
        if self.has_scope(scope) {
            Ok(())
        } else {
            Err(TokenError::InsufficientScope(scope))
        }
    }
}

/// An issued token: its claims plus the serialized credential.
#[derive(Clone, PartialEq, Eq, Serialize)]
pub struct AccessToken {
    #[serde(flatten)]
    pub metadata: TokenMetadata,
    pub token: String,
}

impl fmt::Debug for AccessToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessToken")
            .field("metadata", &self.metadata)
            .field("token", &"<redacted>")
            .finish()
    }
}

/// Listing view of a token. Never carries the tag or serialized form.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMetadata {
    pub token_id: String,
    pub user_id: String,
    pub project_id: String,
    pub scopes: ScopeSet,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    #[serde(default)]
    pub revoked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenError {
    #[error("malformed token")]
    Malformed,
    #[error("bad token signature")]
    BadSignature,
    #[error("token expired")]
    Expired,
    #[error("token revoked")]
    Revoked,
    #[error("unknown project {0:?}")]
    UnknownProject(String),
    #[error("scope set must not be empty")]
    EmptyScopes,
    #[error("ttl must be positive")]
    NonPositiveTtl,
    #[error("missing required scope {0}")]
    InsufficientScope(Scope),
}

impl Classify for TokenError {
    fn kind(&self) -> ErrorKind {
        match self {
            TokenError::Malformed | TokenError::BadSignature | TokenError::Expired | TokenError::Revoked => {
                ErrorKind::Unauthenticated
            }
            TokenError::UnknownProject(_) => ErrorKind::NotFound,
            TokenError::EmptyScopes | TokenError::NonPositiveTtl => ErrorKind::BadRequest,
            TokenError::InsufficientScope(_) => ErrorKind::Forbidden,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            TokenError::Malformed => "MALFORMED",
            TokenError::BadSignature => "BAD_SIGNATURE",
            TokenError::Expired => "EXPIRED",
            TokenError::Revoked => "REVOKED",
            TokenError::UnknownProject(_) => "unknown_project",
            TokenError::EmptyScopes => "empty_scopes",
            TokenError::NonPositiveTtl => "invalid_ttl",
            TokenError::InsufficientScope(_) => "insufficient_scope",
        }
    }
}

/// HMAC key. Debug output never shows the bytes.
#[derive(Clone)]
pub struct SigningKey(Arc<[u8]>);

impl SigningKey {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        SigningKey(bytes.into().into())
    }

    pub fn generate() -> Self {
        let bytes: [u8; 32] = rand::random();
        SigningKey::new(bytes.to_vec())
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("hmac accepts any key length")
    }
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SigningKey(<redacted>)")
    }
}

/// Revoked token ids with the expiry of each, so entries can be purged once
/// the token would have expired anyway.
#[derive(Debug, Default)]
pub struct RevocationList {
    revoked: HashMap<String, Timestamp>,
    updated_at: Timestamp,
}

impl RevocationList {
    pub fn contains(&self, token_id: &str) -> bool {
        self.revoked.contains_key(token_id)
    }

    pub fn len(&self) -> usize {
        self.revoked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.revoked.is_empty()
    }

    pub fn updated_at(&self) -> Timestamp {
        self.updated_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RevokeAck {
    pub token_id: String,
    pub detail: &'static str,
}

pub struct TokenService {
    key: SigningKey,
    clock: Arc<dyn Clock>,
    policy: Arc<PolicyEngine>,
    default_ttl: Duration,
    issued: RwLock<HashMap<String, TokenMetadata>>,
    revocations: RwLock<RevocationList>,
}

impl fmt::Debug for TokenService {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenService")
            .field("default_ttl", &self.default_ttl)
            .field("issued", &self.issued.read().len())
            .finish_non_exhaustive()
    }
}

impl TokenService {
    pub fn new(key: SigningKey, clock: Arc<dyn Clock>, policy: Arc<PolicyEngine>) -> Self {
        TokenService {
            key,
            clock,
            policy,
            default_ttl: DEFAULT_TTL,
            issued: RwLock::default(),
            revocations: RwLock::default(),
        }
    }

    pub fn with_default_ttl(mut self, ttl: Duration) -> Self {
        self.default_ttl = ttl;
        self
    }

    pub fn default_ttl(&self) -> Duration {
        self.default_ttl
    }

    pub fn issue(
        &self,
        admin: &AuthContext,
        user_id: &str,
        project_id: &str,
        scopes: ScopeSet,
        ttl: Option<Duration>,
    ) -> Result<AccessToken, TokenError> {
        admin.require(Scope::TokensManage)?;
        self.issue_unchecked(user_id, project_id, scopes, ttl)
    }

    /// Issues without an admin context. Used to mint the bootstrap admin
    /// credential at startup.
    pub fn issue_unchecked(
        &self,
        user_id: &str,
        project_id: &str,
        scopes: ScopeSet,
        ttl: Option<Duration>,
    ) -> Result<AccessToken, TokenError> {
        let ttl = ttl.unwrap_or(self.default_ttl);
        if ttl.as_millis() == 0 {
            return Err(TokenError::NonPositiveTtl);
        }
        if scopes.is_empty() {
            return Err(TokenError::EmptyScopes);
        }
        if !self.policy.is_registered(project_id) {
            return Err(TokenError::UnknownProject(project_id.to_string()));
        }
        let issued_at = self.clock.now();
        let claims = Claims {
            token_id: uuid::Uuid::new_v4().simple().to_string(),
            user_id: user_id.to_string(),
            project_id: project_id.to_string(),
            scopes,
            issued_at,
            expires_at: issued_at.saturating_add(ttl),
        };
        let token = self.encode(&claims);
        let metadata = TokenMetadata {
            token_id: claims.token_id.clone(),
            user_id: claims.user_id,
            project_id: claims.project_id,
            scopes,
            issued_at,
            expires_at: claims.expires_at,
            revoked: false,
        };
        self.issued.write().insert(metadata.token_id.clone(), metadata.clone());
        log::info!(
            "issued token {} for {}@{}",
            metadata.token_id,
            metadata.user_id,
            metadata.project_id
        );
        Ok(AccessToken { metadata, token })
    }

    fn encode(&self, claims: &Claims) -> String {
        let header = URL_SAFE_NO_PAD.encode(TOKEN_HEADER_JSON);
        let body = URL_SAFE_NO_PAD.encode(serde_json::to_vec(claims).expect("claims serialize"));
        let mut mac = self.key.mac();
        mac.update(header.as_bytes());
        mac.update(b".");
        mac.update(body.as_bytes());
        let tag = URL_SAFE_NO_PAD.encode(mac.finalize().into_bytes());
        format!("{header}.{body}.{tag}")
    }

    /// Validates against the injected clock.
    pub fn validate(&self, serialized: &str) -> Result<AuthContext, TokenError> {
        self.validate_at(serialized, self.clock.now())
    }

    pub fn validate_at(&self, serialized: &str, now: Timestamp) -> Result<AuthContext, TokenError> {
        let mut parts = serialized.split('.');
        let (Some(header), Some(body), Some(tag), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(TokenError::Malformed);
        };
        if [header, body, tag].iter().any(|s| !is_b64url(s)) {
            return Err(TokenError::Malformed);
        }

        let tag = URL_SAFE_NO_PAD.decode(tag).map_err(|_| TokenError::BadSignature)?;
        let mut mac = self.key.mac();
        mac.update(header.as_bytes());
        mac.update(b".");
        mac.update(body.as_bytes());
        mac.verify_slice(&tag).map_err(|_| TokenError::BadSignature)?;

        let header_bytes = URL_SAFE_NO_PAD.decode(header).map_err(|_| TokenError::Malformed)?;
        if header_bytes != TOKEN_HEADER_JSON.as_bytes() {
            return Err(TokenError::Malformed);
        }
        let body = URL_SAFE_NO_PAD.decode(body).map_err(|_| TokenError::Malformed)?;
        let claims: Claims = serde_json::from_slice(&body).map_err(|_| TokenError::Malformed)?;

        if self.revocations.read().contains(&claims.token_id) {
            return Err(TokenError::Revoked);
        }
        if now >= claims.expires_at {
            return Err(TokenError::Expired);
        }
        Ok(AuthContext::from_validated(claims))
    }

    pub fn revoke(&self, admin: &AuthContext, token_id: &str) -> Result<RevokeAck, TokenError> {
        admin.require(Scope::TokensManage)?;
        let now = self.clock.now();
        let expiry = self.issued.read().get(token_id).map(|m| m.expires_at);
        let detail = match expiry {
            None => "already absent",
            Some(expires_at) => {
                let mut list = self.revocations.write();
                if list.revoked.insert(token_id.to_string(), expires_at).is_some() {
                    "already revoked"
                } else {
                    list.updated_at = now;
                    if let Some(m) = self.issued.write().get_mut(token_id) {
                        m.revoked = true;
                    }
                    "revoked"
                }
            }
        };
        Ok(RevokeAck {
            token_id: token_id.to_string(),
            detail,
        })
    }

    pub fn list(&self, admin: &AuthContext, user_id: Option<&str>) -> Result<Vec<TokenMetadata>, TokenError> {
        admin.require(Scope::TokensManage)?;
        let now = self.clock.now();
        let mut out: Vec<_> = self
            .issued
            .read()
            .values()
            .filter(|m| now < m.expires_at)
            .filter(|m| user_id.is_none_or(|u| m.user_id == u))
            .cloned()
            .collect();
        out.sort_by(|a, b| (a.issued_at, &a.token_id).cmp(&(b.issued_at, &b.token_id)));
        Ok(out)
    }

    /// Drops registry and revocation entries for tokens already past expiry.
    pub fn purge_expired(&self, now: Timestamp) -> usize {
        let mut list = self.revocations.write();
        let before = list.revoked.len();
        list.revoked.retain(|_, exp| now < *exp);
        let purged = before - list.revoked.len();
        if purged > 0 {
            list.updated_at = now;
        }
        drop(list);
        self.issued.write().retain(|_, m| now < m.expires_at);
        purged
    }

    pub fn revocation_count(&self) -> usize {
        self.revocations.read().len()
    }
}

fn is_b64url(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}
