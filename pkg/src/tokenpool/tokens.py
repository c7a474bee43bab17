"""Keyrings, trust directories, and the two token flavors.

Identity tokens (HS256) authenticate pool daemons against named symmetric
keys; capability tokens (Ed25519) grant scoped rights at a target audience
and verify against public keys published per issuer.  Keyring updates are
pure: revoke/rotate return a new keyring, the old value stays intact.
"""

from __future__ import annotations

import enum
import os
import secrets
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping

from cryptography.hazmat.primitives.asymmetric import ed25519

from . import jose
from .errors import (
    AudienceMismatch,
    DuplicateKid,
    Expired,
    InsufficientScope,
    InvalidClaims,
    KeyRevoked,
    MalformedToken,
    NotYetValid,
    SignatureInvalid,
    UnknownKey,
    UntrustedIssuer,
)
from .jose import IDTOKEN_ALG, SCITOKEN_ALG, TokenClaims, TokenHeader

DEFAULT_SKEW = 60
DEFAULT_IDTOKEN_LIFETIME = 3600
DEFAULT_SCITOKEN_LIFETIME = 1200


class KeyStatus(enum.Enum):
    ACTIVE = "ACTIVE"
    REVOKED = "REVOKED"


@dataclass(frozen=True)
class SymmetricKey:
    secret: bytes
    status: KeyStatus = KeyStatus.ACTIVE


@dataclass(frozen=True)
class SymmetricKeyring:
    """Named symmetric keys for identity-token minting and verification.

    Revoked keys are retained (audit), they just refuse to mint or verify.
    """

    entries: Mapping[str, SymmetricKey]

    @classmethod
    def from_secrets(cls, secrets_by_kid: Mapping[str, bytes]) -> "SymmetricKeyring":
        return cls(MappingProxyType({k: SymmetricKey(v) for k, v in secrets_by_kid.items()}))

    def lookup(self, kid: str) -> SymmetricKey:
        try:
            return self.entries[kid]
        except KeyError:
            raise UnknownKey(f"no key {kid!r} in keyring") from None

    def active_secret(self, kid: str) -> bytes:
        key = self.lookup(kid)
        if key.status is KeyStatus.REVOKED:
            raise KeyRevoked(f"key {kid!r} is revoked")
        return key.secret

    def active_kids(self) -> tuple[str, ...]:
        return tuple(k for k, v in self.entries.items() if v.status is KeyStatus.ACTIVE)


def rotate_key(keyring: SymmetricKeyring, new_kid: str, secret: bytes | None = None) -> SymmetricKeyring:
    """Return a keyring extended with a fresh ACTIVE key.

    The secret may be supplied (simulations derive it from the seeded RNG);
    otherwise it is drawn from the OS.
    """
    if new_kid in keyring.entries:
        raise DuplicateKid(f"kid {new_kid!r} already present")
    entries = dict(keyring.entries)
    entries[new_kid] = SymmetricKey(secret if secret is not None else os.urandom(32))
    return SymmetricKeyring(MappingProxyType(entries))


def revoke_key(keyring: SymmetricKeyring, kid: str) -> SymmetricKeyring:
    """Return a keyring with ``kid`` marked REVOKED (entry retained)."""
    old = keyring.lookup(kid)
    entries = dict(keyring.entries)
    entries[kid] = SymmetricKey(old.secret, KeyStatus.REVOKED)
    return SymmetricKeyring(MappingProxyType(entries))


@dataclass(frozen=True)
class IssuerKey:
    """An issuer's Ed25519 signing key plus its key id."""

    kid: str
    private_key: ed25519.Ed25519PrivateKey

    @classmethod
    def generate(cls, kid: str, seed: bytes | None = None) -> "IssuerKey":
        if seed is not None:
            if len(seed) != 32:
                raise ValueError("Ed25519 seed must be 32 bytes")
            return cls(kid, ed25519.Ed25519PrivateKey.from_private_bytes(seed))
        return cls(kid, ed25519.Ed25519PrivateKey.generate())

    @property
    def public_bytes(self) -> bytes:
        from cryptography.hazmat.primitives import serialization

        return self.private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )


@dataclass(frozen=True)
class TrustDirectory:
    """Issuer URL -> kid -> raw Ed25519 public key, plus allowed audiences.

    An empty audience tuple means the issuer is unrestricted.
    """

    issuers: Mapping[str, Mapping[str, bytes]]
    audiences: Mapping[str, tuple[str, ...]]

    @classmethod
    def single_issuer(
        cls, issuer: str, key: IssuerKey, audiences: Iterable[str] = ()
    ) -> "TrustDirectory":
        return cls(
            issuers=MappingProxyType({issuer: MappingProxyType({key.kid: key.public_bytes})}),
            audiences=MappingProxyType({issuer: tuple(audiences)}),
        )

    def verification_key(self, issuer: str, kid: str) -> bytes:
        if issuer not in self.issuers:
            raise UntrustedIssuer(f"issuer {issuer!r} not trusted")
        keys = self.issuers[issuer]
        if kid not in keys:
            raise UnknownKey(f"kid {kid!r} unknown for issuer {issuer!r}")
        return keys[kid]


@dataclass(frozen=True)
class VerifiedIdentity:
    """Result of a successful identity-token verification."""

    subject: str
    authz_limits: frozenset[str]
    kid: str
    jti: str


@dataclass(frozen=True)
class VerifiedCapability:
    """Result of a successful capability-token verification."""

    subject: str
    issuer: str
    granted_scopes: frozenset[str]
    kid: str
    jti: str


def _fresh_jti() -> str:
    return secrets.token_hex(8)


def mint_idtoken(
    keyring: SymmetricKeyring,
    kid: str,
    identity: str,
    authz_limits: Iterable[str],
    lifetime: int,
    now: int,
    *,
    issuer: str = "condor-pool",
    audience: str | None = None,
    jti: str | None = None,
) -> str:
    """Mint an HS256 identity token under an ACTIVE key.

    ``authz_limits`` lists the authorization levels the holder may
    exercise; an empty iterable means unlimited.  Simulations pass an
    explicit ``jti``; the default draws a random one.
    """
    secret = keyring.active_secret(kid)
    claims = TokenClaims(
        sub=identity,
        iss=issuer,
        aud=audience,
        iat=now,
        exp=now + lifetime,
        jti=jti if jti is not None else _fresh_jti(),
        authz_limits=tuple(sorted(authz_limits)),
    )
    return jose.encode_token(TokenHeader(IDTOKEN_ALG, kid), claims, secret)


def mint_scitoken(
    issuer_key: IssuerKey,
    issuer: str,
    subject: str,
    scope: Iterable[str],
    audience: str,
    lifetime: int,
    now: int,
    *,
    jti: str | None = None,
) -> str:
    """Mint an Ed25519 capability token for ``audience`` with ``scope``."""
    claims = TokenClaims(
        sub=subject,
        iss=issuer,
        aud=audience,
        iat=now,
        exp=now + lifetime,
        jti=jti if jti is not None else _fresh_jti(),
        scope=tuple(scope),
    )
    return jose.encode_token(
        TokenHeader(SCITOKEN_ALG, issuer_key.kid), claims, issuer_key.private_key
    )


def _check_window(claims: TokenClaims, now: int, skew: int) -> None:
    if now > claims.exp + skew:
        raise Expired(f"expired at {claims.exp} (now {now}, skew {skew})")
    if now < claims.iat - skew:
        raise NotYetValid(f"issued at {claims.iat} (now {now}, skew {skew})")


def verify_idtoken(
    token: str,
    keyring: SymmetricKeyring,
    now: int,
    skew: int = DEFAULT_SKEW,
) -> VerifiedIdentity:
    """Verify an identity token against the keyring.

    Check order: parse, flavor, key status, signature, time window.  A
    revoked key fails with KeyRevoked no matter what the signature says.

    Raises:
        MalformedToken, UnknownKey, KeyRevoked, SignatureInvalid,
        Expired, NotYetValid
    """
    header, claims, signature = jose.decode_token(token)
    if header.alg != IDTOKEN_ALG:
        raise SignatureInvalid(f"alg {header.alg!r} not valid for an identity token")
    if header.typ != "JWT":
        raise MalformedToken(f"unexpected typ {header.typ!r}")
    if not claims.is_idtoken:
        raise MalformedToken("capability claims presented for identity verification")
    secret = keyring.active_secret(header.kid)
    if not jose.hs256_matches(secret, jose.signing_input_of(token), signature):
        raise SignatureInvalid("HMAC mismatch")
    _check_window(claims, now, skew)
    return VerifiedIdentity(
        subject=claims.sub,
        authz_limits=frozenset(claims.authz_limits or ()),
        kid=header.kid,
        jti=claims.jti,
    )


def verify_scitoken(
    token: str,
    trust: TrustDirectory,
    expected_audience: str,
    required_scopes: Iterable[str],
    now: int,
    skew: int = DEFAULT_SKEW,
) -> VerifiedCapability:
    """Verify a capability token: issuer trust, signature, window,
    audience, and scope coverage, in that order.

    Raises:
        MalformedToken, UntrustedIssuer, UnknownKey, SignatureInvalid,
        Expired, NotYetValid, AudienceMismatch, InsufficientScope
    """
    header, claims, signature = jose.decode_token(token)
    if header.alg != SCITOKEN_ALG:
        raise SignatureInvalid(f"alg {header.alg!r} not valid for a capability token")
    if not claims.is_scitoken:
        raise MalformedToken("identity claims presented for capability verification")
    if claims.iss is None:
        raise MalformedToken("capability token lacks an issuer claim")
    public = trust.verification_key(claims.iss, header.kid)
    if not jose.ed25519_matches(public, jose.signing_input_of(token), signature):
        raise SignatureInvalid("Ed25519 signature mismatch")
    _check_window(claims, now, skew)
    if claims.aud != expected_audience:
        raise AudienceMismatch(f"token aud {claims.aud!r} != {expected_audience!r}")
    allowed = trust.audiences.get(claims.iss, ())
    if allowed and claims.aud not in allowed:
        raise AudienceMismatch(f"audience {claims.aud!r} not allowed for issuer")
    granted = frozenset(claims.scope or ())
    missing = sorted(set(required_scopes) - granted)
    if missing:
        raise InsufficientScope(f"missing scopes: {' '.join(missing)}")
    return VerifiedCapability(
        subject=claims.sub,
        issuer=claims.iss,
        granted_scopes=granted,
        kid=header.kid,
        jti=claims.jti,
    )
