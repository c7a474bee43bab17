"""Compact JWT wire format: canonical JSON, base64url, sign and parse.

Two algorithms are supported: HS256 (HMAC-SHA256 over a shared secret,
used for pool identity tokens) and EdDSA (Ed25519, used for issuer-signed
capability tokens).  Claim serialization is canonical -- keys sorted,
no whitespace -- so encoding is byte-deterministic and tokens can be
compared or hashed directly.

Parsing (:func:`decode_token`) is strictly separated from verification:
it rejects malformed structure but accepts unknown algorithms and odd
claim sets, deferring judgement to the verify layer.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519

from .errors import AlgKeyMismatch, InvalidClaims, MalformedToken

IDTOKEN_ALG = "HS256"
SCITOKEN_ALG = "EdDSA"
SUPPORTED_ALGS = (IDTOKEN_ALG, SCITOKEN_ALG)


def b64url_encode(data: bytes) -> str:
    """Base64url without padding."""
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


_B64URL_CHARS = frozenset(
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_"
)


def b64url_decode(segment: str) -> bytes:
    """Strict base64url decode; any character outside the alphabet fails."""
    # validate=True alone is not enough: altchars translates '-_' to '+/'
    # before validation, which would let standard-alphabet input through.
    if not set(segment) <= _B64URL_CHARS:
        raise MalformedToken("segment holds non-base64url characters")
    pad = -len(segment) % 4
    if pad == 3:
        raise MalformedToken("segment length invalid for base64url")
    try:
        return base64.b64decode(segment + "=" * pad, altchars=b"-_", validate=True)
    except (binascii.Error, ValueError) as exc:
        raise MalformedToken(f"bad base64url segment: {exc}") from exc


def canonical_json(obj: dict) -> str:
    """Canonical serialization: sorted keys, no whitespace, ASCII escapes."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class TokenHeader:
    """JOSE header. ``alg`` is carried verbatim; unsupported values are
    only rejected at verification time, never at parse time."""

    alg: str
    kid: str
    typ: str = "JWT"

    def to_json_dict(self) -> dict:
        return {"alg": self.alg, "kid": self.kid, "typ": self.typ}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TokenHeader":
        return cls(
            alg=str(obj.get("alg", "")),
            kid=str(obj.get("kid", "")),
            typ=str(obj.get("typ", "")),
        )


@dataclass(frozen=True)
class TokenClaims:
    """Claim set for both token flavors.

    ``authz_limits`` marks an identity token (empty tuple = unlimited);
    ``scope`` marks a capability token.  ``None`` means the claim is
    absent from the serialized form.  Construction does not validate;
    call :meth:`validate` (encode does) so that decode can represent
    arbitrary parsed claim sets.
    """

    sub: str = ""
    iss: str | None = None
    aud: str | None = None
    iat: int = 0
    exp: int = 0
    jti: str = ""
    scope: tuple[str, ...] | None = None
    authz_limits: tuple[str, ...] | None = None

    def validate(self) -> None:
        """Raise InvalidClaims on any mint-time invariant violation."""
        if not self.sub:
            raise InvalidClaims("sub must be non-empty")
        if not self.jti:
            raise InvalidClaims("jti must be non-empty")
        if self.exp <= self.iat:
            raise InvalidClaims(f"exp ({self.exp}) must be > iat ({self.iat})")
        if self.scope is not None and self.authz_limits is not None:
            raise InvalidClaims("scope and authz_limits are mutually exclusive")
        if self.scope is not None:
            if not self.scope:
                raise InvalidClaims("scope must be non-empty")
            if not self.aud:
                raise InvalidClaims("capability tokens require an audience")

    def to_json_dict(self) -> dict:
        out: dict = {}
        if self.iss is not None:
            out["iss"] = self.iss
        if self.sub:
            out["sub"] = self.sub
        if self.aud is not None:
            out["aud"] = self.aud
        out["iat"] = self.iat
        out["exp"] = self.exp
        if self.jti:
            out["jti"] = self.jti
        if self.scope is not None:
            out["scope"] = " ".join(self.scope)
        if self.authz_limits is not None:
            out["authz_limits"] = sorted(self.authz_limits)
        return out

    @classmethod
    def from_json_dict(cls, obj: dict) -> "TokenClaims":
        scope = obj.get("scope")
        limits = obj.get("authz_limits")
        return cls(
            sub=str(obj.get("sub", "")),
            iss=str(obj["iss"]) if "iss" in obj else None,
            aud=str(obj["aud"]) if "aud" in obj else None,
            iat=int(obj.get("iat", 0)),
            exp=int(obj.get("exp", 0)),
            jti=str(obj.get("jti", "")),
            scope=tuple(str(scope).split()) if scope is not None else None,
            authz_limits=tuple(sorted(str(x) for x in limits))
            if limits is not None
            else None,
        )

    @property
    def is_idtoken(self) -> bool:
        return self.scope is None

    @property
    def is_scitoken(self) -> bool:
        return self.scope is not None and self.authz_limits is None


SigningKey = bytes | ed25519.Ed25519PrivateKey


def _sign(alg: str, key: SigningKey, signing_input: bytes) -> bytes:
    if alg == IDTOKEN_ALG:
        if not isinstance(key, bytes):
            raise AlgKeyMismatch(f"{alg} requires a symmetric secret")
        return hmac.new(key, signing_input, hashlib.sha256).digest()
    if alg == SCITOKEN_ALG:
        if not isinstance(key, ed25519.Ed25519PrivateKey):
            raise AlgKeyMismatch(f"{alg} requires an Ed25519 private key")
        return key.sign(signing_input)
    raise AlgKeyMismatch(f"unsupported algorithm {alg!r}")


def encode_token(header: TokenHeader, claims: TokenClaims, key: SigningKey) -> str:
    """Serialize and sign a token.

    Output is ``b64url(header) . b64url(claims) . b64url(signature)`` with
    canonical JSON in the first two segments; identical inputs always
    produce identical bytes.

    Raises:
        InvalidClaims: claim invariants violated.
        AlgKeyMismatch: key kind does not fit ``header.alg``.
    """
    if not header.kid:
        raise InvalidClaims("header kid must be non-empty")
    claims.validate()
    signing_input = (
        b64url_encode(canonical_json(header.to_json_dict()).encode())
        + "."
        + b64url_encode(canonical_json(claims.to_json_dict()).encode())
    )
    signature = _sign(header.alg, key, signing_input.encode("ascii"))
    return signing_input + "." + b64url_encode(signature)


def decode_token(token: str) -> tuple[TokenHeader, TokenClaims, bytes]:
    """Parse a compact token without verifying anything.

    Rejects structural problems only: wrong segment count, bad base64url,
    bad JSON, non-object JSON.  Unknown algorithms parse fine.

    Raises:
        MalformedToken
    """
    parts = token.split(".")
    if len(parts) != 3:
        raise MalformedToken(f"expected 3 segments, got {len(parts)}")
    header_b64, claims_b64, sig_b64 = parts
    header_obj = _parse_json_object(header_b64, "header")
    claims_obj = _parse_json_object(claims_b64, "claims")
    signature = b64url_decode(sig_b64)
    try:
        header = TokenHeader.from_json_dict(header_obj)
        claims = TokenClaims.from_json_dict(claims_obj)
    except (TypeError, ValueError) as exc:
        raise MalformedToken(f"claim values have wrong types: {exc}") from exc
    return header, claims, signature


def signing_input_of(token: str) -> bytes:
    """The byte string covered by the signature: first two raw segments."""
    head, _, _ = token.rpartition(".")
    return head.encode("ascii")


def hs256_signature(secret: bytes, signing_input: bytes) -> bytes:
    return hmac.new(secret, signing_input, hashlib.sha256).digest()


def hs256_matches(secret: bytes, signing_input: bytes, signature: bytes) -> bool:
    return hmac.compare_digest(hs256_signature(secret, signing_input), signature)


def ed25519_matches(public_key_bytes: bytes, signing_input: bytes, signature: bytes) -> bool:
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(public_key_bytes)
        key.verify(signature, signing_input)
        return True
    except (InvalidSignature, ValueError):
        return False


def _parse_json_object(segment: str, what: str) -> dict:
    raw = b64url_decode(segment)
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedToken(f"bad {what} JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedToken(f"{what} is not a JSON object")
    return obj
