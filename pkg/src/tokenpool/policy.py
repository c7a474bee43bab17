"""Per-channel authentication negotiation and the authorization lattice.

Every directed link between two daemon roles is a channel with an ordered
list of acceptable authentication methods and an authorization
requirement (a level for pool-protocol channels, a scope set for
capability-guarded ones).  Token methods are always preferred over
legacy methods during negotiation regardless of how the lists are
ordered.  Authorization decisions are values, not exceptions: a denial
carries the missing rights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import (
    AuthorizationDenied,
    InvalidClaims,
    InvalidPolicy,
    NoCommonMethod,
    ProxyExpired,
    UnmappedIdentity,
    UntrustedCA,
)
from .tokens import (
    SymmetricKeyring,
    TrustDirectory,
    VerifiedCapability,
    VerifiedIdentity,
    verify_idtoken,
    verify_scitoken,
)


class AuthMethod(enum.Enum):
    IDTOKEN = "IDTOKEN"
    SCITOKEN = "SCITOKEN"
    GSI_PROXY = "GSI_PROXY"
    LOCAL_FS = "LOCAL_FS"


TOKEN_METHODS = frozenset({AuthMethod.IDTOKEN, AuthMethod.SCITOKEN})
LEGACY_METHODS = frozenset({AuthMethod.GSI_PROXY, AuthMethod.LOCAL_FS})


class AuthzLevel(enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    ADVERTISE = "ADVERTISE"
    DAEMON = "DAEMON"
    ADMIN = "ADMIN"


#: Generator edges of the privilege order: holding the left level implies
#: every right level.  The full relation is the reflexive-transitive
#: closure of these edges.
_IMPLIES: dict[AuthzLevel, frozenset[AuthzLevel]] = {
    AuthzLevel.ADMIN: frozenset(
        {AuthzLevel.DAEMON, AuthzLevel.WRITE, AuthzLevel.READ, AuthzLevel.ADVERTISE}
    ),
    AuthzLevel.DAEMON: frozenset({AuthzLevel.ADVERTISE}),
}


def _closure(level: AuthzLevel) -> frozenset[AuthzLevel]:
    seen: set[AuthzLevel] = {level}
    frontier = [level]
    while frontier:
        for nxt in _IMPLIES.get(frontier.pop(), ()):  # type: ignore[arg-type]
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return frozenset(seen)


_DOMINATES: dict[AuthzLevel, frozenset[AuthzLevel]] = {lvl: _closure(lvl) for lvl in AuthzLevel}


def dominates(held: AuthzLevel, required: AuthzLevel) -> bool:
    """True if holding ``held`` satisfies a requirement of ``required``."""
    return required in _DOMINATES[held]


def expand_levels(levels: Iterable[AuthzLevel]) -> frozenset[AuthzLevel]:
    """All levels satisfied by holding every level in ``levels``."""
    out: set[AuthzLevel] = set()
    for lvl in levels:
        out |= _DOMINATES[lvl]
    return frozenset(out)


class MigrationPhase(enum.Enum):
    GSI_ONLY = "GSI_ONLY"
    TOKEN_WITH_GSI_FALLBACK = "TOKEN_WITH_GSI_FALLBACK"
    TOKEN_ONLY = "TOKEN_ONLY"


#: Methods a channel may use under each phase.
PHASE_PERMITS: dict[MigrationPhase, frozenset[AuthMethod]] = {
    MigrationPhase.GSI_ONLY: frozenset({AuthMethod.GSI_PROXY, AuthMethod.LOCAL_FS}),
    MigrationPhase.TOKEN_WITH_GSI_FALLBACK: frozenset(AuthMethod),
    MigrationPhase.TOKEN_ONLY: frozenset({AuthMethod.IDTOKEN, AuthMethod.SCITOKEN}),
}


class Role(enum.Enum):
    WMCLIENT = "WMCLIENT"
    SCHEDD = "SCHEDD"
    COLLECTOR = "COLLECTOR"
    NEGOTIATOR = "NEGOTIATOR"
    FRONTEND = "FRONTEND"
    FACTORY = "FACTORY"
    CE = "CE"
    STARTD = "STARTD"
    ISSUER = "ISSUER"


@dataclass(frozen=True)
class Channel:
    src: Role
    dst: Role

    @property
    def label(self) -> str:
        return f"{self.src.value}->{self.dst.value}"


@dataclass(frozen=True)
class ProxyCredential:
    """A legacy X.509 proxy: a DN, an expiry instant, and the signing CA."""

    distinguished_name: str
    expiry: int
    attested_by: str


@dataclass(frozen=True)
class LocalFsCredential:
    """Filesystem-mediated identity: valid only on the verifying host."""

    account: str
    host: str


Credential = str | ProxyCredential | LocalFsCredential


@dataclass(frozen=True)
class ChannelPolicy:
    """What a channel accepts and what it requires once authenticated.

    Exactly one of ``required_level`` / ``required_scopes`` is set.
    """

    methods: tuple[AuthMethod, ...]
    required_level: AuthzLevel | None = None
    required_scopes: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        has_level = self.required_level is not None
        has_scopes = bool(self.required_scopes)
        if has_level == has_scopes:
            raise InvalidPolicy("channel needs exactly one of level / scopes")


@dataclass(frozen=True)
class PolicyTable:
    """Closed-world channel map plus the pool-wide identity map.

    ``identity_map`` rewrites authenticated names to canonical pool
    identities; first match wins.  Patterns are literal or end in a
    single ``*`` wildcard.
    """

    channels: Mapping[Channel, ChannelPolicy]
    identity_map: tuple[tuple[str, str], ...] = ()

    def policy_for(self, channel: Channel) -> ChannelPolicy:
        try:
            return self.channels[channel]
        except KeyError:
            raise InvalidPolicy(f"no policy for channel {channel.label}") from None

    def map_identity(self, raw: str) -> str:
        for pattern, target in self.identity_map:
            if pattern.endswith("*"):
                if raw.startswith(pattern[:-1]):
                    return target
            elif raw == pattern:
                return target
        raise UnmappedIdentity(f"no mapping for {raw!r}")


def validate_table(table: PolicyTable) -> None:
    """Reject method-less channels and malformed identity-map patterns."""
    for channel, pol in table.channels.items():
        if not pol.methods:
            raise InvalidPolicy(f"channel {channel.label} lists no methods")
        if len(set(pol.methods)) != len(pol.methods):
            raise InvalidPolicy(f"channel {channel.label} repeats a method")
    for pattern, _ in table.identity_map:
        if "*" in pattern[:-1]:
            raise InvalidPolicy(f"wildcard only allowed at end: {pattern!r}")
        if not pattern:
            raise InvalidPolicy("empty identity-map pattern")


def negotiate_method(
    offered: Sequence[AuthMethod], accepted: Sequence[AuthMethod]
) -> AuthMethod:
    """Pick the method a client/server pair will use.

    Token methods win over legacy ones no matter how either side orders
    its list; ties break on the server's (``accepted``) order.

    Raises:
        NoCommonMethod: no overlap between the two lists.
    """
    offered_set = set(offered)
    ranked = [m for m in accepted if m in TOKEN_METHODS] + [
        m for m in accepted if m not in TOKEN_METHODS
    ]
    for method in ranked:
        if method in offered_set:
            return method
    raise NoCommonMethod(
        f"offered {[m.value for m in offered]} vs accepted {[m.value for m in accepted]}"
    )


@dataclass(frozen=True)
class AuthenticatedPeer:
    """Outcome of authentication on one channel: who, how, with what rights."""

    canonical_identity: str
    method: AuthMethod
    granted_levels: frozenset[AuthzLevel]
    granted_scopes: frozenset[str] = frozenset()
    subject: str = ""
    token_kid: str | None = None
    token_jti: str | None = None


@dataclass(frozen=True)
class Decision:
    allowed: bool
    missing: tuple[str, ...] = ()


#: Levels granted to peers arriving over legacy methods: the old scheme
#: had no per-token attenuation, a verified peer could do anything its
#: mapped identity could.
_LEGACY_LEVELS = frozenset({AuthzLevel.ADMIN})


def authenticate(
    channel: Channel,
    table: PolicyTable,
    credential: Credential,
    *,
    keyring: SymmetricKeyring | None = None,
    trust: TrustDirectory | None = None,
    trusted_cas: frozenset[str] = frozenset(),
    local_host: str = "",
    expected_audience: str = "",
    now: int = 0,
) -> AuthenticatedPeer:
    """Authenticate one credential on one channel.

    The method is inferred from the credential's shape (token strings by
    algorithm, proxy and filesystem credentials by type) and must appear
    in the channel's accepted list.  The authenticated name is rewritten
    through the identity map.

    Raises:
        NoCommonMethod: the inferred method is not accepted here.
        ProxyExpired, UntrustedCA: legacy proxy failures.
        UnmappedIdentity: no identity-map entry matched.
        TokenError subclasses: token verification failures.
    """
    pol = table.policy_for(channel)

    if isinstance(credential, ProxyCredential):
        _require(AuthMethod.GSI_PROXY, pol, channel)
        if credential.attested_by not in trusted_cas:
            raise UntrustedCA(f"CA {credential.attested_by!r} not trusted")
        if now >= credential.expiry:
            raise ProxyExpired(f"proxy expired at {credential.expiry} (now {now})")
        identity = table.map_identity(credential.distinguished_name)
        return AuthenticatedPeer(
            canonical_identity=identity,
            method=AuthMethod.GSI_PROXY,
            granted_levels=_LEGACY_LEVELS,
            subject=credential.distinguished_name,
        )

    if isinstance(credential, LocalFsCredential):
        _require(AuthMethod.LOCAL_FS, pol, channel)
        if credential.host != local_host:
            raise UntrustedCA(
                f"filesystem credential from {credential.host!r} presented on {local_host!r}"
            )
        identity = table.map_identity(credential.account)
        return AuthenticatedPeer(
            canonical_identity=identity,
            method=AuthMethod.LOCAL_FS,
            granted_levels=_LEGACY_LEVELS,
            subject=credential.account,
        )

    # Token string: flavor decides the method.
    from . import jose

    header, _, _ = jose.decode_token(credential)
    if header.alg == jose.SCITOKEN_ALG:
        _require(AuthMethod.SCITOKEN, pol, channel)
        if trust is None:
            raise InvalidPolicy("capability verification needs a trust directory")
        cap: VerifiedCapability = verify_scitoken(
            credential, trust, expected_audience, pol.required_scopes, now
        )
        identity = table.map_identity(cap.subject)
        return AuthenticatedPeer(
            canonical_identity=identity,
            method=AuthMethod.SCITOKEN,
            granted_levels=frozenset(),
            granted_scopes=cap.granted_scopes,
            subject=cap.subject,
            token_kid=cap.kid,
            token_jti=cap.jti,
        )

    _require(AuthMethod.IDTOKEN, pol, channel)
    if keyring is None:
        raise InvalidPolicy("identity verification needs a keyring")
    ident: VerifiedIdentity = verify_idtoken(credential, keyring, now)
    identity = table.map_identity(ident.subject)
    if ident.authz_limits:
        try:
            levels = frozenset(AuthzLevel(name) for name in ident.authz_limits)
        except ValueError:
            bad = sorted(set(ident.authz_limits) - {l.value for l in AuthzLevel})
            raise InvalidClaims(f"unknown authz limits: {', '.join(bad)}") from None
    else:
        # No limits claim: the token wields its identity's full rights.
        levels = frozenset(AuthzLevel)
    return AuthenticatedPeer(
        canonical_identity=identity,
        method=AuthMethod.IDTOKEN,
        granted_levels=levels,
        subject=ident.subject,
        token_kid=ident.kid,
        token_jti=ident.jti,
    )


def _require(method: AuthMethod, pol: ChannelPolicy, channel: Channel) -> None:
    if method not in pol.methods:
        raise NoCommonMethod(f"{method.value} not accepted on {channel.label}")


def authorize(peer: AuthenticatedPeer, pol: ChannelPolicy) -> Decision:
    """Decide whether an authenticated peer may use the channel.

    Level requirements are satisfied by any held level that dominates
    the requirement.  Scope requirements are satisfied by scope
    coverage, or by a peer holding ADMIN (operators bypass capability
    gates).
    """
    if pol.required_level is not None:
        if any(dominates(h, pol.required_level) for h in peer.granted_levels):
            return Decision(True)
        return Decision(False, (pol.required_level.value,))
    if AuthzLevel.ADMIN in peer.granted_levels:
        return Decision(True)
    missing = tuple(sorted(pol.required_scopes - peer.granted_scopes))
    if missing:
        return Decision(False, missing)
    return Decision(True)


def require_authorized(peer: AuthenticatedPeer, pol: ChannelPolicy) -> None:
    decision = authorize(peer, pol)
    if not decision.allowed:
        raise AuthorizationDenied(f"missing {', '.join(decision.missing)}")


# ---------------------------------------------------------------------------
# The pool's default channel map.

JOB_SUBMIT_SCOPE = "compute.create"


def default_channels() -> dict[Channel, ChannelPolicy]:
    """The six inter-daemon channels of the pool, pre-migration shape:
    tokens listed alongside the legacy method wherever both exist."""
    return {
        Channel(Role.WMCLIENT, Role.SCHEDD): ChannelPolicy(
            (AuthMethod.IDTOKEN, AuthMethod.LOCAL_FS), AuthzLevel.WRITE
        ),
        Channel(Role.SCHEDD, Role.COLLECTOR): ChannelPolicy(
            (AuthMethod.IDTOKEN, AuthMethod.GSI_PROXY), AuthzLevel.ADVERTISE
        ),
        Channel(Role.FRONTEND, Role.ISSUER): ChannelPolicy(
            (AuthMethod.IDTOKEN,), AuthzLevel.READ
        ),
        Channel(Role.FRONTEND, Role.FACTORY): ChannelPolicy(
            (AuthMethod.IDTOKEN, AuthMethod.GSI_PROXY), AuthzLevel.WRITE
        ),
        Channel(Role.FACTORY, Role.CE): ChannelPolicy(
            (AuthMethod.SCITOKEN, AuthMethod.GSI_PROXY),
            required_scopes=frozenset({JOB_SUBMIT_SCOPE}),
        ),
        Channel(Role.STARTD, Role.COLLECTOR): ChannelPolicy(
            (AuthMethod.IDTOKEN, AuthMethod.GSI_PROXY), AuthzLevel.ADVERTISE
        ),
    }


def default_identity_map() -> tuple[tuple[str, str], ...]:
    return (
        ("condor@*", "pool-daemon"),
        ("schedd@*", "pool-daemon"),
        ("startd@*", "pool-daemon"),
        ("factory@*", "pool-daemon"),
        ("frontend@*", "cms-frontend"),
        ("cmsprod*", "cms-prod"),
        ("cms-pilot*", "cms-pilot"),
        ("/DC=ch/DC=cern/OU=computers/CN=*", "pool-daemon"),
        ("/DC=org/DC=cilogon/C=US/O=CMS/CN=Frontend*", "cms-frontend"),
        ("/DC=org/DC=cilogon/C=US/O=CMS/CN=Pilot*", "cms-pilot"),
    )


def default_table() -> PolicyTable:
    table = PolicyTable(default_channels(), default_identity_map())
    validate_table(table)
    return table


def apply_phase(table: PolicyTable, phase: MigrationPhase) -> PolicyTable:
    """Project a channel map through a migration phase.

    GSI_ONLY drops token methods from any channel that still has a
    legacy method (token-only channels are left alone: they have no
    pre-token shape to fall back to).  The fallback phase keeps
    everything but lists tokens first.  TOKEN_ONLY drops the legacy
    methods everywhere; a channel may end up with no methods at all, in
    which case negotiation on it fails until its parties learn tokens.
    """
    permitted = PHASE_PERMITS[phase]
    channels: dict[Channel, ChannelPolicy] = {}
    for channel, pol in table.channels.items():
        if phase is MigrationPhase.GSI_ONLY and not any(
            m in LEGACY_METHODS for m in pol.methods
        ):
            methods = pol.methods
        else:
            methods = tuple(m for m in pol.methods if m in permitted)
        ranked = tuple(m for m in methods if m in TOKEN_METHODS) + tuple(
            m for m in methods if m not in TOKEN_METHODS
        )
        channels[channel] = ChannelPolicy(
            ranked, pol.required_level, pol.required_scopes
        )
    return PolicyTable(channels, table.identity_map)
