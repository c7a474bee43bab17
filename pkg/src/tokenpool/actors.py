"""The pool's daemons as deterministic state machines over the engine.

One World object owns the clock, RNG streams, trace, fault board,
keyring, trust directory, and every actor.  Requests (submit, advertise,
token fetch, provisioning, gateway submission, join, keepalive) are
authenticated; responses ride the requester's already-authenticated
session and are not separately checked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from . import jose
from .errors import (
    AuthorizationDenied,
    MismatchedCredential,
    TokenPoolError,
    UnauthorizedRequestor,
)
from .policy import (
    JOB_SUBMIT_SCOPE,
    AuthenticatedPeer,
    AuthMethod,
    Channel,
    LocalFsCredential,
    MigrationPhase,
    ProxyCredential,
    Role,
    apply_phase,
    authenticate,
    authorize,
    default_table,
    negotiate_method,
)
from .errors import NoCommonMethod
from .scenario import CEFlavor, CEInterface, CESpec, ClientSpec, FactorySpec, Scenario
from .simnet import (
    Engine,
    Fault,
    FaultBoard,
    FaultKind,
    OUTCOME_DENIED,
    OUTCOME_DROP,
    OUTCOME_SUCCESS,
    RngStreams,
    Trace,
    TRACE_JOB,
    TRACE_PILOT,
    TRACE_PLAN,
    TRACE_POOL,
    fail_outcome,
    message_dropped,
)
from .tokens import (
    IssuerKey,
    KeyStatus,
    SymmetricKeyring,
    TrustDirectory,
    mint_idtoken,
    mint_scitoken,
    revoke_key,
    rotate_key,
)

CH_SUBMIT = Channel(Role.WMCLIENT, Role.SCHEDD)
CH_ADVERTISE = Channel(Role.SCHEDD, Role.COLLECTOR)
CH_TOKEN_FETCH = Channel(Role.FRONTEND, Role.ISSUER)
CH_PROVISION = Channel(Role.FRONTEND, Role.FACTORY)
CH_CE_SUBMIT = Channel(Role.FACTORY, Role.CE)
CH_JOIN = Channel(Role.STARTD, Role.COLLECTOR)

AUTH_CHANNELS = (
    CH_SUBMIT,
    CH_ADVERTISE,
    CH_TOKEN_FETCH,
    CH_PROVISION,
    CH_CE_SUBMIT,
    CH_JOIN,
)
AUTH_CHANNEL_LABELS = tuple(c.label for c in AUTH_CHANNELS)

DAEMON_TOKEN_LIFETIME = 86400


class PilotState(enum.Enum):
    REQUESTED = "REQUESTED"
    SUBMITTED = "SUBMITTED"
    STARTED = "STARTED"
    JOINED = "JOINED"
    MATCHED = "MATCHED"
    RETIRED = "RETIRED"
    FAILED = "FAILED"


#: States in which a pilot is still promised capacity the pool can count on.
PILOT_SUPPLY_STATES = frozenset(
    {PilotState.REQUESTED, PilotState.SUBMITTED, PilotState.STARTED, PilotState.JOINED}
)
PILOT_TERMINAL_STATES = frozenset({PilotState.RETIRED, PilotState.FAILED})


class JobState(enum.Enum):
    IDLE = "IDLE"
    RUNNING = "RUNNING"
    DONE = "DONE"


@dataclass
class Pilot:
    id: str
    ce_id: str
    site: str
    state: PilotState
    requested_at: int
    kid: str = ""
    token: str = ""
    submitted_at: int | None = None
    joined_at: int | None = None
    job_id: str | None = None
    slot_held: bool = False


@dataclass
class Job:
    id: str
    client: str
    duration: int
    submitted_at: int
    state: JobState = JobState.IDLE
    pilot_id: str | None = None


class SubmitOutcome(enum.Enum):
    ACCEPTED = "ACCEPTED"
    AUTH_REJECTED = "AUTH_REJECTED"
    FULL = "FULL"


def _join_detail(*parts: str) -> str:
    return " ".join(p for p in parts if p)


def _method_name(credential: object) -> str:
    """Best-effort method label for failure records (never verifies)."""
    if isinstance(credential, ProxyCredential):
        return AuthMethod.GSI_PROXY.value
    if isinstance(credential, LocalFsCredential):
        return AuthMethod.LOCAL_FS.value
    if isinstance(credential, str):
        try:
            header, _, _ = jose.decode_token(credential)
        except TokenPoolError:
            return "-"
        if header.alg == jose.SCITOKEN_ALG:
            return AuthMethod.SCITOKEN.value
        return AuthMethod.IDTOKEN.value
    return "-"


class World:
    """Everything one run owns: clock, randomness, trust, actors, ledger."""

    SCHEDD_HOST = "schedd.cmspool"
    CA = "cms-ca"
    POOL_ISSUER = "cmspool"

    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.engine = Engine()
        self.streams = RngStreams(scenario.seed)
        self.trace = Trace()
        self.board = FaultBoard()
        self.phase = scenario.phase

        secrets_by_kid = {
            k.kid: self.streams.stream(f"key/{k.kid}").randbytes(32)
            for k in scenario.keys
        }
        self.keyring = SymmetricKeyring.from_secrets(secrets_by_kid)
        self.daemon_kid = next(k.kid for k in scenario.keys if k.purpose == "daemon")
        self.startd_kids = [k.kid for k in scenario.keys if k.purpose == "startd"]
        self.startd_rr = 0

        self.issuer_key = IssuerKey.generate(
            scenario.issuer.kid, seed=self.streams.stream("issuer-key").randbytes(32)
        )
        self.trust = TrustDirectory.single_issuer(scenario.issuer.url, self.issuer_key)
        self.trusted_cas = frozenset({self.CA})

        self.base_table = default_table()
        self.active_table = apply_phase(self.base_table, self.phase)

        self._used_jtis: dict[str, set[str]] = {}
        self._pilot_seq = 0
        self._job_seq = 0
        self.pilots: dict[str, Pilot] = {}
        self.jobs: list[Job] = []
        self.jobs_by_id: dict[str, Job] = {}

        self.issuer = TokenIssuer(self)
        self.collector = Collector(self)
        self.schedd = Schedd(self)
        self.frontend = Frontend(self)
        self.ces = {spec.id: CEGateway(self, spec) for spec in scenario.ces}
        self.factories = {spec.id: Factory(self, spec) for spec in scenario.factories}
        self.clients = {spec.id: WMClient(self, spec) for spec in scenario.clients}
        self.controller = MigrationController(self)

    # -- identity and key helpers ------------------------------------------

    def next_jti(self, authority: str) -> str:
        used = self._used_jtis.setdefault(authority, set())
        rng = self.streams.stream(f"jti/{authority}")
        while True:
            jti = f"{rng.getrandbits(64):016x}"
            if jti not in used:
                used.add(jti)
                return jti

    def mint_daemon_idtoken(
        self, subject: str, limits: tuple[str, ...], kid: str | None = None
    ) -> str:
        return mint_idtoken(
            self.keyring,
            kid if kid is not None else self.daemon_kid,
            subject,
            limits,
            DAEMON_TOKEN_LIFETIME,
            self.engine.now,
            issuer=self.POOL_ISSUER,
            jti=self.next_jti("pool"),
        )

    def mint_startd_token(self, pilot_id: str) -> tuple[str, str]:
        """Pick the next ACTIVE worker key round-robin and mint the
        identity token the pilot will carry to the collector."""
        kid = self.startd_kids[self.startd_rr % len(self.startd_kids)]
        self.startd_rr += 1
        token = mint_idtoken(
            self.keyring,
            kid,
            f"startd@{pilot_id}",
            ("ADVERTISE",),
            self.scenario.pilots.token_lifetime,
            self.engine.now,
            issuer=self.POOL_ISSUER,
            jti=self.next_jti("pool"),
        )
        return kid, token

    # -- authenticated requests --------------------------------------------

    def authenticate_on(
        self, channel: Channel, credential: object, *, audience: str = "", detail: str = ""
    ) -> AuthenticatedPeer:
        """Authenticate + authorize one request, recording the outcome.

        Raises the underlying failure after recording it, so callers
        decide retry/fallback while the trace stays complete.
        """
        pol = self.active_table.policy_for(channel)
        now = self.engine.now
        try:
            peer = authenticate(
                channel,
                self.active_table,
                credential,  # type: ignore[arg-type]
                keyring=self.keyring,
                trust=self.trust,
                trusted_cas=self.trusted_cas,
                local_host=self.SCHEDD_HOST,
                expected_audience=audience,
                now=now,
            )
        except TokenPoolError as exc:
            self.trace.record(
                now,
                channel.label,
                fail_outcome(exc.reason),
                method=_method_name(credential),
                detail=detail,
            )
            raise
        decision = authorize(peer, pol)
        if not decision.allowed:
            self.trace.record(
                now,
                channel.label,
                OUTCOME_DENIED,
                method=peer.method.value,
                identity=peer.canonical_identity,
                detail=_join_detail(detail, f"missing={','.join(decision.missing)}"),
            )
            raise AuthorizationDenied(f"missing {', '.join(decision.missing)}")
        extra = ""
        if peer.token_kid is not None:
            extra = f"kid={peer.token_kid} jti={peer.token_jti}"
        self.trace.record(
            now,
            channel.label,
            OUTCOME_SUCCESS,
            method=peer.method.value,
            identity=peer.canonical_identity,
            detail=_join_detail(detail, extra),
        )
        return peer

    # -- phase control ------------------------------------------------------

    def set_phase(self, phase: MigrationPhase) -> None:
        self.phase = phase
        self.active_table = apply_phase(self.base_table, phase)
        self.trace.record(
            self.engine.now, TRACE_PLAN, "PHASE", detail=f"phase={phase.value}"
        )

    # -- pilot / job ledger -------------------------------------------------

    def new_pilot(self, ce: "CEGateway") -> Pilot:
        pid = f"pilot-{self._pilot_seq:05d}"
        self._pilot_seq += 1
        pilot = Pilot(
            id=pid,
            ce_id=ce.id,
            site=ce.site,
            state=PilotState.REQUESTED,
            requested_at=self.engine.now,
        )
        self.pilots[pid] = pilot
        self.trace.record(
            self.engine.now,
            TRACE_PILOT,
            PilotState.REQUESTED.value,
            detail=f"pilot={pid} ce={ce.id}",
        )
        return pilot

    def pilot_event(self, pilot: Pilot, state: PilotState, extra: str = "") -> None:
        pilot.state = state
        self.trace.record(
            self.engine.now,
            TRACE_PILOT,
            state.value,
            detail=_join_detail(f"pilot={pilot.id} ce={pilot.ce_id}", extra),
        )

    def new_job(self, spec: ClientSpec) -> Job:
        jid = f"job-{self._job_seq:05d}"
        self._job_seq += 1
        job = Job(
            id=jid, client=spec.id, duration=spec.duration, submitted_at=self.engine.now
        )
        self.jobs.append(job)
        self.jobs_by_id[jid] = job
        return job

    def release_slot(self, pilot: Pilot) -> None:
        if pilot.slot_held:
            self.ces[pilot.ce_id].reserved -= 1
            pilot.slot_held = False

    def requeue_job(self, pilot: Pilot) -> None:
        if pilot.job_id is None:
            return
        job = self.jobs_by_id[pilot.job_id]
        if job.state is JobState.RUNNING and job.pilot_id == pilot.id:
            job.state = JobState.IDLE
            job.pilot_id = None
            self.trace.record(
                self.engine.now,
                TRACE_JOB,
                "REQUEUE",
                detail=f"job={job.id} pilot={pilot.id}",
            )
        pilot.job_id = None

    def fail_pilot(self, pilot: Pilot, reason: str) -> None:
        if pilot.state in PILOT_TERMINAL_STATES:
            return
        self.release_slot(pilot)
        self.requeue_job(pilot)
        self.collector.members.pop(pilot.id, None)
        self.pilot_event(pilot, PilotState.FAILED, f"reason={reason}")

    def factory_serving(self, ce_id: str) -> "Factory | None":
        for factory in self.factories.values():
            if not factory.entries or ce_id in factory.entries:
                return factory
        return None

    # -- run ---------------------------------------------------------------

    def start(self) -> None:
        """Record the starting phase, arm faults and plan, seed the loops."""
        self.trace.record(0, TRACE_PLAN, "PHASE", detail=f"phase={self.phase.value}")
        self.controller.wire_faults()
        self.controller.schedule_plan()
        for client in self.clients.values():
            self.engine.schedule_at(client.spec.submit_at, client.try_submit)
        self.engine.schedule_at(0, self.schedd.advertise)
        self.engine.schedule_at(0, self.collector.match_tick)
        self.engine.schedule_at(0, self.frontend.cycle)


class TokenIssuer:
    """Hands out gateway-scoped capability tokens to authorized callers."""

    AUTHORIZED = frozenset({"cms-frontend"})

    def __init__(self, world: World) -> None:
        self.world = world

    def fetch_capability(self, requester_credential: object, ce_id: str) -> str:
        w = self.world
        peer = w.authenticate_on(
            CH_TOKEN_FETCH, requester_credential, detail=f"aud={ce_id}"
        )
        if peer.canonical_identity not in self.AUTHORIZED:
            w.trace.record(
                w.engine.now,
                CH_TOKEN_FETCH.label,
                fail_outcome("UnauthorizedRequestor"),
                method=peer.method.value,
                identity=peer.canonical_identity,
                detail=f"aud={ce_id}",
            )
            raise UnauthorizedRequestor(
                f"{peer.canonical_identity!r} may not request capability tokens"
            )
        return mint_scitoken(
            w.issuer_key,
            w.scenario.issuer.url,
            "cms-pilot-ops",
            (JOB_SUBMIT_SCOPE,),
            ce_id,
            w.scenario.issuer.scitoken_lifetime,
            w.engine.now,
            jti=w.next_jti("issuer"),
        )


class WMClient:
    """A workload-management agent: submits one batch, retries on failure."""

    def __init__(self, world: World, spec: ClientSpec) -> None:
        self.world = world
        self.spec = spec
        self.submitted = False
        self.token: str | None = None
        if AuthMethod.IDTOKEN in spec.methods:
            self.token = world.mint_daemon_idtoken(spec.id, ("WRITE",))

    def offered_methods(self) -> list[AuthMethod]:
        out: list[AuthMethod] = []
        if self.token is not None:
            out.append(AuthMethod.IDTOKEN)
        if AuthMethod.LOCAL_FS in self.spec.methods:
            out.append(AuthMethod.LOCAL_FS)
        return out

    def try_submit(self) -> None:
        if self.submitted:
            return
        w = self.world
        now = w.engine.now
        accepted = w.active_table.policy_for(CH_SUBMIT).methods
        batch = f"client={self.spec.id} jobs={self.spec.jobs}"
        try:
            method = negotiate_method(self.offered_methods(), accepted)
        except NoCommonMethod:
            w.trace.record(
                now,
                CH_SUBMIT.label,
                fail_outcome("NoCommonMethod"),
                identity=self.spec.id,
                detail=batch,
            )
            w.engine.schedule(self.spec.retry_interval, self.try_submit)
            return
        credential: object
        if method is AuthMethod.IDTOKEN:
            credential = self.token
        else:
            credential = LocalFsCredential(self.spec.id, World.SCHEDD_HOST)
        try:
            peer = w.authenticate_on(CH_SUBMIT, credential, detail=batch)
        except TokenPoolError:
            w.engine.schedule(self.spec.retry_interval, self.try_submit)
            return
        self.submitted = True
        w.schedd.accept_jobs(self.spec, peer)


class Schedd:
    """Queues jobs and advertises itself to the collector every cycle."""

    def __init__(self, world: World) -> None:
        self.world = world
        self.token = world.mint_daemon_idtoken("schedd@cmspool", ("ADVERTISE",))
        self.proxy = ProxyCredential(
            "/DC=ch/DC=cern/OU=computers/CN=schedd.cmspool", 10**9, World.CA
        )

    def accept_jobs(self, spec: ClientSpec, peer: AuthenticatedPeer) -> None:
        w = self.world
        for _ in range(spec.jobs):
            w.new_job(spec)
        w.trace.record(
            w.engine.now,
            TRACE_JOB,
            "QUEUED",
            identity=peer.canonical_identity,
            detail=f"client={spec.id} count={spec.jobs}",
        )

    def advertise(self) -> None:
        w = self.world
        now = w.engine.now
        accepted = w.active_table.policy_for(CH_ADVERTISE).methods
        try:
            method = negotiate_method(
                (AuthMethod.IDTOKEN, AuthMethod.GSI_PROXY), accepted
            )
        except NoCommonMethod:
            w.trace.record(
                now,
                CH_ADVERTISE.label,
                fail_outcome("NoCommonMethod"),
                detail="daemon=schedd",
            )
        else:
            if message_dropped(w.board, w.streams, CH_ADVERTISE.label, now):
                w.trace.record(
                    now,
                    CH_ADVERTISE.label,
                    OUTCOME_DROP,
                    method=method.value,
                    detail="daemon=schedd",
                )
            else:
                credential = self.token if method is AuthMethod.IDTOKEN else self.proxy
                try:
                    w.authenticate_on(CH_ADVERTISE, credential, detail="daemon=schedd")
                except TokenPoolError:
                    pass
        w.engine.schedule(w.scenario.frontend.cycle, self.advertise)


class Collector:
    """Pool membership: joins, keepalives, matchmaking, evictions."""

    def __init__(self, world: World) -> None:
        self.world = world
        self.members: dict[str, Pilot] = {}

    def receive_join(self, pilot: Pilot) -> None:
        w = self.world
        if pilot.state is not PilotState.STARTED:
            return
        now = w.engine.now
        if message_dropped(w.board, w.streams, CH_JOIN.label, now):
            w.trace.record(
                now,
                CH_JOIN.label,
                OUTCOME_DROP,
                method=AuthMethod.IDTOKEN.value,
                detail=f"pilot={pilot.id} join=1",
            )
            w.engine.schedule(
                w.scenario.pilots.keepalive, lambda p=pilot: self.receive_join(p)
            )
            return
        try:
            w.authenticate_on(CH_JOIN, pilot.token, detail=f"pilot={pilot.id} join=1")
        except TokenPoolError as exc:
            w.fail_pilot(pilot, exc.reason)
            return
        pilot.joined_at = now
        w.pilot_event(pilot, PilotState.JOINED, f"kid={pilot.kid}")
        self.members[pilot.id] = pilot
        w.engine.schedule(w.scenario.pilots.keepalive, lambda p=pilot: self.keepalive(p))
        w.engine.schedule(
            w.scenario.frontend.pilot_max_idle, lambda p=pilot: self.idle_check(p)
        )

    def keepalive(self, pilot: Pilot) -> None:
        w = self.world
        if pilot.state not in (PilotState.JOINED, PilotState.MATCHED):
            return
        now = w.engine.now
        if message_dropped(w.board, w.streams, CH_JOIN.label, now):
            w.trace.record(
                now,
                CH_JOIN.label,
                OUTCOME_DROP,
                method=AuthMethod.IDTOKEN.value,
                detail=f"pilot={pilot.id} keepalive=1",
            )
        else:
            try:
                w.authenticate_on(
                    CH_JOIN, pilot.token, detail=f"pilot={pilot.id} keepalive=1"
                )
            except TokenPoolError as exc:
                self.evict(pilot, exc.reason)
                return
        w.engine.schedule(w.scenario.pilots.keepalive, lambda p=pilot: self.keepalive(p))

    def evict(self, pilot: Pilot, reason: str) -> None:
        w = self.world
        self.members.pop(pilot.id, None)
        w.release_slot(pilot)
        w.requeue_job(pilot)
        pilot.state = PilotState.FAILED
        w.trace.record(
            w.engine.now,
            TRACE_PILOT,
            "EVICT",
            detail=f"pilot={pilot.id} ce={pilot.ce_id} kid={pilot.kid} reason={reason}",
        )

    def evict_by_kid(self, kid: str) -> list[Pilot]:
        hit = [p for p in self.members.values() if p.kid == kid]
        for pilot in hit:
            self.evict(pilot, "KeyCompromise")
        return hit

    def idle_check(self, pilot: Pilot) -> None:
        if pilot.state is not PilotState.JOINED:
            return
        w = self.world
        self.members.pop(pilot.id, None)
        w.release_slot(pilot)
        w.pilot_event(pilot, PilotState.RETIRED, "reason=idle")

    def match_tick(self) -> None:
        w = self.world
        now = w.engine.now
        idle_pilots = sorted(
            (p for p in self.members.values() if p.state is PilotState.JOINED),
            key=lambda p: (p.joined_at, p.id),
        )
        idle_jobs = [j for j in w.jobs if j.state is JobState.IDLE]
        for pilot, job in zip(idle_pilots, idle_jobs):
            pilot.state = PilotState.MATCHED
            pilot.job_id = job.id
            job.state = JobState.RUNNING
            job.pilot_id = pilot.id
            w.trace.record(
                now, TRACE_JOB, "MATCH", detail=f"job={job.id} pilot={pilot.id}"
            )
            w.engine.schedule(job.duration, lambda j=job, p=pilot: self.job_done(j, p))
        joined = sum(1 for p in self.members.values() if p.state is PilotState.JOINED)
        w.trace.record(
            now,
            TRACE_POOL,
            "SAMPLE",
            detail=f"joined={joined} matched={len(self.members) - joined} size={len(self.members)}",
        )
        w.engine.schedule(w.scenario.frontend.match_interval, self.match_tick)

    def job_done(self, job: Job, pilot: Pilot) -> None:
        if job.state is not JobState.RUNNING or job.pilot_id != pilot.id:
            return
        w = self.world
        job.state = JobState.DONE
        w.trace.record(
            w.engine.now, TRACE_JOB, "DONE", detail=f"job={job.id} pilot={pilot.id}"
        )
        self.members.pop(pilot.id, None)
        w.release_slot(pilot)
        pilot.job_id = None
        w.pilot_event(pilot, PilotState.RETIRED, f"job={job.id}")


class Frontend:
    """Watches demand, keeps capability tokens fresh, requests pilots."""

    def __init__(self, world: World) -> None:
        self.world = world
        self.subject = "frontend@cmspool"
        self.token = world.mint_daemon_idtoken(self.subject, ("READ", "WRITE"))
        self.proxy = ProxyCredential(
            "/DC=org/DC=cilogon/C=US/O=CMS/CN=Frontend/cms", 10**9, World.CA
        )
        #: gateway id -> (token, issued_at, expires_at)
        self.scitokens: dict[str, tuple[str, int, int]] = {}

    def refresh_capabilities(self) -> None:
        w = self.world
        if w.phase is MigrationPhase.GSI_ONLY:
            return
        now = w.engine.now
        lifetime = w.scenario.issuer.scitoken_lifetime
        for ce in w.ces.values():
            if not ce.accepts_tokens:
                continue
            cached = self.scitokens.get(ce.id)
            if cached is not None and now - cached[1] < int(0.8 * lifetime):
                continue
            try:
                token = w.issuer.fetch_capability(self.token, ce.id)
            except TokenPoolError:
                continue
            self.scitokens[ce.id] = (token, now, now + lifetime)

    def capability_for(self, ce_id: str) -> str | None:
        cached = self.scitokens.get(ce_id)
        if cached is None or self.world.engine.now >= cached[2]:
            return None
        return cached[0]

    def factory_credential(self) -> object | None:
        w = self.world
        accepted = w.active_table.policy_for(CH_PROVISION).methods
        try:
            method = negotiate_method(
                (AuthMethod.IDTOKEN, AuthMethod.GSI_PROXY), accepted
            )
        except NoCommonMethod:
            return None
        return self.token if method is AuthMethod.IDTOKEN else self.proxy

    def provision_pairs(self) -> list[tuple["Factory", "CEGateway"]]:
        w = self.world
        pairs: list[tuple[Factory, CEGateway]] = []
        for factory in w.factories.values():
            entries = factory.entries or tuple(w.ces)
            pairs.extend((factory, w.ces[ce_id]) for ce_id in entries)
        return pairs

    def cycle(self) -> None:
        w = self.world
        self.refresh_capabilities()
        idle = sum(1 for j in w.jobs if j.state is JobState.IDLE)
        supply = sum(
            1 for p in w.pilots.values() if p.state in PILOT_SUPPLY_STATES
        )
        deficit = max(0, idle - supply)
        if deficit > 0:
            credential = self.factory_credential()
            if credential is None:
                w.trace.record(
                    w.engine.now,
                    CH_PROVISION.label,
                    fail_outcome("NoCommonMethod"),
                    identity=self.subject,
                    detail=f"deficit={deficit}",
                )
            else:
                pairs = self.provision_pairs()
                for (factory, ce), count in self._allocate(deficit, len(pairs), pairs):
                    factory.handle_request(credential, ce, count)
        w.engine.schedule(w.scenario.frontend.cycle, self.cycle)

    def _allocate(
        self,
        deficit: int,
        n_pairs: int,
        pairs: list[tuple["Factory", "CEGateway"]],
    ) -> list[tuple[tuple["Factory", "CEGateway"], int]]:
        """Spread demand one pilot at a time across every factory/gateway
        pair, each capped per cycle, so no entry starves while another
        still has headroom."""
        cap = self.world.scenario.frontend.per_entry_cap
        counts = [0] * n_pairs
        idx = 0
        misses = 0
        while deficit > 0 and misses < n_pairs:
            slot = idx % n_pairs
            if counts[slot] < cap:
                counts[slot] += 1
                deficit -= 1
                misses = 0
            else:
                misses += 1
            idx += 1
        return [(pairs[i], counts[i]) for i in range(n_pairs) if counts[i]]


class Factory:
    """Turns frontend pressure into gateway submissions."""

    def __init__(self, world: World, spec: FactorySpec) -> None:
        self.world = world
        self.id = spec.id
        self.condor_major = spec.condor_major
        self.rest_adopted = spec.rest_adopted
        self.token_capable = spec.token_capable
        self.entries = spec.entries
        self.pilot_proxy = ProxyCredential(
            "/DC=org/DC=cilogon/C=US/O=CMS/CN=Pilot/cms", 10**9, World.CA
        )

    def handle_request(self, frontend_credential: object, ce: "CEGateway", count: int) -> None:
        w = self.world
        try:
            w.authenticate_on(
                CH_PROVISION,
                frontend_credential,
                detail=f"factory={self.id} ce={ce.id} pilots={count}",
            )
        except TokenPoolError:
            return
        for _ in range(count):
            self.submit_one(ce)

    def select_interface(self, ce: "CEGateway") -> CEInterface | None:
        """Pick the submission interface, or None when only the retired
        legacy path would remain."""
        if ce.flavor is CEFlavor.HTCONDOR_CE:
            return CEInterface.NATIVE
        if self.rest_adopted and ce.interface is CEInterface.REST:
            return CEInterface.REST
        if self.condor_major >= 10:
            return None
        return CEInterface.LDAP

    def select_credential(self, ce: "CEGateway") -> tuple[object, AuthMethod]:
        w = self.world
        pol = w.active_table.policy_for(CH_CE_SUBMIT)
        if (
            AuthMethod.SCITOKEN in pol.methods
            and self.token_capable
            and ce.accepts_tokens
        ):
            token = w.frontend.capability_for(ce.id)
            if token is not None:
                return token, AuthMethod.SCITOKEN
        if AuthMethod.GSI_PROXY in pol.methods:
            return self.pilot_proxy, AuthMethod.GSI_PROXY
        raise MismatchedCredential(
            f"no credential for {ce.id} under phase {w.phase.value}"
        )

    def proxy_fallback_allowed(self) -> bool:
        pol = self.world.active_table.policy_for(CH_CE_SUBMIT)
        return AuthMethod.GSI_PROXY in pol.methods

    def submit_one(self, ce: "CEGateway") -> Pilot:
        w = self.world
        now = w.engine.now
        pilot = w.new_pilot(ce)
        interface = self.select_interface(ce)
        if interface is None:
            w.trace.record(
                now,
                CH_CE_SUBMIT.label,
                fail_outcome("DeprecatedInterface"),
                detail=f"factory={self.id} ce={ce.id} pilot={pilot.id}",
            )
            w.fail_pilot(pilot, "DeprecatedInterface")
            return pilot
        try:
            credential, method = self.select_credential(ce)
        except MismatchedCredential:
            w.trace.record(
                now,
                CH_CE_SUBMIT.label,
                fail_outcome("MismatchedCredential"),
                detail=f"factory={self.id} ce={ce.id} pilot={pilot.id}",
            )
            w.fail_pilot(pilot, "MismatchedCredential")
            return pilot
        pilot.kid, pilot.token = w.mint_startd_token(pilot.id)
        outcome = ce.receive_submission(pilot, credential, interface)
        if (
            outcome is SubmitOutcome.AUTH_REJECTED
            and method is AuthMethod.SCITOKEN
            and self.proxy_fallback_allowed()
        ):
            outcome = ce.receive_submission(pilot, self.pilot_proxy, interface)
        if outcome is SubmitOutcome.AUTH_REJECTED:
            w.fail_pilot(pilot, "AuthRejected")
        elif outcome is SubmitOutcome.FULL:
            w.fail_pilot(pilot, "CapacityExceeded")
        return pilot


class CEGateway:
    """A site gateway: authenticates submissions, reserves slots, starts
    pilots after the configured delay."""

    def __init__(self, world: World, spec: CESpec) -> None:
        self.world = world
        self.id = spec.id
        self.site = spec.site
        self.flavor = spec.flavor
        self.interface = spec.interface
        self.capacity = spec.capacity
        self.accepts_tokens = spec.accepts_tokens
        self.reserved = 0

    def receive_submission(
        self, pilot: Pilot, credential: object, interface: CEInterface
    ) -> SubmitOutcome:
        w = self.world
        now = w.engine.now
        if isinstance(credential, str) and w.board.active(
            FaultKind.CE_TOKEN_MISCONFIG, self.id, now
        ):
            w.trace.record(
                now,
                CH_CE_SUBMIT.label,
                fail_outcome("UntrustedIssuer"),
                method=AuthMethod.SCITOKEN.value,
                detail=f"ce={self.id} pilot={pilot.id} fault=CE_TOKEN_MISCONFIG",
            )
            return SubmitOutcome.AUTH_REJECTED
        try:
            peer = w.authenticate_on(
                CH_CE_SUBMIT,
                credential,
                audience=self.id,
                detail=f"ce={self.id} pilot={pilot.id} iface={interface.value}",
            )
        except TokenPoolError:
            return SubmitOutcome.AUTH_REJECTED
        if self.reserved >= self.capacity:
            w.trace.record(
                now,
                CH_CE_SUBMIT.label,
                fail_outcome("CapacityExceeded"),
                method=peer.method.value,
                identity=peer.canonical_identity,
                detail=f"ce={self.id} pilot={pilot.id}",
            )
            return SubmitOutcome.FULL
        self.reserved += 1
        pilot.slot_held = True
        pilot.submitted_at = now
        stuck = w.board.active(FaultKind.CE_STUCK_SUBMISSION, self.id, now) is not None
        w.pilot_event(
            pilot,
            PilotState.SUBMITTED,
            _join_detail(f"method={peer.method.value}", "stuck=1" if stuck else ""),
        )
        if stuck:
            return SubmitOutcome.ACCEPTED
        timings = w.scenario.pilots
        w.engine.schedule(
            timings.startup - timings.join_latency,
            lambda p=pilot: self.pilot_started(p),
        )
        w.engine.schedule(
            timings.startup, lambda p=pilot: w.collector.receive_join(p)
        )
        return SubmitOutcome.ACCEPTED

    def pilot_started(self, pilot: Pilot) -> None:
        if pilot.state is PilotState.SUBMITTED:
            self.world.pilot_event(pilot, PilotState.STARTED)


class MigrationController:
    """Executes the timed plan and handles key-compromise response."""

    def __init__(self, world: World) -> None:
        self.world = world

    def known_fault_targets(self) -> set[str]:
        w = self.world
        targets = set(w.ces)
        targets.update(w.keyring.entries)
        targets.update(c.label for c in w.base_table.channels)
        return targets

    def wire_faults(self) -> None:
        w = self.world
        known = self.known_fault_targets()
        for fault in w.scenario.faults:
            on_activate = (
                self.on_key_compromise
                if fault.kind is FaultKind.KEY_COMPROMISE
                else None
            )
            w.board.inject(
                fault,
                known_targets=known,
                trace=w.trace,
                engine=w.engine,
                on_activate=on_activate,
            )

    def schedule_plan(self) -> None:
        w = self.world
        for step in w.scenario.plan:
            w.engine.schedule_at(step.at, lambda s=step: self.apply_step(s))

    def apply_step(self, step) -> None:
        w = self.world
        if step.action == "set_phase":
            w.set_phase(step.params["phase"])
            return
        detail = " ".join(
            f"{k}={getattr(v, 'value', v)}" for k, v in sorted(step.params.items())
        )
        w.trace.record(w.engine.now, TRACE_PLAN, step.action.upper(), detail=detail)
        if step.action == "enable_scitoken":
            w.ces[step.params["ce"]].accepts_tokens = True
        elif step.action == "adopt_rest":
            w.ces[step.params["ce"]].interface = CEInterface.REST
        elif step.action == "upgrade_factory":
            w.factories[step.params["factory"]].condor_major = step.params["major"]
        elif step.action == "provision_client_token":
            client = w.clients[step.params["client"]]
            client.token = w.mint_daemon_idtoken(client.spec.id, ("WRITE",))

    def on_key_compromise(self, fault: Fault) -> None:
        w = self.world
        kid = fault.target
        entry = w.keyring.entries.get(kid)
        if entry is None or entry.status is KeyStatus.REVOKED:
            return
        w.keyring = revoke_key(w.keyring, kid)
        suffix = 1
        while f"{kid}-r{suffix}" in w.keyring.entries:
            suffix += 1
        replacement = f"{kid}-r{suffix}"
        w.keyring = rotate_key(
            w.keyring,
            replacement,
            secret=w.streams.stream(f"key/{replacement}").randbytes(32),
        )
        if kid in w.startd_kids:
            w.startd_kids[w.startd_kids.index(kid)] = replacement
        if kid == w.daemon_kid:
            w.daemon_kid = replacement
            w.schedd.token = w.mint_daemon_idtoken("schedd@cmspool", ("ADVERTISE",))
            w.frontend.token = w.mint_daemon_idtoken(
                w.frontend.subject, ("READ", "WRITE")
            )
            for client in w.clients.values():
                if client.token is not None:
                    client.token = w.mint_daemon_idtoken(client.spec.id, ("WRITE",))
        evicted = w.collector.evict_by_kid(kid)
        w.trace.record(
            w.engine.now,
            TRACE_PLAN,
            "KEY_ROTATED",
            detail=f"old={kid} new={replacement} evicted={len(evicted)}",
        )
        if evicted:
            w.engine.schedule(
                w.scenario.drill.reprovision_delay,
                lambda pilots=tuple(evicted): self.reprovision(pilots),
            )

    def reprovision(self, evicted: tuple[Pilot, ...]) -> None:
        w = self.world
        w.trace.record(
            w.engine.now, TRACE_PLAN, "REPROVISION", detail=f"count={len(evicted)}"
        )
        for old in evicted:
            factory = w.factory_serving(old.ce_id)
            if factory is not None:
                factory.submit_one(w.ces[old.ce_id])


def build_world(scenario: Scenario) -> World:
    world = World(scenario)
    world.start()
    return world
