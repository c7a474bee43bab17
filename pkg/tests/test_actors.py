"""World wiring and the daemon state machines, end to end on small pools."""

import pytest

from tokenpool import jose
from tokenpool.actors import (
    CH_ADVERTISE,
    CH_CE_SUBMIT,
    CH_JOIN,
    CH_PROVISION,
    CH_SUBMIT,
    CH_TOKEN_FETCH,
    PilotState,
    JobState,
    build_world,
)
from tokenpool.errors import (
    AuthorizationDenied,
    MismatchedCredential,
    UnauthorizedRequestor,
    UnknownTarget,
)
from tokenpool.policy import AuthMethod, MigrationPhase
from tokenpool.scenario import CEInterface, parse_scenario
from tokenpool.simnet import OUTCOME_SUCCESS, TRACE_PILOT, TRACE_POOL
from tokenpool.tokens import KeyStatus, revoke_key

ISSUER = "https://issuer.test"


def doc(**over):
    base = {
        "name": "actors-unit",
        "seed": 11,
        "horizon": 600,
        "phase": "TOKEN_WITH_GSI_FALLBACK",
        "issuer": {"url": ISSUER, "kid": "op-1"},
        "keys": [
            {"kid": "pool-daemon", "purpose": "daemon"},
            {"kid": "startd-1", "purpose": "startd"},
            {"kid": "startd-2", "purpose": "startd"},
        ],
        "sites": [
            {
                "name": "site-a",
                "ces": [
                    {
                        "id": "ce-a",
                        "flavor": "HTCONDOR_CE",
                        "capacity": 10,
                        "accepts_tokens": True,
                    }
                ],
            }
        ],
        "factories": [{"id": "fac-1", "condor_major": 10, "rest_adopted": True}],
        "clients": [
            {
                "id": "cmsprod",
                "methods": ["IDTOKEN", "LOCAL_FS"],
                "jobs": 5,
                "duration": 86400,
            }
        ],
    }
    base.update(over)
    return base


def run_doc(**over):
    scenario = parse_scenario(doc(**over))
    world = build_world(scenario)
    world.engine.run(scenario.horizon)
    return world


def successes(world, channel, method=None):
    recs = world.trace.select(channel.label, outcome=OUTCOME_SUCCESS)
    if method is not None:
        recs = [r for r in recs if r["method"] == method.value]
    return recs


def failures(world, channel, reason):
    return world.trace.select(channel.label, outcome=f"FAIL:{reason}")


# -- the happy pipeline -----------------------------------------------------


def test_pipeline_fills_pool_with_tokens_end_to_end():
    w = run_doc()
    assert len(w.collector.members) == 5
    assert all(p.state is PilotState.MATCHED for p in w.collector.members.values())
    assert sum(1 for j in w.jobs if j.state is JobState.RUNNING) == 5

    # Every hop authenticated with its token method.
    assert successes(w, CH_SUBMIT, AuthMethod.IDTOKEN)
    assert successes(w, CH_ADVERTISE, AuthMethod.IDTOKEN)
    assert successes(w, CH_TOKEN_FETCH, AuthMethod.IDTOKEN)
    assert successes(w, CH_PROVISION, AuthMethod.IDTOKEN)
    assert len(successes(w, CH_CE_SUBMIT, AuthMethod.SCITOKEN)) == 5
    assert len(successes(w, CH_JOIN, AuthMethod.IDTOKEN)) >= 5

    # No hop fell back to a legacy credential.
    legacy = [
        r
        for r in w.trace.records
        if r["method"] in (AuthMethod.GSI_PROXY.value, AuthMethod.LOCAL_FS.value)
    ]
    assert legacy == []

    samples = w.trace.select(TRACE_POOL, outcome="SAMPLE")
    assert "size=5" in str(samples[-1]["detail"])


def test_minted_tokens_have_unique_jtis():
    w = run_doc()
    minted = [w.schedd.token, w.frontend.token, w.clients["cmsprod"].token]
    minted += [p.token for p in w.pilots.values() if p.token]
    minted += [entry[0] for entry in w.frontend.scitokens.values()]
    jtis = [jose.decode_token(t)[1].jti for t in minted]
    assert len(jtis) == len(set(jtis))


def test_local_fs_only_client_succeeds_in_fallback_phase():
    w = run_doc(
        clients=[{"id": "cmsprod", "methods": ["LOCAL_FS"], "jobs": 2, "duration": 100}]
    )
    recs = successes(w, CH_SUBMIT, AuthMethod.LOCAL_FS)
    assert len(recs) == 1
    assert recs[0]["identity"] == "cms-prod"


def test_locked_out_client_retries_until_provisioned():
    w = run_doc(
        phase="TOKEN_ONLY",
        clients=[
            {
                "id": "cmsprod",
                "methods": ["LOCAL_FS"],
                "jobs": 5,
                "duration": 86400,
                "retry_interval": 120,
            }
        ],
        plan=[{"at": 250, "action": "provision_client_token", "client": "cmsprod"}],
    )
    rejected = failures(w, CH_SUBMIT, "NoCommonMethod")
    assert [int(r["t"]) for r in rejected] == [0, 120, 240]
    accepted = successes(w, CH_SUBMIT, AuthMethod.IDTOKEN)
    assert [int(r["t"]) for r in accepted] == [360]
    assert len(w.collector.members) == 5  # pool formed after the late submit


# -- gateway failure modes --------------------------------------------------


def test_misconfigured_ce_masked_by_proxy_fallback():
    w = run_doc(faults=[{"kind": "CE_TOKEN_MISCONFIG", "target": "ce-a"}])
    token_rejections = failures(w, CH_CE_SUBMIT, "UntrustedIssuer")
    proxy_successes = successes(w, CH_CE_SUBMIT, AuthMethod.GSI_PROXY)
    assert len(token_rejections) == 5
    assert len(proxy_successes) == 5
    assert len(w.collector.members) == 5
    # Retry happens in place: rejection first, proxy success after it.
    order = [
        (r["outcome"], str(r["detail"]))
        for r in w.trace.select(CH_CE_SUBMIT.label)
    ]
    for i, (outcome, detail) in enumerate(order):
        if outcome == "FAIL:UntrustedIssuer":
            pilot = detail.split("pilot=")[1].split()[0]
            later = [d for o, d in order[i + 1:] if o == OUTCOME_SUCCESS and f"pilot={pilot}" in d]
            assert later, f"no proxy retry for {pilot}"


def test_misconfigured_ce_starves_pool_under_token_only():
    w = run_doc(
        phase="TOKEN_ONLY", faults=[{"kind": "CE_TOKEN_MISCONFIG", "target": "ce-a"}]
    )
    assert len(w.collector.members) == 0
    assert len(failures(w, CH_CE_SUBMIT, "UntrustedIssuer")) >= 5
    assert not [
        r for r in w.trace.records if r["method"] == AuthMethod.GSI_PROXY.value
    ]
    failed = [p for p in w.pilots.values() if p.state is PilotState.FAILED]
    assert failed and len(failed) == len(w.pilots)


def test_token_only_without_ce_token_support_is_a_dead_end():
    over = doc(phase="TOKEN_ONLY")
    over["sites"][0]["ces"][0]["accepts_tokens"] = False
    w = run_doc(**over)
    assert len(failures(w, CH_CE_SUBMIT, "MismatchedCredential")) >= 5
    assert w.trace.select(TRACE_PILOT, outcome="SUBMITTED") == []
    assert len(w.collector.members) == 0


def test_capacity_exceeded_only_after_successful_auth():
    w = run_doc(
        clients=[
            {"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 15, "duration": 86400}
        ]
    )
    assert len(w.collector.members) == 10  # capacity caps the pool
    rejected = failures(w, CH_CE_SUBMIT, "CapacityExceeded")
    assert rejected
    ce_records = w.trace.select(CH_CE_SUBMIT.label)
    for reject in rejected:
        pilot = str(reject["detail"]).split("pilot=")[1].split()[0]
        idx = ce_records.index(reject)
        prior_auth = [
            r
            for r in ce_records[:idx]
            if r["outcome"] == OUTCOME_SUCCESS
            and f"pilot={pilot}" in str(r["detail"])
            and r["t"] == reject["t"]
        ]
        assert prior_auth, f"{pilot} was refused capacity without authenticating"


def test_stuck_submissions_leak_slots_and_never_join():
    w = run_doc(faults=[{"kind": "CE_STUCK_SUBMISSION", "target": "ce-a"}])
    stuck = [
        r
        for r in w.trace.select(TRACE_PILOT, outcome="SUBMITTED")
        if "stuck=1" in str(r["detail"])
    ]
    assert len(stuck) == 5
    assert w.trace.select(TRACE_PILOT, outcome="JOINED") == []
    assert w.ces["ce-a"].reserved == 5  # slots held by pilots that never arrive
    assert len(w.collector.members) == 0


def test_dropped_joins_are_retried_on_keepalive():
    w = run_doc(
        pilots={"keepalive": 100},
        faults=[
            {
                "kind": "MESSAGE_DROP",
                "target": "STARTD->COLLECTOR",
                "start": 0,
                "end": 31,
                "rate": 1.0,
            }
        ],
    )
    drops = w.trace.select(CH_JOIN.label, outcome="DROP")
    assert len(drops) == 5 and all(int(r["t"]) == 30 for r in drops)
    joins = w.trace.select(TRACE_PILOT, outcome="JOINED")
    assert len(joins) == 5 and all(int(r["t"]) == 130 for r in joins)
    assert len(w.collector.members) == 5


def test_dropped_advertisements_do_not_stop_the_schedule():
    w = run_doc(
        faults=[{"kind": "MESSAGE_DROP", "target": "SCHEDD->COLLECTOR", "rate": 1.0}]
    )
    drops = w.trace.select(CH_ADVERTISE.label, outcome="DROP")
    assert len(drops) == 600 // 60 + 1  # one per cycle, t=0 through t=600
    assert successes(w, CH_ADVERTISE) == []


def test_unknown_fault_target_rejected_at_world_start():
    scenario = parse_scenario(
        doc(faults=[{"kind": "CE_TOKEN_MISCONFIG", "target": "ce-ghost"}])
    )
    with pytest.raises(UnknownTarget):
        build_world(scenario)


# -- key compromise ---------------------------------------------------------


def test_startd_key_compromise_evicts_rotates_reprovisions():
    w = run_doc(
        # Park the frontend after its first cycle so the drill's own
        # reprovisioning is the only source of replacement pilots.
        frontend={"cycle": 1000, "match_interval": 60},
        clients=[
            {"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 4, "duration": 86400}
        ],
        faults=[{"kind": "KEY_COMPROMISE", "target": "startd-1", "start": 300}],
        drill={"reprovision_delay": 60},
    )
    evictions = w.trace.select(TRACE_PILOT, outcome="EVICT")
    assert len(evictions) == 2  # round-robin put 2 of 4 pilots on startd-1
    for rec in evictions:
        detail = str(rec["detail"])
        assert "kid=startd-1 " in detail and "reason=KeyCompromise" in detail

    assert w.keyring.lookup("startd-1").status is KeyStatus.REVOKED
    assert w.keyring.lookup("startd-1-r1").status is KeyStatus.ACTIVE
    assert w.startd_kids == ["startd-1-r1", "startd-2"]

    rotated = w.trace.select("PLAN", outcome="KEY_ROTATED")
    assert len(rotated) == 1
    assert "old=startd-1 new=startd-1-r1 evicted=2" in str(rotated[0]["detail"])

    requeues = w.trace.select("JOB", outcome="REQUEUE")
    assert len(requeues) == 2

    reprovisions = w.trace.select("PLAN", outcome="REPROVISION")
    assert len(reprovisions) == 1 and int(reprovisions[0]["t"]) == 360
    late_joins = [
        r for r in w.trace.select(TRACE_PILOT, outcome="JOINED") if int(r["t"]) > 300
    ]
    assert len(late_joins) == 2 and all(int(r["t"]) == 390 for r in late_joins)
    assert all("kid=startd-1 " not in str(r["detail"]) for r in late_joins)

    # Pool is back at pre-drill strength and every job is running again.
    assert len(w.collector.members) == 4
    assert sum(1 for j in w.jobs if j.state is JobState.RUNNING) == 4


def test_daemon_key_compromise_reminted_for_all_daemons():
    w = run_doc(faults=[{"kind": "KEY_COMPROMISE", "target": "pool-daemon", "start": 300}])
    assert w.daemon_kid == "pool-daemon-r1"
    assert w.keyring.lookup("pool-daemon").status is KeyStatus.REVOKED
    for token in (w.schedd.token, w.frontend.token, w.clients["cmsprod"].token):
        header, _, _ = jose.decode_token(token)
        assert header.kid == "pool-daemon-r1"
    # No pool member carried the daemon key, so nothing was evicted...
    assert w.trace.select(TRACE_PILOT, outcome="EVICT") == []
    assert len(w.collector.members) == 5
    # ...and the very next advertisement succeeds under the new key.
    later = [
        r for r in successes(w, CH_ADVERTISE, AuthMethod.IDTOKEN) if int(r["t"]) >= 300
    ]
    assert later and all("kid=pool-daemon-r1" in str(r["detail"]) for r in later)


def test_join_with_revoked_key_is_rejected():
    w = build_world(
        parse_scenario(
            doc(clients=[{"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 0, "duration": 10}])
        )
    )
    w.engine.run(10)
    pilot = w.new_pilot(w.ces["ce-a"])
    pilot.kid, pilot.token = w.mint_startd_token(pilot.id)
    pilot.state = PilotState.STARTED
    w.keyring = revoke_key(w.keyring, pilot.kid)
    w.collector.receive_join(pilot)
    assert pilot.state is PilotState.FAILED
    assert len(failures(w, CH_JOIN, "KeyRevoked")) == 1


# -- collector housekeeping -------------------------------------------------


def test_pilot_with_no_work_retires_idle():
    w = build_world(
        parse_scenario(
            doc(clients=[{"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 0, "duration": 10}])
        )
    )
    w.engine.run(10)  # first frontend cycle caches the gateway capability
    w.factories["fac-1"].submit_one(w.ces["ce-a"])
    w.engine.run(700)
    retired = [
        r
        for r in w.trace.select(TRACE_PILOT, outcome="RETIRED")
        if "reason=idle" in str(r["detail"])
    ]
    assert len(retired) == 1
    assert len(w.collector.members) == 0
    assert w.ces["ce-a"].reserved == 0


def test_single_use_pilots_retire_with_their_job():
    w = run_doc(
        clients=[{"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 2, "duration": 100}]
    )
    done = w.trace.select("JOB", outcome="DONE")
    assert len(done) == 2
    retired = w.trace.select(TRACE_PILOT, outcome="RETIRED")
    assert len(retired) == 2
    assert all("job=" in str(r["detail"]) for r in retired)
    assert len(w.collector.members) == 0
    assert w.ces["ce-a"].reserved == 0


# -- issuer authorization ---------------------------------------------------


def test_issuer_serves_only_the_frontend_identity():
    w = build_world(parse_scenario(doc()))
    imposter = w.mint_daemon_idtoken("condor@imposter", ("READ",))
    with pytest.raises(UnauthorizedRequestor):
        w.issuer.fetch_capability(imposter, "ce-a")
    assert len(failures(w, CH_TOKEN_FETCH, "UnauthorizedRequestor")) == 1


def test_issuer_requires_read_level():
    w = build_world(parse_scenario(doc()))
    with pytest.raises(AuthorizationDenied):
        w.issuer.fetch_capability(w.schedd.token, "ce-a")  # ADVERTISE-limited
    denied = w.trace.select(CH_TOKEN_FETCH.label, outcome="DENIED")
    assert len(denied) == 1
    assert "missing=READ" in str(denied[0]["detail"])


def test_capability_tokens_are_refreshed_before_expiry():
    w = run_doc(
        issuer={"url": ISSUER, "kid": "op-1", "scitoken_lifetime": 100},
        clients=[{"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 0, "duration": 10}],
    )
    fetches = successes(w, CH_TOKEN_FETCH, AuthMethod.IDTOKEN)
    # Refresh at 80% of a 100 s lifetime with a 60 s cycle: t=0, 120, 240, ...
    assert [int(r["t"]) for r in fetches] == [0, 120, 240, 360, 480, 600]


# -- factory gates ----------------------------------------------------------


def arc_fleet_doc():
    over = doc(
        sites=[
            {
                "name": "site-a",
                "ces": [
                    {"id": "ce-rest", "flavor": "ARC_CE", "interface": "REST", "capacity": 5},
                    {"id": "ce-ldap", "flavor": "ARC_CE", "interface": "LDAP", "capacity": 5},
                    {"id": "ce-htc", "flavor": "HTCONDOR_CE", "capacity": 5},
                ],
            }
        ],
        factories=[{"id": "fac-1", "condor_major": 9, "rest_adopted": False}],
    )
    return over


def test_factory_interface_gate():
    w = build_world(parse_scenario(arc_fleet_doc()))
    fac = w.factories["fac-1"]
    assert fac.select_interface(w.ces["ce-htc"]) is CEInterface.NATIVE
    assert fac.select_interface(w.ces["ce-ldap"]) is CEInterface.LDAP  # still alive on 9
    assert fac.select_interface(w.ces["ce-rest"]) is CEInterface.LDAP
    fac.rest_adopted = True
    assert fac.select_interface(w.ces["ce-rest"]) is CEInterface.REST
    fac.condor_major = 10
    assert fac.select_interface(w.ces["ce-ldap"]) is None  # LDAP retired on 10
    assert fac.select_interface(w.ces["ce-rest"]) is CEInterface.REST


def test_factory_credential_gate():
    w = build_world(parse_scenario(doc()))
    w.engine.run(10)  # let the frontend cache a capability for ce-a
    fac = w.factories["fac-1"]
    ce = w.ces["ce-a"]
    credential, method = fac.select_credential(ce)
    assert method is AuthMethod.SCITOKEN

    fac.token_capable = False
    _, method = fac.select_credential(ce)
    assert method is AuthMethod.GSI_PROXY
    fac.token_capable = True

    w.frontend.scitokens.clear()
    _, method = fac.select_credential(ce)
    assert method is AuthMethod.GSI_PROXY  # no cached token yet

    w.set_phase(MigrationPhase.TOKEN_ONLY)
    assert not fac.proxy_fallback_allowed()
    ce.accepts_tokens = False
    with pytest.raises(MismatchedCredential):
        fac.select_credential(ce)


def test_plan_steps_rewire_gateways_and_factories():
    over = doc(
        sites=[
            {
                "name": "site-a",
                "ces": [
                    {"id": "ce-x", "flavor": "ARC_CE", "interface": "LDAP", "capacity": 5}
                ],
            }
        ],
        factories=[{"id": "fac-1", "condor_major": 9, "rest_adopted": True}],
        clients=[{"id": "cmsprod", "methods": ["IDTOKEN"], "jobs": 0, "duration": 10}],
        plan=[
            {"at": 100, "action": "adopt_rest", "ce": "ce-x"},
            {"at": 100, "action": "upgrade_factory", "factory": "fac-1", "major": 10},
            {"at": 150, "action": "enable_scitoken", "ce": "ce-x"},
        ],
    )
    scenario = parse_scenario(over)
    w = build_world(scenario)
    w.engine.run(200)
    assert w.ces["ce-x"].interface is CEInterface.REST
    assert w.ces["ce-x"].accepts_tokens is True
    assert w.factories["fac-1"].condor_major == 10
    plan_records = [r for r in w.trace.records if r["channel"] == "PLAN"]
    outcomes = [r["outcome"] for r in plan_records]
    assert "ADOPT_REST" in outcomes
    assert "UPGRADE_FACTORY" in outcomes
    assert "ENABLE_SCITOKEN" in outcomes
