"""End-to-end acceptance checks, one test group per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import json
import os
import random
import threading

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from conftest import serving
from tagrelay.cloud import CloudClient, CloudService, CloudStore
from tagrelay.errors import WrongKeyError
from tagrelay.owner import OUTDATED_AFTER, staleness
from tagrelay.presets import load_preset
from tagrelay.protocol import (
    MasterSecret, TagStatus, decode_advertisement, derive_epoch_keypair,
    encode_advertisement,
)
from tagrelay.relay import EmitterClient, ObservationMsg, RelayClient, RelayServer, RelayService, ReplayCommand
from tagrelay.reports import LocationPayload, decrypt_report, encrypt_report, key_id
from tagrelay.simnet import Simulation, parse_scenario
from tagrelay.simnet.world import distance

DAY = 86400
BULK = settings(max_examples=10_000, deadline=None, suppress_health_check=list(HealthCheck))


def owner_rows(sim, phone="owner"):
    return sim.log.where("owner", phone)


def plane(sim, lat, lon):
    return sim.config.to_plane(lat, lon)


def site_of(sim, row, names):
    """Name of the entity whose position is within 10 m of the displayed location."""
    here = plane(sim, row.lat, row.lon)
    near = [n for n in names if distance(here, sim.entities[n].position) <= 10]
    assert len(near) == 1, (row, near)
    return near[0]


# 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "relay injection shows the relay site")
def test_relay_injection(preset_run):
    sim = preset_run("relay-basic")
    rows = owner_rows(sim)
    cloud = [r for r in rows if r.source == "cloud"]
    assert cloud, "owner never saw a cloud location"
    finder_b = sim.entities["finder_b"].position
    for row in cloud:
        assert distance(plane(sim, row.lat, row.lon), finder_b) <= 10
    # and nowhere near the tag itself
    assert distance(plane(sim, cloud[-1].lat, cloud[-1].lon), sim.entities["tag"].position) > 900
    assert rows[-1].source == "cloud"


# 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "key rotation invalidates relayed epoch-k reports")
def test_key_rotation_invalidation(preset_run):
    sim = preset_run("key-rotation")
    events = list(sim.log)
    assert events[-1].time <= 2 * DAY and sim.now == 2 * DAY
    legit = next(
        i for i, e in enumerate(events)
        if e.event == "upload" and e.entity == "finder_a" and e.key_epoch == 1
    )
    assert events[legit].time >= DAY
    before = [e for e in events[:legit] if e.event == "owner" and e.source == "cloud"]
    after = [e for e in events[legit + 1:] if e.event == "owner"]
    # the attack worked while epoch 0 was the newest observed key, including past the boundary
    assert any(e.key_epoch == 0 and e.time >= DAY for e in before)
    assert all(site_of(sim, e, ["finder_b"]) == "finder_b" for e in before)
    # the relay keeps producing epoch-0 reports after the legitimate one
    assert any(e.event == "upload" and e.entity == "finder_b" and e.key_epoch == 0 for e in events[legit:])
    assert after
    for e in after:
        assert not (e.source == "cloud" and e.key_epoch == 0), e
        assert e.source == "cloud" and e.key_epoch == 1
        assert site_of(sim, e, ["finder_a", "finder_b"]) == "finder_a"


# 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "alternation between legitimate and relay sites")
def test_alternation(preset_run):
    sim = preset_run("alternation")
    sites = [site_of(sim, r, ["finder_a", "finder_b"]) for r in owner_rows(sim) if r.source == "cloud"]
    best = run = 1
    for prev, cur in zip(sites, sites[1:]):
        run = run + 1 if cur != prev else 1
        best = max(best, run)
    assert best >= 10, sites


# 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "local override with a historic beacon")
def test_local_override(preset_run):
    sim = preset_run("local-override")
    events = list(sim.log)
    start = sim.log.where("start_relay")[0]
    emit_at = [i for i, e in enumerate(events) if e.event == "emit"]
    first, last = events[emit_at[0]].time, events[emit_at[-1]].time
    e_now = sim.tags["tag"].runtime.epoch(first)
    assert start.key_epoch == e_now - 3 and e_now == 3
    # every reconcile between the first and last replayed frame, in processing order
    during = [e for e in events[emit_at[0]:emit_at[-1]] if e.event == "owner"]
    assert len(during) >= 50
    for row in during:
        assert row.source == "local" and row.key_epoch == e_now - 3, row
    # fresher cloud data existed the whole time
    fresh = [u for u in sim.log.where("upload", "finder_a") if u.key_epoch == e_now and u.time < first]
    assert fresh
    epoch_start = e_now * DAY
    just_before = [e for e in events[:emit_at[0]] if e.event == "owner" and e.time >= epoch_start + 600]
    assert just_before and all(r.source == "cloud" and r.key_epoch == e_now for r in just_before)
    # once the replay stops and the window lapses, the cloud wins again
    tail = [r for r in owner_rows(sim) if r.time > last + sim.config.local_window]
    assert tail and all(r.source == "cloud" for r in tail)


# 5 ---------------------------------------------------------------------------

@pytest.mark.criterion(5, "seven-day staleness boundary")
def test_replay_lifetime_rows(preset_run):
    sim = preset_run("replay-lifetime")
    rt = sim.tags["tag"].runtime
    frozen = rt.frozen_epoch
    pairing, policy = rt.master_secret.pairing_time, rt.policy
    shown = [r for r in owner_rows(sim) if r.source == "cloud"]
    assert shown and {r.key_epoch for r in shown} == {frozen}
    for row in shown:
        stale = staleness(frozen, policy, pairing, row.time)
        assert ("outdated" in row.flags) == (stale >= OUTDATED_AFTER), row
    assert any("outdated" in r.flags for r in shown)
    assert any("outdated" not in r.flags and r.time > 7 * DAY for r in shown)


@pytest.mark.criterion(5, "seven-day staleness boundary")
@pytest.mark.parametrize("delta", [-1, 0, 1])
def test_replay_lifetime_boundary(delta):
    sim = Simulation(load_preset("replay-lifetime"))
    sim.run_until(3 * DAY)
    rt = sim.tags["tag"].runtime
    boundary = rt.master_secret.pairing_time + (rt.frozen_epoch + 1) * rt.policy.period + OUTDATED_AFTER
    at = boundary + delta
    sim.run_until(at)
    view = sim.owners["owner"].poll(at)
    assert view.source == "cloud" and view.displayed_key_epoch == rt.frozen_epoch
    assert staleness(rt.frozen_epoch, rt.policy, rt.master_secret.pairing_time, at) == OUTDATED_AFTER + delta
    assert view.outdated == (delta >= 0)


# 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "key rotates exactly every 24 h")
@pytest.mark.parametrize("pairing", [0, 12_345])
def test_rotation_constant(pairing):
    secret = bytes.fromhex("3c" * 32)
    sc = parse_scenario({"entities": [{"id": "tag", "kind": "tag", "position": [0, 0],
                                       "secret": secret.hex(), "pairing_time": pairing}]})
    sim = Simulation(sc)
    sim.run_until(pairing + 7 * DAY)
    advs = sim.log.where("advertise", "tag")
    keys = [decode_advertisement(a.data)[0] for a in advs]
    changes = [a.time for a, k, prev in zip(advs[1:], keys[1:], keys) if k != prev]
    assert changes == [pairing + k * DAY for k in range(1, 8)]
    master = MasterSecret(secret, pairing)
    for a, k in zip(advs, keys):
        epoch = int((a.time - pairing) // DAY)
        assert k == derive_epoch_keypair(master, epoch).public_key


# 7 ---------------------------------------------------------------------------

RT_SECRET = MasterSecret(bytes.fromhex("c7" * 32))
RT_KEYS = [derive_epoch_keypair(RT_SECRET, e) for e in range(16)]


@pytest.mark.criterion(7, "codec and crypto properties")
@BULK
@given(st.binary(min_size=32, max_size=32), st.booleans(), st.booleans())
def test_advertisement_round_trip_10k(key, lost, battery):
    status = TagStatus(lost=lost, battery_low=battery)
    adv = encode_advertisement(key, status)
    assert len(adv.to_bytes()) == 34
    assert decode_advertisement(adv) == (key, status)


@pytest.mark.criterion(7, "codec and crypto properties")
@BULK
@given(
    st.floats(-90, 90), st.floats(-180, 180), st.integers(0, 255), st.integers(0, 2**64 - 1),
    st.integers(0, len(RT_KEYS) - 1),
)
def test_report_round_trip_10k(lat, lon, acc, ts, epoch):
    payload = LocationPayload(lat, lon, acc, ts)
    kp = RT_KEYS[epoch]
    assert decrypt_report(encrypt_report(payload, kp.public_key), kp.private_scalar) == payload


@pytest.mark.criterion(7, "codec and crypto properties")
def test_wrong_key_always_fails():
    rng = random.Random(7)
    failures = 0
    for _ in range(1000):
        right, wrong = rng.sample(RT_KEYS, 2)
        payload = LocationPayload(rng.uniform(-90, 90), rng.uniform(-180, 180), rng.randrange(256), rng.randrange(2**32))
        report = encrypt_report(payload, right.public_key, rng.randbytes)
        try:
            decrypt_report(report, wrong.private_scalar)
        except WrongKeyError:
            failures += 1
    assert failures == 1000


# 8 ---------------------------------------------------------------------------

def _frames(n):
    secret = MasterSecret(bytes.fromhex("9d" * 32))
    return [encode_advertisement(derive_epoch_keypair(secret, e).public_key, TagStatus(lost=True)).to_bytes()
            for e in range(n)]


@pytest.mark.criterion(8, "relay-server contracts over the wire")
def test_relay_contracts_over_loopback():
    rng = random.Random(8)
    frames = _frames(5)
    sightings = [(rng.choice(frames), rng.uniform(0, 10_000)) for _ in range(200)]
    expected_first = {}
    expected_count = {}
    for frame, at in sightings:
        expected_first[frame] = min(expected_first.get(frame, at), at)
        expected_count[frame] = expected_count.get(frame, 0) + 1

    with serving(RelayService(RelayServer(), clock="virtual")) as (host, port):
        emitter = EmitterClient(host, port, "em")
        got = []
        schedules = [(1, 500.0, 7.0, 4), (2, 501.0, 3.0, 5)]
        total = sum(r for *_x, r in schedules)

        def collect():
            for emission in emitter.emissions():
                got.append(emission)
                if len(got) == total:
                    return

        reader = threading.Thread(target=collect, daemon=True)
        reader.start()
        ids = {}
        with RelayClient(host, port, "collector", "col") as col:
            for frame, at in sightings:
                beacon = col.observe(ObservationMsg("col", frame, -55.0, at))
                # dedup: one id per distinct byte string, stable across sightings
                assert ids.setdefault(frame, beacon["beacon_id"]) == beacon["beacon_id"]
            assert len(ids) == len(expected_first)
        with RelayClient(host, port, "controller", "ctl") as ctl:
            listing = {b["beacon_id"]: b for b in ctl.beacons()}
            for frame, bid in ids.items():
                assert bytes.fromhex(listing[bid]["advertisement"]) == frame
                assert listing[bid]["first_seen"] == expected_first[frame]
                assert listing[bid]["seen_count"] == expected_count[frame]
            for bid, start, interval, repeat in schedules:
                ctl.schedule(ReplayCommand(bid, "em", start, interval, repeat))
            for t in (400, 510, 515.5, 520, 10_000):
                ctl.advance_clock(t)
        reader.join(10)
        emitter.close()

    assert len(got) == total
    by_beacon = {}
    for e in got:
        by_beacon.setdefault(e.beacon_id, []).append(e.at)
    for bid, start, interval, repeat in schedules:
        assert by_beacon[bid] == [start + k * interval for k in range(repeat)]
    assert [e.at for e in got] == sorted(e.at for e in got)
    frame_of = {bid: frame for frame, bid in ids.items()}
    assert all(e.advertisement == frame_of[e.beacon_id] for e in got)


# 9 ---------------------------------------------------------------------------

@pytest.mark.criterion(9, "cloud store is blind and does not validate")
def test_cloud_blindness(tmp_path):
    journal = tmp_path / "cloud.jsonl"
    # a key pair that no tag ever advertised
    public = derive_epoch_keypair(MasterSecret(os.urandom(32)), 0)
    payload = LocationPayload(48.2082, 16.3738, 10, 1_700_000_000)
    report = encrypt_report(payload, public.public_key)
    store = CloudStore(journal)
    with serving(CloudService(store)) as (host, port), CloudClient(host, port) as client:
        seq = client.upload(report, now=42)
        [record] = client.fetch([key_id(public.public_key)])
    store.close()
    assert record.report_seq == seq and record.report == report
    assert decrypt_report(record.report, public.private_scalar) == payload

    raw = journal.read_bytes()
    plain = payload.to_bytes()
    for needle in (plain, plain.hex().encode(), plain[:16], plain[:16].hex().encode(), plain[17:]):
        assert needle not in raw
    assert json.loads(raw.decode().splitlines()[0])["report_seq"] == seq
    # a fresh store replays the journal and still serves the report
    again = CloudStore(journal)
    assert again.fetch([key_id(public.public_key)])[0].report == report
    again.close()
