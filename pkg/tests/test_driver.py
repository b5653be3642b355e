from ipaddress import IPv4Address

import pytest

from fleetsim.device import manifest_to_json
from fleetsim.dhcpd import Lease, LEASE_ACTIVE, LEASE_EXPIRED, write_leases
from fleetsim.driver import (ConfigError, ControlSession, Scenario,
                             load_manifest, run_scenario)
from fleetsim.netfabric import MacAddr

from conftest import make_net

SKYPE = load_manifest("skype")
FACEBOOK = load_manifest("facebook")
TWITTER = load_manifest("twitter")


# -- poll_leases ----------------------------------------------------------------


def test_poll_empty_file_returns_nothing(net):
    assert net.driver.poll_leases() == []


def test_poll_returns_only_new_active_ips(net):
    # parse oracle: two active + one expired, none known yet
    leases = [
        Lease(IPv4Address("10.0.2.100"), MacAddr.device_mac(0), 0, 10_000, LEASE_ACTIVE),
        Lease(IPv4Address("10.0.2.101"), MacAddr.device_mac(1), 0, 10_000, LEASE_EXPIRED),
        Lease(IPv4Address("10.0.2.102"), MacAddr.device_mac(2), 0, 10_000, LEASE_ACTIVE),
    ]
    write_leases(leases, net.leases_path)
    expected = [l.ip for l in leases if l.state == LEASE_ACTIVE]
    assert net.driver.poll_leases() == expected


def test_second_poll_of_same_file_is_empty(net):
    write_leases([Lease(IPv4Address("10.0.2.100"), MacAddr.device_mac(0), 0, 1,
                        LEASE_ACTIVE)], net.leases_path)
    assert net.driver.poll_leases() != []
    assert net.driver.poll_leases() == []


def test_corrupt_file_skips_poll_and_recovers(net):
    net.leases_path.write_text("lease banana {\n")
    assert net.driver.poll_leases() == []
    assert net.driver.poll_errors == 1
    write_leases([Lease(IPv4Address("10.0.2.100"), MacAddr.device_mac(0), 0, 1,
                        LEASE_ACTIVE)], net.leases_path)
    assert net.driver.poll_leases() == [IPv4Address("10.0.2.100")]


# -- connect / sessions -----------------------------------------------------------


def test_connect_to_online_device(net):
    dev = net.add_device(0)
    net.clock.schedule(0, dev.boot)
    net.clock.run_until(100)
    session = net.driver.connect(dev.ip)
    net.clock.run_until(200)
    assert session.state == ControlSession.CONNECTED
    assert f"{net.clock.now} connected" not in net.driver.run_log  # logged at connect time
    assert any("connected to 10.0.2.100:5555" in line for line in net.driver.run_log)


def test_duplicate_connect_returns_existing_session(net):
    dev = net.add_device(0)
    net.clock.schedule(0, dev.boot)
    net.clock.run_until(100)
    first = net.driver.connect(dev.ip)
    net.clock.run_until(200)
    assert net.driver.connect(dev.ip) is first


def test_connect_before_listener_is_refused_then_retried(net):
    # stage the race: binding published, device not yet Online
    dev = net.add_device(0)
    ip = IPv4Address("10.0.2.100")
    net.directory.publish(ip, dev.mac)
    refused = net.driver.connect(ip)
    assert refused.state == ControlSession.CLOSED
    assert ip not in net.driver.sessions
    # device finishes DORA; the next poll tick retries and succeeds
    net.clock.schedule(0, dev.boot)
    net.driver.start()
    net.clock.run_until(net.driver.poll_interval_ms + 10)
    assert dev.boot_state == "Online"
    session = net.driver.sessions[ip]
    assert session.state == ControlSession.CONNECTED


def test_list_devices_in_connection_order(net):
    assert net.driver.list_devices() == []
    devs = [net.add_device(i) for i in range(3)]
    for i, dev in enumerate(devs):
        net.clock.schedule(i * 10, dev.boot)
    net.clock.run_until(100)
    for dev in devs:
        net.driver.connect(dev.ip)
    net.clock.run_until(200)
    assert net.driver.list_devices() == [
        "10.0.2.100:5555\tdevice",
        "10.0.2.101:5555\tdevice",
        "10.0.2.102:5555\tdevice",
    ]


def test_list_devices_at_fleet_scale(net):
    devs = [net.add_device(i) for i in range(100)]
    for i, dev in enumerate(devs):
        net.clock.schedule(i * 100, dev.boot)
    net.driver.start()
    net.clock.run_until(12_000)
    lines = net.driver.list_devices()
    assert len(lines) == 100
    assert all(line.endswith(":5555\tdevice") for line in lines)
    assert len(set(lines)) == 100


# -- appmanager cycle ----------------------------------------------------------------


def drive_cycle(tmp_path, apps, until_ms, delay=5000):
    net = make_net(tmp_path, apps=apps, intent_delay_ms=delay)
    dev = net.add_device(0)
    net.driver.start()
    net.clock.schedule(0, dev.boot)
    net.clock.run_until(until_ms)
    return net, dev


def test_appmanager_launch_times_follow_schedule(tmp_path):
    # schedule arithmetic: launches at t0, t0+5000, t0+10000, then cycle
    net, dev = drive_cycle(tmp_path, [SKYPE, FACEBOOK, TWITTER], 21_000)
    times = [t for t, _, _ in dev.launch_log]
    pkgs = [p for _, p, _ in dev.launch_log]
    t0 = times[0]
    assert times == [t0, t0 + 5000, t0 + 10_000, t0 + 15_000, t0 + 20_000]
    expected_order = [SKYPE.package, FACEBOOK.package, TWITTER.package]
    assert pkgs == [expected_order[i % 3] for i in range(len(pkgs))]


def test_appmanager_installs_before_first_launch(tmp_path):
    net, dev = drive_cycle(tmp_path, [SKYPE, FACEBOOK], 2_000)
    assert set(dev.packages) == {SKYPE.package, FACEBOOK.package}


def test_empty_app_list_sends_no_launches(tmp_path):
    net, dev = drive_cycle(tmp_path, [], 5_000)
    assert dev.launch_log == []
    assert net.driver.sessions[dev.ip].state == ControlSession.CONNECTED


def test_failed_launch_skipped_next_app_on_schedule(tmp_path):
    net, dev = drive_cycle(tmp_path, [SKYPE, FACEBOOK], 1_500)
    # sabotage: remove skype behind the driver's back before its next slot
    del dev.packages[SKYPE.package]
    net.clock.run_until(22_000)
    skips = [line for line in net.driver.run_log if "launch skipped" in line]
    assert any(SKYPE.package in line for line in skips)
    launches = [(t, p) for t, p, _ in dev.launch_log]
    fb_times = [t for t, p in launches if p == FACEBOOK.package]
    gaps = {b - a for a, b in zip(fb_times, fb_times[1:])}
    assert gaps == {2 * 5000}  # facebook stays on its slot of the 2-app cycle


def test_discovery_latency_within_poll_interval(tmp_path):
    net, dev = drive_cycle(tmp_path, [], 3_000)
    session = net.driver.sessions[dev.ip]
    assert dev.online_at is not None and session.connected_at is not None
    assert session.connected_at - dev.online_at <= net.driver.poll_interval_ms


# -- run_scenario ----------------------------------------------------------------


def test_run_scenario_single_voip_device_classifies():
    report = run_scenario(Scenario(device_count=1, apps=("skype",),
                                   duration_ms=8_000, seed=5))
    assert report.totals["apps"].get("skype_like", 0) >= 1
    flows = [f for f in report.flows if f["app"] == "skype_like"]
    assert flows and flows[0]["subscriber"] == "10.0.2.100"
    assert flows[0]["classified_at_packet"] == 1
    # under allow, every presented byte of the voip flow is forwarded
    for row in flows:
        assert row["verdict"] == "allow"
        assert row["forwarded_bytes"] == row["bytes_up"] + row["bytes_down"]


def test_run_scenario_report_totals_match_rows():
    report = run_scenario(Scenario(device_count=2, apps=("twitter",),
                                   duration_ms=10_000, seed=9))
    rows = report.flows
    assert report.totals["flows"] == len(rows)
    assert report.totals["bytes"] == sum(r["bytes_up"] + r["bytes_down"] for r in rows)
    assert report.totals["forwarded_bytes"] == sum(r["forwarded_bytes"] for r in rows)


def test_run_scenario_duration_shorter_than_cycle_rejected():
    with pytest.raises(ConfigError) as err:
        run_scenario(Scenario(device_count=1, apps=("skype", "twitter"),
                              duration_ms=9_000))
    assert err.value.path == "duration_ms"


def test_run_scenario_unknown_app_rejected():
    with pytest.raises(ConfigError):
        run_scenario(Scenario(device_count=1, apps=("no-such-app",),
                              duration_ms=10_000))


def test_run_scenario_zero_devices_rejected():
    with pytest.raises(ConfigError) as err:
        Scenario(device_count=0, apps=(), duration_ms=1000).validate()
    assert err.value.path == "device_count"


def test_frame_log_export(tmp_path):
    path = tmp_path / "frames.tsv"
    run_scenario(Scenario(device_count=1, apps=(), duration_ms=2_000),
                 frame_log_path=path)
    lines = path.read_text().splitlines()
    assert lines
    for line in lines[:5]:
        t, src, dst, ethertype, length = line.split("\t")
        assert t.isdigit() and length.isdigit()
        assert ethertype == "0x0800"
        assert len(src.split(":")) == 6 and len(dst.split(":")) == 6


def test_manifest_resolution_from_directory(tmp_path):
    target = tmp_path / "custom.json"
    target.write_text(manifest_to_json(load_manifest("mystery")))
    manifest = load_manifest(str(target))
    assert manifest.package == "com.example.mystery"
    with pytest.raises(ConfigError):
        load_manifest("missing", manifest_dir=str(tmp_path))
