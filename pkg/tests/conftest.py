"""Shared test harness: a minimal fabric with a DHCP-serving driver endpoint."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from fleetsim.device import AppManifest, Device
from fleetsim.dhcpd import DhcpServer
from fleetsim.driver import Driver, default_pool
from fleetsim.netfabric import Bridge, MacDirectory, SimClock


@dataclass
class Net:
    clock: SimClock
    bridge: Bridge
    directory: MacDirectory
    dhcp: DhcpServer
    driver: Driver
    leases_path: Path

    def add_device(self, index: int, seed: int = 0) -> Device:
        dev = Device(index, self.clock, self.directory, scenario_seed=seed)
        dev.connect_fabric(self.bridge)
        return dev


def make_net(tmp_path: Path, apps: list[AppManifest] | None = None,
             pool=None, intent_delay_ms: int = 5000,
             poll_interval_ms: int = 1000) -> Net:
    clock = SimClock()
    bridge = Bridge(clock)
    directory = MacDirectory()
    pool = pool or default_pool()
    leases_path = tmp_path / "dhcpd.leases"
    server_ip = type(pool.router)(int(pool.router) + 1)
    dhcp = DhcpServer(pool, server_ip, leases_path, on_ack=directory.publish)
    driver = Driver(clock, directory, dhcp, leases_path, apps or [],
                    intent_delay_ms, poll_interval_ms)
    driver.connect_fabric(bridge)
    return Net(clock, bridge, directory, dhcp, driver, leases_path)


@pytest.fixture
def net(tmp_path: Path) -> Net:
    return make_net(tmp_path)
