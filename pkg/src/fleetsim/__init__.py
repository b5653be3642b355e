"""Deterministic discrete-event simulator of a virtual smartphone fleet.

Virtual devices lease addresses from a DHCP server, a test driver discovers
them through the leases file and drives app launches over a text control
protocol, and a gateway router classifies and polices the generated traffic.
"""

__version__ = "0.1.0"

from .driver import ConfigError, Scenario, run_scenario

__all__ = ["ConfigError", "Scenario", "run_scenario", "__version__"]
