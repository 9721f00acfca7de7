"""Synthetic week of firewall-style connection logs with two planted attacks.

Baseline traffic follows a diurnal/weekly rhythm and is made of a few
hundred recurring flows (internal host, server, port) with Zipf-distributed
popularity. Two attack windows are
planted on top:

* **port spike**: many external sources hammering remote-desktop port 3389
  on internal hosts during a quiet early-morning hour;
* **single-IP burst**: one source sweeping random ports on a few targets
  for an hour.

:func:`generate_week` returns columns (not row dicts) so a million rows stay
cheap; :data:`SCHEMA_SPEC` describes how to encode them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

WEEK_START = 1547424000  # Monday 2019-01-14 00:00:00 UTC
HOUR = 3600

SCHEMA_SPEC = {
    "columns": [
        {"name": "timestamp", "kind": "timestamp"},
        {"name": "src_ip", "kind": "ip"},
        {"name": "dst_ip", "kind": "ip"},
        {"name": "dst_port", "kind": "numeric_passthrough"},
        {"name": "protocol", "kind": "categorical"},
        {"name": "action", "kind": "categorical"},
        {"name": "interface", "kind": "categorical"},
    ],
    "timezone": "UTC",
}

_PORTS = np.array([443, 80, 53, 22, 25, 123, 8080, 3389, 445])
_PORT_P = np.array([0.45, 0.20, 0.15, 0.05, 0.03, 0.04, 0.05, 0.01, 0.02])

PORT_SPIKE_HOUR = 6 * 24 + 2  # Sunday 02:00
IP_BURST_HOUR = 2 * 24 + 4  # Wednesday 04:00
BURST_SOURCE = "10.100.208.115"


@dataclass
class SyntheticWeek:
    columns: dict[str, np.ndarray]
    port_spike: np.ndarray  # bool mask
    ip_burst: np.ndarray  # bool mask

    @property
    def attack(self) -> np.ndarray:
        return self.port_spike | self.ip_burst

    def __len__(self) -> int:
        return int(self.attack.shape[0])

    def records(self, limit: int | None = None) -> list[dict]:
        """Row dicts (slow; for small slices and streaming demos)."""
        n = len(self) if limit is None else min(limit, len(self))
        names = list(self.columns)
        cols = [self.columns[k][:n].tolist() for k in names]
        return [dict(zip(names, vals)) for vals in zip(*cols)]


def _ips(prefix: str, hosts: np.ndarray) -> np.ndarray:
    return np.array([f"{prefix}.{h // 250}.{h % 250 + 1}" for h in hosts])


def _zipf_pick(rng: np.random.Generator, pool: np.ndarray, n: int, a: float = 1.1) -> np.ndarray:
    w = 1.0 / np.arange(1, pool.size + 1) ** a
    return pool[rng.choice(pool.size, size=n, p=w / w.sum())]


def _hour_weights() -> np.ndarray:
    hour = np.arange(168) % 24
    day = np.arange(168) // 24
    w = 0.15 + np.exp(-0.5 * ((hour - 13.5) / 3.5) ** 2)
    w[day >= 5] *= 0.35
    return w / w.sum()


def generate_week(n_rows: int = 1_000_000, attack_fraction: float = 0.02, seed: int = 0) -> SyntheticWeek:
    """Generate ``n_rows`` records; each attack window holds ``attack_fraction`` of them."""
    if n_rows < 100:
        raise ParameterError("n_rows must be >= 100")
    if not 0.0 < attack_fraction < 0.25:
        raise ParameterError("attack_fraction must be in (0, 0.25)")
    rng = np.random.default_rng(seed)
    n_att = max(1, int(round(n_rows * attack_fraction)))
    n_base = n_rows - 2 * n_att

    # baseline: records repeat a fixed set of flows (host, server, port)
    # with Zipf popularity, as real connection logs do
    n_flows = 400
    f_src = rng.integers(0, 1000, n_flows)
    f_dst = rng.integers(0, 120, n_flows)
    f_port = rng.choice(_PORTS, size=n_flows, p=_PORT_P)
    f_proto = np.where(np.isin(f_port, [53, 123]), "udp", "tcp").astype(object)
    flow = _zipf_pick(rng, rng.permutation(n_flows), n_base)
    hours = rng.choice(168, size=n_base, p=_hour_weights())
    ts = WEEK_START + hours * HOUR + rng.uniform(0, HOUR, n_base)
    src = _ips("192.168", f_src)[flow]
    dst = _ips("172.16", f_dst)[flow]
    port = f_port[flow]
    proto = f_proto[flow]
    action = np.full(n_base, "permit", dtype=object)
    iface = np.full(n_base, "inside", dtype=object)

    # port spike: external sources -> internal hosts on 3389
    ts1 = WEEK_START + PORT_SPIKE_HOUR * HOUR + rng.uniform(0, HOUR, n_att)
    src1 = np.array([f"{a}.{b}.{c}.{d}" for a, b, c, d in rng.integers([45, 0, 0, 1], [90, 256, 256, 255], (n_att, 4))])
    dst1 = _ips("192.168", rng.integers(0, 1000, n_att))
    port1 = np.full(n_att, 3389)
    proto1 = np.full(n_att, "tcp", dtype=object)
    action1 = np.where(rng.random(n_att) < 0.7, "deny", "permit").astype(object)
    iface1 = np.full(n_att, "outside", dtype=object)

    # single-IP burst: one source sweeping ports on a few targets
    ts2 = WEEK_START + IP_BURST_HOUR * HOUR + rng.uniform(0, HOUR, n_att)
    src2 = np.full(n_att, BURST_SOURCE)
    dst2 = _ips("172.16", rng.integers(0, 5, n_att))
    port2 = rng.integers(1, 65536, n_att)
    proto2 = np.full(n_att, "tcp", dtype=object)
    action2 = np.where(rng.random(n_att) < 0.5, "deny", "permit").astype(object)
    iface2 = np.full(n_att, "inside", dtype=object)

    cols = {
        "timestamp": np.concatenate([ts, ts1, ts2]),
        "src_ip": np.concatenate([src, src1, src2]).astype(object),
        "dst_ip": np.concatenate([dst, dst1, dst2]).astype(object),
        "dst_port": np.concatenate([port, port1, port2]).astype(np.int64),
        "protocol": np.concatenate([proto, proto1, proto2]),
        "action": np.concatenate([action, action1, action2]),
        "interface": np.concatenate([iface, iface1, iface2]),
    }
    kind = np.concatenate([np.zeros(n_base, np.int8), np.ones(n_att, np.int8), np.full(n_att, 2, np.int8)])
    order = np.argsort(cols["timestamp"], kind="stable")
    cols = {k: v[order] for k, v in cols.items()}
    kind = kind[order]
    return SyntheticWeek(columns=cols, port_spike=kind == 1, ip_burst=kind == 2)
