"""Smoke test for the hacommit extension.

Uses an installed module if there is one, otherwise loads the library from
target/release (build it with `cargo build --release -p hacommit-py`).
"""

import importlib.util
import json
import pathlib
import sys
import sysconfig


def load():
    try:
        import hacommit

        return hacommit
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parent.parent
    for name in ("libhacommit.so", "libhacommit.dylib", "hacommit.dll"):
        lib = root / "target" / "release" / name
        if lib.exists():
            spec = importlib.util.spec_from_file_location("hacommit", lib)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            sys.modules["hacommit"] = module
            return module
    sys.exit(f"hacommit extension not found (suffix {sysconfig.get_config_var('EXT_SUFFIX')})")


hc = load()

assert hc.protocols() == ["hacommit", "hacommit-rc", "2pc", "rcommit"]

topo = hc.Topology(5, 1, 5)
assert topo.members(0) == [1, 2, 3, 4, 5]
assert topo.quorum_size(0) == 3
assert topo.first_client_id() == 6

# fault-free: every commit takes two one-way delays plus the apply cost
cfg = hc.Config(protocol="hacommit", ops_per_txn=4, txns=50, seed=3)
run = cfg.run()
m = run.metrics()
assert m["committed"] == 50, m["committed"]
assert min(m["latencies_us"]) >= 100, min(m["latencies_us"])
report = run.audit()
assert report.passed and bool(report), report.summary()
assert report.violations() == []

# the trace survives a round trip and audits the same
again = hc.audit_jsonl(run.trace_jsonl())
assert again.to_dict() == report.to_dict()

# determinism
assert hc.Config(protocol="hacommit", ops_per_txn=4, txns=50, seed=3).run().trace_jsonl() == run.trace_jsonl()

# config json round trip
assert hc.Config.from_json(cfg.to_json()).to_json() == cfg.to_json()

# 2PC with a coordinator crash between the phases blocks but stays safe
blocked = hc.Config(
    protocol="2pc", nodes=3, shards=1, replicas=1, txns=1, ops_per_txn=2, read_fraction=0.0,
    timeout_ms=10, fault_schedule="600 crash 4",
).run().audit()
assert blocked.passed
assert len(blocked.blocked()) == 1 and blocked.blocked()[0]["coordinator_crashed"]

# serializable runs admit a serial order
order = hc.Config(clients=3, key_space=4, ops_per_txn=3, txns=30, seed=5, shards=4, nodes=4).run().check_serializable()
assert len(order) > 0

assert hc.normalize_fault_schedule("10 crash 2\n20 heal") == "10 crash 2\n20 heal\n"
try:
    hc.Config(protocol="3pc")
except ValueError:
    pass
else:
    raise AssertionError("unknown protocol accepted")

print(json.dumps({"commits": m["committed"], "mean_latency_us": m["mean_latency_us"], "audit": report.summary()}))
print("smoke test passed")
