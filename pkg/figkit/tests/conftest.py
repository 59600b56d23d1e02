import hashlib
import json
import struct

import numpy as np
import pytest


@pytest.fixture
def make_payload(tmp_path):
    """Write an FVF1 payload (and optionally a manifest) from raw bytes."""

    def _make(name="field.fvf1", n=8, d=2, comps=1, values=None, manifest=True,
              version=1):
        if values is None:
            rng = np.random.default_rng(0)
            values = rng.standard_normal((n**d, comps))
        blob = b"FVF1" + struct.pack("<4I", version, d, n, comps)
        blob += np.asarray(values, dtype="<f8").tobytes()
        path = tmp_path / name
        path.write_bytes(blob)
        if manifest:
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            manifest_data = {
                "format_version": 1,
                "payload_checksums": {name: digest},
            }
            (tmp_path / "manifest.json").write_text(json.dumps(manifest_data))
        return path

    return _make


@pytest.fixture
def make_metrics_csv(tmp_path):
    def _make(name="metrics.csv", rows=None):
        header = "experiment,field,metric,p,N,M,S,value"
        if rows is None:
            rows = []
            for field, p in (("rho", 1.4), ("m", 7 / 6), ("u", 2.0)):
                for metric in ("E1", "E2", "E3", "E4"):
                    for n in (5, 10, 20, 40, 80):
                        rows.append(f"steady_state,{field},{metric},{p},{n},10,512,"
                                    f"{0.3 * n ** -0.5!r}")
        path = tmp_path / name
        path.write_text("\n".join([header, *rows]) + "\n")
        return path

    return _make
