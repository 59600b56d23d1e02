import numpy as np
import pytest

from mcnsfv import mc, storage
from mcnsfv.fields import Field, State
from mcnsfv.mesh import build_mesh
from mcnsfv.random_data import ExperimentModel
from mcnsfv.scheme import SchemeConfig


def small_ensemble(seed=41, n=4, N=3):
    mesh = build_mesh(n, 2)
    model = ExperimentModel("steady_state", seed=seed)
    ens = mc.run_ensemble(model, mesh, SchemeConfig(T=0.1), a=1.0, gamma=1.4, N=N)
    return mesh, ens


def test_payload_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    values = rng.standard_normal((16, 3))
    path = tmp_path / "field.fvf1"
    storage.write_payload(path, values, d=2, n=4)
    back, d, n = storage.read_payload(path)
    assert (d, n) == (2, 4)
    assert back.tobytes() == values.astype("<f8").tobytes()


def test_payload_header_layout(tmp_path):
    path = tmp_path / "field.fvf1"
    storage.write_payload(path, np.zeros(16), d=2, n=4)
    raw = path.read_bytes()
    assert raw[:4] == b"FVF1"
    version, d, n, comps = np.frombuffer(raw[4:20], dtype="<u4")
    assert (version, d, n, comps) == (1, 2, 4, 1)
    assert len(raw) == 20 + 16 * 8


def test_payload_version_guard(tmp_path):
    path = tmp_path / "field.fvf1"
    storage.write_payload(path, np.zeros(16), d=2, n=4)
    raw = bytearray(path.read_bytes())
    raw[4] = 9  # bump the version field
    path.write_bytes(bytes(raw))
    with pytest.raises(storage.VersionMismatch):
        storage.read_payload(path)


def test_payload_truncation_guard(tmp_path):
    path = tmp_path / "field.fvf1"
    storage.write_payload(path, np.zeros(16), d=2, n=4)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(storage.TruncatedPayload):
        storage.read_payload(path)


def test_ensemble_round_trip(tmp_path):
    mesh, ens = small_ensemble()
    mc.save_ensemble(tmp_path, ens, mesh)
    back = mc.load_ensemble(tmp_path)
    assert back.sample_ids == ens.sample_ids
    assert back.failed_ids == []
    for r1, r2 in zip(ens.results, back.results):
        assert np.array_equal(r1.state.rho.values, r2.state.rho.values)
        assert np.array_equal(r1.state.mom.values, r2.state.mom.values)


def test_ensemble_corrupted_payload_names_sample(tmp_path):
    mesh, ens = small_ensemble()
    mc.save_ensemble(tmp_path, ens, mesh)
    victim = tmp_path / "sample_00001.fvf1"
    raw = bytearray(victim.read_bytes())
    raw[-1] ^= 0xFF
    victim.write_bytes(bytes(raw))
    with pytest.raises(storage.ChecksumMismatch) as err:
        mc.load_ensemble(tmp_path)
    assert "sample_00001" in str(err.value)


def test_ensemble_mesh_mismatch(tmp_path):
    mesh, ens = small_ensemble(n=4)
    mc.save_ensemble(tmp_path, ens, mesh)
    with pytest.raises(storage.MeshMismatch):
        mc.load_ensemble(tmp_path, expect_n=8)


def test_manifest_schema_keys(tmp_path):
    mesh, ens = small_ensemble()
    mc.save_ensemble(tmp_path, ens, mesh)
    manifest = storage.read_manifest(tmp_path)
    assert set(storage.MANIFEST_KEYS) <= set(manifest)
    with pytest.raises(storage.StorageError):
        storage.write_manifest(tmp_path, {"format_version": 1})


def test_reference_round_trip(tmp_path):
    mesh, ens = small_ensemble(N=4)
    ref = mc.reference_stats(ens, mesh)
    manifest = dict(ens.manifest)
    mc.save_reference(tmp_path, ref, manifest)
    back = mc.load_reference(tmp_path, expect_n=mesh.n)
    assert back.sample_count == len(ens.states)
    for attr in ("mean_rho", "mean_mom", "mean_u", "dev_rho", "dev_mom", "var_u"):
        assert np.array_equal(getattr(back, attr).values, getattr(ref, attr).values)


def test_reference_missing_manifest(tmp_path):
    with pytest.raises(storage.StorageError):
        mc.load_reference(tmp_path / "nowhere")


def test_csv_atomic_write(tmp_path):
    path = tmp_path / "metrics.csv"
    storage.write_csv_atomic(path, "a,b", ["1,2", "3,4"])
    assert path.read_text() == "a,b\n1,2\n3,4\n"
    assert not path.with_suffix(".csv.tmp").exists()
