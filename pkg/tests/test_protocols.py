import numpy as np
import pytest

from quantfair.errors import ConfigError, SingleClassError
from quantfair.ingestion import SyntheticSpec, generate_synthetic
from quantfair.protocols import PROTOCOLS, ProtocolSpec, run_decoupling, run_protocol, size_grid
from quantfair.protocols.runner import PERMUTATIONS, split_parts


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SyntheticSpec(1800, 4, (1.0, 1.5, 1.5, 1.0),
                                            (0.3, 0.2, 0.2, 0.3), seed=3))


def oracle_fit_for(dataset):
    lookup = {row.tobytes(): s for row, s in zip(dataset.features, dataset.sensitive)}

    def fit_fn(method, _train):
        return lambda X: float(np.mean([lookup[r.tobytes()] for r in X]))
    return fit_fn


def jsonl(records):
    return [r.to_json() for r in records]


@pytest.mark.parametrize("protocol", PROTOCOLS)
def test_loop_count_audit(small, protocol):
    spec = ProtocolSpec(protocol, methods=("CC", "MLPE"), n_splits=1, n_repeats=2,
                        sample_size=100, min_size=100)
    records = run_protocol(spec, small)
    grid = spec.resolved_grid(len(small) // 3)
    assert len(records) == len(grid) * 1 * 6 * 2 * 2
    assert not any(r.failed for r in records)
    keys = {(r.split_id, r.permutation_id, r.repeat_id, r.grid_index, r.method) for r in records}
    assert len(keys) == len(records)
    for r in records:
        assert r.signed_error == r.estimated_dd - r.true_dd
        assert -1 <= r.estimated_dd <= 1


def test_paper_scale_count_arithmetic():
    spec = ProtocolSpec.paper("sample-prev-D3-neg", methods=("CC",))
    assert len(spec.resolved_grid(1000)) * spec.n_splits * len(PERMUTATIONS) \
        * spec.n_repeats * len(spec.methods) == 3300


@pytest.mark.parametrize("protocol", ["sample-prev-D3-neg", "sample-prev-D3-pos"])
def test_oracle_quantifier_error_bound(small, protocol):
    spec = ProtocolSpec(protocol, methods=("CC",), n_splits=1, n_repeats=1, sample_size=200)
    records = run_protocol(spec, small, fit_fn=oracle_fit_for(small))
    # each evaluated branch holds sample_size rows
    assert max(abs(r.signed_error) for r in records) <= 2 / 200


def test_mlpe_unbiased_without_auxiliary_shift(small):
    for protocol in ("sample-prev-D1", "flip-prev-D1"):
        spec = ProtocolSpec(protocol, methods=("MLPE",), n_splits=1, n_repeats=2,
                            sample_size=300)
        errs = [r.signed_error for r in run_protocol(spec, small)]
        assert abs(np.mean(errs)) <= 0.02


def test_deterministic_across_workers(small):
    spec = ProtocolSpec("sample-prev-D2-pos", methods=("PCC", "SLD"), n_splits=1,
                        n_repeats=1, sample_size=150, grid=(0.3, 0.7))
    a = run_protocol(spec, small, jobs=1)
    b = run_protocol(spec, small, jobs=2)
    assert jsonl(a) == jsonl(b)


def test_method_list_does_not_change_draws(small):
    base = dict(n_splits=1, n_repeats=1, sample_size=150, grid=(0.2, 0.8))
    one = run_protocol(ProtocolSpec("sample-prev-D1", methods=("CC",), **base), small)
    two = run_protocol(ProtocolSpec("sample-prev-D1", methods=("MLPE", "CC"), **base), small)
    assert jsonl(one) == jsonl([r for r in two if r.method == "CC"])


def test_splits_shared_across_methods_and_protocols(small):
    base = dict(methods=("CC", "PCC"), n_splits=2, n_repeats=1, sample_size=100, grid=(0.5,))
    a = run_protocol(ProtocolSpec("sample-prev-D3-neg", **base), small)
    b = run_protocol(ProtocolSpec("flip-prev-D1", **base), small)
    for split in (0, 1):
        hashes = {r.split_hash for r in a + b if r.split_id == split}
        assert len(hashes) == 1
    assert len({r.split_hash for r in a}) == 2


def test_split_parts_cover_dataset(small):
    parts = split_parts(small, 0, 0)
    assert sorted(np.concatenate(parts).tolist()) == list(range(len(small)))


def test_failures_are_recorded_not_raised(small):
    def flaky(method, train):
        if method == "PCC":
            raise SingleClassError("simulated")
        return lambda X: 0.5

    spec = ProtocolSpec("sample-prev-D3-neg", methods=("CC", "PCC"), n_splits=1, n_repeats=1,
                        sample_size=100, grid=(0.5,))
    records = run_protocol(spec, small, fit_fn=flaky)
    assert len(records) == 12
    bad = [r for r in records if r.method == "PCC"]
    assert all(r.failed and "single-class" in r.failure for r in bad)
    assert not any(r.failed for r in records if r.method == "CC")


def test_size_grid_is_geometric():
    sizes = size_grid(1000, 15074, 5)
    assert sizes[0] == 1000 and sizes[-1] == 15074 and len(sizes) == 5
    ratio = (15074 / 1000) ** 0.25
    # constant ratio up to rounding each size to an integer
    for i, size in enumerate(sizes):
        assert abs(size - 1000 * ratio ** i) <= 0.5


@pytest.mark.parametrize("kw", [
    dict(protocol="sample-prev-D9"),
    dict(protocol="sample-prev-D2-neg", grid=(0.0, 0.5)),
    dict(protocol="sample-prev-D3-neg", grid=(1.5,)),
    dict(protocol="sample-size-D2", grid=(1,)),
    dict(protocol="sample-prev-D1", methods=()),
    dict(protocol="sample-prev-D1", methods=("KNN",)),
])
def test_spec_validation(kw):
    with pytest.raises(ConfigError):
        ProtocolSpec(**kw)


def test_default_grids():
    assert len(ProtocolSpec("sample-prev-D3-pos").resolved_grid(5000)) == 11
    assert ProtocolSpec("sample-prev-D2-neg").resolved_grid(5000) == tuple(
        round(i / 10, 1) for i in range(1, 10))
    assert len(ProtocolSpec("sample-size-D2").resolved_grid(5000)) == 5


def test_decoupling_records(small):
    spec = ProtocolSpec("sample-prev-D2-neg", methods=("CC", "PACC"), n_splits=1, n_repeats=1,
                        sample_size=150, grid=(0.3, 0.6))
    recs = run_decoupling(spec, small)
    assert len(recs) == 2 * 6 * 2 * 2
    by = {}
    for r in recs:
        by.setdefault((r.permutation_id, r.grid_index, r.branch), {})[r.method] = r
    for pair in by.values():
        assert pair["CC"].accuracy == pair["PACC"].accuracy
        assert pair["CC"].f1 == pair["PACC"].f1
    with pytest.raises(ConfigError):
        run_decoupling(ProtocolSpec("sample-prev-D1", methods=("CC",)), small)
