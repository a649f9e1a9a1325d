import pytest

from src.errors import DependencyError
from src.pipeline_utils import ArtifactStore, compute_sha256, fingerprint


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "out").ensure()


def test_fingerprint_tracks_payload_and_upstream():
    base = fingerprint({"stage": "eval", "seed": 1}, {"a.csv": "00"})
    assert base == fingerprint({"seed": 1, "stage": "eval"}, {"a.csv": "00"})
    assert base != fingerprint({"stage": "eval", "seed": 2}, {"a.csv": "00"})
    assert base != fingerprint({"stage": "eval", "seed": 1}, {"a.csv": "01"})


def test_require_names_the_producer(store):
    with pytest.raises(DependencyError) as info:
        store.require("report", ["metrics.csv"], "eval")
    assert info.value.stage == "eval"
    assert "eval" in str(info.value)


def test_require_returns_hashes(store):
    store.path("a.txt").write_text("hello")
    assert store.require("x", ["a.txt"], "y") == {"a.txt": compute_sha256(store.path("a.txt"))}


class TestFreshness:
    def test_recorded_stage_is_fresh(self, store):
        store.path("a.txt").write_text("hello")
        store.record("generate", "fp1", ["a.txt"])
        assert store.is_fresh("generate", "fp1")
        assert not store.is_fresh("generate", "fp2")
        assert not store.is_fresh("pretrain", "fp1")

    def test_edited_output_is_stale(self, store):
        store.path("a.txt").write_text("hello")
        store.record("generate", "fp1", ["a.txt"])
        store.path("a.txt").write_text("changed")
        assert not store.is_fresh("generate", "fp1")

    def test_deleted_output_is_stale(self, store):
        store.path("a.txt").write_text("hello")
        store.record("generate", "fp1", ["a.txt"])
        store.path("a.txt").unlink()
        assert not store.is_fresh("generate", "fp1")

    def test_manifest_survives_reopening(self, store):
        store.path("a.txt").write_text("hello")
        store.record("generate", "fp1", ["a.txt"])
        reopened = ArtifactStore(store.root)
        assert reopened.is_fresh("generate", "fp1")
        assert reopened.producer("a.txt") == "generate"
        assert reopened.outputs_of("generate") == ["a.txt"]
