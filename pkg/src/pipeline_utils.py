import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from src.errors import DependencyError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# Stage order and the artifacts each stage produces
STAGES = ["generate", "pretrain", "finetune", "shap", "select", "dknn", "eval", "report"]


def compute_sha256(path: Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def fingerprint(payload: dict, upstream: Dict[str, str]) -> str:
    """Hash of a stage's config payload and the hashes of the artifacts it reads."""
    document = json.dumps({"config": payload, "upstream": upstream}, sort_keys=True)
    return hashlib.sha256(document.encode("utf8")).hexdigest()


class ArtifactStore:
    """
    Output directory plus a manifest of every artifact's SHA-256.

    The manifest also records, per stage, the fingerprint it ran with, so a
    stage is skipped when its fingerprint is unchanged and its outputs are
    intact.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest_path = self.root / MANIFEST_NAME
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"version": MANIFEST_VERSION, "artifacts": {}, "stages": {}}

    def ensure(self) -> "ArtifactStore":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def producer(self, name: str) -> Optional[str]:
        entry = self.manifest["artifacts"].get(name)
        return entry["stage"] if entry else None

    def require(self, stage: str, names: Iterable[str], producer: str) -> Dict[str, str]:
        """
        Check that upstream artifacts exist and return their current hashes.

        Raises:
            DependencyError: Naming the stage that must run first.
        """
        hashes = {}
        for name in names:
            path = self.path(name)
            if not path.exists():
                raise DependencyError(
                    f"stage '{stage}' needs {name}; run stage '{producer}' first",
                    stage=producer,
                )
            hashes[name] = compute_sha256(path)
        return hashes

    def is_fresh(self, stage: str, stage_fingerprint: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if entry is None or entry["fingerprint"] != stage_fingerprint:
            return False
        for name in entry["outputs"]:
            path = self.path(name)
            recorded = self.manifest["artifacts"].get(name)
            if not path.exists() or recorded is None or compute_sha256(path) != recorded["sha256"]:
                return False
        return True

    def record(self, stage: str, stage_fingerprint: str, outputs: Sequence[str]) -> None:
        for name in outputs:
            path = self.path(name)
            self.manifest["artifacts"][name] = {
                "sha256": compute_sha256(path),
                "bytes": path.stat().st_size,
                "stage": stage,
            }
        self.manifest["stages"][stage] = {
            "fingerprint": stage_fingerprint,
            "outputs": sorted(outputs),
        }
        self.save()

    def save(self) -> Path:
        self.ensure()
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        return self.manifest_path

    def outputs_of(self, stage: str) -> List[str]:
        entry = self.manifest["stages"].get(stage)
        return list(entry["outputs"]) if entry else []
