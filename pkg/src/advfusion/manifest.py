"""Run manifest: which stages ran, over which config, producing which bytes."""

from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .archives import read_json, sha256_file, write_json
from .exceptions import MissingArtifactError

MANIFEST_NAME = "manifest.json"


class RunManifest:
    """Content-hash ledger for one output directory.

    Artifact paths are stored relative to the run directory so two runs of
    the same config in different places produce comparable manifests; the
    timestamps are the only fields expected to differ.
    """

    def __init__(self, run_dir: Path | str, config_hash: str):
        self.run_dir = Path(run_dir)
        self.data = {
            "tool_version": __version__,
            "config_hash": config_hash,
            "stages": {},
        }

    @property
    def path(self) -> Path:
        return self.run_dir / MANIFEST_NAME

    @classmethod
    def open(cls, run_dir: Path | str, config_hash: str) -> "RunManifest":
        """Load the existing manifest or start a fresh one for this config."""
        manifest = cls(run_dir, config_hash)
        if manifest.path.exists():
            stored = read_json(manifest.path)
            if stored.get("config_hash") == config_hash:
                manifest.data = stored
            # A different config in the same directory starts a fresh ledger;
            # stale stage entries must not vouch for new artifacts.
        return manifest

    @classmethod
    def require(cls, run_dir: Path | str) -> dict:
        path = Path(run_dir) / MANIFEST_NAME
        if not path.exists():
            raise MissingArtifactError(f"no manifest at {path}; run earlier stages first")
        return read_json(path)

    def record_stage(self, stage: str, artifacts: list[Path | str], extra: dict | None = None):
        entries = []
        for artifact in sorted(str(a) for a in artifacts):
            full = Path(artifact)
            entries.append({
                "path": full.relative_to(self.run_dir).as_posix(),
                "sha256": sha256_file(full),
            })
        self.data["stages"][stage] = {
            "completed_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "artifacts": entries,
            **({"extra": extra} if extra else {}),
        }
        write_json(self.path, self.data)

    def stage(self, name: str) -> dict | None:
        return self.data["stages"].get(name)

    def require_stage(self, name: str, hint: str) -> dict:
        entry = self.stage(name)
        if entry is None:
            raise MissingArtifactError(
                f"stage {name!r} has not run in {self.run_dir} ({hint})"
            )
        return entry

    def verify(self) -> list[str]:
        """Re-hash every recorded artifact; returns human-readable mismatches."""
        problems = []
        for stage, entry in self.data["stages"].items():
            for artifact in entry["artifacts"]:
                full = self.run_dir / artifact["path"]
                if not full.exists():
                    problems.append(f"{stage}: missing {artifact['path']}")
                elif sha256_file(full) != artifact["sha256"]:
                    problems.append(f"{stage}: content changed {artifact['path']}")
        return problems
