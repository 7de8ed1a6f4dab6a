import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from loguru import logger

from services.errors import ArtifactExistsError, CascadeError

MANIFEST_NAME = "manifest.json"


@dataclass
class RunPaths:
    out_dir: Path
    checkpoints_dir: Path
    reports_dir: Path
    data_dir: Path

    @staticmethod
    def under(out_dir: Path) -> "RunPaths":
        out_dir = Path(out_dir)
        return RunPaths(
            out_dir=out_dir,
            checkpoints_dir=out_dir / "checkpoints",
            reports_dir=out_dir / "reports",
            data_dir=out_dir / "data",
        )


def ensure_directories(paths: RunPaths) -> None:
    # Create all directories we rely on
    for d in [paths.out_dir, paths.checkpoints_dir, paths.reports_dir, paths.data_dir]:
        d.mkdir(parents=True, exist_ok=True)


def normalize_path(p: Path) -> str:
    # Store paths in JSON using forward slashes for consistency
    return str(Path(p).as_posix())


def claim_output(path: Path) -> Path:
    """Refuse to overwrite: output directories are append-only."""
    path = Path(path)
    if path.exists():
        raise ArtifactExistsError(f"refusing to overwrite existing artifact {normalize_path(path)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class RunManifest:
    command: str
    config_hash: str
    tool_version: str
    seed: Optional[int] = None
    artifacts: List[str] = field(default_factory=list)
    wall_time_s: float = 0.0
    started_at: str = ""

    @staticmethod
    def from_dict(d: dict) -> "RunManifest":
        """Create a manifest tolerantly; unknown keys are dropped."""
        seed = d.get("seed")
        return RunManifest(
            command=str(d.get("command", "")),
            config_hash=str(d.get("config_hash", "")),
            tool_version=str(d.get("tool_version", "")),
            seed=int(seed) if seed is not None else None,
            artifacts=[str(a).replace("\\", "/") for a in d.get("artifacts", [])],
            wall_time_s=float(d.get("wall_time_s", 0.0)),
            started_at=str(d.get("started_at", "")),
        )


class ManifestRecorder:
    """Collects artifacts written by one command and writes the manifest at the end."""

    def __init__(self, out_dir: Path, command: str, config_hash: str, tool_version: str, seed: Optional[int] = None):
        self.out_dir = Path(out_dir)
        self.manifest = RunManifest(
            command=command,
            config_hash=config_hash,
            tool_version=tool_version,
            seed=seed,
            started_at=time.strftime("%Y-%m-%d %H:%M:%S"),
        )
        self._start = time.monotonic()

    def add(self, path: Path) -> Path:
        rel = Path(path)
        try:
            rel = rel.relative_to(self.out_dir)
        except ValueError:
            pass
        self.manifest.artifacts.append(normalize_path(rel))
        return Path(path)

    def finish(self) -> Path:
        missing = [a for a in self.manifest.artifacts if not (self.out_dir / a).exists()]
        if missing:
            raise CascadeError(f"manifest lists artifacts that were never written: {missing}")
        self.manifest.wall_time_s = round(time.monotonic() - self._start, 3)
        path = claim_output(self.out_dir / MANIFEST_NAME)
        path.write_text(json.dumps(asdict(self.manifest), indent=2), encoding="utf-8")
        logger.info(f"Saved run manifest ({len(self.manifest.artifacts)} artifacts) → {path}")
        return path


def load_manifest(out_dir: Path) -> RunManifest:
    data: Dict = json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))
    return RunManifest.from_dict(data)
