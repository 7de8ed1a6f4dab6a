"""Text serialization of exit policies."""

from pathlib import Path
from typing import List, Optional

from loguru import logger

from services.errors import FormatError, WiseError
from services.wise.base import ExitChain, ExitPolicy, LateralMode, WiseWeights

POLICY_HEADER = "# cascade-kd exit policy v1"


def _fmt(value: float) -> str:
    return format(value, ".17g")


def policy_to_text(policy: ExitPolicy) -> str:
    lines = [
        POLICY_HEADER,
        f"mode {policy.mode.value}",
        f"tau {_fmt(policy.tau)}",
        f"chain {policy.chain.text()}",
    ]
    if policy.weights is not None:
        for L, row in enumerate(policy.weights.betas, start=1):
            lines.append(f"beta {L} " + " ".join(_fmt(b) for b in row))
    return "\n".join(lines) + "\n"


def parse_policy(text: str, source: str = "<policy>") -> ExitPolicy:
    mode: Optional[LateralMode] = None
    tau: Optional[float] = None
    chain: Optional[ExitChain] = None
    betas: List[tuple] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        try:
            if key == "mode":
                mode = LateralMode.parse(rest.strip())
            elif key == "tau":
                tau = float(rest)
            elif key == "chain":
                chain = ExitChain.parse(rest)
            elif key == "beta":
                fields = rest.split()
                position = int(fields[0])
                if position != len(betas) + 1:
                    raise FormatError(f"beta rows out of order, expected position {len(betas) + 1}")
                betas.append(tuple(float(v) for v in fields[1:]))
            else:
                raise FormatError(f"unknown directive {key!r}")
        except (ValueError, IndexError, WiseError, FormatError) as e:
            raise FormatError(f"{source} line {lineno}: {e}")

    if mode is None or tau is None or chain is None:
        raise FormatError(f"{source}: policy needs mode, tau and chain lines")
    try:
        weights = WiseWeights(tuple(betas)) if betas else None
        return ExitPolicy(chain=chain, mode=mode, tau=tau, weights=weights)
    except WiseError as e:
        raise FormatError(f"{source}: {e}")


def save_policy(path: Path, policy: ExitPolicy) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(policy_to_text(policy), encoding="utf-8")
    logger.info(f"Saved {policy.mode.value} policy ({len(policy.chain)} exits) → {path}")


def load_policy(path: Path) -> ExitPolicy:
    path = Path(path)
    return parse_policy(path.read_text(encoding="utf-8"), source=path.name)
