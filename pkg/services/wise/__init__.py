"""Weighted inference with scaled ensembles over an early-exit chain."""

from typing import Optional

from services.wise.base import (
    DEFAULT_CHAIN_ORDER,
    NEVER_EXIT_TAU,
    ExitChain,
    ExitPoint,
    ExitPolicy,
    ExitTrace,
    LateralMode,
    PolicyEvaluation,
    WiseWeights,
)
from services.wise.engine import (
    ExitEngine,
    ISO_SPREAD_LIMIT,
    IsoComputeResult,
    check_iso_spread,
    evaluate_policy,
    infer_early_exit,
    iso_compute_threshold_search,
)
from services.wise.ensemble import combine_batch, ensemble_combine, fit_wise, wise_loss
from services.wise.policy_io import load_policy, parse_policy, policy_to_text, save_policy


def get_policy(
    mode: LateralMode,
    chain: ExitChain,
    tau: float,
    engine: Optional[ExitEngine] = None,
    weights: Optional[WiseWeights] = None,
) -> ExitPolicy:
    """Build a policy of the given lateral mode, fitting WISE weights on ``engine`` if none are given."""
    if mode is LateralMode.WISE and weights is None:
        if engine is None:
            raise ValueError("WISE policy needs fitted weights or an engine to fit them on")
        weights = engine.fit_weights(chain)
    return ExitPolicy(chain=chain, mode=mode, tau=tau, weights=weights if mode is LateralMode.WISE else None)


__all__ = [
    "DEFAULT_CHAIN_ORDER",
    "ISO_SPREAD_LIMIT",
    "NEVER_EXIT_TAU",
    "ExitChain",
    "ExitEngine",
    "ExitPoint",
    "ExitPolicy",
    "ExitTrace",
    "IsoComputeResult",
    "LateralMode",
    "PolicyEvaluation",
    "WiseWeights",
    "check_iso_spread",
    "combine_batch",
    "ensemble_combine",
    "evaluate_policy",
    "fit_wise",
    "get_policy",
    "infer_early_exit",
    "iso_compute_threshold_search",
    "load_policy",
    "parse_policy",
    "policy_to_text",
    "save_policy",
    "wise_loss",
]
