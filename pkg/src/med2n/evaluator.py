"""Episode-level evaluation with the three test-time strategies."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit, sample_episode
from .errors import ConfigError
from .gate import infer_masks
from .trainer import ModelBundle

STRATEGIES = ("std", "dsg", "both")


@dataclass
class EvalReport:
    strategy: str
    split: str
    episodes: int
    mean_accuracy: float
    ci95: float
    accuracies: list[float] = field(default_factory=list)
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def summarize(accuracies: list[float]) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 x standard error, sample std)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2:
        return float(a.mean()), 0.0
    return float(a.mean()), float(1.96 * a.std(ddof=1) / np.sqrt(a.size))


def combine_paths(lp_dsg: np.ndarray, lp_std: np.ndarray) -> np.ndarray:
    """Average the two paths' predictions on the probability scale."""
    return 0.5 * (np.exp(lp_dsg.astype(np.float64)) + np.exp(lp_std.astype(np.float64)))


def episode_predictions(bundle: ModelBundle, ep, strategies, domain: str) -> dict[str, np.ndarray]:
    """Per-strategy [NM x N] probability matrices for one episode (eval mode, no graph)."""
    out = {}
    with ad.no_grad():
        bundle.net.eval()
        need_std = any(s in ("std", "both") for s in strategies)
        need_dsg = any(s in ("dsg", "both") for s in strategies)
        lp_std = bundle.episode_log_probs(ep)[0].data if need_std else None
        lp_dsg = None
        if need_dsg:
            masks = infer_masks(bundle.gates, domain).masks
            lp_dsg = bundle.episode_log_probs(ep, masks)[0].data
    for s in strategies:
        if s == "std":
            out[s] = np.exp(lp_std.astype(np.float64))
        elif s == "dsg":
            out[s] = np.exp(lp_dsg.astype(np.float64))
        else:
            out[s] = combine_paths(lp_dsg, lp_std)
    return out


def evaluate_strategies(bundle: ModelBundle, split: DatasetSplit, strategies=STRATEGIES, n_way: int = 5,
                        k_shot: int = 5, m_query: int = 15, episodes: int = 200,
                        rng: np.random.Generator | None = None, config_fingerprint: str = "") -> dict[str, EvalReport]:
    """Evaluate several strategies on one shared stream of episodes.

    The DSG path binarizes gates by argmax and uses the mask of the split's domain.
    """
    strategies = tuple(strategies)
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}; expected one of {STRATEGIES}")
        if s != "std" and bundle.gates is None:
            raise ConfigError(f"strategy {s!r} needs a gate matrix, but this {bundle.role} has none")
    rng = rng if rng is not None else np.random.default_rng(0)
    accs = {s: [] for s in strategies}
    was_training = bundle.net.training
    for _ in range(episodes):
        ep = sample_episode(split, n_way, k_shot, m_query, rng)
        preds = episode_predictions(bundle, ep, strategies, split.domain)
        for s, p in preds.items():
            accs[s].append(100.0 * float((p.argmax(1) == ep.query_labels).mean()))
    if was_training:
        bundle.net.train()
    reports = {}
    for s in strategies:
        m, ci = summarize(accs[s])
        reports[s] = EvalReport(s, split.name, episodes, m, ci, accs[s], config_fingerprint)
    return reports


def evaluate(bundle: ModelBundle, split: DatasetSplit, strategy: str = "both", n_way: int = 5, k_shot: int = 5,
             m_query: int = 15, episodes: int = 200, rng: np.random.Generator | None = None,
             config_fingerprint: str = "") -> EvalReport:
    return evaluate_strategies(bundle, split, (strategy,), n_way, k_shot, m_query, episodes, rng,
                               config_fingerprint)[strategy]


def evaluate_source(bundle: ModelBundle, split: DatasetSplit, strategy: str = "both", **kwargs) -> EvalReport:
    """Evaluation on held-out source classes; the DSG path uses the source mask."""
    if split.domain != "source":
        raise ConfigError(f"evaluate_source needs a source-domain split, got {split.name!r} ({split.domain})")
    return evaluate(bundle, split, strategy, **kwargs)
