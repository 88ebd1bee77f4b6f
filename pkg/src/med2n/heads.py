"""Few-shot metric head and the training-only global classifiers."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import Linear
from .errors import EpisodeError, LabelError

INITIAL_TEMPERATURE = 10.0


class PrototypeHead:
    """Nearest-prototype classifier with a learnable positive temperature.

    score(q, c) = -||q - prototype_c||^2 / T, with T = exp(log_temperature).
    """

    def __init__(self, temperature: float = INITIAL_TEMPERATURE, dtype=np.float32):
        self.log_temperature = Tensor(np.array([np.log(temperature)], dtype=dtype), requires_grad=True)

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data[0]))

    def parameters(self) -> list[Tensor]:
        return [self.log_temperature]

    def __call__(self, support_feats: Tensor, support_labels, query_feats: Tensor) -> Tensor:
        return fsl_predict(support_feats, support_labels, query_feats, self.log_temperature)


def averaging_matrix(labels, dtype) -> np.ndarray:
    """[N x NK] matrix whose row c averages the support items labelled c."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise EpisodeError(f"support labels must be a non-empty vector, got shape {labels.shape}")
    n = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n)
    if labels.min() < 0 or (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise EpisodeError(f"support set is missing classes {missing}")
    if (counts != counts[0]).any():
        raise EpisodeError(f"support classes must have equal shot counts, got {counts.tolist()}")
    avg = np.zeros((n, labels.size), dtype=dtype)
    avg[labels, np.arange(labels.size)] = 1.0 / counts[0]
    return avg


def fsl_predict(support_feats: Tensor, support_labels, query_feats: Tensor,
                log_temperature: Tensor | None = None) -> Tensor:
    """Log-probabilities [NM x N] of each query over the episode's classes."""
    avg = Tensor(averaging_matrix(support_labels, support_feats.dtype))
    protos = ad.matmul(avg, support_feats)
    q_sq = ad.tsum(ad.square(query_feats), axis=1, keepdims=True)
    p_sq = ad.reshape(ad.tsum(ad.square(protos), axis=1), (1, protos.shape[0]))
    cross = ad.matmul(query_feats, ad.transpose(protos))
    dist = ad.add(ad.sub(q_sq, ad.scale(cross, 2.0)), p_sq)
    if log_temperature is None:
        log_temperature = Tensor(np.array([np.log(INITIAL_TEMPERATURE)], dtype=support_feats.dtype))
    inv_t = ad.exp(ad.scale(log_temperature, -1.0))
    return ad.log_softmax(ad.scale(ad.mul(dist, inv_t), -1.0))


def fsl_loss(log_probs: Tensor, query_labels) -> Tensor:
    return ad.cross_entropy(log_probs, query_labels)


class GlobalClassifier(Linear):
    """Linear head over one dataset's full training class set."""

    def __init__(self, feature_dim: int, class_ids, rng: np.random.Generator | None = None,
                 dtype=np.float32, zero: bool = False):
        self.class_ids = np.asarray(sorted(int(c) for c in class_ids))
        super().__init__(feature_dim, len(self.class_ids), rng, dtype=dtype, zero=zero)
        self._lookup = {int(c): i for i, c in enumerate(self.class_ids)}

    @property
    def class_count(self) -> int:
        return len(self.class_ids)

    def local_labels(self, global_labels) -> np.ndarray:
        out = np.empty(len(global_labels), dtype=np.intp)
        for i, c in enumerate(np.asarray(global_labels)):
            try:
                out[i] = self._lookup[int(c)]
            except KeyError:
                raise LabelError(f"global label {int(c)} at index {i} is not one of this "
                                 f"classifier's {self.class_count} classes") from None
        return out


def global_loss(f: GlobalClassifier, feats: Tensor, global_labels) -> Tensor:
    return ad.cross_entropy(ad.log_softmax(f(feats)), f.local_labels(global_labels))
