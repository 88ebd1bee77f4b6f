"""Two-stage training: domain teachers, then the gated multi-expert student.

Also hosts source pretraining (warm start for every network) and the
merged-data baseline.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import DEFAULT_CHANNELS, EmbeddingNet, Linear, build_embedding, forward_gated, forward_std, pretrain_forward
from .data import SOURCE, TARGET, Benchmark, DatasetSplit, Episode, sample_episode
from .errors import ConfigError, ContractError, NumericError
from .gate import GateMatrix, draw_hard_gates, init_gates, masks_from_draw
from .heads import GlobalClassifier, PrototypeHead, fsl_loss, global_loss
from .optim import Adam

log = logging.getLogger(__name__)

ROLES = ("pretrain", "st_teacher", "tt_teacher", "student", "m_base")
TEACHER_DOMAIN = {"st_teacher": SOURCE, "tt_teacher": TARGET}

# per-stage rng stream ids, mixed with the run seed
STREAM = {"pretrain": 1, "st_teacher": 2, "tt_teacher": 3, "student": 4, "m_base": 5,
          "eval": 6, "gates": 7, "heads": 8}


# 400 epochs x 100 episodes: the full-scale student schedule the gate rate is matched to
REFERENCE_STUDENT_STEPS = 40_000
GATE_LR_CAP = 100.0


def stage_rng(seed: int, stage: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAM[stage], *extra])


@dataclass
class LossWeights:
    lambda1: float = 0.2
    lambda2: float = 0.05
    lambda3: float = 0.05
    lambda4: float = 0.2

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if not (v >= 0 and math.isfinite(v)):
                raise ConfigError(f"{k} must be a finite non-negative number, got {v!r}")


@dataclass
class TrainConfig:
    n_way: int = 5
    k_shot: int = 5
    m_query: int = 15
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    pretrain_epochs: int = 30
    pretrain_batch: int = 64
    teacher_epochs: int = 40
    student_epochs: int = 60
    mbase_epochs: int = 60
    episodes_per_epoch: int = 100
    lr: float = 1e-3
    gate_lr: float | None = None
    tau: float = 1.0
    decompose_depth: int = 2
    mbase_mix: float = 0.5
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def effective_gate_lr(self) -> float:
        """Gate-logit rate; by default it keeps lr x steps equal to the reference schedule."""
        if self.gate_lr is not None:
            return float(self.gate_lr)
        steps = max(self.student_epochs * self.episodes_per_epoch, 1)
        return float(np.clip(self.lr * REFERENCE_STUDENT_STEPS / steps, self.lr, GATE_LR_CAP * self.lr))

    def validate(self) -> None:
        for k in ("n_way", "k_shot", "m_query", "pretrain_batch", "episodes_per_epoch"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        for k in ("pretrain_epochs", "teacher_epochs", "student_epochs", "mbase_epochs"):
            if getattr(self, k) < 0:
                raise ConfigError(f"{k} must be non-negative, got {getattr(self, k)}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.gate_lr is not None and not (isinstance(self.gate_lr, (int, float)) and self.gate_lr > 0):
            raise ConfigError(f"gate_lr must be positive or null, got {self.gate_lr!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.decompose_depth <= 4:
            raise ConfigError(f"decompose_depth must be in [0, 4], got {self.decompose_depth}")
        if not 0 <= self.mbase_mix <= 1:
            raise ConfigError(f"mbase_mix must be in [0, 1], got {self.mbase_mix}")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ConfigError(f"channels must be 4 positive ints, got {self.channels}")
        self.weights.validate()


class ModelBundle:
    """Embedding net + FSL head (+ global classifiers and gates for the student)."""

    def __init__(self, role: str, net: EmbeddingNet, head: PrototypeHead | None = None,
                 classifiers: dict[str, GlobalClassifier] | None = None, gates: GateMatrix | None = None,
                 pretrain_head: Linear | None = None, lr: float = 1e-3, gate_lr: float | None = None):
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}")
        self.role = role
        self.net = net
        self.head = head
        self.classifiers = classifiers or {}
        self.gates = gates
        self.pretrain_head = pretrain_head
        overrides = {id(gates.logits): gate_lr} if gates is not None and gate_lr is not None else None
        self.optimizer = Adam(self.parameters(), lr=lr, overrides=overrides)

    def parameters(self) -> list[Tensor]:
        params = list(self.net.parameters())
        if self.head is not None:
            params += self.head.parameters()
        for dom in sorted(self.classifiers):
            params += self.classifiers[dom].parameters()
        if self.gates is not None:
            params += self.gates.parameters()
        if self.pretrain_head is not None:
            params += self.pretrain_head.parameters()
        return params

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array, in a fixed order."""
        out = {f"net.{k}": v for k, v in self.net.state_arrays().items()}
        if self.head is not None:
            out["head.log_temperature"] = self.head.log_temperature.data
        for dom in sorted(self.classifiers):
            out[f"cls.{dom}.weight"] = self.classifiers[dom].weight.data
            out[f"cls.{dom}.bias"] = self.classifiers[dom].bias.data
        if self.gates is not None:
            out["gates.logits"] = self.gates.logits.data
        if self.pretrain_head is not None:
            out["pretrain_head.weight"] = self.pretrain_head.weight.data
            out["pretrain_head.bias"] = self.pretrain_head.bias.data
        for i, (m, v) in enumerate(zip(self.optimizer.state.m, self.optimizer.state.v)):
            out[f"opt.m.{i}"] = m
            out[f"opt.v.{i}"] = v
        return out

    def model_arrays(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.named_arrays().items() if not k.startswith("opt.")}

    def freeze(self) -> "ModelBundle":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.net.eval()
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())

    def clone(self, role: str | None = None) -> "ModelBundle":
        twin = copy.deepcopy(self)
        if role is not None:
            twin.role = role
        return twin

    def embed(self, images, masks=None) -> Tensor:
        return forward_std(self.net, images) if masks is None else forward_gated(self.net, images, masks)

    def episode_log_probs(self, ep: Episode, masks=None) -> tuple[Tensor, Tensor]:
        """Single forward over support+query; returns (query log-probs, all features)."""
        feats = self.embed(ep.images, masks)
        ns = len(ep.support_labels)
        s = ad.index(feats, slice(0, ns))
        q = ad.index(feats, slice(ns, None))
        return self.head(s, ep.support_labels, q), feats


def new_bundle(role: str, config: TrainConfig, bench: Benchmark, dtype=np.float32,
               decompose_depth: int | None = None) -> ModelBundle:
    """Fresh bundle for ``role``; weights are meant to be overwritten by a warm start."""
    spec = bench.spec
    depth = config.decompose_depth if decompose_depth is None else decompose_depth
    if role != "student":
        depth = 0
    net = build_embedding(config.channels, depth, input_shape=(3, spec.image_size, spec.image_size),
                          seed=config.seed, dtype=dtype)
    if role == "pretrain":
        head = Linear(net.feature_dim, len(bench.source_train.class_ids),
                      stage_rng(config.seed, "heads", 0), dtype=dtype)
        return ModelBundle(role, net, pretrain_head=head, lr=config.lr)
    classifiers, gates = {}, None
    if role == "student":
        classifiers = {
            SOURCE: GlobalClassifier(net.feature_dim, bench.source_train.class_ids,
                                     stage_rng(config.seed, "heads", 1), dtype=dtype),
            TARGET: GlobalClassifier(net.feature_dim, bench.target_aux.class_ids,
                                     stage_rng(config.seed, "heads", 2), dtype=dtype),
        }
        if depth > 0:
            gates = init_gates(net, stage_rng(config.seed, "gates"))
    return ModelBundle(role, net, PrototypeHead(dtype=dtype), classifiers, gates, lr=config.lr,
                       gate_lr=config.effective_gate_lr())


def warm_start(bundle: ModelBundle, pretrained: ModelBundle) -> ModelBundle:
    """Copy pretrained embedding weights and batch-norm statistics into ``bundle``."""
    bundle.net.load_state_arrays(pretrained.net.state_arrays())
    return bundle


def _check_finite(value: float, stage: str, epoch: int, bundle: "ModelBundle | None" = None) -> None:
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss in stage {stage!r} at epoch {epoch}")
    if bundle is not None:
        # relu maps NaN to 0, so a corrupted early layer can hide behind a finite loss
        for name, arr in bundle.model_arrays().items():
            if not np.isfinite(arr).all():
                raise NumericError(f"non-finite values in {name} in stage {stage!r} at epoch {epoch}")


EpochCallback = Callable[[str, int, dict], None]


# ---------------------------------------------------------------- pretraining


def pretrain(bundle: ModelBundle, split: DatasetSplit, config: TrainConfig,
             on_epoch: EpochCallback | None = None, rng: np.random.Generator | None = None) -> list[dict]:
    """Plain minibatch classification over the source training classes."""
    if bundle.role != "pretrain":
        raise ConfigError(f"pretraining needs a 'pretrain' bundle, got {bundle.role!r}")
    rng = rng if rng is not None else stage_rng(config.seed, "pretrain")
    lookup = {c: i for i, c in enumerate(split.class_ids)}
    labels = np.array([lookup[int(c)] for c in split.labels])
    curve = []
    bundle.net.train()
    for epoch in range(config.pretrain_epochs):
        order = rng.permutation(len(split))
        tot, correct = 0.0, 0
        for start in range(0, len(order), config.pretrain_batch):
            idx = order[start:start + config.pretrain_batch]
            if len(idx) < 2:
                continue
            logits = pretrain_forward(bundle.net, bundle.pretrain_head, split.images[idx], len(lookup))
            loss = ad.cross_entropy(ad.log_softmax(logits), labels[idx])
            bundle.optimizer.zero_grad()
            loss.backward()
            bundle.optimizer.step()
            tot += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == labels[idx]).sum())
        rec = {"loss": tot / len(order), "accuracy": 100.0 * correct / len(order)}
        _check_finite(rec["loss"], "pretrain", epoch, bundle)
        curve.append(rec)
        if on_epoch:
            on_epoch("pretrain", epoch, rec)
    return curve


# ---------------------------------------------------------------- teachers and baseline


def _episodic_step(bundle: ModelBundle, ep: Episode) -> tuple[float, float]:
    bundle.net.train()
    lp, _ = bundle.episode_log_probs(ep)
    loss = fsl_loss(lp, ep.query_labels)
    bundle.optimizer.zero_grad()
    loss.backward()
    bundle.optimizer.step()
    acc = 100.0 * float((lp.data.argmax(1) == ep.query_labels).mean())
    return loss.item(), acc


def _episodic_loop(bundle: ModelBundle, stage: str, epochs: int, config: TrainConfig,
                   draw: Callable[[np.random.Generator], Episode], rng: np.random.Generator,
                   on_epoch: EpochCallback | None) -> list[dict]:
    curve = []
    for epoch in range(epochs):
        losses, accs = [], []
        for _ in range(config.episodes_per_epoch):
            loss, acc = _episodic_step(bundle, draw(rng))
            losses.append(loss)
            accs.append(acc)
        rec = {"loss": float(np.mean(losses)), "accuracy": float(np.mean(accs)),
               "first_loss": losses[0]}
        _check_finite(rec["loss"], stage, epoch, bundle)
        curve.append(rec)
        if on_epoch:
            on_epoch(stage, epoch, rec)
    return curve


def train_teacher(bundle: ModelBundle, split: DatasetSplit, config: TrainConfig,
                  on_epoch: EpochCallback | None = None, rng: np.random.Generator | None = None) -> list[dict]:
    """Episodic training with the FSL loss alone."""
    want = TEACHER_DOMAIN.get(bundle.role)
    if want is None:
        raise ConfigError(f"train_teacher needs a teacher bundle, got role {bundle.role!r}")
    if split.domain != want:
        raise ConfigError(f"{bundle.role} trains on the {want} domain, got split {split.name!r} ({split.domain})")
    rng = rng if rng is not None else stage_rng(config.seed, bundle.role)
    n, k, m = config.n_way, config.k_shot, config.m_query
    return _episodic_loop(bundle, bundle.role, config.teacher_epochs, config,
                          lambda r: sample_episode(split, n, k, m, r, reuse_jitter=True), rng, on_epoch)


def train_mbase(bundle: ModelBundle, bench: Benchmark, config: TrainConfig,
                on_epoch: EpochCallback | None = None, stage: str = "m_base",
                rng: np.random.Generator | None = None) -> list[dict]:
    """FSL training on the merged pool; each episode is single-domain.

    The episode's domain is target with probability ``mbase_mix``. With a mix of
    0 no draw is made, so the rng stream matches source-teacher training.
    """
    if bundle.role != "m_base":
        raise ConfigError(f"train_mbase needs an 'm_base' bundle, got {bundle.role!r}")
    mix = config.mbase_mix
    n, k, m = config.n_way, config.k_shot, config.m_query
    src, tgt = bench.source_train, bench.target_aux

    def draw(r):
        split = tgt if (mix > 0 and r.random() < mix) else src
        return sample_episode(split, n, k, m, r, reuse_jitter=True)

    if rng is None:
        rng = stage_rng(config.seed, "m_base" if mix > 0 else "st_teacher")
    return _episodic_loop(bundle, stage, config.mbase_epochs, config, draw, rng, on_epoch)


def merged_class_pool(bench: Benchmark) -> list[int]:
    return sorted(set(bench.source_train.class_ids) | set(bench.target_aux.class_ids))


# ---------------------------------------------------------------- student


PATHS = ("dsg", "std")


def teacher_probs(teacher: ModelBundle, ep: Episode) -> np.ndarray:
    """Teacher predictions under the same normalization regime the student trains with."""
    with ad.no_grad():
        teacher.net.batch_stats()
        lp, _ = teacher.episode_log_probs(ep)
        teacher.net.eval()
    return np.exp(lp.data.astype(np.float64))


def _renormalize(p: np.ndarray, dtype) -> np.ndarray:
    p = p / p.sum(axis=1, keepdims=True)
    return p.astype(dtype)


def student_loss(student: ModelBundle, st_teacher: ModelBundle, tt_teacher: ModelBundle,
                 src_ep: Episode, tgt_ep: Episode, config: TrainConfig, rng: np.random.Generator):
    """Build the full loss graph; returns (total tensor, breakdown of floats)."""
    for t in (st_teacher, tt_teacher):
        if not t.frozen:
            raise ContractError(f"teacher {t.role!r} has trainable parameters; freeze it before distilling")
    if st_teacher.role != "st_teacher" or tt_teacher.role != "tt_teacher":
        raise ContractError(f"expected (st_teacher, tt_teacher), got ({st_teacher.role}, {tt_teacher.role})")
    w = config.weights
    dtype = student.net.dtype
    episodes = {SOURCE: src_ep, TARGET: tgt_ep}
    targets = {SOURCE: _renormalize(teacher_probs(st_teacher, src_ep), dtype),
               TARGET: _renormalize(teacher_probs(tt_teacher, tgt_ep), dtype)}
    draw = draw_hard_gates(student.gates, config.tau, rng) if student.gates is not None else None
    student.net.train()

    breakdown: dict = {}
    path_totals = {}
    for path in PATHS:
        if path == "dsg" and draw is None:
            continue
        terms = {}
        for dom, ep in episodes.items():
            masks = None
            if path == "dsg" and draw is not None:
                masks = masks_from_draw(student.gates, draw, dom).masks
            lp, feats = student.episode_log_probs(ep, masks)
            terms[dom] = {
                "kd": ad.kl_div(lp, targets[dom]),
                "fsl": fsl_loss(lp, ep.query_labels),
                "cls": global_loss(student.classifiers[dom], feats, ep.global_labels),
            }
        mixed = {name: ad.add(ad.scale(terms[SOURCE][name], w.lambda1),
                              ad.scale(terms[TARGET][name], 1.0 - w.lambda1))
                 for name in ("kd", "fsl", "cls")}
        total = ad.add(ad.add(mixed["kd"], ad.scale(mixed["fsl"], w.lambda2)), ad.scale(mixed["cls"], w.lambda3))
        path_totals[path] = total
        breakdown[path] = {
            **{f"{name}_{dom}": terms[dom][name].item() for dom in episodes for name in ("kd", "fsl", "cls")},
            **{name: mixed[name].item() for name in mixed},
            "total": total.item(),
        }
    if draw is None:
        # without gates the DSG path is the STD path; reuse its graph
        path_totals["dsg"] = path_totals["std"]
        breakdown["dsg"] = dict(breakdown["std"])
    loss = ad.add(path_totals["dsg"], ad.scale(path_totals["std"], w.lambda4))
    breakdown["total"] = loss.item()
    return loss, breakdown


def recombine(breakdown: dict, weights: LossWeights) -> float:
    """Recompute the total from per-domain components, in float64."""
    l1, l2, l3, l4 = weights.lambda1, weights.lambda2, weights.lambda3, weights.lambda4
    paths = {}
    for path in PATHS:
        b = breakdown[path]
        mix = {n: l1 * b[f"{n}_{SOURCE}"] + (1 - l1) * b[f"{n}_{TARGET}"] for n in ("kd", "fsl", "cls")}
        paths[path] = mix["kd"] + l2 * mix["fsl"] + l3 * mix["cls"]
    return paths["dsg"] + l4 * paths["std"]


def train_student_step(student: ModelBundle, st_teacher: ModelBundle, tt_teacher: ModelBundle,
                       src_ep: Episode, tgt_ep: Episode, config: TrainConfig,
                       rng: np.random.Generator) -> dict:
    """One optimization step of the student; returns the loss breakdown."""
    if student.role != "student":
        raise ConfigError(f"expected a student bundle, got {student.role!r}")
    loss, breakdown = student_loss(student, st_teacher, tt_teacher, src_ep, tgt_ep, config, rng)
    student.optimizer.zero_grad()
    loss.backward()
    student.optimizer.step()
    return breakdown


def train_student(student: ModelBundle, st_teacher: ModelBundle, tt_teacher: ModelBundle,
                  bench: Benchmark, config: TrainConfig, on_epoch: EpochCallback | None = None,
                  on_checkpoint: Callable[[int], None] | None = None, checkpoint_every: int = 10,
                  stage: str = "student", rng: np.random.Generator | None = None) -> list[dict]:
    rng = rng if rng is not None else stage_rng(config.seed, "student")
    n, k, m = config.n_way, config.k_shot, config.m_query
    curve = []
    for epoch in range(config.student_epochs):
        totals = []
        for _ in range(config.episodes_per_epoch):
            src_ep = sample_episode(bench.source_train, n, k, m, rng, reuse_jitter=True)
            tgt_ep = sample_episode(bench.target_aux, n, k, m, rng, reuse_jitter=True)
            b = train_student_step(student, st_teacher, tt_teacher, src_ep, tgt_ep, config, rng)
            totals.append(b)
        rec = {"loss": float(np.mean([b["total"] for b in totals]))}
        for path in PATHS:
            for key in ("kd", "fsl", "cls"):
                rec[f"{path}_{key}"] = float(np.mean([b[path][key] for b in totals]))
        _check_finite(rec["loss"], stage, epoch, student)
        curve.append(rec)
        if on_epoch:
            on_epoch(stage, epoch, rec)
        if on_checkpoint and (epoch + 1) % checkpoint_every == 0:
            on_checkpoint(epoch + 1)
    return curve
