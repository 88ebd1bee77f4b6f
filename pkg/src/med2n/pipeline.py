"""Stage drivers shared by the CLI and the end-to-end experiments.

Every driver reads its inputs from a :class:`Workspace` directory and writes
its outputs back there. The files a stage produces depend only on the config
(seed included) and its input files: wall-clock timings live in a separate
``timing/`` log so metric logs and reports stay byte-reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import jsonschema
import numpy as np

from . import autodiff as ad
from . import plots
from .backbone import block_activation
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SOURCE, TARGET, Benchmark, SyntheticSpec, generate_benchmark
from .errors import ConfigError, MissingPrerequisiteError
from .evaluator import STRATEGIES, evaluate_strategies, fingerprint
from .gate import gate_statistics, hard_assignment
from .trainer import (ModelBundle, new_bundle, pretrain, stage_rng, train_mbase, train_student, train_teacher,
                      warm_start)

log = logging.getLogger(__name__)

RESULTS_FORMAT = "med2n-results/1"
GATE_STATS_FORMAT = "med2n-gate-stats/1"

GATE_STATS_SCHEMA = {
    "type": "object",
    "required": ["format", "checkpoint", "decompose_depth", "blocks"],
    "additionalProperties": False,
    "properties": {
        "format": {"const": GATE_STATS_FORMAT},
        "checkpoint": {"type": "string"},
        "decompose_depth": {"type": "integer", "minimum": 1, "maximum": 4},
        "config_fingerprint": {"type": "string"},
        "blocks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["block", "total", "source_count", "target_count"],
                "additionalProperties": False,
                "properties": {
                    "block": {"type": "integer", "minimum": 1, "maximum": 4},
                    "total": {"type": "integer", "minimum": 1},
                    "source_count": {"type": "integer", "minimum": 0},
                    "target_count": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}

TEACHER_NAMES = {SOURCE: "st_teacher", TARGET: "tt_teacher"}


class Workspace:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def checkpoint(self, name: str) -> Path:
        return self.root / "checkpoints" / f"{name}.ckpt"

    def metrics(self, stage: str) -> Path:
        return self.root / "metrics" / f"{stage}.jsonl"

    def timing(self, stage: str) -> Path:
        return self.root / "timing" / f"{stage}.jsonl"

    def figure(self, name: str) -> Path:
        return self.root / "figures" / name

    def path(self, name: str) -> Path:
        return self.root / name


def dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_text(path: Path, text: str) -> Path:
    atomic_write_bytes(path, text.encode())
    return path


def write_csv(path: Path, rows: list[dict], columns: list[str]) -> Path:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    w.writerows(rows)
    return write_text(path, buf.getvalue())


class MetricsLog:
    """Per-stage line-delimited metrics (deterministic) plus a wall-clock sidecar."""

    def __init__(self, ws: Workspace, stage: str):
        self.stage = stage
        self.path = ws.metrics(stage)
        self.timing_path = ws.timing(stage)
        for p in (self.path, self.timing_path):
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text("")
        self.start = time.perf_counter()

    def __call__(self, stage: str, epoch: int, losses: dict) -> None:
        rec = {"stage": stage, "epoch": epoch, "losses": {k: float(v) for k, v in losses.items()}}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(self.timing_path, "a") as fh:
            fh.write(json.dumps({"stage": stage, "epoch": epoch,
                                 "wall_time": round(time.perf_counter() - self.start, 3)}) + "\n")
        log.info("%s epoch %d: %s", stage, epoch, ", ".join(f"{k}={v:.4f}" for k, v in losses.items()))

    @staticmethod
    def read(ws: Workspace, stage: str) -> list[dict]:
        path = ws.metrics(stage)
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text().splitlines() if line]


def config_fingerprint(cfg: RunConfig) -> str:
    return fingerprint(cfg.to_dict())


@lru_cache(maxsize=4)
def _cached_benchmark(key: str) -> Benchmark:
    fields = json.loads(key)
    for k in ("source_bg_freq", "target_bg_freq", "target_texture_freq"):
        fields[k] = tuple(fields[k])
    return generate_benchmark(SyntheticSpec(**fields))


def benchmark_for(cfg: RunConfig) -> Benchmark:
    return _cached_benchmark(json.dumps(asdict(cfg.data), sort_keys=True))


def _require(ws: Workspace, name: str, what: str, command: str) -> Path:
    path = ws.checkpoint(name)
    if not path.exists():
        raise MissingPrerequisiteError(f"{what} checkpoint required: {path} is missing (run `med2n {command}` first)")
    return path


def _load(ws: Workspace, name: str, cfg: RunConfig, bench: Benchmark, what: str, command: str) -> ModelBundle:
    return load_checkpoint(_require(ws, name, what, command), cfg.train, bench)[0]


def _extra(cfg: RunConfig, stage: str) -> dict:
    return {"config_fingerprint": config_fingerprint(cfg), "stage": stage, "seed": cfg.train.seed}


# ---------------------------------------------------------------- training stages


def run_pretrain(cfg: RunConfig, ws: Workspace) -> ModelBundle:
    bench = benchmark_for(cfg)
    bundle = new_bundle("pretrain", cfg.train, bench)
    rng = stage_rng(cfg.train.seed, "pretrain")
    pretrain(bundle, bench.source_train, cfg.train, MetricsLog(ws, "pretrain"), rng)
    save_checkpoint(ws.checkpoint("pretrain"), bundle, _extra(cfg, "pretrain"), rng.bit_generator.state)
    return bundle


def run_teacher(cfg: RunConfig, ws: Workspace, domain: str) -> ModelBundle:
    if domain not in TEACHER_NAMES:
        raise ConfigError(f"teacher domain must be 'source' or 'target', got {domain!r}")
    bench = benchmark_for(cfg)
    pre = _load(ws, "pretrain", cfg, bench, "pretrain", "pretrain")
    role = TEACHER_NAMES[domain]
    bundle = warm_start(new_bundle(role, cfg.train, bench), pre)
    split = bench.source_train if domain == SOURCE else bench.target_aux
    rng = stage_rng(cfg.train.seed, role)
    train_teacher(bundle, split, cfg.train, MetricsLog(ws, role), rng)
    save_checkpoint(ws.checkpoint(role), bundle, _extra(cfg, role), rng.bit_generator.state)
    return bundle


def load_teachers(cfg: RunConfig, ws: Workspace, bench: Benchmark) -> tuple[ModelBundle, ModelBundle]:
    for name in TEACHER_NAMES.values():
        _require(ws, name, "teacher", "train-teacher --domain " + ("source" if name == "st_teacher" else "target"))
    st = _load(ws, "st_teacher", cfg, bench, "teacher", "train-teacher --domain source").freeze()
    tt = _load(ws, "tt_teacher", cfg, bench, "teacher", "train-teacher --domain target").freeze()
    return st, tt


def run_student(cfg: RunConfig, ws: Workspace, name: str = "student") -> ModelBundle:
    bench = benchmark_for(cfg)
    st, tt = load_teachers(cfg, ws, bench)
    pre = _load(ws, "pretrain", cfg, bench, "pretrain", "pretrain")
    student = warm_start(new_bundle("student", cfg.train, bench), pre)
    rng = stage_rng(cfg.train.seed, "student")
    extra = _extra(cfg, name)

    def snapshot(epoch: int) -> None:
        save_checkpoint(ws.checkpoint(name), student, {**extra, "epoch": epoch}, rng.bit_generator.state)

    train_student(student, st, tt, bench, cfg.train, MetricsLog(ws, name), snapshot, stage=name, rng=rng)
    save_checkpoint(ws.checkpoint(name), student, {**extra, "epoch": cfg.train.student_epochs},
                    rng.bit_generator.state)
    return student


def run_mbase(cfg: RunConfig, ws: Workspace) -> ModelBundle:
    bench = benchmark_for(cfg)
    pre = _load(ws, "pretrain", cfg, bench, "pretrain", "pretrain")
    bundle = warm_start(new_bundle("m_base", cfg.train, bench), pre)
    rng = stage_rng(cfg.train.seed, "m_base" if cfg.train.mbase_mix > 0 else "st_teacher")
    train_mbase(bundle, bench, cfg.train, MetricsLog(ws, "m_base"), rng=rng)
    save_checkpoint(ws.checkpoint("m_base"), bundle, _extra(cfg, "m_base"), rng.bit_generator.state)
    return bundle


# ---------------------------------------------------------------- evaluation and reports


def eval_bundle(cfg: RunConfig, bundle: ModelBundle, split_name: str, strategies) -> dict:
    bench = benchmark_for(cfg)
    split = bench[split_name]
    code = {"target_test": 0, "source_test": 1}[split_name]
    e = cfg.eval
    return evaluate_strategies(bundle, split, strategies, e.n_way, e.k_shot, e.m_query, e.episodes,
                               stage_rng(cfg.train.seed, "eval", code), config_fingerprint(cfg))


def run_eval(cfg: RunConfig, ws: Workspace, strategy: str = "all", name: str = "student") -> dict:
    """Target-test reports for the requested strategies plus one source-test report."""
    bench = benchmark_for(cfg)
    what = "student" if name.startswith("student") else name
    bundle = _load(ws, name, cfg, bench, what, "train-student" if what == "student" else "train-mbase")
    if strategy == "all":
        target_strats, source_strat = STRATEGIES, "both"
    elif strategy in STRATEGIES:
        target_strats, source_strat = (strategy,), strategy
    else:
        raise ConfigError(f"strategy must be one of {STRATEGIES + ('all',)}, got {strategy!r}")
    if bundle.gates is None:
        if strategy not in ("all", "std"):
            raise ConfigError(f"checkpoint {name!r} has no gate matrix; only the 'std' strategy applies")
        target_strats, source_strat = ("std",), "std"
    reports = list(eval_bundle(cfg, bundle, "target_test", target_strats).values())
    reports.append(eval_bundle(cfg, bundle, "source_test", (source_strat,))[source_strat])
    doc = {
        "format": RESULTS_FORMAT,
        "checkpoint": name,
        "role": bundle.role,
        "config_fingerprint": config_fingerprint(cfg),
        "seed": cfg.train.seed,
        "episode": {"n_way": cfg.eval.n_way, "k_shot": cfg.eval.k_shot, "m_query": cfg.eval.m_query},
        "reports": [r.to_dict() for r in reports],
    }
    stem = "results" if name == "student" else f"results_{name}"
    write_text(ws.path(f"{stem}.json"), dumps(doc))
    write_csv(ws.path(f"{stem}.csv"), doc["reports"], ["split", "strategy", "episodes", "mean_accuracy", "ci95"])
    plots.eval_reports(doc["reports"], ws.figure(f"{stem}.png"))
    return doc


def gate_stats_document(bundle: ModelBundle, name: str, cfg: RunConfig | None = None) -> dict:
    if bundle.gates is None:
        raise ConfigError(f"checkpoint {name!r} has no gate matrix (decompose_depth = 0)")
    doc = {
        "format": GATE_STATS_FORMAT,
        "checkpoint": name,
        "decompose_depth": bundle.net.decompose_depth,
        "blocks": gate_statistics(bundle.gates),
    }
    if cfg is not None:
        doc["config_fingerprint"] = config_fingerprint(cfg)
    jsonschema.validate(doc, GATE_STATS_SCHEMA)
    return doc


def run_gate_stats(cfg: RunConfig, ws: Workspace, name: str = "student") -> dict:
    bench = benchmark_for(cfg)
    bundle = _load(ws, name, cfg, bench, "student", "train-student")
    doc = gate_stats_document(bundle, name, cfg)
    write_text(ws.path("gate_stats.json"), dumps(doc))
    write_csv(ws.path("gate_stats.csv"), doc["blocks"], ["block", "total", "source_count", "target_count"])
    plots.gate_counts(doc["blocks"], ws.figure("gate_stats.png"))
    return doc


def normalize01(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.zeros_like(a, dtype=np.float64)
    return (a.astype(np.float64) - lo) / (hi - lo)


def write_pgm(path: Path, grid: np.ndarray) -> Path:
    """Binary 8-bit portable graymap of a [0, 1] grid."""
    h, w = grid.shape
    pixels = np.round(np.clip(grid, 0, 1) * 255).astype(np.uint8)
    atomic_write_bytes(path, f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return path


def activation_maps(bundle: ModelBundle, image: np.ndarray, domains=(SOURCE, TARGET)) -> tuple[dict, dict]:
    """For each domain, the last gated block's most active assigned filter, normalized to [0, 1]."""
    if bundle.gates is None:
        raise ConfigError("activation maps need a student with a gate matrix")
    block = max(bundle.net.gated_blocks)
    lo, hi = bundle.gates.block_offsets[block]
    assigned = hard_assignment(bundle.gates)[lo:hi]
    with ad.no_grad():
        bundle.net.eval()
        act = block_activation(bundle.net, image[None], block).data[0]
    maps, filters = {}, {}
    for dom in domains:
        pool = np.flatnonzero(assigned if dom == SOURCE else ~assigned)
        if pool.size == 0:
            raise ConfigError(f"no filter of block{block + 1} is assigned to the {dom} domain")
        means = act[pool].mean(axis=(1, 2))
        f = int(pool[int(np.argmax(means))])
        filters[dom] = f
        maps[dom] = normalize01(act[f])
    return maps, filters


def run_activation_dump(cfg: RunConfig, ws: Workspace, index: int | None = 0, image_path: str | None = None,
                        domain: str = "both", split: str = "target_test", name: str = "student") -> dict:
    bench = benchmark_for(cfg)
    bundle = _load(ws, name, cfg, bench, "student", "train-student")
    if image_path is not None:
        image = np.load(image_path).astype(np.float32)
        if image.shape != bundle.net.input_shape:
            raise ConfigError(f"image {image_path} has shape {image.shape}, expected {bundle.net.input_shape}")
        source = {"image_path": str(image_path)}
    else:
        if split not in bench.splits:
            raise ConfigError(f"unknown split {split!r}")
        if not 0 <= index < len(bench[split]):
            raise ConfigError(f"index {index} outside split {split!r} of size {len(bench[split])}")
        image = bench[split].images[index]
        source = {"split": split, "index": int(index)}
    domains = (SOURCE, TARGET) if domain == "both" else (domain,)
    if any(d not in (SOURCE, TARGET) for d in domains):
        raise ConfigError(f"filter domain must be source, target or both; got {domain!r}")
    maps, filters = activation_maps(bundle, image, domains)
    out_dir = ws.path("activations")
    files = {}
    for dom, grid in maps.items():
        stem = out_dir / f"{dom}_filter{filters[dom]}"
        buf = io.BytesIO()
        np.save(buf, grid)
        atomic_write_bytes(stem.with_suffix(".npy"), buf.getvalue())
        write_pgm(stem.with_suffix(".pgm"), grid)
        files[dom] = {"filter": filters[dom], "npy": stem.with_suffix(".npy").name,
                      "pgm": stem.with_suffix(".pgm").name, "shape": list(grid.shape)}
    plots.activation_maps(image, maps, filters, ws.figure("activations.png"))
    doc = {"checkpoint": name, "input": source, "block": max(bundle.net.gated_blocks) + 1, "maps": files}
    write_text(out_dir / "activations.json", dumps(doc))
    return doc


# ---------------------------------------------------------------- data export and the full pipeline


def run_gen_data(cfg: RunConfig, ws: Workspace) -> Path:
    from .data import export_benchmark
    return export_benchmark(benchmark_for(cfg), ws.path("data"))


def me_config(cfg: RunConfig) -> RunConfig:
    """The multi-expert student without domain decomposition (no gates)."""
    return replace(cfg, train=replace(cfg.train, decompose_depth=0))


def run_pipeline(cfg: RunConfig, ws: Workspace, activation: bool = True,
                 on_stage: Callable[[str], None] | None = None) -> dict:
    """Every stage in order; returns a novel-target/source accuracy summary.

    ``on_stage`` is called with each training stage's name once its checkpoint exists.
    """
    done = on_stage or (lambda name: None)
    run_pretrain(cfg, ws)
    done("pretrain")
    run_teacher(cfg, ws, SOURCE)
    done("st_teacher")
    run_teacher(cfg, ws, TARGET)
    done("tt_teacher")
    run_mbase(cfg, ws)
    done("m_base")
    me = me_config(cfg)
    run_student(me, ws, "student_me")
    done("student_me")
    run_student(cfg, ws, "student")
    done("student")
    docs = {
        "m_base": run_eval(cfg, ws, "std", "m_base"),
        "student_me": run_eval(me, ws, "std", "student_me"),
        "student": run_eval(cfg, ws, "all", "student"),
    }
    if cfg.train.decompose_depth > 0:
        run_gate_stats(cfg, ws)
        if activation:
            run_activation_dump(cfg, ws)
    summary = summary_rows(docs, cfg.train.seed)
    write_text(ws.path("summary.json"), dumps(summary))
    for stage in ("pretrain", "st_teacher", "tt_teacher", "m_base", "student_me", "student"):
        records = MetricsLog.read(ws, stage)
        if records:
            plots.loss_curve(records, "loss", ws.figure(f"loss_{stage}.png"), stage)
    return summary


def summary_rows(docs: dict, seed: int) -> dict:
    out = {"seed": seed}
    for name, doc in docs.items():
        for r in doc["reports"]:
            key = f"{name}.{r['split']}.{r['strategy']}"
            out[key] = r["mean_accuracy"]
    return out
