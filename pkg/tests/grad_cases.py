"""Random finite-difference cases for every differentiable primitive.

Each generator returns ``(op, inputs)``; ``op`` takes Tensors and returns a Tensor.
Shared by the unit tests and the acceptance suite.
"""

import numpy as np

from med2n import autodiff as ad
from med2n.autodiff import BatchNormState

CASES_PER_OP = 50


def _shape(rng, lo=1, hi=4, n=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, n))


def _add(rng):
    a = _shape(rng)
    b = (a[1],) if rng.random() < 0.5 else a
    return ad.add, [rng.standard_normal(a), rng.standard_normal(b)]


def _sub(rng):
    r, c = _shape(rng)
    return ad.sub, [rng.standard_normal((r, 1)), rng.standard_normal((1, c))]


def _mul(rng):
    a = _shape(rng)
    return ad.mul, [rng.standard_normal(a), rng.standard_normal(a)]


def _scale(rng):
    c = float(rng.normal())
    return (lambda x: ad.scale(x, c)), [rng.standard_normal(_shape(rng))]


def _relu(rng):
    x = rng.standard_normal(_shape(rng, 2, 5))
    x[np.abs(x) < 1e-3] += 0.01  # stay off the kink
    return ad.relu, [x]


def _exp(rng):
    return ad.exp, [rng.standard_normal(_shape(rng))]


def _square(rng):
    return ad.square, [rng.standard_normal(_shape(rng))]


def _tsum(rng):
    axis = int(rng.integers(0, 2))
    keep = bool(rng.integers(0, 2))
    return (lambda x: ad.tsum(x, axis=axis, keepdims=keep)), [rng.standard_normal(_shape(rng))]


def _mean(rng):
    return (lambda x: ad.mean(x, axis=(2, 3))), [rng.standard_normal((2, 2, 3, 3))]


def _reshape(rng):
    r, c = _shape(rng)
    return (lambda x: ad.reshape(x, (c, r))), [rng.standard_normal((r, c))]


def _transpose(rng):
    return ad.transpose, [rng.standard_normal(_shape(rng))]


def _concat(rng):
    r1, r2, c = (int(v) for v in rng.integers(1, 4, 3))
    return (lambda a, b: ad.concat([a, b], axis=0)), [rng.standard_normal((r1, c)), rng.standard_normal((r2, c))]


def _index(rng):
    r, c = _shape(rng, 3, 6)
    lo = int(rng.integers(0, r - 1))
    return (lambda x: ad.index(x, slice(lo, r))), [rng.standard_normal((r, c))]


def _take_rows(rng):
    r, c = _shape(rng, 2, 5)
    idx = rng.integers(0, r, int(rng.integers(1, 7)))  # repeats exercise scatter-add
    return (lambda x: ad.take_rows(x, idx)), [rng.standard_normal((r, c))]


def _matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, 3))
    return ad.matmul, [rng.standard_normal((n, k)), rng.standard_normal((k, m))]


def _linear(rng):
    n, i, o = (int(v) for v in rng.integers(1, 5, 3))
    return ad.linear, [rng.standard_normal((n, i)), rng.standard_normal((i, o)), rng.standard_normal(o)]


def _conv2d(rng):
    b, ci, co = (int(v) for v in rng.integers(1, 3, 3))
    size = int(rng.integers(3, 6))
    stride, pad = [(1, 1), (1, 0), (2, 1), (2, 0)][int(rng.integers(0, 4))]
    return ((lambda x, k: ad.conv2d(x, k, stride, pad)),
            [rng.standard_normal((b, ci, size, size)), rng.standard_normal((co, ci, 3, 3))])


def _max_pool(rng):
    h = int(rng.integers(2, 6))
    # distinct values so a tiny probe cannot change the winner
    x = rng.permutation(2 * 2 * h * h).reshape(2, 2, h, h) * 0.1 + rng.standard_normal((2, 2, h, h)) * 0.01
    return (lambda t: ad.max_pool_2d(t, 2)), [x]


def _gap(rng):
    return ad.global_avg_pool, [rng.standard_normal((2, 3, 3, 2))]


def _bn(training):
    def gen(rng):
        c = int(rng.integers(1, 4))
        state = BatchNormState(c, np.float64)
        state.running_mean[:] = rng.normal(size=c)
        state.running_var[:] = rng.uniform(0.5, 2.0, c)

        def op(x, g, b):
            return ad.batch_norm_2d(x, g, b, state, training, update_stats=False)

        return op, [rng.standard_normal((3, c, 2, 2)), rng.normal(1, 0.3, c), rng.standard_normal(c)]

    return gen


def _log_softmax(rng):
    return ad.log_softmax, [rng.standard_normal(_shape(rng, 1, 5)) * 2]


def _cross_entropy(rng):
    n, c = _shape(rng, 1, 5)
    labels = rng.integers(0, c, n)
    return (lambda x: ad.cross_entropy(ad.log_softmax(x), labels)), [rng.standard_normal((n, c))]


def _kl_div(rng):
    n, c = _shape(rng, 1, 5)
    t = ad.softmax_np(rng.standard_normal((n, c)) * 2)
    return (lambda x: ad.kl_div(ad.log_softmax(x), t)), [rng.standard_normal((n, c))]


def _gumbel_soft(rng):
    n, k = _shape(rng, 1, 5)
    seed = int(rng.integers(0, 2 ** 31))
    tau = float(rng.uniform(0.5, 2.0))
    # same noise on every call; the relaxed sample is smooth in the logits
    return (lambda x: ad.gumbel_softmax(x, tau, np.random.default_rng(seed), hard=False)), [rng.standard_normal((n, k))]


CASES = {
    "add": _add, "sub": _sub, "mul": _mul, "scale": _scale, "relu": _relu, "exp": _exp, "square": _square,
    "sum": _tsum, "mean": _mean, "reshape": _reshape, "transpose": _transpose, "concat": _concat,
    "index": _index, "take_rows": _take_rows, "matmul": _matmul, "linear": _linear, "conv2d": _conv2d,
    "max_pool_2d": _max_pool, "global_avg_pool": _gap, "batch_norm_train": _bn(True), "batch_norm_eval": _bn(False),
    "log_softmax": _log_softmax, "cross_entropy": _cross_entropy, "kl_div": _kl_div, "gumbel_softmax": _gumbel_soft,
}


def worst_error(name: str, cases: int = CASES_PER_OP, seed: int = 0) -> float:
    from med2n.gradcheck import check_op
    rng = np.random.default_rng([seed, sorted(CASES).index(name)])
    worst = 0.0
    for _ in range(cases):
        op, inputs = CASES[name](rng)
        worst = max(worst, check_op(op, inputs, rng))
    return worst


def micro_student(seed: int = 0):
    """A float64 2-way 1-shot student/teacher setup at 16px (block4 then sees a 2x2 map)."""
    from med2n.config import load_config
    from med2n.data import generate_benchmark, sample_episode
    from med2n.trainer import new_bundle

    cfg = load_config(profile="smoke", overrides=["data.image_size=16", "train.n_way=2", "train.k_shot=1",
                                                  "train.m_query=1", "train.channels=[3,3,4,4]"])
    bench = generate_benchmark(cfg.data)
    rng = np.random.default_rng(seed)
    student = new_bundle("student", cfg.train, bench, dtype=np.float64)
    st = new_bundle("st_teacher", cfg.train, bench, dtype=np.float64).freeze()
    tt = new_bundle("tt_teacher", cfg.train, bench, dtype=np.float64).freeze()
    # spread the gate logits so the hard draw is not decided by noise alone
    student.gates.logits.data[:] = rng.normal(0, 1, student.gates.logits.shape)
    src = sample_episode(bench.source_train, 2, 1, 1, rng)
    tgt = sample_episode(bench.target_aux, 2, 1, 1, rng)
    return cfg, student, st, tt, src, tgt


def composite_errors(seed: int = 0) -> dict[str, float]:
    """Full student loss gradient vs. finite differences for every non-gate parameter."""
    from med2n.gradcheck import check_params
    from med2n.trainer import student_loss

    cfg, student, st, tt, src, tgt = micro_student(seed)
    draw_seed = 1000 + seed

    def loss_fn():
        # training-mode batch norm reads only batch statistics, so the running
        # estimates it updates never feed back into the loss
        loss, _ = student_loss(student, st, tt, src, tgt, cfg.train, np.random.default_rng(draw_seed))
        return loss

    params = [p for p in student.parameters() if p is not student.gates.logits]
    errs = check_params(loss_fn, params)
    names = [k for k in student.model_arrays() if k not in ("gates.logits",)
             and not k.endswith(("running_mean", "running_var"))]
    return dict(zip(names, errs.values()))
