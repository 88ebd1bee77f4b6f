import numpy as np
import pytest

from med2n import autodiff as ad
from med2n.data import sample_episode
from med2n.errors import ConfigError
from med2n.evaluator import EvalReport, combine_paths, evaluate, evaluate_source, evaluate_strategies, summarize
from med2n.gate import infer_masks
from med2n.trainer import new_bundle


@pytest.fixture
def student(smoke_cfg, smoke_bench):
    return new_bundle("student", smoke_cfg.train, smoke_bench)


def test_summarize_mean_and_half_width():
    accs = [20.0, 40.0, 60.0, 80.0]
    m, ci = summarize(accs)
    assert m == 50.0
    assert ci == pytest.approx(1.96 * np.std(accs, ddof=1) / 2)


def test_combine_paths_identity_and_normalization():
    rng = np.random.default_rng(0)
    lp = ad.log_softmax(ad.Tensor(rng.standard_normal((6, 5)))).data
    np.testing.assert_allclose(combine_paths(lp, lp), np.exp(lp))
    lq = ad.log_softmax(ad.Tensor(rng.standard_normal((6, 5)))).data
    np.testing.assert_allclose(combine_paths(lp, lq).sum(1), 1, atol=1e-6)


def test_untrained_model_near_chance(student, smoke_bench, smoke_cfg):
    e = smoke_cfg.eval
    r = evaluate(student, smoke_bench.target_test, "both", e.n_way, e.k_shot, e.m_query, 60,
                 np.random.default_rng(0))
    assert isinstance(r, EvalReport) and len(r.accuracies) == 60
    assert abs(r.mean_accuracy - 100 / e.n_way) < 3 * max(r.ci95, 1.0) + 10
    assert r.mean_accuracy == pytest.approx(np.mean(r.accuracies))


def test_both_matches_per_query_oracle(student, smoke_bench, smoke_cfg):
    e = smoke_cfg.eval
    split = smoke_bench.target_test
    reports = evaluate_strategies(student, split, ("both",), e.n_way, e.k_shot, e.m_query, 8,
                                  np.random.default_rng(3))
    rng = np.random.default_rng(3)
    student.net.eval()
    masks = infer_masks(student.gates, "target").masks
    expected = []
    for _ in range(8):
        ep = sample_episode(split, e.n_way, e.k_shot, e.m_query, rng)
        with ad.no_grad():
            p_std = np.exp(student.episode_log_probs(ep)[0].data.astype(np.float64))
            p_dsg = np.exp(student.episode_log_probs(ep, masks)[0].data.astype(np.float64))
        hits = 0
        for i, y in enumerate(ep.query_labels):
            avg = [(p_std[i, c] + p_dsg[i, c]) / 2 for c in range(e.n_way)]
            hits += int(np.argmax(avg) == y)
        expected.append(100.0 * hits / len(ep.query_labels))
    assert reports["both"].accuracies == pytest.approx(expected)


def test_evaluation_is_deterministic_and_read_only(student, smoke_bench, smoke_cfg):
    e = smoke_cfg.eval
    before = {k: v.copy() for k, v in student.named_arrays().items()}
    a = evaluate_strategies(student, smoke_bench.target_test, n_way=e.n_way, k_shot=e.k_shot, m_query=e.m_query,
                            episodes=5, rng=np.random.default_rng(1))
    b = evaluate_strategies(student, smoke_bench.target_test, n_way=e.n_way, k_shot=e.k_shot, m_query=e.m_query,
                            episodes=5, rng=np.random.default_rng(1))
    assert {k: r.to_dict() for k, r in a.items()} == {k: r.to_dict() for k, r in b.items()}
    for k, v in student.named_arrays().items():
        assert v.tobytes() == before[k].tobytes()
    assert all(0 <= x <= 100 for r in a.values() for x in r.accuracies)


def test_dsg_needs_gates(smoke_bench, smoke_cfg):
    teacher = new_bundle("st_teacher", smoke_cfg.train, smoke_bench)
    with pytest.raises(ConfigError):
        evaluate(teacher, smoke_bench.target_test, "dsg", 2, 1, 1, 1)
    r = evaluate(teacher, smoke_bench.target_test, "std", 2, 1, 1, 2)
    assert r.strategy == "std"


def test_source_evaluation_requires_source_split(student, smoke_bench, smoke_cfg):
    e = smoke_cfg.eval
    r = evaluate_source(student, smoke_bench.source_test, "both", n_way=e.n_way, k_shot=e.k_shot,
                        m_query=e.m_query, episodes=3)
    assert r.split == "source_test"
    with pytest.raises(ConfigError):
        evaluate_source(student, smoke_bench.target_test)


def test_unknown_strategy(student, smoke_bench):
    with pytest.raises(ConfigError):
        evaluate(student, smoke_bench.target_test, "mean")
