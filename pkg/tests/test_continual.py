import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgkan.continual import (AblationSwitches, ScoreMatrix, Trainer, TrainerConfig, accuracy,
                             auc, average_accuracy, average_forgetting, run_stream)
from dgkan.numcore import ContractViolation, RngStream
from dgkan.synthbench import dataset, gen_sequence


class TestAccuracy:
    def test_all_correct(self):
        assert accuracy([2.0, -3.0, 1.0], [1, 0, 1]) == 100.0

    def test_complement_symmetry(self, rng):
        z = rng.normal(size=50)
        y = rng.integers(0, 2, 50)
        assert accuracy(z, y) + accuracy(z, 1 - y) == pytest.approx(100.0)

    def test_matches_naive_loop(self, rng):
        z = rng.normal(size=200)
        y = rng.integers(0, 2, 200)
        correct = sum(1 for zi, yi in zip(z, y) if (1 if zi > 0 else 0) == yi)
        assert accuracy(z, y) == pytest.approx(correct / 200 * 100.0)

    def test_empty_input(self):
        with pytest.raises(ContractViolation):
            accuracy([], [])


def auc_pair_oracle(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg)) * 100.0


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([0.9, 0.8], [1, 0]) == 100.0

    def test_all_ties(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 50.0

    def test_single_class_error(self):
        with pytest.raises(ContractViolation):
            auc([0.1, 0.9], [1, 1])

    @given(seed=st.integers(0, 100_000))
    @settings(max_examples=40, deadline=None)
    def test_matches_pair_counting_exactly(self, seed):
        r = RngStream(seed)
        n = int(r.integers(2, 101))
        # quantized scores force ties
        scores = np.round(r.uniform(0, 1, n), 1)
        labels = r.integers(0, 2, n)
        if labels.min() == labels.max():
            return
        assert auc(scores, labels) == auc_pair_oracle(scores.tolist(), labels.tolist())


class TestAverageForgetting:
    def _matrix(self, rows):
        m = ScoreMatrix()
        for row in rows:
            m.add_row(row, row)
        return m

    def test_paper_value_three_previous_tasks(self):
        m = self._matrix([[97.68], [95.90, 90.39], [93.52, 88.83, 97.69],
                          [92.90, 87.36, 93.26, 93.03]])
        assert average_forgetting(m, 4) == pytest.approx(4.08, abs=0.01)

    def test_paper_value_two_previous_tasks(self):
        m = self._matrix([[97.68], [95.90, 90.39], [93.52, 88.83, 97.69]])
        assert average_forgetting(m, 3) == pytest.approx(2.86, abs=0.01)

    def test_paper_value_one_previous_task(self):
        m = self._matrix([[97.68], [95.90, 90.39]])
        assert average_forgetting(m, 2) == pytest.approx(1.78, abs=0.01)

    def test_no_forgetting(self):
        m = self._matrix([[90.0], [90.0, 80.0]])
        assert average_forgetting(m, 2) == 0.0

    def test_undefined_for_first_task(self):
        m = self._matrix([[97.0]])
        with pytest.raises(ContractViolation, match="AF undefined"):
            average_forgetting(m, 1)

    def test_row_shape_validation(self):
        m = ScoreMatrix()
        with pytest.raises(ContractViolation):
            m.add_row([1.0, 2.0], [1.0, 2.0])


def tiny_config(**kw):
    defaults = dict(epochs=3, memory_budget=60)
    defaults.update(kw)
    return TrainerConfig(**defaults)


def tiny_stream(seed=11, protocol="four-task"):
    return gen_sequence(protocol, seed, train_n=96, eval_n=64)


class TestTrainer:
    def test_task1_structure(self):
        stream = tiny_stream()
        tr = Trainer(tiny_config(), 11)
        X, y = dataset(stream, 0, "train")
        tr.train_task(X, y)
        assert tr.head.active_task == 1
        assert not tr.head.layers[0].frozen
        assert len(tr.memory) <= 60
        assert set(np.unique(tr.memory.domain_class)) == {0, 1}
        assert tr.teacher is not None

    def test_multi_task_structure(self):
        stream = tiny_stream()
        tr = Trainer(tiny_config(), 11)
        for t in range(3):
            X, y = dataset(stream, t, "train")
            tr.train_task(X, y)
        assert tr.head.active_task == 3
        assert [l.frozen for l in tr.head.layers] == [True, True, False]
        assert set(np.unique(tr.memory.domain_class)) <= set(range(6))
        assert tr.memory.space_task == 3

    def test_single_class_task_rejected(self):
        tr = Trainer(tiny_config(), 11)
        X = np.zeros((10, 8))
        with pytest.raises(ContractViolation):
            tr.train_task(X, np.zeros(10, dtype=int))

    def test_teacher_immutable_during_task(self):
        stream = tiny_stream()
        tr = Trainer(tiny_config(), 11)
        X, y = dataset(stream, 0, "train")
        tr.train_task(X, y)
        teacher_bytes = tr.teacher.param_vector().tobytes()
        X2, y2 = dataset(stream, 1, "train")
        tr.train_task(X2, y2)
        # the teacher snapshot is replaced only at the end of the task; the
        # object observed during training carried the original parameters
        assert tr.teacher.param_vector().tobytes() != teacher_bytes or True
        # stronger check: re-run and snapshot mid-task via the stored reference
        tr2 = Trainer(tiny_config(), 11)
        tr2.train_task(X, y)
        ref = tr2.teacher
        before = ref.param_vector().tobytes()
        tr2.train_task(X2, y2)
        assert ref.param_vector().tobytes() == before

    def test_memory_exactly_once_projection_tag(self):
        stream = tiny_stream()
        tr = Trainer(tiny_config(), 11)
        for t in range(2):
            X, y = dataset(stream, t, "train")
            tr.train_task(X, y)
        assert tr.memory.space_task == 2
        assert tr.projection.source_task == 1 and tr.projection.target_task == 2

    def test_evaluate_all_deterministic(self):
        stream = tiny_stream()
        tr = Trainer(tiny_config(), 11)
        X, y = dataset(stream, 0, "train")
        tr.train_task(X, y)
        evs = [dataset(stream, 0, "eval")]
        assert tr.evaluate_all(evs) == tr.evaluate_all(evs)

    def test_metrics_agree_with_manual_recompute(self):
        stream = tiny_stream()
        tr = Trainer(tiny_config(), 11)
        X, y = dataset(stream, 0, "train")
        tr.train_task(X, y)
        Xe, ye = dataset(stream, 0, "eval")
        accs, aucs = tr.evaluate_all([(Xe, ye)])
        probs, logits = tr.scores(Xe, ye)
        assert accs[0] == accuracy(logits, ye)
        assert aucs[0] == auc(probs, ye)

    def test_run_stream_determinism(self):
        stream = tiny_stream()
        cfg = tiny_config()
        m1, _ = run_stream(stream, cfg)
        m2, _ = run_stream(stream, cfg)
        assert m1.acc_rows == m2.acc_rows
        assert m1.auc_rows == m2.auc_rows

    def test_raw_replay_mode(self):
        stream = tiny_stream()
        cfg = tiny_config(switches=AblationSwitches(use_raw_replay=True, use_kdcp=False))
        m, tr = run_stream(stream, cfg)
        assert tr.raw_memory is not None
        assert tr.raw_memory.shape[0] == len(tr.memory)
        assert m.num_steps == 4

    def test_baseline_head_modes(self):
        stream = tiny_stream()
        for kind in ("mlp", "groupkan"):
            cfg = tiny_config(head_kind=kind, epochs=2)
            m, tr = run_stream(stream, cfg)
            assert m.num_steps == 4
            assert tr.head.kind == kind

    def test_separated_two_task_retention(self):
        # well-separated domains: task-1 accuracy survives task 2 (>= 99%);
        # run with the anchoring losses only, as in the locality criterion
        stream = gen_sequence("two-task-separated", 11)
        cfg = TrainerConfig(epochs=40, switches=AblationSwitches(use_sc=False, use_kdcp=False))
        tr = Trainer(cfg, 11)
        X1, y1 = dataset(stream, 0, "train")
        X1e, y1e = dataset(stream, 0, "eval")
        tr.train_task(X1, y1)
        acc_before = tr.evaluate_all([(X1e, y1e)])[0][0]
        X2, y2 = dataset(stream, 1, "train")
        tr.train_task(X2, y2)
        acc_after = tr.evaluate_all([(X1e, y1e)])[0][0]
        assert acc_after >= 0.99 * acc_before

    def test_average_accuracy(self):
        m = ScoreMatrix()
        m.add_row([80.0], [90.0])
        m.add_row([70.0, 90.0], [80.0, 95.0])
        assert average_accuracy(m, 2) == pytest.approx(80.0)
        assert average_accuracy(m, 2, "auc") == pytest.approx(87.5)
