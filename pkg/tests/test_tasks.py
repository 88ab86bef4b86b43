import numpy as np
import pytest

from molex.errors import ConfigError
from molex.tasks import DEFAULT_TASKS, PAD, concept_of, generate, get_task, surface_tokens


@pytest.mark.parametrize("name", sorted(DEFAULT_TASKS))
@pytest.mark.parametrize("split", ["train", "val", "test"])
def test_class_balance_within_one_percent(name, split):
    task = get_task(name)
    d = generate(task, split, 400, 16, 64)
    frac = np.bincount(d.labels, minlength=task.num_classes) / len(d)
    assert np.all(np.abs(frac - 1.0 / task.num_classes) <= 0.01)


def test_generation_is_deterministic_and_splits_differ():
    task = get_task("pair")
    a = generate(task, "train", 50, 16, 64)
    b = generate(task, "train", 50, 16, 64)
    assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.labels, b.labels)
    c = generate(task, "test", 50, 16, 64)
    assert not np.array_equal(a.tokens, c.tokens)


def test_majority_rule_holds():
    d = generate(get_task("majority"), "train", 200, 16, 64)
    for tok, y, L in zip(d.tokens, d.labels, d.lengths):
        assert np.all(tok[L:] == PAD) and np.all(tok[:L] != PAD)
        counts = np.bincount(concept_of(tok[:L], 8), minlength=8)
        top = np.argmax(counts)
        assert np.sum(counts == counts[top]) == 1
        assert (top % 2 == 0) == (y == 1)


def test_pair_rule_holds():
    d = generate(get_task("pair"), "train", 200, 16, 64)
    for tok, y, L in zip(d.tokens, d.labels, d.lengths):
        ca, cb = concept_of(tok[:L, 0], 8), concept_of(tok[:L, 1], 8)
        mismatches = int(np.sum(ca != cb))
        if y == 1:
            assert mismatches == 0
        else:
            assert max(1, L // 4) <= mismatches <= max(1, L // 2)


def test_shifted_task_uses_disjoint_vocabulary():
    low = generate(get_task("pair"), "test", 100, 16, 64).tokens
    high = generate(get_task("pair_shifted"), "test", 100, 16, 64).tokens
    lo_set = set(np.unique(low)) - {PAD}
    hi_set = set(np.unique(high)) - {PAD}
    assert lo_set.isdisjoint(hi_set)
    assert lo_set <= set(surface_tokens(64, "low")) and hi_set <= set(surface_tokens(64, "high"))


def test_pretrain_has_copy_targets():
    d = generate(get_task("pretrain"), "train", 20, 8, 32)
    assert np.array_equal(d.copy_targets, d.tokens)
    assert set(np.unique(d.labels)) <= set(range(8))


def test_unknown_task_and_split():
    with pytest.raises(ConfigError):
        get_task("nope")
    with pytest.raises(ConfigError):
        generate(get_task("pair"), "dev", 10, 8, 32)
