"""Test distillation, discrimination and the two-phase update."""

# Import third-party modules
import numpy as np
import pytest

# Import local modules
from dtnmt import model as M
from dtnmt import tensor as T
from dtnmt.config import OptimConfig
from dtnmt.config import SupervisionFlags
from dtnmt.data import DomainCorpus
from dtnmt.data import add_domain_tags
from dtnmt.data import make_batches
from dtnmt.errors import DivergenceError
from dtnmt.errors import DomainError
from dtnmt.errors import ModelError
from dtnmt.errors import ShapeError
from dtnmt.errors import TrainingError
from dtnmt.optim import Adam
from dtnmt.optim import trainable_names
from dtnmt.supervision import PHASE_A
from dtnmt.supervision import PHASE_B
from dtnmt.supervision import TeacherSet
from dtnmt.supervision import attach_classifiers
from dtnmt.supervision import attention_pool
from dtnmt.supervision import classifier_nll
from dtnmt.supervision import classify_domain
from dtnmt.supervision import entropy
from dtnmt.supervision import init_classifiers
from dtnmt.supervision import kd_sequence_targets
from dtnmt.supervision import kd_word_loss
from dtnmt.supervision import phase_names
from dtnmt.supervision import teacher_logits
from dtnmt.supervision import two_phase_step
from dtnmt.supervision import unified_objective
from dtnmt.tensor import Tensor
from dtnmt.transform import init_dtn
from dtnmt.transform import transform


@pytest.fixture
def batch(train_corpora):
    return make_batches(train_corpora[1], 80)[0]


@pytest.fixture
def unified(tiny_params):
    bank = init_dtn(tiny_params, 2, rng=np.random.default_rng(1))
    classifiers = init_classifiers(tiny_params, 2, np.random.default_rng(2), delta=0.1)
    return tiny_params, bank, classifiers


def _snapshot(params, prefix=""):
    return {name: params[name].data.copy() for name in params.names(prefix)}


# ---------------------------------------------------------------------------
# Pooling and classification
# ---------------------------------------------------------------------------


def test_zero_query_pools_to_the_mean_of_real_tokens():
    """With equal scores the pool averages unmasked positions only."""
    H = Tensor(np.arange(24, dtype=float).reshape(2, 3, 4))
    mask = np.array([[True, True, False], [True, True, True]])
    pooled = attention_pool(H, mask, Tensor(np.zeros(4)))
    np.testing.assert_allclose(pooled.data[0], H.data[0, :2].mean(axis=0))
    np.testing.assert_allclose(pooled.data[1], H.data[1].mean(axis=0))


def test_pool_ignores_padding_values():
    """Whatever sits at a padded position does not reach the pooled vector."""
    rng = np.random.default_rng(3)
    query = Tensor(rng.normal(size=4))
    data = rng.normal(size=(1, 3, 4))
    mask = np.array([[True, True, False]])
    a = attention_pool(Tensor(data), mask, query).data
    data[0, 2] = 100.0
    b = attention_pool(Tensor(data), mask, query).data
    np.testing.assert_array_equal(a, b)


def test_pool_rejects_bad_shapes():
    H = Tensor(np.ones((1, 2, 4)))
    with pytest.raises(ShapeError):
        attention_pool(H, np.ones((1, 2), dtype=bool), Tensor(np.ones(3)))
    with pytest.raises(ShapeError, match="fully masked"):
        attention_pool(H, np.zeros((1, 2), dtype=bool), Tensor(np.ones(4)))


def test_pool_gradient():
    """The pool passes the gradient check in its input and its query."""
    rng = np.random.default_rng(4)
    mask = np.array([[True, True, False], [True, True, True]])
    weights = Tensor(rng.normal(size=(2, 4)))
    H = rng.normal(size=(2, 3, 4))
    query = rng.normal(size=4)
    report = T.grad_check(lambda h: T.sum_(attention_pool(h, mask, Tensor(query)) * weights), H)
    assert report.passed
    report = T.grad_check(lambda q: T.sum_(attention_pool(Tensor(H), mask, q) * weights), query)
    assert report.passed


def test_pool_of_a_single_position_is_that_position():
    H = Tensor(np.random.default_rng(5).normal(size=(2, 1, 4)))
    pooled = attention_pool(H, np.ones((2, 1), dtype=bool), Tensor(np.ones(4)))
    np.testing.assert_array_equal(pooled.data, H.data[:, 0])


def test_pool_of_equal_rows_is_that_row():
    row = np.array([0.5, -1.0, 2.0, 3.0])
    H = Tensor(np.tile(row, (1, 4, 1)))
    pooled = attention_pool(H, np.ones((1, 4), dtype=bool), Tensor(np.array([1.0, 2.0, -1.0, 0.3])))
    np.testing.assert_allclose(pooled.data[0], row, rtol=1e-12)


def test_pool_of_two_positions_by_hand():
    h1, h2 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    query = np.array([1.0, 1.0])
    s1, s2 = h1 @ query / np.sqrt(2.0), h2 @ query / np.sqrt(2.0)
    w1 = np.exp(s1) / (np.exp(s1) + np.exp(s2))
    expected = w1 * h1 + (1.0 - w1) * h2
    pooled = attention_pool(Tensor(np.array([[h1, h2]])), np.ones((1, 2), dtype=bool), Tensor(query))
    np.testing.assert_allclose(pooled.data[0], expected, rtol=1e-12)


def test_zero_weights_give_uniform_domain_prediction():
    pooled = Tensor(np.ones((3, 4)))
    probs = classify_domain(pooled, Tensor(np.zeros((4, 5))))
    np.testing.assert_allclose(probs.data, np.full((3, 5), 0.2))
    loss = classifier_nll(pooled, Tensor(np.zeros((4, 5))), 2)
    assert loss.item() == pytest.approx(np.log(5))


def test_classifier_nll_accepts_per_row_labels():
    pooled = Tensor(np.eye(2))
    weights = Tensor(np.array([[5.0, 0.0], [0.0, 5.0]]))
    right = classifier_nll(pooled, weights, [0, 1]).item()
    wrong = classifier_nll(pooled, weights, [1, 0]).item()
    assert right < wrong
    with pytest.raises(DomainError):
        classifier_nll(pooled, weights, 2)
    with pytest.raises(ShapeError):
        classify_domain(pooled, Tensor(np.zeros((3, 2))))


def test_classify_domain_gradient():
    """Domain probabilities pass the gradient check in the pooled input and the weights."""
    rng = np.random.default_rng(6)
    pooled = rng.normal(size=(3, 4))
    weights = rng.normal(size=(4, 2))
    mix = Tensor(rng.normal(size=(3, 2)))
    report = T.grad_check(lambda p: T.sum_(classify_domain(p, Tensor(weights)) * mix), pooled)
    assert report.passed
    report = T.grad_check(lambda w: T.sum_(classify_domain(Tensor(pooled), w) * mix), weights)
    assert report.passed


# ---------------------------------------------------------------------------
# Entropy
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "p, expected",
    [
        ([0.25, 0.25, 0.25, 0.25], np.log(4)),
        ([1.0, 0.0, 0.0], 0.0),
        ([0.5, 0.5, 0.0], np.log(2)),
    ],
)
def test_entropy_values(p, expected):
    assert entropy(Tensor(np.array([p]))).data[0] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [0.2, 0.2]])
def test_entropy_rejects_non_distributions(p):
    with pytest.raises(ModelError):
        entropy(Tensor(np.array(p)))


# ---------------------------------------------------------------------------
# Word-level distillation
# ---------------------------------------------------------------------------


def _kd_inputs(vocab_size=16):
    rng = np.random.default_rng(5)
    logits = Tensor(rng.normal(size=(2, 3, vocab_size)), requires_grad=True)
    ids = np.array([[4, 5, 2], [6, 2, 0]])
    mask = np.array([[True, True, True], [True, True, False]])
    return logits, ids, mask


def test_kd_with_zero_lambda_is_nll():
    logits, ids, mask = _kd_inputs()
    teacher = np.random.default_rng(6).normal(size=logits.shape)
    assert kd_word_loss(logits, teacher, ids, mask, 0.0).item() == M.nll_loss(logits, ids, mask).item()


def test_kd_with_one_hot_teacher_is_nll():
    """A teacher certain of the gold token reduces distillation to NLL."""
    logits, ids, mask = _kd_inputs()
    teacher = np.zeros(logits.shape)
    teacher[np.arange(2)[:, None], np.arange(3)[None, :], ids] = 1000.0
    nll = M.nll_loss(logits, ids, mask).item()
    for lam in (0.1, 0.5, 1.0):
        assert kd_word_loss(logits, teacher, ids, mask, lam).item() == nll


def test_kd_with_uniform_teacher_and_student():
    """Uniform distributions everywhere give ln |V| for every lambda."""
    _, ids, mask = _kd_inputs()
    student = Tensor(np.zeros((2, 3, 16)))
    for lam in (0.0, 0.3, 1.0):
        loss = kd_word_loss(student, np.zeros((2, 3, 16)), ids, mask, lam)
        assert loss.item() == pytest.approx(np.log(16), abs=1e-12)


def test_kd_gradient_through_student():
    _, ids, mask = _kd_inputs(vocab_size=6)
    ids = np.minimum(ids, 5)
    teacher = np.random.default_rng(7).normal(size=(2, 3, 6))
    point = np.random.default_rng(8).normal(size=(2, 3, 6))
    report = T.grad_check(lambda x: kd_word_loss(x, teacher, ids, mask, 0.4), point)
    assert report.passed


def test_kd_rejects_bad_arguments():
    logits, ids, mask = _kd_inputs()
    with pytest.raises(ModelError, match="lambda"):
        kd_word_loss(logits, np.zeros(logits.shape), ids, mask, 1.5)
    with pytest.raises(ShapeError):
        kd_word_loss(logits, np.zeros((2, 3, 4)), ids, mask, 0.1)


def test_teacher_logits_leave_the_tape_empty(tiny_params, batch):
    out = teacher_logits(tiny_params, batch.src_ids, batch.src_mask, batch.tgt_in, batch.tgt_mask)
    assert out.shape == (batch.size, batch.tgt_in.shape[1], 14)
    assert len(T.get_tape()) == 0


# ---------------------------------------------------------------------------
# Teachers and sequence-level distillation
# ---------------------------------------------------------------------------


def test_teacher_set_freezes_and_validates(tiny_params):
    teachers = TeacherSet({0: tiny_params.copy()}, lam=0.2)
    assert not teachers.teacher(0)["out.b"].requires_grad
    assert set(teachers.content_hashes()) == {0}
    with pytest.raises(TrainingError, match="no teacher for domain 1"):
        teachers.teacher(1)
    with pytest.raises(ModelError):
        TeacherSet({0: tiny_params.copy()}, lam=-0.1)


def test_sequence_targets_keep_gold_for_empty_outputs(tiny_params, train_corpora):
    """A teacher that stops immediately leaves every gold target in place."""
    silent = tiny_params.copy()
    silent["out.W"].data[...] = 0.0
    silent["out.b"].data[...] = 0.0
    silent["out.b"].data[2] = 50.0
    corpus = train_corpora[0]
    distilled = kd_sequence_targets(silent, corpus)
    assert distilled.pairs == corpus.pairs
    assert distilled.kept_gold == len(corpus)


def test_sequence_targets_replace_gold_with_teacher_output(tiny_params, train_corpora):
    """Non-empty teacher outputs become the new targets; sources are kept."""
    loud = tiny_params.copy()
    loud["out.W"].data[...] = 0.0
    loud["out.b"].data[...] = 0.0
    loud["out.b"].data[7] = 50.0
    corpus = train_corpora[1]
    distilled = kd_sequence_targets(loud, corpus)
    assert distilled.sources == corpus.sources
    assert all(set(tgt) == {7} for tgt in distilled.targets)
    assert distilled.kept_gold == 0


def test_sequence_targets_of_empty_corpus(tiny_params):
    empty = DomainCorpus(0, "identity", [])
    assert kd_sequence_targets(tiny_params, empty).pairs == []


# ---------------------------------------------------------------------------
# Unified objective
# ---------------------------------------------------------------------------


def test_objective_without_extras_is_nll(tiny_params, batch):
    """With every supervision flag off only the NLL term remains."""
    flags = SupervisionFlags(transform=False)
    report = unified_objective(batch, tiny_params, None, None, None, flags)
    T.get_tape().reset()
    memory = M.encode(tiny_params, batch.src_ids, batch.src_mask)
    logits = M.decode_logits(tiny_params, memory, batch.src_mask, batch.tgt_in, batch.tgt_mask)
    expected = M.nll_loss(logits, batch.tgt_out, batch.tgt_mask).item()
    assert report.phase_a.item() == expected
    assert report.values()["specific_cls"] == 0.0
    assert report.phase_b is None


def test_fresh_bank_leaves_the_objective_unchanged(unified, batch):
    params, bank, _ = unified
    plain = unified_objective(batch, params, None, None, None, SupervisionFlags(transform=False)).phase_a.item()
    T.get_tape().reset()
    transformed = unified_objective(batch, params, bank, None, None, SupervisionFlags(transform=True)).phase_a.item()
    assert plain == transformed


def test_objective_with_discrimination(unified, batch):
    """Phase A adds the specific loss and the scaled negative entropy."""
    params, bank, classifiers = unified
    flags = SupervisionFlags(discriminate=True)
    report = unified_objective(batch, params, bank, classifiers, None, flags, cls_weight=0.5)
    values = report.values()
    assert values["adv_entropy"] < 0
    assert values["adv_entropy"] >= -0.1 * np.log(2) - 1e-12
    expected = values["nll_or_kd"] + (values["specific_cls"] + values["adv_entropy"]) * 0.5
    assert report.phase_a.item() == pytest.approx(expected, abs=1e-12)
    assert report.phase_b.item() == pytest.approx(values["adv_cls"] * 0.5, abs=1e-12)


def _pool_by_hand(H, mask, query):
    scores = np.where(mask, H @ query / np.sqrt(H.shape[-1]), -np.inf)
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    weights /= weights.sum(axis=1, keepdims=True)
    return np.einsum("bl,bld->bd", weights, H)


def _log_probs_by_hand(pooled, W):
    z = pooled @ W
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def test_objective_matches_a_recomputation_by_hand(unified, batch):
    """Both phase losses agree with the classifier terms rebuilt in plain numpy."""
    params, bank, classifiers = unified
    report = unified_objective(
        batch, params, bank, classifiers, None, SupervisionFlags(discriminate=True), cls_weight=0.7
    )
    T.get_tape().reset()
    with T.no_grad():
        H = M.encode(params, batch.src_ids, batch.src_mask)
        H_prime = transform(bank, H, batch.src_mask, batch.domain)
        logits = M.decode_logits(params, H_prime, batch.src_mask, batch.tgt_in, batch.tgt_mask)
        nll = M.nll_loss(logits, batch.tgt_out, batch.tgt_mask).item()
    spec_log = _log_probs_by_hand(
        _pool_by_hand(H_prime.data, batch.src_mask, classifiers.spec_query.data), classifiers.spec_weights.data
    )
    adv_log = _log_probs_by_hand(
        _pool_by_hand(H.data, batch.src_mask, classifiers.adv_query.data), classifiers.adv_weights.data
    )
    specific = -spec_log[:, batch.domain].mean()
    adversary = -adv_log[:, batch.domain].mean()
    mean_entropy = -(np.exp(adv_log) * adv_log).sum(axis=1).mean()
    expected_a = nll + (specific - 0.1 * mean_entropy) * 0.7
    assert report.phase_a.item() == pytest.approx(expected_a, rel=1e-10)
    assert report.phase_b.item() == pytest.approx(adversary * 0.7, rel=1e-10)


def test_zero_delta_removes_the_entropy_term(unified, batch):
    params, bank, _ = unified
    classifiers = attach_classifiers(params, 2, delta=0.0)
    report = unified_objective(batch, params, bank, classifiers, None, SupervisionFlags(discriminate=True))
    assert report.values()["adv_entropy"] == 0.0


def test_objective_requires_its_inputs(unified, batch):
    params, bank, _ = unified
    with pytest.raises(TrainingError, match="teachers"):
        unified_objective(batch, params, bank, None, None, SupervisionFlags(distill_word=True))
    T.get_tape().reset()
    with pytest.raises(TrainingError, match="classifier"):
        unified_objective(batch, params, bank, None, None, SupervisionFlags(discriminate=True))


def test_word_distillation_uses_cached_teacher_logits(unified, batch):
    """Cached logits and a live teacher give the same loss."""
    params, bank, _ = unified
    teachers = TeacherSet({1: params.copy()}, lam=0.3)
    flags = SupervisionFlags(distill_word=True)
    live = unified_objective(batch, params, bank, None, teachers, flags).phase_a.item()
    T.get_tape().reset()
    cached = teacher_logits(teachers.teacher(1), batch.src_ids, batch.src_mask, batch.tgt_in, batch.tgt_mask)
    again = unified_objective(batch, params, bank, None, teachers, flags, cached_teacher_logits=cached)
    assert again.phase_a.item() == live


# ---------------------------------------------------------------------------
# Two-phase update
# ---------------------------------------------------------------------------


def test_phase_names_partition_the_parameters(unified):
    params, _, _ = unified
    a, b = phase_names(params, PHASE_A), phase_names(params, PHASE_B)
    assert sorted(a + b) == sorted(params)
    assert b == ["cls.adv.W", "cls.adv.query"]
    assert a == trainable_names(params, ["cls.adv."])
    with pytest.raises(TrainingError, match="invalid phase"):
        phase_names(params, 2)


def test_phase_a_leaves_the_adversary_untouched(unified, batch):
    params, bank, classifiers = unified
    adversary = _snapshot(params, "cls.adv.")
    before = _snapshot(params)
    optimizer = Adam(OptimConfig(lr=1e-2, warmup_steps=1))
    values = two_phase_step(
        optimizer, params, batch, PHASE_A, bank, classifiers, None, SupervisionFlags(discriminate=True)
    )
    for name, data in adversary.items():
        np.testing.assert_array_equal(params[name].data, data)
    assert not np.array_equal(params["cls.spec.W"].data, before["cls.spec.W"])
    assert not np.array_equal(params["enc.layer0.attn.Wq"].data, before["enc.layer0.attn.Wq"])
    assert {"nll_or_kd", "specific_cls", "adv_entropy", "adv_cls", "total", "lr"} <= set(values)
    assert optimizer.step_count == 1


def test_phase_b_updates_only_the_adversary(unified, batch):
    params, bank, classifiers = unified
    before = _snapshot(params)
    optimizer = Adam(OptimConfig(lr=1e-2, warmup_steps=1))
    values = two_phase_step(optimizer, params, batch, PHASE_B, bank, classifiers)
    changed = {name for name, data in before.items() if not np.array_equal(params[name].data, data)}
    assert changed == {"cls.adv.W", "cls.adv.query"}
    assert set(values) == {"adv_cls", "lr"}
    assert optimizer.step_count == 0


def test_phase_b_needs_classifiers(tiny_params, batch):
    with pytest.raises(TrainingError):
        two_phase_step(Adam(OptimConfig()), tiny_params, batch, PHASE_B)


def test_non_finite_loss_raises_divergence(tiny_params, batch):
    tiny_params["out.b"].data[5] = np.nan
    with pytest.raises(DivergenceError) as info:
        two_phase_step(
            Adam(OptimConfig()), tiny_params, batch, PHASE_A, flags=SupervisionFlags(transform=False), step=7
        )
    assert info.value.step == 7
    assert "nll_or_kd" in info.value.report


@pytest.mark.slow
def test_phases_keep_their_freeze_for_200_steps(unified, train_corpora):
    """Every phase A leaves ψ bit-identical and every phase B moves ψ alone."""
    params, bank, classifiers = unified
    batches = [b for corpus in train_corpora for b in make_batches(corpus, 80)]
    adversary = set(params.names("cls.adv."))
    optimizer = Adam(OptimConfig(lr=3e-3, warmup_steps=10))
    flags = SupervisionFlags(discriminate=True)
    for step in range(1, 201):
        batch = batches[step % len(batches)]
        before = _snapshot(params, "cls.adv.")
        two_phase_step(optimizer, params, batch, PHASE_A, bank, classifiers, None, flags, step=step)
        for name, data in before.items():
            np.testing.assert_array_equal(params[name].data, data, err_msg=f"step {step}: {name}")
        before = _snapshot(params)
        two_phase_step(optimizer, params, batch, PHASE_B, bank, classifiers, None, flags, step=step)
        changed = {name for name, data in before.items() if not np.array_equal(params[name].data, data)}
        assert changed <= adversary, f"step {step}: {sorted(changed - adversary)}"


@pytest.mark.slow
def test_adversary_separates_tagged_sources(tiny_params, train_corpora, vocab):
    """On a fixed encoder whose inputs carry their domain tag, phase B alone pushes adv_cls below ln N."""
    classifiers = init_classifiers(tiny_params, 2, np.random.default_rng(2))
    batches = [make_batches(add_domain_tags(c, vocab), 80) for c in train_corpora]
    encoder = _snapshot(tiny_params, "enc.")
    optimizer = Adam(OptimConfig(lr=1e-2, warmup_steps=1))
    for step in range(300):
        domain_batches = batches[step % 2]
        batch = domain_batches[(step // 2) % len(domain_batches)]
        two_phase_step(optimizer, tiny_params, batch, PHASE_B, None, classifiers)
    for name, data in encoder.items():
        np.testing.assert_array_equal(tiny_params[name].data, data)
    for domain_batches in batches:
        losses = []
        for batch in domain_batches:
            with T.no_grad():
                H = M.encode(tiny_params, batch.src_ids, batch.src_mask)
                pooled = attention_pool(H, batch.src_mask, classifiers.adv_query)
                losses.append(classifier_nll(pooled, classifiers.adv_weights, batch.domain).item())
        assert np.mean(losses) < np.log(2)
