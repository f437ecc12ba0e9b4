import numpy as np
import pytest

from msda import autodiff as ad
from msda import losses as L
from msda.model import ModelParams, forward
from msda.pipeline import feedback_term
from msda.rng import Rng

from gradcheck import check_directional
from helpers import random_batch, tiny_config, tiny_params, token_ids

COMPOSITE_INSTANCES = 100


# --------------------------------------------------------------------------
# closed forms


@pytest.mark.parametrize("groups,entries", [(1, 2), (2, 4), (2, 32), (3, 7)])
def test_diversity_closed_forms(groups, entries):
    uniform = np.full((groups, entries), 1.0 / entries)
    assert float(L.diversity_loss(uniform).data) == pytest.approx(0.0, abs=1e-15)
    one_hot = np.zeros((groups, entries))
    one_hot[:, 0] = 1.0
    assert float(L.diversity_loss(one_hot).data) == 1.0 - 1.0 / entries


def test_diversity_is_bounded_between_the_closed_forms():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = rng.dirichlet(np.ones(6) * 0.3, size=2)
        d = float(L.diversity_loss(p).data)
        assert -1e-12 <= d <= 1.0 - 1.0 / 6 + 1e-12


def test_diversity_rejects_non_distributions():
    with pytest.raises(ValueError):
        L.diversity_loss(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        L.diversity_loss(np.array([[1.5, -0.5]]))


@pytest.mark.parametrize("k", [0, 1, 5, 10])
def test_contrastive_uniform_case_is_log_k_plus_one(k):
    rng = np.random.default_rng(k)
    m, f = 6, 4
    targets = np.tile(rng.normal(size=(1, f)), (m, 1))  # every candidate identical
    context = rng.normal(size=(m, f))
    distractors = rng.integers(0, m, size=(m, k))
    value = float(L.contrastive_loss(context, targets, distractors, temperature=0.1).data)
    assert value == pytest.approx(np.log(k + 1), abs=1e-9)


def test_contrastive_prefers_the_true_target():
    rng = np.random.default_rng(1)
    targets = rng.normal(size=(5, 3))
    distractors = np.array([[(i + 1) % 5, (i + 2) % 5] for i in range(5)])
    aligned = float(L.contrastive_loss(targets, targets, distractors, 0.1).data)
    shuffled = float(L.contrastive_loss(targets[::-1], targets, distractors, 0.1).data)
    assert aligned < np.log(3) < shuffled


def test_contrastive_needs_masked_frames():
    with pytest.raises(ValueError):
        L.contrastive_loss(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2), int), 0.1)


def test_coefficients_must_be_non_negative():
    with pytest.raises(ValueError):
        L.Stage1Coeffs(alpha=-1e-3)
    with pytest.raises(ValueError):
        L.Stage2Coeffs(delta=-1.0)


def test_compose_rejects_mismatched_or_non_finite_terms():
    with pytest.raises(ValueError):
        L.compose({"a": ad.as_value(1.0)}, {"b": 1.0})
    with pytest.raises(FloatingPointError):
        L.compose({"a": ad.as_value(np.nan)}, {"a": 1.0})
    with pytest.raises(ValueError):
        L.compose({"a": ad.as_value(np.ones(2))}, {"a": 1.0})


# --------------------------------------------------------------------------
# the four composite objectives on a tiny model


def _forward(values, cfg, batch, mode, seed, with_codebook=False):
    params = ModelParams(cfg, values)
    return forward(params, batch, mode=mode, rng=Rng(seed) if mode == "with_ssl" else None,
                   gumbel_temperature=1.5, with_codebook=with_codebook)


def stage_one(cfg, src, tgt, coeffs, seed):
    def loss(values):
        out_s = _forward(values, cfg, src, "with_ssl", seed)
        out_t = _forward(values, cfg, tgt, "with_ssl", seed + 1)
        ctc_s = _forward(values, cfg, src, "ctc_only", seed)
        return L.m2ds2_loss(out_s, out_t, token_ids(src), coeffs, cfg.contrastive_temperature, ctc_out_source=ctc_s)
    return loss


def teacher(cfg, src, tgt, coeffs, h, pseudo, seed):
    def loss(values):
        t_out = _forward(values, cfg, tgt, "ctc_only", seed, with_codebook=True)
        t_ctc, _ = L.ctc_term(t_out, pseudo)
        s_ctc, _ = L.ctc_term(_forward(values, cfg, src, "ctc_only", seed), token_ids(src))
        return L.stage2_teacher_loss(feedback_term(h, t_ctc), s_ctc, L.diversity_loss(t_out.codebook_probs), coeffs)
    return loss


def ablation_teacher(cfg, src, tgt, h, pseudo, seed):
    def loss(values):
        t_ctc, _ = L.ctc_term(_forward(values, cfg, tgt, "ctc_only", seed), pseudo)
        ssl_s, _ = L.ssl_loss(_forward(values, cfg, src, "with_ssl", seed), cfg.contrastive_temperature)
        ssl_t, _ = L.ssl_loss(_forward(values, cfg, tgt, "with_ssl", seed + 1), cfg.contrastive_temperature)
        return L.ablation_teacher_loss(feedback_term(h, t_ctc), ssl_s, ssl_t)
    return loss


def ablation_student(cfg, tgt, pseudo, seed):
    def loss(values):
        s_ctc, _ = L.ctc_term(_forward(values, cfg, tgt, "ctc_only", seed), pseudo)
        ssl_t, _ = L.ssl_loss(_forward(values, cfg, tgt, "with_ssl", seed), cfg.contrastive_temperature)
        return L.ablation_student_loss(s_ctc, ssl_t)
    return loss


def _instance(i):
    rng = np.random.default_rng(1000 + i)
    cfg = tiny_config(hard_quantizer=False)  # straight-through has no finite-difference counterpart
    params = tiny_params(seed=i, hard_quantizer=False).arrays()
    src = random_batch(rng, "source")
    tgt = random_batch(rng, "target")
    pseudo = [list(rng.integers(1, 6, size=int(rng.integers(1, 3)))) for _ in range(len(tgt))]
    h = float(rng.normal())
    return rng, cfg, params, src, tgt, pseudo, h


def _make(name, i):
    rng, cfg, params, src, tgt, pseudo, h = _instance(i)
    if name == "stage_one":
        coeffs = L.Stage1Coeffs(alpha=float(rng.uniform(0, 1)), beta=float(rng.uniform(0, 1)))
        fn = stage_one(cfg, src, tgt, coeffs, i)
    elif name == "teacher":
        coeffs = L.Stage2Coeffs(gamma=float(rng.uniform(0, 1)), delta=float(rng.uniform(0, 1)))
        fn = teacher(cfg, src, tgt, coeffs, h, pseudo, i)
    elif name == "ablation_teacher":
        fn = ablation_teacher(cfg, src, tgt, h, pseudo, i)
    else:
        fn = ablation_student(cfg, tgt, pseudo, i)
    return rng, params, fn


@pytest.mark.parametrize("name", ["stage_one", "teacher", "ablation_teacher", "ablation_student"])
def test_composite_loss_gradient_matches_finite_differences(name):
    failures = []
    for i in range(COMPOSITE_INSTANCES):
        rng, params, fn = _make(name, i)
        ok, analytic, numeric = check_directional(lambda v: fn(v).total, params, rng)
        if not ok:
            failures.append((i, analytic, numeric))
    assert not failures, failures[:3]


@pytest.mark.parametrize("name", ["stage_one", "teacher", "ablation_teacher", "ablation_student"])
def test_bundle_total_recomposes_from_terms(name):
    for i in range(20):
        _, params, fn = _make(name, i)
        with ad.no_grad():
            bundle = fn({k: ad.as_value(a) for k, a in params.items()})
        assert abs(float(bundle.total.data) - bundle.recompose()) <= 1e-12
        assert set(bundle.terms) == set(bundle.coefficients)


def test_objective_term_names_and_weights():
    one = ad.as_value(1.0)
    _, params, fn = _make("stage_one", 0)
    with ad.no_grad():
        b1 = fn({k: ad.as_value(a) for k, a in params.items()})
    assert set(b1.coefficients) == {"ctc_source", "ssl_source", "ssl_target"}
    assert b1.coefficients["ctc_source"] == 1.0
    b2 = L.stage2_teacher_loss(one, one, one, L.Stage2Coeffs(0.3, 0.7))
    assert b2.coefficients == {"feedback": 1.0, "ctc_source": 0.3, "diversity_target": 0.7}
    assert float(b2.total.data) == pytest.approx(2.0)
    b3 = L.ablation_teacher_loss(one, one, one)
    assert b3.coefficients == {"feedback": 1.0, "ssl_source": 1.0, "ssl_target": 1.0}
    b4 = L.ablation_student_loss(one, one)
    assert b4.coefficients == {"ctc_target_pseudo": 1.0, "ssl_target": 1.0}
    assert L.student_loss(one).coefficients == {"ctc_target_pseudo": 1.0}


def test_m2ds2_requires_source_labels():
    rng = np.random.default_rng(0)
    params = tiny_params()
    src = random_batch(rng)
    out = forward(params, src, mode="with_ssl", rng=Rng(0))
    with pytest.raises(ValueError):
        L.m2ds2_loss(out, out, [None, [1]], L.Stage1Coeffs(), 0.1)
