import numpy as np
import pytest

from emsubspace.errors import DimensionError, PerfectRegistrationError
from emsubspace.motion import (
    DisplacementField,
    ScoreClass,
    SolverSpec,
    classify_scores,
    estimate_field,
    imc,
    mahalanobis,
    shifted_sequence,
)
from emsubspace.motion.metrics import neighbourhood_scores


def test_zero_field_is_zero_db():
    frames, _ = shifted_sequence((2, 1), n_frames=3, seed=1, snr_db=20)
    fields = [DisplacementField.zeros(64, 64)] * 2
    assert imc(frames, fields) == 0.0


def test_exact_field_is_perfect_registration():
    frames, truth = shifted_sequence((2, 1), seed=1)
    with pytest.raises(PerfectRegistrationError):
        imc(frames, [truth], margin=4)


def test_imc_closed_form():
    frames, truth = shifted_sequence((1, 0), seed=2)
    half = DisplacementField.constant(64, 64, (0.5, 0.0))
    raw = np.sum((frames[1].intensities[4:-4, 4:-4] - frames[0].intensities[4:-4, 4:-4]) ** 2)
    pred = 0.5 * (frames[0].intensities[4:-4, 4:-4] + frames[0].intensities[4:-4, 3:-5])
    comp = np.sum((frames[1].intensities[4:-4, 4:-4] - pred) ** 2)
    assert imc(frames, [half], margin=4) == pytest.approx(10 * np.log10(raw / comp), rel=1e-12)


def test_imc_argument_checks():
    frames, truth = shifted_sequence((1, 0), seed=2)
    with pytest.raises(ValueError):
        imc(frames[:1], [])
    with pytest.raises(ValueError):
        imc(frames, [truth, truth])
    with pytest.raises(DimensionError):
        imc(frames, [DisplacementField.zeros(8, 8)])
    with pytest.raises(ValueError):
        imc(frames, [truth], margin=32)


@pytest.mark.parametrize("solver", ["ols", "rls", "pcr1", "pcr2"])
@pytest.mark.parametrize("shift,method", [((2, 1), "crop"), ((0.5, 0.25), "bilinear")])
def test_estimate_never_worse_than_zero(solver, shift, method):
    frames, _ = shifted_sequence(shift, seed=5, snr_db=20, method=method)
    fld = estimate_field(*frames, spec=SolverSpec(solver))
    zero = imc(frames, [DisplacementField.zeros(64, 64)])
    assert imc(frames, [fld]) >= zero - 1e-9


def two_classes():
    a = ScoreClass(np.array([0.0, 0.0]), np.eye(2), 2.0)
    b = ScoreClass(np.array([5.0, 0.0]), np.diag([4.0, 1.0]), 2.0)
    return a, b


def test_classify_point_at_mean():
    a, b = two_classes()
    (m,) = classify_scores([[0.0, 0.0]], [a, b], residual_limit=1.0)
    assert m.kind == "class" and m.label == 0


def test_classify_far_point_is_outlier():
    a, b = two_classes()
    (m,) = classify_scores([[0.0, 40.0]], [a, b], residual_limit=1.0)
    assert m.kind == "outlier" and m.label == "outlier"


def test_classify_overlap_is_ambiguous():
    a, b = two_classes()
    pt = np.array([1.5, 0.0])
    # direct arithmetic: 1.5 from a, |1.5 - 5| / 2 = 1.75 from b
    assert mahalanobis(pt, a) == pytest.approx(1.5)
    assert mahalanobis(pt, b) == pytest.approx(1.75)
    (m,) = classify_scores(pt, [a, b], residual_limit=1.0)
    assert m.kind == "ambiguous" and m.classes == (0, 1)


def test_classify_residual_limit():
    a, b = two_classes()
    out = classify_scores([[0.0, 0.0], [0.0, 0.0]], [a, b], 1.0, residuals=[0.5, 1.5])
    assert [m.kind for m in out] == ["class", "outlier"]


def test_singular_covariance_is_regularized():
    c = ScoreClass(np.zeros(2), np.diag([1.0, 0.0]), 3.0)
    (m,) = classify_scores([[1.0, 0.0]], [c], residual_limit=1.0)
    assert m.kind == "class"
    (m,) = classify_scores([[0.0, 1.0]], [c], residual_limit=1.0)
    assert m.kind == "outlier"


def test_score_class_fit():
    pts = np.random.default_rng(0).standard_normal((500, 2)) * [2.0, 0.5] + [1.0, -1.0]
    c = ScoreClass.fit(pts, 3.0)
    np.testing.assert_allclose(c.mean, [1.0, -1.0], atol=0.2)
    np.testing.assert_allclose(np.diag(c.covariance), [4.0, 0.25], rtol=0.2)
    with pytest.raises(DimensionError):
        ScoreClass.fit(pts[:1], 1.0)


def test_neighbourhood_scores_residual():
    rng = np.random.default_rng(3)
    G = rng.standard_normal((6, 2))
    u = np.array([0.3, -0.2])
    T, resid = neighbourhood_scores(G, G @ u)
    assert T.shape == (6, 2)
    assert resid < 1e-12
