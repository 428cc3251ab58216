import numpy as np
import pytest

from sckls.errors import DomainError, SingularLocalDesignError
from sckls.services.dgp import DgpSpec, gen_dgp
from sckls.services.estimators import (
    CONCAVE_INCREASING,
    Curvature,
    DerivativeBound,
    HyperplaneModel,
    LocalLinearFit,
    Monotonicity,
    ShapeConstraints,
    ShapeSpec,
    cnls_fit,
    linear_fit,
    local_linear_fit,
    monotone_linear_fit,
    predict,
    sckls_fit,
    sckls_objective,
)
from sckls.services.evaluation_grid import EvalGrid, uniform_grid
from sckls.services.kernel_weights import BandwidthSpec, weight_matrix
from tests.utils import generate_affine, generate_cobb_douglas


def _theta(model: HyperplaneModel) -> np.ndarray:
    return np.column_stack([model.a, model.b]).ravel()


def test_shape_spec_parse_and_label() -> None:
    shape: ShapeSpec = ShapeSpec.parse("concave-increasing", 2)
    assert shape.curvature is Curvature.CONCAVE
    assert shape.monotonicity == (Monotonicity.INCREASING, Monotonicity.INCREASING)
    assert shape.label() == "concave-increasing"
    assert ShapeSpec.parse("none", 1).is_trivial
    assert ShapeSpec.parse("convex", 1).label() == "convex"
    with pytest.raises(DomainError):
        ShapeSpec.parse("concave-wiggly", 1)


def test_predict_min_of_planes_examples() -> None:
    model: HyperplaneModel = HyperplaneModel(
        grid=EvalGrid.external([[0.0], [2.0]]),
        a=np.array([1.0, 2.0]),
        b=np.array([[1.0], [0.5]]),
        shape=CONCAVE_INCREASING,
    )
    assert predict(model, 0.0) == 1.0
    assert predict(model, 4.0) == 3.0
    np.testing.assert_allclose(actual=predict(model, [0.0, 4.0]), desired=[1.0, 3.0])


@pytest.mark.parametrize(
    argnames="curvature",
    argvalues=[Curvature.CONCAVE, Curvature.CONVEX, Curvature.NONE],
)
def test_predict_matches_plane_enumeration(curvature: Curvature, rng: np.random.Generator) -> None:
    points: np.ndarray = rng.uniform(size=(8, 2))
    model: HyperplaneModel = HyperplaneModel(
        grid=EvalGrid.external(points),
        a=rng.normal(size=8),
        b=rng.normal(size=(8, 2)),
        shape=ShapeSpec(curvature, (Monotonicity.FREE,)),
    )
    queries: np.ndarray = rng.uniform(size=(25, 2))
    expected = []
    for x in queries:
        values = [model.a[i] + (x - points[i]) @ model.b[i] for i in range(8)]
        if curvature is Curvature.CONCAVE:
            expected.append(min(values))
        elif curvature is Curvature.CONVEX:
            expected.append(max(values))
        else:
            expected.append(values[int(np.argmin(np.linalg.norm(points - x, axis=1)))])
    np.testing.assert_allclose(actual=predict(model, queries), desired=expected, rtol=1e-12)


def test_predict_rejects_wrong_dimension() -> None:
    model: HyperplaneModel = HyperplaneModel(
        grid=EvalGrid.external([[0.0, 0.0], [1.0, 1.0]]),
        a=np.zeros(2),
        b=np.zeros((2, 2)),
        shape=CONCAVE_INCREASING,
    )
    with pytest.raises(DomainError):
        predict(model, np.zeros((3, 3)))


def test_local_linear_reproduces_affine_function() -> None:
    X, y = generate_affine(n=40, d=2)
    fit: LocalLinearFit = local_linear_fit(X, y, uniform_grid(X, (4, 4)), BandwidthSpec.fixed(1.0))
    np.testing.assert_allclose(actual=fit.a, desired=1.0 + fit.grid.points @ [2.0, 0.5], atol=1e-9)
    np.testing.assert_allclose(actual=fit.b, desired=np.tile([2.0, 0.5], (16, 1)), atol=1e-9)
    assert fit.objective == pytest.approx(0.0, abs=1e-16 * y.size + 1e-18)


def test_local_linear_matches_weighted_least_squares(rng: np.random.Generator) -> None:
    X, y = generate_cobb_douglas(n=50, d=2, seed=3)
    grid: EvalGrid = uniform_grid(X, (3, 3))
    bw: BandwidthSpec = BandwidthSpec.fixed([2.0, 3.0])
    fit: LocalLinearFit = local_linear_fit(X, y, grid, bw)
    W: np.ndarray = weight_matrix(X, grid, bw).w
    for i, x in enumerate(grid.points):
        A: np.ndarray = np.column_stack([np.ones(50), X - x])
        sw: np.ndarray = np.sqrt(W[i])
        coef: np.ndarray = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)[0]
        np.testing.assert_allclose(actual=fit.a[i], desired=coef[0], rtol=1e-8)
        np.testing.assert_allclose(actual=fit.b[i], desired=coef[1:], rtol=1e-7, atol=1e-9)


def test_local_linear_reports_singular_design() -> None:
    X, y = generate_affine(n=10, d=1)
    with pytest.raises(SingularLocalDesignError):
        local_linear_fit(X, y, X, BandwidthSpec.fixed(1e-6))


def test_sckls_reproduces_feasible_affine_data() -> None:
    X, y = generate_affine(n=30, d=2, seed=4)
    model: HyperplaneModel = sckls_fit(X, y, uniform_grid(X, (3, 3)), BandwidthSpec.fixed(1.0))
    assert model.diagnostics["unconstrained_feasible"]
    np.testing.assert_allclose(actual=predict(model, X), desired=y, atol=1e-8)


def test_sckls_rejects_trivial_shape() -> None:
    X, y = generate_affine(n=20, d=1)
    with pytest.raises(DomainError):
        sckls_fit(X, y, uniform_grid(X, 5), BandwidthSpec.fixed(1.0), shape=ShapeSpec.parse("none", 1))


def test_sckls_tiny_bandwidth_equals_cnls(rng: np.random.Generator) -> None:
    X: np.ndarray = rng.uniform(0.0, 4.0, size=(20, 1))
    y: np.ndarray = np.sqrt(X[:, 0]) + rng.normal(0.0, 0.3, size=20)
    sckls: HyperplaneModel = sckls_fit(X, y, X, BandwidthSpec.fixed(1e-6))
    cnls: HyperplaneModel = cnls_fit(X, y)
    assert not sckls.diagnostics["unconstrained_feasible"]
    np.testing.assert_allclose(actual=predict(sckls, X), desired=predict(cnls, X), atol=1e-4)


@pytest.mark.parametrize(argnames="h", argvalues=[1e-3, 0.05])
@pytest.mark.parametrize(argnames="seed", argvalues=list(range(10)))
def test_sckls_small_bandwidth_on_sample_grid_is_optimal(seed: int, h: float) -> None:
    r: np.random.Generator = np.random.default_rng(seed)
    X: np.ndarray = r.uniform(0.0, 4.0, size=(20, 1))
    y: np.ndarray = np.sqrt(X[:, 0]) + r.normal(0.0, 0.3, size=20)
    model: HyperplaneModel = sckls_fit(X, y, X, BandwidthSpec.fixed(h))
    assert model.diagnostics["status"] == "optimal"
    assert ShapeConstraints(model.grid.points, CONCAVE_INCREASING).satisfied(_theta(model), 1e-6)


def test_sckls_cobb_douglas_ten_by_ten_grid_is_optimal() -> None:
    sample = gen_dgp(DgpSpec.cobb_douglas(2, 100), 0)
    model: HyperplaneModel = sckls_fit(sample.X, sample.y, uniform_grid(sample.X, (10, 10)), BandwidthSpec.fixed(0.3))
    assert model.diagnostics["status"] == "optimal"
    assert (model.b >= -1e-8).all()


def test_cnls_on_cobb_douglas_sample_is_optimal() -> None:
    sample = gen_dgp(DgpSpec.cobb_douglas(2, 100), 0)
    model: HyperplaneModel = cnls_fit(sample.X, sample.y)
    assert model.diagnostics["status"] == "optimal"
    assert ShapeConstraints(model.grid.points, CONCAVE_INCREASING).satisfied(_theta(model), 1e-6)


@pytest.mark.parametrize(
    argnames="slope",
    argvalues=[1.5, -0.5],
)
def test_sckls_huge_bandwidth_is_sign_constrained_linear_fit(slope: float, rng: np.random.Generator) -> None:
    X: np.ndarray = rng.uniform(0.0, 4.0, size=(20, 1))
    y: np.ndarray = 2.0 + slope * X[:, 0] + rng.normal(0.0, 0.1, size=20)
    grid: EvalGrid = uniform_grid(X, 6)
    model: HyperplaneModel = sckls_fit(X, y, grid, BandwidthSpec.fixed(1e6))
    intercept, slopes = monotone_linear_fit(X, y)
    if slope > 0:
        ols_intercept, ols_slopes = linear_fit(X, y)
        np.testing.assert_allclose(actual=[intercept, slopes[0]], desired=[ols_intercept, ols_slopes[0]], rtol=1e-8)
    else:
        assert slopes[0] == 0.0
        np.testing.assert_allclose(actual=intercept, desired=y.mean(), rtol=1e-8)
    np.testing.assert_allclose(actual=model.a, desired=intercept + slopes[0] * grid.points[:, 0], atol=1e-4)
    np.testing.assert_allclose(actual=model.b[:, 0], desired=np.full(6, slopes[0]), atol=1e-4)


def test_cnls_three_point_projection() -> None:
    X: np.ndarray = np.array([[0.0], [1.0], [2.0]])
    model: HyperplaneModel = cnls_fit(X, [0.0, 0.0, 3.0])
    np.testing.assert_allclose(actual=predict(model, X), desired=[-0.5, 1.0, 2.5], atol=1e-6)


def test_cnls_reproduces_concave_increasing_data() -> None:
    X: np.ndarray = np.array([[0.0], [1.0], [2.0]])
    model: HyperplaneModel = cnls_fit(X, [0.0, 1.0, 1.8])
    np.testing.assert_allclose(actual=predict(model, X), desired=[0.0, 1.0, 1.8], atol=1e-6)


def test_cnls_merges_duplicates() -> None:
    X: np.ndarray = np.array([[0.0], [1.0], [1.0], [2.0]])
    model: HyperplaneModel = cnls_fit(X, [0.0, 0.8, 1.2, 1.8])
    assert model.grid.m == 3
    assert model.diagnostics["merged_duplicates"] == 1
    np.testing.assert_allclose(actual=predict(model, [[1.0]]), desired=[1.0], atol=1e-6)


def test_cnls_requires_curvature() -> None:
    with pytest.raises(DomainError):
        cnls_fit([[0.0], [1.0], [2.0]], [0.0, 1.0, 2.0], shape=ShapeSpec.parse("increasing", 1))


@pytest.fixture(scope="module")
def convex_data():
    r: np.random.Generator = np.random.default_rng(21)
    X: np.ndarray = r.uniform(0.0, 1.0, size=(40, 2))
    y: np.ndarray = X[:, 0] ** 2 + X[:, 1] ** 2 + r.normal(0.0, 0.02, size=40)
    return X, y


def test_lazy_and_full_constraint_sets_agree(convex_data) -> None:
    X, y = convex_data
    grid: EvalGrid = uniform_grid(X, (3, 3))
    bw: BandwidthSpec = BandwidthSpec.fixed(0.5)
    lazy: HyperplaneModel = sckls_fit(X, y, grid, bw, lazy=True)
    full: HyperplaneModel = sckls_fit(X, y, grid, bw, lazy=False)
    assert lazy.diagnostics["afriat_rows"] <= full.diagnostics["afriat_rows"] == 72
    np.testing.assert_allclose(actual=lazy.diagnostics["objective_value"], desired=full.diagnostics["objective_value"], rtol=1e-6)
    np.testing.assert_allclose(actual=predict(lazy, X), desired=predict(full, X), atol=1e-5)


def test_sckls_fit_satisfies_shape_and_objective_bound(convex_data) -> None:
    X, y = convex_data
    grid: EvalGrid = uniform_grid(X, (4, 4))
    bw: BandwidthSpec = BandwidthSpec.fixed(0.4)
    model: HyperplaneModel = sckls_fit(X, y, grid, bw)
    assert model.diagnostics["status"] == "optimal"
    assert ShapeConstraints(grid.points, CONCAVE_INCREASING).satisfied(_theta(model), 1e-6)
    assert (model.b >= -1e-8).all()

    unconstrained: LocalLinearFit = local_linear_fit(X, y, grid, bw)
    assert sckls_objective(X, y, model) >= unconstrained.objective - 1e-8
    np.testing.assert_allclose(actual=sckls_objective(X, y, model), desired=model.diagnostics["objective_value"], rtol=1e-6)

    r: np.random.Generator = np.random.default_rng(8)
    u: np.ndarray = r.uniform(size=(200, 2))
    v: np.ndarray = r.uniform(size=(200, 2))
    mid: np.ndarray = predict(model, (u + v) / 2.0)
    assert (mid >= (predict(model, u) + predict(model, v)) / 2.0 - 1e-9).all()
    assert (predict(model, u + np.array([0.1, 0.0])) >= predict(model, u) - 1e-9).all()


def test_sckls_convex_shape(convex_data) -> None:
    X, y = convex_data
    grid: EvalGrid = uniform_grid(X, (3, 3))
    shape: ShapeSpec = ShapeSpec.parse("convex", 2)
    model: HyperplaneModel = sckls_fit(X, y, grid, BandwidthSpec.fixed(0.3), shape=shape)
    assert ShapeConstraints(grid.points, shape).satisfied(_theta(model), 1e-6)


def test_sckls_derivative_bounds() -> None:
    X, y = generate_affine(n=30, d=1, seed=2)
    shape: ShapeSpec = ShapeSpec(
        Curvature.CONCAVE,
        (Monotonicity.INCREASING,),
        bounds=(DerivativeBound(0, lower=0.5, upper=1.0),),
    )
    model: HyperplaneModel = sckls_fit(X, y, uniform_grid(X, 5), BandwidthSpec.fixed(1.0), shape=shape)
    assert (model.b[:, 0] <= 1.0 + 1e-7).all()
    assert (model.b[:, 0] >= 0.5 - 1e-7).all()
    assert model.diagnostics["base_rows"] == 3 * 5


def test_derivative_bound_index_checked() -> None:
    shape: ShapeSpec = ShapeSpec(Curvature.CONCAVE, (Monotonicity.FREE,), bounds=(DerivativeBound(3, upper=1.0),))
    with pytest.raises(DomainError):
        ShapeConstraints(np.array([[0.0], [1.0]]), shape).base_rows()
