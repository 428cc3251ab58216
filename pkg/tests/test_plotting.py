import numpy as np
import pandas as pd
import pytest

from sckls.errors import DomainError
from sckls.services.estimators import sckls_fit
from sckls.services.evaluation_grid import uniform_grid
from sckls.services.kernel_weights import BandwidthSpec
from sckls.services.plotting import plot_frame, write_svg
from tests.utils import generate_affine


def test_line_plot_data() -> None:
    X, y = generate_affine(n=25, d=1, seed=2)
    model = sckls_fit(X, y, uniform_grid(X, 8), BandwidthSpec.fixed(1.0))
    frame: pd.DataFrame = plot_frame(model, points=11)
    assert list(frame.columns) == ["x1", "fitted"]
    np.testing.assert_allclose(actual=frame["fitted"], desired=1.0 + 2.0 * frame["x1"], atol=1e-9)


def test_slice_holds_other_inputs_at_median() -> None:
    X, y = generate_affine(n=40, d=3, seed=4)
    model = sckls_fit(X, y, uniform_grid(X, 3), BandwidthSpec.fixed(2.0))
    frame: pd.DataFrame = plot_frame(model, points=5)
    assert len(frame) == 25
    assert frame["x3"].nunique() == 1
    with pytest.raises(DomainError):
        plot_frame(model, points=1)


def test_svg_is_reproducible(tmp_path) -> None:
    pytest.importorskip("matplotlib")
    X, y = generate_affine(n=25, d=2, seed=6)
    model = sckls_fit(X, y, uniform_grid(X, 4), BandwidthSpec.fixed(1.5))
    frame: pd.DataFrame = plot_frame(model, points=6)
    first = write_svg(tmp_path / "a.svg", frame, title="fit")
    second = write_svg(tmp_path / "b.svg", frame, title="fit")
    assert first.read_text().startswith("<?xml")
    assert first.read_text() == second.read_text()
